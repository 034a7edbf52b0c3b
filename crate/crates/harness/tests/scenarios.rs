use std::path::{Path, PathBuf};
use std::process::Command;

use msbc_harness::{comparable_log, run_scenario, Scenario};

const SMALL: &str = "\
name small
provider health sip:asgw@health
rule heart-* health
step start_broker
step start_gateway health asgw sip:asgw@health provider=health
step start_gateway home lgw sip:lgw@home
step attach home heart-1
step attach home heart-2
step transmit home heart-1 20 64
step transmit health heart-2 5 16
step detach home heart-2
step expect_data health heart-1 from=home
step stop_gateway home
";

fn golden() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "msbc"))
        .collect();
    files.sort();
    files
}

fn temp_file(name: &str, text: &str) -> PathBuf {
    let path = std::env::temp_dir().join(format!("msbc-{}-{name}", std::process::id()));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn golden_suite_parses() {
    let files = golden();
    let names: Vec<String> = files
        .iter()
        .map(|p| Scenario::load(p).unwrap().name)
        .collect();
    for want in [
        "add_remove_ct",
        "transfer",
        "clean_shutdown",
        "watchdog",
        "access_switch",
        "as_migration",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn same_seed_gives_the_same_log_and_payloads() {
    let s = Scenario::parse(SMALL).unwrap();
    let a = run_scenario(&s, 42).await.unwrap();
    let b = run_scenario(&s, 42).await.unwrap();
    assert!(!a.events.is_empty());
    assert_eq!(comparable_log(&a.events), comparable_log(&b.events));
    assert_eq!(a.sent, b.sent);
    assert_eq!(a.received, b.received);
    assert_eq!(a.report.packets_delivered, 25);
    assert_eq!(a.report.teardown_clean, Some(true));

    let c = run_scenario(&s, 43).await.unwrap();
    assert_ne!(a.sent, c.sent);
    assert_eq!(comparable_log(&a.events), comparable_log(&c.events));
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_expectation_names_the_line_and_carries_the_log() {
    let text = format!("{SMALL}step assert_metric packets_delivered > 1000\nstep wait 1\n");
    let s = Scenario::parse(&text).unwrap();
    let failed = run_scenario(&s, 1).await.unwrap_err();
    assert_eq!(failed.line, SMALL.lines().count() + 1);
    assert!(failed.step.contains("assert_metric"));
    assert!(!failed.log.is_empty());
    assert_eq!(failed.report.packets_delivered, 25);
    let shown = failed.to_string();
    assert!(shown.contains("failed at line"), "{shown}");
    assert!(shown.contains("session.opened"), "{shown}");
}

#[tokio::test(flavor = "multi_thread")]
async fn denied_and_unroutable_attachments() {
    let text = "\
provider health sip:asgw@health
rule heart-* health
rule milk-* grocery-missing
";
    assert!(Scenario::parse(text).is_err());
    let text = "\
provider health sip:asgw@health
provider grocery sip:asgw@grocery
rule heart-* health
rule milk-* grocery
step start_broker
step start_gateway health asgw sip:asgw@health provider=health deny=heart-9
step start_gateway home lgw sip:lgw@home
step attach home heart-9 expect=denied
step attach home milk-1 expect=provider-unavailable
step attach home heart-1 expect=commissioned
";
    let r = run_scenario(&Scenario::parse(text).unwrap(), 1)
        .await
        .unwrap();
    assert_eq!(r.gateways["home"].commissioned.len(), 1);
}

#[tokio::test]
async fn empty_scenario_gives_an_empty_report() {
    let s = Scenario::parse("# nothing\n").unwrap();
    assert_eq!(s.name, "unnamed");
    let r = run_scenario(&s, 1).await.unwrap();
    assert!(r.report.is_empty());
    assert_eq!(r.report.to_string(), "");
    assert!(r.events.is_empty());
}

#[test]
fn cli_exit_codes_and_report_file() {
    let bin = env!("CARGO_BIN_EXE_msbc-harness");
    let ok = temp_file("ok.msbc", SMALL);
    let report = std::env::temp_dir().join(format!("msbc-{}-report.txt", std::process::id()));
    let out = Command::new(bin)
        .args([
            "run",
            ok.to_str().unwrap(),
            "--seed",
            "7",
            "--report",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let written = std::fs::read_to_string(&report).unwrap();
    assert!(written.contains("scenario=small"));
    assert!(written.contains("packets_delivered=25"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), written);

    let failing = temp_file(
        "fail.msbc",
        &format!("{SMALL}step assert_metric packets_lost > 0\n"),
    );
    let out = Command::new(bin)
        .args(["run", failing.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed at line"));

    let broken = temp_file("broken.msbc", "step fly home\n");
    let out = Command::new(bin)
        .args(["run", broken.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin)
        .args(["smart-home", "--duration", "2"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("wires=11"));

    for p in [ok, failing, broken, report] {
        let _ = std::fs::remove_file(p);
    }
}
