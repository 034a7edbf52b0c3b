use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use bytes::Bytes;
use msbc_core::wire::Ctid;
use msbc_gateway::{Authorization, GatewayEvent, Receiver};

/// Receiver that records everything a gateway is told.
#[derive(Default)]
pub struct Probe {
    deny: BTreeSet<String>,
    data: Mutex<BTreeMap<Ctid, Vec<Bytes>>>,
    events: Mutex<Vec<(Instant, GatewayEvent)>>,
    asked: Mutex<Vec<Ctid>>,
}

impl Probe {
    pub fn denying<I, S>(ctids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Probe {
            deny: ctids.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn received(&self, ctid: &Ctid) -> Vec<Bytes> {
        self.data
            .lock()
            .unwrap()
            .get(ctid)
            .cloned()
            .unwrap_or_default()
    }

    pub fn all_received(&self) -> BTreeMap<Ctid, Vec<Bytes>> {
        self.data.lock().unwrap().clone()
    }

    pub fn received_count(&self) -> usize {
        self.data.lock().unwrap().values().map(Vec::len).sum()
    }

    pub fn events(&self) -> Vec<GatewayEvent> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .map(|(_, e)| e.clone())
            .collect()
    }

    /// When `event` was first seen at or after `since`.
    pub fn seen_at(&self, event: &GatewayEvent, since: Option<Instant>) -> Option<Instant> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .find(|(at, e)| e == event && since.is_none_or(|s| *at >= s))
            .map(|(at, _)| *at)
    }

    pub fn authorizations(&self) -> Vec<Ctid> {
        self.asked.lock().unwrap().clone()
    }
}

impl Receiver for Probe {
    fn on_data(&self, ctid: &Ctid, data: Bytes) {
        self.data
            .lock()
            .unwrap()
            .entry(ctid.clone())
            .or_default()
            .push(data);
    }

    fn on_event(&self, event: GatewayEvent) {
        self.events.lock().unwrap().push((Instant::now(), event));
    }

    fn authorize(&self, ctid: &Ctid) -> Authorization {
        self.asked.lock().unwrap().push(ctid.clone());
        if self.deny.contains(ctid.as_str()) {
            Authorization::Deny
        } else {
            Authorization::Allow
        }
    }
}
