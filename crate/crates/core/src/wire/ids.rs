use std::fmt;
use std::str::FromStr;

use super::WireError;

fn is_id_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-')
}

/// Connected Thing Identifier: the only device identity the network knows.
///
/// 1 to 64 characters from `A-Z a-z 0-9 . _ -`, compared byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ctid(String);

impl Ctid {
    pub const MAX_LEN: usize = 64;

    pub fn new(value: impl Into<String>) -> Result<Self, WireError> {
        let value = value.into();
        if value.is_empty() || value.len() > Self::MAX_LEN || !value.bytes().all(is_id_char) {
            return Err(WireError::InvalidCtid(value));
        }
        Ok(Ctid(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Ctid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Ctid {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ctid::new(s)
    }
}

impl AsRef<str> for Ctid {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Per-session wire number. Wire 0 is the service wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WireId(pub u32);

impl WireId {
    pub const SERVICE: WireId = WireId(0);

    pub fn is_service(self) -> bool {
        self.0 == 0
    }

    pub fn is_bearer(self) -> bool {
        self.0 >= 1
    }
}

impl fmt::Display for WireId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for WireId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_decimal::<u32>(s)
            .map(WireId)
            .ok_or_else(|| WireError::InvalidField("Wire", s.to_owned()))
    }
}

/// Transaction id correlating a frame with its report.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxnId(String);

impl TxnId {
    pub const MIN_LEN: usize = 8;
    pub const MAX_LEN: usize = 32;

    pub fn new(value: impl Into<String>) -> Result<Self, WireError> {
        let value = value.into();
        if value.len() < Self::MIN_LEN
            || value.len() > Self::MAX_LEN
            || !value.bytes().all(is_id_char)
        {
            return Err(WireError::InvalidTxn(value));
        }
        Ok(TxnId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Monotonic transaction id source.
///
/// Ids are `t` followed by the counter in lowercase hex, zero padded to
/// eight digits. The counter is 64 bits wide so ids never repeat within the
/// lifetime of one generator.
#[derive(Debug, Clone, Default)]
pub struct TxnGenerator {
    counter: u64,
}

impl TxnGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts the counter after `issued` ids, e.g. to resume a sequence.
    pub fn starting_after(issued: u64) -> Self {
        TxnGenerator { counter: issued }
    }

    pub fn next_txn(&mut self) -> TxnId {
        self.counter = self
            .counter
            .checked_add(1)
            .expect("transaction counter exhausted");
        TxnId(format!("t{:08x}", self.counter))
    }

    pub fn issued(&self) -> u64 {
        self.counter
    }
}

/// Strict unsigned decimal: digits only, no sign, no leading zeros except "0".
pub(crate) fn parse_decimal<T: FromStr>(s: &str) -> Option<T> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0'))
    {
        return None;
    }
    s.parse().ok()
}
