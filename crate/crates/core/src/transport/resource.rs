use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstrumentKind {
    ScpiSmu,
    XypStage,
}

impl InstrumentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstrumentKind::ScpiSmu => "SCPI_SMU",
            InstrumentKind::XypStage => "XYP_STAGE",
        }
    }
}

impl fmt::Display for InstrumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid resource string '{0}', expected TCPIP::<host>::<port>::SOCKET")]
pub struct ResourceIdError(pub String);

/// Socket address in VISA resource-string form, `TCPIP::<host>::<port>::SOCKET`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResourceId {
    pub host: String,
    pub port: u16,
}

impl ResourceId {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self { host: host.into(), port }
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TCPIP::{}::{}::SOCKET", self.host, self.port)
    }
}

impl FromStr for ResourceId {
    type Err = ResourceIdError;

    /// Interface prefix and `SOCKET` suffix are case-insensitive; a board
    /// number (`TCPIP0`) is accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ResourceIdError(s.to_string());
        let parts: Vec<&str> = s.trim().split("::").collect();
        let [iface, host, port, suffix] = parts.as_slice() else {
            return Err(bad());
        };
        let iface = iface.to_ascii_uppercase();
        let board_ok = iface
            .strip_prefix("TCPIP")
            .is_some_and(|n| n.chars().all(|c| c.is_ascii_digit()));
        if !board_ok || !suffix.eq_ignore_ascii_case("SOCKET") || host.is_empty() {
            return Err(bad());
        }
        if host.chars().any(|c| c.is_whitespace() || c == '/' || c == '@') {
            return Err(bad());
        }
        let port = port.parse::<u16>().map_err(|_| bad())?;
        Ok(Self { host: host.to_string(), port })
    }
}

impl TryFrom<String> for ResourceId {
    type Error = ResourceIdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ResourceId> for String {
    fn from(r: ResourceId) -> Self {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub resource_id: ResourceId,
    pub kind: InstrumentKind,
    pub label: String,
}
