//! The 31 forecast offices and their IANA time zones.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, FixedOffset, Offset, TimeZone};
use chrono_tz::Tz;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Error;

const STATIONS_JSON: &str = include_str!("../data/stations.json");

#[derive(Debug, Clone, Deserialize)]
pub struct StationInfo {
    pub code: String,
    pub city: String,
    pub region: String,
    pub timezone: String,
    #[serde(skip, default = "default_tz")]
    pub tz: Tz,
}

fn default_tz() -> Tz {
    Tz::UTC
}

fn table() -> &'static [StationInfo] {
    static TABLE: OnceLock<Vec<StationInfo>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rows: Vec<StationInfo> = serde_json::from_str(STATIONS_JSON).expect("bundled station table");
        for r in &mut rows {
            r.tz = r.timezone.parse().expect("bundled station zone");
        }
        rows
    })
}

/// A station code known to the bundled table.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Station(u8);

impl Station {
    pub fn all() -> impl Iterator<Item = Station> {
        (0..table().len() as u8).map(Station)
    }

    pub fn info(self) -> &'static StationInfo {
        &table()[self.0 as usize]
    }

    pub fn code(self) -> &'static str {
        &self.info().code
    }

    pub fn tz(self) -> Tz {
        self.info().tz
    }

    /// Converts an instant into the station's local wall clock, keeping the
    /// offset that applied at that instant.
    pub fn to_local(self, t: DateTime<FixedOffset>) -> DateTime<FixedOffset> {
        let local = t.with_timezone(&self.tz());
        let off = local.offset().fix();
        off.from_utc_datetime(&t.naive_utc())
    }
}

impl fmt::Debug for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Station({})", self.code())
    }
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Station {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let code = s.trim().to_ascii_uppercase();
        table()
            .iter()
            .position(|r| r.code == code)
            .map(|i| Station(i as u8))
            .ok_or_else(|| Error::UnknownStation(s.to_string()))
    }
}

impl Serialize for Station {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Station {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
