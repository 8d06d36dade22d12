//! Shared domain types: aspects, claims, reports, daily segments and
//! annotations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, Utc, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::stations::Station;
use crate::Error;

/// Number of heatmap variables attached to an instance by default.
pub const DEFAULT_VARIABLE_COUNT: usize = 12;

/// Number of consecutive days a report is segmented into.
pub const FORECAST_DAYS: usize = 4;

/// One of the eight discussion topics of a forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Aspect {
    Temperature,
    Wind,
    Humidity,
    FrontalSystem,
    PressureSystem,
    WavePattern,
    WindFlowSystem,
    Event,
}

impl Aspect {
    pub const ALL: [Aspect; 8] = [
        Aspect::Temperature,
        Aspect::Wind,
        Aspect::Humidity,
        Aspect::FrontalSystem,
        Aspect::PressureSystem,
        Aspect::WavePattern,
        Aspect::WindFlowSystem,
        Aspect::Event,
    ];

    /// Canonical snake_case identifier used on the wire.
    pub fn wire_name(self) -> &'static str {
        match self {
            Aspect::Temperature => "temperature",
            Aspect::Wind => "wind",
            Aspect::Humidity => "humidity",
            Aspect::FrontalSystem => "frontal_system",
            Aspect::PressureSystem => "pressure_system",
            Aspect::WavePattern => "wave_pattern",
            Aspect::WindFlowSystem => "wind_flow_system",
            Aspect::Event => "event",
        }
    }

    /// Spaced title-case name, as shown in "Focus on" lines.
    pub fn display_name(self) -> &'static str {
        match self {
            Aspect::Temperature => "Temperature",
            Aspect::Wind => "Wind",
            Aspect::Humidity => "Humidity",
            Aspect::FrontalSystem => "Frontal System",
            Aspect::PressureSystem => "Pressure System",
            Aspect::WavePattern => "Wave Pattern",
            Aspect::WindFlowSystem => "Wind Flow System",
            Aspect::Event => "Event",
        }
    }

    /// Lenient lookup accepting wire names, display names and the mixed
    /// casings model outputs tend to use ("Pressure_System", "frontal system").
    pub fn parse_loose(s: &str) -> Option<Aspect> {
        let key = loose_key(s);
        Aspect::ALL.into_iter().find(|a| loose_key(a.wire_name()) == key)
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::parse_loose(s).ok_or_else(|| Error::UnknownAspect(s.to_string()))
    }
}

/// One of the eighteen fine-grained claim categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Claim {
    HotWarm,
    CoolCold,
    Moderate,
    StrongWind,
    LightWind,
    DryAir,
    MoistAir,
    ColdFront,
    WarmFront,
    HighPressure,
    LowPressure,
    Ridge,
    Trough,
    OnshoreFlow,
    OffshoreFlow,
    Precipitation,
    Snow,
    Storm,
}

impl Claim {
    pub const ALL: [Claim; 18] = [
        Claim::HotWarm,
        Claim::CoolCold,
        Claim::Moderate,
        Claim::StrongWind,
        Claim::LightWind,
        Claim::DryAir,
        Claim::MoistAir,
        Claim::ColdFront,
        Claim::WarmFront,
        Claim::HighPressure,
        Claim::LowPressure,
        Claim::Ridge,
        Claim::Trough,
        Claim::OnshoreFlow,
        Claim::OffshoreFlow,
        Claim::Precipitation,
        Claim::Snow,
        Claim::Storm,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            Claim::HotWarm => "hot_warm",
            Claim::CoolCold => "cool_cold",
            Claim::Moderate => "moderate",
            Claim::StrongWind => "strong_wind",
            Claim::LightWind => "light_wind",
            Claim::DryAir => "dry_air",
            Claim::MoistAir => "moist_air",
            Claim::ColdFront => "cold_front",
            Claim::WarmFront => "warm_front",
            Claim::HighPressure => "high_pressure",
            Claim::LowPressure => "low_pressure",
            Claim::Ridge => "ridge",
            Claim::Trough => "trough",
            Claim::OnshoreFlow => "onshore_flow",
            Claim::OffshoreFlow => "offshore_flow",
            Claim::Precipitation => "precipitation",
            Claim::Snow => "snow",
            Claim::Storm => "storm",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Claim::HotWarm => "Hot / Warm",
            Claim::CoolCold => "Cool / Cold",
            Claim::Moderate => "Moderate",
            Claim::StrongWind => "Strong wind",
            Claim::LightWind => "Light wind",
            Claim::DryAir => "Dry air",
            Claim::MoistAir => "Moist air",
            Claim::ColdFront => "Cold front",
            Claim::WarmFront => "Warm front",
            Claim::HighPressure => "High pressure",
            Claim::LowPressure => "Low pressure",
            Claim::Ridge => "Ridge",
            Claim::Trough => "Trough",
            Claim::OnshoreFlow => "Onshore flow",
            Claim::OffshoreFlow => "Offshore flow",
            Claim::Precipitation => "Precipitation",
            Claim::Snow => "Snow",
            Claim::Storm => "Storm",
        }
    }

    /// Lenient lookup. Besides the wire names this accepts the variants seen
    /// in extractor replies, e.g. "Cold_Front", "cool_temperature".
    pub fn parse_loose(s: &str) -> Option<Claim> {
        let key = loose_key(s);
        if let Some(c) = Claim::ALL.into_iter().find(|c| loose_key(c.wire_name()) == key) {
            return Some(c);
        }
        let alias = match key.as_str() {
            "hotwarm" | "hot" | "warm" | "hottemperature" | "warmtemperature" => Claim::HotWarm,
            "coolcold" | "cool" | "cold" | "cooltemperature" | "coldtemperature" => {
                Claim::CoolCold
            }
            "moderatetemperature" | "mildtemperature" => Claim::Moderate,
            "dry" => Claim::DryAir,
            "moist" | "humid" => Claim::MoistAir,
            _ => return None,
        };
        Some(alias)
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for Claim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Claim::parse_loose(s).ok_or_else(|| Error::UnknownClaim(s.to_string()))
    }
}

fn loose_key(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

macro_rules! wire_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.wire_name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

wire_serde!(Aspect);
wire_serde!(Claim);

/// Calendar dates travel as `YYYYMMDD`.
pub mod compact_date {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&d.format("%Y%m%d").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_compact_date(&raw).ok_or_else(|| serde::de::Error::custom(format!("bad date {raw:?}")))
    }
}

pub fn parse_compact_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    if raw.len() != 8 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(raw, "%Y%m%d").ok()
}

pub fn weekday_name(w: Weekday) -> &'static str {
    match w {
        Weekday::Mon => "Monday",
        Weekday::Tue => "Tuesday",
        Weekday::Wed => "Wednesday",
        Weekday::Thu => "Thursday",
        Weekday::Fri => "Friday",
        Weekday::Sat => "Saturday",
        Weekday::Sun => "Sunday",
    }
}

/// A raw Area Forecast Discussion product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReport {
    pub station: Station,
    pub city: String,
    pub issued_at: DateTime<FixedOffset>,
    pub body: String,
}

impl RawReport {
    pub fn new(station: Station, issued_at: DateTime<FixedOffset>, body: impl Into<String>) -> Result<Self, Error> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(Error::EmptyBody);
        }
        Ok(RawReport { station, city: station.info().city.to_string(), issued_at, body })
    }

    /// `{station}_{issued_at_utc}`, also the cache file stem.
    pub fn id(&self) -> String {
        format!(
            "{}_{}",
            self.station,
            self.issued_at.with_timezone(&Utc).format("%Y%m%dT%H%MZ")
        )
    }

    /// Issuance in the station's own zone.
    pub fn issued_local(&self) -> DateTime<FixedOffset> {
        self.station.to_local(self.issued_at)
    }

    pub fn issue_date(&self) -> NaiveDate {
        self.issued_local().date_naive()
    }
}

/// One day's slice of a report. The weekday is always derived from the date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DailyForecast {
    pub date: NaiveDate,
    pub forecast: String,
}

impl DailyForecast {
    pub fn new(date: NaiveDate, forecast: impl Into<String>) -> Self {
        DailyForecast { date, forecast: forecast.into() }
    }

    pub fn empty(date: NaiveDate) -> Self {
        Self::new(date, String::new())
    }

    pub fn weekday(&self) -> &'static str {
        weekday_name(self.date.weekday())
    }

    pub fn is_empty(&self) -> bool {
        self.forecast.trim().is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct DailyForecastWire {
    #[serde(with = "compact_date")]
    date: NaiveDate,
    #[serde(default, skip_deserializing)]
    weekday: String,
    #[serde(default)]
    forecast: String,
}

impl Serialize for DailyForecast {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DailyForecastWire { date: self.date, weekday: self.weekday().to_string(), forecast: self.forecast.clone() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DailyForecast {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = DailyForecastWire::deserialize(d)?;
        Ok(DailyForecast { date: w.date, forecast: w.forecast })
    }
}

/// A report cut into four consecutive days starting at the local issue date.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedReport {
    pub report_id: String,
    pub station: Station,
    pub issued_at: DateTime<FixedOffset>,
    #[serde(rename = "daily_forecast")]
    pub days: Vec<DailyForecast>,
    pub coverage: usize,
}

impl SegmentedReport {
    /// Builds the canonical four-day layout from per-day texts.
    pub fn from_texts(report: &RawReport, texts: [String; FORECAST_DAYS]) -> Self {
        let start = report.issue_date();
        let days: Vec<DailyForecast> = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| DailyForecast::new(start + chrono::Days::new(i as u64), t))
            .collect();
        let coverage = days.iter().filter(|d| !d.is_empty()).count();
        SegmentedReport {
            report_id: report.id(),
            station: report.station,
            issued_at: report.issued_at,
            days,
            coverage,
        }
    }

    pub fn issue_date(&self) -> NaiveDate {
        self.station.to_local(self.issued_at).date_naive()
    }

    /// Checks the four-consecutive-days layout and the coverage count.
    pub fn validate(&self) -> Result<(), Error> {
        if self.days.len() != FORECAST_DAYS {
            return Err(Error::InvalidSegmentation(format!("expected {FORECAST_DAYS} days, got {}", self.days.len())));
        }
        let start = self.issue_date();
        for (i, d) in self.days.iter().enumerate() {
            let want = start + chrono::Days::new(i as u64);
            if d.date != want {
                return Err(Error::InvalidSegmentation(format!("day {i} dated {} but expected {want}", d.date)));
            }
        }
        let covered = self.days.iter().filter(|d| !d.is_empty()).count();
        if covered != self.coverage {
            return Err(Error::InvalidSegmentation(format!("coverage {} but {covered} non-empty days", self.coverage)));
        }
        Ok(())
    }
}

/// Claim and aspect labels for one forecast day.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DayAnnotation {
    pub date: Option<NaiveDate>,
    pub claims: BTreeSet<Claim>,
    pub aspects: BTreeSet<Aspect>,
}

impl DayAnnotation {
    pub fn new(date: NaiveDate, claims: impl IntoIterator<Item = Claim>, aspects: impl IntoIterator<Item = Aspect>) -> Self {
        DayAnnotation { date: Some(date), claims: claims.into_iter().collect(), aspects: aspects.into_iter().collect() }
    }

    pub fn empty(date: NaiveDate) -> Self {
        DayAnnotation { date: Some(date), ..Default::default() }
    }
}

#[derive(Serialize, Deserialize)]
struct DayAnnotationWire {
    #[serde(default, with = "opt_compact_date", skip_serializing_if = "Option::is_none")]
    date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none", skip_deserializing)]
    weekday: Option<String>,
    #[serde(default)]
    claims: BTreeSet<Claim>,
    #[serde(default, alias = "aspect")]
    aspects: BTreeSet<Aspect>,
}

mod opt_compact_date {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<NaiveDate>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => super::compact_date::serialize(d, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(r) => super::parse_compact_date(&r)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("bad date {r:?}"))),
        }
    }
}

impl Serialize for DayAnnotation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        DayAnnotationWire {
            date: self.date,
            weekday: self.date.map(|d| weekday_name(d.weekday()).to_string()),
            claims: self.claims.clone(),
            aspects: self.aspects.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DayAnnotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = DayAnnotationWire::deserialize(d)?;
        Ok(DayAnnotation { date: w.date, claims: w.claims, aspects: w.aspects })
    }
}

/// A training/evaluation instance: visual inputs plus the segmented,
/// annotated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub city: String,
    pub time: DateTime<FixedOffset>,
    pub image_refs: Vec<String>,
    pub segmented: SegmentedReport,
    pub annotations: Vec<DayAnnotation>,
}

impl InstanceRecord {
    pub fn validate(&self, variable_count: usize) -> Result<(), Error> {
        if self.image_refs.len() != variable_count {
            return Err(Error::InvalidInstance(format!(
                "{}: {} image refs, expected {variable_count}",
                self.id,
                self.image_refs.len()
            )));
        }
        self.segmented.validate()?;
        if self.annotations.len() != self.segmented.days.len() {
            return Err(Error::InvalidInstance(format!("{}: annotations do not cover every day", self.id)));
        }
        Ok(())
    }

    /// Gold text per day.
    pub fn gold_texts(&self) -> Vec<&str> {
        self.segmented.days.iter().map(|d| d.forecast.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loose_claim_names() {
        assert_eq!(Claim::parse_loose("Cold_Front"), Some(Claim::ColdFront));
        assert_eq!(Claim::parse_loose("cool_temperature"), Some(Claim::CoolCold));
        assert_eq!(Claim::parse_loose("high_pressure"), Some(Claim::HighPressure));
        assert_eq!(Claim::parse_loose("blizzard"), None);
        assert_eq!(Aspect::parse_loose("Pressure_System"), Some(Aspect::PressureSystem));
        assert_eq!(Aspect::parse_loose("Frontal System"), Some(Aspect::FrontalSystem));
    }

    #[test]
    fn weekday_is_derived() {
        let raw = r#"{"date":"20190927","weekday":"Monday","forecast":"x"}"#;
        let d: DailyForecast = serde_json::from_str(raw).unwrap();
        assert_eq!(d.weekday(), "Friday");
        let back = serde_json::to_value(&d).unwrap();
        assert_eq!(back["weekday"], "Friday");
    }

    #[test]
    fn compact_dates_reject_garbage() {
        assert!(parse_compact_date("2019-09-27").is_none());
        assert!(parse_compact_date("20191327").is_none());
        assert_eq!(parse_compact_date("20190927"), NaiveDate::from_ymd_opt(2019, 9, 27));
    }
}
