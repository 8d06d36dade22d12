//! Loading forecast discussions from an AFOS text archive, thinning them to
//! one report per local day, and pairing each report with the reanalysis
//! time slot it describes.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use chrono::{DateTime, Duration as ChronoDuration, FixedOffset, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Timelike, Utc};
use chrono_tz::Tz;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::RawReport;
use crate::stations::Station;
use crate::{Error, Result};

pub const DEFAULT_AFOS_URL: &str = "https://mesonet.agron.iastate.edu/cgi-bin/afos/retrieve.py";
pub const AFOS_URL_ENV: &str = "WFR_AFOS_URL";

/// Reanalysis fields are available every six hours.
pub const ERA5_STEP_HOURS: i64 = 6;
/// A report describes a slot if issued within this many hours after it.
pub const ALIGN_WINDOW_HOURS: i64 = 3;
/// Reports on consecutive days closer than this are treated as duplicates.
pub const ADJACENCY_HOURS: i64 = 6;

#[derive(Debug, Clone)]
pub struct ArchiveClient {
    pub endpoint: String,
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for ArchiveClient {
    fn default() -> Self {
        ArchiveClient {
            endpoint: std::env::var(AFOS_URL_ENV).unwrap_or_else(|_| DEFAULT_AFOS_URL.to_string()),
            retry_budget: 2,
            backoff_base_ms: 500,
            cache_dir: None,
            timeout_secs: 60,
        }
    }
}

impl ArchiveClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ArchiveClient { endpoint: endpoint.into(), ..Default::default() }
    }

    /// All discussion products for `station` issued on local dates
    /// `start..=end`, ascending by issue time.
    pub fn fetch_reports(&self, station: Station, start: NaiveDate, end: NaiveDate) -> Result<Vec<RawReport>> {
        if start > end {
            return Err(Error::InvalidRange(format!("{start} is after {end}")));
        }
        let text = self.get_with_retry(station, start, end)?;
        let mut reports = Vec::new();
        for product in split_products(&text) {
            let report = parse_product(station, product)?;
            let local_day = report.issue_date();
            if local_day < start || local_day > end {
                continue;
            }
            if let Some(dir) = &self.cache_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(format!("{}.txt", report.id())), product)?;
            }
            reports.push(report);
        }
        reports.sort_by_key(|r| r.issued_at);
        reports.dedup_by(|a, b| a.issued_at == b.issued_at && a.body == b.body);
        Ok(reports)
    }

    fn get_with_retry(&self, station: Station, start: NaiveDate, end: NaiveDate) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(self.timeout_secs.max(1))))
            .build()
            .into();
        // the archive takes UTC dates with an exclusive end; widen by a day
        // on each side and filter on local dates afterwards
        let sdate = (start - ChronoDuration::days(1)).format("%Y-%m-%d").to_string();
        let edate = (end + ChronoDuration::days(2)).format("%Y-%m-%d").to_string();
        let pil = format!("AFD{}", station.code());
        let mut attempt = 0;
        loop {
            let outcome = agent
                .get(&self.endpoint)
                .query("pil", &pil)
                .query("sdate", &sdate)
                .query("edate", &edate)
                .query("fmt", "text")
                .query("limit", "9999")
                .call()
                .map_err(|e| e.to_string())
                .and_then(|resp| {
                    let status = resp.status().as_u16();
                    let body = resp.into_body().read_to_string().map_err(|e| e.to_string())?;
                    if (200..300).contains(&status) {
                        Ok(body)
                    } else {
                        Err(format!("status {status}"))
                    }
                });
            match outcome {
                Ok(body) => return Ok(body),
                Err(e) if attempt >= self.retry_budget => {
                    return Err(Error::Network(format!("{e} after {} attempts", attempt + 1)))
                }
                Err(_) => {
                    std::thread::sleep(Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << attempt.min(16))));
                    attempt += 1;
                }
            }
        }
    }
}

/// Products in the archive's text format are framed by SOH/ETX control
/// characters; an unframed reply is a single product.
pub fn split_products(text: &str) -> Vec<&str> {
    if text.contains('\u{1}') || text.contains('\u{3}') {
        text.split(['\u{1}', '\u{3}']).filter(|p| !p.trim().is_empty()).collect()
    } else if text.trim().is_empty() {
        Vec::new()
    } else {
        vec![text]
    }
}

fn issued_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^\s*(\d{3,4})\s+(AM|PM)\s+([A-Z]{3,4})\s+[A-Za-z]{3}\s+([A-Za-z]{3})\s+(\d{1,2})\s+(\d{4})\s*$")
            .unwrap()
    })
}

fn zone_offset(abbrev: &str) -> Option<i32> {
    let hours = match abbrev {
        "UTC" | "GMT" => 0,
        "EDT" => -4,
        "EST" | "CDT" => -5,
        "CST" | "MDT" => -6,
        "MST" | "PDT" => -7,
        "PST" | "AKDT" => -8,
        "AKST" => -9,
        "HST" => -10,
        _ => return None,
    };
    Some(hours * 3600)
}

/// Parses one AFD product. The issue time comes from the local timestamp
/// line ("340 PM EDT Fri Sep 27 2019"); the body is everything after it up
/// to the `$$` terminator.
pub fn parse_product(station: Station, product: &str) -> Result<RawReport> {
    let caps = issued_line()
        .captures(product)
        .ok_or_else(|| Error::Parse(format!("{station}: no issuance line")))?;
    let hhmm = &caps[1];
    let (h, m) = hhmm.split_at(hhmm.len() - 2);
    let (mut hour, minute): (u32, u32) = (h.parse().unwrap_or(99), m.parse().unwrap_or(99));
    if !(1..=12).contains(&hour) || minute > 59 {
        return Err(Error::Parse(format!("{station}: bad time {hhmm}")));
    }
    match &caps[2] {
        "AM" if hour == 12 => hour = 0,
        "PM" if hour != 12 => hour += 12,
        _ => {}
    }
    let offset = zone_offset(&caps[3])
        .and_then(FixedOffset::east_opt)
        .ok_or_else(|| Error::Parse(format!("{station}: unknown zone {}", &caps[3])))?;
    let date_str = format!("{} {} {}", &caps[4], &caps[5], &caps[6]);
    let date = NaiveDate::parse_from_str(&date_str, "%b %d %Y")
        .map_err(|e| Error::Parse(format!("{station}: bad date {date_str:?}: {e}")))?;
    let naive = NaiveDateTime::new(date, NaiveTime::from_hms_opt(hour, minute, 0).expect("range checked"));
    let issued_at = offset
        .from_local_datetime(&naive)
        .single()
        .ok_or_else(|| Error::Parse(format!("{station}: ambiguous time")))?;

    let rest = &product[caps.get(0).expect("whole match").end()..];
    let body = rest.split("\n$$").next().unwrap_or(rest).trim();
    RawReport::new(station, issued_at, body).map_err(|_| Error::Parse(format!("{station}: empty body")))
}

/// Keeps at most one report per local calendar day (the earliest issued
/// that day), then drops any kept report issued less than six hours after
/// the previously kept one.
pub fn dedup_daily(reports: &[RawReport]) -> Result<Vec<RawReport>> {
    let Some(first) = reports.first() else { return Ok(Vec::new()) };
    if let Some(other) = reports.iter().find(|r| r.station != first.station) {
        return Err(Error::MixedStations(first.station.to_string(), other.station.to_string()));
    }
    let mut by_day: BTreeMap<NaiveDate, &RawReport> = BTreeMap::new();
    for r in reports {
        by_day
            .entry(r.issue_date())
            .and_modify(|kept| {
                if r.issued_at < kept.issued_at {
                    *kept = r;
                }
            })
            .or_insert(r);
    }
    let mut out: Vec<RawReport> = Vec::with_capacity(by_day.len());
    for r in by_day.into_values() {
        if let Some(prev) = out.last() {
            if r.issued_at - prev.issued_at < ChronoDuration::hours(ADJACENCY_HOURS) {
                continue;
            }
        }
        out.push(r.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub station: Station,
    pub era5_utc: DateTime<Utc>,
    pub era5_local: DateTime<FixedOffset>,
    pub report_local_issue: DateTime<FixedOffset>,
    pub matched: bool,
}

impl AlignmentRecord {
    pub fn gap(&self) -> ChronoDuration {
        self.report_local_issue.signed_duration_since(self.era5_local)
    }
}

/// Pairs a report with the latest six-hourly slot at or before its issue
/// time; the pair matches when the report came out within three hours of
/// that slot.
pub fn align_era5(report: &RawReport, tz: Tz) -> AlignmentRecord {
    let utc = report.issued_at.with_timezone(&Utc);
    let floored_hour = utc.hour() as i64 / ERA5_STEP_HOURS * ERA5_STEP_HOURS;
    let slot = utc
        .date_naive()
        .and_hms_opt(floored_hour as u32, 0, 0)
        .expect("valid hour")
        .and_utc();
    let local = |t: DateTime<Utc>| {
        let off = tz.offset_from_utc_datetime(&t.naive_utc());
        t.with_timezone(&chrono::Offset::fix(&off))
    };
    let report_local_issue = local(utc);
    let era5_local = local(slot);
    let gap = report_local_issue.signed_duration_since(era5_local);
    AlignmentRecord {
        station: report.station,
        era5_utc: slot,
        era5_local,
        report_local_issue,
        matched: gap >= ChronoDuration::zero() && gap < ChronoDuration::hours(ALIGN_WINDOW_HOURS),
    }
}
