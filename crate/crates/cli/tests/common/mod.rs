//! Synthetic data shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod pipeline;

use chrono::{DateTime, Datelike, Days, FixedOffset, NaiveDate, TimeZone, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::Rng;

use wxcorpus::augmentation::CandidateReport;
use wxcorpus::claims::KeywordMatcher;
use wxcorpus::model::{weekday_name, Claim, DayAnnotation, InstanceRecord, RawReport, SegmentedReport};
use wxcorpus::{AnnotationProtocol, Station};

/// Sentences without any protocol keyword.
pub const FILLERS: [&str; 6] = [
    "Confidence remains average",
    "Details may change",
    "Guidance agrees well",
    "Little change is expected",
    "Skies vary through the period",
    "Visibility stays good",
];

pub struct Bank {
    pub protocol: AnnotationProtocol,
    pub matcher: KeywordMatcher,
}

impl Bank {
    pub fn new() -> Self {
        let protocol = AnnotationProtocol::default_protocol();
        let matcher = KeywordMatcher::new(&protocol);
        Bank { protocol, matcher }
    }

    pub fn keyword<R: Rng>(&self, rng: &mut R, c: Claim) -> String {
        self.protocol.keywords(c).choose(rng).expect("non-empty keyword list").clone()
    }

    /// One sentence per claim plus an optional filler, in random order.
    pub fn day_text<R: Rng>(&self, rng: &mut R, claims: &[Claim]) -> String {
        let mut parts: Vec<String> = claims.iter().map(|c| format!("Expect {}", self.keyword(rng, *c))).collect();
        if rng.gen_bool(0.5) || parts.is_empty() {
            parts.push(FILLERS.choose(rng).unwrap().to_string());
        }
        parts.shuffle(rng);
        parts.join(". ") + "."
    }

    pub fn random_claims<R: Rng>(&self, rng: &mut R, max: usize) -> Vec<Claim> {
        let n = rng.gen_range(1..=max);
        let mut all = Claim::ALL.to_vec();
        all.shuffle(rng);
        all.truncate(n);
        all
    }
}

pub fn aly() -> Station {
    "ALY".parse().unwrap()
}

pub fn issue_time(day_index: u64) -> DateTime<FixedOffset> {
    let utc = Utc.with_ymd_and_hms(2019, 1, 1, 11, 30, 0).unwrap() + Days::new(day_index);
    aly().to_local(utc.fixed_offset())
}

/// An instance whose gold labels come from rule-based extraction of
/// generated day texts. Roughly one day in six is left empty.
pub fn synthetic_instance<R: Rng>(rng: &mut R, bank: &Bank, idx: u64) -> InstanceRecord {
    let issued = issue_time(idx);
    let report = RawReport::new(aly(), issued, "synthetic").unwrap();
    let texts: [String; 4] = std::array::from_fn(|d| {
        if d > 0 && rng.gen_bool(1.0 / 6.0) {
            String::new()
        } else {
            let claims = bank.random_claims(rng, 3);
            bank.day_text(rng, &claims)
        }
    });
    let seg = SegmentedReport::from_texts(&report, texts);
    let annotations = seg
        .days
        .iter()
        .map(|d| wxcorpus::claims::extract_with(&bank.matcher, d, &bank.protocol))
        .collect();
    InstanceRecord {
        id: report.id(),
        city: report.city.clone(),
        time: issued,
        image_refs: wxcorpus::prompting::VARIABLES.iter().map(|(n, _)| format!("img/{n}.png")).collect(),
        segmented: seg,
        annotations,
    }
}

/// A candidate day text: a paraphrase with the gold claims, one extra
/// claim, or a dropped claim.
pub fn candidate_day<R: Rng>(rng: &mut R, bank: &Bank, gold: &DayAnnotation) -> String {
    let mut claims: Vec<Claim> = gold.claims.iter().copied().collect();
    let roll: f64 = rng.gen();
    if roll < 0.55 {
        // same claims
    } else if roll < 0.8 {
        let extra: Vec<Claim> = Claim::ALL.iter().copied().filter(|c| !gold.claims.contains(c)).collect();
        claims.push(*extra.choose(rng).unwrap());
    } else if !claims.is_empty() {
        claims.remove(rng.gen_range(0..claims.len()));
    }
    if claims.is_empty() {
        return FILLERS.choose(rng).unwrap().to_string() + ".";
    }
    bank.day_text(rng, &claims)
}

pub fn candidate_pool<R: Rng>(rng: &mut R, bank: &Bank, inst: &InstanceRecord, n: usize) -> Vec<CandidateReport> {
    (0..n)
        .map(|_| {
            let texts = inst.annotations.iter().map(|g| candidate_day(rng, bank, g)).collect();
            CandidateReport::score(inst, texts, &bank.protocol, &bank.matcher).unwrap()
        })
        .collect()
}

/// A discussion product in the archive's text layout, issued at `local`.
pub fn afd_product(local: DateTime<FixedOffset>, body: &str) -> String {
    let (pm, h12) = local.hour12();
    let zone = if local.offset().local_minus_utc() == -4 * 3600 { "EDT" } else { "EST" };
    format!(
        "000\nFXUS61 KALY {}\nAFDALY\n\nArea Forecast Discussion\nNational Weather Service Albany NY\n{}{:02} {} {} {} {} {:02} {}\n\n{}\n\n&&\n\n$$\n",
        local.with_timezone(&Utc).format("%d%H%M"),
        h12,
        local.minute(),
        if pm { "PM" } else { "AM" },
        zone,
        &weekday_name(local.weekday())[..3],
        local.format("%b"),
        local.day(),
        local.year(),
        body
    )
}

/// A body naming the issue day and the next three weekdays, one claim-bearing
/// sentence each.
pub fn afd_body<R: Rng>(rng: &mut R, bank: &Bank, issue: NaiveDate) -> String {
    let mut s = String::from(".SYNOPSIS...\n");
    let claims = bank.random_claims(rng, 2);
    s.push_str(&format!("Today, {}\n\n.SHORT TERM...\n", lower_first(&bank.day_text(rng, &claims))));
    for k in 1..4u64 {
        let d = issue + Days::new(k);
        let claims = bank.random_claims(rng, 2);
        s.push_str(&format!("On {}, {} ", weekday_name(d.weekday()), lower_first(&bank.day_text(rng, &claims))));
    }
    s.trim_end().to_string()
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Framed archive reply for a run of consecutive days, with a second
/// same-day update on every fifth day.
pub fn archive_reply<R: Rng>(rng: &mut R, bank: &Bank, first: NaiveDate, days: u64) -> String {
    let mut out = String::new();
    for k in 0..days {
        let date = first + Days::new(k);
        let local = aly().to_local(
            Utc.from_utc_datetime(&date.and_hms_opt(8, 15, 0).unwrap()).fixed_offset(),
        );
        let body = afd_body(rng, bank, local.date_naive());
        out.push('\u{1}');
        out.push_str(&afd_product(local, &body));
        out.push('\u{3}');
        if k % 5 == 0 {
            let later = local + chrono::Duration::hours(6);
            out.push('\u{1}');
            out.push_str(&afd_product(later, &afd_body(rng, bank, later.date_naive())));
            out.push('\u{3}');
        }
    }
    out
}
