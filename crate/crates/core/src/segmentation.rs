//! Turning a discussion into four date-anchored daily forecasts, and
//! checking the result against the source text.

use std::collections::HashSet;
use std::sync::OnceLock;

use chrono::{DateTime, Datelike, Days, FixedOffset, NaiveDate, Weekday};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{ChatBackend, ChatMessage, GatewayError};
use crate::model::{parse_compact_date, weekday_name, RawReport, SegmentedReport, FORECAST_DAYS};
use crate::text::{content_words, squash_whitespace, tokenize};
use crate::{Error, Result};

/// Share of a day's content words that must occur in the source.
pub const CONTAINMENT_THRESHOLD: f64 = 0.9;
/// Minimum number of non-empty days for a report to be kept.
pub const MIN_COVERAGE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineAnchor {
    pub mention: String,
    pub span: (usize, usize),
    #[serde(with = "crate::model::compact_date")]
    pub resolved: NaiveDate,
}

fn anchor_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(this\s+(?:morning|afternoon|evening)|today|tonight|tomorrow(?:\s+night)?|monday|tuesday|wednesday|thursday|friday|saturday|sunday)\b",
        )
        .unwrap()
    })
}

fn weekday_from_word(w: &str) -> Option<Weekday> {
    Some(match w {
        "monday" => Weekday::Mon,
        "tuesday" => Weekday::Tue,
        "wednesday" => Weekday::Wed,
        "thursday" => Weekday::Thu,
        "friday" => Weekday::Fri,
        "saturday" => Weekday::Sat,
        "sunday" => Weekday::Sun,
        _ => return None,
    })
}

/// Finds relative day expressions and resolves them against the local issue
/// date. A weekday name means its next occurrence on or after that date.
pub fn detect_anchors(body: &str, issue_local: DateTime<FixedOffset>) -> Vec<TimelineAnchor> {
    let issue = issue_local.date_naive();
    anchor_re()
        .find_iter(body)
        .map(|m| {
            let word = m.as_str().to_lowercase();
            let offset = if word.starts_with("tomorrow") {
                1
            } else if let Some(w) = weekday_from_word(&word) {
                (7 + w.num_days_from_monday() - issue.weekday().num_days_from_monday()) % 7
            } else {
                0
            };
            TimelineAnchor {
                mention: m.as_str().to_string(),
                span: (m.start(), m.end()),
                resolved: issue + Days::new(offset as u64),
            }
        })
        .collect()
}

pub enum SegmenterBackend<'a> {
    /// Sentence attribution: each sentence goes to the first anchor it
    /// contains, else to the nearest anchor before it, else to the issue
    /// date.
    RuleBased,
    Llm(&'a dyn ChatBackend),
}

pub fn segment(report: &RawReport, anchors: &[TimelineAnchor], backend: &SegmenterBackend<'_>) -> Result<SegmentedReport> {
    let texts = match backend {
        SegmenterBackend::RuleBased => attribute_sentences(report, anchors),
        SegmenterBackend::Llm(b) => llm_segment(report, *b)?,
    };
    let seg = SegmentedReport::from_texts(report, texts);
    if seg.coverage == 0 {
        return Err(Error::NoCoverage);
    }
    Ok(seg)
}

fn section_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\.[A-Z][A-Z0-9 /&-]*\.\.\.\s*").unwrap())
}

/// Sentence spans in `body`: a run of `.`, `!` or `?` followed by
/// whitespace ends a sentence, as does a blank line.
pub fn sentence_spans(body: &str) -> Vec<(usize, usize)> {
    let bytes = body.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let end = if matches!(b, b'.' | b'!' | b'?') {
            let mut j = i;
            while j < bytes.len() && matches!(bytes[j], b'.' | b'!' | b'?') {
                j += 1;
            }
            (j == bytes.len() || bytes[j].is_ascii_whitespace()).then_some(j)
        } else if b == b'\n' && body[i + 1..].trim_start_matches([' ', '\t', '\r']).starts_with('\n') {
            Some(i)
        } else {
            None
        };
        match end {
            Some(e) => {
                spans.push((start, e));
                start = e;
                i = e.max(i + 1);
            }
            None => i += 1,
        }
    }
    if start < body.len() {
        spans.push((start, body.len()));
    }
    spans
        .into_iter()
        .filter_map(|(s, e)| {
            // trim leading whitespace so spans start at the first visible char
            let off = body[s..e].len() - body[s..e].trim_start().len();
            let s = s + off;
            (s < e).then_some((s, e))
        })
        .collect()
}

fn attribute_sentences(report: &RawReport, anchors: &[TimelineAnchor]) -> [String; FORECAST_DAYS] {
    let issue = report.issue_date();
    let mut days: [Vec<String>; FORECAST_DAYS] = Default::default();
    for (s, e) in sentence_spans(&report.body) {
        let raw = &report.body[s..e];
        let text = squash_whitespace(section_header_re().replace(raw.trim(), "").as_ref());
        if !text.chars().any(char::is_alphanumeric) {
            continue;
        }
        let date = anchors
            .iter()
            .find(|a| a.span.0 >= s && a.span.1 <= e)
            .or_else(|| anchors.iter().rev().find(|a| a.span.1 <= s))
            .map(|a| a.resolved)
            .unwrap_or(issue);
        let offset = (date - issue).num_days();
        if (0..FORECAST_DAYS as i64).contains(&offset) {
            days[offset as usize].push(text);
        }
    }
    days.map(|sentences| sentences.join(" "))
}

/// The extraction prompt: strict rules, a worked splitting example, the
/// JSON template with the four target dates, and the source text.
pub fn segmentation_prompt(report: &RawReport) -> (String, String) {
    let issue = report.issue_date();
    let template: Vec<Value> = (0..FORECAST_DAYS)
        .map(|i| {
            let d = issue + Days::new(i as u64);
            json!({ "date": d.format("%Y%m%d").to_string(), "weekday": weekday_name(d.weekday()), "forecast": "" })
        })
        .collect();
    let template = serde_json::to_string_pretty(&json!({ "daily_forecast": template })).expect("json");
    let system = "You are an expert meteorological forecaster. Your task is to extract structured daily forecast information from the user's text.";
    let user = format!(
        "### STRICT RULES\n\n\
- Use ONLY the factual content provided in the original forecast.\n\
- DO NOT introduce new facts.\n\
- DO NOT guess missing information.\n\
- For any day where no explicit forecast is present, return an empty string.\n\
- Output MUST be valid JSON with the EXACT structure shown below.\n\
- Do NOT include commentary, explanation, or any text outside the JSON.\n\
- When splitting or extracting forecast content, **each output must be a complete, grammatically correct sentence.**\n\
- **Do NOT drop the subject or any essential clause** from the original sentence.\n\
- **Do NOT output sentence fragments. Every extracted entry must retain the original meaning and sentence structure.**\n\
- **If one sentence contains multiple time-specific clauses, you must split them into separate complete sentences, each with a proper subject.**\n\n\
### EXAMPLE OF REQUIRED SPLITTING\n\n\
Original: A cold front approaches the region from the west on Wednesday and likely stalls or washes out over the area into Thursday.\n\
Correct split:\n\
1. A cold front approaches the region from the west on Wednesday.\n\
2. The cold front washes out over the area into Thursday.\n\n\
### REQUIRED JSON OUTPUT FORMAT\n\n{template}\n\n\
Extract the corresponding forecast content for each date from the text below.\n\
ORIGINAL FORECAST TEXT:\n\n{}\n\nReturn ONLY the JSON. No explanations.\n",
        report.body.trim()
    );
    (system.to_string(), user)
}

/// Pulls a JSON value out of a model reply, tolerating code fences and a
/// bare `"key": [...]` fragment.
pub fn extract_json(reply: &str) -> Option<Value> {
    let mut s = reply.trim();
    if let Some(rest) = s.strip_prefix("```") {
        s = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        s = s.trim_end().trim_end_matches("```");
    }
    let s = s.trim();
    if let Ok(v) = serde_json::from_str(s) {
        return Some(v);
    }
    if let Ok(v) = serde_json::from_str(&format!("{{{s}}}")) {
        return Some(v);
    }
    let start = s.find(['{', '['])?;
    let close = if s.as_bytes()[start] == b'{' { '}' } else { ']' };
    let end = s.rfind(close)?;
    serde_json::from_str(&s[start..=end]).ok()
}

fn llm_segment(report: &RawReport, backend: &dyn ChatBackend) -> Result<[String; FORECAST_DAYS]> {
    let (system, user) = segmentation_prompt(report);
    let reply = backend.chat(&[ChatMessage::system(system), ChatMessage::user(user)])?;
    let schema = |m: String| Error::Backend(GatewayError::Schema(m));
    let v = extract_json(&reply).ok_or_else(|| schema(format!("segmentation reply is not JSON: {reply}")))?;
    let items = v
        .get("daily_forecast")
        .unwrap_or(&v)
        .as_array()
        .ok_or_else(|| schema("segmentation reply lacks a daily_forecast list".into()))?;
    let issue = report.issue_date();
    let mut days: [String; FORECAST_DAYS] = Default::default();
    for item in items {
        let raw_date = item.get("date").and_then(Value::as_str).unwrap_or_default();
        let date = parse_compact_date(raw_date).ok_or_else(|| schema(format!("bad date {raw_date:?}")))?;
        let offset = (date - issue).num_days();
        if !(0..FORECAST_DAYS as i64).contains(&offset) {
            return Err(schema(format!("content assigned to {raw_date}, outside the forecast window")));
        }
        let text = item.get("forecast").and_then(Value::as_str).unwrap_or_default().trim();
        let slot = &mut days[offset as usize];
        if !text.is_empty() {
            if !slot.is_empty() {
                slot.push(' ');
            }
            slot.push_str(text);
        }
    }
    Ok(days)
}

pub fn coverage_filter(seg: &SegmentedReport) -> bool {
    seg.coverage >= MIN_COVERAGE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub substring_ok: Vec<bool>,
    pub dates_ok: Vec<bool>,
    pub passed: bool,
}

/// Checks each non-empty day: its content words come from the source (at
/// least 90% of them, so sentence-completion edits are tolerated), and its
/// date is the issue date or one the text refers to.
pub fn verify(original: &RawReport, seg: &SegmentedReport, anchors: &[TimelineAnchor]) -> VerificationResult {
    let source: HashSet<String> = tokenize(&original.body).into_iter().collect();
    let issue = original.issue_date();
    let known: HashSet<NaiveDate> = anchors.iter().map(|a| a.resolved).chain([issue]).collect();
    let mut substring_ok = Vec::with_capacity(seg.days.len());
    let mut dates_ok = Vec::with_capacity(seg.days.len());
    for day in &seg.days {
        if day.is_empty() {
            substring_ok.push(true);
            dates_ok.push(true);
            continue;
        }
        let words = content_words(&day.forecast);
        let present = words.iter().filter(|w| source.contains(*w)).count();
        substring_ok.push(words.is_empty() || present as f64 >= CONTAINMENT_THRESHOLD * words.len() as f64);
        dates_ok.push(known.contains(&day.date));
    }
    let passed = substring_ok.iter().chain(&dates_ok).all(|ok| *ok);
    VerificationResult { substring_ok, dates_ok, passed }
}

/// A failed verification queued for manual review.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewItem {
    pub report_id: String,
    pub verification: VerificationResult,
}
