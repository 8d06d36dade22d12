//! Day-level claim labelling: a deterministic keyword matcher, an LLM
//! extractor, aspect repair, and cross-checking of two extractors.

use std::collections::{BTreeSet, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{ChatBackend, ChatMessage};
use crate::model::{Aspect, Claim, DailyForecast, DayAnnotation};
use crate::protocol::AnnotationProtocol;
use crate::segmentation::extract_json;
use crate::text::clauses;
use crate::{Error, Result};

/// Extra LLM attempts when the returned aspects disagree with the claims.
pub const REPAIR_RETRIES: usize = 2;

/// Leftmost-longest phrase matcher over the protocol's keywords.
///
/// Matches are non-overlapping and never cross clause punctuation, so
/// "warm front" claims the word "warm" and does not also count as warm
/// temperatures.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    phrases: HashMap<Vec<String>, Claim>,
    longest: usize,
}

impl KeywordMatcher {
    pub fn new(protocol: &AnnotationProtocol) -> Self {
        let mut phrases = HashMap::new();
        for e in protocol.entries() {
            for kw in &e.keywords {
                phrases.insert(kw.split(' ').map(str::to_string).collect::<Vec<_>>(), e.claim);
            }
        }
        let longest = phrases.keys().map(Vec::len).max().unwrap_or(0);
        KeywordMatcher { phrases, longest }
    }

    /// Each match as (claim, matched phrase).
    pub fn matches(&self, text: &str) -> Vec<(Claim, String)> {
        let mut out = Vec::new();
        for clause in clauses(text) {
            let mut i = 0;
            while i < clause.len() {
                let max = self.longest.min(clause.len() - i);
                let hit = (1..=max).rev().find_map(|n| self.phrases.get(&clause[i..i + n]).map(|c| (*c, n)));
                match hit {
                    Some((claim, n)) => {
                        out.push((claim, clause[i..i + n].join(" ")));
                        i += n;
                    }
                    None => i += 1,
                }
            }
        }
        out
    }

    pub fn claims(&self, text: &str) -> BTreeSet<Claim> {
        self.matches(text).into_iter().map(|(c, _)| c).collect()
    }
}

fn aspects_of(claims: &BTreeSet<Claim>, protocol: &AnnotationProtocol) -> BTreeSet<Aspect> {
    claims.iter().map(|c| protocol.claim_aspect(*c)).collect()
}

pub fn extract_rule_based(day: &DailyForecast, protocol: &AnnotationProtocol) -> DayAnnotation {
    extract_with(&KeywordMatcher::new(protocol), day, protocol)
}

/// Same as [`extract_rule_based`] with a prebuilt matcher.
pub fn extract_with(matcher: &KeywordMatcher, day: &DailyForecast, protocol: &AnnotationProtocol) -> DayAnnotation {
    let claims = matcher.claims(&day.forecast);
    let aspects = aspects_of(&claims, protocol);
    DayAnnotation { date: Some(day.date), claims, aspects }
}

/// Recomputes aspects from claims. The flag reports whether the incoming
/// aspect set disagreed.
pub fn repair_consistency(ann: &DayAnnotation, protocol: &AnnotationProtocol) -> (DayAnnotation, bool) {
    let aspects = aspects_of(&ann.claims, protocol);
    let repaired = aspects != ann.aspects;
    (DayAnnotation { date: ann.date, claims: ann.claims.clone(), aspects }, repaired)
}

/// Renders the keyword dictionary the way the extraction prompt lists it.
fn keyword_dictionary(protocol: &AnnotationProtocol) -> Value {
    let mut root = serde_json::Map::new();
    for aspect in protocol.aspects() {
        let mut claims = serde_json::Map::new();
        for c in protocol.claims_of(aspect) {
            claims.insert(c.wire_name().into(), json!(protocol.keywords(c)));
        }
        root.insert(aspect.wire_name().into(), Value::Object(claims));
    }
    Value::Object(root)
}

pub fn extraction_prompt(days: &[DailyForecast], protocol: &AnnotationProtocol) -> (String, String) {
    let system = "You are an advanced weather forecast text analysis model.\n\
Your task is to analyze the meaning of the forecast texts semantically and\n\
classify each day's forecast into the most relevant meteorological categories\n\
and subcategories.";
    let claims: Vec<&str> = protocol.entries().iter().map(|e| e.claim.wire_name()).collect();
    let aspects: Vec<&str> = protocol.aspects().iter().map(|a| a.wire_name()).collect();
    let forecast = serde_json::to_string_pretty(&json!({ "daily_forecast": days })).expect("json");
    let user = format!(
        "The valid classification hierarchy is defined below:\n## group_dict (Keyword Groups)\n{}\n\n\
Each subcategory contains example words or phrases. These examples serve as\n\
semantic references, not strict matching tokens. You should classify the\n\
forecast based on meaning.\n\n## daily_forecast (Input Data for All Days)\n{forecast}\n\n---\n\n\
Please output **strict JSON**, formatted as a list:\n[\n{{\n    \"date\": \"YYYYMMDD\",\n    \"weekday\": \"xxx\",\n    \
\"claims\": [\"high_pressure\", \"storm\"],\n    \"aspects\": [\"pressure_system\", \"event\"]\n}},\n...\n]\n\n\
Requirements:\n\n- **claims**:\nThe detected **claims** (from `group_dict`).\nEach selected subcategory must be chosen from the valid list:\n{}\n\n\
- **aspects**:\nThe parent **categories** corresponding to each subcategory.\nEach category must be selected from:\n{}\n\n\
### RULES\n\n1. Do **not** rely solely on exact word matching; use **semantic interpretation**.\n\
2. If no keywords are detected for a day, return empty lists.\n\
3. Do **not** output explanations, comments, markdown, or any text outside valid JSON.\n\
4. Output must be valid JSON at the top level—no trailing commas.\n",
        serde_json::to_string_pretty(&keyword_dictionary(protocol)).expect("json"),
        claims.join(", "),
        aspects.join(", "),
    );
    (system.to_string(), user)
}

/// Parses an extraction reply (a JSON list of per-day objects) into
/// annotations. The claim vocabulary is closed.
pub fn parse_extraction_reply(reply: &str) -> Result<Vec<DayAnnotation>> {
    let v = extract_json(reply).ok_or_else(|| Error::Schema(format!("extraction reply is not JSON: {reply}")))?;
    let items = match v.get("daily_forecast").unwrap_or(&v) {
        Value::Array(a) => a.clone(),
        obj @ Value::Object(_) => vec![obj.clone()],
        _ => return Err(Error::Schema("extraction reply must be a list".into())),
    };
    items.iter().map(parse_day).collect()
}

fn parse_day(item: &Value) -> Result<DayAnnotation> {
    let strings = |key: &str| -> Result<Vec<String>> {
        match item.get(key) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| x.as_str().map(str::to_string).ok_or_else(|| Error::Schema(format!("{key} entries must be strings"))))
                .collect(),
            Some(_) => Err(Error::Schema(format!("{key} must be a list"))),
        }
    };
    let date = match item.get("date").and_then(Value::as_str) {
        Some(d) => Some(crate::model::parse_compact_date(d).ok_or_else(|| Error::Schema(format!("bad date {d:?}")))?),
        None => None,
    };
    let claims = strings("claims")?
        .iter()
        .map(|c| Claim::parse_loose(c).ok_or_else(|| Error::Schema(format!("unknown claim {c:?}"))))
        .collect::<Result<BTreeSet<_>>>()?;
    let aspect_key = if item.get("aspects").is_some() { "aspects" } else { "aspect" };
    let aspects = strings(aspect_key)?
        .iter()
        .map(|a| Aspect::parse_loose(a).ok_or_else(|| Error::Schema(format!("unknown aspect {a:?}"))))
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(DayAnnotation { date, claims, aspects })
}

/// Asks the backend to label one day. If the reply's aspects disagree
/// with its claims the request is repeated up to [`REPAIR_RETRIES`] times;
/// after that the aspect set recomputed from the claims is used.
pub fn extract_llm(day: &DailyForecast, protocol: &AnnotationProtocol, backend: &dyn ChatBackend) -> Result<DayAnnotation> {
    let (system, user) = extraction_prompt(std::slice::from_ref(day), protocol);
    let messages = [ChatMessage::system(system), ChatMessage::user(user)];
    let mut last = None;
    for _ in 0..=REPAIR_RETRIES {
        let reply = backend.chat(&messages)?;
        let parsed = parse_extraction_reply(&reply)?;
        let ann = match parsed.len() {
            0 => DayAnnotation::empty(day.date),
            1 => parsed.into_iter().next().expect("one item"),
            _ => parsed
                .into_iter()
                .find(|a| a.date == Some(day.date))
                .ok_or_else(|| Error::Schema(format!("reply has no entry for {}", day.date)))?,
        };
        let (fixed, repaired) = repair_consistency(&ann, protocol);
        let fixed = DayAnnotation { date: Some(day.date), ..fixed };
        if !repaired {
            return Ok(fixed);
        }
        last = Some(fixed);
    }
    Ok(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionDisagreement {
    pub instance_id: String,
    #[serde(with = "crate::model::compact_date")]
    pub date: NaiveDate,
    pub only_in_a: BTreeSet<Claim>,
    pub only_in_b: BTreeSet<Claim>,
}

/// One record per day where the two extractors' claim sets differ.
pub fn cross_check(instance_id: &str, a: &[DayAnnotation], b: &[DayAnnotation]) -> Result<Vec<ExtractionDisagreement>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let mut out = Vec::new();
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.date.is_some() && y.date.is_some() && x.date != y.date {
            return Err(Error::DateMismatch(i));
        }
        if x.claims == y.claims {
            continue;
        }
        out.push(ExtractionDisagreement {
            instance_id: instance_id.to_string(),
            date: x.date.or(y.date).unwrap_or_default(),
            only_in_a: x.claims.difference(&y.claims).copied().collect(),
            only_in_b: y.claims.difference(&x.claims).copied().collect(),
        });
    }
    Ok(out)
}
