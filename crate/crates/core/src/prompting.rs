//! Generation prompts (aspect-controlled and baseline few-shot), the
//! structured `<<DATE, WEEKDAY>> Report:` format, and judge ranking prompts.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{parse_compact_date, weekday_name, Aspect, DailyForecast, InstanceRecord};
use crate::{Error, Result};

/// The twelve input variables, in rendering order, with their prompt
/// descriptions.
pub const VARIABLES: [(&str, &str); 12] = [
    ("land_sea_mask", "The proportion of land as opposed to ocean or inland waters."),
    (
        "10m_u_component_of_wind",
        "The eastward component of the 10m wind, representing horizontal air motion toward the east.",
    ),
    (
        "10m_v_component_of_wind",
        "The northward component of the 10m wind, representing horizontal air motion toward the north.",
    ),
    ("2m_temperature", "Air temperature measured at 2 meters above the surface."),
    ("mean_sea_level_pressure", "Atmospheric pressure adjusted to mean sea level."),
    ("sea_surface_temperature", "Temperature of seawater near the surface."),
    ("snow_depth", "Depth of snow over snow-covered areas."),
    ("surface_pressure", "Atmospheric pressure at the surface."),
    ("total_cloud_cover", "Fraction of a grid cell covered by clouds."),
    ("total_precipitation_6hr", "Total precipitation accumulated over the past 6 hours."),
    ("total_column_water_vapour", "Vertically integrated water vapor content."),
    ("total_column_water", "Vertically integrated liquid water content."),
];

const BASELINE_SYSTEM: &str = "As an AI assistant with expertise in severe weather analysis and forecasting, you are equipped to interpret comprehensive figures that illustrate various weather variables crucial for understanding the latest weather conditions across {City}. Your responsibility as a weather forecaster is to produce a general weather forecast for the future using the current weather condition images provided.";

const GENERATION_INSTRUCTION: &str = "You must generate a concise multi-day weather forecast based on a template. For each day, replace the placeholder content with a natural language summary consistent with the weather phenomena represented in the figures. Keep the description concise and focused on the keyword groups listed for each date.";

const FEW_SHOT_INTRO: &str = "Below are a few examples of weather analysis to help understand how the region and type of concern relate to different weather conditions:";

pub const RANKING_SYSTEM_PROMPT: &str = "You are an expert meteorological evaluator specializing in assessing the quality of generated weather forecasts.
Here is a weather forecasting scenario, including the ground truth forecast and eight candidate predicted forecasts.
From the perspective of a professional weather analyst, you are required to rank the quality of these responses based on the following criteria:
(1) Consistency with the meteorological facts in the ground truth forecast (short for Fact.Cons);
(2) Quality of summarization of key weather signals without introducing misleading emphasis or irrelevant detail (short for Summ.Qual).
Rubric Definitions:
- Fact.Cons evaluates whether the predicted forecast is factually consistent with the ground truth in terms of key meteorological variables (e.g., temperature, precipitation, wind, synoptic systems), temporal alignment, and physical plausibility. Hallucinated or incorrect weather events should be heavily penalized.
- Summ.Qual evaluates how well the response summarizes the key weather signals clearly and concisely, without introducing misleading emphasis, unnecessary detail, or obscuring the main forecast narrative.
To help you rank these responses, we additionally provide background information, including forecast period, key weather variables, and the reference forecast.
You should generate the response in the following format:
Fact.Cons: R9 > R2 ... > R1;
Summ.Qual: R9 > R2 ... > R1.
After the rankings, provide several sentences explaining your evaluation.
Important guidelines:
- Focus only on factual and meteorological correctness.
- Penalize hallucinated weather events or incorrect trends heavily.
- Overly verbose answers that obscure the core forecast should be ranked lower in Summ.Qual.
- Minor wording differences are acceptable if the facts are preserved.";

pub const RANKING_CANDIDATES: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayPlan {
    #[serde(with = "crate::model::compact_date")]
    pub date: NaiveDate,
    #[serde(default)]
    pub focus: Vec<Aspect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub city: String,
    pub issue_time: DateTime<FixedOffset>,
    pub days: Vec<DayPlan>,
    pub variables: Vec<(String, String)>,
    #[serde(default)]
    pub few_shot: Vec<FewShotExample>,
}

impl PromptSpec {
    /// A spec with the standard variable table and no examples.
    pub fn new(city: impl Into<String>, issue_time: DateTime<FixedOffset>, days: Vec<DayPlan>) -> Self {
        PromptSpec {
            city: city.into(),
            issue_time,
            days,
            variables: VARIABLES.iter().map(|(n, d)| (n.to_string(), d.to_string())).collect(),
            few_shot: Vec::new(),
        }
    }

    /// Plans the days of an instance with gold aspects as focus.
    pub fn from_instance(rec: &InstanceRecord) -> Self {
        let days = rec
            .segmented
            .days
            .iter()
            .zip(&rec.annotations)
            .map(|(d, a)| DayPlan { date: d.date, focus: a.aspects.iter().copied().collect() })
            .collect();
        PromptSpec::new(rec.city.clone(), rec.time, days)
    }

    pub fn validate(&self, aspect_control: bool) -> Result<()> {
        if self.days.is_empty() {
            return Err(Error::Config("prompt spec has no days".into()));
        }
        for (name, _) in &self.variables {
            if !VARIABLES.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("unknown variable {name}")));
            }
        }
        if aspect_control {
            if let Some(d) = self.days.iter().find(|d| d.focus.is_empty()) {
                return Err(Error::Config(format!("day {} has no focus aspects", d.date.format("%Y%m%d"))));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub images: Vec<String>,
}

pub fn marker(date: NaiveDate) -> String {
    format!("<<{}, {}>> Report:", date.format("%Y%m%d"), weekday_name(date.weekday()))
}

pub fn focus_line(aspects: &[Aspect]) -> String {
    let names: Vec<&str> = aspects.iter().map(|a| a.display_name()).collect();
    format!("## Focus on: {} ##", names.join(", "))
}

fn encode_parameters(time: &DateTime<FixedOffset>, variables: &[(String, String)]) -> String {
    let mut s = format!(
        "The following {} figures represent weather conditions at {}, and each figure contains a weather parameter. The variable in each figure is provided as follows:",
        variables.len(),
        time.format("%Y-%m-%d %H:%M %:z")
    );
    for (name, def) in variables {
        s.push_str(&format!("\n- {name}: {def}"));
    }
    s
}

fn template(days: &[DayPlan], aspect_control: bool) -> String {
    let mut s = String::from("<Template>");
    for d in days {
        s.push_str(&marker(d.date));
        s.push('\n');
        if aspect_control {
            s.push_str(&focus_line(&d.focus));
            s.push('\n');
        }
        s.push('\n');
    }
    s.push_str("## </Template>");
    s
}

/// The problem block (parameters plus template) for one issue time.
pub fn problem_block(time: &DateTime<FixedOffset>, variables: &[(String, String)], days: &[DayPlan], aspect_control: bool) -> String {
    format!("{}\n{}", encode_parameters(time, variables), template(days, aspect_control))
}

pub fn build_generation_prompt(spec: &PromptSpec, aspect_control: bool) -> PromptBundle {
    let system = BASELINE_SYSTEM.replace("{City}", &spec.city);
    let mut user = String::from(GENERATION_INSTRUCTION);
    if !spec.few_shot.is_empty() {
        user.push_str(" <Example>");
        user.push_str(FEW_SHOT_INTRO);
        user.push('\n');
        for (i, ex) in spec.few_shot.iter().enumerate() {
            user.push_str(&format!("Example {} input:\n{}\nExample {} answer:\n{}\n", i + 1, ex.input, i + 1, ex.answer));
        }
        user.push_str("<\\Example>");
    }
    user.push_str(" <Problem>");
    user.push_str(&problem_block(&spec.issue_time, &spec.variables, &spec.days, aspect_control));
    user.push_str("<\\Problem>");
    PromptBundle { system, user, images: Vec::new() }
}

/// Renders days in the structured answer format.
pub fn render_structured(days: &[DailyForecast]) -> String {
    let mut s = String::new();
    for d in days {
        s.push_str(&marker(d.date));
        s.push('\n');
        s.push_str(&d.forecast);
        s.push_str(" ##\n\n");
    }
    s
}

/// Earlier instances of the same city and calendar month, usable as
/// few-shot examples.
pub struct FewShotArchive<'a> {
    records: Vec<&'a InstanceRecord>,
}

impl<'a> FewShotArchive<'a> {
    pub fn new(records: impl IntoIterator<Item = &'a InstanceRecord>) -> Self {
        FewShotArchive { records: records.into_iter().collect() }
    }

    /// Up to `n` records from years strictly before `test_time`, most recent
    /// first.
    pub fn retrieve(&self, test_time: DateTime<FixedOffset>, city: &str, n: usize) -> Vec<&'a InstanceRecord> {
        let mut hits: Vec<&InstanceRecord> = self
            .records
            .iter()
            .copied()
            .filter(|r| r.city == city && r.time.month() == test_time.month() && r.time.year() < test_time.year())
            .collect();
        hits.sort_by(|a, b| b.time.cmp(&a.time));
        hits.truncate(n);
        hits
    }
}

pub fn retrieve_few_shot<'a>(
    test_time: DateTime<FixedOffset>,
    city: &str,
    archive: &FewShotArchive<'a>,
    n: usize,
) -> Vec<&'a InstanceRecord> {
    archive.retrieve(test_time, city, n)
}

pub fn few_shot_example(rec: &InstanceRecord, aspect_control: bool) -> FewShotExample {
    let spec = PromptSpec::from_instance(rec);
    FewShotExample {
        input: problem_block(&spec.issue_time, &spec.variables, &spec.days, aspect_control),
        answer: render_structured(&rec.segmented.days),
    }
}

/// One day recovered from model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDay {
    pub raw_date: String,
    pub weekday: String,
    pub date: Option<NaiveDate>,
    /// The date did not parse, or the weekday disagrees with it.
    pub malformed: bool,
    pub forecast: String,
}

impl ParsedDay {
    pub fn to_daily(&self) -> Option<DailyForecast> {
        self.date.map(|d| DailyForecast::new(d, self.forecast.clone()))
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<<\s*([^,<>]*?)\s*,\s*([^<>]*?)\s*>>\s*Report:").unwrap())
}

fn focus_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*##[ \t]*Focus on:.*$").unwrap())
}

fn clean_body(raw: &str) -> String {
    let without_focus = focus_re().replace_all(raw, "");
    let mut s = without_focus.trim();
    while let Some(rest) = s.strip_suffix("##") {
        s = rest.trim_end();
    }
    s.trim().to_string()
}

pub fn parse_generated(text: &str) -> Result<Vec<ParsedDay>> {
    let caps: Vec<_> = marker_re().captures_iter(text).collect();
    if caps.is_empty() {
        return Err(Error::NoMarkers);
    }
    let mut out = Vec::with_capacity(caps.len());
    for (i, c) in caps.iter().enumerate() {
        let whole = c.get(0).unwrap();
        let end = caps.get(i + 1).map(|n| n.get(0).unwrap().start()).unwrap_or(text.len());
        let raw_date = c[1].to_string();
        let weekday = c[2].to_string();
        let date = parse_compact_date(&raw_date);
        let malformed = match date {
            Some(d) => !weekday.eq_ignore_ascii_case(weekday_name(d.weekday())),
            None => true,
        };
        out.push(ParsedDay { raw_date, weekday, date, malformed, forecast: clean_body(&text[whole.end()..end]) });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingPrompt {
    pub system: String,
    pub user: String,
    pub warnings: Vec<String>,
}

pub fn build_ranking_prompt(gold: &str, candidates: &[String]) -> Result<RankingPrompt> {
    if candidates.len() != RANKING_CANDIDATES {
        return Err(Error::WrongArity(candidates.len()));
    }
    let mut warnings = Vec::new();
    if gold.trim().is_empty() {
        warnings.push("ground truth forecast is empty".to_string());
    }
    let mut user = format!("Ground Truth Forecast:\n{gold}\nCandidate Forecasts:\n");
    for (i, c) in candidates.iter().enumerate() {
        if c.trim().is_empty() {
            warnings.push(format!("candidate R{} is empty", i + 1));
        }
        user.push_str(&format!("R{}: {}\n", i + 1, c));
    }
    user.push_str("Please rank them following the required format.");
    Ok(RankingPrompt { system: RANKING_SYSTEM_PROMPT.to_string(), user, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub fact_cons: Vec<String>,
    pub summ_qual: Vec<String>,
}

impl Ranking {
    /// Labels ranked first under (Fact.Cons, Summ.Qual).
    pub fn top1(&self) -> (&str, &str) {
        (&self.fact_cons[0], &self.summ_qual[0])
    }
}

/// Share of rankings placing `label` first, per criterion.
pub fn top1_share(rankings: &[Ranking], label: &str) -> (f64, f64) {
    if rankings.is_empty() {
        return (0.0, 0.0);
    }
    let n = rankings.len() as f64;
    let fact = rankings.iter().filter(|r| r.top1().0 == label).count() as f64;
    let summ = rankings.iter().filter(|r| r.top1().1 == label).count() as f64;
    (fact / n, summ / n)
}

fn ordering_after(reply: &str, head: &Regex) -> Result<Vec<String>> {
    let c = head.captures(reply).ok_or_else(|| Error::MalformedRanking(format!("missing {}", head.as_str())))?;
    let labels: Vec<String> = c[1].split('>').map(|l| l.trim().to_ascii_uppercase()).collect();
    let set: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    if set.len() != labels.len() {
        return Err(Error::MalformedRanking(format!("duplicate label in {}", &c[1])));
    }
    let k = labels.len();
    let expected: BTreeSet<String> = (1..=k).map(|i| format!("R{i}")).collect();
    if labels.iter().any(|l| !expected.contains(l)) {
        return Err(Error::MalformedRanking(format!("not a permutation of R1..R{k}: {}", &c[1])));
    }
    Ok(labels)
}

pub fn parse_ranking(reply: &str) -> Result<Ranking> {
    static FACT: OnceLock<Regex> = OnceLock::new();
    static SUMM: OnceLock<Regex> = OnceLock::new();
    let fact = FACT.get_or_init(|| Regex::new(r"(?i)Fact\.?\s*Cons\s*:\s*((?:R\d+\s*>\s*)*R\d+)").unwrap());
    let summ = SUMM.get_or_init(|| Regex::new(r"(?i)Summ\.?\s*Qual\s*:\s*((?:R\d+\s*>\s*)*R\d+)").unwrap());
    let fact_cons = ordering_after(reply, fact)?;
    let summ_qual = ordering_after(reply, summ)?;
    if fact_cons.len() != summ_qual.len() {
        return Err(Error::MalformedRanking("criteria rank different candidate sets".into()));
    }
    Ok(Ranking { fact_cons, summ_qual })
}

pub fn format_ranking(r: &Ranking) -> String {
    format!("Fact.Cons: {};\nSumm.Qual: {}.", r.fact_cons.join(" > "), r.summ_qual.join(" > "))
}
