//! Rejection-sampling dataset construction: keep sampled sub-reports whose
//! day-level claims match gold exactly, pick the ones furthest from the
//! gold wording, and recombine them into full reports.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::KeywordMatcher;
use crate::gateway::{Embedder, GatewayError};
use crate::metrics::step_f1;
use crate::model::{DailyForecast, InstanceRecord};
use crate::prompting::{build_generation_prompt, parse_generated, render_structured, PromptSpec};
use crate::protocol::AnnotationProtocol;
use crate::text::tokenize;
use crate::{Error, Result};

pub const PERFECT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDay {
    pub text: String,
    pub step_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub instance_id: String,
    pub days: Vec<CandidateDay>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CandidateReport {
    /// Scores per-day texts against the instance's gold annotations.
    pub fn score(
        instance: &InstanceRecord,
        texts: Vec<String>,
        protocol: &AnnotationProtocol,
        matcher: &KeywordMatcher,
    ) -> Result<CandidateReport> {
        if texts.len() != instance.annotations.len() {
            return Err(Error::LengthMismatch { left: texts.len(), right: instance.annotations.len() });
        }
        let days = texts
            .into_iter()
            .zip(&instance.annotations)
            .map(|(text, gold)| {
                let f1 = step_f1(&matcher.claims(&text), &gold.claims, protocol);
                CandidateDay { text, step_f1: f1 }
            })
            .collect();
        Ok(CandidateReport { instance_id: instance.id.clone(), days, temperature: None, seed: None })
    }

    /// Parses a structured model answer and scores it. Days missing from the
    /// answer, or with malformed markers, count as empty text.
    pub fn from_generated(
        instance: &InstanceRecord,
        generated: &str,
        protocol: &AnnotationProtocol,
        matcher: &KeywordMatcher,
    ) -> Result<CandidateReport> {
        let parsed = parse_generated(generated)?;
        let texts = instance
            .segmented
            .days
            .iter()
            .map(|d| {
                parsed
                    .iter()
                    .find(|p| !p.malformed && p.date == Some(d.date))
                    .map(|p| p.forecast.clone())
                    .unwrap_or_default()
            })
            .collect();
        Self::score(instance, texts, protocol, matcher)
    }
}

fn is_perfect(f1: f64) -> bool {
    (f1 - 1.0).abs() <= PERFECT_EPS
}

/// Per day index, the candidate texts with step F1 = 1, in candidate order.
/// Days with no such text are absent.
pub fn step_filter(candidates: &[CandidateReport]) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for c in candidates {
        for (i, d) in c.days.iter().enumerate() {
            if is_perfect(d.step_f1) {
                out.entry(i).or_default().push(d.text.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityStrategy {
    EditDistance,
    TfIdfCosine,
    Jaccard,
    EmbeddingCosine,
}

impl DiversityStrategy {
    pub const ALL: [DiversityStrategy; 4] =
        [Self::EditDistance, Self::TfIdfCosine, Self::Jaccard, Self::EmbeddingCosine];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::EditDistance => "edit",
            Self::TfIdfCosine => "tfidf",
            Self::Jaccard => "jaccard",
            Self::EmbeddingCosine => "embedding",
        }
    }
}

/// A single strategy, or the union of every strategy's picks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Single(DiversityStrategy),
    Union,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Single(s) => f.write_str(s.short_name()),
            Self::Union => f.write_str("union"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("union") {
            return Ok(Self::Union);
        }
        DiversityStrategy::ALL
            .into_iter()
            .find(|d| d.short_name().eq_ignore_ascii_case(s))
            .map(Self::Single)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (edit|tfidf|jaccard|embedding|union)")))
    }
}

/// Term-frequency vectors with smoothed idf `ln((1+N)/(1+df)) + 1`.
pub struct TfIdf {
    idf: HashMap<String, f64>,
    unseen_idf: f64,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> TfIdf {
        let n = docs.len() as f64;
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let uniq: BTreeSet<String> = tokenize(d.as_ref()).into_iter().collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let idf = df.into_iter().map(|(t, k)| (t, ((1.0 + n) / (1.0 + k as f64)).ln() + 1.0)).collect();
        TfIdf { idf, unseen_idf: (1.0 + n).ln() + 1.0 }
    }

    pub fn vector(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_default() += 1.0;
        }
        for (t, v) in tf.iter_mut() {
            *v *= self.idf.get(t).copied().unwrap_or(self.unseen_idf);
        }
        tf
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        let (va, vb) = (self.vector(a), self.vector(b));
        let dot: f64 = va.iter().filter_map(|(t, x)| vb.get(t).map(|y| x * y)).sum();
        let na = va.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.values().map(|x| x * x).sum::<f64>().sqrt();
        cosine_from(dot, na, nb)
    }
}

/// Two zero vectors are treated as identical, one zero vector as orthogonal.
fn cosine_from(dot: f64, na: f64, nb: f64) -> f64 {
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na * nb),
    }
}

pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    cosine_from(dot, na, nb)
}

pub fn jaccard_distance(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = tokenize(a).into_iter().collect();
    let sb: HashSet<String> = tokenize(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - sa.intersection(&sb).count() as f64 / union as f64
}

pub fn diversity_distance(
    candidate: &str,
    reference: &str,
    strategy: DiversityStrategy,
    corpus: Option<&[String]>,
    embedder: Option<&dyn Embedder>,
) -> Result<f64> {
    match strategy {
        DiversityStrategy::EditDistance => Ok(strsim::levenshtein(candidate, reference) as f64),
        DiversityStrategy::Jaccard => Ok(jaccard_distance(candidate, reference)),
        DiversityStrategy::TfIdfCosine => {
            let corpus = corpus.ok_or(Error::MissingCorpus)?;
            let mut docs: Vec<&str> = corpus.iter().map(String::as_str).collect();
            docs.push(reference);
            Ok(1.0 - TfIdf::fit(&docs).cosine(candidate, reference))
        }
        DiversityStrategy::EmbeddingCosine => {
            let e = embedder.ok_or(Error::MissingEmbedder)?;
            let v = e.embed(&[candidate.to_string(), reference.to_string()])?;
            embedding_distance(&v[0], &v[1])
        }
    }
}

fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Backend(GatewayError::Schema(format!("embedding sizes differ: {} vs {}", a.len(), b.len()))));
    }
    Ok(1.0 - dense_cosine(a, b))
}

/// Distances of every pool member to the reference, fitting TF-IDF or
/// embedding the pool once.
pub fn pool_distances(
    pool: &[String],
    reference: &str,
    strategy: DiversityStrategy,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<f64>> {
    match strategy {
        DiversityStrategy::TfIdfCosine => {
            let mut docs: Vec<&str> = pool.iter().map(String::as_str).collect();
            docs.push(reference);
            let model = TfIdf::fit(&docs);
            Ok(pool.iter().map(|c| 1.0 - model.cosine(c, reference)).collect())
        }
        DiversityStrategy::EmbeddingCosine => {
            let e = embedder.ok_or(Error::MissingEmbedder)?;
            if pool.is_empty() {
                return Ok(Vec::new());
            }
            let mut texts = pool.to_vec();
            texts.push(reference.to_string());
            let v = e.embed(&texts)?;
            if v.len() != texts.len() {
                return Err(Error::Backend(GatewayError::Schema("embedding count mismatch".into())));
            }
            let r = &v[pool.len()];
            v[..pool.len()].iter().map(|c| embedding_distance(c, r)).collect()
        }
        _ => pool.iter().map(|c| diversity_distance(c, reference, strategy, None, None)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub index: usize,
    pub text: String,
    pub distance: f64,
}

/// The `k` pool members furthest from `reference`, furthest first; ties
/// keep pool order.
pub fn select_diverse(
    pool: &[String],
    reference: &str,
    strategy: DiversityStrategy,
    k: usize,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<Selected>> {
    let dist = pool_distances(pool, reference, strategy, embedder)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| Selected { index: i, text: pool[i].clone(), distance: dist[i] })
        .collect())
}

/// Union of the per-strategy picks, in pool order. The embedding strategy
/// joins only when an embedder is supplied.
pub fn select_union(pool: &[String], reference: &str, k: usize, embedder: Option<&dyn Embedder>) -> Result<Vec<Selected>> {
    let mut picked: BTreeMap<usize, f64> = BTreeMap::new();
    for s in DiversityStrategy::ALL {
        if s == DiversityStrategy::EmbeddingCosine && embedder.is_none() {
            continue;
        }
        for sel in select_diverse(pool, reference, s, k, embedder)? {
            picked.entry(sel.index).or_insert(sel.distance);
        }
    }
    Ok(picked.into_iter().map(|(i, d)| Selected { index: i, text: pool[i].clone(), distance: d }).collect())
}

pub fn select(
    pool: &[String],
    reference: &str,
    mode: SelectionMode,
    k: usize,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<Selected>> {
    match mode {
        SelectionMode::Single(s) => select_diverse(pool, reference, s, k, embedder),
        SelectionMode::Union => select_union(pool, reference, k, embedder),
    }
}

/// Per-day pools used for assembly: the selected texts, or the gold text
/// for days the gold report leaves empty. A covered day with nothing
/// selected falls back to gold only when `gold_fallback` is set.
fn day_pools(base: &InstanceRecord, selected: &BTreeMap<usize, Vec<String>>, gold_fallback: bool) -> Result<Vec<Vec<String>>> {
    base.segmented
        .days
        .iter()
        .enumerate()
        .map(|(i, d)| match selected.get(&i).filter(|p| !p.is_empty()) {
            Some(p) => Ok(p.clone()),
            None if d.is_empty() || gold_fallback => Ok(vec![d.forecast.clone()]),
            None => Err(Error::EmptyDay(i)),
        })
        .collect()
}

/// Full reports assembled from per-day selections, gold first.
///
/// Each assembly draws one text per day, preferring the texts used least so
/// far, and is distinct from gold and from earlier assemblies. The number of
/// assemblies is at most `max_reports` and at most the number of distinct
/// combinations.
pub fn assemble_rft(
    base: &InstanceRecord,
    per_day_selected: &BTreeMap<usize, Vec<String>>,
    max_reports: usize,
    rng_seed: u64,
    gold_fallback: bool,
) -> Result<Vec<String>> {
    let pools = day_pools(base, per_day_selected, gold_fallback)?;
    let gold = render_structured(&base.segmented.days);
    let combos = pools.iter().fold(1usize, |acc, p| acc.saturating_mul(p.len()));
    let target = max_reports.min(combos);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut usage: Vec<Vec<usize>> = pools.iter().map(|p| vec![0; p.len()]).collect();
    let mut seen: HashSet<String> = HashSet::from([gold.clone()]);
    let mut out = vec![gold];
    let budget = target.saturating_mul(50).max(50);
    let mut attempts = 0;
    while out.len() - 1 < target && attempts < budget {
        attempts += 1;
        let fresh = attempts <= target;
        let pick: Vec<usize> = pools
            .iter()
            .enumerate()
            .map(|(d, p)| {
                if fresh {
                    let min = *usage[d].iter().min().unwrap();
                    let least: Vec<usize> = (0..p.len()).filter(|&i| usage[d][i] == min).collect();
                    *least.choose(&mut rng).unwrap()
                } else {
                    (0..p.len()).collect::<Vec<_>>().choose(&mut rng).copied().unwrap()
                }
            })
            .collect();
        let text = render_day_pick(base, &pools, &pick);
        if !seen.insert(text.clone()) {
            continue;
        }
        for (d, &i) in pick.iter().enumerate() {
            usage[d][i] += 1;
        }
        out.push(text);
    }
    Ok(out)
}

fn render_day_pick(base: &InstanceRecord, pools: &[Vec<String>], pick: &[usize]) -> String {
    let days: Vec<DailyForecast> = base
        .segmented
        .days
        .iter()
        .zip(pick)
        .enumerate()
        .map(|(d, (day, &i))| DailyForecast::new(day.date, pools[d][i].clone()))
        .collect();
    render_structured(&days)
}

/// One line of the exported dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RftRecord {
    pub id: String,
    pub images: Vec<String>,
    pub prompt: String,
    pub reports: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RftOptions {
    pub mode: SelectionMode,
    /// Sub-reports kept per day after diversity selection.
    pub per_day: usize,
    pub max_reports: usize,
    pub seed: u64,
    pub gold_fallback: bool,
}

/// step_filter, then per-day diversity selection against the gold day
/// text, then assembly.
pub fn build_rft_record(
    base: &InstanceRecord,
    candidates: &[CandidateReport],
    opts: &RftOptions,
    embedder: Option<&dyn Embedder>,
) -> Result<RftRecord> {
    let filtered = step_filter(candidates);
    let mut selected = BTreeMap::new();
    for (day, pool) in &filtered {
        let reference = base.segmented.days.get(*day).map(|d| d.forecast.as_str()).unwrap_or("");
        let picks = select(pool, reference, opts.mode, opts.per_day, embedder)?;
        selected.insert(*day, picks.into_iter().map(|s| s.text).collect::<Vec<_>>());
    }
    let reports = assemble_rft(base, &selected, opts.max_reports, opts.seed, opts.gold_fallback)?;
    let prompt = build_generation_prompt(&PromptSpec::from_instance(base), true);
    Ok(RftRecord { id: base.id.clone(), images: base.image_refs.clone(), prompt: prompt.user, reports })
}

/// Days of a structured report, for re-annotation checks.
pub fn days_of(report: &str) -> Result<Vec<DailyForecast>> {
    Ok(parse_generated(report)?.iter().filter_map(|p| p.to_daily()).collect())
}
