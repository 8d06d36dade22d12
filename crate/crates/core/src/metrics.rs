//! Scoring: claim matching, global extraction F1, inverse-frequency
//! weighted per-aspect scores, aspect hit rate, reference-overlap metrics
//! and grouped breakdowns.
//!
//! Conventions: a ratio with a zero denominator is 0. Claims with no gold
//! support (TP + FN = 0) carry no weight in the per-aspect scores; their
//! false positives still show up in [`global_f1`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{Aspect, Claim, DayAnnotation};
use crate::protocol::AnnotationProtocol;
use crate::text::tokenize;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Counts { tp, fp, fn_ }
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// TP/FP/FN tallies per (aspect, claim).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchLedger {
    counts: BTreeMap<(Aspect, Claim), Counts>,
}

impl MatchLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, protocol: &AnnotationProtocol, claim: Claim, c: Counts) {
        self.counts.entry((protocol.claim_aspect(claim), claim)).or_default().add(c);
    }

    /// Inserts counts under an explicit key. Callers are responsible for the
    /// key agreeing with their protocol.
    pub fn insert(&mut self, aspect: Aspect, claim: Claim, c: Counts) {
        self.counts.entry((aspect, claim)).or_default().add(c);
    }

    pub fn merge(&mut self, other: &MatchLedger) {
        for (k, c) in &other.counts {
            self.counts.entry(*k).or_default().add(*c);
        }
    }

    pub fn get(&self, aspect: Aspect, claim: Claim) -> Counts {
        self.counts.get(&(aspect, claim)).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Aspect, Claim, Counts)> + '_ {
        self.counts.iter().map(|((a, c), n)| (*a, *c, *n))
    }

    pub fn totals(&self) -> Counts {
        let mut t = Counts::default();
        for c in self.counts.values() {
            t.add(*c);
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Adds per-day set comparisons of `pred` against `gold` into `ledger`.
pub fn accumulate_matches(
    pred: &[DayAnnotation],
    gold: &[DayAnnotation],
    protocol: &AnnotationProtocol,
    ledger: &mut MatchLedger,
) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gold.len() });
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.date.is_some() && g.date.is_some() && p.date != g.date {
            return Err(Error::DateMismatch(i));
        }
        add_day(&p.claims, &g.claims, protocol, ledger);
    }
    Ok(())
}

fn add_day(pred: &BTreeSet<Claim>, gold: &BTreeSet<Claim>, protocol: &AnnotationProtocol, ledger: &mut MatchLedger) {
    for c in pred.union(gold) {
        let counts = match (pred.contains(c), gold.contains(c)) {
            (true, true) => Counts::new(1, 0, 0),
            (true, false) => Counts::new(0, 1, 0),
            _ => Counts::new(0, 0, 1),
        };
        ledger.add(protocol, *c, counts);
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalExtractionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Precision/recall/F1 from counts pooled over every key.
pub fn global_f1(ledger: &MatchLedger) -> GlobalExtractionScore {
    let t = ledger.totals();
    let precision = ratio(t.tp as f64, (t.tp + t.fp) as f64);
    let recall = ratio(t.tp as f64, (t.tp + t.fn_) as f64);
    GlobalExtractionScore { precision, recall, f1: harmonic(precision, recall), tp: t.tp, fp: t.fp, fn_: t.fn_ }
}

/// Claim-level F1 of one day: 1 when both claim sets are empty, otherwise
/// the global F1 of that day's single-day ledger.
pub fn step_f1(pred: &BTreeSet<Claim>, gold: &BTreeSet<Claim>, protocol: &AnnotationProtocol) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut l = MatchLedger::new();
    add_day(pred, gold, protocol, &mut l);
    global_f1(&l).f1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAspectScore {
    pub aspect: Aspect,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub claims_counted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedReport {
    pub aspects: Vec<WeightedAspectScore>,
    /// Unweighted mean of the per-aspect scores.
    pub macro_average: AverageScore,
    /// Inverse-frequency weighting applied across all claims at once.
    pub pooled: AverageScore,
}

impl WeightedReport {
    pub fn aspect(&self, a: Aspect) -> Option<&WeightedAspectScore> {
        self.aspects.iter().find(|s| s.aspect == a)
    }
}

/// (weighted precision, weighted recall, counted) over claims with gold
/// support; each claim weighs 1/(TP+FN), normalized.
fn weighted_pr<'a>(counts: impl Iterator<Item = &'a Counts>) -> (f64, f64, usize) {
    let supported: Vec<&Counts> = counts.filter(|c| c.tp + c.fn_ > 0).collect();
    let total_w: f64 = supported.iter().map(|c| 1.0 / (c.tp + c.fn_) as f64).sum();
    let (mut wp, mut wr) = (0.0, 0.0);
    for c in &supported {
        let w = (1.0 / (c.tp + c.fn_) as f64) / total_w;
        wp += w * ratio(c.tp as f64, (c.tp + c.fp) as f64);
        wr += w * (c.tp as f64 / (c.tp + c.fn_) as f64);
    }
    (wp, wr, supported.len())
}

pub fn weighted_aspect_scores(ledger: &MatchLedger) -> WeightedReport {
    let mut by_aspect: BTreeMap<Aspect, Vec<&Counts>> = BTreeMap::new();
    for ((a, _), c) in &ledger.counts {
        by_aspect.entry(*a).or_default().push(c);
    }
    let mut aspects = Vec::new();
    for (aspect, counts) in by_aspect {
        let (wp, wr, n) = weighted_pr(counts.into_iter());
        if n == 0 {
            continue;
        }
        aspects.push(WeightedAspectScore {
            aspect,
            weighted_precision: wp,
            weighted_recall: wr,
            weighted_f1: harmonic(wp, wr),
            claims_counted: n,
        });
    }
    let k = aspects.len() as f64;
    let mean = |f: fn(&WeightedAspectScore) -> f64| ratio(aspects.iter().map(f).sum(), k);
    let macro_average = AverageScore {
        precision: mean(|s| s.weighted_precision),
        recall: mean(|s| s.weighted_recall),
        f1: mean(|s| s.weighted_f1),
    };
    let (pp, pr, _) = weighted_pr(ledger.counts.values());
    WeightedReport { aspects, macro_average, pooled: AverageScore { precision: pp, recall: pr, f1: harmonic(pp, pr) } }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub per_aspect: BTreeMap<Aspect, f64>,
    pub average: f64,
}

/// Per aspect: days where both sides mention it over days where gold does.
pub fn hit_rate(pred: &[BTreeSet<Aspect>], gold: &[BTreeSet<Aspect>]) -> Result<HitRate> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gold.len() });
    }
    let mut tally: BTreeMap<Aspect, (u64, u64)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for a in g {
            let t = tally.entry(*a).or_default();
            t.1 += 1;
            if p.contains(a) {
                t.0 += 1;
            }
        }
    }
    let per_aspect: BTreeMap<Aspect, f64> = tally.into_iter().map(|(a, (hit, n))| (a, hit as f64 / n as f64)).collect();
    let average = ratio(per_aspect.values().sum(), per_aspect.len() as f64);
    Ok(HitRate { per_aspect, average })
}

/// Unigram BLEU: clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in &refs {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in &cand {
        *cand_counts.entry(w).or_default() += 1;
    }
    let clipped: usize = cand_counts.iter().map(|(w, n)| (*n).min(ref_counts.get(w).copied().unwrap_or(0))).sum();
    let precision = clipped as f64 / cand.len() as f64;
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    precision * bp
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with beta = 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let lcs = lcs_len(&cand, &refs) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    harmonic(lcs / cand.len() as f64, lcs / refs.len() as f64)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Crude suffix stripper used by the second METEOR matching stage.
pub fn simple_stem(w: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(stem) = w.strip_suffix(suffix) {
            if stem.chars().count() >= 3 {
                return stem;
            }
        }
    }
    w
}

/// METEOR without synonym matching: exact matches first, then suffix-stem
/// matches, harmonic mean with alpha = 0.9, fragmentation penalty
/// 0.5 * (chunks / matches)^3.
pub fn meteor_simplified(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let mut ref_used = vec![false; refs.len()];
    let mut align: Vec<Option<usize>> = vec![None; cand.len()];
    for stage in 0..2 {
        let key = |w: &str| if stage == 0 { w.to_string() } else { simple_stem(w).to_string() };
        for (i, w) in cand.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            let k = key(w);
            if let Some(j) = (0..refs.len()).find(|&j| !ref_used[j] && key(&refs[j]) == k) {
                ref_used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 1;
    for w in pairs.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let p = m / cand.len() as f64;
    let r = m / refs.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub bleu1: f64,
    pub rouge_l: f64,
    pub meteor_simplified: f64,
    pub days: usize,
}

/// Reference metrics per forecast day, averaged over days where either side
/// has text.
pub fn reference_scores(pred_days: &[&str], gold_days: &[&str]) -> Result<ReferenceScores> {
    if pred_days.len() != gold_days.len() {
        return Err(Error::LengthMismatch { left: pred_days.len(), right: gold_days.len() });
    }
    let mut s = ReferenceScores::default();
    for (p, g) in pred_days.iter().zip(gold_days) {
        if p.trim().is_empty() && g.trim().is_empty() {
            continue;
        }
        s.bleu1 += bleu1(p, g);
        s.rouge_l += rouge_l(p, g);
        s.meteor_simplified += meteor_simplified(p, g);
        s.days += 1;
    }
    if s.days > 0 {
        let n = s.days as f64;
        s.bleu1 /= n;
        s.rouge_l /= n;
        s.meteor_simplified /= n;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    City,
    Day,
    Aspect,
}

pub fn parse_group_keys(spec: &str) -> Result<Vec<GroupKey>> {
    let mut keys = Vec::new();
    for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k = match raw.to_ascii_lowercase().as_str() {
            "city" => GroupKey::City,
            "day" => GroupKey::Day,
            "aspect" => GroupKey::Aspect,
            _ => return Err(Error::UnknownKey(raw.to_string())),
        };
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    Ok(keys)
}

/// A ledger for one (city, forecast-day) slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedLedger {
    pub city: String,
    pub day_index: usize,
    pub ledger: MatchLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub day: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspect: Option<Aspect>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

/// Weighted scores per group. Without the aspect key each group reports its
/// macro average; with it, one row per aspect.
pub fn breakdown(stream: &[KeyedLedger], keys: &[GroupKey]) -> Vec<GroupRow> {
    let by_city = keys.contains(&GroupKey::City);
    let by_day = keys.contains(&GroupKey::Day);
    let mut groups: BTreeMap<(Option<String>, Option<usize>), MatchLedger> = BTreeMap::new();
    for k in stream {
        let key = (by_city.then(|| k.city.clone()), by_day.then_some(k.day_index));
        groups.entry(key).or_default().merge(&k.ledger);
    }
    if groups.is_empty() {
        groups.insert((None, None), MatchLedger::new());
    }
    let mut rows = Vec::new();
    for ((city, day), ledger) in groups {
        let report = weighted_aspect_scores(&ledger);
        if keys.contains(&GroupKey::Aspect) {
            for s in &report.aspects {
                rows.push(GroupRow {
                    city: city.clone(),
                    day,
                    aspect: Some(s.aspect),
                    weighted_precision: s.weighted_precision,
                    weighted_recall: s.weighted_recall,
                    weighted_f1: s.weighted_f1,
                });
            }
        } else {
            rows.push(GroupRow {
                city,
                day,
                aspect: None,
                weighted_precision: report.macro_average.precision,
                weighted_recall: report.macro_average.recall,
                weighted_f1: report.macro_average.f1,
            });
        }
    }
    rows
}

/// Aligned plain-text table of breakdown rows.
pub fn render_table(rows: &[GroupRow]) -> String {
    let mut cells: Vec<[String; 6]> = vec![[
        "city".into(),
        "day".into(),
        "aspect".into(),
        "w_precision".into(),
        "w_recall".into(),
        "w_f1".into(),
    ]];
    for r in rows {
        cells.push([
            r.city.clone().unwrap_or_else(|| "*".into()),
            r.day.map(|d| (d + 1).to_string()).unwrap_or_else(|| "*".into()),
            r.aspect.map(|a| a.display_name().to_string()).unwrap_or_else(|| "macro".into()),
            format!("{:.4}", r.weighted_precision),
            format!("{:.4}", r.weighted_recall),
            format!("{:.4}", r.weighted_f1),
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|i| cells.iter().map(|c| c[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i < 3 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
