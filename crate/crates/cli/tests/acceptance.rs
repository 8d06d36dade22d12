//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use chrono::{DateTime, Days, FixedOffset, NaiveDate, TimeZone, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wxcorpus::augmentation::{
    build_rft_record, days_of, select_diverse, step_filter, CandidateDay, CandidateReport, DiversityStrategy,
    RftOptions, SelectionMode,
};
use wxcorpus::claims::{extract_llm, extract_rule_based, parse_extraction_reply};
use wxcorpus::gateway::ScriptedBackend;
use wxcorpus::ingestion::align_era5;
use wxcorpus::metrics::{
    bleu1, global_f1, hit_rate, meteor_simplified, rouge_l, weighted_aspect_scores, Counts, MatchLedger,
};
use wxcorpus::model::{Aspect, Claim, DailyForecast, InstanceRecord, RawReport};
use wxcorpus::preference::build_pair;
use wxcorpus::prompting::{build_generation_prompt, parse_generated, render_structured, DayPlan, PromptSpec};
use wxcorpus::segmentation::{detect_anchors, segment, verify, SegmenterBackend};
use wxcorpus::Station;

use common::Bank;

const METRIC_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("worked example fidelity", worked_example),
        ("metric oracle equivalence", metric_oracle),
        ("hand-derived fixtures", fixtures),
        ("augmentation soundness", augmentation),
        ("preference soundness", preference),
        ("prompt round-trip and hit rate", prompt_round_trip),
        ("alignment rule sweep", alignment_sweep),
        ("offline pipeline", offline_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let o = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.2}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn worked_example() -> Outcome {
    let started = Instant::now();
    let input = include_str!("fixtures/worked_input.txt");
    let seg_reply = include_str!("fixtures/worked_segmentation.json");
    let expected = parse_extraction_reply(include_str!("fixtures/worked_extraction.json")).unwrap();
    let issued = DateTime::parse_from_rfc3339("2019-09-27T15:40:00-04:00").unwrap();
    let report = RawReport::new("ALY".parse::<Station>().unwrap(), issued, input).unwrap();
    let protocol = wxcorpus::AnnotationProtocol::default_protocol();

    let backend = ScriptedBackend::always(seg_reply);
    let anchors = detect_anchors(&report.body, report.issued_local());
    let seg = segment(&report, &anchors, &SegmenterBackend::Llm(&backend)).unwrap();
    let v = verify(&report, &seg, &anchors);
    if !v.passed {
        return outcome(false, format!("verification rejected the segmentation: {v:?}"));
    }
    let rule: Vec<_> = seg.days.iter().map(|d| extract_rule_based(d, &protocol)).collect();
    let llm_backend = ScriptedBackend::new(
        expected.iter().map(|e| Ok(serde_json::json!([{"date": e.date.unwrap().format("%Y%m%d").to_string(),
            "claims": e.claims.iter().map(|c| c.wire_name()).collect::<Vec<_>>(),
            "aspects": e.aspects.iter().map(|a| a.wire_name()).collect::<Vec<_>>()}]).to_string())),
    );
    let llm: Vec<_> = seg.days.iter().map(|d| extract_llm(d, &protocol, &llm_backend).unwrap()).collect();
    let elapsed = started.elapsed();
    let mut bad = Vec::new();
    for (i, (got, want)) in rule.iter().zip(&expected).enumerate() {
        if got.date != want.date || got.claims != want.claims || got.aspects != want.aspects {
            bad.push(format!("day {}: got {:?}/{:?}", i + 1, got.claims, got.aspects));
        }
    }
    if llm != rule {
        bad.push("scripted extraction disagrees with rule-based".into());
    }
    let pass = bad.is_empty() && rule.len() == 4 && elapsed < Duration::from_secs(1);
    outcome(pass, if bad.is_empty() { format!("4/4 days exact in {:?}", elapsed) } else { bad.join("; ") })
}

/// Exact fraction for the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Q(i128, i128);

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Q {
    fn new(n: i128, d: i128) -> Q {
        if d == 0 || n == 0 {
            return Q(0, 1);
        }
        let g = gcd(n, d);
        Q(n / g, d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Q) -> Q {
        Q::new(self.0 * o.0, self.1 * o.1)
    }
    fn div(self, o: Q) -> Q {
        if o.0 == 0 {
            Q(0, 1)
        } else {
            Q::new(self.0 * o.1, self.1 * o.0)
        }
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

fn f1q(p: Q, r: Q) -> Q {
    Q::new(2, 1).mul(p).mul(r).div(p.add(r))
}

/// Brute force: every claim with gold support weighs 1/(TP+FN) before
/// normalization; evaluated with exact fractions.
fn oracle_weighted(counts: &[(Aspect, Counts)]) -> BTreeMap<Aspect, (f64, f64, f64)> {
    let mut out = BTreeMap::new();
    for a in Aspect::ALL {
        let cs: Vec<Counts> = counts.iter().filter(|(x, c)| *x == a && c.tp + c.fn_ > 0).map(|(_, c)| *c).collect();
        if cs.is_empty() {
            continue;
        }
        let mut wsum = Q(0, 1);
        let mut p = Q(0, 1);
        let mut r = Q(0, 1);
        for c in &cs {
            let w = Q::new(1, (c.tp + c.fn_) as i128);
            wsum = wsum.add(w);
            p = p.add(w.mul(Q::new(c.tp as i128, (c.tp + c.fp) as i128)));
            r = r.add(w.mul(Q::new(c.tp as i128, (c.tp + c.fn_) as i128)));
        }
        let (p, r) = (p.div(wsum), r.div(wsum));
        out.insert(a, (p.f(), r.f(), f1q(p, r).f()));
    }
    out
}

fn metric_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut ledger = MatchLedger::new();
        let mut flat = Vec::new();
        for a in Aspect::ALL {
            let k = rng.gen_range(0..=5);
            let mut claims = Claim::ALL.to_vec();
            claims.shuffle(&mut rng);
            for c in claims.into_iter().take(k) {
                let n = Counts::new(rng.gen_range(0..=10), rng.gen_range(0..=10), rng.gen_range(0..=10));
                ledger.insert(a, c, n);
                flat.push((a, n));
            }
        }
        let got = weighted_aspect_scores(&ledger);
        let want = oracle_weighted(&flat);
        if got.aspects.len() != want.len() {
            mismatches += 1;
            continue;
        }
        for s in &got.aspects {
            let (p, r, f) = want[&s.aspect];
            for d in [(s.weighted_precision - p), (s.weighted_recall - r), (s.weighted_f1 - f)] {
                worst = worst.max(d.abs());
            }
        }
        let (tp, fp, fn_) = flat.iter().fold((0, 0, 0), |acc, (_, c)| (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_));
        let gp = Q::new(tp as i128, (tp + fp) as i128);
        let gr = Q::new(tp as i128, (tp + fn_) as i128);
        let g = global_f1(&ledger);
        for d in [g.precision - gp.f(), g.recall - gr.f(), g.f1 - f1q(gp, gr).f()] {
            worst = worst.max(d.abs());
        }
    }
    let elapsed = started.elapsed();
    let pass = mismatches == 0 && worst <= METRIC_TOL && elapsed < Duration::from_secs(5);
    outcome(pass, format!("1000 ledgers, max abs diff {worst:.2e}, {mismatches} shape mismatches"))
}

fn fixtures() -> Outcome {
    let p = wxcorpus::AnnotationProtocol::default_protocol();
    let mut temp = MatchLedger::new();
    temp.add(&p, Claim::HotWarm, Counts::new(3, 1, 1));
    temp.add(&p, Claim::CoolCold, Counts::new(1, 0, 0));
    let t = weighted_aspect_scores(&temp);
    let t = t.aspect(Aspect::Temperature).unwrap();
    let mut g = MatchLedger::new();
    g.add(&p, Claim::Storm, Counts::new(2, 1, 1));
    let checks = [
        ("WP", t.weighted_precision, 0.95),
        ("WR", t.weighted_recall, 0.95),
        ("WF1", t.weighted_f1, 0.95),
        ("global F1", global_f1(&g).f1, 2.0 / 3.0),
        ("BLEU-1", bleu1("a b c", "a b d"), 2.0 / 3.0),
        ("ROUGE-L", rouge_l("a b c", "a b d"), 2.0 / 3.0),
        ("Jaccard", wxcorpus::augmentation::jaccard_distance("rain cold", "rain warm"), 2.0 / 3.0),
        ("METEOR", meteor_simplified("rain", "rain"), 0.5),
    ];
    let bad: Vec<String> =
        checks.iter().filter(|(_, got, want)| (got - want).abs() > METRIC_TOL).map(|(n, g, w)| format!("{n} {g} != {w}")).collect();
    outcome(bad.is_empty(), if bad.is_empty() { format!("{} values within 1e-12", checks.len()) } else { bad.join("; ") })
}

fn reannotates_to_gold(report: &str, inst: &InstanceRecord, bank: &Bank) -> bool {
    let Ok(days) = days_of(report) else { return false };
    days.len() == inst.annotations.len()
        && days.iter().zip(&inst.annotations).all(|(d, g)| bank.matcher.claims(&d.forecast) == g.claims && Some(d.date) == g.date)
}

fn char_embedding(s: &str) -> Vec<f64> {
    let mut v = vec![0.0; 27];
    for c in s.to_ascii_lowercase().chars() {
        let i = if c.is_ascii_lowercase() { (c as u8 - b'a') as usize } else { 26 };
        v[i] += 1.0;
    }
    v
}

fn augmentation() -> Outcome {
    let started = Instant::now();
    let bank = Bank::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embed = char_embedding;
    let modes = [
        SelectionMode::Single(DiversityStrategy::EditDistance),
        SelectionMode::Single(DiversityStrategy::TfIdfCosine),
        SelectionMode::Single(DiversityStrategy::Jaccard),
        SelectionMode::Single(DiversityStrategy::EmbeddingCosine),
        SelectionMode::Union,
    ];
    let (mut reports, mut skipped, mut problems) = (0usize, 0usize, Vec::new());
    for idx in 0..100 {
        let inst = common::synthetic_instance(&mut rng, &bank, idx);
        let pool = common::candidate_pool(&mut rng, &bank, &inst, 12);

        let filtered = step_filter(&pool);
        let width = filtered.values().map(Vec::len).max().unwrap_or(0);
        let rescored: Vec<CandidateReport> = (0..width)
            .map(|j| CandidateReport {
                instance_id: inst.id.clone(),
                days: (0..inst.annotations.len())
                    .map(|d| match filtered.get(&d).and_then(|p| p.get(j)) {
                        Some(t) => CandidateDay {
                            text: t.clone(),
                            step_f1: wxcorpus::metrics::step_f1(&bank.matcher.claims(t), &inst.annotations[d].claims, &bank.protocol),
                        },
                        None => CandidateDay { text: String::new(), step_f1: 0.0 },
                    })
                    .collect(),
                temperature: None,
                seed: None,
            })
            .collect();
        if step_filter(&rescored) != filtered {
            problems.push(format!("{}: step_filter not idempotent", inst.id));
        }
        for (d, texts) in &filtered {
            let reference = &inst.segmented.days[*d].forecast;
            for s in DiversityStrategy::ALL {
                let sel = select_diverse(texts, reference, s, texts.len(), Some(&embed)).unwrap();
                if sel.windows(2).any(|w| w[0].distance < w[1].distance) {
                    problems.push(format!("{}: {:?} order not monotone", inst.id, s));
                }
            }
        }
        for (m, mode) in modes.iter().enumerate() {
            let opts = RftOptions { mode: *mode, per_day: 2, max_reports: 3, seed: idx * 10 + m as u64, gold_fallback: false };
            match build_rft_record(&inst, &pool, &opts, Some(&embed)) {
                Ok(rec) => {
                    for r in &rec.reports {
                        reports += 1;
                        if !reannotates_to_gold(r, &inst, &bank) {
                            problems.push(format!("{}: assembled report differs from gold", inst.id));
                        }
                    }
                }
                Err(wxcorpus::Error::EmptyDay(_)) => skipped += 1,
                Err(e) => problems.push(format!("{}: {e}", inst.id)),
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = problems.is_empty() && reports > 0 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        if problems.is_empty() {
            format!("{reports} assembled reports re-annotate to gold; {skipped} builds lacked a perfect day")
        } else {
            problems.into_iter().take(3).collect::<Vec<_>>().join("; ")
        },
    )
}

fn preference() -> Outcome {
    let bank = Bank::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut emitted, mut skipped, mut problems) = (0, 0, Vec::new());
    for idx in 0..200 {
        let inst = common::synthetic_instance(&mut rng, &bank, idx);
        let n = rng.gen_range(1..=5);
        let pool = common::candidate_pool(&mut rng, &bank, &inst, n);
        // brute force from the texts alone: F1 = 1 exactly when claim sets are equal
        let perfect = |d: usize, t: &str| bank.matcher.claims(t) == inst.annotations[d].claims;
        let lacks_perfect = inst.segmented.days.iter().enumerate().any(|(d, day)| {
            !day.is_empty() && !pool.iter().any(|c| perfect(d, &c.days[d].text))
        });
        let all_perfect = (0..inst.annotations.len()).all(|d| pool.iter().all(|c| perfect(d, &c.days[d].text)));
        match build_pair(&pool, &inst) {
            None => {
                skipped += 1;
                if !lacks_perfect && !all_perfect {
                    problems.push(format!("{}: skipped although a pair exists", inst.id));
                }
            }
            Some(pair) => {
                emitted += 1;
                if lacks_perfect {
                    problems.push(format!("{}: emitted without perfect sub-reports", inst.id));
                }
                if !reannotates_to_gold(&pair.chosen, &inst, &bank) {
                    problems.push(format!("{}: chosen differs from gold", inst.id));
                }
                let min_below_one = pool.iter().flat_map(|c| &c.days).any(|d| d.step_f1 < 1.0);
                if min_below_one && reannotates_to_gold(&pair.rejected, &inst, &bank) {
                    problems.push(format!("{}: rejected matches gold", inst.id));
                }
            }
        }
    }
    let pass = problems.is_empty() && emitted > 0 && skipped > 0;
    outcome(pass, if problems.is_empty() { format!("{emitted} pairs, {skipped} skips, all consistent") } else { problems.join("; ") })
}

fn random_text<R: Rng>(rng: &mut R) -> String {
    const WORDS: [&str; 12] = ["rain", "cold", "front", "gusty", "clear", "skies", "by", "late", "afternoon", "50s", "ridge", "trough"];
    let n = rng.gen_range(0..12);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let mut s = words.join(" ");
    if rng.gen_bool(0.3) {
        s.push('.');
    }
    if rng.gen_bool(0.2) {
        s = s.replace(' ', "\n");
    }
    s
}

fn prompt_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    for _ in 0..500 {
        let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap() + Days::new(rng.gen_range(0..2000));
        let n = rng.gen_range(1..=4);
        let days: Vec<DailyForecast> =
            (0..n).map(|i| DailyForecast::new(start + Days::new(i), random_text(&mut rng))).collect();
        let back: Vec<DailyForecast> =
            parse_generated(&render_structured(&days)).unwrap().iter().filter_map(|p| p.to_daily()).collect();
        if back != days {
            problems.push(format!("round trip failed for {:?}", days));
        }
        let plans: Vec<DayPlan> = days
            .iter()
            .map(|d| {
                let mut focus = Aspect::ALL.to_vec();
                focus.shuffle(&mut rng);
                focus.truncate(rng.gen_range(1..=3));
                DayPlan { date: d.date, focus }
            })
            .collect();
        let issued = FixedOffset::west_opt(5 * 3600).unwrap().from_local_datetime(&start.and_hms_opt(4, 0, 0).unwrap()).unwrap();
        let spec = PromptSpec::new("Albany", issued, plans.clone());
        let mut other = spec.clone();
        other.days[0].focus = if plans[0].focus == [Aspect::Event] { vec![Aspect::Wind] } else { vec![Aspect::Event] };
        if build_generation_prompt(&spec, true).user == build_generation_prompt(&other, true).user {
            problems.push("distinct focus lists gave identical prompts".into());
        }
        let parsed = parse_generated(&build_generation_prompt(&spec, true).user).unwrap();
        if parsed.iter().map(|p| p.date).collect::<Vec<_>>() != days.iter().map(|d| Some(d.date)).collect::<Vec<_>>() {
            problems.push("prompt markers do not parse back to the planned dates".into());
        }
    }
    let bank = Bank::new();
    let gold: Vec<BTreeSet<Aspect>> = (0..200)
        .map(|_| bank.random_claims(&mut rng, 4).iter().map(|c| bank.protocol.claim_aspect(*c)).collect())
        .collect();
    let same = hit_rate(&gold, &gold).unwrap();
    let empty = hit_rate(&vec![BTreeSet::new(); gold.len()], &gold).unwrap();
    if !same.per_aspect.values().all(|v| *v == 1.0) || !empty.per_aspect.values().all(|v| *v == 0.0) {
        problems.push("hit rate bounds violated".into());
    }
    outcome(problems.is_empty(), if problems.is_empty() { "500 specs round-trip; hit rate 1.0 / 0.0".to_string() } else { problems.remove(0) })
}

fn alignment_sweep() -> Outcome {
    let mut checked = 0;
    let mut problems = Vec::new();
    for code in ["ALY", "ABQ", "HFO"] {
        let station: Station = code.parse().unwrap();
        let tz = station.tz();
        let day = NaiveDate::from_ymd_opt(2019, 9, 27).unwrap();
        for minute in 0..24 * 60 {
            let local = tz.from_local_datetime(&day.and_hms_opt(minute / 60, minute % 60, 0).unwrap()).single().unwrap();
            let report = RawReport::new(station, local.fixed_offset(), "x").unwrap();
            let a = align_era5(&report, tz);
            let issue = report.issued_at.with_timezone(&Utc);
            // oracle: enumerate the six-hourly slots of the surrounding days
            let midnight = Utc.from_utc_datetime(&(issue.date_naive() - Days::new(1)).and_hms_opt(0, 0, 0).unwrap());
            let slots: Vec<_> = (0..12).map(|k| midnight + chrono::Duration::hours(6 * k)).collect();
            let latest = *slots.iter().filter(|s| **s <= issue).max().unwrap();
            let qualifies = slots.iter().any(|s| issue >= *s && issue - *s < chrono::Duration::hours(3));
            let gap = a.gap();
            if a.era5_utc != latest || a.matched != qualifies {
                problems.push(format!("{code} {}: slot {} matched {}", local, a.era5_utc, a.matched));
            }
            if a.matched && !(gap >= chrono::Duration::zero() && gap < chrono::Duration::hours(3)) {
                problems.push(format!("{code} {}: gap {gap}", local));
            }
            if a.era5_utc.minute() != 0 || a.era5_utc.hour() % 6 != 0 {
                problems.push(format!("{code}: slot off grid"));
            }
            checked += 1;
        }
    }
    outcome(problems.is_empty(), if problems.is_empty() { format!("{checked} issue times agree with slot enumeration") } else { problems.remove(0) })
}

fn offline_pipeline() -> Outcome {
    let started = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = common::pipeline::run_pipeline(a.path(), 8);
    let second = common::pipeline::run_pipeline(b.path(), 8);
    let elapsed = started.elapsed();
    let raw: Vec<RawReport> = wxcorpus_cli::read_jsonl(&a.path().join("raw.jsonl")).unwrap_or_default();
    let failed: Vec<String> = first.steps.iter().filter(|(_, c)| *c != 0).map(|(s, c)| format!("{s} exited {c}")).collect();
    let reproducible = !first.digests.is_empty() && first.digests == second.digests;
    let pass = failed.is_empty() && second.all_ok() && raw.len() == 20 && reproducible && elapsed < Duration::from_secs(30);
    let detail = if !failed.is_empty() {
        failed.join("; ")
    } else {
        format!(
            "{} steps exit 0 on {} reports, {} output digests reproduced: {}",
            first.steps.len(),
            raw.len(),
            first.digests.len(),
            reproducible
        )
    };
    outcome(pass, detail)
}
