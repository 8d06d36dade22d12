//! Preference pairs: a report built from perfect sub-reports against one
//! built from the worst-scoring sub-reports.

use serde::{Deserialize, Serialize};

use crate::augmentation::{CandidateReport, PERFECT_EPS};
use crate::model::{DailyForecast, InstanceRecord};
use crate::prompting::{build_generation_prompt, render_structured, PromptSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub images: Vec<String>,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Per day, chosen takes the first text with step F1 = 1 and rejected the
/// lowest-scoring text (earliest on ties). Days the gold report leaves
/// empty fall back to the gold text when no candidate qualifies.
///
/// Returns `None` when a gold-covered day has no perfect text, when there
/// are no candidates, or when both sides render identically.
pub fn build_pair(candidates: &[CandidateReport], instance: &InstanceRecord) -> Option<PreferencePair> {
    if candidates.is_empty() {
        return None;
    }
    let mut chosen = Vec::new();
    let mut rejected = Vec::new();
    for (i, gold_day) in instance.segmented.days.iter().enumerate() {
        let texts: Vec<(&str, f64)> = candidates
            .iter()
            .filter_map(|c| c.days.get(i).map(|d| (d.text.as_str(), d.step_f1)))
            .collect();
        let perfect = texts.iter().find(|(_, f)| (f - 1.0).abs() <= PERFECT_EPS).map(|(t, _)| *t);
        let best = match perfect {
            Some(t) => t,
            None if gold_day.is_empty() => gold_day.forecast.as_str(),
            None => return None,
        };
        let mut worst = texts.first().copied()?;
        for &(t, f) in &texts[1..] {
            if f < worst.1 {
                worst = (t, f);
            }
        }
        chosen.push(DailyForecast::new(gold_day.date, best));
        rejected.push(DailyForecast::new(gold_day.date, worst.0));
    }
    let chosen = render_structured(&chosen);
    let rejected = render_structured(&rejected);
    if chosen == rejected {
        return None;
    }
    let prompt = build_generation_prompt(&PromptSpec::from_instance(instance), true);
    Some(PreferencePair {
        instance_id: instance.id.clone(),
        images: instance.image_refs.clone(),
        prompt: prompt.user,
        chosen,
        rejected,
    })
}
