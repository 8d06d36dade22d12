//! Offline end-to-end run of the CLI against mock archive and chat servers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use wxcorpus::gateway::mock::{MockReply, MockServer};
use wxcorpus::model::InstanceRecord;
use wxcorpus::prompting::parse_generated;

use super::{archive_reply, Bank};

pub struct Outcome {
    pub steps: Vec<(String, i32)>,
    /// Output digests from every manifest, keyed by step and file name.
    pub digests: BTreeMap<String, String>,
    pub dir: PathBuf,
}

impl Outcome {
    pub fn all_ok(&self) -> bool {
        self.steps.iter().all(|(_, c)| *c == 0)
    }
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Replies with a variant of the gold report selected by the request seed:
/// 0 prefixes each day, 1 appends a neutral sentence, 2 adds snow, 3 drops
/// the content.
fn chat_reply(gold: &BTreeMap<NaiveDate, Vec<(NaiveDate, String)>>, body: &str) -> MockReply {
    let v: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    let user = v.pointer("/messages/1/content").and_then(Value::as_str).unwrap_or("");
    let seed = v.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let first = parse_generated(user).ok().and_then(|d| d.first().and_then(|d| d.date));
    let Some(days) = first.and_then(|d| gold.get(&d)) else {
        return MockReply::status(400, "unknown instance");
    };
    let mut out = String::new();
    for (date, text) in days {
        let t = if text.is_empty() {
            String::new()
        } else {
            match seed % 4 {
                0 => format!("Overall, {text}"),
                1 => format!("{text} Details may change."),
                2 => format!("{text} Expect snow."),
                _ => "Little change is expected.".to_string(),
            }
        };
        out.push_str(&format!("{}\n{t} ##\n\n", wxcorpus::prompting::marker(*date)));
    }
    MockReply::ok(json!({ "choices": [{ "message": { "role": "assistant", "content": out } }] }).to_string())
}

pub fn run_pipeline(dir: &Path, seed: u64) -> Outcome {
    let bank = Bank::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = NaiveDate::from_ymd_opt(2019, 10, 1).unwrap();
    let reply = archive_reply(&mut rng, &bank, first, 20);
    let archive = MockServer::start(move |_| MockReply::ok(reply.clone()));

    let gold: Arc<Mutex<BTreeMap<NaiveDate, Vec<(NaiveDate, String)>>>> = Arc::default();
    let g2 = gold.clone();
    let chat = MockServer::start(move |req| chat_reply(&g2.lock().unwrap(), &req.body));

    let mut steps = Vec::new();
    let mut step = |name: &str, args: Vec<String>| {
        let mut argv = vec!["wxcorpus".to_string()];
        argv.extend(args);
        let code = wxcorpus_cli::run(argv);
        steps.push((name.to_string(), code));
        code
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    step(
        "fetch",
        s(&[
            "fetch", "--station", "ALY", "--start", "20191001", "--end", "20191020", "--archive-url", &archive.url(),
            "--out", &p(dir, "raw.jsonl"), "--alignment", &p(dir, "alignment.jsonl"), "--cache-dir", &p(dir, "cache"),
        ]),
    );
    step("segment", s(&["segment", "--input", &p(dir, "raw.jsonl"), "--out", &p(dir, "segmented.jsonl")]));
    step("annotate", s(&["annotate", "--input", &p(dir, "segmented.jsonl"), "--out", &p(dir, "instances.jsonl")]));

    let instances: Vec<InstanceRecord> = wxcorpus_cli::read_jsonl(&dir.join("instances.jsonl")).unwrap_or_default();
    {
        let mut g = gold.lock().unwrap();
        for inst in &instances {
            let days = inst.segmented.days.iter().map(|d| (d.date, d.forecast.clone())).collect();
            g.insert(inst.segmented.days[0].date, days);
        }
    }
    step(
        "sample",
        s(&[
            "sample", "--instances", &p(dir, "instances.jsonl"), "--out", &p(dir, "samples.jsonl"), "--n", "8", "--seed", "11",
            "--no-images", "--backend-url", &chat.url(),
        ]),
    );
    step(
        "rft-build",
        s(&[
            "rft-build", "--instances", &p(dir, "instances.jsonl"), "--candidates", &p(dir, "samples.jsonl"), "--out",
            &p(dir, "rft.jsonl"), "--seed", "7", "--strategy", "edit", "--max-reports", "3",
        ]),
    );
    step(
        "dpo-build",
        s(&[
            "dpo-build", "--instances", &p(dir, "instances.jsonl"), "--candidates", &p(dir, "samples.jsonl"), "--out",
            &p(dir, "dpo.jsonl"),
        ]),
    );

    let samples: Vec<Value> = wxcorpus_cli::read_jsonl(&dir.join("samples.jsonl")).unwrap_or_default();
    let mut seen = std::collections::BTreeSet::new();
    let preds: Vec<Value> = samples
        .iter()
        .filter(|v| seen.insert(v["instance_id"].as_str().unwrap_or("").to_string()))
        .map(|v| json!({ "id": v["instance_id"], "report": v["report"] }))
        .collect();
    let _ = wxcorpus_cli::write_jsonl(&dir.join("predictions.jsonl"), &preds);
    step(
        "evaluate",
        s(&[
            "evaluate", "--pred", &p(dir, "predictions.jsonl"), "--gold", &p(dir, "instances.jsonl"), "--group-by",
            "aspect", "--format", "json", "--out", &p(dir, "eval.json"),
        ]),
    );

    let mut digests = BTreeMap::new();
    for (name, file) in [
        ("fetch", "raw.jsonl"),
        ("segment", "segmented.jsonl"),
        ("annotate", "instances.jsonl"),
        ("sample", "samples.jsonl"),
        ("rft-build", "rft.jsonl"),
        ("dpo-build", "dpo.jsonl"),
        ("evaluate", "eval.json"),
    ] {
        let m = wxcorpus_cli::manifest_path(&dir.join(file));
        let Ok(text) = std::fs::read_to_string(&m) else { continue };
        let v: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        if let Some(outs) = v["outputs"].as_object() {
            for (path, d) in outs {
                let fname = Path::new(path).file_name().unwrap().to_string_lossy().into_owned();
                digests.insert(format!("{name}:{fname}"), d.as_str().unwrap_or("").to_string());
            }
        }
    }
    Outcome { steps, digests, dir: dir.to_path_buf() }
}
