//! Command-line pipeline: fetch, segment, annotate, sample, build training
//! sets, build prompts and score predictions.
//!
//! Every command reads and writes JSONL and leaves `<out>.manifest.json`
//! next to its output. Exit codes: 0 success, 1 data error, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use wxcorpus::augmentation::{build_rft_record, CandidateReport, DiversityStrategy, RftOptions, SelectionMode};
use wxcorpus::claims::{cross_check, extract_llm, extract_with, KeywordMatcher};
use wxcorpus::gateway::{sample_n, BackendConfig, ChatMessage, Embedder, Gateway, GatewayError, SeedPolicy};
use wxcorpus::ingestion::{align_era5, dedup_daily, ArchiveClient, AFOS_URL_ENV};
use wxcorpus::metrics::{
    accumulate_matches, breakdown, global_f1, hit_rate, parse_group_keys, reference_scores, render_table,
    weighted_aspect_scores, GroupRow, KeyedLedger, MatchLedger,
};
use wxcorpus::model::{parse_compact_date, DailyForecast, DayAnnotation, InstanceRecord, RawReport, SegmentedReport};
use wxcorpus::preference::build_pair;
use wxcorpus::prompting::{
    build_generation_prompt, build_ranking_prompt, few_shot_example, parse_generated, FewShotArchive, PromptSpec,
    VARIABLES,
};
use wxcorpus::segmentation::{coverage_filter, detect_anchors, segment, verify, SegmenterBackend, VerificationResult};
use wxcorpus::{AnnotationProtocol, Error, Result, Station};

pub const BACKEND_URL_ENV: &str = "WFR_BACKEND_URL";
pub const BACKEND_MODEL_ENV: &str = "WFR_BACKEND_MODEL";
pub const CONFIG_ENV: &str = "WFR_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "wxcorpus", version, about = "Forecast-discussion corpus pipeline")]
#[command(after_long_help = SCHEMAS)]
struct Cli {
    /// JSON config file (also read from WFR_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Annotation protocol JSON; defaults to the built-in table.
    #[arg(long, global = true)]
    protocol: Option<PathBuf>,
    /// Chat backend base URL (overrides WFR_BACKEND_URL and the config file).
    #[arg(long, global = true)]
    backend_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

const SCHEMAS: &str = "Schemas (one JSON object per line):
  raw.jsonl        {station, city, issued_at, body}
  segmented.jsonl  {report_id, station, issued_at, daily_forecast: [{date, weekday, forecast}], coverage}
  instances.jsonl  {id, city, time, image_refs, segmented, annotations: [{date, weekday, claims, aspects}]}
  samples.jsonl    {instance_id, report, temperature?, seed?}   report uses <<YYYYMMDD, Weekday>> Report: markers
  predictions      instances.jsonl lines, or {id, report}
  rft.jsonl        {id, images, prompt, reports}
  dpo.jsonl        {instance_id, images, prompt, chosen, rejected}
  prompts.jsonl    {id, system, user, images}
  judge input      {id, reports: [9 strings]}
  judge output     {id, system, user, warnings}
Config file (JSON): {archive_url, cache_dir, backend: {...}, embedder: {...}}";

#[derive(Subcommand, Debug)]
enum Command {
    /// Download discussions for one office, keep one per day, write raw.jsonl.
    Fetch(FetchArgs),
    /// Cut raw reports into four dated days and verify the cut.
    Segment(SegmentArgs),
    /// Label claims per day and emit instance records.
    Annotate(AnnotateArgs),
    /// Draw candidate reports from the chat backend.
    Sample(SampleArgs),
    /// Score predictions against gold instances.
    Evaluate(EvaluateArgs),
    /// Aspect hit rate of predictions against gold instances.
    HitRate(PairArgs),
    /// Build the rejection-sampling dataset.
    RftBuild(RftArgs),
    /// Build preference pairs.
    DpoBuild(DpoArgs),
    /// Build generation prompts.
    Prompt(PromptArgs),
    /// Build judge ranking prompts.
    JudgePrompt(JudgeArgs),
}

#[derive(Args, Debug)]
struct FetchArgs {
    #[arg(long)]
    station: String,
    /// First local date, YYYYMMDD.
    #[arg(long)]
    start: String,
    /// Last local date, YYYYMMDD.
    #[arg(long)]
    end: String,
    #[arg(long)]
    out: PathBuf,
    /// Archive endpoint (overrides WFR_AFOS_URL and the config file).
    #[arg(long)]
    archive_url: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also write reanalysis alignment records here.
    #[arg(long)]
    alignment: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the chat backend instead of the rule-based segmenter.
    #[arg(long)]
    llm: bool,
    /// Rejected reports; defaults to <out>.review.jsonl.
    #[arg(long)]
    review: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the chat backend instead of keyword matching.
    #[arg(long)]
    llm: bool,
    /// With --llm, write rule-vs-LLM disagreements here.
    #[arg(long)]
    cross_check: Option<PathBuf>,
    /// Directory holding per-report variable images.
    #[arg(long, default_value = "images")]
    image_root: String,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Send prompts without attaching images.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Comma-separated subset of city, day, aspect.
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args, Debug)]
struct RftArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// edit | tfidf | jaccard | embedding | union
    #[arg(long, default_value = "edit")]
    strategy: String,
    #[arg(long, default_value_t = 3)]
    max_reports: usize,
    /// Sub-reports kept per day after diversity selection.
    #[arg(long, default_value_t = 2)]
    per_day: usize,
    /// Use the gold text for covered days that have no perfect sub-report.
    #[arg(long)]
    gold_fallback: bool,
}

#[derive(Args, Debug)]
struct DpoArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Omit the per-day focus lines.
    #[arg(long)]
    no_aspect_control: bool,
    /// Number of few-shot examples drawn from --archive.
    #[arg(long, default_value_t = 0)]
    few_shot: usize,
    #[arg(long)]
    archive: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct JudgeArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub archive_url: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
    pub embedder: Option<BackendConfig>,
}

/// Effective settings after applying flags over env over file.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    archive_url: Option<String>,
    cache_dir: Option<PathBuf>,
    backend: BackendConfig,
    embedder: Option<BackendConfig>,
    protocol: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let file: FileConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let mut backend = file.backend.unwrap_or_default();
    if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
        backend.base_url = url;
    }
    if let Ok(model) = std::env::var(BACKEND_MODEL_ENV) {
        backend.model = model;
    }
    if let Some(url) = &cli.backend_url {
        backend.base_url = url.clone();
    }
    backend.validate()?;
    let archive_url = std::env::var(AFOS_URL_ENV).ok().or(file.archive_url);
    Ok(Resolved { archive_url, cache_dir: file.cache_dir, backend, embedder: file.embedder, protocol: cli.protocol.clone() })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
    pub wall_time_ms: u128,
}

pub fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Run {
    fn finish(self, primary: &Path) -> Result<()> {
        let digest = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            ps.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
        };
        let m = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            config: self.config,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: self.started.elapsed().as_millis(),
        };
        fs::write(manifest_path(primary), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn date_arg(raw: &str) -> Result<NaiveDate> {
    parse_compact_date(raw).ok_or_else(|| Error::Config(format!("bad date {raw:?}, expected YYYYMMDD")))
}

fn load_protocol(r: &Resolved) -> Result<AnnotationProtocol> {
    match &r.protocol {
        Some(p) => AnnotationProtocol::load(p),
        None => Ok(AnnotationProtocol::default_protocol()),
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => 2,
        Error::Backend(GatewayError::Config(_) | GatewayError::Auth(_)) => 2,
        _ => 1,
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, args: Vec<String>) -> Result<()> {
    let resolved = resolve(cli)?;
    let config = serde_json::to_value(&resolved)?;
    let start = |command: &'static str| Run {
        command,
        args: args.clone(),
        config: config.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        started: Instant::now(),
    };
    match &cli.command {
        Command::Fetch(a) => fetch(a, &resolved, start("fetch")),
        Command::Segment(a) => segment_cmd(a, &resolved, start("segment")),
        Command::Annotate(a) => annotate(a, &resolved, start("annotate")),
        Command::Sample(a) => sample(a, &resolved, start("sample")),
        Command::Evaluate(a) => evaluate(a, &resolved, start("evaluate")),
        Command::HitRate(a) => hit_rate_cmd(a, &resolved, start("hit-rate")),
        Command::RftBuild(a) => rft_build(a, &resolved, start("rft-build")),
        Command::DpoBuild(a) => dpo_build(a, &resolved, start("dpo-build")),
        Command::Prompt(a) => prompt(a, start("prompt")),
        Command::JudgePrompt(a) => judge_prompt(a, start("judge-prompt")),
    }
}

fn fetch(a: &FetchArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let station: Station = a.station.parse()?;
    let (start, end) = (date_arg(&a.start)?, date_arg(&a.end)?);
    let mut client = ArchiveClient::default();
    if let Some(url) = a.archive_url.clone().or_else(|| r.archive_url.clone()) {
        client.endpoint = url;
    }
    client.cache_dir = a.cache_dir.clone().or_else(|| r.cache_dir.clone());
    let reports = dedup_daily(&client.fetch_reports(station, start, end)?)?;
    write_jsonl(&a.out, &reports)?;
    run.outputs.push(a.out.clone());
    if let Some(p) = &a.alignment {
        let tz = station.tz();
        let rows: Vec<_> = reports.iter().map(|rep| align_era5(rep, tz)).collect();
        write_jsonl(p, &rows)?;
        run.outputs.push(p.clone());
    }
    eprintln!("fetch: {} reports for {station}", reports.len());
    run.finish(&a.out)
}

#[derive(Debug, Serialize)]
struct ReviewEntry {
    report_id: String,
    reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    verification: Option<VerificationResult>,
}

fn segment_cmd(a: &SegmentArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let raws: Vec<RawReport> = read_jsonl(&a.input)?;
    run.inputs.push(a.input.clone());
    let gateway = if a.llm { Some(Gateway::new(r.backend.clone())?) } else { None };
    let backend = match &gateway {
        Some(g) => SegmenterBackend::Llm(g),
        None => SegmenterBackend::RuleBased,
    };
    let mut kept = Vec::new();
    let mut review = Vec::new();
    for raw in &raws {
        let anchors = detect_anchors(&raw.body, raw.issued_local());
        let seg = match segment(raw, &anchors, &backend) {
            Ok(s) => s,
            Err(e @ (Error::Backend(GatewayError::Auth(_)) | Error::Backend(GatewayError::Config(_)))) => return Err(e),
            Err(e) => {
                review.push(ReviewEntry { report_id: raw.id(), reason: e.to_string(), verification: None });
                continue;
            }
        };
        let v = verify(raw, &seg, &anchors);
        if !v.passed {
            review.push(ReviewEntry { report_id: raw.id(), reason: "verification failed".into(), verification: Some(v) });
        } else if !coverage_filter(&seg) {
            review.push(ReviewEntry { report_id: raw.id(), reason: format!("coverage {}", seg.coverage), verification: None });
        } else {
            kept.push(seg);
        }
    }
    let review_path = a.review.clone().unwrap_or_else(|| sibling(&a.out, ".review.jsonl"));
    write_jsonl(&a.out, &kept)?;
    write_jsonl(&review_path, &review)?;
    run.outputs.extend([a.out.clone(), review_path]);
    eprintln!("segment: kept {} of {}, {} for review", kept.len(), raws.len(), review.len());
    run.finish(&a.out)
}

fn image_refs(root: &str, report_id: &str) -> Vec<String> {
    VARIABLES.iter().map(|(name, _)| format!("{root}/{report_id}/{name}.png")).collect()
}

fn annotate(a: &AnnotateArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let protocol = load_protocol(r)?;
    let matcher = KeywordMatcher::new(&protocol);
    let segs: Vec<SegmentedReport> = read_jsonl(&a.input)?;
    run.inputs.push(a.input.clone());
    let gateway = if a.llm { Some(Gateway::new(r.backend.clone())?) } else { None };
    let mut out = Vec::new();
    let mut disagreements = Vec::new();
    for seg in segs {
        seg.validate()?;
        let rule: Vec<DayAnnotation> = seg.days.iter().map(|d| extract_with(&matcher, d, &protocol)).collect();
        let annotations = match &gateway {
            Some(g) => {
                let llm = seg.days.iter().map(|d| extract_llm(d, &protocol, g)).collect::<Result<Vec<_>>>()?;
                disagreements.extend(cross_check(&seg.report_id, &rule, &llm)?);
                llm
            }
            None => rule,
        };
        out.push(InstanceRecord {
            id: seg.report_id.clone(),
            city: seg.station.info().city.clone(),
            time: seg.issued_at,
            image_refs: image_refs(&a.image_root, &seg.report_id),
            segmented: seg,
            annotations,
        });
    }
    write_jsonl(&a.out, &out)?;
    run.outputs.push(a.out.clone());
    if let Some(p) = &a.cross_check {
        write_jsonl(p, &disagreements)?;
        run.outputs.push(p.clone());
    }
    eprintln!("annotate: {} instances", out.len());
    run.finish(&a.out)
}

/// One sampled report for an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub instance_id: String,
    pub report: String,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn sample(a: &SampleArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let instances: Vec<InstanceRecord> = read_jsonl(&a.instances)?;
    run.inputs.push(a.instances.clone());
    let cfg = r.backend.clone().for_sampling();
    let temperature = cfg.temperature;
    let gateway = Gateway::new(cfg)?;
    let mut rows = Vec::new();
    for (k, inst) in instances.iter().enumerate() {
        let bundle = build_generation_prompt(&PromptSpec::from_instance(inst), true);
        let mut user = ChatMessage::user(bundle.user);
        if !a.no_images {
            user = user.with_images(inst.image_refs.iter().map(PathBuf::from));
        }
        let base = a.seed.wrapping_add((k as u64).wrapping_mul(a.n as u64));
        let batch = sample_n(&gateway, &[ChatMessage::system(bundle.system), user], a.n, SeedPolicy::Sequential(base))?;
        for (text, call) in batch.texts.iter().zip(batch.calls.iter().filter(|c| c.error.is_none())) {
            rows.push(SampleRecord {
                instance_id: inst.id.clone(),
                report: text.clone(),
                temperature: Some(temperature),
                seed: call.seed,
            });
        }
    }
    write_jsonl(&a.out, &rows)?;
    run.outputs.push(a.out.clone());
    eprintln!("sample: {} reports for {} instances", rows.len(), instances.len());
    run.finish(&a.out)
}

/// A prediction line: a full instance record, or a structured report text.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Prediction {
    Instance(Box<InstanceRecord>),
    Text { id: String, report: String },
}

impl Prediction {
    fn id(&self) -> &str {
        match self {
            Prediction::Instance(i) => &i.id,
            Prediction::Text { id, .. } => id,
        }
    }
}

/// Per-day predicted texts and annotations aligned to the gold dates.
fn align_prediction(
    pred: &Prediction,
    gold: &InstanceRecord,
    protocol: &AnnotationProtocol,
    matcher: &KeywordMatcher,
) -> Result<(Vec<String>, Vec<DayAnnotation>)> {
    match pred {
        Prediction::Instance(p) => {
            let texts = p.segmented.days.iter().map(|d| d.forecast.clone()).collect();
            Ok((texts, p.annotations.clone()))
        }
        Prediction::Text { report, .. } => {
            let parsed = match parse_generated(report) {
                Ok(p) => p,
                Err(Error::NoMarkers) => Vec::new(),
                Err(e) => return Err(e),
            };
            let mut texts = Vec::new();
            let mut anns = Vec::new();
            for g in &gold.segmented.days {
                let text = parsed
                    .iter()
                    .find(|p| !p.malformed && p.date == Some(g.date))
                    .map(|p| p.forecast.clone())
                    .unwrap_or_default();
                anns.push(extract_with(matcher, &DailyForecast::new(g.date, text.clone()), protocol));
                texts.push(text);
            }
            Ok((texts, anns))
        }
    }
}

struct Joined {
    gold: InstanceRecord,
    texts: Vec<String>,
    annotations: Vec<DayAnnotation>,
}

fn join(a: &PairArgs, r: &Resolved, run: &mut Run) -> Result<(Vec<Joined>, AnnotationProtocol)> {
    let protocol = load_protocol(r)?;
    let matcher = KeywordMatcher::new(&protocol);
    let preds: Vec<Prediction> = read_jsonl(&a.pred)?;
    let golds: Vec<InstanceRecord> = read_jsonl(&a.gold)?;
    run.inputs.extend([a.pred.clone(), a.gold.clone()]);
    let by_id: BTreeMap<&str, &Prediction> = preds.iter().map(|p| (p.id(), p)).collect();
    let mut out = Vec::new();
    for g in golds {
        let Some(p) = by_id.get(g.id.as_str()) else { continue };
        let (texts, annotations) = align_prediction(p, &g, &protocol, &matcher)?;
        out.push(Joined { gold: g, texts, annotations });
    }
    if out.is_empty() {
        return Err(Error::Parse("no prediction shares an id with the gold set".into()));
    }
    Ok((out, protocol))
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    instances: usize,
    global: wxcorpus::metrics::GlobalExtractionScore,
    weighted: wxcorpus::metrics::WeightedReport,
    reference: wxcorpus::metrics::ReferenceScores,
    breakdown: Vec<GroupRow>,
}

fn evaluate(a: &EvaluateArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let keys = parse_group_keys(a.group_by.as_deref().unwrap_or(""))?;
    if a.format != "text" && a.format != "json" {
        return Err(Error::Config(format!("unknown format {:?} (text|json)", a.format)));
    }
    let (joined, protocol) = join(&a.pair, r, &mut run)?;
    let mut ledger = MatchLedger::new();
    let mut stream = Vec::new();
    let (mut pred_days, mut gold_days) = (Vec::new(), Vec::new());
    for j in &joined {
        for (i, (p, g)) in j.annotations.iter().zip(&j.gold.annotations).enumerate() {
            let mut day = MatchLedger::new();
            accumulate_matches(std::slice::from_ref(p), std::slice::from_ref(g), &protocol, &mut day)?;
            ledger.merge(&day);
            stream.push(KeyedLedger { city: j.gold.city.clone(), day_index: i, ledger: day });
        }
        if j.annotations.len() != j.gold.annotations.len() {
            return Err(Error::LengthMismatch { left: j.annotations.len(), right: j.gold.annotations.len() });
        }
        pred_days.extend(j.texts.iter().cloned());
        gold_days.extend(j.gold.gold_texts().into_iter().map(String::from));
    }
    let pd: Vec<&str> = pred_days.iter().map(String::as_str).collect();
    let gd: Vec<&str> = gold_days.iter().map(String::as_str).collect();
    let report = EvaluationReport {
        instances: joined.len(),
        global: global_f1(&ledger),
        weighted: weighted_aspect_scores(&ledger),
        reference: reference_scores(&pd, &gd)?,
        breakdown: breakdown(&stream, &keys),
    };
    let rendered = if a.format == "json" {
        serde_json::to_string_pretty(&report)?
    } else {
        let g = &report.global;
        let mut s = format!(
            "instances {}\nglobal  P {:.4}  R {:.4}  F1 {:.4}\nweighted macro  P {:.4}  R {:.4}  F1 {:.4}\nBLEU-1 {:.4}  ROUGE-L {:.4}  METEOR {:.4}\n\n",
            report.instances,
            g.precision,
            g.recall,
            g.f1,
            report.weighted.macro_average.precision,
            report.weighted.macro_average.recall,
            report.weighted.macro_average.f1,
            report.reference.bleu1,
            report.reference.rouge_l,
            report.reference.meteor_simplified,
        );
        s.push_str(&render_table(&report.breakdown));
        s
    };
    println!("{rendered}");
    if let Some(out) = &a.pair.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
        run.outputs.push(out.clone());
        run.finish(out)?;
    }
    Ok(())
}

fn hit_rate_cmd(a: &PairArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let (joined, _) = join(a, r, &mut run)?;
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for j in &joined {
        pred.extend(j.annotations.iter().map(|d| d.aspects.clone()));
        gold.extend(j.gold.annotations.iter().map(|d| d.aspects.clone()));
    }
    let h = hit_rate(&pred, &gold)?;
    let text = serde_json::to_string_pretty(&h)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, text)?;
        run.outputs.push(out.clone());
        run.finish(out)?;
    }
    Ok(())
}

/// Scores samples per instance, keeping input order.
fn scored_candidates(
    instances: &[InstanceRecord],
    samples: &[SampleRecord],
    protocol: &AnnotationProtocol,
) -> Result<Vec<Vec<CandidateReport>>> {
    let matcher = KeywordMatcher::new(protocol);
    let index: BTreeMap<&str, usize> = instances.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut out: Vec<Vec<CandidateReport>> = vec![Vec::new(); instances.len()];
    for s in samples {
        let Some(&i) = index.get(s.instance_id.as_str()) else { continue };
        let inst = &instances[i];
        let mut c = match CandidateReport::from_generated(inst, &s.report, protocol, &matcher) {
            Err(Error::NoMarkers) => CandidateReport::score(inst, vec![String::new(); inst.annotations.len()], protocol, &matcher)?,
            other => other?,
        };
        c.temperature = s.temperature;
        c.seed = s.seed;
        out[i].push(c);
    }
    Ok(out)
}

fn rft_build(a: &RftArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let mode: SelectionMode = a.strategy.parse()?;
    if a.max_reports == 0 || a.per_day == 0 {
        return Err(Error::Config("--max-reports and --per-day must be at least 1".into()));
    }
    let protocol = load_protocol(r)?;
    let instances: Vec<InstanceRecord> = read_jsonl(&a.instances)?;
    let samples: Vec<SampleRecord> = read_jsonl(&a.candidates)?;
    run.inputs.extend([a.instances.clone(), a.candidates.clone()]);
    let wants_embedding = matches!(mode, SelectionMode::Single(DiversityStrategy::EmbeddingCosine) | SelectionMode::Union);
    if matches!(mode, SelectionMode::Single(DiversityStrategy::EmbeddingCosine)) && r.embedder.is_none() {
        return Err(Error::Config("embedding strategy needs an `embedder` entry in the config file".into()));
    }
    let gateway = match &r.embedder {
        Some(cfg) if wants_embedding => Some(Gateway::new(cfg.clone())?),
        _ => None,
    };
    let embedder: Option<&dyn Embedder> = gateway.as_ref().map(|g| g as &dyn Embedder);
    let opts = RftOptions { mode, per_day: a.per_day, max_reports: a.max_reports, seed: a.seed, gold_fallback: a.gold_fallback };
    let pools = scored_candidates(&instances, &samples, &protocol)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (inst, cands) in instances.iter().zip(&pools) {
        let seed = opts.seed ^ fnv(&inst.id);
        match build_rft_record(inst, cands, &RftOptions { seed, ..opts }, embedder) {
            Ok(rec) => rows.push(rec),
            Err(Error::EmptyDay(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    write_jsonl(&a.out, &rows)?;
    run.outputs.push(a.out.clone());
    run.config["rft"] = json!({
        "strategy": mode.to_string(),
        "max_reports": a.max_reports,
        "per_day": a.per_day,
        "seed": a.seed,
        "gold_fallback": a.gold_fallback,
    });
    eprintln!("rft-build: {} records, {skipped} instances lacked a perfect sub-report", rows.len());
    run.finish(&a.out)
}

/// Stable per-instance seed offset.
fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn dpo_build(a: &DpoArgs, r: &Resolved, mut run: Run) -> Result<()> {
    let protocol = load_protocol(r)?;
    let instances: Vec<InstanceRecord> = read_jsonl(&a.instances)?;
    let samples: Vec<SampleRecord> = read_jsonl(&a.candidates)?;
    run.inputs.extend([a.instances.clone(), a.candidates.clone()]);
    let pools = scored_candidates(&instances, &samples, &protocol)?;
    let rows: Vec<_> = instances.iter().zip(&pools).filter_map(|(inst, c)| build_pair(c, inst)).collect();
    write_jsonl(&a.out, &rows)?;
    run.outputs.push(a.out.clone());
    eprintln!("dpo-build: {} pairs from {} instances", rows.len(), instances.len());
    run.finish(&a.out)
}

#[derive(Debug, Serialize)]
struct PromptRow {
    id: String,
    system: String,
    user: String,
    images: Vec<String>,
}

fn prompt(a: &PromptArgs, mut run: Run) -> Result<()> {
    let instances: Vec<InstanceRecord> = read_jsonl(&a.instances)?;
    run.inputs.push(a.instances.clone());
    let archive_records: Vec<InstanceRecord> = match &a.archive {
        Some(p) => {
            run.inputs.push(p.clone());
            read_jsonl(p)?
        }
        None if a.few_shot > 0 => return Err(Error::Config("--few-shot needs --archive".into())),
        None => Vec::new(),
    };
    let archive = FewShotArchive::new(&archive_records);
    let control = !a.no_aspect_control;
    let mut rows = Vec::new();
    for inst in &instances {
        let mut spec = PromptSpec::from_instance(inst);
        spec.few_shot =
            archive.retrieve(inst.time, &inst.city, a.few_shot).into_iter().map(|r| few_shot_example(r, control)).collect();
        let b = build_generation_prompt(&spec, control);
        rows.push(PromptRow { id: inst.id.clone(), system: b.system, user: b.user, images: inst.image_refs.clone() });
    }
    write_jsonl(&a.out, &rows)?;
    run.outputs.push(a.out.clone());
    run.finish(&a.out)
}

#[derive(Debug, Deserialize)]
struct JudgeInput {
    id: String,
    reports: Vec<String>,
}

#[derive(Debug, Serialize)]
struct JudgeRow {
    id: String,
    system: String,
    user: String,
    warnings: Vec<String>,
}

fn judge_prompt(a: &JudgeArgs, mut run: Run) -> Result<()> {
    let golds: Vec<InstanceRecord> = read_jsonl(&a.gold)?;
    let inputs: Vec<JudgeInput> = read_jsonl(&a.candidates)?;
    run.inputs.extend([a.gold.clone(), a.candidates.clone()]);
    let by_id: BTreeMap<&str, &InstanceRecord> = golds.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut rows = Vec::new();
    for j in &inputs {
        let gold = by_id
            .get(j.id.as_str())
            .map(|g| wxcorpus::prompting::render_structured(&g.segmented.days))
            .ok_or_else(|| Error::Parse(format!("no gold instance {}", j.id)))?;
        let p = build_ranking_prompt(&gold, &j.reports)?;
        for w in &p.warnings {
            eprintln!("judge-prompt: {}: {w}", j.id);
        }
        rows.push(JudgeRow { id: j.id.clone(), system: p.system, user: p.user, warnings: p.warnings });
    }
    write_jsonl(&a.out, &rows)?;
    run.outputs.push(a.out.clone());
    run.finish(&a.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["wxcorpus", "evaluate", "--bogus"]), 2);
        assert_eq!(run(["wxcorpus", "--help"]), 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::UnknownKey("season".into())), 2);
        assert_eq!(exit_code(&Error::NoCoverage), 1);
    }

    #[test]
    fn manifest_beside_output() {
        assert_eq!(manifest_path(Path::new("out/rft.jsonl")), PathBuf::from("out/rft.jsonl.manifest.json"));
    }
}
