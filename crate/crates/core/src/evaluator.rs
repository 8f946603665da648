//! Scoring, per-category accuracy reports and ablation sweeps.
//!
//! Items are processed in parallel on a bounded pool; results are collected
//! in input order so every output file is independent of scheduling.
//! `report.json` is canonical: it carries no timestamps or latencies, and
//! two runs of the same configuration produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assigner::{parse_count, FinalVerdict, VerdictValue};
use crate::gateway::{Transcript, TranscriptEntry};
use crate::pipeline::{Engine, PipelineConfig, PipelineError};
use crate::retriever::{Mode, PoolLimit};
use crate::taxonomy::{normalize_answer, AnswerMode, Category, EvalItem, QuestionSpec};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Whether a verdict matches the ground truth. Counts must be exactly equal.
pub fn score(verdict: &FinalVerdict, ground_truth: &str, spec: &QuestionSpec) -> bool {
    match (&verdict.value, &spec.answer_mode) {
        (VerdictValue::Unresolved, _) => false,
        (VerdictValue::Choice(c), AnswerMode::Closed(_)) => {
            normalize_answer(c) == normalize_answer(ground_truth)
        }
        (VerdictValue::Count(n), AnswerMode::OpenNumeric) => {
            ground_truth.trim().parse::<u64>().ok().or_else(|| parse_count(ground_truth)) == Some(*n)
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by category; serialized in report row order.
    pub per_category: BTreeMap<Category, Tally>,
    pub overall: Tally,
    pub run_manifest_ref: String,
}

impl EvalReport {
    pub fn from_results(results: &[ItemResult], run_manifest_ref: impl Into<String>) -> Self {
        let mut per_category: BTreeMap<Category, Tally> = BTreeMap::new();
        let mut overall = Tally::default();
        for r in results {
            per_category.entry(r.category).or_default().add(r.correct);
            overall.add(r.correct);
        }
        Self {
            per_category,
            overall,
            run_manifest_ref: run_manifest_ref.into(),
        }
    }

    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "correct", "total", "accuracy"]).unwrap();
        let rows = self
            .per_category
            .iter()
            .map(|(c, t)| (c.label(), t))
            .chain(std::iter::once(("Overall Accuracy", &self.overall)));
        for (label, t) in rows {
            w.write_record([
                label.to_string(),
                t.correct.to_string(),
                t.total.to_string(),
                format!("{:.4}", t.accuracy),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<36} {:>8} {:>9}", "Question Type", "Accuracy", "Correct");
        for (c, t) in &self.per_category {
            let _ = writeln!(out, "{:<36} {:>8.2} {:>9}", c.label(), t.accuracy, format!("{}/{}", t.correct, t.total));
        }
        let t = &self.overall;
        let _ = writeln!(out, "{:<36} {:>8.2} {:>9}", "Overall Accuracy", t.accuracy, format!("{}/{}", t.correct, t.total));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub question_id: String,
    pub category: Category,
    pub ground_truth: String,
    pub verdict: FinalVerdict,
    pub correct: bool,
}

/// Everything produced by one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub results: Vec<ItemResult>,
    pub transcript: Vec<TranscriptEntry>,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub created_at: String,
    pub config_hash: String,
    pub registry_hash: String,
    pub store_hash: String,
    pub store_size: usize,
    pub backend_id: String,
    pub pipeline: PipelineConfig,
    pub item_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

/// Hash identifying a run configuration against a given engine state.
pub fn config_hash(engine: &Engine, config: &PipelineConfig, items: &[EvalItem]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(engine.registry.content_hash().as_bytes());
    h.update(engine.store.content_hash().as_bytes());
    h.update(engine.gateway.backend_id().as_bytes());
    h.update(serde_json::to_vec(items).expect("items serialize"));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { workers: 4 }
    }
}

fn evaluate_item(
    engine: &Engine,
    item: &EvalItem,
    config: &PipelineConfig,
) -> Result<(ItemResult, Vec<TranscriptEntry>), EvalError> {
    let spec = engine
        .registry
        .classify(&item.question_text)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let (verdict, exchanges) = match engine.ask(&item.image_ref, &item.question_text, None, config) {
        Ok(outcome) => (outcome.verdict, outcome.exchanges),
        Err(PipelineError::Gateway { stage, source, .. }) => (
            FinalVerdict::unresolved(stage, format!("model call failed: {source}")),
            Vec::new(),
        ),
        Err(e) => return Err(EvalError::Config(format!("item {}: {e}", item.item_id))),
    };
    let correct = score(&verdict, &item.ground_truth, spec);
    let transcript = exchanges
        .into_iter()
        .map(|exchange| TranscriptEntry {
            item_id: Some(item.item_id.clone()),
            exchange,
        })
        .collect();
    Ok((
        ItemResult {
            item_id: item.item_id.clone(),
            question_id: spec.question_id.clone(),
            category: spec.category,
            ground_truth: item.ground_truth.clone(),
            verdict,
            correct,
        },
        transcript,
    ))
}

fn check_embeddings(engine: &Engine, items: &[EvalItem], config: &PipelineConfig) -> Result<(), EvalError> {
    if config.retrieval.is_zero_shot() {
        return Ok(());
    }
    match items.iter().find(|i| engine.query_embedding(&i.image_ref, None).is_none()) {
        Some(i) => Err(EvalError::Config(format!(
            "no embedding for image `{}` (item {}); add it to the query index or run zero-shot",
            i.image_ref, i.item_id
        ))),
        None => Ok(()),
    }
}

/// Runs every item through the pipeline and aggregates accuracy.
///
/// Model failures on individual items are recorded as unresolved verdicts;
/// only configuration problems abort the run.
pub fn run_eval(
    engine: &Engine,
    items: &[EvalItem],
    config: &PipelineConfig,
    options: &EvalOptions,
) -> Result<EvalRun, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    check_embeddings(engine, items, config)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let per_item: Vec<_> = pool.install(|| {
        items
            .par_iter()
            .map(|item| evaluate_item(engine, item, config))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let hash = config_hash(engine, config, items);
    let mut results = Vec::with_capacity(per_item.len());
    let mut transcript = Vec::new();
    for (r, t) in per_item {
        results.push(r);
        transcript.extend(t);
    }
    let report = EvalReport::from_results(&results, hash.clone());
    let manifest = RunManifest {
        engine_version: ENGINE_VERSION.into(),
        created_at: chrono::Utc::now().to_rfc3339(),
        config_hash: hash,
        registry_hash: engine.registry.content_hash().to_string(),
        store_hash: engine.store.content_hash(),
        store_size: engine.store.len(),
        backend_id: engine.gateway.backend_id(),
        pipeline: config.clone(),
        item_count: items.len(),
        dataset: None,
    };
    Ok(EvalRun {
        report,
        results,
        transcript,
        manifest,
    })
}

/// `<UTC timestamp>-<first 12 hex chars of the config hash>`.
pub fn run_dir_name(manifest: &RunManifest) -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    format!("{stamp}-{}", &manifest.config_hash[..12])
}

/// Writes report, CSV, table, manifest, verdicts and transcript into `dir`.
pub fn write_run(dir: &Path, run: &EvalRun) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    put("report.json", run.report.canonical_json())?;
    put("report.csv", run.report.to_csv())?;
    put("report.txt", run.report.to_table())?;
    put(
        "manifest.json",
        serde_json::to_string_pretty(&run.manifest).expect("manifest serializes") + "\n",
    )?;
    let mut verdicts = String::new();
    for r in &run.results {
        verdicts.push_str(&serde_json::to_string(r).expect("result serializes"));
        verdicts.push('\n');
    }
    put("verdicts.jsonl", verdicts)?;

    let tpath = dir.join("transcript.jsonl");
    let _ = fs::remove_file(&tpath);
    let transcript = Transcript::open(&tpath).map_err(io_err(&tpath))?;
    for e in &run.transcript {
        transcript.append(e).map_err(io_err(&tpath))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub cot: bool,
    pub selection_stage: bool,
    pub pool_limit: PoolLimit,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "{}-cot_{}-sel_{}-pool_{}",
            match self.mode {
                Mode::ZeroShot => "zeroshot",
                Mode::Icl => "icl",
            },
            if self.cot { "on" } else { "off" },
            if self.selection_stage { "on" } else { "off" },
            self.pool_limit.label()
        )
    }

    pub fn apply(&self, base: &PipelineConfig, seed: u64) -> PipelineConfig {
        let mut c = base.clone();
        c.retrieval.mode = self.mode;
        c.retrieval.pool_limit_per_choice = self.pool_limit;
        c.retrieval.pool_sample_seed = seed;
        c.cot = self.cot;
        c.selection_stage = self.selection_stage;
        c
    }
}

/// Requested axis values; cells are their cross product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub mode: Vec<Mode>,
    pub cot: Vec<bool>,
    pub selection_stage: Vec<bool>,
    pub pool_limit: Vec<PoolLimit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub cells: Vec<AblationCell>,
    pub seed: u64,
}

impl AblationPlan {
    pub fn cross(axes: &AblationAxes, seed: u64) -> Self {
        let mut cells = Vec::new();
        for &mode in &axes.mode {
            for &cot in &axes.cot {
                for &selection_stage in &axes.selection_stage {
                    for &pool_limit in &axes.pool_limit {
                        cells.push(AblationCell {
                            mode,
                            cot,
                            selection_stage,
                            pool_limit,
                        });
                    }
                }
            }
        }
        Self { cells, seed }
    }

    /// Candidate-pool sweep: 0, 3, 5, 7 and all records per answer choice.
    pub fn pool_sweep(seed: u64) -> Self {
        Self::cross(
            &AblationAxes {
                mode: vec![Mode::Icl],
                cot: vec![true],
                selection_stage: vec![true],
                pool_limit: vec![
                    PoolLimit::Limited(0),
                    PoolLimit::Limited(3),
                    PoolLimit::Limited(5),
                    PoolLimit::Limited(7),
                    PoolLimit::Unlimited,
                ],
            },
            seed,
        )
    }

    /// Component arms: without selection and CoT, without CoT, full.
    pub fn component_arms(seed: u64) -> Self {
        let cell = |cot, selection_stage| AblationCell {
            mode: Mode::Icl,
            cot,
            selection_stage,
            pool_limit: PoolLimit::Unlimited,
        };
        Self {
            cells: vec![cell(false, false), cell(false, true), cell(true, true)],
            seed,
        }
    }

    /// Zero-shot against in-context, both with CoT and selection.
    pub fn zero_shot_vs_icl(seed: u64) -> Self {
        Self::cross(
            &AblationAxes {
                mode: vec![Mode::ZeroShot, Mode::Icl],
                cot: vec![true],
                selection_stage: vec![true],
                pool_limit: vec![PoolLimit::Unlimited],
            },
            seed,
        )
    }
}

/// Plan file: either explicit `cells` or `axes` to cross.
#[derive(Debug, Clone, Deserialize)]
pub struct PlanFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cells: Option<Vec<AblationCell>>,
    #[serde(default)]
    pub axes: Option<AblationAxes>,
}

impl PlanFile {
    pub fn into_plan(self) -> Result<AblationPlan, EvalError> {
        match (self.cells, self.axes) {
            (Some(cells), None) => Ok(AblationPlan { cells, seed: self.seed }),
            (None, Some(axes)) => Ok(AblationPlan::cross(&axes, self.seed)),
            _ => Err(EvalError::Config("plan needs exactly one of `cells` or `axes`".into())),
        }
    }
}

#[derive(Debug)]
pub struct CellOutcome {
    pub cell: AblationCell,
    pub config: PipelineConfig,
    pub result: Result<EvalRun, EvalError>,
}

/// One evaluation per cell; a failing cell does not affect the others.
pub fn run_ablation(
    engine: &Engine,
    items: &[EvalItem],
    base: &PipelineConfig,
    plan: &AblationPlan,
    options: &EvalOptions,
) -> Vec<CellOutcome> {
    plan.cells
        .iter()
        .map(|cell| {
            let config = cell.apply(base, plan.seed);
            let result = run_eval(engine, items, &config, options);
            CellOutcome {
                cell: *cell,
                config,
                result,
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct AblationSummaryCell<'a> {
    label: String,
    cell: &'a AblationCell,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Canonical summary of all cells, in plan order.
pub fn ablation_summary_json(outcomes: &[CellOutcome]) -> String {
    let cells: Vec<_> = outcomes
        .iter()
        .map(|o| AblationSummaryCell {
            label: o.cell.label(),
            cell: &o.cell,
            report: o.result.as_ref().ok().map(|r| &r.report),
            error: o.result.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    serde_json::to_string_pretty(&cells).expect("summary serializes") + "\n"
}

fn table_rows(outcomes: &[CellOutcome]) -> Vec<(String, Vec<Option<f64>>)> {
    let cats: std::collections::BTreeSet<Category> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .flat_map(|r| r.report.per_category.keys().copied())
        .collect();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = cats
        .iter()
        .map(|c| {
            let vals = outcomes
                .iter()
                .map(|o| {
                    o.result
                        .as_ref()
                        .ok()
                        .and_then(|r| r.report.per_category.get(c))
                        .map(|t| t.accuracy)
                })
                .collect();
            (c.label().to_string(), vals)
        })
        .collect();
    rows.push((
        "Overall Accuracy".into(),
        outcomes
            .iter()
            .map(|o| o.result.as_ref().ok().map(|r| r.report.overall.accuracy))
            .collect(),
    ));
    rows
}

/// Category rows by cell columns, plus the overall row.
pub fn ablation_csv(outcomes: &[CellOutcome]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["category".to_string()];
    header.extend(outcomes.iter().map(|o| o.cell.label()));
    w.write_record(&header).unwrap();
    for (label, vals) in table_rows(outcomes) {
        let mut rec = vec![label];
        rec.extend(vals.iter().map(|v| v.map_or_else(|| "error".into(), |a| format!("{a:.4}"))));
        w.write_record(&rec).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn ablation_table(outcomes: &[CellOutcome]) -> String {
    let mut out = String::new();
    for (i, o) in outcomes.iter().enumerate() {
        let _ = writeln!(out, "[{i}] {}", o.cell.label());
    }
    let header: String = (0..outcomes.len()).map(|i| format!("{:>10}", format!("[{i}]"))).collect();
    let _ = writeln!(out, "\n{:<36} {header}", "Question Type");
    for (label, vals) in table_rows(outcomes) {
        let cols: String = vals
            .iter()
            .map(|v| v.map_or_else(|| format!("{:>10}", "err"), |a| format!("{a:>10.2}")))
            .collect();
        let _ = writeln!(out, "{label:<36} {cols}");
    }
    out
}

/// Writes `ablation.json`, `ablation.csv`, `ablation.txt` and one run
/// directory per successful cell under `cells/`.
pub fn write_ablation(dir: &Path, outcomes: &[CellOutcome]) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut cell_dirs = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        if let Ok(run) = &o.result {
            let d = dir.join("cells").join(format!("{i:02}-{}", o.cell.label()));
            write_run(&d, run)?;
            cell_dirs.push(d);
        }
    }
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    put("ablation.json", ablation_summary_json(outcomes))?;
    put("ablation.csv", ablation_csv(outcomes))?;
    put("ablation.txt", ablation_table(outcomes))?;
    Ok(cell_dirs)
}
