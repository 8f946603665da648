use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dvqa_core::config::{BackendConfig, ConfigError, EngineConfig, SidecarPaths};
use dvqa_core::evaluator::{
    ablation_table, run_ablation, run_dir_name, run_eval, write_ablation, write_run, AblationPlan,
    EvalError, EvalOptions, PlanFile,
};
use dvqa_core::gateway::Transcript;
use dvqa_core::retriever::{Mode, PoolLimit};
use dvqa_core::server::{serve, AppState};
use dvqa_core::store::{normalize, ImageEmbeddings, Store};
use dvqa_core::taxonomy::{load_dataset, Dataset};
use dvqa_core::PipelineError;

#[derive(Parser)]
#[command(name = "dvqa", version, about = "Retrieval-augmented two-stage VQA over disaster imagery")]
struct Cli {
    /// Engine config file (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Use a scripted backend from this JSON script.
    #[arg(long, global = true, conflicts_with = "replay")]
    script: Option<PathBuf>,
    /// Replay responses from a JSON-lines transcript.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Shipped question registry to use.
    #[arg(long, global = true, value_enum)]
    dataset_registry: Option<RegistryArg>,
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Candidate pool per answer choice: an integer or `unlimited`.
    #[arg(long, global = true)]
    pool_limit: Option<PoolLimit>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    no_cot: bool,
    /// Skip stage 2 and take the answer from the reasoning directly.
    #[arg(long, global = true)]
    no_selection: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegistryArg {
    Floodnet,
    Rescuenet,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ZeroShot,
    Icl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    PoolSweep,
    Components,
    ZeroShot,
}

#[derive(Subcommand)]
enum Command {
    /// Validate support-set sidecar files and print a summary.
    Ingest {
        #[arg(long, requires = "vectors")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        vectors: Option<PathBuf>,
        /// Also validate a query-embedding index.
        #[arg(long, requires = "query_vectors")]
        query_manifest: Option<PathBuf>,
        #[arg(long, requires = "query_manifest")]
        query_vectors: Option<PathBuf>,
    },
    /// Answer one question about one image.
    Ask {
        #[arg(long)]
        image: String,
        #[arg(long)]
        question: String,
        /// JSON array holding the image's raw embedding.
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Print the full outcome as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a JSON-lines dataset and write a report directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run an ablation plan; one report per cell.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, conflicts_with = "plan")]
        preset: Option<Preset>,
        /// Plan file (JSON) with `cells` or `axes`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Append every exchange to this transcript.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::File { .. } | ConfigError::Invalid(_) => "config",
            ConfigError::Registry(_) => "registry",
            ConfigError::Store(_) => "store",
            ConfigError::Templates(_) => "templates",
            ConfigError::Backend(_) => "backend",
        };
        Self::new(kind, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new("eval", e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match e {
            PipelineError::Taxonomy(_) => "registry",
            PipelineError::Retrieval(_) => "retrieval",
            PipelineError::Prompt(_) => "prompt",
            PipelineError::Gateway { .. } => "gateway",
        };
        Self::new(kind, e)
    }
}

fn load_config(cli: &Cli) -> Result<EngineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(p) = &o.script {
        cfg.backend = BackendConfig::Scripted { script: p.clone() };
    }
    if let Some(p) = &o.replay {
        cfg.backend = BackendConfig::Replay { transcript: p.clone() };
    }
    if let Some(r) = o.dataset_registry {
        cfg.registry.path = None;
        cfg.registry.dataset = Some(match r {
            RegistryArg::Floodnet => Dataset::FloodNet,
            RegistryArg::Rescuenet => Dataset::RescueNet,
        });
    }
    if let Some(p) = &o.image_root {
        cfg.image_root = Some(p.clone());
    }
    let r = &mut cfg.pipeline.retrieval;
    if let Some(m) = o.mode {
        r.mode = match m {
            ModeArg::ZeroShot => Mode::ZeroShot,
            ModeArg::Icl => Mode::Icl,
        };
    }
    if let Some(p) = o.pool_limit {
        r.pool_limit_per_choice = p;
    }
    if let Some(s) = o.seed {
        r.pool_sample_seed = s;
    }
    if o.no_cot {
        cfg.pipeline.cot = false;
    }
    if o.no_selection {
        cfg.pipeline.selection_stage = false;
    }
    Ok(cfg)
}

fn out_dir(cfg: &EngineConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.eval.out_dir.clone())
}

fn options(cfg: &EngineConfig, workers: Option<usize>) -> EvalOptions {
    EvalOptions {
        workers: workers.unwrap_or(cfg.eval.workers),
    }
}

fn ingest(cfg: &EngineConfig, store: Option<SidecarPaths>, queries: Option<SidecarPaths>) -> Result<(), CliError> {
    let store_paths = store
        .or_else(|| cfg.store.clone())
        .ok_or_else(|| CliError::new("config", "no store given; pass --manifest/--vectors or set [store]"))?;
    let store = Store::load_sidecar(&store_paths.manifest, &store_paths.vectors)
        .map_err(|e| CliError::new("store", e))?;
    let mut summary = json!({
        "records": store.len(),
        "unique_images": store.unique_images(),
        "dim": store.dim(),
        "content_hash": store.content_hash(),
    });
    if let Some(q) = queries.or_else(|| cfg.queries.clone()) {
        let idx = ImageEmbeddings::load_sidecar(&q.manifest, &q.vectors).map_err(|e| CliError::new("store", e))?;
        if idx.dim() != store.dim() {
            return Err(CliError::new(
                "store",
                format!("query index dim {} differs from store dim {}", idx.dim(), store.dim()),
            ));
        }
        summary["query_images"] = json!(idx.len());
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn ask(cfg: &EngineConfig, image: &str, question: &str, embedding: Option<&Path>, as_json: bool) -> Result<(), CliError> {
    let engine = cfg.build_engine()?;
    let embedding = match embedding {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            let raw: Vec<f32> = serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            Some(normalize(&raw).map_err(|e| CliError::new("store", e))?)
        }
        None => None,
    };
    let outcome = engine.ask(image, question, embedding.as_ref(), &cfg.pipeline)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
        return Ok(());
    }
    println!("{}", outcome.verdict.value);
    println!();
    println!("{}", outcome.trace.raw.trim_end());
    Ok(())
}

fn eval(cfg: &EngineConfig, data: &Path, out: &Option<PathBuf>, workers: Option<usize>) -> Result<(), CliError> {
    let engine = cfg.build_engine()?;
    let items = load_dataset(data, &engine.registry).map_err(|e| CliError::new("dataset", e))?;
    let mut run = run_eval(&engine, &items, &cfg.pipeline, &options(cfg, workers))?;
    run.manifest.dataset = Some(data.display().to_string());
    let dir = out_dir(cfg, out).join(run_dir_name(&run.manifest));
    write_run(&dir, &run)?;
    print!("{}", run.report.to_table());
    println!("\nreport: {}", dir.display());
    Ok(())
}

fn ablate(
    cfg: &EngineConfig,
    data: &Path,
    preset: Option<Preset>,
    plan: Option<&Path>,
    out: &Option<PathBuf>,
    workers: Option<usize>,
) -> Result<(), CliError> {
    let seed = cfg.pipeline.retrieval.pool_sample_seed;
    let plan = match (plan, preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            let file: PlanFile = serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
            file.into_plan()?
        }
        (None, Some(Preset::Components)) => AblationPlan::component_arms(seed),
        (None, Some(Preset::ZeroShot)) => AblationPlan::zero_shot_vs_icl(seed),
        (None, Some(Preset::PoolSweep) | None) => AblationPlan::pool_sweep(seed),
    };
    let engine = cfg.build_engine()?;
    let items = load_dataset(data, &engine.registry).map_err(|e| CliError::new("dataset", e))?;
    let outcomes = run_ablation(&engine, &items, &cfg.pipeline, &plan, &options(cfg, workers));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let dir = out_dir(cfg, out).join(format!("{stamp}-ablation"));
    write_ablation(&dir, &outcomes)?;
    print!("{}", ablation_table(&outcomes));
    println!("\nreport: {}", dir.display());
    let failed: Vec<_> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().err().map(|e| format!("{}: {e}", o.cell.label())))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("eval", format!("{} cell(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

fn run_server(cfg: &EngineConfig, bind: Option<String>, transcript: Option<PathBuf>) -> Result<(), CliError> {
    let engine = cfg.build_engine()?;
    let transcript = match transcript.or_else(|| cfg.server.transcript.clone()) {
        Some(p) => Some(Transcript::open(&p).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?),
        None => None,
    };
    let state = Arc::new(AppState {
        engine,
        pipeline: cfg.pipeline.clone(),
        runs_dir: cfg.eval.out_dir.clone(),
        transcript,
    });
    let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e))?;
    rt.block_on(serve(state, &bind, &cfg.server.cors_origin))
        .map_err(|e| CliError::new("io", e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest {
            manifest,
            vectors,
            query_manifest,
            query_vectors,
        } => {
            let pair = |m: Option<PathBuf>, v: Option<PathBuf>| m.zip(v).map(|(manifest, vectors)| SidecarPaths { manifest, vectors });
            ingest(&cfg, pair(manifest, vectors), pair(query_manifest, query_vectors))
        }
        Command::Ask {
            image,
            question,
            embedding,
            json,
        } => ask(&cfg, &image, &question, embedding.as_deref(), json),
        Command::Eval { data, out, workers } => eval(&cfg, &data, &out, workers),
        Command::Ablate {
            data,
            preset,
            plan,
            out,
            workers,
        } => ablate(&cfg, &data, preset, plan.as_deref(), &out, workers),
        Command::Serve { bind, transcript } => run_server(&cfg, bind, transcript),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind, "message": e.message }));
            ExitCode::from(2)
        }
    }
}
