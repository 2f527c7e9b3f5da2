//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 empty retrieval pool, 4 synthesis stage failure, 5 malformed input
//! data, 6 clustering or index error.

mod errors;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use errors::{CliError, ExitCode};

use crate::embedding_store::{load_db, parse_manifest, save_db, IntensityLevel};
use crate::flow_matching::{
    save_checkpoint, train_flow, FlowTask, FlowTrainConfig, SpeakerEmbedding, SyntheticMelTask, VectorFieldModel,
    DEFAULT_MEL_DIM, DEFAULT_ODE_STEPS, DEFAULT_SPEAKER_DIM,
};
use crate::io::atomic_write;
use crate::pipeline::{
    run_inference, write_fixture_tokens, EmbeddingProvider, FlowModelSource, InferenceAssets, JsonEmbeddingFile,
    MockTokenGenerator, SynthesisRequest, TokenFileMap,
};
use crate::retrieval::{load_index, partition_name, save_index, IndexOptions, Method, RetrievalEngine, DEFAULT_MAX_ITERS};
use crate::synthbench::{render_report, run_benchmark, BenchConfig, ReportFormat, SyntheticDatasetConfig, SyntheticMixture};

/// Emotion-prompt retrieval and flow-matching mel synthesis.
#[derive(Debug, Parser)]
#[command(name = "emorag", version)]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Increase log verbosity (-v info, -vv debug). EMORAG_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic emotion database.
    GenData(GenDataArgs),
    /// Build an EMDB database from a JSON manifest.
    Import(ImportArgs),
    /// Dump a database as CSV.
    Export(ExportArgs),
    /// Cluster the full database and each intensity subset.
    BuildIndex(BuildIndexArgs),
    /// Retrieve the best-matching record for a query embedding.
    Retrieve(RetrieveArgs),
    /// Measure retrieval accuracy and latency.
    Bench(BenchArgs),
    /// Train the flow-matching vector field on a synthetic token-to-mel task.
    TrainFm(TrainFmArgs),
    /// Run the full pipeline and write a mel artifact.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub emotions: usize,
    #[arg(long, default_value_t = 1000)]
    pub per_emotion: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Per-coordinate noise around each emotion centre.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Centres are uniform in [-spread, spread]^dim.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Weak, normal and strong fractions.
    #[arg(long, value_parser = parse_mix, default_value = "0.333333333333,0.333333333333,0.333333333334")]
    pub mix: [f64; 3],
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one token-feature file per record plus `tokens.json`.
    #[arg(long)]
    pub tokens_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub token_dim: usize,
    /// Also write a held-out query embedding (JSON) drawn from the mixture.
    #[arg(long)]
    pub query_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// JSON manifest: an array of records or {"dim": n, "records": [...]}.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the manifest's `tokens` entries as a token map.
    #[arg(long)]
    pub tokens_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Cluster count; defaults to the number of emotion labels per subset.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Output prefix: writes PREFIX.{all,weak,normal,strong}.emix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Index prefix given to build-index (needed for clustering).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Query embedding JSON.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub intensity: Option<IntensityLevel>,
    #[arg(long, default_value_t = Method::Embedding)]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [3000usize, 8000])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [Method::Embedding, Method::Clustering])]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub queries: u64,
    #[arg(long, default_value_t = 8)]
    pub emotions: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    /// Run cells concurrently (latencies then share the machine).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct TrainFmArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [512usize])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_MEL_DIM)]
    pub mel_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub token_dim: usize,
    #[arg(long, default_value_t = DEFAULT_SPEAKER_DIM)]
    pub speaker_dim: usize,
    /// Number of synthetic speakers in the training task.
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (CSV: step,loss).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Index prefix given to build-index (needed for clustering).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Token map JSON (record id to token file).
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference emotion embedding JSON.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub intensity: Option<IntensityLevel>,
    #[arg(long, default_value_t = Method::Clustering)]
    pub method: Method,
    /// Synthetic speaker id used for timbre conditioning.
    #[arg(long, default_value_t = 0)]
    pub speaker: u64,
    #[arg(long, default_value_t = DEFAULT_SPEAKER_DIM)]
    pub speaker_dim: usize,
    #[arg(long, default_value_t = DEFAULT_ODE_STEPS)]
    pub ode_steps: usize,
    /// Mel artifact output.
    #[arg(long)]
    pub out: PathBuf,
    /// Run report JSON; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 fractions, got {}", v.len()))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Usage as i32 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code() as i32
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMORAG_LOG", level))
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Import(a) => import(a),
        Command::Export(a) => export(a),
        Command::BuildIndex(a) => build_index(a, cli.seed),
        Command::Retrieve(a) => retrieve(a),
        Command::Bench(a) => bench(a, cli.seed),
        Command::TrainFm(a) => train_fm(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => atomic_write(p, bytes).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

fn to_json_line<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<(), CliError> {
    let config = SyntheticDatasetConfig {
        num_emotions: a.emotions,
        dim: a.dim,
        records_per_emotion: a.per_emotion,
        cluster_sigma: a.sigma,
        center_spread: a.spread,
        intensity_mix: a.mix,
        seed,
    };
    let mixture = SyntheticMixture::new(config)?;
    let db = mixture.sample_db();
    save_db(&db, &a.out)?;
    println!("wrote {} records to {}", db.len(), a.out.display());
    if let Some(dir) = &a.tokens_dir {
        if a.token_dim == 0 {
            return Err(CliError::Usage("--token-dim must be positive".into()));
        }
        let map = write_fixture_tokens(&db, dir, a.token_dim, seed)?;
        let map_path = dir.join("tokens.json");
        map.save(&map_path).map_err(|e| CliError::io(&map_path, e))?;
        println!("wrote {} token files and {}", db.len(), map_path.display());
    }
    if let Some(path) = &a.query_out {
        let (query, label) = mixture.sample_queries(1, seed).remove(0);
        let doc = serde_json::json!({ "embedding": query, "emotion_label": label });
        write_output(Some(path), &to_json_line(&doc))?;
        println!("wrote {label} query to {}", path.display());
    }
    Ok(())
}

fn import(a: &ImportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| CliError::io(&a.manifest, e))?;
    let (db, tokens) = parse_manifest(&text)?;
    save_db(&db, &a.out)?;
    println!("wrote {} records to {}", db.len(), a.out.display());
    if let Some(path) = &a.tokens_out {
        let map = TokenFileMap::from_entries(tokens.into_iter().map(|(id, p)| (id, PathBuf::from(p))));
        map.save(path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<(), CliError> {
    let db = load_db(&a.db)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "emotion_label".into(), "intensity".into(), "transcript".into()];
    header.extend((0..db.dim()).map(|i| format!("e{i}")));
    let enc = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record(&header).map_err(enc)?;
    for r in db.records() {
        let mut row = vec![
            r.id.clone(),
            r.emotion_label.clone(),
            r.intensity.to_string(),
            r.transcript.clone(),
        ];
        row.extend(r.embedding.values().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format(e.to_string()))?;
    write_output(a.out.as_deref(), &bytes)
}

fn index_path(prefix: &Path, level: Option<IntensityLevel>) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!(".{}.emix", partition_name(level)));
    PathBuf::from(s)
}

fn levels() -> impl Iterator<Item = Option<IntensityLevel>> {
    [None].into_iter().chain(IntensityLevel::ALL.into_iter().map(Some))
}

fn build_index(a: &BuildIndexArgs, seed: u64) -> Result<(), CliError> {
    let db = load_db(&a.db)?;
    let opts = IndexOptions {
        k: a.k,
        max_iters: a.max_iters,
        seed,
    };
    let (engine, skipped) = RetrievalEngine::build(db, &opts)?;
    for level in skipped {
        log::warn!("no {level} records; skipping that index");
        eprintln!("warning: no {level} records; index skipped");
    }
    for level in levels() {
        if let Some(index) = engine.index(level) {
            let path = index_path(&a.out, level);
            save_index(index, &path)?;
            println!(
                "{}: k={} records={} inertia={:.6} iterations={} converged={} -> {}",
                partition_name(level),
                index.k(),
                engine.subset(level).len(),
                index.inertia(),
                index.iterations(),
                index.converged(),
                path.display()
            );
        }
    }
    Ok(())
}

/// Database engine with the index for `level` attached when the file
/// exists.
fn load_engine(db: &Path, index: Option<&Path>, level: Option<IntensityLevel>) -> Result<RetrievalEngine, CliError> {
    let mut engine = RetrievalEngine::new(load_db(db)?);
    if let Some(prefix) = index {
        let path = index_path(prefix, level);
        if path.exists() {
            let idx = load_index(&path, engine.subset(level))?;
            engine.set_index(level, idx)?;
        } else {
            log::info!("no index file {}", path.display());
        }
    }
    Ok(engine)
}

fn retrieve(a: &RetrieveArgs) -> Result<(), CliError> {
    let engine = load_engine(&a.db, a.index.as_deref(), a.intensity)?;
    let query = JsonEmbeddingFile(a.query.clone()).reference_embedding()?;
    let result = engine.retrieve(&query, a.intensity, a.method)?;
    write_output(None, &to_json_line(&result))
}

fn bench(a: &BenchArgs, seed: u64) -> Result<(), CliError> {
    let mut config = BenchConfig::grid(&a.methods, &a.sizes, a.queries as usize, seed);
    config.dataset.num_emotions = a.emotions;
    config.dataset.dim = a.dim;
    config.dataset.cluster_sigma = a.sigma;
    config.max_iters = a.max_iters;
    config.parallel = a.parallel;
    let results = run_benchmark(&config)?;
    let bytes = render_report(&results, a.format)?;
    write_output(a.out.as_deref(), &bytes)
}

fn train_fm(a: &TrainFmArgs, seed: u64) -> Result<(), CliError> {
    let task = SyntheticMelTask::new(a.mel_dim, a.token_dim, a.speaker_dim, a.speakers, seed)?;
    let mut model = VectorFieldModel::new(task.dims(), &a.hidden, seed)?;
    let config = FlowTrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        ode_steps: DEFAULT_ODE_STEPS,
        seed,
    };
    let report = train_flow(&mut model, &task, &config)?;
    save_checkpoint(&model, &a.out)?;
    if let Some(path) = &a.loss_log {
        let mut w = csv::Writer::from_writer(Vec::new());
        let enc = |e: csv::Error| CliError::Format(e.to_string());
        w.write_record(["step", "loss"]).map_err(enc)?;
        for (step, loss) in report.losses.iter().enumerate() {
            w.write_record([step.to_string(), loss.to_string()]).map_err(enc)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Format(e.to_string()))?;
        write_output(Some(path), &bytes)?;
    }
    match (report.initial_loss(), report.final_loss()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps: loss {first:.6} -> {last:.6}; checkpoint {}",
            a.steps,
            a.out.display()
        ),
        _ => println!("0 steps: wrote initial checkpoint {}", a.out.display()),
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let engine = load_engine(&a.db, a.index.as_deref(), a.intensity)?;
    let tokens = TokenFileMap::load(&a.tokens)?;
    let reference = JsonEmbeddingFile(a.reference.clone()).reference_embedding()?;
    let request = SynthesisRequest::new(
        reference,
        a.text.clone(),
        a.intensity,
        a.method,
        SpeakerEmbedding::synthetic(a.speaker, a.speaker_dim),
        seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.ode_steps == 0 {
        return Err(CliError::Usage("--ode-steps must be positive".into()));
    }
    let generator = MockTokenGenerator::default();
    let assets = InferenceAssets {
        engine: &engine,
        tokens: &tokens,
        model: FlowModelSource::Checkpoint(a.checkpoint.clone()),
        generator: &generator,
        ode_steps: a.ode_steps,
    };
    let output = run_inference(&request, &assets, Some(&a.out))?;
    write_output(a.report.as_deref(), &to_json_line(&output.report))?;
    if a.report.is_some() {
        println!(
            "retrieved {} (similarity {:.6}); wrote {} mel frames to {}",
            output.report.retrieved_id,
            output.report.similarity,
            output.mel.len(),
            a.out.display()
        );
    }
    Ok(())
}
