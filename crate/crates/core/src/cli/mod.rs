//! Command-line entry point.

mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::descriptors::{build_descriptor, build_pmf, estimate_idc, DescriptorDims};
use crate::metrics::{grouped_report, EvalRecord, Grouping};
use crate::nn::{default_config, random_search, save_model, train, Role, SearchSpace, TrainConfig};
use crate::phdist::{generate_library, GenConfig};
use crate::pipeline::{
    benchmark_suite, build_summaries, build_summaries_cached, dataset_path, dims_grid, infer_spec, measure_runtime,
    read_dataset, read_summaries, records_dataset, runtime_table, sweep_csv, sweep_dims, write_datasets,
    write_summaries, DatasetConfig, ModelBundle, PipelineError, Split, Suite,
};
use crate::simulator::{simulate_tandem, SimResult, TandemSpec};

pub use manifest::{digest_paths, manifest_path_for, FileDigest, RunManifest, MANIFEST_VERSION};

const COMMANDS: &[&str] = &[
    "gen-dists",
    "simulate",
    "describe",
    "build-dataset",
    "train",
    "tune",
    "infer",
    "predict",
    "evaluate",
    "sweep-dims",
    "bench",
    "runtime",
];

#[derive(Parser, Debug)]
#[command(name = "tandemflow", version, about = "Tandem queue simulation, labeling and neural surrogates")]
pub struct Cli {
    /// Master seed; overrides any seed in the config file.
    #[arg(long, global = true, env = "TANDEMFLOW_SEED")]
    seed: Option<u64>,
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true, env = "TANDEMFLOW_THREADS")]
    threads: Option<usize>,
    /// TOML or JSON config; `[command]` tables apply to that command only.
    #[arg(long, global = true, env = "TANDEMFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, global = true, env = "TANDEMFLOW_MANIFEST")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a PH library (.ph.json).
    GenDists(GenDistsArgs),
    /// Simulate a tandem line given as JSON {arrival, services}.
    Simulate(SimulateArgs),
    /// Departure descriptors and occupancy PMFs from a simulation result.
    Describe(DescribeArgs),
    /// Simulate two-station instances and write nn1/nn2/nn3 datasets.
    BuildDataset(BuildDatasetArgs),
    /// Train one network on a dataset directory.
    Train(TrainArgs),
    /// Random hyperparameter search for one network.
    Tune(TuneArgs),
    /// Run the network chain on a tandem spec.
    Infer(InferArgs),
    /// Apply each network of a bundle to its dataset split.
    Predict(PredictArgs),
    /// Grouped accuracy report from predictions and truth.
    Evaluate(EvaluateArgs),
    /// Validation SAE of NN2 over descriptor dims.
    SweepDims(SweepArgs),
    /// Compare the network chain and QNA against simulation.
    Bench(BenchArgs),
    /// Batch inference timing per network.
    Runtime(RuntimeArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenDistsArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    scv_min: Option<f64>,
    #[arg(long)]
    scv_max: Option<f64>,
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long)]
    max_order: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    arrivals: Option<u64>,
    #[arg(long)]
    warmup: Option<f64>,
    /// Spill departures to `<out>.s<j>.f64` sidecars (little-endian f64).
    #[arg(long)]
    raw_departures: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Simulation result JSON.
    #[arg(long, required_unless_present = "raw_departures", conflicts_with = "raw_departures")]
    sim: Option<PathBuf>,
    /// Bare inter-departure series (little-endian f64); yields the descriptor only.
    #[arg(long)]
    raw_departures: Option<PathBuf>,
    /// Descriptor dims as `n,n1,n2`.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long = "pmf-len", alias = "L")]
    pmf_len: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Comma-separated window lengths for the IDC curve.
    #[arg(long)]
    idc_grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    arrivals: Option<u64>,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long = "pmf-len", alias = "L")]
    pmf_len: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Upper bound of the service-mean range.
    #[arg(long)]
    max_utilization: Option<f64>,
    /// Reuse simulated instances stored here under the config digest.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    role: Role,
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hidden widths, e.g. `50,70,50`.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Sum squared errors within descriptor-loss blocks.
    #[arg(long)]
    loss_sum: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    role: Role,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    budget: Option<usize>,
    /// Leaderboard JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory written by predict.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    group: Option<Grouping>,
    #[arg(long)]
    role: Option<Role>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset directory (uses its summaries.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Inclusive range `a..b` or a single value.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    n1: Option<String>,
    #[arg(long)]
    n2: Option<String>,
    /// Random-search trials per cell (1 trains the configured network once).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    suite: Option<Suite>,
    /// Without a bundle only QNA is scored.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Simulated arrivals per scenario.
    #[arg(long)]
    arrivals: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RuntimeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long = "from")]
    from: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateConfig {
    arrivals: u64,
    warmup: f64,
    raw_departures: bool,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DescribeConfig {
    dims: String,
    pmf_len: usize,
    delta: f64,
    idc_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TuneConfig {
    budget: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictConfig {
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvaluateConfig {
    group: Grouping,
    role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepConfig {
    n: String,
    n1: String,
    n2: String,
    budget: usize,
    #[serde(flatten)]
    train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BenchConfig {
    suite: Suite,
    arrivals: u64,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuntimeConfig {
    batch: usize,
    seed: u64,
}

struct Ctx {
    seed: Option<u64>,
    file: Option<serde_json::Value>,
}

impl Ctx {
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, command: &str, base: T) -> Result<T> {
        manifest::overlay(base, manifest::section(self.file.as_ref(), command, COMMANDS))
            .with_context(|| format!("config for {command}"))
    }
}

struct Outcome {
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Default manifest location; `None` when data went to standard output.
    manifest_at: Option<PathBuf>,
}

impl Outcome {
    fn new<C: Serialize>(command: &str, config: &C, seeds: Vec<u64>) -> Result<Self> {
        Ok(Outcome {
            config: serde_json::json!({ command: config }),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_at: None,
        })
    }

    fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        if self.manifest_at.is_none() {
            self.manifest_at = Some(manifest_path_for(p));
        }
        self
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    chain: Vec<String>,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Schema(_) => "schema",
                PipelineError::Config(_) => "config",
                PipelineError::Bundle(_) => "bundle",
                PipelineError::Input(_) | PipelineError::Unstable { .. } => "input",
                _ => "runtime",
            };
        }
        if let Some(n) = cause.downcast_ref::<crate::nn::NnError>() {
            return match n {
                crate::nn::NnError::Config(_) | crate::nn::NnError::Arch(_) => "config",
                crate::nn::NnError::Format(_) => "schema",
                _ => "runtime",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or("TANDEMFLOW_LOG", "info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match execute(cli, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            let body = ErrorBody {
                kind: error_kind(&e),
                message: e.to_string(),
                chain: e.chain().skip(1).map(|c| c.to_string()).collect(),
            };
            let _ = writeln!(std::io::stderr(), "{}", serde_json::json!({ "error": body }));
            1
        }
    }
}

fn execute(cli: Cli, args: &[String]) -> Result<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    if let Command::Replay(r) = &cli.command {
        return replay(&r.from);
    }
    let ctx = Ctx {
        seed: cli.seed,
        file: cli.config.as_deref().map(manifest::load_config_file).transpose()?,
    };
    let command = args.iter().find(|a| COMMANDS.contains(&a.as_str())).cloned().unwrap_or_default();
    let inputs_before = |o: &Outcome| digest_paths(&o.inputs);
    let outcome = dispatch(&ctx, cli.command)?;
    // stdout-only runs record into the working directory
    let path = cli
        .manifest
        .or(outcome.manifest_at.clone())
        .unwrap_or_else(|| PathBuf::from(format!("tandemflow-{command}.manifest.json")));
    let m = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool: "tandemflow".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command,
        argv: args.to_vec(),
        cwd: std::env::current_dir().map(|d| d.display().to_string()).unwrap_or_default(),
        config: outcome.config.clone(),
        seeds: outcome.seeds.clone(),
        threads: rayon::current_num_threads(),
        inputs: inputs_before(&outcome)?,
        outputs: digest_paths(&outcome.outputs)?,
        started_unix: started,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    std::fs::write(&path, serde_json::to_vec_pretty(&m)?).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<Outcome> {
    match command {
        Command::GenDists(a) => gen_dists(ctx, a),
        Command::Simulate(a) => simulate(ctx, a),
        Command::Describe(a) => describe(ctx, a),
        Command::BuildDataset(a) => build_dataset(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Tune(a) => tune(ctx, a),
        Command::Infer(a) => infer(a),
        Command::Predict(a) => predict(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a),
        Command::SweepDims(a) => sweep(ctx, a),
        Command::Bench(a) => bench(ctx, a),
        Command::Runtime(a) => runtime(ctx, a),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    }
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parse {}", path.display()))
}

fn parse_dims(s: &str) -> Result<DescriptorDims> {
    Ok(DescriptorDims::parse(s)?)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow!("{p:?}: {e}")))
        .collect()
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    match s.split_once("..") {
        Some((a, b)) => Ok((a.trim().parse()?, b.trim().parse()?)),
        None => {
            let v = s.trim().parse()?;
            Ok((v, v))
        }
    }
}

fn gen_dists(ctx: &Ctx, a: GenDistsArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("gen-dists", GenConfig::new(100, 0.001, 15.0, 1.0, 0))?;
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.scv_min = a.scv_min.unwrap_or(cfg.scv_min);
    cfg.scv_max = a.scv_max.unwrap_or(cfg.scv_max);
    cfg.mean = a.mean.unwrap_or(cfg.mean);
    cfg.max_order = a.max_order.unwrap_or(cfg.max_order);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let lib = generate_library(&cfg)?;
    write_json(&a.out, &lib)?;
    log::info!("wrote {} distributions to {}", lib.len(), a.out.display());
    Ok(Outcome::new("gen-dists", &cfg, vec![cfg.seed])?.output(&a.out))
}

fn sidecar_path(out: &Path, station: usize) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".s{station}.f64"));
    PathBuf::from(s)
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<Outcome> {
    let base = SimulateConfig { arrivals: 1_000_000, warmup: crate::simulator::DEFAULT_WARMUP, raw_departures: false, seed: 0 };
    let mut cfg = ctx.resolve("simulate", base)?;
    cfg.arrivals = a.arrivals.unwrap_or(cfg.arrivals);
    cfg.warmup = a.warmup.unwrap_or(cfg.warmup);
    cfg.raw_departures |= a.raw_departures;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let spec: TandemSpec = read_json(&a.spec)?;
    spec.validate()?;
    let mut result = simulate_tandem(&spec, cfg.arrivals, cfg.warmup, cfg.seed)?;
    let mut outcome = Outcome::new("simulate", &cfg, vec![cfg.seed])?.input(&a.spec).output(&a.out);
    if cfg.raw_departures {
        for (j, st) in result.stations.iter_mut().enumerate() {
            let path = sidecar_path(&a.out, j + 1);
            let bytes: Vec<u8> = st.departures.iter().flat_map(|d| d.to_le_bytes()).collect();
            std::fs::write(&path, bytes)?;
            st.departures_file = path.file_name().map(|n| n.to_string_lossy().into_owned());
            st.departures = Vec::new();
            outcome = outcome.output(&path);
        }
    }
    write_json(&a.out, &result)?;
    Ok(outcome)
}

fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).with_context(|| format!("read {}", path.display()))?;
    if bytes.len() % 8 != 0 {
        bail!(PipelineError::Schema(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn event_times(gaps: &[f64]) -> Vec<f64> {
    gaps.iter()
        .scan(0.0, |t, d| {
            *t += d;
            Some(*t)
        })
        .collect()
}

fn load_departures(sim_path: &Path, result: &mut SimResult) -> Result<()> {
    let dir = sim_path.parent().unwrap_or(Path::new("."));
    for st in &mut result.stations {
        if let Some(f) = &st.departures_file {
            st.departures = read_f64_file(&dir.join(f))?;
        }
    }
    Ok(())
}

fn describe(ctx: &Ctx, a: DescribeArgs) -> Result<Outcome> {
    let base = DescribeConfig { dims: DescriptorDims::default().to_string(), pmf_len: 150, delta: 1e-3, idc_grid: Vec::new() };
    let mut cfg = ctx.resolve("describe", base)?;
    if let Some(d) = a.dims {
        cfg.dims = d;
    }
    cfg.pmf_len = a.pmf_len.unwrap_or(cfg.pmf_len);
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    if let Some(g) = a.idc_grid {
        cfg.idc_grid = parse_list(&g)?;
    }
    let dims = parse_dims(&cfg.dims)?;
    if let Some(raw) = &a.raw_departures {
        let series = read_f64_file(raw)?;
        let descriptor = build_descriptor(&series, dims)?;
        let idc = if cfg.idc_grid.is_empty() { None } else { Some(estimate_idc(&event_times(&series), &cfg.idc_grid)?) };
        write_json(&a.out, &serde_json::json!({ "dims": dims, "descriptor": descriptor, "idc": idc }))?;
        return Ok(Outcome::new("describe", &cfg, vec![])?.input(raw).output(&a.out));
    }
    let sim_path = a.sim.expect("clap requires --sim without --raw-departures");
    let mut sim: SimResult = read_json(&sim_path)?;
    load_departures(&sim_path, &mut sim)?;
    let mut stations = Vec::new();
    for (j, st) in sim.stations.iter().enumerate() {
        let descriptor = build_descriptor(&st.departures, dims).with_context(|| format!("station {}", j + 1))?;
        let pmf = build_pmf(&st.pmf_counts, cfg.pmf_len, cfg.delta)?;
        if pmf.tail_flag {
            log::warn!("station {}: tail mass {:.3e} exceeds delta", j + 1, pmf.tail_mass);
        }
        let idc =
            if cfg.idc_grid.is_empty() { None } else { Some(estimate_idc(&event_times(&st.departures), &cfg.idc_grid)?) };
        stations.push(serde_json::json!({
            "station": j + 1,
            "descriptor": descriptor,
            "pmf": pmf,
            "mean_occupancy": st.mean_occupancy(),
            "utilization": st.busy_time / sim.sim_time,
            "mean_sojourn": st.mean_sojourn(),
            "idc": idc,
        }));
    }
    write_json(&a.out, &serde_json::json!({ "dims": dims, "stations": stations }))?;
    Ok(Outcome::new("describe", &cfg, vec![sim.seed])?.input(&sim_path).output(&a.out))
}

fn build_dataset(ctx: &Ctx, a: BuildDatasetArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("build-dataset", DatasetConfig::default())?;
    cfg.n_train = a.train.unwrap_or(cfg.n_train);
    cfg.n_val = a.val.unwrap_or(cfg.n_val);
    cfg.n_test = a.test.unwrap_or(cfg.n_test);
    cfg.n_arrivals = a.arrivals.unwrap_or(cfg.n_arrivals);
    if let Some(d) = a.dims {
        cfg.dims = parse_dims(&d)?;
    }
    cfg.pmf_len = a.pmf_len.unwrap_or(cfg.pmf_len);
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    if let Some(u) = a.max_utilization {
        cfg.service_mean.1 = u;
    }
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let set = match &a.cache {
        Some(dir) => build_summaries_cached(&cfg, dir)?,
        None => build_summaries(&cfg)?,
    };
    log::info!(
        "{} instances, {} rejected draws, {} dropped",
        set.instances.len(),
        set.rejections.len(),
        set.dropped.len()
    );
    std::fs::create_dir_all(&a.out)?;
    write_summaries(&set, &a.out.join("summaries.jsonl"))?;
    write_datasets(&set, cfg.dims, &a.out)?;
    Ok(Outcome::new("build-dataset", &cfg, vec![cfg.seed])?.output(&a.out))
}

fn resolve_train(ctx: &Ctx, command: &str, role: Role) -> Result<TrainConfig> {
    let mut cfg = ctx.resolve(command, default_config(role, 0))?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    Ok(cfg)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<Outcome> {
    let mut cfg = resolve_train(ctx, "train", a.role)?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    if let Some(h) = a.hidden {
        cfg.hidden = parse_list(&h)?;
    }
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.loss_sum |= a.loss_sum;
    cfg.validate_search_space()?;
    let path = dataset_path(&a.data, a.role);
    let (header, records) = read_dataset(&path)?;
    let tr = records_dataset(&records, Split::Train)?;
    let va = records_dataset(&records, Split::Val)?;
    let out = train(&tr, &va, &cfg, a.role.head(), header.dims.n)?;
    let mut model = out.model;
    model.meta.role = Some(a.role);
    model.meta.dims = Some(header.dims);
    save_model(&model, &a.out)?;
    let mut curve_path = a.out.as_os_str().to_owned();
    curve_path.push(".curve.json");
    let curve_path = PathBuf::from(curve_path);
    write_json(
        &curve_path,
        &serde_json::json!({ "best_epoch": out.best_epoch, "best_val": out.best_val, "curve": out.curve }),
    )?;
    log::info!("{}: best validation metric {:.6} at epoch {}", a.role, out.best_val, out.best_epoch);
    Ok(Outcome::new("train", &cfg, vec![cfg.seed])?.input(&path).output(&a.out).output(&curve_path))
}

fn tune(ctx: &Ctx, a: TuneArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("tune", TuneConfig { budget: 10, seed: 0 })?;
    cfg.budget = a.budget.unwrap_or(cfg.budget);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let path = dataset_path(&a.data, a.role);
    let (header, records) = read_dataset(&path)?;
    let tr = records_dataset(&records, Split::Train)?;
    let va = records_dataset(&records, Split::Val)?;
    let head = a.role.head();
    let result = random_search(
        &SearchSpace::default(),
        cfg.budget,
        |c| train(&tr, &va, c, head, header.dims.n).map(|o| o.best_val),
        cfg.seed,
    )?;
    write_json(&a.out, &result)?;
    Ok(Outcome::new("tune", &cfg, vec![cfg.seed])?.input(&path).output(&a.out))
}

fn infer(a: InferArgs) -> Result<Outcome> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let spec: TandemSpec = read_json(&a.spec)?;
    spec.validate()?;
    let pred = infer_spec(&bundle, &spec)?;
    let mut outcome = Outcome::new("infer", &serde_json::json!({}), vec![])?.input(&a.bundle).input(&a.spec);
    match &a.out {
        Some(p) => {
            write_json(p, &pred)?;
            outcome = outcome.output(p);
        }
        None => emit(&format!("{}\n", serde_json::to_string(&pred)?))?,
    }
    Ok(outcome)
}

const PRED_FORMAT: &str = "tandemflow-predictions";

#[derive(Serialize, Deserialize)]
struct PredHeader {
    format: String,
    version: u32,
    role: Role,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct PredRecord {
    index: usize,
    output: Vec<f64>,
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("predict", PredictConfig { split: Split::Test })?;
    cfg.split = a.split.unwrap_or(cfg.split);
    let bundle = ModelBundle::load(&a.bundle)?;
    std::fs::create_dir_all(&a.out)?;
    let mut outcome = Outcome::new("predict", &cfg, vec![])?.input(&a.bundle);
    outcome.manifest_at = Some(a.out.join("manifest.json"));
    for role in Role::ALL {
        let path = dataset_path(&a.data, role);
        let (header, records) = read_dataset(&path)?;
        if header.dims != bundle.dims {
            bail!(PipelineError::Bundle(format!("dataset dims {} vs bundle dims {}", header.dims, bundle.dims)));
        }
        let model = match role {
            Role::Nn1 => &bundle.nn1,
            Role::Nn2 => &bundle.nn2,
            Role::Nn3 => &bundle.nn3,
        };
        let chosen: Vec<_> = records.iter().filter(|r| r.split == cfg.split).collect();
        let out_path = dataset_path(&a.out, role);
        let mut buf = serde_json::to_vec(&PredHeader { format: PRED_FORMAT.into(), version: 1, role, split: cfg.split })?;
        buf.push(b'\n');
        for chunk in chosen.chunks(1024) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|r| r.input.clone()).collect();
            let x = ndarray::Array2::from_shape_vec((rows.len(), model.input_len()), rows.concat())?;
            let y = model.forward_batch(x.view())?;
            for (r, out) in chunk.iter().zip(y.rows()) {
                serde_json::to_writer(&mut buf, &PredRecord { index: r.provenance.index, output: out.to_vec() })?;
                buf.push(b'\n');
            }
        }
        std::fs::write(&out_path, buf)?;
        outcome = outcome.input(&path).output(&out_path);
    }
    Ok(outcome)
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("evaluate", EvaluateConfig { group: Grouping::UtilScv, role: Role::Nn2 })?;
    cfg.group = a.group.unwrap_or(cfg.group);
    cfg.role = a.role.unwrap_or(cfg.role);
    let truth_path = dataset_path(&a.truth, cfg.role);
    let pred_path = dataset_path(&a.pred, cfg.role);
    let (header, records) = read_dataset(&truth_path)?;
    let text = std::fs::read_to_string(&pred_path).with_context(|| format!("read {}", pred_path.display()))?;
    let mut lines = text.lines();
    let ph: PredHeader = serde_json::from_str(lines.next().ok_or_else(|| anyhow!("empty prediction file"))?)?;
    if ph.format != PRED_FORMAT || ph.version != 1 || ph.role != cfg.role {
        bail!(PipelineError::Schema(format!("{}: not {} predictions", pred_path.display(), cfg.role)));
    }
    let by_index: std::collections::HashMap<usize, &crate::pipeline::DatasetRecord> =
        records.iter().map(|r| (r.provenance.index, r)).collect();
    let mut evals = Vec::new();
    for line in lines {
        let p: PredRecord = serde_json::from_str(line)?;
        let t = by_index.get(&p.index).ok_or_else(|| anyhow!("prediction for unknown instance {}", p.index))?;
        let rec = match cfg.role {
            Role::Nn2 => EvalRecord {
                covariates: t.covariates,
                truth_pmf: Some(t.label.clone()),
                pred_pmf: Some(p.output),
                dims: None,
                truth_descriptor: None,
                pred_descriptor: None,
            },
            _ => EvalRecord {
                covariates: t.covariates,
                truth_pmf: None,
                pred_pmf: None,
                dims: Some(header.dims),
                truth_descriptor: Some(t.label.clone()),
                pred_descriptor: Some(p.output),
            },
        };
        evals.push(rec);
    }
    let report = grouped_report(&evals, cfg.group)?;
    std::fs::write(&a.out, report.to_csv())?;
    let mut side = a.out.as_os_str().to_owned();
    side.push(".json");
    let side = PathBuf::from(side);
    write_json(&side, &serde_json::json!({ "metadata": report.metadata(), "report": report }))?;
    Ok(Outcome::new("evaluate", &cfg, vec![])?.input(&truth_path).input(&pred_path).output(&a.out).output(&side))
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<Outcome> {
    let base = SweepConfig {
        n: "5".into(),
        n1: "0..2".into(),
        n2: "0..2".into(),
        budget: 1,
        train: default_config(Role::Nn2, 0),
    };
    let mut cfg = ctx.resolve("sweep-dims", base)?;
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.n1 {
        cfg.n1 = v;
    }
    if let Some(v) = a.n2 {
        cfg.n2 = v;
    }
    cfg.budget = a.budget.unwrap_or(cfg.budget);
    cfg.train.seed = ctx.seed.unwrap_or(cfg.train.seed);
    let summaries = a.data.join("summaries.jsonl");
    let set = read_summaries(&summaries)?;
    let cells = dims_grid(parse_range(&cfg.n)?, parse_range(&cfg.n1)?, parse_range(&cfg.n2)?)?;
    let table = sweep_dims(&set, &cells, &cfg.train, cfg.budget)?;
    std::fs::write(&a.out, sweep_csv(&table))?;
    let mut side = a.out.as_os_str().to_owned();
    side.push(".json");
    let side = PathBuf::from(side);
    write_json(&side, &table)?;
    Ok(Outcome::new("sweep-dims", &cfg, vec![cfg.train.seed])?.input(&summaries).output(&a.out).output(&side))
}

fn bench(ctx: &Ctx, a: BenchArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("bench", BenchConfig { suite: Suite::TwoStationGrid, arrivals: 1_000_000, seed: 0 })?;
    cfg.suite = a.suite.unwrap_or(cfg.suite);
    cfg.arrivals = a.arrivals.unwrap_or(cfg.arrivals);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let bundle = a.bundle.as_deref().map(ModelBundle::load).transpose()?;
    let report = benchmark_suite(cfg.suite, bundle.as_ref(), cfg.arrivals, cfg.seed)?;
    if let Some(r) = report.reference_count {
        log::info!("{} scenarios (reference count {r})", report.scenario_count);
    }
    std::fs::write(&a.out, report.to_csv())?;
    let mut side = a.out.as_os_str().to_owned();
    side.push(".json");
    let side = PathBuf::from(side);
    write_json(&side, &report)?;
    let mut o = Outcome::new("bench", &cfg, vec![cfg.seed])?;
    if let Some(b) = &a.bundle {
        o = o.input(b);
    }
    Ok(o.output(&a.out).output(&side))
}

fn runtime(ctx: &Ctx, a: RuntimeArgs) -> Result<Outcome> {
    let mut cfg = ctx.resolve("runtime", RuntimeConfig { batch: 750, seed: 0 })?;
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let bundle = ModelBundle::load(&a.bundle)?;
    let rows = measure_runtime(&bundle, cfg.batch, cfg.seed)?;
    let table = runtime_table(&rows);
    let mut o = Outcome::new("runtime", &cfg, vec![cfg.seed])?.input(&a.bundle);
    match &a.out {
        Some(p) => {
            std::fs::write(p, &table)?;
            o = o.output(p);
        }
        None => emit(&table)?,
    }
    Ok(o)
}

/// Re-runs the recorded command with its resolved configuration after
/// checking that the recorded inputs are unchanged.
fn replay(manifest_path: &Path) -> Result<()> {
    let m: RunManifest = read_json(manifest_path)?;
    if m.manifest_version != MANIFEST_VERSION {
        bail!(PipelineError::Schema(format!("manifest version {}", m.manifest_version)));
    }
    if !m.cwd.is_empty() {
        std::env::set_current_dir(&m.cwd).with_context(|| format!("enter {}", m.cwd))?;
    }
    for d in &m.inputs {
        let (sha, _) = manifest::sha256_file(Path::new(&d.path))?;
        if sha != d.sha256 {
            bail!(PipelineError::Input(format!("input {} changed since the recorded run", d.path)));
        }
    }
    let dir = tempfile_dir()?;
    let cfg_path = dir.join("replay-config.json");
    write_json(&cfg_path, &m.config)?;
    let mut argv = vec!["tandemflow".to_string()];
    let mut skip = false;
    for a in &m.argv {
        if skip {
            skip = false;
            continue;
        }
        if a == "--config" || a == "--manifest" {
            skip = true;
            continue;
        }
        if a.starts_with("--config=") || a.starts_with("--manifest=") {
            continue;
        }
        argv.push(a.clone());
    }
    argv.push("--config".into());
    argv.push(cfg_path.display().to_string());
    argv.push("--manifest".into());
    argv.push(dir.join("replay-manifest.json").display().to_string());
    let code = run(argv);
    let _ = std::fs::remove_dir_all(&dir);
    if code != 0 {
        bail!("replayed command exited with {code}");
    }
    Ok(())
}

fn tempfile_dir() -> Result<PathBuf> {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("tandemflow-replay-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
