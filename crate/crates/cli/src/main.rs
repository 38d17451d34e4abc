//! Command-line front end: model validation, bound curves, simulation,
//! single algorithm runs, multi-instance experiments, and response-log
//! replay. Standard output stays machine-parseable; progress goes to
//! standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crowdclust::adaptive::{run_adaptive, AdaptiveHistory, AdaptiveOptions, ScoreMode};
use crowdclust::divergence::{
    divergence_uniform, error_lower_bound, global_divergence_adaptive, global_divergence_uniform,
    BoundKind,
};
use crowdclust::harness::{
    ingest_responses, replay_experiment, run_experiment, write_curves_csv, ExperimentConfig,
    ModelSource, ReplayConfig,
};
use crowdclust::model::{validate_model, Model, SimulatedAnswers};
use crowdclust::uniform::{
    collect_uniform, kmeans_cluster, misclassification_error, normalize_profiles, ClusterResult,
    ErrorRecord,
};

#[derive(Parser)]
#[command(
    name = "crowdclust",
    version,
    about = "Clustering from noisy binary feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a model document and print its constants as JSON.
    Validate(CommonArgs),
    /// Emit per-item divergences, sandwich bounds, and error lower-bound
    /// curves as CSV.
    Bounds(CommonArgs),
    /// Simulate uniform response collection and dump the raw counts as CSV.
    Simulate(CommonArgs),
    /// One uniform-selection clustering run; prints the clustering and its
    /// misclassification record as JSON.
    RunUniform(CommonArgs),
    /// One adaptive run; prints the final clustering as JSON and writes the
    /// selection history and checkpoint CSVs.
    RunAdaptive(CommonArgs),
    /// Multi-instance paired experiment producing the curve CSV.
    Experiment(CommonArgs),
    /// Replay a recorded response log under both selection strategies.
    Replay(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for file artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for instance-level parallelism (experiment only).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config's score mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Print progress to standard error.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Kl,
    Quadratic,
}

impl From<ModeArg> for ScoreMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Kl => ScoreMode::Kl,
            ModeArg::Quadratic => ScoreMode::Quadratic,
        }
    }
}

/// Usage problems exit 1; data and model problems exit 2.
enum CliError {
    Usage(String),
    Data(String),
}

impl From<crowdclust::Error> for CliError {
    fn from(e: crowdclust::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (help/version go to stdout with
            // success; real usage errors to stderr).
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match &cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::RunUniform(args) => cmd_run_uniform(args),
        Command::RunAdaptive(args) => cmd_run_adaptive(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_config(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(args: &CommonArgs) -> Result<T, CliError> {
    let text = read_config(&args.config)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", args.config.display())))
}

fn ensure_out_dir(args: &CommonArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Usage(format!("cannot create output dir: {e}")))
}

fn progress(args: &CommonArgs, msg: &str) {
    if args.verbose > 0 {
        eprintln!("{msg}");
    }
}

/// Shared model-selection knobs for the single-run subcommands.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfig {
    model: ModelSource,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    hardness_interval: Option<[f64; 2]>,
}

impl ModelConfig {
    fn build(&self) -> Result<Model<f64>, CliError> {
        Ok(self
            .model
            .build(self.n, self.hardness_interval, self.seed)?)
    }
}

fn cmd_validate(args: &CommonArgs) -> Result<(), CliError> {
    let text = read_config(&args.config)?;
    // Accept either a wrapper config or a bare model document.
    let model = match serde_json::from_str::<ModelConfig>(&text) {
        Ok(mut config) => {
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            config.build()?
        }
        Err(_) => Model::from_json(&text)?,
    };
    let report = validate_model(&model);
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsConfig {
    model: ModelSource,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    hardness_interval: Option<[f64; 2]>,
    /// Budgets at which the error lower bounds are evaluated.
    t_values: Vec<u64>,
    #[serde(default = "default_one")]
    w: usize,
    /// Also optimize the adaptive allocation bound per budget (can be slow
    /// for large n).
    #[serde(default = "default_true")]
    adaptive_bound: bool,
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn cmd_bounds(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: BoundsConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if config.t_values.is_empty() {
        return Err(CliError::Usage("t_values must be nonempty".into()));
    }
    ensure_out_dir(args)?;
    let model = ModelConfig {
        model: config.model.clone(),
        n: config.n,
        seed: config.seed,
        hardness_interval: config.hardness_interval,
    }
    .build()?;

    progress(args, "computing per-item divergences");
    let path = args.out.join("bounds.csv");
    let mut wtr = csv::Writer::from_path(&path).map_err(crowdclust::Error::from)?;
    let mut header = vec![
        "item_id".to_string(),
        "D_U".to_string(),
        "D_U_lower".to_string(),
        "D_U_upper".to_string(),
    ];
    for &t in &config.t_values {
        header.push(format!("bound_at_{t}"));
    }
    wtr.write_record(&header).map_err(crowdclust::Error::from)?;
    let n = model.num_items() as f64;
    for i in 0..model.num_items() {
        let div = divergence_uniform(&model, i)?;
        let mut row = vec![
            i.to_string(),
            div.value.to_string(),
            div.lower_bound.to_string(),
            div.upper_bound.to_string(),
        ];
        for &t in &config.t_values {
            let beta = t as f64 * config.w as f64 / n;
            row.push((-beta * div.value).exp().min(1.0).to_string());
        }
        wtr.write_record(&row).map_err(crowdclust::Error::from)?;
    }
    wtr.flush().map_err(crowdclust::Error::from)?;

    progress(args, "computing global bounds");
    let global_path = args.out.join("bounds_global.csv");
    let mut wtr = csv::Writer::from_path(&global_path).map_err(crowdclust::Error::from)?;
    wtr.write_record([
        "t",
        "uniform_global_divergence",
        "uniform_global_bound",
        "adaptive_global_divergence",
        "adaptive_global_bound",
    ])
    .map_err(crowdclust::Error::from)?;
    for &t in &config.t_values {
        let d_uniform = global_divergence_uniform(&model, t, config.w)?;
        let b_uniform = error_lower_bound(&model, t, config.w, BoundKind::UniformGlobal)?;
        let (d_adaptive, b_adaptive) = if config.adaptive_bound {
            let opt = global_divergence_adaptive(&model, t, config.w)?;
            let beta = t as f64 * config.w as f64 / n;
            (
                opt.global.to_string(),
                (-beta * opt.global).exp().min(1.0).to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        wtr.write_record([
            t.to_string(),
            d_uniform.to_string(),
            b_uniform.to_string(),
            d_adaptive,
            b_adaptive,
        ])
        .map_err(crowdclust::Error::from)?;
    }
    wtr.flush().map_err(crowdclust::Error::from)?;
    eprintln!("wrote {} and {}", path.display(), global_path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelSource,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    hardness_interval: Option<[f64; 2]>,
    /// User budget.
    t: u64,
    #[serde(default = "default_one")]
    w: usize,
    #[serde(default)]
    score_mode: Option<ScoreMode>,
}

impl RunConfig {
    fn build_model(&self) -> Result<Model<f64>, CliError> {
        ModelConfig {
            model: self.model.clone(),
            n: self.n,
            seed: self.seed,
            hardness_interval: self.hardness_interval,
        }
        .build()
    }
}

fn cmd_simulate(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: RunConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    ensure_out_dir(args)?;
    let model = config.build_model()?;
    let counts = collect_uniform(&model, config.t, config.w, derive_stream(config.seed, 1))?;
    let path = args.out.join("counts.csv");
    let file = fs::File::create(&path).map_err(crowdclust::Error::from)?;
    counts.write_csv(file)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RunOutput<'a> {
    clusters: &'a ClusterResult<f64>,
    error: &'a ErrorRecord<f64>,
}

fn cmd_run_uniform(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: RunConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = config.build_model()?;
    let counts = collect_uniform(&model, config.t, config.w, derive_stream(config.seed, 1))?;
    let profiles = normalize_profiles(&counts);
    let clusters = kmeans_cluster(&profiles, model.num_clusters(), config.t)?;
    let error = misclassification_error(&clusters, model.sigma())?;
    let output = RunOutput {
        clusters: &clusters,
        error: &error,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&output).expect("output serializes")
    );
    Ok(())
}

fn cmd_run_adaptive(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: RunConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    ensure_out_dir(args)?;
    let model = config.build_model()?;
    let mut options = AdaptiveOptions::default();
    if let Some(mode) = config.score_mode {
        options.score_mode = mode;
    }
    if let Some(mode) = args.mode {
        options.score_mode = mode.into();
    }
    let source = SimulatedAnswers::new(&model, derive_stream(config.seed, 2));
    let (clusters, history) = run_adaptive::<f64, _>(
        source,
        model.num_clusters(),
        config.t,
        config.w,
        derive_stream(config.seed, 3),
        options,
    )?;
    let error = misclassification_error(&clusters, model.sigma())?;

    write_history_csv(&history, &args.out.join("history.csv"))?;
    write_checkpoints_csv(&history, &args.out.join("checkpoints.csv"))?;
    let output = RunOutput {
        clusters: &clusters,
        error: &error,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&output).expect("output serializes")
    );
    eprintln!(
        "wrote {} and {}",
        args.out.join("history.csv").display(),
        args.out.join("checkpoints.csv").display()
    );
    Ok(())
}

fn write_history_csv(history: &AdaptiveHistory<f64>, path: &Path) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(crowdclust::Error::from)?;
    wtr.write_record(["t", "item_id", "question_id", "answer"])
        .map_err(crowdclust::Error::from)?;
    for record in &history.selections {
        for (&item, &answer) in record.items.iter().zip(&record.answers) {
            wtr.write_record([
                record.t.to_string(),
                item.to_string(),
                record.question.to_string(),
                answer.to_string(),
            ])
            .map_err(crowdclust::Error::from)?;
        }
    }
    wtr.flush().map_err(crowdclust::Error::from)?;
    Ok(())
}

fn write_checkpoints_csv(history: &AdaptiveHistory<f64>, path: &Path) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_path(path).map_err(crowdclust::Error::from)?;
    wtr.write_record([
        "t",
        "error_rate",
        "share_hard_informative",
        "share_hard_dummy",
        "share_rest_informative",
        "share_rest_dummy",
    ])
    .map_err(crowdclust::Error::from)?;
    for cp in &history.checkpoints {
        wtr.write_record([
            cp.t.to_string(),
            cp.error_rate.map(|e| e.to_string()).unwrap_or_default(),
            cp.shares.hard_informative.to_string(),
            cp.shares.hard_dummy.to_string(),
            cp.shares.rest_informative.to_string(),
            cp.shares.rest_dummy.to_string(),
        ])
        .map_err(crowdclust::Error::from)?;
    }
    wtr.flush().map_err(crowdclust::Error::from)?;
    Ok(())
}

fn cmd_experiment(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: ExperimentConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.score_mode = mode.into();
    }
    ensure_out_dir(args)?;
    progress(
        args,
        &format!(
            "running {} instance(s) on {} job(s)",
            config.instances, args.jobs
        ),
    );
    let outcome = run_experiment(&config, args.jobs)?;
    let path = args.out.join("curves.csv");
    let file = fs::File::create(&path).map_err(crowdclust::Error::from)?;
    write_curves_csv(&outcome.curves, file)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_replay(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: ReplayConfig = parse_config(args)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.score_mode = mode.into();
    }
    ensure_out_dir(args)?;
    let mut log = ingest_responses(Path::new(&config.log))?;
    if let Some(m) = config.replicate {
        if m == 0 {
            return Err(CliError::Usage("replicate must be at least 1".into()));
        }
        log = log.replicate(m);
    }
    progress(
        args,
        &format!(
            "replaying {} items x {} users over {} instance(s)",
            log.num_items(),
            log.num_users(),
            config.instances
        ),
    );
    let outcome = replay_experiment(&log, &config)?;
    let path = args.out.join("curves.csv");
    let file = fs::File::create(&path).map_err(crowdclust::Error::from)?;
    write_curves_csv(&outcome.curves, file)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn derive_stream(seed: u64, tag: u64) -> u64 {
    crowdclust::rng::derive(seed, tag)
}
