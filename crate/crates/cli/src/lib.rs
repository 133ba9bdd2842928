//! Command-line surface of uniquery.

pub mod ablation;
pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use uniquery::checkpoint::load_checkpoint;
use uniquery::dataset::{render_dataset, DatasetManifest};
use uniquery::eval::evaluate;
use uniquery::scene::{generate_scene, SceneSpec, SyntheticScene};
use uniquery::trainer::{train, MetricsRecord};
use uniquery::verify::{run_suite, Suite};

use crate::ablation::{markdown, run_ablation};
use crate::config::{Arm, RunConfig};
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "uniquery", version, about = "Synthetic instance segmentation: data, training, evaluation, ablations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    Gen(GenArgs),
    /// Train one model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Mask AP of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train the arm x seed matrix and summarise it.
    Ablate(AblateArgs),
    /// Run the verification batteries.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config whose `[scene]` table is used (defaults otherwise).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset (overrides `paths.data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation dataset (overrides `paths.eval_dir`).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Omit wall-clock fields so reruns give identical logs.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub no_inter: bool,
    #[arg(long)]
    pub no_equi: bool,
    /// Replace the equivariance term by plain augmentation.
    #[arg(long)]
    pub aug_only: bool,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Arms to run (default: from the config).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub arms: Vec<Arm>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Parallel training runs (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Reuse finished runs and continue interrupted ones.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Grads,
    Oracles,
    Memory,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
}

/// Parse `args` (including the program name), run, and return the exit
/// status. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Gen(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn print_json<S: serde::Serialize>(v: &S) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

pub fn cmd_generate(a: GenArgs) -> CliResult<()> {
    let spec = match &a.spec {
        Some(p) => RunConfig::load(p)?.scene,
        None => SceneSpec::default(),
    };
    if a.count == 0 {
        return Err(CliError::Usage("--count must be >= 1".into()));
    }
    let m = render_dataset(a.count, &spec, &a.out, a.seed)?;
    print_json(&serde_json::json!({
        "root": a.out,
        "scenes": m.len(),
        "seed": m.seed,
    }));
    Ok(())
}

fn load_split(dir: &Path) -> CliResult<Vec<SyntheticScene>> {
    if !dir.join(uniquery::dataset::MANIFEST_FILE).exists() {
        return Err(CliError::Usage(format!("no dataset manifest in {}", dir.display())));
    }
    Ok(DatasetManifest::load(dir)?.load_all()?)
}

fn need(path: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("missing {flag} (or the matching [paths] entry)")))
}

pub fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let t = &mut cfg.train;
    t.inter &= !a.no_inter;
    t.equi &= !a.no_equi;
    t.aug_only |= a.aug_only;
    t.deterministic |= a.deterministic;
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.model.init_seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    cfg.validate().map_err(|e| CliError::Config {
        path: a.config.clone(),
        message: e.to_string(),
    })?;
    let data = need(a.data.or(cfg.paths.data_dir.clone()), "--data")?;
    let out = need(a.out.or(cfg.paths.out_dir.clone()), "--out")?;
    let train_set = load_split(&data)?;
    let eval_set = match a.eval_data.or(cfg.paths.eval_dir.clone()) {
        Some(d) => load_split(&d)?,
        None => Vec::new(),
    };
    let outcome = train(&train_set, &eval_set, &cfg.model, &cfg.train, &out, a.resume)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::io(out.join("config.toml"), e))?;
    let records = read_metrics(&outcome.metrics_log)?;
    if !records.is_empty() {
        plot::loss_curves(&records, &out.join("loss.svg"))?;
    }
    print_json(&serde_json::json!({
        "steps": outcome.steps,
        "final_checkpoint": outcome.final_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
        "metrics_log": outcome.metrics_log,
        "best": outcome.best,
    }));
    Ok(())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| {
                CliError::Core(uniquery::Error::Integrity {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

pub fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if !a.checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let (state, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let scenes = load_split(&a.data)?;
    let report = evaluate(&state.params, &scenes)?;
    print_json(&report);
    println!("{report}");
    Ok(())
}

pub fn scenes_from_seeds(spec: &SceneSpec, start: u64, count: usize) -> CliResult<Vec<SyntheticScene>> {
    (start..start + count as u64)
        .map(|s| generate_scene(s, spec).map_err(CliError::from))
        .collect()
}

pub fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = need(a.out.or(cfg.paths.out_dir.clone()), "--out")?;
    let arms = if a.arms.is_empty() { cfg.ablation.arms.clone() } else { a.arms };
    let seeds = if a.seeds.is_empty() { cfg.ablation.seeds.clone() } else { a.seeds };
    let train_set = match a.data.or(cfg.paths.data_dir.clone()) {
        Some(d) => load_split(&d)?,
        None => scenes_from_seeds(&cfg.scene, cfg.data.train_seed, cfg.data.train_count)?,
    };
    let eval_set = match a.eval_data.or(cfg.paths.eval_dir.clone()) {
        Some(d) => load_split(&d)?,
        None => scenes_from_seeds(&cfg.scene, cfg.data.eval_seed, cfg.data.eval_count)?,
    };
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = run_ablation(&cfg, &arms, &seeds, &train_set, &eval_set, &out, jobs, a.resume)?;
    let table = markdown(&report);
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))
    };
    write("ablation.json", &serde_json::to_string_pretty(&report).expect("serializable"))?;
    write("ablation.md", &table)?;
    plot::ablation_bars(&report, &out.join("ablation.svg"))?;
    print!("{table}");
    Ok(())
}

pub fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let suite = match a.suite {
        SuiteArg::Grads => Suite::Grads,
        SuiteArg::Oracles => Suite::Oracles,
        SuiteArg::Memory => Suite::Memory,
        SuiteArg::All => Suite::All,
    };
    let checks = run_suite(suite)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
