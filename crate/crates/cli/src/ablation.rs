//! Arm x seed training matrix with a summary table.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use uniquery::checkpoint::load_checkpoint;
use uniquery::eval::APReport;
use uniquery::scene::SyntheticScene;
use uniquery::segmenter::ModelConfig;
use uniquery::trainer::{train, EvalRecord, TrainConfig, EVAL_LOG, FINAL_CHECKPOINT};

use crate::config::{Arm, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub seed: u64,
    pub report: APReport,
    pub steps: u64,
    pub dir: PathBuf,
}

/// The six table columns, AP values in [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seeds: usize,
    pub median: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub arms: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn median_of(&self, arm: Arm) -> Option<&MetricRow> {
        self.arms.iter().find(|a| a.arm == arm).map(|a| &a.median)
    }
}

/// Median, averaging the middle pair for even counts; `None` if empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn summarize(runs: &[RunResult], arm: Arm) -> ArmSummary {
    let mine: Vec<&APReport> = runs.iter().filter(|r| r.arm == arm).map(|r| &r.report).collect();
    let col = |f: &dyn Fn(&APReport) -> Option<f64>| -> Option<f64> {
        median(&mine.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    ArmSummary {
        arm,
        seeds: mine.len(),
        median: MetricRow {
            ap: col(&|r| Some(r.ap)).unwrap_or(0.0),
            ap50: col(&|r| Some(r.ap50)).unwrap_or(0.0),
            ap75: col(&|r| Some(r.ap75)).unwrap_or(0.0),
            ap_s: col(&|r| r.ap_s),
            ap_m: col(&|r| r.ap_m),
            ap_l: col(&|r| r.ap_l),
        },
    }
}

/// Configs of one run: arm switches plus the seed in both the training
/// stream and the weight init.
pub fn run_configs(base: &RunConfig, arm: Arm, seed: u64) -> (ModelConfig, TrainConfig) {
    let mut train = base.train.clone();
    arm.apply(&mut train);
    train.seed = seed;
    let model = ModelConfig {
        init_seed: seed,
        ..base.model.clone()
    };
    (model, train)
}

fn last_eval(dir: &Path) -> CliResult<Option<EvalRecord>> {
    let path = dir.join(EVAL_LOG);
    if !path.exists() {
        return Ok(None);
    }
    let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let mut last = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(&path, e))?;
        last = Some(serde_json::from_str(&line).map_err(|e| {
            CliError::Core(uniquery::Error::Integrity {
                path: path.clone(),
                reason: e.to_string(),
            })
        })?);
    }
    Ok(last)
}

/// A finished run in `dir` trained with exactly these configs.
fn completed(dir: &Path, model: &ModelConfig, train: &TrainConfig) -> CliResult<Option<RunResult>> {
    let ckpt = dir.join(FINAL_CHECKPOINT);
    if !ckpt.exists() {
        return Ok(None);
    }
    let (state, saved) = load_checkpoint::<f32>(&ckpt)?;
    if saved.model != *model || saved.train != *train || state.epoch != train.epochs {
        return Ok(None);
    }
    Ok(last_eval(dir)?.filter(|e| e.epoch == train.epochs).map(|e| RunResult {
        arm: Arm::Baseline,
        seed: train.seed,
        report: e.report,
        steps: state.step,
        dir: dir.to_path_buf(),
    }))
}

fn run_one(
    base: &RunConfig,
    arm: Arm,
    seed: u64,
    train_set: &[SyntheticScene],
    eval_set: &[SyntheticScene],
    out: &Path,
    resume: bool,
) -> CliResult<RunResult> {
    let (model, train_cfg) = run_configs(base, arm, seed);
    let dir = out.join(arm.name()).join(format!("seed{seed}"));
    if resume {
        if let Some(done) = completed(&dir, &model, &train_cfg)? {
            return Ok(RunResult { arm, ..done });
        }
    }
    let outcome = train(train_set, eval_set, &model, &train_cfg, &dir, resume)?;
    let report = last_eval(&dir)?
        .map(|e| e.report)
        .ok_or_else(|| CliError::Usage("ablation needs a nonempty eval split".into()))?;
    Ok(RunResult {
        arm,
        seed,
        report,
        steps: outcome.steps,
        dir,
    })
}

/// Train every (arm, seed) pair on `jobs` threads and summarise. Each run
/// is single-threaded and seeded, so results do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    train_set: &[SyntheticScene],
    eval_set: &[SyntheticScene],
    out: &Path,
    jobs: usize,
    resume: bool,
) -> CliResult<AblationReport> {
    if eval_set.is_empty() {
        return Err(CliError::Usage("ablation needs a nonempty eval split".into()));
    }
    let tasks: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<RunResult>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let started = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(arm, seed)) = tasks.get(i) else { break };
                let r = run_one(base, arm, seed, train_set, eval_set, out, resume);
                match &r {
                    Ok(r) => eprintln!(
                        "[{:>7.0}s] {:<8} seed {seed}: AP {:.2}",
                        started.elapsed().as_secs_f64(),
                        arm.name(),
                        100.0 * r.report.ap
                    ),
                    Err(e) => eprintln!("{} seed {seed} failed: {e}", arm.name()),
                }
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(tasks.len());
    for r in results.into_inner().expect("no poisoned workers") {
        runs.push(r.expect("every task ran")?);
    }
    let arms = arms.iter().map(|&a| summarize(&runs, a)).collect();
    Ok(AblationReport { runs, arms })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Markdown table of the per-arm medians.
pub fn markdown(report: &AblationReport) -> String {
    let mut s = String::from("| arm | seeds | AP | AP50 | AP75 | AP_S | AP_M | AP_L |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for a in &report.arms {
        let m = &a.median;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            a.arm.label(),
            a.seeds,
            pct(Some(m.ap)),
            pct(Some(m.ap50)),
            pct(Some(m.ap75)),
            pct(m.ap_s),
            pct(m.ap_m),
            pct(m.ap_l)
        ));
    }
    s
}
