//! Seeded, reproducible experiment runner: configuration loading, the
//! training loop for every environment/method pairing, CSV/JSON emission and
//! multi-config comparison.
//!
//! Reproducibility contract: given identical configuration and build, the
//! emitted CSV is byte-identical across runs. Wall-clock timings are carried
//! in [`RunRecord::ms`] for programmatic consumers and in the JSON sidecar's
//! `timing` block, but never enter the CSV (its `ms` column is always 0) and
//! are the one sidecar field excluded from the determinism guarantee.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{two_state_factory, NonlinearSystem, TetrisActionSpace, TetrisSim};
use crate::estimate::{forward_estimate, recurrent_estimate_episodes, EstimateError};
use crate::exact::{self, EngineError};
use crate::model::{ParamVector, SampledEnv, TabularMdp};
use crate::optim::{
    direction, em_step_sampled, line_search, Method, OptimError, StepSchedule,
    DEFAULT_LINE_SEARCH_CANDIDATES,
};
use crate::policy::{
    reparametrize, DiscretePolicy, GibbsPolicy, ParamNoiseLinearPolicy, PolicyError,
    PolicyModel, TabularFeatures,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("seed matrices differ: {0}")]
    SeedMatrixMismatch(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// `constant` | `robbins-monro` | `em-interp` | `line-search`
    pub kind: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub candidates: Option<Vec<f64>>,
    #[serde(default)]
    pub games_per_candidate: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    /// `zeros` | `uniform` | `gaussian` | `values`
    pub kind: String,
    #[serde(default)]
    pub low: Option<Vec<f64>>,
    #[serde(default)]
    pub high: Option<Vec<f64>>,
    #[serde(default)]
    pub stddev: Option<f64>,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TetrisSpec {
    pub width: usize,
    pub height: usize,
    pub games_per_estimate: u64,
}

impl Default for TetrisSpec {
    fn default() -> Self {
        TetrisSpec { width: 10, height: 10, games_per_estimate: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSpec {
    pub trajectories: u64,
    pub sigma_eps: f64,
    pub sigma_r: f64,
}

impl Default for NonlinearSpec {
    fn default() -> Self {
        NonlinearSpec { trajectories: 50, sigma_eps: 0.6, sigma_r: 10.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStateSpec {
    /// Optional linear reparametrization of the two policy parameters,
    /// row-major 2x2.
    #[serde(default)]
    pub reparam: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// `two-state` | `tetris` | `nonlinear`
    pub environment: String,
    /// `steepest` | `natural` | `em` | `apxn-full` | `apxn-diag`
    pub method: String,
    pub iterations: usize,
    pub repetitions: usize,
    pub master_seed: u64,
    /// Emit per-iteration parameter vectors in the JSON sidecar.
    #[serde(default)]
    pub trace: bool,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub tetris: TetrisSpec,
    #[serde(default)]
    pub nonlinear: NonlinearSpec,
    #[serde(default)]
    pub two_state: TwoStateSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn method(&self) -> Result<Method, ExperimentError> {
        self.method.parse().map_err(ExperimentError::Config)
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}-{}", self.environment, self.method))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let method = self.method()?;
        match self.environment.as_str() {
            "two-state" | "tetris" | "nonlinear" => {}
            other => {
                return Err(ExperimentError::Config(format!(
                    "environment: unknown environment '{other}' (expected two-state|tetris|nonlinear)"
                )))
            }
        }
        if method == Method::Em && self.environment != "nonlinear" {
            return Err(ExperimentError::Config(format!(
                "method: em requires a log-quadratic policy; the '{}' environment uses a Gibbs policy",
                self.environment
            )));
        }
        if self.repetitions == 0 {
            return Err(ExperimentError::Config("repetitions: must be at least 1".into()));
        }
        match self.schedule.kind.as_str() {
            "constant" | "robbins-monro" | "em-interp" => {
                let alpha = self.schedule.alpha.ok_or_else(|| {
                    ExperimentError::Config("schedule.alpha: required for this schedule kind".into())
                })?;
                if alpha <= 0.0 {
                    return Err(ExperimentError::Config("schedule.alpha: must be positive".into()));
                }
            }
            "line-search" => {
                if let Some(c) = &self.schedule.candidates {
                    if c.is_empty() || c.iter().any(|&a| a <= 0.0) {
                        return Err(ExperimentError::Config(
                            "schedule.candidates: must be non-empty and positive".into(),
                        ));
                    }
                }
            }
            other => {
                return Err(ExperimentError::Config(format!(
                    "schedule.kind: unknown kind '{other}'"
                )))
            }
        }
        if let Some(init) = &self.init {
            match init.kind.as_str() {
                "zeros" => {}
                "uniform" => {
                    let (low, high) = match (&init.low, &init.high) {
                        (Some(l), Some(h)) if l.len() == h.len() && !l.is_empty() => (l, h),
                        _ => {
                            return Err(ExperimentError::Config(
                                "init: uniform needs matching low/high vectors".into(),
                            ))
                        }
                    };
                    if low.iter().zip(high).any(|(l, h)| l >= h) {
                        return Err(ExperimentError::Config("init: low must be below high".into()));
                    }
                }
                "gaussian" => {
                    if init.stddev.map_or(true, |s| s <= 0.0) {
                        return Err(ExperimentError::Config(
                            "init: gaussian needs a positive stddev".into(),
                        ));
                    }
                }
                "values" => {
                    if init.values.as_ref().map_or(true, |v| v.is_empty()) {
                        return Err(ExperimentError::Config("init: values needs a vector".into()));
                    }
                }
                other => {
                    return Err(ExperimentError::Config(format!("init.kind: unknown kind '{other}'")))
                }
            }
        }
        if let Some(t) = &self.two_state.reparam {
            if t.len() != 2 || t.iter().any(|row| row.len() != 2) {
                return Err(ExperimentError::Config("two_state.reparam: must be 2x2".into()));
            }
        }
        if self.environment == "tetris" {
            if !(4..=14).contains(&self.tetris.width) || !(4..=24).contains(&self.tetris.height) {
                return Err(ExperimentError::Config(
                    "tetris: width must be 4..=14 and height 4..=24".into(),
                ));
            }
            if self.tetris.games_per_estimate == 0 {
                return Err(ExperimentError::Config(
                    "tetris.games_per_estimate: must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn schedule(&self) -> Result<StepSchedule, ExperimentError> {
        Ok(match self.schedule.kind.as_str() {
            "constant" => StepSchedule::Constant(self.schedule.alpha.unwrap()),
            "robbins-monro" => StepSchedule::RobbinsMonro { base: self.schedule.alpha.unwrap() },
            "em-interp" => StepSchedule::EmInterp {
                alpha: self.schedule.alpha.unwrap(),
                total: self.iterations,
            },
            "line-search" => StepSchedule::LineSearch {
                candidates: self
                    .schedule
                    .candidates
                    .clone()
                    .unwrap_or_else(|| DEFAULT_LINE_SEARCH_CANDIDATES.to_vec()),
                games_per_candidate: self.schedule.games_per_candidate.unwrap_or(200),
            },
            _ => unreachable!("validated"),
        })
    }

    fn n_params(&self) -> usize {
        match self.environment.as_str() {
            "two-state" => 2,
            "tetris" => 2 * self.tetris.width + 1,
            "nonlinear" => 2,
            _ => unreachable!("validated"),
        }
    }

    fn default_init(&self) -> InitSpec {
        match self.environment.as_str() {
            // The benchmark initializes the controller inside the region
            // where the objective is non-trivial.
            "nonlinear" => InitSpec {
                kind: "uniform".into(),
                low: Some(vec![0.0, -8.0]),
                high: Some(vec![60.0, 0.0]),
                stddev: None,
                values: None,
            },
            _ => InitSpec { kind: "zeros".into(), low: None, high: None, stddev: None, values: None },
        }
    }

    fn initial_params(&self, repetition: usize) -> Result<ParamVector, ExperimentError> {
        let spec = self.init.clone().unwrap_or_else(|| self.default_init());
        let n = self.n_params();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(self.master_seed, DOMAIN_INIT, repetition as u64, 0));
        Ok(match spec.kind.as_str() {
            "zeros" => DVector::zeros(n),
            "uniform" => {
                let low = spec.low.unwrap();
                let high = spec.high.unwrap();
                if low.len() != n {
                    return Err(ExperimentError::Config(format!(
                        "init: expected {n} entries for this environment, got {}",
                        low.len()
                    )));
                }
                DVector::from_fn(n, |i, _| rng.random_range(low[i]..high[i]))
            }
            "gaussian" => {
                let sd = spec.stddev.unwrap();
                DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            }
            "values" => {
                let v = spec.values.unwrap();
                if v.len() != n {
                    return Err(ExperimentError::Config(format!(
                        "init: expected {n} entries for this environment, got {}",
                        v.len()
                    )));
                }
                DVector::from_vec(v)
            }
            _ => unreachable!("validated"),
        })
    }
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

const DOMAIN_DIRECTION: u64 = 0x01;
const DOMAIN_LINESEARCH: u64 = 0x02;
const DOMAIN_INIT: u64 = 0x03;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn mix(master: u64, domain: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(master ^ domain.wrapping_mul(0xA076_1D64_78BD_642F)) ^ a) ^ b)
}

/// The `repetitions x iterations` simulator-seed matrix shared by every
/// method run from the same master seed.
pub fn seed_matrix(master_seed: u64, repetitions: usize, iterations: usize) -> Vec<Vec<u64>> {
    (0..repetitions)
        .map(|r| {
            (0..iterations)
                .map(|k| mix(master_seed, DOMAIN_DIRECTION, r as u64, k as u64 + 1))
                .collect()
        })
        .collect()
}

fn line_search_seed(master_seed: u64, repetition: usize, iteration: usize) -> u64 {
    mix(master_seed, DOMAIN_LINESEARCH, repetition as u64, iteration as u64)
}

// ---------------------------------------------------------------------------
// Run records and outputs
// ---------------------------------------------------------------------------

/// One training-iteration record. `ms` is the measured wall time of the
/// iteration; it is reported via the JSON `timing` block and zeroed in the
/// CSV to keep the CSV byte-deterministic.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub iteration: usize,
    pub score: f64,
    pub alpha: f64,
    pub dir_norm: f64,
    pub ridge: f64,
    pub ms: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub repetition: usize,
    pub iteration: usize,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub name: String,
    pub build: String,
    pub config: ExperimentConfig,
    pub seed_matrix: Vec<Vec<u64>>,
    pub init_params: Vec<Vec<f64>>,
    pub summary: Vec<IterationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TracePoint>>,
    /// Wall-clock milliseconds; excluded from the determinism guarantee.
    pub timing_total_ms: u128,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

pub fn build_id() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

impl RunOutput {
    /// CSV with the exact column set
    /// `repetition,iteration,score,alpha,dir_norm,ridge,ms,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repetition,iteration,score,alpha,dir_norm,ridge,ms,seed\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},0,{}",
                r.repetition, r.iteration, r.score, r.alpha, r.dir_norm, r.ridge, r.seed
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run output serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write_files(&self, stem: &Path) -> Result<(), ExperimentError> {
        if let Some(parent) = stem.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(stem.with_extension("csv"), self.to_csv())?;
        std::fs::write(stem.with_extension("json"), self.to_json())?;
        Ok(())
    }
}

fn summarize(records: &[RunRecord], repetitions: usize, iterations: usize) -> Vec<IterationSummary> {
    let mut out = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        let scores: Vec<f64> =
            records.iter().filter(|r| r.iteration == k).map(|r| r.score).collect();
        debug_assert_eq!(scores.len(), repetitions);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let stderr = if scores.len() > 1 {
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / (scores.len() - 1) as f64;
            (var / scores.len() as f64).sqrt()
        } else {
            0.0
        };
        out.push(IterationSummary { iteration: k, mean, stderr });
    }
    out
}

// ---------------------------------------------------------------------------
// Per-repetition training loops
// ---------------------------------------------------------------------------

struct RepResult {
    records: Vec<RunRecord>,
    trace: Vec<TracePoint>,
    init: Vec<f64>,
}

struct StepInfo {
    new_w: ParamVector,
    alpha: f64,
    dir_norm: f64,
    ridge: f64,
}

fn schedule_or_search_step(
    w: &ParamVector,
    dir: crate::optim::Direction,
    schedule: &StepSchedule,
    iteration: usize,
    ls_seed: u64,
    score_game: impl Fn(&ParamVector, &mut ChaCha8Rng) -> f64 + Sync,
) -> StepInfo {
    let norm = dir.d.norm();
    match schedule {
        StepSchedule::LineSearch { candidates, games_per_candidate } => {
            if norm == 0.0 {
                return StepInfo { new_w: w.clone(), alpha: 0.0, dir_norm: 0.0, ridge: dir.ridge };
            }
            // The search direction is normalized so the line search is
            // consistent across methods.
            let unit = &dir.d / norm;
            let (alpha, _) =
                line_search(w, &unit, candidates, *games_per_candidate, ls_seed, score_game);
            StepInfo { new_w: w + unit * alpha, alpha, dir_norm: norm, ridge: dir.ridge }
        }
        _ => {
            let alpha = schedule.step_size(iteration).expect("non-line-search schedule");
            StepInfo { new_w: w + &dir.d * alpha, alpha, dir_norm: norm, ridge: dir.ridge }
        }
    }
}

fn run_two_state_rep<P>(
    cfg: &ExperimentConfig,
    mdp: &TabularMdp,
    policy: &P,
    repetition: usize,
    seeds: &[u64],
    schedule: &StepSchedule,
    method: Method,
) -> Result<RepResult, ExperimentError>
where
    P: DiscretePolicy<State = usize, Action = usize> + Sync,
{
    let mut w = cfg.initial_params(repetition)?;
    let init = w.iter().cloned().collect();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    let dm = method.direction_method().expect("em is rejected for two-state");
    for k in 1..=cfg.iterations {
        let started = Instant::now();
        if cfg.trace {
            trace.push(TracePoint { repetition, iteration: k, w: w.iter().cloned().collect() });
        }
        let bundle = exact::search_bundle(mdp, policy, &w)?;
        let score = bundle.value;
        let dir = direction(dm, &bundle)?;
        let step = schedule_or_search_step(
            &w,
            dir,
            schedule,
            k,
            line_search_seed(cfg.master_seed, repetition, k),
            |wc, _| exact::search_bundle(mdp, policy, wc).map(|b| b.value).unwrap_or(f64::MIN),
        );
        w = step.new_w;
        records.push(RunRecord {
            repetition,
            iteration: k,
            score,
            alpha: step.alpha,
            dir_norm: step.dir_norm,
            ridge: step.ridge,
            ms: started.elapsed().as_millis() as u64,
            seed: seeds[k - 1],
        });
    }
    if cfg.trace {
        trace.push(TracePoint {
            repetition,
            iteration: cfg.iterations + 1,
            w: w.iter().cloned().collect(),
        });
    }
    Ok(RepResult { records, trace, init })
}

fn tetris_game_score(
    sim: &TetrisSim,
    policy: &GibbsPolicy<TetrisActionSpace>,
    w: &ParamVector,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut state = sim.reset(rng);
    let mut total = 0.0;
    loop {
        let action = match policy.sample(&state, w, rng) {
            Ok(a) => a,
            Err(_) => return f64::MIN,
        };
        let (next, reward) = sim.step(&state, &action, rng);
        total += reward;
        state = next;
        if sim.at_recurrent_state(&state) {
            return total;
        }
    }
}

fn run_tetris_rep(
    cfg: &ExperimentConfig,
    sim: &TetrisSim,
    policy: &GibbsPolicy<TetrisActionSpace>,
    repetition: usize,
    seeds: &[u64],
    schedule: &StepSchedule,
    method: Method,
) -> Result<RepResult, ExperimentError> {
    let mut w = cfg.initial_params(repetition)?;
    let init = w.iter().cloned().collect();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    let dm = method.direction_method().expect("em is rejected for tetris");
    for k in 1..=cfg.iterations {
        let started = Instant::now();
        if cfg.trace {
            trace.push(TracePoint { repetition, iteration: k, w: w.iter().cloned().collect() });
        }
        let report = recurrent_estimate_episodes(
            sim,
            policy,
            &w,
            cfg.tetris.games_per_estimate,
            seeds[k - 1],
        )?;
        let score = report.mean_score;
        let dir = direction(dm, &report.to_bundle())?;
        let step = schedule_or_search_step(
            &w,
            dir,
            schedule,
            k,
            line_search_seed(cfg.master_seed, repetition, k),
            |wc, rng| tetris_game_score(sim, policy, wc, rng),
        );
        w = step.new_w;
        records.push(RunRecord {
            repetition,
            iteration: k,
            score,
            alpha: step.alpha,
            dir_norm: step.dir_norm,
            ridge: step.ridge,
            ms: started.elapsed().as_millis() as u64,
            seed: seeds[k - 1],
        });
    }
    Ok(RepResult { records, trace, init })
}

fn nonlinear_game_score(
    env: &NonlinearSystem,
    policy: &ParamNoiseLinearPolicy,
    w: &ParamVector,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.horizon {
        let action = match policy.sample(&state, w, rng) {
            Ok(a) => a,
            Err(_) => return f64::MIN,
        };
        let (next, reward) = env.step(&state, &action, rng);
        total += reward;
        state = next;
    }
    total
}

fn run_nonlinear_rep(
    cfg: &ExperimentConfig,
    env: &NonlinearSystem,
    policy: &ParamNoiseLinearPolicy,
    repetition: usize,
    seeds: &[u64],
    schedule: &StepSchedule,
    method: Method,
) -> Result<RepResult, ExperimentError> {
    let mut w = cfg.initial_params(repetition)?;
    let init = w.iter().cloned().collect();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    for k in 1..=cfg.iterations {
        let started = Instant::now();
        if cfg.trace {
            trace.push(TracePoint { repetition, iteration: k, w: w.iter().cloned().collect() });
        }
        // The finite-horizon objective is undiscounted.
        let report =
            forward_estimate(env, policy, &w, cfg.nonlinear.trajectories, 1.0, seeds[k - 1])?;
        let score = report.mean_score;
        let step = match method {
            Method::Em => {
                let new_w = em_step_sampled(policy, &report, &w)?;
                let dir_norm = (&new_w - &w).norm();
                StepInfo { new_w, alpha: 1.0, dir_norm, ridge: 0.0 }
            }
            _ => {
                let dm = method.direction_method().expect("non-em method");
                let dir = direction(dm, &report.to_bundle())?;
                schedule_or_search_step(
                    &w,
                    dir,
                    schedule,
                    k,
                    line_search_seed(cfg.master_seed, repetition, k),
                    |wc, rng| nonlinear_game_score(env, policy, wc, rng),
                )
            }
        };
        w = step.new_w;
        records.push(RunRecord {
            repetition,
            iteration: k,
            score,
            alpha: step.alpha,
            dir_norm: step.dir_norm,
            ridge: step.ridge,
            ms: started.elapsed().as_millis() as u64,
            seed: seeds[k - 1],
        });
    }
    Ok(RepResult { records, trace, init })
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Runs every repetition of the configured experiment. Repetitions run in
/// parallel; records are merged in repetition order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let method = cfg.method()?;
    let schedule = cfg.schedule()?;
    let seeds = seed_matrix(cfg.master_seed, cfg.repetitions, cfg.iterations);
    let started = Instant::now();

    let reps: Vec<Result<RepResult, ExperimentError>> = match cfg.environment.as_str() {
        "two-state" => {
            let (mdp, policy) = two_state_factory();
            match &cfg.two_state.reparam {
                None => (0..cfg.repetitions)
                    .into_par_iter()
                    .map(|r| run_two_state_rep(cfg, &mdp, &policy, r, &seeds[r], &schedule, method))
                    .collect(),
                Some(rows) => {
                    let t = DMatrix::from_fn(2, 2, |i, j| rows[i][j]);
                    let wrapped = reparametrize(policy, t)?;
                    (0..cfg.repetitions)
                        .into_par_iter()
                        .map(|r| {
                            run_two_state_rep(cfg, &mdp, &wrapped, r, &seeds[r], &schedule, method)
                        })
                        .collect()
                }
            }
        }
        "tetris" => {
            let sim = TetrisSim::new(cfg.tetris.width, cfg.tetris.height);
            let policy = GibbsPolicy::new(TetrisActionSpace::new(sim.clone()));
            (0..cfg.repetitions)
                .into_par_iter()
                .map(|r| run_tetris_rep(cfg, &sim, &policy, r, &seeds[r], &schedule, method))
                .collect()
        }
        "nonlinear" => {
            let env = NonlinearSystem::benchmark(cfg.nonlinear.sigma_r);
            let policy = ParamNoiseLinearPolicy::new(2, cfg.nonlinear.sigma_eps);
            (0..cfg.repetitions)
                .into_par_iter()
                .map(|r| run_nonlinear_rep(cfg, &env, &policy, r, &seeds[r], &schedule, method))
                .collect()
        }
        _ => unreachable!("validated"),
    };

    let mut records = Vec::with_capacity(cfg.repetitions * cfg.iterations);
    let mut trace = Vec::new();
    let mut init_params = Vec::with_capacity(cfg.repetitions);
    for rep in reps {
        let rep = rep?;
        records.extend(rep.records);
        trace.extend(rep.trace);
        init_params.push(rep.init);
    }
    let summary = summarize(&records, cfg.repetitions, cfg.iterations);
    Ok(RunOutput {
        name: cfg.display_name(),
        build: build_id(),
        config: cfg.clone(),
        seed_matrix: seeds,
        init_params,
        summary,
        trace: cfg.trace.then_some(trace),
        timing_total_ms: started.elapsed().as_millis(),
        records,
    })
}

/// Aligned multi-method comparison over one shared seed matrix.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub environment: String,
    pub methods: Vec<String>,
    pub iterations: usize,
    /// Best mean score observed across methods and iterations; normalized
    /// views divide by it.
    pub normalizer: f64,
    pub rows: Vec<ComparisonRow>,
    pub outputs: Vec<RunOutput>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub iteration: usize,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
}

pub fn compare(configs: &[ExperimentConfig]) -> Result<Comparison, ExperimentError> {
    if configs.is_empty() {
        return Err(ExperimentError::Config("compare needs at least one config".into()));
    }
    let first = &configs[0];
    for cfg in &configs[1..] {
        if cfg.master_seed != first.master_seed {
            return Err(ExperimentError::SeedMatrixMismatch(format!(
                "master seeds {} and {} produce different seed matrices",
                first.master_seed, cfg.master_seed
            )));
        }
        if cfg.environment != first.environment
            || cfg.iterations != first.iterations
            || cfg.repetitions != first.repetitions
        {
            return Err(ExperimentError::SeedMatrixMismatch(
                "compared configs must share environment, iterations and repetitions".into(),
            ));
        }
    }
    let outputs: Vec<RunOutput> = configs.iter().map(run_experiment).collect::<Result<_, _>>()?;
    for out in &outputs[1..] {
        if out.seed_matrix != outputs[0].seed_matrix {
            return Err(ExperimentError::SeedMatrixMismatch("derived seed matrices differ".into()));
        }
    }
    let normalizer = outputs
        .iter()
        .flat_map(|o| o.summary.iter().map(|s| s.mean))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-300);
    let rows = (1..=first.iterations)
        .map(|k| ComparisonRow {
            iteration: k,
            means: outputs.iter().map(|o| o.summary[k - 1].mean).collect(),
            stderrs: outputs.iter().map(|o| o.summary[k - 1].stderr).collect(),
        })
        .collect();
    Ok(Comparison {
        environment: first.environment.clone(),
        methods: configs.iter().map(|c| c.display_name()).collect(),
        iterations: first.iterations,
        normalizer,
        rows,
        outputs,
    })
}

impl Comparison {
    /// Per-iteration table with mean (stderr) per method. For the nonlinear
    /// environment the means are shown normalized by the best observed mean,
    /// which is how those results are plotted.
    pub fn to_table(&self) -> String {
        let normalized = self.environment == "nonlinear";
        let mut out = String::new();
        let _ = write!(out, "{:>9}", "iteration");
        for m in &self.methods {
            let _ = write!(out, "  {:>24}", m);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>9}", row.iteration);
            for (mean, se) in row.means.iter().zip(&row.stderrs) {
                if normalized {
                    let _ = write!(
                        out,
                        "  {:>14.4} ({:>7.4})",
                        mean / self.normalizer,
                        se / self.normalizer
                    );
                } else {
                    let _ = write!(out, "  {:>14.4} ({:>7.4})", mean, se);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Merged CSV: `iteration,<name>_mean,<name>_stderr,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        for m in &self.methods {
            let _ = write!(out, ",{m}_mean,{m}_stderr");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.iteration);
            for (mean, se) in row.means.iter().zip(&row.stderrs) {
                let _ = write!(out, ",{mean},{se}");
            }
            out.push('\n');
        }
        out
    }
}
