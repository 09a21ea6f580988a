//! Back-and-forth single-site sweeps over the chain.

use std::time::Instant;

use crate::env::{EnvironmentCache, SiteInputs};
use crate::error::{Error, Result};
use crate::loss::{LocalProblem, RegMode, TangentVector, DEFAULT_BIAS};
use crate::mps::{Direction, Mps};
use crate::newton::{newton_step, retract, NewtonConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SteepestDescent { learning_rate: f64 },
    Newton,
    RegNewtonSmooth,
    RegNewtonBias { shift: f64 },
}

impl OptimizerKind {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

    pub fn steepest_descent() -> Self {
        Self::SteepestDescent { learning_rate: Self::DEFAULT_LEARNING_RATE }
    }

    pub fn reg_newton_bias() -> Self {
        Self::RegNewtonBias { shift: DEFAULT_BIAS }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SteepestDescent { .. } => "steepest_descent",
            Self::Newton => "newton",
            Self::RegNewtonSmooth => "reg_newton_smooth",
            Self::RegNewtonBias { .. } => "reg_newton_bias",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::SteepestDescent { learning_rate } if !(learning_rate > 0.0) => {
                Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")))
            }
            Self::RegNewtonBias { shift } if !shift.is_finite() => {
                Err(Error::Config(format!("bias shift must be finite, got {shift}")))
            }
            _ => Ok(()),
        }
    }

    /// Objective optimized at a step taken with regularization `epsilon`.
    pub fn mode(&self, epsilon: f64) -> RegMode {
        match *self {
            Self::SteepestDescent { .. } | Self::Newton => RegMode::NONE,
            Self::RegNewtonSmooth => RegMode::smooth(epsilon, true).expect("schedule epsilon is valid"),
            Self::RegNewtonBias { shift } => RegMode::bias(shift).expect("validated shift"),
        }
    }
}

/// `epsilon(k) = max(initial * decay^k, floor)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for RegularizationSchedule {
    fn default() -> Self {
        Self { initial: 0.025, decay: 0.5, floor: 1e-8 }
    }
}

impl RegularizationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) || !(self.floor >= 0.0) {
            return Err(Error::Config(format!(
                "schedule needs initial >= 0, 0 < decay <= 1, floor >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn epsilon(&self, sweep: usize) -> f64 {
        (self.initial * self.decay.powi(sweep as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub sweep: usize,
    pub site: usize,
    /// Unregularized NLL after the step, whatever the optimizer.
    pub nll: f64,
    /// Local objective the step actually targeted, after the step.
    pub reg_loss: f64,
    pub epsilon: f64,
    pub inner_iters: usize,
    pub seconds: f64,
    /// The step was skipped because the objective sat on a pole.
    pub singular: bool,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub initial_nll: f64,
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn final_nll(&self) -> f64 {
        self.records.last().map_or(self.initial_nll, |r| r.nll)
    }

    /// Mean recorded NLL within each sweep.
    pub fn sweep_means(&self) -> Vec<f64> {
        let n_sweeps = self.records.iter().map(|r| r.sweep + 1).max().unwrap_or(0);
        (0..n_sweeps)
            .map(|k| {
                let v: Vec<f64> = self.records.iter().filter(|r| r.sweep == k).map(|r| r.nll).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    /// NLL of the last record of each sweep.
    pub fn sweep_finals(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if r.sweep == out.len() {
                out.push(r.nll);
            } else {
                *out.last_mut().unwrap() = r.nll;
            }
        }
        out
    }
}

/// Samples (as site inputs) and their empirical frequencies.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: SiteInputs,
    pub weights: Vec<f64>,
}

impl From<&crate::data::Dataset> for TrainingSet {
    fn from(d: &crate::data::Dataset) -> Self {
        Self { inputs: d.to_inputs(), weights: d.weights().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub site: usize,
    pub nll: f64,
    pub reg_loss: f64,
    pub inner_iters: usize,
    pub singular: bool,
    pub fallback: bool,
}

/// Extra work done at the active site right after its core was updated.
pub trait SiteHook {
    fn after_step(&mut self, mps: &Mps, cache: &mut EnvironmentCache, weights: &[f64], mode: RegMode) -> Result<()>;
}

pub struct NoHook;

impl SiteHook for NoHook {
    fn after_step(&mut self, _: &Mps, _: &mut EnvironmentCache, _: &[f64], _: RegMode) -> Result<()> {
        Ok(())
    }
}

pub fn local_problem(mps: &Mps, cache: &EnvironmentCache, weights: &[f64]) -> Result<LocalProblem> {
    let site = cache.active_site();
    if mps.center() != Some(site) {
        return Err(Error::StaleCache(format!("cache at {site}, mps center {:?}", mps.center())));
    }
    LocalProblem::new(mps.core(site).data().to_vec(), cache.environment_matrix()?, weights.to_vec())
}

/// One optimizer step on the center core.
pub fn single_site_step(
    mps: &mut Mps,
    cache: &mut EnvironmentCache,
    weights: &[f64],
    opt: OptimizerKind,
    epsilon: f64,
    cfg: &NewtonConfig,
) -> Result<StepDiagnostics> {
    single_site_step_with(mps, cache, weights, opt, epsilon, cfg, &mut NoHook)
}

fn single_site_step_with(
    mps: &mut Mps,
    cache: &mut EnvironmentCache,
    weights: &[f64],
    opt: OptimizerKind,
    epsilon: f64,
    cfg: &NewtonConfig,
    hook: &mut dyn SiteHook,
) -> Result<StepDiagnostics> {
    let site = cache.active_site();
    let problem = local_problem(mps, cache, weights)?;
    let mode = opt.mode(epsilon);
    let step = match opt {
        OptimizerKind::SteepestDescent { learning_rate } => {
            problem.grad_projected(mode).map(|g| {
                let components = g.components.iter().map(|v| -learning_rate * v).collect();
                (TangentVector { base: g.base, components }, 0, false)
            })
        }
        _ => newton_step(&problem, mode, cfg).map(|r| (r.step, r.inner_iters, r.fallback_used)),
    };
    let (step, inner_iters, fallback) = match step {
        Ok(s) => s,
        Err(Error::Singular { .. }) => {
            return Ok(StepDiagnostics {
                site,
                nll: problem.nll(),
                reg_loss: problem.loss(mode),
                inner_iters: 0,
                singular: true,
                fallback: false,
            })
        }
        Err(e) => return Err(e),
    };
    let updated = retract(problem.tensor(), &step)?;
    mps.set_core_data(site, &updated)?;
    hook.after_step(mps, cache, weights, mode)?;
    let after = local_problem(mps, cache, weights)?;
    Ok(StepDiagnostics {
        site,
        nll: after.nll(),
        reg_loss: after.loss(mode),
        inner_iters,
        singular: false,
        fallback,
    })
}

/// Elapsed wall time for trace records. wasm32-unknown-unknown has no clock
/// and always reports 0.
#[derive(Debug, Clone, Copy)]
pub struct Clock(Option<Instant>);

impl Clock {
    pub fn start() -> Self {
        Self((!cfg!(all(target_arch = "wasm32", target_os = "unknown"))).then(Instant::now))
    }

    pub fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

/// A forward pass `0 -> n-1` followed by a backward pass `n-2 -> 0`: every
/// site is visited twice except the right end, `2n - 1` steps in all.
#[allow(clippy::too_many_arguments)]
pub fn sweep_epoch(
    mps: &mut Mps,
    cache: &mut EnvironmentCache,
    weights: &[f64],
    opt: OptimizerKind,
    schedule: &RegularizationSchedule,
    sweep_index: usize,
    cfg: &NewtonConfig,
    trace: &mut LossTrace,
    clock: &Clock,
    hook: &mut dyn SiteHook,
) -> Result<()> {
    if mps.center() != Some(0) || cache.active_site() != 0 {
        return Err(Error::StaleCache("a sweep must start with the center at site 0".into()));
    }
    let n = mps.n_sites();
    let epsilon = schedule.epsilon(sweep_index);
    let recorded_eps = match opt {
        OptimizerKind::RegNewtonSmooth => epsilon,
        OptimizerKind::RegNewtonBias { shift } => shift,
        _ => 0.0,
    };
    let visits = (0..n).map(|s| (s, Direction::Right)).chain((0..n - 1).rev().map(|s| (s, Direction::Left)));
    for (k, (site, dir)) in visits.enumerate() {
        if k > 0 {
            cache.move_center(mps, dir)?;
        }
        debug_assert_eq!(cache.active_site(), site);
        let d = single_site_step_with(mps, cache, weights, opt, epsilon, cfg, hook)?;
        trace.records.push(TraceRecord {
            iteration: trace.records.len(),
            sweep: sweep_index,
            site,
            nll: d.nll,
            reg_loss: d.reg_loss,
            epsilon: recorded_eps,
            inner_iters: d.inner_iters,
            seconds: clock.seconds(),
            singular: d.singular,
            fallback: d.fallback,
        });
    }
    Ok(())
}

/// Unregularized NLL from the cached overlaps at the center.
pub fn cached_nll(mps: &Mps, cache: &EnvironmentCache, weights: &[f64]) -> Result<f64> {
    Ok(local_problem(mps, cache, weights)?.nll())
}

/// Runs `n_sweeps` epochs from a center-0 state.
pub fn train(
    mps: Mps,
    data: &TrainingSet,
    opt: OptimizerKind,
    schedule: &RegularizationSchedule,
    n_sweeps: usize,
    cfg: &NewtonConfig,
) -> Result<(Mps, LossTrace)> {
    train_with_hook(mps, data, opt, schedule, n_sweeps, cfg, &mut NoHook)
}

pub fn train_with_hook(
    mut mps: Mps,
    data: &TrainingSet,
    opt: OptimizerKind,
    schedule: &RegularizationSchedule,
    n_sweeps: usize,
    cfg: &NewtonConfig,
    hook: &mut dyn SiteHook,
) -> Result<(Mps, LossTrace)> {
    if n_sweeps == 0 {
        return Err(Error::Config("n_sweeps must be >= 1".into()));
    }
    opt.validate()?;
    schedule.validate()?;
    cfg.validate()?;
    if mps.center() != Some(0) {
        mps.canonicalize_in_place(0)?;
    }
    mps.normalize();
    let mut cache = EnvironmentCache::new(&mps, data.inputs.clone())?;
    let mut trace = LossTrace { initial_nll: cached_nll(&mps, &cache, &data.weights)?, records: Vec::new() };
    let clock = Clock::start();
    for sweep in 0..n_sweeps {
        sweep_epoch(&mut mps, &mut cache, &data.weights, opt, schedule, sweep, cfg, &mut trace, &clock, hook)?;
    }
    Ok((mps, trace))
}
