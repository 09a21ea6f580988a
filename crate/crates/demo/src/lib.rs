//! Browser bindings for three small experiments: a loss-landscape slice at
//! one site, per-step loss curves of the four optimizers on bars and stripes,
//! and strings sampled from a trained model.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tnbm::data::gen_bas;
use tnbm::env::EnvironmentCache;
use tnbm::loss::{project_tangent, RegMode, DEFAULT_BIAS};
use tnbm::newton::NewtonConfig;
use tnbm::sweep::{local_problem, train, OptimizerKind, RegularizationSchedule, TrainingSet};
use tnbm::tensor::norm;
use tnbm::{Error, Mps, Result};
use wasm_bindgen::prelude::*;

const MAX_SIDE: usize = 5;

pub fn optimizer(name: &str) -> Result<OptimizerKind> {
    Ok(match name {
        "steepest_descent" => OptimizerKind::steepest_descent(),
        "newton" => OptimizerKind::Newton,
        "reg_newton_smooth" => OptimizerKind::RegNewtonSmooth,
        "reg_newton_bias" => OptimizerKind::reg_newton_bias(),
        _ => return Err(Error::Config(format!("unknown optimizer {name:?}"))),
    })
}

fn check_side(side: usize) -> Result<()> {
    if !(2..=MAX_SIDE).contains(&side) {
        return Err(Error::Config(format!("grid side must be in 2..={MAX_SIDE}, got {side}")));
    }
    Ok(())
}

fn train_bas(side: usize, bond_dim: usize, sweeps: usize, opt: OptimizerKind, seed: u64) -> Result<(Mps, Vec<f64>)> {
    check_side(side)?;
    let data = gen_bas(side)?;
    let set = TrainingSet::from(&data);
    let init = Mps::random(side * side, 2, bond_dim, seed)?;
    let (mps, trace) = train(init, &set, opt, &RegularizationSchedule::default(), sweeps, &NewtonConfig::default())?;
    let mut curve = vec![trace.initial_nll];
    curve.extend(trace.records.iter().map(|r| r.nll));
    Ok((mps, curve))
}

/// Losses along the great circle through the center core of a random model on
/// `side x side` bars and stripes, in a random tangent direction.
///
/// Returns `[t; points]`, then the unregularized, smoothed (`epsilon`) and
/// biased losses at each `t`, concatenated.
pub fn landscape_slice(side: usize, bond_dim: usize, site: usize, epsilon: f64, points: usize, seed: u64) -> Result<Vec<f64>> {
    check_side(side)?;
    if site >= side * side {
        return Err(Error::Config(format!("site {site} outside 0..{}", side * side)));
    }
    if points < 2 {
        return Err(Error::Config("need at least two points".into()));
    }
    let data = gen_bas(side)?;
    let set = TrainingSet::from(&data);
    let mps = Mps::random(side * side, 2, bond_dim, seed)?.canonicalize(site)?;
    let cache = EnvironmentCache::new(&mps, set.inputs)?;
    let base = local_problem(&mps, &cache, &set.weights)?;
    let t0 = base.tensor().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let raw: Vec<f64> = (0..t0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let tangent = project_tangent(&t0, &raw)?.components;
    let tn = norm(&tangent);
    let dir: Vec<f64> = tangent.iter().map(|v| v / tn).collect();

    let modes = [RegMode::NONE, RegMode::smooth(epsilon, false)?, RegMode::bias(DEFAULT_BIAS)?];
    let ts: Vec<f64> = (0..points).map(|k| -std::f64::consts::PI * (0.5 - k as f64 / (points - 1) as f64)).collect();
    let mut out = ts.clone();
    let mut columns = vec![Vec::with_capacity(points); modes.len()];
    for &t in &ts {
        let p = base.with_tensor(t0.iter().zip(&dir).map(|(a, b)| t.cos() * a + t.sin() * b).collect())?;
        for (col, mode) in columns.iter_mut().zip(modes) {
            col.push(p.loss(mode));
        }
    }
    columns.into_iter().for_each(|c| out.extend(c));
    Ok(out)
}

/// Unregularized NLL before training and after every site visit.
pub fn loss_curve(side: usize, bond_dim: usize, sweeps: usize, optimizer_name: &str, seed: u64) -> Result<Vec<f64>> {
    Ok(train_bas(side, bond_dim, sweeps, optimizer(optimizer_name)?, seed)?.1)
}

/// Trains on bars and stripes and returns `count` sampled strings, row-major,
/// `count * side * side` bits in all.
pub fn sample_grid(side: usize, bond_dim: usize, sweeps: usize, optimizer_name: &str, seed: u64, count: usize) -> Result<Vec<u8>> {
    let (mps, _) = train_bas(side, bond_dim, sweeps, optimizer(optimizer_name)?, seed)?;
    let n = mps.norm();
    if n.is_nan() || n <= 0.0 || n.is_infinite() {
        return Err(Error::Degenerate("trained model has no probability mass".into()));
    }
    let canonical = mps.canonicalize(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    Ok((0..count).flat_map(|_| canonical.sample(&mut rng)).collect())
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = landscapeSlice)]
pub fn landscape_slice_js(side: usize, bond_dim: usize, site: usize, epsilon: f64, points: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    landscape_slice(side, bond_dim, site, epsilon, points, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve_js(side: usize, bond_dim: usize, sweeps: usize, optimizer: &str, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    loss_curve(side, bond_dim, sweeps, optimizer, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = sampleGrid)]
pub fn sample_grid_js(side: usize, bond_dim: usize, sweeps: usize, optimizer: &str, seed: u32, count: usize) -> std::result::Result<Vec<u8>, JsError> {
    sample_grid(side, bond_dim, sweeps, optimizer, seed as u64, count).map_err(js)
}
