//! Continuous inputs: a fixed polynomial feature map followed by a trainable
//! isometric reduction per site, whose output replaces the one-hot site
//! vectors of the discrete model.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ContinuousRecord;
use crate::env::{EnvironmentCache, SiteInputs};
use crate::error::{Error, Result};
use crate::loss::{overlap_terms, RegMode};
use crate::mps::{contract_basis, contract_features, contract_features_right, Mps};
use crate::newton::NewtonConfig;
use crate::sweep::{train_with_hook, LossTrace, OptimizerKind, RegularizationSchedule, SiteHook, TrainingSet};
use crate::tensor::{dot, qr_positive};

pub const RAW_DIM: usize = 25;
pub const REDUCED_DIM: usize = 3;
pub const ISOMETRY_LEARNING_RATE: f64 = 0.05;

/// Legendre polynomials `sqrt(2k + 1) P_k(2 v - 1)`, `k < raw_dim`: an
/// orthonormal family on `[0, 1]`. Values outside `[0, 1]` are clamped.
///
/// Orthonormality makes the Born density of a unit-norm state integrate to
/// one once the features pass through a column-orthonormal reduction.
pub fn embed(value: f64, raw_dim: usize) -> Vec<f64> {
    let t = 2.0 * value.clamp(0.0, 1.0) - 1.0;
    let mut p: Vec<f64> = Vec::with_capacity(raw_dim);
    for k in 0..raw_dim {
        let next = match k {
            0 => 1.0,
            1 => t,
            _ => {
                let j = (k - 1) as f64;
                ((2.0 * j + 1.0) * t * p[k - 1] - j * p[k - 2]) / (j + 1.0)
            }
        };
        p.push(next);
    }
    for (k, v) in p.iter_mut().enumerate() {
        *v *= ((2 * k + 1) as f64).sqrt();
    }
    p
}

/// Polar projection onto the set of matrices with orthonormal columns.
pub fn polar_retract(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    if svd.singular_values.iter().any(|&s| !(s > 1e-14)) {
        return Err(Error::Degenerate("isometry update lost rank".into()));
    }
    Ok(svd.u.unwrap() * svd.v_t.unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    raw_dim: usize,
    reduced_dim: usize,
    isometries: Vec<DMatrix<f64>>,
}

impl EmbeddingLayer {
    /// Gaussian matrices orthonormalized by QR.
    pub fn random(n_sites: usize, raw_dim: usize, reduced_dim: usize, seed: u64) -> Result<Self> {
        if reduced_dim == 0 || reduced_dim > raw_dim {
            return Err(Error::Dimension(format!("cannot reduce {raw_dim} features to {reduced_dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let isometries = (0..n_sites)
            .map(|_| {
                let g = DMatrix::from_fn(raw_dim, reduced_dim, |_, _| StandardNormal.sample(&mut rng));
                qr_positive(g).0
            })
            .collect();
        Self::from_isometries(isometries)
    }

    pub fn from_isometries(isometries: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = isometries.first().ok_or_else(|| Error::Dimension("no sites".into()))?;
        let (raw_dim, reduced_dim) = first.shape();
        let layer = Self { raw_dim, reduced_dim, isometries };
        if layer.isometries.iter().any(|v| v.shape() != (raw_dim, reduced_dim)) {
            return Err(Error::Dimension("isometries differ in shape".into()));
        }
        if layer.isometry_defect() > 1e-10 {
            return Err(Error::Degenerate("columns are not orthonormal".into()));
        }
        Ok(layer)
    }

    pub fn n_sites(&self) -> usize {
        self.isometries.len()
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    pub fn isometry(&self, site: usize) -> &DMatrix<f64> {
        &self.isometries[site]
    }

    /// Largest `|V^T V - I|` entry over all sites.
    pub fn isometry_defect(&self) -> f64 {
        let id = DMatrix::identity(self.reduced_dim, self.reduced_dim);
        self.isometries
            .iter()
            .map(|v| (v.transpose() * v - &id).abs().max())
            .fold(0.0, f64::max)
    }

    /// `V_site^T features`
    pub fn reduce(&self, features: &[f64], site: usize) -> Result<Vec<f64>> {
        if features.len() != self.raw_dim || site >= self.n_sites() {
            return Err(Error::Dimension(format!(
                "{} features at site {site}, layer has {} sites of width {}",
                features.len(),
                self.n_sites(),
                self.raw_dim
            )));
        }
        let v = &self.isometries[site];
        Ok((0..self.reduced_dim).map(|s| dot(v.column(s).as_slice(), features)).collect())
    }

    fn step_site(&mut self, site: usize, grad: &DMatrix<f64>, learning_rate: f64) -> Result<()> {
        let moved = &self.isometries[site] - grad * learning_rate;
        self.isometries[site] = polar_retract(&moved)?;
        Ok(())
    }
}

/// Embedded records: `raw[x][site]` has the layer's raw width.
#[derive(Debug, Clone)]
pub struct ContinuousData {
    raw: Vec<Vec<Vec<f64>>>,
    weights: Vec<f64>,
}

impl ContinuousData {
    /// Uniform weights; feature values are expected in `[0, 1]`.
    pub fn from_records(records: &[ContinuousRecord], raw_dim: usize) -> Result<Self> {
        let n_sites = records.first().map(|r| r.features.len()).unwrap_or(0);
        if n_sites == 0 || records.iter().any(|r| r.features.len() != n_sites) {
            return Err(Error::Dimension("records need a common, nonzero feature count".into()));
        }
        let raw = records
            .iter()
            .map(|r| r.features.iter().map(|&v| embed(v, raw_dim)).collect())
            .collect();
        let w = 1.0 / records.len() as f64;
        Ok(Self { raw, weights: vec![w; records.len()] })
    }

    pub fn n_sites(&self) -> usize {
        self.raw[0].len()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reduced(&self, layer: &EmbeddingLayer) -> Result<Vec<Vec<Vec<f64>>>> {
        if layer.n_sites() != self.n_sites() {
            return Err(Error::Dimension("layer and data disagree on the number of sites".into()));
        }
        self.raw
            .iter()
            .map(|sample| sample.iter().enumerate().map(|(i, f)| layer.reduce(f, i)).collect())
            .collect()
    }

    pub fn inputs(&self, layer: &EmbeddingLayer) -> Result<SiteInputs> {
        Ok(SiteInputs::Features { site_dim: layer.reduced_dim(), vectors: self.reduced(layer)? })
    }
}

/// `M[site][s]`: derivative of the amplitude with respect to the reduced
/// feature `s` at each site.
fn site_derivatives(mps: &Mps, reduced: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = mps.n_sites();
    let mut lefts = vec![vec![1.0]];
    for i in 0..n - 1 {
        let next = contract_features(lefts.last().unwrap(), mps.core(i), &reduced[i]);
        lefts.push(next);
    }
    let mut right = vec![1.0];
    let mut out = vec![Vec::new(); n];
    for i in (0..n).rev() {
        let core = mps.core(i);
        out[i] = (0..mps.site_dim()).map(|s| dot(&contract_basis(&lefts[i], core, s), &right)).collect();
        right = contract_features_right(core, &reduced[i], &right);
    }
    out
}

/// Weighted loss over the data for a unit-norm `mps`; `+inf` on a pole.
/// With the orthonormal embedding the unregularized value is the true
/// negative log-likelihood of the normalized density.
pub fn loss(mps: &Mps, layer: &EmbeddingLayer, data: &ContinuousData, mode: RegMode) -> Result<f64> {
    let mut total = 0.0;
    for (x, features) in data.reduced(layer)?.iter().enumerate() {
        match overlap_terms(mps.amplitude_features(features)?, mode) {
            Some((l, _)) => total += data.weights[x] * l,
            None => return Ok(f64::INFINITY),
        }
    }
    Ok(total)
}

/// Euclidean gradient of [`loss`] with respect to every isometry entry.
pub fn isometry_gradient(
    mps: &Mps,
    layer: &EmbeddingLayer,
    data: &ContinuousData,
    mode: RegMode,
) -> Result<Vec<DMatrix<f64>>> {
    let reduced = data.reduced(layer)?;
    let mut grads = vec![DMatrix::zeros(layer.raw_dim(), layer.reduced_dim()); layer.n_sites()];
    for (x, features) in reduced.iter().enumerate() {
        let m = site_derivatives(mps, features);
        let o: f64 = dot(&m[0], &features[0]);
        let (_, g) = overlap_terms(o, mode).ok_or(Error::Singular { sample: x })?;
        let coef = -2.0 * data.weights[x] * g;
        for (site, grad) in grads.iter_mut().enumerate() {
            let e = &data.raw[x][site];
            for s in 0..layer.reduced_dim() {
                for i in 0..layer.raw_dim() {
                    grad[(i, s)] += coef * e[i] * m[site][s];
                }
            }
        }
    }
    Ok(grads)
}

/// One gradient step on every isometry, each followed by a polar retraction.
pub fn isometry_gd_step(
    layer: &EmbeddingLayer,
    mps: &Mps,
    data: &ContinuousData,
    learning_rate: f64,
    mode: RegMode,
) -> Result<EmbeddingLayer> {
    let grads = isometry_gradient(mps, layer, data, mode)?;
    let mut out = layer.clone();
    for (site, g) in grads.iter().enumerate() {
        out.step_site(site, g, learning_rate)?;
    }
    Ok(out)
}

/// Updates the isometry of the site just optimized, then refreshes that
/// site's reduced features in the cache.
pub struct IsometryHook<'a> {
    pub layer: &'a mut EmbeddingLayer,
    pub data: &'a ContinuousData,
    pub learning_rate: f64,
}

impl SiteHook for IsometryHook<'_> {
    fn after_step(&mut self, mps: &Mps, cache: &mut EnvironmentCache, weights: &[f64], mode: RegMode) -> Result<()> {
        let site = cache.active_site();
        let (raw_dim, red) = (self.layer.raw_dim(), self.layer.reduced_dim());
        let mut grad = DMatrix::zeros(raw_dim, red);
        for (x, n) in weights.iter().enumerate() {
            let m = cache.site_derivative(mps, x)?;
            let e = &self.data.raw[x][site];
            let r = self.layer.reduce(e, site)?;
            let Some((_, g)) = overlap_terms(dot(&m, &r), mode) else {
                return Ok(());
            };
            let coef = -2.0 * n * g;
            for s in 0..red {
                for i in 0..raw_dim {
                    grad[(i, s)] += coef * e[i] * m[s];
                }
            }
        }
        self.layer.step_site(site, &grad, self.learning_rate)?;
        let features = self
            .data
            .raw
            .iter()
            .map(|sample| self.layer.reduce(&sample[site], site))
            .collect::<Result<Vec<_>>>()?;
        cache.set_active_features(features)
    }
}

/// Core sweeps with an isometry step after every single-site update.
#[allow(clippy::too_many_arguments)]
pub fn train_continuous(
    mps: Mps,
    mut layer: EmbeddingLayer,
    data: &ContinuousData,
    opt: OptimizerKind,
    schedule: &RegularizationSchedule,
    n_sweeps: usize,
    cfg: &NewtonConfig,
    learning_rate: f64,
) -> Result<(Mps, EmbeddingLayer, LossTrace)> {
    if !(learning_rate > 0.0) {
        return Err(Error::Config(format!("isometry learning rate must be > 0, got {learning_rate}")));
    }
    if mps.site_dim() != layer.reduced_dim() {
        return Err(Error::Dimension("mps site dimension differs from the reduced feature width".into()));
    }
    let set = TrainingSet { inputs: data.inputs(&layer)?, weights: data.weights.clone() };
    let mut hook = IsometryHook { layer: &mut layer, data, learning_rate };
    let (mps, trace) = train_with_hook(mps, &set, opt, schedule, n_sweeps, cfg, &mut hook)?;
    Ok((mps, layer, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn toy(seed: u64) -> (Mps, EmbeddingLayer, ContinuousData) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let records: Vec<ContinuousRecord> = (0..12)
            .map(|_| ContinuousRecord { features: (0..4).map(|_| rng.random::<f64>()).collect(), label: None })
            .collect();
        let data = ContinuousData::from_records(&records, 8).unwrap();
        let layer = EmbeddingLayer::random(4, 8, 3, seed).unwrap();
        let mps = Mps::random(4, 3, 3, seed).unwrap();
        (mps, layer, data)
    }

    /// Gauss-Legendre nodes and weights on `[0, 1]` by Newton iteration.
    fn quadrature(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    x -= p1 / dp;
                }
                ((x + 1.0) / 2.0, 1.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    #[test]
    fn embedding_parity_and_values() {
        let e = embed(0.5, RAW_DIM);
        assert_eq!(e.len(), RAW_DIM);
        for k in (1..RAW_DIM).step_by(2) {
            assert_eq!(e[k], 0.0);
        }
        assert_eq!(embed(-0.3, 5), embed(0.0, 5));
        // P_2(0.6) = 0.04, P_k(1) = 1
        let e = embed(0.8, 3);
        assert!((e[2] - 5f64.sqrt() * 0.04).abs() < 1e-15);
        let e = embed(1.0, RAW_DIM);
        for (k, v) in e.iter().enumerate() {
            assert!((v - ((2 * k + 1) as f64).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_is_orthonormal_on_unit_interval() {
        let nodes = quadrature(30);
        let mut gram = DMatrix::<f64>::zeros(RAW_DIM, RAW_DIM);
        for &(v, w) in &nodes {
            let e = DVector::from_vec(embed(v, RAW_DIM));
            gram += &e * e.transpose() * w;
        }
        let err = (gram - DMatrix::identity(RAW_DIM, RAW_DIM)).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn embedding_is_continuous() {
        // Lipschitz bound from P_k'(1) = k (k + 1) / 2, the maximum over [-1, 1]
        let lip: f64 = (0..RAW_DIM)
            .map(|k| {
                let d = ((2 * k + 1) as f64).sqrt() * (k * (k + 1)) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let h = 1e-6;
        let worst = (0..=1000)
            .map(|i| {
                let v = i as f64 / 1000.0 * (1.0 - h);
                let a = embed(v, RAW_DIM);
                let b = embed(v + h, RAW_DIM);
                crate::tensor::norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>())
            })
            .fold(0.0, f64::max);
        assert!(worst <= lip * h * (1.0 + 1e-6), "{worst} vs {}", lip * h);
        assert!(worst > 0.5 * lip * h);
    }

    #[test]
    fn born_density_integrates_to_one() {
        // two sites, reduced features from a random isometry
        let layer = EmbeddingLayer::random(2, 8, 3, 2).unwrap();
        let mps = Mps::random(2, 3, 3, 8).unwrap();
        let nodes = quadrature(12);
        let mut total = 0.0;
        for &(u, wu) in &nodes {
            for &(v, wv) in &nodes {
                let f = vec![layer.reduce(&embed(u, 8), 0).unwrap(), layer.reduce(&embed(v, 8), 1).unwrap()];
                total += wu * wv * mps.amplitude_features(&f).unwrap().powi(2);
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn identity_columns_select_coordinates() {
        let v = DMatrix::from_fn(5, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let layer = EmbeddingLayer::from_isometries(vec![v]).unwrap();
        assert_eq!(layer.reduce(&[1.0, 2.0, 3.0, 4.0, 5.0], 0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(layer.reduce(&[1.0], 0).is_err());
    }

    #[test]
    fn reduction_does_not_expand() {
        let layer = EmbeddingLayer::random(3, RAW_DIM, REDUCED_DIM, 4).unwrap();
        assert!(layer.isometry_defect() < 1e-12);
        for i in 0..50 {
            let f = embed(i as f64 / 49.0, RAW_DIM);
            let r = layer.reduce(&f, i % 3).unwrap();
            assert!(crate::tensor::norm(&r) <= crate::tensor::norm(&f) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, mode) in [(1, RegMode::NONE), (2, RegMode::smooth(0.025, false).unwrap()), (3, RegMode::bias(0.01).unwrap())] {
            let (mps, layer, data) = toy(seed);
            let grads = isometry_gradient(&mps, &layer, &data, mode).unwrap();
            let h = 1e-6;
            for site in 0..4 {
                for (i, s) in [(0, 0), (3, 1), (7, 2)] {
                    let bump = |delta: f64| {
                        let mut isos: Vec<DMatrix<f64>> = (0..4).map(|k| layer.isometry(k).clone()).collect();
                        isos[site][(i, s)] += delta;
                        let l = EmbeddingLayer { raw_dim: 8, reduced_dim: 3, isometries: isos };
                        loss(&mps, &l, &data, mode).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = grads[site][(i, s)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "site {site} ({i},{s}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_gradient_keeps_layer() {
        let layer = EmbeddingLayer::random(2, 6, 3, 9).unwrap();
        let mut moved = layer.clone();
        moved.step_site(1, &DMatrix::zeros(6, 3), 0.05).unwrap();
        assert!((moved.isometry(1) - layer.isometry(1)).abs().max() < 1e-12);
    }

    #[test]
    fn frozen_mps_loss_decreases() {
        let (mps, mut layer, data) = toy(7);
        let mut prev = loss(&mps, &layer, &data, RegMode::NONE).unwrap();
        for _ in 0..10 {
            layer = isometry_gd_step(&layer, &mps, &data, ISOMETRY_LEARNING_RATE, RegMode::NONE).unwrap();
            assert!(layer.isometry_defect() < 1e-10);
            let next = loss(&mps, &layer, &data, RegMode::NONE).unwrap();
            assert!(next < prev, "{next} >= {prev}");
            prev = next;
        }
    }

    #[test]
    fn hook_gradient_matches_global_gradient_at_center() {
        let (mps, layer, data) = toy(5);
        let mps = mps.canonicalize(2).unwrap();
        let mut cache = EnvironmentCache::new(&mps, data.inputs(&layer).unwrap()).unwrap();
        let mode = RegMode::smooth(0.025, true).unwrap();
        let global = isometry_gd_step(&layer, &mps, &data, 0.05, mode).unwrap();
        let mut local = layer.clone();
        IsometryHook { layer: &mut local, data: &data, learning_rate: 0.05 }
            .after_step(&mps, &mut cache, data.weights(), mode)
            .unwrap();
        assert!((local.isometry(2) - global.isometry(2)).abs().max() < 1e-12);
        assert_eq!(local.isometry(0), layer.isometry(0));
        let refreshed = cache.inputs().site_vector(0, 2);
        assert!(crate::tensor::max_abs_diff(&refreshed, &local.reduce(&data.raw[0][2], 2).unwrap()) < 1e-15);
    }

    #[test]
    fn continuous_training_keeps_isometries() {
        let (mps, layer, data) = toy(11);
        let (mps, layer, trace) = train_continuous(
            mps,
            layer,
            &data,
            OptimizerKind::RegNewtonSmooth,
            &Default::default(),
            2,
            &Default::default(),
            ISOMETRY_LEARNING_RATE,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 14);
        assert!(layer.isometry_defect() < 1e-10);
        assert!((mps.norm() - 1.0).abs() < 1e-10);
        let direct = loss(&mps, &layer, &data, RegMode::NONE).unwrap();
        assert!((direct - trace.final_nll()).abs() < 1e-9 * direct.abs().max(1.0));
    }
}
