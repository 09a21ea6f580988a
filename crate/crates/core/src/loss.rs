//! Single-core negative log-likelihood on the unit sphere.
//!
//! Every objective here is a weighted sum over per-sample overlaps
//! `o_x = (T, w_x)`, so gradients and Hessians reduce to three per-sample
//! scalars: the gradient weight `g_x`, the curvature weight `beta_x` on
//! `[P w_x]^(x)2`, and the tangent-identity weight `a_x`:
//!
//! ```text
//! grad_free = 2T - 2 sum_x n_x g_x w_x
//! Hess      = 2 (sum_x n_x a_x) (I - T T^T) + 2 sum_x n_x beta_x [P w_x][P w_x]^T
//! ```
//!
//! | kind   | loss term               | g_x           | a_x          | beta_x                    |
//! |--------|-------------------------|---------------|--------------|---------------------------|
//! | none   | -log(o^2 / (T,T))       | 1/o           | 1            | 1/o^2                     |
//! | smooth | -log(o^2 + eps)         | o/(o^2+eps)   | o^2/(o^2+eps)| (o^2-eps)/(o^2+eps)^2     |
//! | bias   | -log((o + eps_b)^2)     | 1/(o+eps_b)   | o/(o+eps_b)  | 1/(o+eps_b)^2             |
//!
//! The absolute-value correction replaces `a_x` and `beta_x` by their
//! magnitudes, which makes the Hessian positive semidefinite on the tangent
//! space.

use std::cell::Cell;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mps::Mps;
use crate::tensor::{axpy, dot, norm};

pub const DEFAULT_BIAS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegKind {
    None,
    Smooth { epsilon: f64 },
    Bias { shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegMode {
    pub kind: RegKind,
    pub abs_correct: bool,
}

impl RegMode {
    pub const NONE: RegMode = RegMode { kind: RegKind::None, abs_correct: false };

    pub fn smooth(epsilon: f64, abs_correct: bool) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self { kind: RegKind::Smooth { epsilon }, abs_correct })
    }

    pub fn bias(shift: f64) -> Result<Self> {
        if !shift.is_finite() {
            return Err(Error::Config(format!("bias shift must be finite, got {shift}")));
        }
        Ok(Self { kind: RegKind::Bias { shift }, abs_correct: false })
    }

    pub fn with_abs(mut self, abs_correct: bool) -> Self {
        self.abs_correct = abs_correct;
        self
    }
}

/// Per-sample scalars of one overlap under a mode. `None` marks a pole.
#[derive(Debug, Clone, Copy)]
struct Coeffs {
    loss: f64,
    g: f64,
    a: f64,
    beta: f64,
}

fn coeffs(o: f64, tt: f64, mode: RegMode) -> Option<Coeffs> {
    let c = match mode.kind {
        RegKind::None => {
            if o == 0.0 {
                return None;
            }
            Coeffs { loss: -(o * o / tt).ln(), g: 1.0 / o, a: 1.0, beta: 1.0 / (o * o) }
        }
        RegKind::Smooth { epsilon } => {
            let q = o * o + epsilon;
            if q == 0.0 {
                return None;
            }
            Coeffs { loss: -q.ln(), g: o / q, a: o * o / q, beta: (o * o - epsilon) / (q * q) }
        }
        RegKind::Bias { shift } => {
            let u = o + shift;
            if u == 0.0 {
                return None;
            }
            Coeffs { loss: -(u * u).ln(), g: 1.0 / u, a: o / u, beta: 1.0 / (u * u) }
        }
    };
    Some(if mode.abs_correct {
        Coeffs { a: c.a.abs(), beta: c.beta.abs(), ..c }
    } else {
        c
    })
}

/// Loss term and gradient weight `g` of a single overlap at unit norm, or
/// `None` on a pole. The derivative of the loss term in `o` is `-2 g`.
pub fn overlap_terms(o: f64, mode: RegMode) -> Option<(f64, f64)> {
    coeffs(o, 1.0, mode).map(|c| (c.loss, c.g))
}

/// Unregularized dataset NLL of a whole model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalNll {
    /// `+inf` when some training string has probability exactly zero.
    pub value: f64,
    /// First training string with zero probability.
    pub zero_sample: Option<usize>,
}

/// `-sum_x n_x log p(x)` by full amplitude contraction per sample.
pub fn global_nll(mps: &Mps, data: &Dataset) -> Result<GlobalNll> {
    if mps.n_sites() != data.n_sites() || mps.site_dim() != data.site_dim() {
        return Err(Error::Dimension("dataset strings do not match the mps".into()));
    }
    let mut value = 0.0;
    for (x, (s, n)) in data.samples().iter().zip(data.weights()).enumerate() {
        let p = mps.probability(s)?;
        if p == 0.0 {
            return Ok(GlobalNll { value: f64::INFINITY, zero_sample: Some(x) });
        }
        value -= n * p.ln();
    }
    Ok(GlobalNll { value, zero_sample: None })
}

/// A vector attached to a point `T` of the sphere and orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: Vec<f64>,
    pub components: Vec<f64>,
}

impl TangentVector {
    pub fn zero(base: &[f64]) -> Self {
        Self { base: base.to_vec(), components: vec![0.0; base.len()] }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.components)
    }
}

/// `v - ((T,v)/(T,T)) T`
pub fn project_tangent(t: &[f64], v: &[f64]) -> Result<TangentVector> {
    let tt = dot(t, t);
    if tt == 0.0 || !tt.is_finite() {
        return Err(Error::Degenerate("cannot project onto the tangent space of a zero tensor".into()));
    }
    let mut out = v.to_vec();
    axpy(-dot(t, v) / tt, t, &mut out);
    Ok(TangentVector { base: t.to_vec(), components: out })
}

/// The single-core optimization problem at the orthogonality center.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    t: Vec<f64>,
    /// Row-major `n_samples x dim`.
    envs: Vec<f64>,
    weights: Vec<f64>,
    overlaps: Vec<f64>,
}

impl LocalProblem {
    pub fn new(t: Vec<f64>, envs: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let dim = t.len();
        if dim == 0 || envs.len() != dim * weights.len() {
            return Err(Error::Dimension(format!(
                "environment block of {} entries does not match {} samples of dimension {dim}",
                envs.len(),
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&n| n < 0.0) {
            return Err(Error::Degenerate(format!("weights must be nonnegative and sum to 1, got {total}")));
        }
        let overlaps = envs.chunks_exact(dim).map(|w| dot(&t, w)).collect();
        Ok(Self { t, envs, weights, overlaps })
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn n_samples(&self) -> usize {
        self.weights.len()
    }

    pub fn tensor(&self) -> &[f64] {
        &self.t
    }

    pub fn env(&self, sample: usize) -> &[f64] {
        &self.envs[sample * self.dim()..(sample + 1) * self.dim()]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn overlaps(&self) -> &[f64] {
        &self.overlaps
    }

    /// Same environments, different center tensor.
    pub fn with_tensor(&self, t: Vec<f64>) -> Result<Self> {
        if t.len() != self.dim() {
            return Err(Error::Dimension("replacement tensor has the wrong dimension".into()));
        }
        let overlaps = self.envs.chunks_exact(self.dim()).map(|w| dot(&t, w)).collect();
        Ok(Self { t, envs: self.envs.clone(), weights: self.weights.clone(), overlaps })
    }

    fn all_coeffs(&self, mode: RegMode) -> Result<Vec<Coeffs>> {
        let tt = dot(&self.t, &self.t);
        self.overlaps
            .iter()
            .enumerate()
            .map(|(x, &o)| coeffs(o, tt, mode).ok_or(Error::Singular { sample: x }))
            .collect()
    }

    /// First sample sitting on a pole of the objective, if any.
    pub fn singular_sample(&self, mode: RegMode) -> Option<usize> {
        self.all_coeffs(mode).err().and_then(|e| match e {
            Error::Singular { sample } => Some(sample),
            _ => None,
        })
    }

    /// Objective value; `+inf` on a pole.
    pub fn loss(&self, mode: RegMode) -> f64 {
        match self.all_coeffs(mode) {
            Ok(cs) => cs.iter().zip(&self.weights).map(|(c, n)| n * c.loss).sum(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Unregularized NLL `-sum n_x log(o_x^2)` of a unit-norm center tensor.
    pub fn nll(&self) -> f64 {
        self.loss(RegMode::NONE)
    }

    pub fn grad_free(&self, mode: RegMode) -> Result<Vec<f64>> {
        let cs = self.all_coeffs(mode)?;
        let mut g: Vec<f64> = self.t.iter().map(|v| 2.0 * v).collect();
        for (x, (c, n)) in cs.iter().zip(&self.weights).enumerate() {
            axpy(-2.0 * n * c.g, self.env(x), &mut g);
        }
        Ok(g)
    }

    pub fn grad_projected(&self, mode: RegMode) -> Result<TangentVector> {
        project_tangent(&self.t, &self.grad_free(mode)?)
    }

    /// `-2 sum n_x g_x P(w_x)`, built sample by sample without forming the
    /// free gradient.
    pub fn grad_projected_closed_form(&self, mode: RegMode) -> Result<TangentVector> {
        let cs = self.all_coeffs(mode)?;
        let tt = dot(&self.t, &self.t);
        let mut out = vec![0.0; self.dim()];
        for (x, (c, n)) in cs.iter().zip(&self.weights).enumerate() {
            let pw = project_tangent(&self.t, self.env(x))?;
            axpy(-2.0 * n * c.g, &pw.components, &mut out);
        }
        debug_assert!(tt > 0.0);
        Ok(TangentVector { base: self.t.clone(), components: out })
    }

    /// Dense Riemannian Hessian, assembled from explicit outer products.
    pub fn hess_dense(&self, mode: RegMode) -> Result<DMatrix<f64>> {
        let cs = self.all_coeffs(mode)?;
        let dim = self.dim();
        let t = nalgebra::DVector::from_column_slice(&self.t);
        let alpha: f64 = cs.iter().zip(&self.weights).map(|(c, n)| n * c.a).sum();
        let mut h = (DMatrix::identity(dim, dim) - &t * t.transpose()) * (2.0 * alpha);
        for (x, (c, n)) in cs.iter().zip(&self.weights).enumerate() {
            let pw = project_tangent(&self.t, self.env(x))?;
            let pw = nalgebra::DVector::from_vec(pw.components);
            h += &pw * pw.transpose() * (2.0 * n * c.beta);
        }
        Ok(h)
    }

    /// Matrix-free Hessian operator for `mode`.
    pub fn hessian(&self, mode: RegMode) -> Result<LocalHessian<'_>> {
        let cs = self.all_coeffs(mode)?;
        let alpha = cs.iter().zip(&self.weights).map(|(c, n)| n * c.a).sum();
        let curvature = cs.iter().zip(&self.weights).map(|(c, n)| n * c.beta).collect();
        Ok(LocalHessian { problem: self, alpha, curvature, calls: Cell::new(0) })
    }

    pub fn hvp(&self, mode: RegMode, v: &[f64]) -> Result<Vec<f64>> {
        let h = self.hessian(mode)?;
        let mut out = vec![0.0; v.len()];
        h.apply(v, &mut out);
        Ok(out)
    }
}

/// `v -> H v` in `O(D * N_s)` time and `O(D)` extra memory.
#[derive(Debug)]
pub struct LocalHessian<'a> {
    problem: &'a LocalProblem,
    alpha: f64,
    /// `n_x * beta_x`
    curvature: Vec<f64>,
    calls: Cell<usize>,
}

impl LocalHessian<'_> {
    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn tensor(&self) -> &[f64] {
        self.problem.tensor()
    }

    /// Number of `apply` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.calls.set(self.calls.get() + 1);
        let p = self.problem;
        let t = &p.t;
        let tv = dot(t, v);
        // P(w) = w - o T, so (P w, v) = (w, v) - o (T, v) and
        // sum_x c_x (P w_x, v) P w_x = sum_x c_x s_x w_x - (sum_x c_x s_x o_x) T.
        out.iter_mut().zip(v).for_each(|(o, vi)| *o = 2.0 * self.alpha * vi);
        let mut t_coeff = -2.0 * self.alpha * tv;
        for (x, (&c, &o)) in self.curvature.iter().zip(&p.overlaps).enumerate() {
            if c == 0.0 {
                continue;
            }
            let w = p.env(x);
            let s = 2.0 * c * (dot(w, v) - o * tv);
            axpy(s, w, out);
            t_coeff -= s * o;
        }
        axpy(t_coeff, t, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// Random instance whose overlaps all have magnitude at least `min_overlap`.
    pub(crate) fn instance(seed: u64, dim: usize, ns: usize, min_overlap: f64) -> LocalProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let t = unit(&mut rng, dim);
            let envs: Vec<f64> = (0..ns * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
            let mut w: Vec<f64> = (0..ns).map(|_| rng.random_range(0.5..1.5)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let fix: f64 = 1.0 - w.iter().sum::<f64>();
            w[0] += fix;
            let p = LocalProblem::new(t, envs, w).unwrap();
            if p.overlaps().iter().all(|o| o.abs() >= min_overlap) {
                return p;
            }
        }
    }

    fn retracted(t: &[f64], u: &[f64], s: f64) -> Vec<f64> {
        let mut x: Vec<f64> = t.iter().zip(u).map(|(a, b)| a + s * b).collect();
        let n = norm(&x);
        x.iter_mut().for_each(|v| *v /= n);
        x
    }

    fn random_tangent(rng: &mut ChaCha8Rng, t: &[f64]) -> Vec<f64> {
        let v = unit(rng, t.len());
        let mut u = project_tangent(t, &v).unwrap().components;
        let n = norm(&u);
        u.iter_mut().for_each(|x| *x /= n);
        u
    }

    fn modes() -> Vec<RegMode> {
        vec![
            RegMode::NONE,
            RegMode::smooth(0.025, false).unwrap(),
            RegMode::smooth(0.025, true).unwrap(),
            RegMode::bias(0.1).unwrap(),
        ]
    }

    #[test]
    fn smooth_loss_with_all_zero_overlaps() {
        let t = vec![1.0, 0.0];
        let p = LocalProblem::new(t, vec![0.0, 1.0, 0.0, 2.0], vec![0.5, 0.5]).unwrap();
        let l = p.loss(RegMode::smooth(0.025, false).unwrap());
        assert!((l - 3.6888794541139363).abs() < 1e-12);
        assert_eq!(p.loss(RegMode::NONE), f64::INFINITY);
        assert_eq!(p.singular_sample(RegMode::NONE), Some(0));
        assert!(matches!(p.grad_free(RegMode::NONE), Err(Error::Singular { sample: 0 })));
    }

    #[test]
    fn zero_epsilon_smooth_equals_unregularized() {
        let p = instance(1, 12, 5, 0.05);
        let s0 = RegMode::smooth(0.0, false).unwrap();
        assert!((p.loss(s0) - p.loss(RegMode::NONE)).abs() < 1e-12);
        let g0 = p.grad_free(s0).unwrap();
        let g = p.grad_free(RegMode::NONE).unwrap();
        assert!(max_abs_diff(&g0, &g) < 1e-12);
    }

    #[test]
    fn stationary_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = unit(&mut rng, 6);
        let p = LocalProblem::new(t.clone(), t.clone(), vec![1.0]).unwrap();
        let g = p.grad_free(RegMode::NONE).unwrap();
        assert!(norm(&g) < 1e-14);
        let h = p.hess_dense(RegMode::NONE).unwrap();
        let eig = h.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-12);
        assert!(ev[1..].iter().all(|e| (e - 2.0).abs() < 1e-12));
    }

    #[test]
    fn projection_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Vec<f64> = (0..7).map(|_| rng.sample(StandardNormal)).collect();
        assert!(norm(&project_tangent(&t, &t).unwrap().components) < 1e-14);
        let v = random_tangent(&mut rng, &{
            let n = norm(&t);
            t.iter().map(|x| x / n).collect::<Vec<_>>()
        });
        let pv = project_tangent(&t, &v).unwrap();
        assert!(max_abs_diff(&pv.components, &v) < 1e-14);
        let w: Vec<f64> = (0..7).map(|_| rng.sample(StandardNormal)).collect();
        let once = project_tangent(&t, &w).unwrap();
        let twice = project_tangent(&t, &once.components).unwrap();
        assert!(max_abs_diff(&once.components, &twice.components) < 1e-14);
        assert!(matches!(project_tangent(&[0.0; 3], &[1.0; 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn unregularized_gradient_is_already_tangent() {
        for seed in 0..10 {
            let p = instance(seed, 12, 5, 0.05);
            let free = p.grad_free(RegMode::NONE).unwrap();
            let proj = p.grad_projected(RegMode::NONE).unwrap();
            assert!(max_abs_diff(&free, &proj.components) < 1e-12 * (1.0 + norm(&free)));
        }
    }

    #[test]
    fn closed_form_projected_gradient_agrees() {
        for seed in 0..10 {
            let p = instance(seed, 12, 5, 0.01);
            for mode in modes() {
                let a = p.grad_projected(mode).unwrap();
                let b = p.grad_projected_closed_form(mode).unwrap();
                assert!(max_abs_diff(&a.components, &b.components) < 1e-12 * (1.0 + a.norm()));
                assert!(dot(&p.t, &a.components).abs() < 1e-12 * (1.0 + a.norm()));
            }
        }
    }

    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let mode = RegMode::smooth(0.025, false).unwrap();
        let h = 1e-5;
        for seed in 0..20 {
            let p = instance(100 + seed, 12, 5, 0.0);
            let g = p.grad_free(mode).unwrap();
            // the free gradient carries the 2T normalization term on top of
            // the derivative of -sum n log(o^2 + eps)
            let mut fd = vec![0.0; 12];
            for i in 0..12 {
                let mut tp = p.t.clone();
                let mut tm = p.t.clone();
                tp[i] += h;
                tm[i] -= h;
                let lp = p.with_tensor(tp.clone()).unwrap().loss(mode) + dot(&tp, &tp);
                let lm = p.with_tensor(tm.clone()).unwrap().loss(mode) + dot(&tm, &tm);
                fd[i] = (lp - lm) / (2.0 * h);
            }
            let err = max_abs_diff(&g, &fd) / norm(&g);
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn smooth_converges_to_unregularized_as_epsilon_vanishes() {
        let p = instance(7, 12, 5, 0.1);
        let tiny = RegMode::smooth(1e-12, false).unwrap();
        let a = p.grad_free(tiny).unwrap();
        let b = p.grad_free(RegMode::NONE).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-6);
        let ha = p.hess_dense(tiny).unwrap();
        let hb = p.hess_dense(RegMode::NONE).unwrap();
        assert!((ha - hb).amax() < 1e-6);
        assert!((p.loss(tiny) - p.loss(RegMode::NONE)).abs() < 1e-6);
    }

    #[test]
    fn sphere_gradient_matches_great_circle_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let p = instance(200 + seed, 12, 5, 0.1);
            for mode in modes() {
                let g = p.grad_projected(mode).unwrap();
                for _ in 0..3 {
                    let u = random_tangent(&mut rng, &p.t);
                    let h = 1e-5;
                    let lp = p.with_tensor(retracted(&p.t, &u, h)).unwrap().loss(mode);
                    let lm = p.with_tensor(retracted(&p.t, &u, -h)).unwrap().loss(mode);
                    let fd = (lp - lm) / (2.0 * h);
                    let an = dot(&g.components, &u);
                    assert!((fd - an).abs() < 1e-5 * g.norm().max(1e-3), "{mode:?}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn hessian_matches_directional_differences_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..5 {
            let p = instance(300 + seed, 12, 5, 0.1);
            for mode in [RegMode::NONE, RegMode::smooth(0.025, false).unwrap(), RegMode::bias(0.1).unwrap()] {
                let hmat = p.hess_dense(mode).unwrap();
                for _ in 0..10 {
                    let u = random_tangent(&mut rng, &p.t);
                    let h = 1e-5;
                    let gp = p.with_tensor(retracted(&p.t, &u, h)).unwrap().grad_projected(mode).unwrap();
                    let gm = p.with_tensor(retracted(&p.t, &u, -h)).unwrap().grad_projected(mode).unwrap();
                    let diff: Vec<f64> = gp.components.iter().zip(&gm.components).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    let fd = project_tangent(&p.t, &diff).unwrap().components;
                    let hu = &hmat * nalgebra::DVector::from_column_slice(&u);
                    let err = max_abs_diff(hu.as_slice(), &fd) / hu.norm();
                    assert!(err < 1e-5, "{mode:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_and_annihilates_base() {
        for seed in 0..10 {
            let p = instance(400 + seed, 10, 6, 0.02);
            for mode in modes() {
                let h = p.hess_dense(mode).unwrap();
                assert!((&h - h.transpose()).amax() < 1e-12);
                let ht = &h * nalgebra::DVector::from_column_slice(&p.t);
                assert!(ht.amax() < 1e-12 * (1.0 + h.amax()));
            }
        }
    }

    #[test]
    fn abs_corrected_hessian_is_psd_on_tangent_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = instance(500, 12, 8, 0.0);
        let mode = RegMode::smooth(0.025, true).unwrap();
        let h = p.hess_dense(mode).unwrap();
        for _ in 0..100 {
            let u = random_tangent(&mut rng, &p.t);
            let v = nalgebra::DVector::from_column_slice(&u);
            assert!(v.dot(&(&h * &v)) >= 0.0);
        }
    }

    #[test]
    fn hvp_matches_dense_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..50 {
            let p = instance(600 + seed, 8 + seed as usize % 20, 3 + seed as usize % 10, 0.05);
            for mode in modes() {
                let h = p.hess_dense(mode).unwrap();
                let v: Vec<f64> = (0..p.dim()).map(|_| rng.sample(StandardNormal)).collect();
                let dense = &h * nalgebra::DVector::from_column_slice(&v);
                let mf = p.hvp(mode, &v).unwrap();
                assert!(max_abs_diff(dense.as_slice(), &mf) < 1e-12 * (1.0 + h.amax()));
                let ht = p.hvp(mode, &p.t).unwrap();
                assert!(norm(&ht) < 1e-12 * (1.0 + h.amax()));
            }
        }
    }

    #[test]
    fn hvp_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = instance(700, 15, 6, 0.05);
        let mode = RegMode::smooth(0.025, true).unwrap();
        let u: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let (a, b) = (0.7, -1.3);
        let comb: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = p.hvp(mode, &comb).unwrap();
        let hu = p.hvp(mode, &u).unwrap();
        let hv = p.hvp(mode, &v).unwrap();
        let rhs: Vec<f64> = hu.iter().zip(&hv).map(|(x, y)| a * x + b * y).collect();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn weights_must_be_normalized() {
        assert!(LocalProblem::new(vec![1.0], vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(LocalProblem::new(vec![1.0], vec![1.0], vec![0.5, 0.5]).is_err());
    }

    fn product_state(site_vectors: &[[f64; 2]]) -> Mps {
        let cores = site_vectors
            .iter()
            .map(|v| crate::tensor::DenseTensor::new(vec![1, 2, 1], v.to_vec()).unwrap())
            .collect();
        Mps::from_cores(cores).unwrap()
    }

    #[test]
    fn global_nll_of_uniform_state() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mps = product_state(&[[h, h]; 5]);
        let data = Dataset::uniform(2, vec![vec![0, 1, 1, 0, 1], vec![1, 1, 1, 1, 1]]).unwrap();
        let nll = global_nll(&mps, &data).unwrap();
        assert!((nll.value - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(nll.zero_sample, None);
    }

    #[test]
    fn global_nll_of_basis_state() {
        let mps = product_state(&[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let fit = Dataset::uniform(2, vec![vec![1, 0, 1]]).unwrap();
        assert_eq!(global_nll(&mps, &fit).unwrap().value, 0.0);
        let miss = Dataset::uniform(2, vec![vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        let nll = global_nll(&mps, &miss).unwrap();
        assert_eq!(nll.value, f64::INFINITY);
        assert_eq!(nll.zero_sample, Some(1));
    }

    #[test]
    fn global_nll_of_exact_fit_is_the_entropy() {
        let q = [0.2, 0.7, 0.45];
        let records: Vec<(Vec<u8>, f64)> = crate::mps::enumerate_strings(3, 2)
            .map(|x| {
                let w = x.iter().zip(&q).map(|(&b, &p)| if b == 1 { p } else { 1.0 - p }).product();
                (x, w)
            })
            .collect();
        let data = Dataset::from_weighted(2, records).unwrap();
        let vectors: Vec<[f64; 2]> = q.iter().map(|p| [(1.0 - p).sqrt(), p.sqrt()]).collect();
        let mps = product_state(&vectors);
        let entropy: f64 = -data.weights().iter().map(|n| n * n.ln()).sum::<f64>();
        assert!((global_nll(&mps, &data).unwrap().value - entropy).abs() < 1e-12);
    }
}
