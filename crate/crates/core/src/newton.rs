//! Newton steps constrained to the tangent space of the unit sphere.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loss::{LocalHessian, LocalProblem, RegMode, TangentVector};
use crate::tensor::{axpy, dot, norm};

/// Residual above which an unconverged iterative solve is abandoned.
const STALL_RESIDUAL: f64 = 1e-3;
/// Relative eigenvalue floor below which the dense system counts as singular.
const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub solver: Solver,
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    pub step_cap: Option<f64>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { solver: Solver::Dense, inner_tol: 1e-8, max_inner_iters: 200, step_cap: None }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) {
            return Err(Error::Config(format!("inner_tol must be > 0, got {}", self.inner_tol)));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::Config("max_inner_iters must be >= 1".into()));
        }
        if let Some(cap) = self.step_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("step_cap must be > 0, got {cap}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonStepResult {
    pub step: TangentVector,
    /// `||H step + grad||`
    pub residual_norm: f64,
    pub inner_iters: usize,
    pub fallback_used: bool,
}

/// A symmetric linear map known only through its action.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl LinearOperator for LocalHessian<'_> {
    fn dim(&self) -> usize {
        LocalHessian::dim(self)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        LocalHessian::apply(self, x, out)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let y = self * DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
    }
}

/// `H^2 + 4 T T^T`: positive definite whenever `H` is nonsingular on the
/// tangent space, and its solution of `-H g` is automatically tangent.
pub struct AugmentedSquare<'a, H: LinearOperator + ?Sized> {
    hessian: &'a H,
    base: &'a [f64],
    scratch: RefCell<Vec<f64>>,
}

impl<'a, H: LinearOperator + ?Sized> AugmentedSquare<'a, H> {
    pub fn new(hessian: &'a H, base: &'a [f64]) -> Self {
        Self { hessian, base, scratch: RefCell::new(vec![0.0; base.len()]) }
    }
}

impl<H: LinearOperator + ?Sized> LinearOperator for AugmentedSquare<'_, H> {
    fn dim(&self) -> usize {
        self.base.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut tmp = self.scratch.borrow_mut();
        self.hessian.apply(x, &mut tmp);
        self.hessian.apply(&tmp, out);
        axpy(4.0 * dot(self.base, x), self.base, out);
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive definite operator, starting
/// from `x0`. Stops when the recursive residual drops to `abs_tol`.
pub fn conjugate_gradient<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    x0: Option<&[f64]>,
    abs_tol: f64,
    max_iters: usize,
) -> CgOutcome {
    let n = b.len();
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r = b.to_vec();
    let mut ap = vec![0.0; n];
    if x0.is_some() {
        op.apply(&x, &mut ap);
        axpy(-1.0, &ap, &mut r);
    }
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > abs_tol && iterations < max_iters {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        iterations += 1;
    }
    let residual_norm = rr.sqrt();
    CgOutcome { x, iterations, residual_norm, converged: residual_norm <= abs_tol }
}

fn finish(
    problem: &LocalProblem,
    mut step: Vec<f64>,
    grad: &[f64],
    residual_of: impl Fn(&[f64]) -> f64,
    inner_iters: usize,
    fallback_used: bool,
) -> NewtonStepResult {
    let t = problem.tensor();
    // rounding leaves a tiny normal component; remove it exactly
    axpy(-dot(t, &step) / dot(t, t), t, &mut step);
    let residual_norm = if norm(grad) == 0.0 { 0.0 } else { residual_of(&step) };
    NewtonStepResult {
        step: TangentVector { base: t.to_vec(), components: step },
        residual_norm,
        inner_iters,
        fallback_used,
    }
}

fn descent_fallback(grad: &[f64], lambda_max: f64) -> Vec<f64> {
    let scale = if lambda_max > 0.0 && lambda_max.is_finite() { 1.0 / lambda_max } else { 1.0 };
    grad.iter().map(|g| -scale * g).collect()
}

/// Solves `H d = -g, (T, d) = 0` with a dense symmetric eigendecomposition
/// of `H + s T T^T`.
pub fn newton_step_dense(problem: &LocalProblem, mode: RegMode) -> Result<NewtonStepResult> {
    let grad = problem.grad_projected(mode)?.components;
    let h = problem.hess_dense(mode)?;
    let residual_of = |d: &[f64]| {
        let r = &h * DVector::from_column_slice(d) + DVector::from_column_slice(&grad);
        r.norm()
    };
    if norm(&grad) == 0.0 {
        return Ok(finish(problem, vec![0.0; problem.dim()], &grad, residual_of, 0, false));
    }
    let t = DVector::from_column_slice(problem.tensor());
    let shift = (h.trace() / problem.dim() as f64).abs().max(1.0);
    let aug = &h + &t * t.transpose() * shift;
    let eig = aug.symmetric_eigen();
    let lambda_max = eig.eigenvalues.amax();
    let lambda_min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs()));
    if !(lambda_min > SINGULAR_RATIO * lambda_max) {
        let step = descent_fallback(&grad, lambda_max);
        return Ok(finish(problem, step, &grad, residual_of, 0, true));
    }
    let g = DVector::from_column_slice(&grad);
    let coeffs = eig.eigenvectors.transpose() * &g;
    let scaled = DVector::from_iterator(
        coeffs.len(),
        coeffs.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| -c / l),
    );
    let step = (&eig.eigenvectors * scaled).as_slice().to_vec();
    Ok(finish(problem, step, &grad, residual_of, 0, false))
}

/// Rough `lambda_max` from a few power iterations.
fn power_estimate<A: LinearOperator + ?Sized>(op: &A, seed: &[f64], iters: usize) -> f64 {
    let mut v = seed.to_vec();
    let n = norm(&v);
    if n == 0.0 {
        return 1.0;
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut out = vec![0.0; v.len()];
    let mut lambda = 0.0;
    for _ in 0..iters {
        op.apply(&v, &mut out);
        lambda = norm(&out);
        if lambda == 0.0 {
            break;
        }
        v.iter_mut().zip(&out).for_each(|(vi, oi)| *vi = oi / lambda);
    }
    lambda
}

/// Matrix-free Newton step: CG on `(H^2 + 4 T T^T) d = -H g`, touching the
/// Hessian only through `apply`.
pub fn newton_step_iterative(problem: &LocalProblem, mode: RegMode, cfg: &NewtonConfig) -> Result<NewtonStepResult> {
    let grad = problem.grad_projected(mode)?.components;
    let hessian = problem.hessian(mode)?;
    newton_step_with_operator(problem, &hessian, &grad, cfg)
}

/// The iterative solve against any Hessian operator; used directly by tests
/// that instrument the operator.
pub fn newton_step_with_operator<H: LinearOperator + ?Sized>(
    problem: &LocalProblem,
    hessian: &H,
    grad: &[f64],
    cfg: &NewtonConfig,
) -> Result<NewtonStepResult> {
    cfg.validate()?;
    let dim = problem.dim();
    let scratch = RefCell::new(vec![0.0; dim]);
    let residual_of = |d: &[f64]| {
        let mut r = scratch.borrow_mut();
        hessian.apply(d, &mut r);
        axpy(1.0, grad, &mut r);
        norm(&r)
    };
    let gnorm = norm(grad);
    if gnorm == 0.0 {
        return Ok(finish(problem, vec![0.0; dim], grad, residual_of, 0, false));
    }
    let target = cfg.inner_tol * gnorm;
    let mut rhs = vec![0.0; dim];
    hessian.apply(grad, &mut rhs);
    rhs.iter_mut().for_each(|v| *v = -*v);
    let op = AugmentedSquare::new(hessian, problem.tensor());

    let mut x: Option<Vec<f64>> = None;
    let mut used = 0;
    let mut abs_tol = cfg.inner_tol * norm(&rhs);
    let mut best: Option<(f64, Vec<f64>)> = None;
    while used < cfg.max_inner_iters {
        let out = conjugate_gradient(&op, &rhs, x.as_deref(), abs_tol, cfg.max_inner_iters - used);
        used += out.iterations;
        let true_res = residual_of(&out.x);
        if best.as_ref().is_none_or(|(r, _)| true_res < *r) {
            best = Some((true_res, out.x.clone()));
        }
        if true_res <= target {
            break;
        }
        if out.iterations == 0 {
            // no progress: breakdown, or the surrogate residual is already exactly zero
            break;
        }
        // tighten the surrogate tolerance in proportion to the miss
        abs_tol *= (0.5 * target / true_res).min(0.1);
        x = Some(out.x);
    }
    let (res, step) = best.expect("at least one solve");
    if res > target && res > STALL_RESIDUAL * gnorm {
        let lambda = power_estimate(hessian, grad, 10);
        let step = descent_fallback(grad, lambda);
        return Ok(finish(problem, step, grad, residual_of, used, true));
    }
    Ok(finish(problem, step, grad, residual_of, used, false))
}

/// Dispatches on the configured solver and applies the optional step cap.
pub fn newton_step(problem: &LocalProblem, mode: RegMode, cfg: &NewtonConfig) -> Result<NewtonStepResult> {
    let mut result = match cfg.solver {
        Solver::Dense => newton_step_dense(problem, mode)?,
        Solver::Iterative => newton_step_iterative(problem, mode, cfg)?,
    };
    if let Some(cap) = cfg.step_cap {
        let n = result.step.norm();
        if n > cap {
            result.step.components.iter_mut().for_each(|v| *v *= cap / n);
        }
    }
    Ok(result)
}

/// Metric-projection retraction `(T + step) / ||T + step||`.
pub fn retract(t: &[f64], step: &TangentVector) -> Result<Vec<f64>> {
    if t.len() != step.components.len() {
        return Err(Error::Dimension("step and base differ in dimension".into()));
    }
    let mut out: Vec<f64> = t.iter().zip(&step.components).map(|(a, b)| a + b).collect();
    let n = norm(&out);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("retraction of a vanishing or non-finite point".into()));
    }
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
