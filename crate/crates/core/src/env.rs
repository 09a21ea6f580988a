//! Per-sample left/right contraction stacks around the orthogonality center.

use crate::error::{Error, Result};
use crate::mps::{
    contract_basis, contract_basis_right, contract_features, contract_features_right, dims3,
    Direction, Mps,
};
use crate::tensor::{dot, DenseTensor};

/// What gets attached to each site index: a basis symbol, or a real feature
/// vector (continuous embeddings).
#[derive(Debug, Clone, PartialEq)]
pub enum SiteInputs {
    Basis { site_dim: usize, strings: Vec<Vec<u8>> },
    /// `vectors[sample][site]` has length `site_dim`.
    Features { site_dim: usize, vectors: Vec<Vec<Vec<f64>>> },
}

impl SiteInputs {
    pub fn n_samples(&self) -> usize {
        match self {
            SiteInputs::Basis { strings, .. } => strings.len(),
            SiteInputs::Features { vectors, .. } => vectors.len(),
        }
    }

    pub fn site_dim(&self) -> usize {
        match self {
            SiteInputs::Basis { site_dim, .. } | SiteInputs::Features { site_dim, .. } => *site_dim,
        }
    }

    pub fn n_sites(&self) -> Option<usize> {
        match self {
            SiteInputs::Basis { strings, .. } => strings.first().map(Vec::len),
            SiteInputs::Features { vectors, .. } => vectors.first().map(Vec::len),
        }
    }

    pub fn site_vector(&self, sample: usize, site: usize) -> Vec<f64> {
        match self {
            SiteInputs::Basis { site_dim, strings } => {
                let mut v = vec![0.0; *site_dim];
                v[strings[sample][site] as usize] = 1.0;
                v
            }
            SiteInputs::Features { vectors, .. } => vectors[sample][site].clone(),
        }
    }

    fn contract_left(&self, sample: usize, site: usize, left: &[f64], core: &DenseTensor) -> Vec<f64> {
        match self {
            SiteInputs::Basis { strings, .. } => {
                contract_basis(left, core, strings[sample][site] as usize)
            }
            SiteInputs::Features { vectors, .. } => {
                contract_features(left, core, &vectors[sample][site])
            }
        }
    }

    fn contract_right(&self, sample: usize, site: usize, core: &DenseTensor, right: &[f64]) -> Vec<f64> {
        match self {
            SiteInputs::Basis { strings, .. } => {
                contract_basis_right(core, strings[sample][site] as usize, right)
            }
            SiteInputs::Features { vectors, .. } => {
                contract_features_right(core, &vectors[sample][site], right)
            }
        }
    }

    fn validate(&self, mps: &Mps) -> Result<()> {
        if self.site_dim() != mps.site_dim() {
            return Err(Error::Dimension(format!(
                "inputs have site dimension {}, mps has {}",
                self.site_dim(),
                mps.site_dim()
            )));
        }
        let n = mps.n_sites();
        let ok = match self {
            SiteInputs::Basis { site_dim, strings } => strings
                .iter()
                .all(|x| x.len() == n && x.iter().all(|&s| (s as usize) < *site_dim)),
            SiteInputs::Features { site_dim, vectors } => vectors
                .iter()
                .all(|x| x.len() == n && x.iter().all(|v| v.len() == *site_dim)),
        };
        if !ok {
            return Err(Error::Dimension("sample inputs do not match the mps layout".into()));
        }
        Ok(())
    }
}

/// Left and right environment stacks for every sample.
///
/// With the center at `c`, `left[x]` holds the contractions of sites `0..k`
/// for `k = 0..=c` and `right[x]` holds the contractions of sites `k..n` for
/// `k = n, n-1, ..., c+1` (so the top of each stack is adjacent to `c`).
#[derive(Debug, Clone)]
pub struct EnvironmentCache {
    inputs: SiteInputs,
    left: Vec<Vec<Vec<f64>>>,
    right: Vec<Vec<Vec<f64>>>,
    active_site: usize,
    n_sites: usize,
}

impl EnvironmentCache {
    pub fn new(mps: &Mps, inputs: SiteInputs) -> Result<Self> {
        let c = mps
            .center()
            .ok_or_else(|| Error::StaleCache("mps has no orthogonality center".into()))?;
        inputs.validate(mps)?;
        let n = mps.n_sites();
        let ns = inputs.n_samples();
        let mut left = Vec::with_capacity(ns);
        let mut right = Vec::with_capacity(ns);
        for x in 0..ns {
            let mut l_stack = vec![vec![1.0]];
            for site in 0..c {
                let next = inputs.contract_left(x, site, l_stack.last().unwrap(), mps.core(site));
                l_stack.push(next);
            }
            let mut r_stack = vec![vec![1.0]];
            for site in (c + 1..n).rev() {
                let next = inputs.contract_right(x, site, mps.core(site), r_stack.last().unwrap());
                r_stack.push(next);
            }
            left.push(l_stack);
            right.push(r_stack);
        }
        Ok(Self { inputs, left, right, active_site: c, n_sites: n })
    }

    pub fn inputs(&self) -> &SiteInputs {
        &self.inputs
    }

    /// Replaces the feature vectors of the active site only; the stacks never
    /// contain the active site, so they stay valid.
    pub fn set_active_features(&mut self, per_sample: Vec<Vec<f64>>) -> Result<()> {
        let site = self.active_site;
        match &mut self.inputs {
            SiteInputs::Features { site_dim, vectors } => {
                if per_sample.len() != vectors.len() || per_sample.iter().any(|v| v.len() != *site_dim) {
                    return Err(Error::Dimension("replacement features do not match".into()));
                }
                for (x, v) in per_sample.into_iter().enumerate() {
                    vectors[x][site] = v;
                }
                Ok(())
            }
            SiteInputs::Basis { .. } => {
                Err(Error::Dimension("basis inputs have no trainable features".into()))
            }
        }
    }

    pub fn active_site(&self) -> usize {
        self.active_site
    }

    pub fn n_samples(&self) -> usize {
        self.left.len()
    }

    /// Number of cached cuts for one sample, `(left, right)`.
    pub fn stack_depths(&self, sample: usize) -> (usize, usize) {
        (self.left[sample].len(), self.right[sample].len())
    }

    fn check(&self, mps: &Mps) -> Result<()> {
        if mps.center() != Some(self.active_site) || mps.n_sites() != self.n_sites {
            return Err(Error::StaleCache(format!(
                "cache is positioned at site {}, mps center is {:?}",
                self.active_site,
                mps.center()
            )));
        }
        Ok(())
    }

    /// Shifts the mps center by one site and grows/shrinks the stacks by one
    /// contraction per sample.
    pub fn move_center(&mut self, mps: &mut Mps, direction: Direction) -> Result<()> {
        self.check(mps)?;
        let old = self.active_site;
        let new = mps.shift_center(direction)?;
        for x in 0..self.left.len() {
            match direction {
                Direction::Right => {
                    let next = self
                        .inputs
                        .contract_left(x, old, self.left[x].last().unwrap(), mps.core(old));
                    self.left[x].push(next);
                    self.right[x].pop();
                }
                Direction::Left => {
                    let next = self
                        .inputs
                        .contract_right(x, old, mps.core(old), self.right[x].last().unwrap());
                    self.right[x].push(next);
                    self.left[x].pop();
                }
            }
        }
        self.active_site = new;
        Ok(())
    }

    fn consistent(&self, sample: usize) -> Result<()> {
        let (l, r) = self.stack_depths(sample);
        if l != self.active_site + 1 || r != self.n_sites - self.active_site {
            return Err(Error::StaleCache(format!(
                "sample {sample}: stack depths ({l}, {r}) do not match active site {}",
                self.active_site
            )));
        }
        Ok(())
    }

    /// `w_x` at the active site, laid out like the center core `(a, s, b)`.
    pub fn reduced_environment(&self, sample: usize) -> Result<Vec<f64>> {
        self.consistent(sample)?;
        let l = self.left[sample].last().unwrap();
        let r = self.right[sample].last().unwrap();
        let phi = self.inputs.site_vector(sample, self.active_site);
        Ok(outer3(l, &phi, r))
    }

    /// All reduced environments, one row of length `D` per sample.
    pub fn environment_matrix(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for x in 0..self.n_samples() {
            out.extend(self.reduced_environment(x)?);
        }
        Ok(out)
    }

    /// `M_x[s] = sum_ab L[a] T[a,s,b] R[b]`: the amplitude's derivative with
    /// respect to the active site's input vector.
    pub fn site_derivative(&self, mps: &Mps, sample: usize) -> Result<Vec<f64>> {
        self.check(mps)?;
        self.consistent(sample)?;
        let core = mps.core(self.active_site);
        let (_, d, _) = dims3(core);
        let l = self.left[sample].last().unwrap();
        let r = self.right[sample].last().unwrap();
        Ok((0..d)
            .map(|s| dot(&contract_basis(l, core, s), r))
            .collect())
    }
}

fn outer3(l: &[f64], phi: &[f64], r: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(l.len() * phi.len() * r.len());
    for &la in l {
        for &ps in phi {
            let f = la * ps;
            w.extend(r.iter().map(|rb| f * rb));
        }
    }
    w
}

/// `w_x` at `site` contracted from scratch, bypassing any cache.
pub fn environment_from_scratch(mps: &Mps, inputs: &SiteInputs, sample: usize, site: usize) -> Vec<f64> {
    let mut l = vec![1.0];
    for i in 0..site {
        l = inputs.contract_left(sample, i, &l, mps.core(i));
    }
    let mut r = vec![1.0];
    for i in (site + 1..mps.n_sites()).rev() {
        r = inputs.contract_right(sample, i, mps.core(i), &r);
    }
    outer3(&l, &inputs.site_vector(sample, site), &r)
}
