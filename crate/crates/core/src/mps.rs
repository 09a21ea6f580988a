//! Open-boundary matrix product states with an explicit orthogonality center.
//!
//! Site cores are rank-3 tensors `(chi_left, d, chi_right)`. When the center is
//! at site `c`, every core left of `c` is a left isometry and every core right
//! of `c` is a right isometry, so the squared norm of the whole state is the
//! squared norm of core `c` alone.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{qr_positive, DenseTensor};

const MAGIC: &[u8; 8] = b"TNBMMPS\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mps {
    site_dim: usize,
    cores: Vec<DenseTensor>,
    center: Option<usize>,
}

/// Largest bond dimension reachable across the cut left of `site` with open
/// boundaries: `min(chi, d^site, d^(n - site))`.
pub fn max_bond(n_sites: usize, site_dim: usize, bond_dim: usize, cut: usize) -> usize {
    let reach = |k: usize| -> usize {
        let mut acc: usize = 1;
        for _ in 0..k {
            acc = acc.saturating_mul(site_dim);
            if acc >= bond_dim {
                return bond_dim;
            }
        }
        acc
    };
    bond_dim.min(reach(cut)).min(reach(n_sites - cut))
}

impl Mps {
    /// Gaussian i.i.d. cores from a seeded generator, brought to center 0 and
    /// normalized.
    pub fn random(n_sites: usize, site_dim: usize, bond_dim: usize, seed: u64) -> Result<Self> {
        if n_sites < 2 || site_dim < 1 || bond_dim < 1 {
            return Err(Error::Dimension(format!(
                "need n_sites >= 2, site_dim >= 1, bond_dim >= 1; got ({n_sites}, {site_dim}, {bond_dim})"
            )));
        }
        if site_dim > u8::MAX as usize + 1 {
            return Err(Error::Dimension(format!("site_dim {site_dim} exceeds 256")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bonds: Vec<usize> = (0..=n_sites)
            .map(|cut| max_bond(n_sites, site_dim, bond_dim, cut))
            .collect();
        let cores = (0..n_sites)
            .map(|i| {
                let shape = vec![bonds[i], site_dim, bonds[i + 1]];
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.sample(StandardNormal)).collect();
                DenseTensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mps = Self::from_cores(cores)?;
        mps.canonicalize_in_place(0)?;
        mps.normalize();
        Ok(mps)
    }

    /// Validates bond matching and boundary conditions. The result has no
    /// orthogonality center.
    pub fn from_cores(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.len() < 2 {
            return Err(Error::Dimension("an mps needs at least two sites".into()));
        }
        if cores.iter().any(|c| c.rank() != 3) {
            return Err(Error::Dimension("every core must be rank 3".into()));
        }
        let site_dim = cores[0].shape()[1];
        if cores.iter().any(|c| c.shape()[1] != site_dim) {
            return Err(Error::Dimension("site dimensions differ between cores".into()));
        }
        if cores[0].shape()[0] != 1 || cores[cores.len() - 1].shape()[2] != 1 {
            return Err(Error::Dimension("boundary bonds must have dimension 1".into()));
        }
        for (i, pair) in cores.windows(2).enumerate() {
            if pair[0].shape()[2] != pair[1].shape()[0] {
                return Err(Error::Dimension(format!(
                    "bond mismatch between sites {i} and {}: {} vs {}",
                    i + 1,
                    pair[0].shape()[2],
                    pair[1].shape()[0]
                )));
            }
        }
        Ok(Self { site_dim, cores, center: None })
    }

    pub fn n_sites(&self) -> usize {
        self.cores.len()
    }

    pub fn site_dim(&self) -> usize {
        self.site_dim
    }

    pub fn center(&self) -> Option<usize> {
        self.center
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn core(&self, site: usize) -> &DenseTensor {
        &self.cores[site]
    }

    /// Bond dimensions at every cut, including the two trivial boundaries.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.cores.iter().map(|c| c.shape()[0]).collect();
        dims.push(1);
        dims
    }

    /// Overwrites the data of one core, keeping its shape. Any core other than
    /// the center breaks the gauge, so the center is cleared in that case.
    pub fn set_core_data(&mut self, site: usize, data: &[f64]) -> Result<()> {
        let core = &mut self.cores[site];
        if data.len() != core.len() {
            return Err(Error::Dimension(format!(
                "core {site} has {} entries, got {}",
                core.len(),
                data.len()
            )));
        }
        core.data_mut().copy_from_slice(data);
        if self.center != Some(site) {
            self.center = None;
        }
        Ok(())
    }

    /// Returns the gauge-equivalent state with its center at `center`.
    pub fn canonicalize(&self, center: usize) -> Result<Self> {
        let mut out = self.clone();
        out.canonicalize_in_place(center)?;
        Ok(out)
    }

    pub fn canonicalize_in_place(&mut self, center: usize) -> Result<()> {
        let n = self.n_sites();
        if center >= n {
            return Err(Error::Dimension(format!("center {center} outside 0..{n}")));
        }
        for site in 0..center {
            self.gauge_right(site);
        }
        for site in (center + 1..n).rev() {
            self.gauge_left(site);
        }
        self.center = Some(center);
        Ok(())
    }

    /// Moves an existing center by one site. Only the two affected cores change.
    pub fn shift_center(&mut self, direction: Direction) -> Result<usize> {
        let n = self.n_sites();
        let c = self
            .center
            .ok_or_else(|| Error::Degenerate("mps has no orthogonality center".into()))?;
        let target = match direction {
            Direction::Right if c + 1 < n => c + 1,
            Direction::Left if c > 0 => c - 1,
            _ => {
                return Err(Error::Boundary { site: c, n_sites: n, direction: direction.name() })
            }
        };
        match direction {
            Direction::Right => self.gauge_right(c),
            Direction::Left => self.gauge_left(c),
        }
        self.center = Some(target);
        Ok(target)
    }

    /// QR of `site` as `(chi_l * d) x chi_r`; keeps Q, pushes R into `site + 1`.
    fn gauge_right(&mut self, site: usize) {
        let (cl, d, cr) = dims3(&self.cores[site]);
        let (q, r) = qr_positive(self.cores[site].to_matrix(cl * d));
        let k = q.ncols();
        self.cores[site] = DenseTensor::from_matrix(&q, vec![cl, d, k]).expect("q shape");
        let (_, d2, cr2) = dims3(&self.cores[site + 1]);
        let next = self.cores[site + 1].to_matrix(cr);
        let merged = r * next;
        self.cores[site + 1] =
            DenseTensor::from_matrix(&merged, vec![k, d2, cr2]).expect("merged shape");
    }

    /// LQ of `site` as `chi_l x (d * chi_r)`; keeps Q, pushes L into `site - 1`.
    fn gauge_left(&mut self, site: usize) {
        let (cl, d, cr) = dims3(&self.cores[site]);
        let m = self.cores[site].to_matrix(cl);
        let (q, r) = qr_positive(m.transpose());
        let k = q.ncols();
        self.cores[site] =
            DenseTensor::from_matrix(&q.transpose(), vec![k, d, cr]).expect("q shape");
        let (cl0, d0, _) = dims3(&self.cores[site - 1]);
        let prev = self.cores[site - 1].to_matrix(cl0 * d0);
        let merged = prev * r.transpose();
        self.cores[site - 1] =
            DenseTensor::from_matrix(&merged, vec![cl0, d0, k]).expect("merged shape");
    }

    /// Squared norm via transfer matrices; does not rely on the gauge.
    pub fn norm_squared(&self) -> f64 {
        let mut env = DMatrix::from_element(1, 1, 1.0);
        for core in &self.cores {
            let (cl, d, cr) = dims3(core);
            let mut next = DMatrix::zeros(cr, cr);
            for s in 0..d {
                let slice = site_slice(core, s, cl, d, cr);
                next += slice.transpose() * &env * &slice;
            }
            env = next;
        }
        env[(0, 0)]
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Rescales to unit norm. With a center only that core is touched.
    pub fn normalize(&mut self) {
        let nrm = match self.center {
            Some(c) => self.cores[c].norm(),
            None => self.norm(),
        };
        if nrm > 0.0 {
            let site = self.center.unwrap_or(0);
            self.cores[site].data_mut().iter_mut().for_each(|v| *v /= nrm);
        }
    }

    fn check_string(&self, x: &[u8]) -> Result<()> {
        if x.len() != self.n_sites() {
            return Err(Error::Dimension(format!(
                "bitstring length {} does not match {} sites",
                x.len(),
                self.n_sites()
            )));
        }
        if let Some(&bad) = x.iter().find(|&&s| s as usize >= self.site_dim) {
            return Err(Error::Dimension(format!(
                "symbol {bad} out of range for site dimension {}",
                self.site_dim
            )));
        }
        Ok(())
    }

    /// `<x|psi>` by a left-to-right matrix-chain contraction.
    pub fn amplitude(&self, x: &[u8]) -> Result<f64> {
        self.check_string(x)?;
        let mut left = vec![1.0];
        for (core, &s) in self.cores.iter().zip(x) {
            left = contract_basis(&left, core, s as usize);
        }
        Ok(left[0])
    }

    /// Amplitude with an arbitrary real vector fed to every site index.
    pub fn amplitude_features(&self, features: &[Vec<f64>]) -> Result<f64> {
        if features.len() != self.n_sites() || features.iter().any(|f| f.len() != self.site_dim) {
            return Err(Error::Dimension("feature vectors do not match the mps".into()));
        }
        let mut left = vec![1.0];
        for (core, phi) in self.cores.iter().zip(features) {
            left = contract_features(&left, core, phi);
        }
        Ok(left[0])
    }

    /// Born-rule probability, normalized by the squared norm.
    pub fn probability(&self, x: &[u8]) -> Result<f64> {
        let a = self.amplitude(x)?;
        let nsq = match self.center {
            Some(c) => {
                let n = self.cores[c].norm();
                n * n
            }
            None => self.norm_squared(),
        };
        Ok(a * a / nsq)
    }

    /// Draws one string from the Born distribution by conditional sampling
    /// site by site from a center-0 gauge.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let owned;
        let mps = if self.center == Some(0) {
            self
        } else {
            owned = self.canonicalize(0).expect("valid center");
            &owned
        };
        let mut left = vec![1.0];
        let mut out = Vec::with_capacity(mps.n_sites());
        for core in &mps.cores {
            let (_, d, _) = dims3(core);
            let candidates: Vec<Vec<f64>> = (0..d).map(|s| contract_basis(&left, core, s)).collect();
            let weights: Vec<f64> = candidates.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = d - 1;
            for (s, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = s;
                    break;
                }
                u -= w;
            }
            let scale = weights[pick].sqrt();
            left = candidates[pick].iter().map(|v| v / scale).collect();
            out.push(pick as u8);
        }
        out
    }

    /// Max-norm deviation from identity of the isometry condition at `site`:
    /// left-isometric for sites before the center, right-isometric after it.
    pub fn isometry_defect(&self, site: usize, direction: Direction) -> f64 {
        let core = &self.cores[site];
        let (cl, d, cr) = dims3(core);
        let (m, k) = match direction {
            Direction::Left => (core.to_matrix(cl * d), cr),
            Direction::Right => (core.to_matrix(cl).transpose(), cl),
        };
        (m.transpose() * m - DMatrix::identity(k, k)).amax()
    }

    /// Largest isometry defect over all non-center cores.
    pub fn gauge_defect(&self) -> Option<f64> {
        let c = self.center?;
        let left = (0..c).map(|i| self.isometry_defect(i, Direction::Left));
        let right = (c + 1..self.n_sites()).map(|i| self.isometry_defect(i, Direction::Right));
        Some(left.chain(right).fold(0.0, f64::max))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_sites() as u32).to_le_bytes())?;
        w.write_all(&(self.site_dim as u32).to_le_bytes())?;
        let center = self.center.map_or(-1, |c| c as i64);
        w.write_all(&center.to_le_bytes())?;
        for core in &self.cores {
            for &e in core.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
        }
        for core in &self.cores {
            for v in core.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteCursor { buf: &buf, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad mps magic".into() });
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported mps format version {version}"),
            });
        }
        let n = cur.u32()? as usize;
        let _site_dim = cur.u32()?;
        let center = cur.i64()?;
        let shapes = (0..n)
            .map(|_| Ok(vec![cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize]))
            .collect::<Result<Vec<_>>>()?;
        let cores = shapes
            .into_iter()
            .map(|shape| {
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                DenseTensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != buf.len() {
            return Err(Error::Format { offset: cur.pos, message: "trailing bytes".into() });
        }
        let mut mps = Self::from_cores(cores)?;
        if center >= 0 {
            if center as usize >= mps.n_sites() {
                return Err(Error::Format { offset: 20, message: "center out of range".into() });
            }
            mps.center = Some(center as usize);
        }
        Ok(mps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteCursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("expected {n} more bytes, file has {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn dims3(t: &DenseTensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn site_slice(core: &DenseTensor, s: usize, cl: usize, d: usize, cr: usize) -> DMatrix<f64> {
    let data = core.data();
    DMatrix::from_fn(cl, cr, |a, b| data[(a * d + s) * cr + b])
}

/// `left^T A[:, s, :]`
pub(crate) fn contract_basis(left: &[f64], core: &DenseTensor, s: usize) -> Vec<f64> {
    let (cl, d, cr) = dims3(core);
    debug_assert_eq!(left.len(), cl);
    let data = core.data();
    let mut out = vec![0.0; cr];
    for (a, &l) in left.iter().enumerate() {
        let row = &data[(a * d + s) * cr..(a * d + s + 1) * cr];
        for (o, v) in out.iter_mut().zip(row) {
            *o += l * v;
        }
    }
    out
}

/// `A[:, s, :] right`
pub(crate) fn contract_basis_right(core: &DenseTensor, s: usize, right: &[f64]) -> Vec<f64> {
    let (cl, d, cr) = dims3(core);
    debug_assert_eq!(right.len(), cr);
    let data = core.data();
    (0..cl)
        .map(|a| crate::tensor::dot(&data[(a * d + s) * cr..(a * d + s + 1) * cr], right))
        .collect()
}

/// `sum_s phi_s left^T A[:, s, :]`
pub(crate) fn contract_features(left: &[f64], core: &DenseTensor, phi: &[f64]) -> Vec<f64> {
    let (_, d, cr) = dims3(core);
    let mut out = vec![0.0; cr];
    for s in 0..d {
        let part = contract_basis(left, core, s);
        crate::tensor::axpy(phi[s], &part, &mut out);
    }
    out
}

pub(crate) fn contract_features_right(core: &DenseTensor, phi: &[f64], right: &[f64]) -> Vec<f64> {
    let (cl, d, _) = dims3(core);
    let mut out = vec![0.0; cl];
    for s in 0..d {
        let part = contract_basis_right(core, s, right);
        crate::tensor::axpy(phi[s], &part, &mut out);
    }
    out
}

/// All `d^n` strings in lexicographic order, for brute-force checks.
pub fn enumerate_strings(n_sites: usize, site_dim: usize) -> impl Iterator<Item = Vec<u8>> {
    let total = (site_dim as u64).pow(n_sites as u32);
    (0..total).map(move |mut k| {
        let mut x = vec![0u8; n_sites];
        for slot in x.iter_mut().rev() {
            *slot = (k % site_dim as u64) as u8;
            k /= site_dim as u64;
        }
        x
    })
}
