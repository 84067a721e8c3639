//! MPS Born machine: P(x) = Psi(x)^2 / Z with Psi parameterized by a
//! chain of rank-3 cores. Supports exact evaluation, canonical gauge
//! fixing, exact ancestral sampling and per-sample NLL gradients.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::encoding::{EncodedRecord, EncodingError, Schema};
use crate::tensor::{svd_truncate, Tensor, TensorError};

pub const ARTIFACT_MAGIC: &[u8; 4] = b"MPSD";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("record index {index} out of range for position {position} (dim {dim})")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        dim: usize,
    },
    #[error("record length {actual} does not match chain length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("configuration has zero amplitude: impossible event under this model")]
    ZeroAmplitude,
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient shapes do not match model cores")]
    ShapeMismatch,
    #[error("canonical center {center} out of range for {n} cores")]
    CenterOutOfRange { center: usize, n: usize },
    #[error("model artifact is corrupt: {0}")]
    CorruptArtifact(String),
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One rank-3 core, shape (left_bond, phys_dim, right_bond).
#[derive(Debug, Clone)]
pub struct MpsCore {
    pub tensor: Tensor,
}

impl MpsCore {
    pub fn left_bond(&self) -> usize {
        self.tensor.shape()[0]
    }
    pub fn phys_dim(&self) -> usize {
        self.tensor.shape()[1]
    }
    pub fn right_bond(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Copy out the (left_bond x right_bond) matrix for phys index `s`.
    fn slice(&self, s: usize) -> Vec<f64> {
        let (l, d, r) = (self.left_bond(), self.phys_dim(), self.right_bond());
        let mut out = vec![0.0; l * r];
        let data = self.tensor.data();
        for a in 0..l {
            let src = (a * d + s) * r;
            out[a * r..(a + 1) * r].copy_from_slice(&data[src..src + r]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MpsModel {
    cores: Vec<MpsCore>,
    schema: Schema,
    canonical_center: Option<usize>,
    max_bond: usize,
}

/// Per-core gradient tensors with the same shapes as the model cores.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub cores: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &MpsModel) -> GradientSet {
        GradientSet {
            cores: model
                .cores
                .iter()
                .map(|c| Tensor::zeros(c.tensor.shape().to_vec()))
                .collect(),
        }
    }

    /// Flat l2 norm across all cores.
    pub fn norm(&self) -> f64 {
        self.cores
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for t in &mut self.cores {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) {
        for (a, b) in self.cores.iter_mut().zip(&other.cores) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn num_components(&self) -> usize {
        self.cores.iter().map(|t| t.len()).sum()
    }
}

// l x m times m x n row-major multiply.
fn matmul(a: &[f64], b: &[f64], l: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * n];
    for i in 0..l {
        for p in 0..m {
            let av = a[i * m + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a^T (m x l) times b (m x n): out l x n.
fn mat_tmul(a: &[f64], b: &[f64], m: usize, l: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * n];
    for p in 0..m {
        for i in 0..l {
            let av = a[p * l + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl MpsModel {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }
    pub fn cores(&self) -> &[MpsCore] {
        &self.cores
    }
    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }
    pub fn max_bond(&self) -> usize {
        self.max_bond
    }
    pub fn canonical_center(&self) -> Option<usize> {
        self.canonical_center
    }
    pub fn num_parameters(&self) -> usize {
        self.cores.iter().map(|c| c.tensor.len()).sum()
    }

    /// Builds a model from explicit core tensors. Bonds must chain with
    /// outer bonds of size 1; no canonical form is assumed.
    pub fn from_cores(
        schema: Schema,
        tensors: Vec<Tensor>,
        max_bond: usize,
    ) -> Result<MpsModel, MpsError> {
        let dims = schema.phys_dims();
        if tensors.len() != dims.len() {
            return Err(MpsError::ShapeMismatch);
        }
        let mut bond = 1usize;
        for (t, &d) in tensors.iter().zip(&dims) {
            let shape = t.shape();
            if shape.len() != 3 || shape[0] != bond || shape[1] != d {
                return Err(MpsError::ShapeMismatch);
            }
            bond = shape[2];
        }
        if bond != 1 {
            return Err(MpsError::ShapeMismatch);
        }
        Ok(MpsModel {
            cores: tensors.into_iter().map(|tensor| MpsCore { tensor }).collect(),
            schema,
            canonical_center: None,
            max_bond,
        })
    }

    /// Random initialization, canonicalized to center 0 with Z = 1.
    pub fn init(schema: Schema, max_bond: usize, seed: u64) -> MpsModel {
        let dims = schema.phys_dims();
        let n = dims.len();
        // Bond between position i and i+1, capped by the enumeration
        // count on either side so product states stay exact.
        let mut bonds = vec![1usize; n + 1];
        for i in 0..n.saturating_sub(1) {
            let left: usize = dims[..=i]
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .unwrap_or(usize::MAX);
            let right: usize = dims[i + 1..]
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .unwrap_or(usize::MAX);
            bonds[i + 1] = max_bond.min(left).min(right);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = (0..n)
            .map(|i| {
                let (l, d, r) = (bonds[i], dims[i], bonds[i + 1]);
                // Positive-mean entries start the chain near a uniform
                // product state: no sign cancellations, so every record
                // has non-negligible amplitude and the 1/psi factor in
                // the NLL gradient stays bounded early in training.
                let spread = 1.0 / ((d * r) as f64).sqrt();
                let dist = Normal::new(spread, 0.2 * spread).unwrap();
                let data: Vec<f64> = (0..l * d * r).map(|_| dist.sample(&mut rng)).collect();
                MpsCore {
                    tensor: Tensor::from_vec(vec![l, d, r], data).unwrap(),
                }
            })
            .collect();
        let model = MpsModel {
            cores,
            schema,
            canonical_center: None,
            max_bond,
        };
        let mut model = model.canonicalize(0).expect("canonicalize fresh model");
        model.normalize_center();
        model
    }

    fn check_record(&self, x: &EncodedRecord) -> Result<(), MpsError> {
        if x.indices.len() != self.cores.len() {
            return Err(MpsError::LengthMismatch {
                expected: self.cores.len(),
                actual: x.indices.len(),
            });
        }
        for (pos, (&idx, core)) in x.indices.iter().zip(&self.cores).enumerate() {
            if idx >= core.phys_dim() {
                return Err(MpsError::IndexOutOfRange {
                    position: pos,
                    index: idx,
                    dim: core.phys_dim(),
                });
            }
        }
        Ok(())
    }

    /// Psi(x): left-to-right contraction of the selected core matrices.
    pub fn amplitude(&self, x: &EncodedRecord) -> Result<f64, MpsError> {
        self.check_record(x)?;
        let mut v = vec![1.0];
        for (core, &s) in self.cores.iter().zip(&x.indices) {
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let data = core.tensor.data();
            let mut next = vec![0.0; r];
            for a in 0..l {
                let va = v[a];
                if va == 0.0 {
                    continue;
                }
                let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                for (o, &m) in next.iter_mut().zip(row) {
                    *o += va * m;
                }
            }
            v = next;
        }
        Ok(v[0])
    }

    /// Z = sum_x Psi(x)^2, via the transfer-matrix chain.
    pub fn partition(&self) -> f64 {
        let mut env = vec![1.0]; // 1x1
        let mut dim = 1usize;
        for core in &self.cores {
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            debug_assert_eq!(l, dim);
            let mut next = vec![0.0; r * r];
            for s in 0..d {
                let a_s = core.slice(s);
                let t1 = matmul(&env, &a_s, l, l, r);
                let t2 = mat_tmul(&a_s, &t1, l, r, r);
                for (o, v) in next.iter_mut().zip(&t2) {
                    *o += v;
                }
            }
            env = next;
            dim = r;
        }
        env[0]
    }

    /// log P(x) = 2 ln |Psi(x)| - ln Z.
    pub fn log_prob(&self, x: &EncodedRecord) -> Result<f64, MpsError> {
        let psi = self.amplitude(x)?;
        if psi == 0.0 {
            return Err(MpsError::ZeroAmplitude);
        }
        Ok(2.0 * psi.abs().ln() - self.partition().ln())
    }

    /// Gauge-fix so cores left of `center` are left-orthonormal and cores
    /// right of it are right-orthonormal. Probabilities are unchanged.
    pub fn canonicalize(&self, center: usize) -> Result<MpsModel, MpsError> {
        let n = self.cores.len();
        if center >= n {
            return Err(MpsError::CenterOutOfRange { center, n });
        }
        let mut cores: Vec<Tensor> = self.cores.iter().map(|c| c.tensor.clone()).collect();
        // Left-to-right QR-like sweep via SVD.
        for i in 0..center {
            let (l, d, r) = dims3(&cores[i]);
            let m = cores[i].reshape(vec![l * d, r])?;
            let svd = svd_truncate(&m, self.max_bond, 0.0)?;
            let k = svd.s.len();
            cores[i] = svd.u.reshape(vec![l, d, k])?;
            // carry = diag(s) * vt, then absorb into the next core.
            let mut carry = svd.vt.data().to_vec();
            for row in 0..k {
                for col in 0..r {
                    carry[row * r + col] *= svd.s[row];
                }
            }
            let (l2, d2, r2) = dims3(&cores[i + 1]);
            debug_assert_eq!(l2, r);
            let merged = matmul(&carry, cores[i + 1].data(), k, r, d2 * r2);
            cores[i + 1] = Tensor::from_vec(vec![k, d2, r2], merged)?;
        }
        // Right-to-left sweep.
        for i in (center + 1..n).rev() {
            let (l, d, r) = dims3(&cores[i]);
            let m = cores[i].reshape(vec![l, d * r])?;
            let svd = svd_truncate(&m, self.max_bond, 0.0)?;
            let k = svd.s.len();
            cores[i] = svd.vt.reshape(vec![k, d, r])?;
            // carry = u * diag(s), absorbed into the previous core.
            let mut carry = svd.u.data().to_vec();
            for row in 0..l {
                for col in 0..k {
                    carry[row * k + col] *= svd.s[col];
                }
            }
            let (l0, d0, r0) = dims3(&cores[i - 1]);
            debug_assert_eq!(r0, l);
            let merged = matmul(cores[i - 1].data(), &carry, l0 * d0, l, k);
            cores[i - 1] = Tensor::from_vec(vec![l0, d0, k], merged)?;
        }
        Ok(MpsModel {
            cores: cores.into_iter().map(|tensor| MpsCore { tensor }).collect(),
            schema: self.schema.clone(),
            canonical_center: Some(center),
            max_bond: self.max_bond,
        })
    }

    /// Scale the center core so Z = 1. Requires a canonical center.
    pub fn normalize_center(&mut self) {
        let center = self
            .canonical_center
            .expect("normalize_center requires canonical form");
        let norm = self.cores[center].tensor.frobenius_norm();
        if norm > 0.0 {
            let scaled = self.cores[center].tensor.scale(1.0 / norm);
            self.cores[center].tensor = scaled;
        }
    }

    /// Move the canonical center to `to`, one single-SVD step at a time.
    pub fn shift_center(&mut self, to: usize) -> Result<(), MpsError> {
        let n = self.cores.len();
        if to >= n {
            return Err(MpsError::CenterOutOfRange { center: to, n });
        }
        let Some(mut c) = self.canonical_center else {
            let mut fresh = self.canonicalize(to)?;
            std::mem::swap(self, &mut fresh);
            return Ok(());
        };
        while c < to {
            // Split the center left-orthonormal; carry = s * vt moves right.
            let (l, d, r) = dims3(&self.cores[c].tensor);
            let m = self.cores[c].tensor.reshape(vec![l * d, r])?;
            let svd = svd_truncate(&m, self.max_bond, 0.0)?;
            let k = svd.s.len();
            self.cores[c].tensor = svd.u.reshape(vec![l, d, k])?;
            let mut carry = svd.vt.data().to_vec();
            for row in 0..k {
                for col in 0..r {
                    carry[row * r + col] *= svd.s[row];
                }
            }
            let (l2, d2, r2) = dims3(&self.cores[c + 1].tensor);
            debug_assert_eq!(l2, r);
            let merged = matmul(&carry, self.cores[c + 1].tensor.data(), k, r, d2 * r2);
            self.cores[c + 1].tensor = Tensor::from_vec(vec![k, d2, r2], merged)?;
            c += 1;
        }
        while c > to {
            // Split the center right-orthonormal; carry = u * s moves left.
            let (l, d, r) = dims3(&self.cores[c].tensor);
            let m = self.cores[c].tensor.reshape(vec![l, d * r])?;
            let svd = svd_truncate(&m, self.max_bond, 0.0)?;
            let k = svd.s.len();
            self.cores[c].tensor = svd.vt.reshape(vec![k, d, r])?;
            let mut carry = svd.u.data().to_vec();
            for row in 0..l {
                for col in 0..k {
                    carry[row * k + col] *= svd.s[col];
                }
            }
            let (l0, d0, r0) = dims3(&self.cores[c - 1].tensor);
            debug_assert_eq!(r0, l);
            let merged = matmul(self.cores[c - 1].tensor.data(), &carry, l0 * d0, l, k);
            self.cores[c - 1].tensor = Tensor::from_vec(vec![l0, d0, k], merged)?;
            c -= 1;
        }
        self.canonical_center = Some(to);
        Ok(())
    }

    /// Prefix row vector (cores before `site`) and suffix column vector
    /// (cores after `site`) for one record, plus the full amplitude.
    fn site_envs(&self, x: &EncodedRecord, site: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let mut v = vec![1.0];
        for (core, &s) in self.cores[..site].iter().zip(&x.indices) {
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let data = core.tensor.data();
            let mut next = vec![0.0; r];
            for a in 0..l {
                let va = v[a];
                if va == 0.0 {
                    continue;
                }
                let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                for (o, &m) in next.iter_mut().zip(row) {
                    *o += va * m;
                }
            }
            v = next;
        }
        let mut w = vec![1.0];
        for (core, &s) in self.cores[site + 1..]
            .iter()
            .zip(&x.indices[site + 1..])
            .rev()
        {
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let data = core.tensor.data();
            let mut next = vec![0.0; l];
            for a in 0..l {
                let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                let mut acc = 0.0;
                for (m, &wb) in row.iter().zip(&w) {
                    acc += m * wb;
                }
                next[a] = acc;
            }
            w = next;
        }
        // psi = prefix * A_site[:, x_site, :] * suffix.
        let core = &self.cores[site];
        let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
        let s = x.indices[site];
        let data = core.tensor.data();
        let mut psi = 0.0;
        for a in 0..l {
            let row = &data[(a * d + s) * r..(a * d + s) * r + r];
            for (m, &wb) in row.iter().zip(&w) {
                psi += v[a] * m * wb;
            }
        }
        (v, w, psi)
    }

    /// Sum of per-sample NLL gradients with respect to the canonical
    /// center core only, each clipped to l2 norm `clip` when given.
    ///
    /// In center gauge Z = |A_c|^2, so the per-sample gradient is
    /// 2 A_c / Z - (2/psi) * outer(prefix, suffix) at the record's slice,
    /// and its squared norm reduces to (4/psi^2)|p|^2|s|^2 - 4/Z.
    ///
    /// Returns (gradient sum for the center core, per-sample pre-clip
    /// norms).
    pub fn site_gradient_sum(
        &self,
        batch: &[EncodedRecord],
        clip: Option<f64>,
    ) -> Result<(Tensor, Vec<f64>), MpsError> {
        if batch.is_empty() {
            return Err(MpsError::EmptyBatch);
        }
        let Some(site) = self.canonical_center else {
            return Err(MpsError::CenterOutOfRange {
                center: usize::MAX,
                n: self.cores.len(),
            });
        };
        for x in batch {
            self.check_record(x)?;
        }
        let core = &self.cores[site];
        let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
        let z = core.tensor.data().iter().map(|v| v * v).sum::<f64>();

        let envs: Vec<(Vec<f64>, Vec<f64>, f64)> = batch
            .par_iter()
            .map(|x| self.site_envs(x, site))
            .collect();

        let mut sum = vec![0.0; l * d * r];
        let mut alpha_total = 0.0;
        let mut pre_norms = Vec::with_capacity(batch.len());
        for (x, (prefix, suffix, psi)) in batch.iter().zip(&envs) {
            if *psi == 0.0 {
                return Err(MpsError::ZeroAmplitude);
            }
            let pn: f64 = prefix.iter().map(|v| v * v).sum();
            let sn: f64 = suffix.iter().map(|v| v * v).sum();
            let norm_sq = 4.0 * pn * sn / (psi * psi) - 4.0 / z;
            let norm = norm_sq.max(0.0).sqrt();
            pre_norms.push(norm);
            let alpha = match clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            alpha_total += alpha;
            let coeff = -2.0 * alpha / psi;
            let s = x.indices[site];
            for (a, &pa) in prefix.iter().enumerate() {
                let row = &mut sum[(a * d + s) * r..(a * d + s) * r + r];
                for (slot, &sb) in row.iter_mut().zip(suffix) {
                    *slot += coeff * pa * sb;
                }
            }
        }
        // Shared Z-term: 2 A_c / Z per sample, weighted by its clip factor.
        let z_coeff = 2.0 * alpha_total / z;
        for (slot, &a) in sum.iter_mut().zip(core.tensor.data()) {
            *slot += z_coeff * a;
        }
        Ok((Tensor::from_vec(vec![l, d, r], sum)?, pre_norms))
    }

    /// SGD step on the canonical center core only: A_c -= lr * grad,
    /// then rescale so Z = 1. Canonical form is preserved.
    pub fn apply_site_gradient(
        &mut self,
        grad: &Tensor,
        learning_rate: f64,
    ) -> Result<(), MpsError> {
        let Some(site) = self.canonical_center else {
            return Err(MpsError::CenterOutOfRange {
                center: usize::MAX,
                n: self.cores.len(),
            });
        };
        if grad.shape() != self.cores[site].tensor.shape() {
            return Err(MpsError::ShapeMismatch);
        }
        let data: Vec<f64> = self.cores[site]
            .tensor
            .data()
            .iter()
            .zip(grad.data())
            .map(|(c, g)| c - learning_rate * g)
            .collect();
        self.cores[site].tensor = Tensor::from_vec(grad.shape().to_vec(), data)?;
        self.normalize_center();
        Ok(())
    }

    /// Right transfer environments: env[i] covers cores i+1..n and has
    /// dimension right_bond(i) x right_bond(i). env[n-1] is the scalar 1.
    fn right_transfer_envs(&self) -> Vec<Vec<f64>> {
        let n = self.cores.len();
        let mut envs = vec![Vec::new(); n];
        let mut env = vec![1.0];
        for i in (0..n).rev() {
            envs[i] = env.clone();
            let core = &self.cores[i];
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let mut next = vec![0.0; l * l];
            for s in 0..d {
                let a_s = core.slice(s);
                // a_s (l x r) * env (r x r) * a_s^T  -> l x l
                let t1 = matmul(&a_s, &env, l, r, r);
                for row in 0..l {
                    for col in 0..l {
                        let mut acc = 0.0;
                        for b in 0..r {
                            acc += t1[row * r + b] * a_s[col * r + b];
                        }
                        next[row * l + col] += acc;
                    }
                }
            }
            env = next;
        }
        envs
    }

    /// Left transfer environments: env[i] covers cores 0..i and has
    /// dimension left_bond(i) x left_bond(i).
    fn left_transfer_envs(&self) -> Vec<Vec<f64>> {
        let n = self.cores.len();
        let mut envs = vec![Vec::new(); n];
        let mut env = vec![1.0];
        for i in 0..n {
            envs[i] = env.clone();
            let core = &self.cores[i];
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let mut next = vec![0.0; r * r];
            for s in 0..d {
                let a_s = core.slice(s);
                let t1 = matmul(&env, &a_s, l, l, r);
                let t2 = mat_tmul(&a_s, &t1, l, r, r);
                for (o, v) in next.iter_mut().zip(&t2) {
                    *o += v;
                }
            }
            env = next;
        }
        envs
    }

    /// Exact ancestral sampling: draw each position from its conditional
    /// given everything to the left, using cached right environments.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<EncodedRecord> {
        let right_envs = self.right_transfer_envs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = vec![1.0];
            let mut indices = Vec::with_capacity(self.cores.len());
            for (i, core) in self.cores.iter().enumerate() {
                let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
                let env = &right_envs[i];
                let mut weights = vec![0.0; d];
                let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(d);
                for s in 0..d {
                    let data = core.tensor.data();
                    let mut w = vec![0.0; r];
                    for a in 0..l {
                        let va = v[a];
                        if va == 0.0 {
                            continue;
                        }
                        let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                        for (o, &m) in w.iter_mut().zip(row) {
                            *o += va * m;
                        }
                    }
                    // w^T env w
                    let mut p = 0.0;
                    for row in 0..r {
                        let mut acc = 0.0;
                        for col in 0..r {
                            acc += env[row * r + col] * w[col];
                        }
                        p += w[row] * acc;
                    }
                    weights[s] = p.max(0.0);
                    candidates.push(w);
                }
                let total: f64 = weights.iter().sum();
                let s = if total <= 0.0 {
                    0
                } else {
                    let mut u = rng.gen::<f64>() * total;
                    let mut chosen = d - 1;
                    for (s, &w) in weights.iter().enumerate() {
                        if u < w {
                            chosen = s;
                            break;
                        }
                        u -= w;
                    }
                    chosen
                };
                indices.push(s);
                v = candidates.swap_remove(s);
                // Rescale to avoid underflow on long chains; conditionals
                // are invariant under scaling of the prefix vector.
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
            }
            out.push(EncodedRecord { indices });
        }
        out
    }

    /// Gradient of -ln Z scaled term: (1/Z) dZ/dA for every core, i.e.
    /// the shared Z-side contribution to every per-sample NLL gradient.
    pub fn z_gradient(&self) -> GradientSet {
        let left = self.left_transfer_envs();
        let right = self.right_transfer_envs();
        let z = self.partition();
        let cores = self
            .cores
            .iter()
            .enumerate()
            .map(|(i, core)| {
                let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
                let mut grad = vec![0.0; l * d * r];
                for s in 0..d {
                    let a_s = core.slice(s);
                    // left[i] (l x l) * a_s (l x r) * right[i] (r x r)
                    let t1 = matmul(&left[i], &a_s, l, l, r);
                    let t2 = matmul(&t1, &right[i], l, r, r);
                    for a in 0..l {
                        for b in 0..r {
                            grad[(a * d + s) * r + b] = 2.0 / z * t2[a * r + b];
                        }
                    }
                }
                Tensor::from_vec(vec![l, d, r], grad).unwrap()
            })
            .collect();
        GradientSet { cores }
    }

    /// Per-sample amplitude environments: prefix vectors, suffix vectors
    /// and the amplitude itself.
    fn amplitude_envs(&self, x: &EncodedRecord) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64), MpsError> {
        self.check_record(x)?;
        let n = self.cores.len();
        let mut prefix: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut v = vec![1.0];
        for (core, &s) in self.cores.iter().zip(&x.indices) {
            prefix.push(v.clone());
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let data = core.tensor.data();
            let mut next = vec![0.0; r];
            for a in 0..l {
                let va = v[a];
                if va == 0.0 {
                    continue;
                }
                let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                for (o, &m) in next.iter_mut().zip(row) {
                    *o += va * m;
                }
            }
            v = next;
        }
        let psi = v[0];
        let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut w = vec![1.0];
        for i in (0..n).rev() {
            suffix[i] = w.clone();
            let core = &self.cores[i];
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            let s = x.indices[i];
            let data = core.tensor.data();
            let mut next = vec![0.0; l];
            for a in 0..l {
                let row = &data[(a * d + s) * r..(a * d + s) * r + r];
                let mut acc = 0.0;
                for (m, &wb) in row.iter().zip(&w) {
                    acc += m * wb;
                }
                next[a] = acc;
            }
            w = next;
        }
        Ok((prefix, suffix, psi))
    }

    /// Exact per-sample gradients of -log P(x) with respect to every core.
    /// The Z-side term is computed once and shared across the batch.
    pub fn nll_gradient(&self, batch: &[EncodedRecord]) -> Result<Vec<GradientSet>, MpsError> {
        if batch.is_empty() {
            return Err(MpsError::EmptyBatch);
        }
        let z_grad = self.z_gradient();
        batch
            .par_iter()
            .map(|x| {
                let (prefix, suffix, psi) = self.amplitude_envs(x)?;
                if psi == 0.0 {
                    return Err(MpsError::ZeroAmplitude);
                }
                let mut g = z_grad.clone();
                let coeff = -2.0 / psi;
                for (i, core) in self.cores.iter().enumerate() {
                    let (_, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
                    let s = x.indices[i];
                    let data = g.cores[i].data_mut();
                    for (a, &pa) in prefix[i].iter().enumerate() {
                        let row = &mut data[(a * d + s) * r..(a * d + s) * r + r];
                        for (slot, &sb) in row.iter_mut().zip(&suffix[i]) {
                            *slot += coeff * pa * sb;
                        }
                    }
                }
                Ok(g)
            })
            .collect()
    }

    /// Sum of per-sample NLL gradients over `batch`, each clipped to l2
    /// norm `clip` when given. Algebraically identical to clipping the
    /// dense per-sample gradients, but never materializes them.
    ///
    /// Returns (gradient sum, per-sample pre-clip norms).
    pub fn clipped_gradient_sum(
        &self,
        batch: &[EncodedRecord],
        clip: Option<f64>,
    ) -> Result<(GradientSet, Vec<f64>), MpsError> {
        if batch.is_empty() {
            return Err(MpsError::EmptyBatch);
        }
        let z_grad = self.z_gradient();
        let z_norm_sq: f64 = z_grad
            .cores
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();

        let envs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> = batch
            .par_iter()
            .map(|x| self.amplitude_envs(x))
            .collect::<Result<_, _>>()?;

        let mut sum = GradientSet::zeros_like(self);
        let mut alpha_total = 0.0;
        let mut pre_norms = Vec::with_capacity(batch.len());
        for (x, (prefix, suffix, psi)) in batch.iter().zip(&envs) {
            if *psi == 0.0 {
                return Err(MpsError::ZeroAmplitude);
            }
            let coeff = -2.0 / psi;
            // ||g||^2 = ||Gz||^2 + 2 <S, Gz> + ||S||^2, with S the sparse
            // per-sample part (one phys slice per core).
            let mut cross = 0.0;
            let mut sparse_sq = 0.0;
            for (i, core) in self.cores.iter().enumerate() {
                let (_, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
                let s = x.indices[i];
                let zdata = z_grad.cores[i].data();
                let mut dot = 0.0;
                for (a, &pa) in prefix[i].iter().enumerate() {
                    let row = &zdata[(a * d + s) * r..(a * d + s) * r + r];
                    for (&zv, &sb) in row.iter().zip(&suffix[i]) {
                        dot += zv * pa * sb;
                    }
                }
                cross += coeff * dot;
                let pn: f64 = prefix[i].iter().map(|v| v * v).sum();
                let sn: f64 = suffix[i].iter().map(|v| v * v).sum();
                sparse_sq += coeff * coeff * pn * sn;
            }
            let norm = (z_norm_sq + 2.0 * cross + sparse_sq).max(0.0).sqrt();
            pre_norms.push(norm);
            let alpha = match clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            alpha_total += alpha;
            let scaled = alpha * coeff;
            for (i, core) in self.cores.iter().enumerate() {
                let (_, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
                let s = x.indices[i];
                let data = sum.cores[i].data_mut();
                for (a, &pa) in prefix[i].iter().enumerate() {
                    let row = &mut data[(a * d + s) * r..(a * d + s) * r + r];
                    for (slot, &sb) in row.iter_mut().zip(&suffix[i]) {
                        *slot += scaled * pa * sb;
                    }
                }
            }
        }
        sum.add_scaled(&z_grad, alpha_total);
        Ok((sum, pre_norms))
    }

    /// SGD step: core -= learning_rate * gradient, then re-canonicalize
    /// to center 0 and rescale so Z = 1.
    pub fn apply_gradient(&self, g: &GradientSet, learning_rate: f64) -> Result<MpsModel, MpsError> {
        if g.cores.len() != self.cores.len()
            || g.cores
                .iter()
                .zip(&self.cores)
                .any(|(gt, c)| gt.shape() != c.tensor.shape())
        {
            return Err(MpsError::ShapeMismatch);
        }
        let cores = self
            .cores
            .iter()
            .zip(&g.cores)
            .map(|(core, grad)| {
                let data = core
                    .tensor
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(c, gv)| c - learning_rate * gv)
                    .collect();
                MpsCore {
                    tensor: Tensor::from_vec(core.tensor.shape().to_vec(), data).unwrap(),
                }
            })
            .collect();
        let stepped = MpsModel {
            cores,
            schema: self.schema.clone(),
            canonical_center: None,
            max_bond: self.max_bond,
        };
        let mut out = stepped.canonicalize(0)?;
        out.normalize_center();
        Ok(out)
    }

    /// Max deviation from the canonical-form orthonormality conditions.
    pub fn canonical_defect(&self) -> f64 {
        let Some(center) = self.canonical_center else {
            return f64::INFINITY;
        };
        let mut worst: f64 = 0.0;
        for (i, core) in self.cores.iter().enumerate() {
            let (l, d, r) = (core.left_bond(), core.phys_dim(), core.right_bond());
            if i < center {
                // sum_s A_s^T A_s = I
                let mut gram = vec![0.0; r * r];
                for s in 0..d {
                    let a_s = core.slice(s);
                    let g = mat_tmul(&a_s, &a_s, l, r, r);
                    for (o, v) in gram.iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                worst = worst.max(identity_defect(&gram, r));
            } else if i > center {
                // sum_s A_s A_s^T = I
                let mut gram = vec![0.0; l * l];
                for s in 0..d {
                    let a_s = core.slice(s);
                    for row in 0..l {
                        for col in 0..l {
                            let mut acc = 0.0;
                            for b in 0..r {
                                acc += a_s[row * r + b] * a_s[col * r + b];
                            }
                            gram[row * l + col] += acc;
                        }
                    }
                }
                worst = worst.max(identity_defect(&gram, l));
            }
        }
        worst
    }

    pub fn save(&self, path: &Path) -> Result<(), MpsError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(ARTIFACT_MAGIC);
        buf.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        let schema_json = self
            .schema
            .to_json()
            .map_err(|e| MpsError::CorruptArtifact(e.to_string()))?;
        buf.extend_from_slice(&(schema_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(schema_json.as_bytes());
        buf.extend_from_slice(&(self.cores.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.max_bond as u32).to_le_bytes());
        for core in &self.cores {
            for dim in core.tensor.shape() {
                buf.extend_from_slice(&(*dim as u32).to_le_bytes());
            }
            for v in core.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MpsModel, MpsError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], MpsError> {
            if *cursor + n > bytes.len() {
                return Err(MpsError::CorruptArtifact("unexpected end of file".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        let magic = take(&mut cursor, 4)?;
        if magic != ARTIFACT_MAGIC {
            return Err(MpsError::CorruptArtifact("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != ARTIFACT_VERSION {
            return Err(MpsError::UnsupportedVersion(version));
        }
        let schema_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let schema_json = std::str::from_utf8(take(&mut cursor, schema_len)?)
            .map_err(|e| MpsError::CorruptArtifact(e.to_string()))?;
        let schema = Schema::from_json(schema_json)?;
        let core_count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let max_bond = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut cores = Vec::with_capacity(core_count);
        for _ in 0..core_count {
            let l = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let d = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let r = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let count = l
                .checked_mul(d)
                .and_then(|x| x.checked_mul(r))
                .ok_or_else(|| MpsError::CorruptArtifact("dimension overflow".into()))?;
            let raw = take(&mut cursor, count * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cores.push(MpsCore {
                tensor: Tensor::from_vec(vec![l, d, r], data)
                    .map_err(|e| MpsError::CorruptArtifact(e.to_string()))?,
            });
        }
        if cursor != bytes.len() {
            return Err(MpsError::CorruptArtifact("trailing bytes".into()));
        }
        let mut model = MpsModel {
            cores,
            schema,
            canonical_center: None,
            max_bond,
        }
        .canonicalize(0)?;
        model.normalize_center();
        Ok(model)
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn identity_defect(gram: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[i * n + j] - expect).abs());
        }
    }
    worst
}
