//! Neural tangent kernel of the two-layer ReLU net, kernel gradient descent,
//! virtual labels, a computable RKHS surrogate and the early-stopping rule.
//!
//! The matrix-valued kernel is `K = kappa * I_d`, so every `dN x dN` object is
//! handled as `d` independent problems sharing one `N x N` block.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{embed, TrainingDataset};
use crate::error::{Error, Result};
use crate::network::{dotp, TwoLayerReluNet};
use crate::oracle::FiniteSupportDistribution;
use crate::schedule::DiffusionSchedule;

const SYMMETRY_TOL: f64 = 1e-8;
const JITTER_SCALE: f64 = 1e-10;
const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

/// `kappa(z, z') = z . z' (pi - theta) / (2 pi)`.
pub fn kappa(z: &[f64], zt: &[f64]) -> f64 {
    let ip = dotp(z, zt);
    let nz = dotp(z, z).sqrt();
    let nt = dotp(zt, zt).sqrt();
    if nz == 0.0 || nt == 0.0 {
        return 0.0;
    }
    // angle via 2 atan2(|u - v|, |u + v|) on unit vectors; acos loses
    // precision near parallel inputs
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in z.iter().zip(zt) {
        let (u, v) = (a / nz, b / nt);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let theta = 2.0 * diff.sqrt().atan2(sum.sqrt());
    ip * (PI - theta) / (2.0 * PI)
}

/// Monte Carlo estimate `z . z' mean_k 1{w_k . z >= 0} 1{w_k . z' >= 0}`.
pub fn kappa_mc<R: Rng + ?Sized>(z: &[f64], zt: &[f64], n_samples: usize, rng: &mut R) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::domain("kappa_mc needs at least one sample"));
    }
    if z.len() != zt.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: zt.len(),
        });
    }
    let ip = dotp(z, zt);
    let mut w = vec![0.0; z.len()];
    let mut hits = 0usize;
    for _ in 0..n_samples {
        w.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        if dotp(&w, z) >= 0.0 && dotp(&w, zt) >= 0.0 {
            hits += 1;
        }
    }
    Ok(ip * hits as f64 / n_samples as f64)
}

/// Scalar Gram block `H_{jl} = kappa(z_j, z_l)`.
pub fn gram(ds: &TrainingDataset) -> DMatrix<f64> {
    gram_from_embeddings(ds.embeddings(), ds.dim() + 1)
}

fn gram_from_embeddings(z: &[f64], width: usize) -> DMatrix<f64> {
    let n = z.len() / width;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let zj = &z[j * width..(j + 1) * width];
            (0..n).map(|l| kappa(zj, &z[l * width..(l + 1) * width])).collect()
        })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    for (j, row) in rows.iter().enumerate() {
        for (l, &v) in row.iter().enumerate() {
            h[(j, l)] = v;
        }
    }
    h
}

/// Full `dN x dN` Gram with index `j * d + i`, i.e. `block (x) I_d`.
pub fn full_gram(block: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    block.kronecker(&DMatrix::<f64>::identity(d, d))
}

/// Empirical Gram `H(0)` of the network at its initial weights, `dN x dN`
/// with index `j * d + i`:
/// `(1/m) sum_r z_j . z_l 1{w_r . z_j >= 0} 1{w_r . z_l >= 0} a_r^i a_r^k`.
pub fn empirical_gram(net: &TwoLayerReluNet, ds: &TrainingDataset) -> Result<DMatrix<f64>> {
    if ds.dim() != net.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            got: ds.dim(),
        });
    }
    let d = net.dim();
    let m = net.width();
    let n = ds.len();
    let mut b = DMatrix::<f64>::zeros(m, d * n);
    for r in 0..m {
        let wr = net.initial_neuron_weights(r);
        let ar = net.neuron_signs(r);
        for j in 0..n {
            if dotp(&wr, ds.embedding(j)) >= 0.0 {
                for i in 0..d {
                    b[(r, j * d + i)] = ar[i];
                }
            }
        }
    }
    let mut h = b.tr_mul(&b) / m as f64;
    for j in 0..n {
        for l in 0..n {
            let ip = dotp(ds.embedding(j), ds.embedding(l));
            for i in 0..d {
                for k in 0..d {
                    h[(j * d + i, l * d + k)] *= ip;
                }
            }
        }
    }
    Ok(h)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::domain("matrix is not square"));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::domain(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?[0])
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(*eigenvalues(m)?.last().unwrap())
}

/// Converts a stack with entry `j * d + i` to an `N x d` matrix.
pub fn stack_to_matrix(stack: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(stack.len() / d, d, stack)
}

/// Inverse of [`stack_to_matrix`].
pub fn matrix_to_stack(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|j| m.row(j).iter().copied().collect::<Vec<_>>()).collect()
}

/// Solves `(block) X = rhs` for an `N x d` right-hand side, adding diagonal
/// jitter `1e-10 trace / N` only if the plain factorization fails.
fn spd_solve(block: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = block.nrows();
    let chol = match Cholesky::new(block.clone()) {
        Some(c) => c,
        None => {
            let jitter = JITTER_SCALE * block.trace() / n as f64;
            let shifted = block + DMatrix::<f64>::identity(n, n) * jitter;
            Cholesky::new(shifted).ok_or_else(|| Error::Conditioning {
                lambda_min: min_eigenvalue(block).unwrap_or(f64::NAN),
                msg: "Gram block is not positive definite after jitter".into(),
            })?
        }
    };
    let mut x = chol.solve(rhs);
    // one round of iterative refinement
    let r = rhs - block * &x;
    x += chol.solve(&r);
    Ok(x)
}

/// `gamma(0) = H^{-1} u(0)` blockwise; `u0` is a stack with entry `j * d + i`.
pub fn kernel_gd_init(block: &DMatrix<f64>, u0: &[f64], d: usize) -> Result<DMatrix<f64>> {
    check_symmetric(block)?;
    if u0.len() != block.nrows() * d {
        return Err(Error::DimensionMismatch {
            expected: block.nrows() * d,
            got: u0.len(),
        });
    }
    let rhs = stack_to_matrix(u0, d);
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(rhs);
    }
    let gamma = spd_solve(block, &rhs)?;
    let resid = (block * &gamma - &rhs).norm();
    if resid > SOLVE_RESIDUAL_TOL * rhs.norm() {
        return Err(Error::Conditioning {
            lambda_min: min_eigenvalue(block)?,
            msg: format!("gamma(0) solve residual {resid:e} too large"),
        });
    }
    Ok(gamma)
}

/// Kernel gradient-descent predictor `f^K_tau(z) = sum_j kappa(z_j, z) gamma_j(tau)`.
#[derive(Debug, Clone)]
pub struct KernelModel {
    gram_block: DMatrix<f64>,
    gamma: DMatrix<f64>,
    labels: DMatrix<f64>,
    eta: f64,
    lambda0: f64,
    train_inputs: Vec<f64>,
    t0: f64,
    dim: usize,
    iteration: usize,
    fingerprint: String,
}

impl KernelModel {
    /// Builds the model on `ds` with `gamma(0) = H^{-1} u0`.
    pub fn new(ds: &TrainingDataset, eta: f64, u0: &[f64]) -> Result<Self> {
        let block = gram(ds);
        Self::with_gram(ds, block, eta, u0)
    }

    /// As [`KernelModel::new`] with a precomputed Gram block.
    pub fn with_gram(ds: &TrainingDataset, block: DMatrix<f64>, eta: f64, u0: &[f64]) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::domain(format!("step size must be positive, got {eta}")));
        }
        let gamma = kernel_gd_init(&block, u0, ds.dim())?;
        Self::from_gamma(ds, block, eta, gamma)
    }

    /// Builds the model from an explicit coefficient matrix (`N x d`).
    pub fn from_gamma(ds: &TrainingDataset, block: DMatrix<f64>, eta: f64, gamma: DMatrix<f64>) -> Result<Self> {
        if block.nrows() != ds.len() || gamma.nrows() != ds.len() || gamma.ncols() != ds.dim() {
            return Err(Error::DimensionMismatch {
                expected: ds.len(),
                got: gamma.nrows(),
            });
        }
        let lambda0 = min_eigenvalue(&block)?;
        Ok(Self {
            labels: stack_to_matrix(&ds.labels(), ds.dim()),
            gram_block: block,
            gamma,
            eta,
            lambda0,
            train_inputs: ds.embeddings().to_vec(),
            t0: ds.t0(),
            dim: ds.dim(),
            iteration: 0,
            fingerprint: ds.input_fingerprint(),
        })
    }

    pub fn gram_block(&self) -> &DMatrix<f64> {
        &self.gram_block
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Fingerprint of the training inputs.
    pub fn input_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `gamma <- gamma - eta (H gamma - y)`.
    pub fn step(&mut self) {
        let resid = &self.gram_block * &self.gamma - &self.labels;
        self.gamma -= resid * self.eta;
        self.iteration += 1;
    }

    /// Runs `iters` steps.
    pub fn run(&mut self, iters: usize) {
        for _ in 0..iters {
            self.step();
        }
    }

    /// Training predictions `u^K = H gamma` as a stack.
    pub fn train_predictions(&self) -> Vec<f64> {
        matrix_to_stack(&(&self.gram_block * &self.gamma))
    }

    /// Prediction at embedding `z`.
    pub fn predict_z(&self, z: &[f64]) -> Vec<f64> {
        let w = self.dim + 1;
        let mut out = vec![0.0; self.dim];
        for j in 0..self.gamma.nrows() {
            let k = kappa(&self.train_inputs[j * w..(j + 1) * w], z);
            if k != 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += k * self.gamma[(j, i)];
                }
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.predict_z(&embed(x, t, self.t0))
    }
}

/// Source dataset with labels `f_H(z_j) + eps_j`, `eps_j = x0_j - f_*(z_j)`.
#[derive(Debug, Clone)]
pub struct VirtualDataset {
    pub dataset: TrainingDataset,
    pub noise: Vec<Vec<f64>>,
}

/// Label noise `eps_j = x0_j - f_*(xt_j, t_j)`.
pub fn label_noise(
    ds: &TrainingDataset,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
) -> Result<Vec<Vec<f64>>> {
    ds.entries()
        .iter()
        .map(|e| {
            let f = dist.posterior_mean(schedule, &e.xt, e.t)?;
            Ok(e.x0.iter().zip(&f).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Builds the virtual dataset from any target `f_H`.
pub fn build_virtual_dataset(
    ds: &TrainingDataset,
    f_h: impl Fn(&[f64], f64) -> Vec<f64>,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
) -> Result<VirtualDataset> {
    let noise = label_noise(ds, dist, schedule)?;
    let labels: Vec<Vec<f64>> = ds
        .entries()
        .iter()
        .zip(&noise)
        .map(|(e, eps)| f_h(&e.xt, e.t).iter().zip(eps).map(|(a, b)| a + b).collect())
        .collect();
    Ok(VirtualDataset {
        dataset: ds.with_labels(&labels)?,
        noise,
    })
}

/// Finite kernel expansion standing in for the RKHS approximant `f_H`.
#[derive(Debug, Clone, Serialize)]
pub struct SurrogateRkhsTarget {
    #[serde(skip)]
    anchors: Vec<f64>,
    #[serde(skip)]
    gamma: DMatrix<f64>,
    t0: f64,
    dim: usize,
    pub ridge: f64,
    pub rkhs_norm_sq: f64,
    /// Sup-norm error against `f_*` over the probe set, if probes were given.
    pub probe_sup_error: Option<f64>,
    #[serde(skip)]
    fingerprint: String,
}

impl SurrogateRkhsTarget {
    pub fn predict_z(&self, z: &[f64]) -> Vec<f64> {
        let w = self.dim + 1;
        let mut out = vec![0.0; self.dim];
        for j in 0..self.gamma.nrows() {
            let k = kappa(&self.anchors[j * w..(j + 1) * w], z);
            for (i, o) in out.iter_mut().enumerate() {
                *o += k * self.gamma[(j, i)];
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.predict_z(&embed(x, t, self.t0))
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn input_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `max_probe max_i |f_H - f_*|`.
    pub fn sup_error(
        &self,
        dist: &FiniteSupportDistribution,
        schedule: &DiffusionSchedule,
        probes: &[(Vec<f64>, f64)],
    ) -> Result<f64> {
        let errs: Result<Vec<f64>> = probes
            .par_iter()
            .map(|(x, t)| {
                let f = dist.posterior_mean(schedule, x, *t)?;
                Ok(self
                    .predict(x, *t)
                    .iter()
                    .zip(&f)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max))
            })
            .collect();
        Ok(errs?.into_iter().fold(0.0, f64::max))
    }
}

/// Kernel ridge regression of `f_*` at the dataset inputs:
/// `(H + ridge I) gamma = F`.
pub fn fit_surrogate(
    ds: &TrainingDataset,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    ridge: f64,
    probes: &[(Vec<f64>, f64)],
) -> Result<SurrogateRkhsTarget> {
    if !(ridge >= 0.0) {
        return Err(Error::domain("ridge must be non-negative"));
    }
    let block = gram(ds);
    fit_surrogate_with_gram(ds, &block, dist, schedule, ridge, probes)
}

/// As [`fit_surrogate`] with a precomputed Gram block.
pub fn fit_surrogate_with_gram(
    ds: &TrainingDataset,
    block: &DMatrix<f64>,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    ridge: f64,
    probes: &[(Vec<f64>, f64)],
) -> Result<SurrogateRkhsTarget> {
    let d = ds.dim();
    let n = ds.len();
    let mut targets = DMatrix::zeros(n, d);
    for (j, e) in ds.entries().iter().enumerate() {
        for (i, v) in dist.posterior_mean(schedule, &e.xt, e.t)?.into_iter().enumerate() {
            targets[(j, i)] = v;
        }
    }
    let lhs = block + DMatrix::<f64>::identity(n, n) * ridge;
    let lambda_min = min_eigenvalue(&lhs)?;
    if lambda_min <= 0.0 {
        return Err(Error::Conditioning {
            lambda_min,
            msg: "kernel ridge system is singular".into(),
        });
    }
    let gamma = spd_solve(&lhs, &targets)?;
    let rkhs_norm_sq = (0..d)
        .map(|i| {
            let g = gamma.column(i);
            g.dot(&(block * g))
        })
        .sum::<f64>()
        .max(0.0);
    let mut s = SurrogateRkhsTarget {
        anchors: ds.embeddings().to_vec(),
        gamma,
        t0: ds.t0(),
        dim: d,
        ridge,
        rkhs_norm_sq,
        probe_sup_error: None,
        fingerprint: ds.input_fingerprint(),
    };
    if !probes.is_empty() {
        s.probe_sup_error = Some(s.sup_error(dist, schedule, probes)?);
    }
    Ok(s)
}

/// Empirical kernel complexity `sqrt((1/n) sum_i min(lambda_i / n, eps^2))`.
pub fn kernel_complexity(eigs: &[f64], n: usize, eps: f64) -> f64 {
    let nf = n as f64;
    (eigs.iter().map(|&l| (l.max(0.0) / nf).min(eps * eps)).sum::<f64>() / nf).sqrt()
}

/// Critical radius: smallest `eps` in `[1e-6, 1e6]` with
/// `R(eps) <= eps^2 / (2 e sigma)`, by bisection in `log eps`.
pub fn critical_radius(eigs: &[f64], n: usize, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::StoppingRule(format!("sigma must be positive, got {sigma}")));
    }
    let ok = |eps: f64| kernel_complexity(eigs, n, eps) <= eps * eps / (2.0 * std::f64::consts::E * sigma);
    let (mut lo, mut hi) = (1e-6f64, 1e6f64);
    if ok(lo) {
        return Ok(lo);
    }
    if !ok(hi) {
        return Err(Error::StoppingRule("no critical radius in [1e-6, 1e6]".into()));
    }
    // R(eps)/eps^2 is non-increasing, so the feasible set is an interval [eps*, inf)
    while hi - lo > 1e-6 * lo.max(1e-6) {
        let mid = (lo.ln() * 0.5 + hi.ln() * 0.5).exp();
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Early-stopping time `floor(1 / (eta eps^2))`, clamped to `[1, max_iters]`,
/// where `eps` is the critical radius of `eigs` at noise level `sigma`.
pub fn early_stopping_t_hat(eigs: &[f64], eta: f64, sigma: f64, n: usize, max_iters: usize) -> Result<usize> {
    if !(eta > 0.0) {
        return Err(Error::StoppingRule("step size must be positive".into()));
    }
    let eps = critical_radius(eigs, n, sigma)?;
    let raw = (1.0 / (eta * eps * eps)).floor();
    Ok(if raw.is_finite() {
        (raw as usize).clamp(1, max_iters.max(1))
    } else {
        max_iters.max(1)
    })
}

/// Noise level `sqrt(sum_j |eps_j|^2 / (d N))`.
pub fn noise_sigma(noise: &[Vec<f64>]) -> f64 {
    let count: usize = noise.iter().map(|v| v.len()).sum();
    (noise.iter().flatten().map(|v| v * v).sum::<f64>() / count.max(1) as f64).sqrt()
}

/// Holdout stopping: kernel GD on the first `n_train` samples, returning the
/// iteration in `[1, max_iters]` with the smallest squared error on the rest.
pub fn holdout_t_hat(ds: &TrainingDataset, eta: f64, n_train: usize, max_iters: usize) -> Result<usize> {
    if n_train == 0 || n_train >= ds.len() {
        return Err(Error::StoppingRule("holdout split must leave both parts non-empty".into()));
    }
    let d = ds.dim();
    let fit = ds.subset(0..n_train);
    let val = ds.subset(n_train..ds.len());
    let mut model = KernelModel::new(&fit, eta, &vec![0.0; n_train * d])?;
    let w = d + 1;
    let kv: Vec<Vec<f64>> = (0..val.len())
        .map(|l| {
            (0..n_train)
                .map(|j| kappa(&fit.embeddings()[j * w..(j + 1) * w], val.embedding(l)))
                .collect()
        })
        .collect();
    let kv = DMatrix::from_fn(val.len(), n_train, |l, j| kv[l][j]);
    let y_val = stack_to_matrix(&val.labels(), d);
    let (mut best, mut best_err) = (1, f64::INFINITY);
    for tau in 1..=max_iters.max(1) {
        model.step();
        let err = (&kv * model.gamma() - &y_val).norm_squared();
        if err < best_err {
            best_err = err;
            best = tau;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::constant(1.0, 1e-2, 5.0).unwrap()
    }

    fn two_atom() -> FiniteSupportDistribution {
        FiniteSupportDistribution::uniform(vec![vec![0.6, 0.8], vec![-0.6, -0.8]]).unwrap()
    }

    fn toy(n: usize, seed: u64) -> TrainingDataset {
        TrainingDataset::collect(&two_atom(), &sched(), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kappa_closed_form_cases() {
        assert_eq!(kappa(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((kappa(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]) - 4.5).abs() < 1e-12);
        assert!((kappa(&[1.0, 0.0], &[1.0, 1.0]) - 0.375).abs() < 1e-15);
        assert_eq!(kappa(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn kappa_mc_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(kappa_mc(&[1.0, 0.0], &[0.0, 3.0], 1000, &mut rng).unwrap(), 0.0);
        let v = kappa_mc(&[1.0, 0.5], &[0.3, 1.0], 1, &mut rng).unwrap();
        assert!(v == 0.0 || v == 0.8);
        let v = kappa_mc(&[1.0, 0.0], &[1.0, 1.0], 1_000_000, &mut rng).unwrap();
        assert!((v - 0.375).abs() < 2e-3);
        assert!(kappa_mc(&[1.0], &[1.0], 0, &mut rng).is_err());
    }

    #[test]
    fn kappa_mc_agrees_at_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zt: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mc = kappa_mc(&z, &zt, n, &mut rng).unwrap();
            let tol = 3.0 * dotp(&z, &zt).abs() / (2.0 * (n as f64).sqrt());
            assert!((mc - kappa(&z, &zt)).abs() <= tol + 1e-15);
        }
    }

    #[test]
    fn gram_cases() {
        let s = sched();
        let one = TrainingDataset::from_entries(
            vec![Sample {
                t: 1.01,
                x0: vec![0.0],
                xt: vec![1.0],
            }],
            &s,
        )
        .unwrap();
        assert!((gram(&one)[(0, 0)] - 1.0).abs() < 1e-12);
        let orth = TrainingDataset::from_entries(
            vec![
                Sample {
                    t: 0.01,
                    x0: vec![0.0],
                    xt: vec![1.0],
                },
                Sample {
                    t: 2.01,
                    x0: vec![0.0],
                    xt: vec![0.0],
                },
            ],
            &s,
        )
        .unwrap();
        let g = gram(&orth);
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 0)], 0.0);
    }

    #[test]
    fn full_gram_shares_smallest_eigenvalue() {
        let p = FiniteSupportDistribution::hypercube_corners(3, 0.5).unwrap();
        let ds = TrainingDataset::collect(&p, &sched(), 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let block = gram(&ds);
        let full = full_gram(&block, 3);
        assert_eq!(full.nrows(), 24);
        let a = min_eigenvalue(&block).unwrap();
        let b = min_eigenvalue(&full).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn min_eigenvalue_cases() {
        assert_eq!(min_eigenvalue(&DMatrix::identity(4, 4)).unwrap(), 1.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert!((min_eigenvalue(&m).unwrap() - 1.0).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 3.0]);
        assert!(min_eigenvalue(&bad).is_err());
        let ds = toy(4, 5);
        let mut e = ds.entries().to_vec();
        e[3] = e[1].clone();
        let dup = TrainingDataset::from_entries(e, &sched()).unwrap();
        assert!(min_eigenvalue(&gram(&dup)).unwrap() <= 1e-8);
    }

    #[test]
    fn gamma_init_cases() {
        let h = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(kernel_gd_init(&h, &[3.0], 1).unwrap()[(0, 0)], 1.5);
        let ds = toy(8, 6);
        let g = gram(&ds);
        assert!(kernel_gd_init(&g, &vec![0.0; 16], 2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_init_residual_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(64, 64, |_, _| rng.random_range(-1.0..1.0));
        let h = a.tr_mul(&a) + DMatrix::identity(64, 64) * 0.1;
        let u0: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = kernel_gd_init(&h, &u0, 2).unwrap();
        let r = (&h * &gamma - stack_to_matrix(&u0, 2)).norm();
        assert!(r <= 1e-8 * stack_to_matrix(&u0, 2).norm());
    }

    #[test]
    fn scalar_kernel_recursion() {
        let s = sched();
        // z = (x, t - t0) with |z|^2 = 2 gives kappa = 1
        let ds = TrainingDataset::from_entries(
            vec![Sample {
                t: 1.01,
                x0: vec![1.0],
                xt: vec![1.0],
            }],
            &s,
        )
        .unwrap();
        let mut model = KernelModel::new(&ds, 0.5, &[0.0]).unwrap();
        model.step();
        assert!((model.train_predictions()[0] - 0.5).abs() < 1e-12);
        model.step();
        assert!((model.train_predictions()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_matrix_power() {
        let ds = toy(8, 8);
        let block = gram(&ds);
        let eta = 0.5 / max_eigenvalue(&block).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut model = KernelModel::with_gram(&ds, block.clone(), eta, &u0).unwrap();
        let y = stack_to_matrix(&ds.labels(), 2);
        let step = DMatrix::identity(8, 8) - &block * eta;
        let mut power = DMatrix::identity(8, 8);
        let e0 = stack_to_matrix(&u0, 2) - &y;
        for _ in 0..100 {
            model.step();
            power = &step * power;
            let lhs = stack_to_matrix(&model.train_predictions(), 2) - &y;
            assert!((lhs - &power * &e0).amax() < 1e-10);
        }
    }

    #[test]
    fn predict_consistency() {
        let ds = toy(10, 10);
        let block = gram(&ds);
        let eta = 1.0 / max_eigenvalue(&block).unwrap();
        let zero = KernelModel::with_gram(&ds, block.clone(), eta, &vec![0.0; 20]).unwrap();
        assert!(zero.predict(&[0.3, 0.1], 2.0).iter().all(|&v| v == 0.0));
        let mut m = KernelModel::with_gram(&ds, block, eta, &vec![0.1; 20]).unwrap();
        m.run(5);
        let u = m.train_predictions();
        for (j, e) in ds.entries().iter().enumerate() {
            let p = m.predict(&e.xt, e.t);
            for i in 0..2 {
                assert!((p[i] - u[j * 2 + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kernel_gd_converges_to_labels() {
        let ds = toy(6, 11);
        let block = gram(&ds);
        let eta = 1.0 / max_eigenvalue(&block).unwrap();
        let mut m = KernelModel::with_gram(&ds, block.clone(), eta, &vec![0.0; 12]).unwrap();
        let lmin = min_eigenvalue(&block).unwrap();
        let iters = ((30.0 / (eta * lmin)).ceil() as usize).min(2_000_000);
        m.run(iters);
        let u = m.train_predictions();
        for (a, b) in u.iter().zip(ds.labels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn virtual_dataset_cases() {
        let (p, s) = (two_atom(), sched());
        let ds = toy(12, 12);
        let same = build_virtual_dataset(&ds, |x, t| p.posterior_mean(&s, x, t).unwrap(), &p, &s).unwrap();
        for (a, b) in same.dataset.entries().iter().zip(ds.entries()) {
            for (u, v) in a.x0.iter().zip(&b.x0) {
                assert!((u - v).abs() < 1e-15);
            }
        }
        let zero = build_virtual_dataset(&ds, |_, _| vec![0.0; 2], &p, &s).unwrap();
        for (e, eps) in zero.dataset.entries().iter().zip(&zero.noise) {
            assert_eq!(&e.x0, eps);
        }
        assert_eq!(label_noise(&ds, &p, &s).unwrap(), zero.noise);
    }

    #[test]
    fn surrogate_interpolates_and_ridge_path_is_monotone() {
        let (p, s) = (two_atom(), sched());
        let ds = toy(16, 13);
        let sur = fit_surrogate(&ds, &p, &s, 0.0, &[]).unwrap();
        for e in ds.entries() {
            let f = p.posterior_mean(&s, &e.xt, e.t).unwrap();
            let g = sur.predict(&e.xt, e.t);
            for i in 0..2 {
                assert!((f[i] - g[i]).abs() < 1e-6);
            }
        }
        let mut prev = f64::INFINITY;
        for ridge in [1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0] {
            let norm = fit_surrogate(&ds, &p, &s, ridge, &[]).unwrap().rkhs_norm_sq;
            assert!(norm <= prev);
            prev = norm;
        }
    }

    #[test]
    fn label_gap_bound() {
        let (p, s) = (two_atom(), sched());
        let ds = toy(24, 14);
        let sur = fit_surrogate(&ds, &p, &s, 1e-2, &[]).unwrap();
        let v = build_virtual_dataset(&ds, |x, t| sur.predict(x, t), &p, &s).unwrap();
        let gap: f64 = ds
            .labels()
            .iter()
            .zip(v.dataset.labels())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let sup = ds
            .entries()
            .iter()
            .map(|e| {
                let f = p.posterior_mean(&s, &e.xt, e.t).unwrap();
                sur.predict(&e.xt, e.t)
                    .iter()
                    .zip(&f)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(gap <= (48f64).sqrt() * sup + 1e-12);
    }

    #[test]
    fn stopping_rule_scalar_case() {
        let eps = critical_radius(&[1.0], 1, 1.0).unwrap();
        assert!((eps - (2.0 * std::f64::consts::E).sqrt()).abs() < 1e-5);
        assert_eq!(early_stopping_t_hat(&[1.0], 0.01, 1.0, 1, 1_000_000).unwrap(), 18);
    }

    #[test]
    fn stopping_rule_monotone_in_sigma() {
        let ds = toy(32, 15);
        let eigs = eigenvalues(&gram(&ds)).unwrap();
        let eta = 0.1 / eigs.last().unwrap();
        let mut prev = usize::MAX;
        let mut sigma = 1e-4;
        while sigma < 100.0 {
            let t = early_stopping_t_hat(&eigs, eta, sigma, 32, 1 << 40).unwrap();
            assert!(t <= prev);
            prev = t;
            sigma *= 2.0;
        }
        let tiny = early_stopping_t_hat(&eigs, eta, 1e-12, 32, 5000);
        assert!(matches!(tiny, Ok(5000) | Err(Error::StoppingRule(_))));
        assert!(early_stopping_t_hat(&eigs, eta, 0.0, 32, 10).is_err());
    }

    #[test]
    fn holdout_rule_returns_in_range() {
        let ds = toy(24, 16);
        let eta = 0.1 / max_eigenvalue(&gram(&ds)).unwrap();
        let t = holdout_t_hat(&ds, eta, 16, 200).unwrap();
        assert!((1..=200).contains(&t));
        assert!(holdout_t_hat(&ds, eta, 24, 200).is_err());
    }

    #[test]
    fn empirical_gram_approaches_kernel() {
        let ds = toy(6, 17);
        let block = full_gram(&gram(&ds), 2);
        let gap = |m: usize| {
            let net = TwoLayerReluNet::init_ntk(m, 2, ds.t0(), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
            (empirical_gram(&net, &ds).unwrap() - &block).amax()
        };
        let small = gap(256);
        let large = gap(65536);
        assert!(large < small / 4.0, "{small} -> {large}");
    }
}
