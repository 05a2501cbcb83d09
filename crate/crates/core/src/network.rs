//! Two-layer ReLU network `f^i(x, t) = m^{-1/2} sum_r a_r^i relu(w_r . z)` with
//! `z = (x, t - t0)`, trained by full-batch gradient descent on the first layer.
//!
//! Parameters are stored component-major: first-layer entry `k` of neuron `r`
//! lives at `k * m + r`, sign `a_r^i` at `i * m + r`. Sums over neurons are
//! taken block by block in a fixed order, so results do not depend on the
//! thread count.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{embed, TrainingDataset};
use crate::error::{Error, Result};

/// Neurons per work item.
const BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerReluNet {
    dim: usize,
    width: usize,
    t0: f64,
    /// `(d + 1) x m`, component-major.
    w: Vec<f64>,
    /// `d x m`, entries `+-1`.
    a: Vec<f64>,
    w_init: Vec<f64>,
    seed: Option<u64>,
}

/// Per-iteration training record; every vector has `iterations + 1` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub losses: Vec<f64>,
    pub max_weight_move: Vec<f64>,
    pub flip_counts: Vec<usize>,
    /// Prediction stacks `u(tau)`, entry `j * d + i`.
    pub predictions: Vec<Vec<f64>>,
}

impl TrainTrajectory {
    pub fn iterations(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }
}

/// Partial sums of one neuron block.
struct BlockEval {
    out: Vec<f64>,
    flips: usize,
    /// Gate pattern `1{gate_r . z_j >= 0}`, entry `j * len + (r - start)`.
    mask: Option<Vec<bool>>,
}

/// Source of the activation pattern in a gradient pass.
#[derive(Clone, Copy)]
enum Gates<'a> {
    Weights(&'a [f64]),
    /// Per-block masks as produced by [`TwoLayerReluNet::eval_block`].
    Masks(&'a [Vec<bool>]),
}

impl TwoLayerReluNet {
    /// Independent `w_r ~ N(0, I_{d+1})` and uniform signs `a_r^i`.
    pub fn init_ntk<R: Rng + ?Sized>(width: usize, dim: usize, t0: f64, rng: &mut R) -> Result<Self> {
        if width == 0 {
            return Err(Error::domain("width must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::domain("output dimension must be at least 1"));
        }
        let w: Vec<f64> = (0..width * (dim + 1)).map(|_| rng.sample(StandardNormal)).collect();
        let a = (0..width * dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self::from_parts(dim, t0, w, a)
    }

    /// Antisymmetric initialization: the second half of the neurons copies the
    /// first half's weights with negated signs, so the initial output is zero.
    /// Requires an even width.
    pub fn init_ntk_paired<R: Rng + ?Sized>(width: usize, dim: usize, t0: f64, rng: &mut R) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::domain("paired initialization needs a positive even width"));
        }
        let half = Self::init_ntk(width / 2, dim, t0, rng)?;
        let (mut w, mut a) = (Vec::new(), Vec::new());
        for r in 0..half.width {
            w.extend(half.neuron_weights(r));
        }
        for r in 0..half.width {
            w.extend(half.neuron_weights(r));
        }
        for r in 0..half.width {
            a.extend(half.neuron_signs(r));
        }
        for r in 0..half.width {
            a.extend(half.neuron_signs(r).iter().map(|v| -v));
        }
        Self::from_parts(dim, t0, w, a)
    }

    /// Builds a net from per-neuron rows: `w` is `m x (d + 1)` row-major,
    /// `a` is `m x d` row-major with entries `+-1`.
    pub fn from_parts(dim: usize, t0: f64, w: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if dim == 0 || w.is_empty() || w.len() % (dim + 1) != 0 {
            return Err(Error::domain("first-layer weights must be m x (d + 1) with m >= 1"));
        }
        let width = w.len() / (dim + 1);
        if a.len() != width * dim {
            return Err(Error::DimensionMismatch {
                expected: width * dim,
                got: a.len(),
            });
        }
        if a.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::domain("second-layer entries must be +1 or -1"));
        }
        let w = transpose(&w, width, dim + 1);
        Ok(Self {
            dim,
            width,
            t0,
            w_init: w.clone(),
            w,
            a: transpose(&a, width, dim),
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Current first layer, component-major.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// First layer at initialization, component-major.
    pub fn initial_weights(&self) -> &[f64] {
        &self.w_init
    }

    /// Second layer, component-major.
    pub fn signs(&self) -> &[f64] {
        &self.a
    }

    /// Current `w_r`.
    pub fn neuron_weights(&self, r: usize) -> Vec<f64> {
        (0..=self.dim).map(|k| self.w[k * self.width + r]).collect()
    }

    pub fn initial_neuron_weights(&self, r: usize) -> Vec<f64> {
        (0..=self.dim).map(|k| self.w_init[k * self.width + r]).collect()
    }

    /// `(a_r^1, ..., a_r^d)`.
    pub fn neuron_signs(&self, r: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.a[i * self.width + r]).collect()
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        (0..self.width)
            .step_by(BLOCK)
            .map(|s| s..(s + BLOCK).min(self.width))
            .collect()
    }

    /// Block partials of `sum_r a_r^i (vals_r . z_j) 1{gates_r . z_j >= 0}` for
    /// every embedding row in `zs`. Optionally counts gate disagreements with
    /// `ref_mask` and returns the gate pattern.
    fn eval_block(
        &self,
        vals: &[f64],
        gates: &[f64],
        ref_mask: Option<&[bool]>,
        keep_mask: bool,
        zs: &[f64],
        range: Range<usize>,
    ) -> BlockEval {
        let d = self.dim;
        let d1 = d + 1;
        let m = self.width;
        let n = zs.len() / d1;
        let len = range.len();
        let same = std::ptr::eq(vals, gates);
        let mut v = vec![0.0; len];
        let mut g = vec![0.0; len];
        let mut h = vec![0.0; len];
        let mut out = vec![0.0; n * d];
        let mut mask = if keep_mask { vec![false; n * len] } else { Vec::new() };
        let mut flips = 0;
        for j in 0..n {
            let z = &zs[j * d1..(j + 1) * d1];
            preact(vals, m, z, &range, &mut v);
            let gate = if same {
                &v
            } else {
                preact(gates, m, z, &range, &mut g);
                &g
            };
            if let Some(rm) = ref_mask {
                let rm = &rm[j * len..(j + 1) * len];
                flips += gate.iter().zip(rm).filter(|(&p, &q)| (p >= 0.0) != q).count();
            }
            if keep_mask {
                for (mk, &p) in mask[j * len..(j + 1) * len].iter_mut().zip(gate) {
                    *mk = p >= 0.0;
                }
            }
            for ((hr, &x), &p) in h.iter_mut().zip(&v).zip(gate) {
                *hr = if p >= 0.0 { x } else { 0.0 };
            }
            for i in 0..d {
                let a = &self.a[i * m + range.start..i * m + range.end];
                out[j * d + i] = lane_dot(a, &h);
            }
        }
        BlockEval {
            out,
            flips,
            mask: keep_mask.then_some(mask),
        }
    }

    /// Evaluates all blocks and reduces them in block order. Returns the
    /// output stack, the flip count and the per-block masks (when kept).
    fn eval_all(
        &self,
        vals: &[f64],
        gates: &[f64],
        ref_masks: Option<&[Vec<bool>]>,
        keep_mask: bool,
        zs: &[f64],
    ) -> (Vec<f64>, usize, Vec<Vec<bool>>) {
        let parts: Vec<BlockEval> = self
            .blocks()
            .into_par_iter()
            .enumerate()
            .map(|(b, range)| {
                let rm = ref_masks.map(|v| v[b].as_slice());
                self.eval_block(vals, gates, rm, keep_mask, zs, range)
            })
            .collect();
        let scale = 1.0 / (self.width as f64).sqrt();
        let n = parts[0].out.len();
        let mut out = vec![0.0; n];
        let mut flips = 0;
        let mut masks = Vec::new();
        for p in parts {
            for (o, v) in out.iter_mut().zip(&p.out) {
                *o += v;
            }
            flips += p.flips;
            masks.extend(p.mask);
        }
        out.iter_mut().for_each(|o| *o *= scale);
        (out, flips, masks)
    }

    fn outputs(&self, vals: &[f64], gates: &[f64], zs: &[f64]) -> Vec<f64> {
        self.eval_all(vals, gates, None, false, zs).0
    }

    /// Gradient of `1/2 sum_j |u_j - y_j|^2` in the values for the given
    /// activation pattern; component-major like the weights.
    fn gradient(&self, gates: Gates<'_>, residual: &[f64], zs: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let d1 = d + 1;
        let m = self.width;
        let n = zs.len() / d1;
        let scale = 1.0 / (m as f64).sqrt();
        let parts: Vec<(Range<usize>, Vec<f64>)> = self
            .blocks()
            .into_par_iter()
            .enumerate()
            .map(|(b, range)| {
                let len = range.len();
                let mut p = vec![0.0; len];
                let mut c = vec![0.0; len];
                let mut grad = vec![0.0; d1 * len];
                for j in 0..n {
                    let z = &zs[j * d1..(j + 1) * d1];
                    c.fill(0.0);
                    for i in 0..d {
                        let e = residual[j * d + i];
                        let a = &self.a[i * m + range.start..i * m + range.end];
                        for (ci, &s) in c.iter_mut().zip(a) {
                            *ci += e * s;
                        }
                    }
                    match gates {
                        Gates::Weights(w) => {
                            preact(w, m, z, &range, &mut p);
                            for (ci, &pi) in c.iter_mut().zip(&p) {
                                if pi < 0.0 {
                                    *ci = 0.0;
                                }
                            }
                        }
                        Gates::Masks(masks) => {
                            for (ci, &on) in c.iter_mut().zip(&masks[b][j * len..(j + 1) * len]) {
                                if !on {
                                    *ci = 0.0;
                                }
                            }
                        }
                    }
                    for (k, &zk) in z.iter().enumerate() {
                        for (gk, &ci) in grad[k * len..(k + 1) * len].iter_mut().zip(&c) {
                            *gk += ci * zk;
                        }
                    }
                }
                grad.iter_mut().for_each(|g| *g *= scale);
                (range, grad)
            })
            .collect();
        let mut out = vec![0.0; d1 * m];
        for (range, grad) in parts {
            let len = range.len();
            for k in 0..d1 {
                out[k * m + range.start..k * m + range.end].copy_from_slice(&grad[k * len..(k + 1) * len]);
            }
        }
        out
    }

    /// Output at embedding `z`.
    pub fn forward_z(&self, z: &[f64]) -> Vec<f64> {
        self.outputs(&self.w, &self.w, z)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward_z(&embed(x, t, self.t0))
    }

    /// Linearized network at `w_bar`, gates frozen at the initial weights:
    /// `m^{-1/2} sum_r a_r^i (w_bar_r . z) 1{w_r(0) . z >= 0}`.
    pub fn linearized_forward_z(&self, w_bar: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_shape(w_bar)?;
        Ok(self.outputs(w_bar, &self.w_init, z))
    }

    pub fn linearized_forward(&self, w_bar: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.linearized_forward_z(w_bar, &embed(x, t, self.t0))
    }

    fn check_shape(&self, w_bar: &[f64]) -> Result<()> {
        if w_bar.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                got: w_bar.len(),
            });
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &TrainingDataset) -> Result<()> {
        if ds.is_empty() {
            return Err(Error::domain("empty dataset"));
        }
        if ds.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: ds.dim(),
            });
        }
        Ok(())
    }

    /// Predictions `u` on the training inputs.
    pub fn predict_dataset(&self, ds: &TrainingDataset) -> Vec<f64> {
        self.outputs(&self.w, &self.w, ds.embeddings())
    }

    /// Linearized predictions on the training inputs.
    pub fn linearized_predict_dataset(&self, w_bar: &[f64], ds: &TrainingDataset) -> Result<Vec<f64>> {
        self.check_shape(w_bar)?;
        Ok(self.outputs(w_bar, &self.w_init, ds.embeddings()))
    }

    /// One gradient-descent step; returns the pre-update prediction stack.
    pub fn gd_step(&mut self, ds: &TrainingDataset, eta: f64) -> Result<Vec<f64>> {
        check_eta(eta)?;
        self.check_dataset(ds)?;
        let u = self.predict_dataset(ds);
        let grad = self.loss_gradient(Gates::Weights(&self.w), &u, &ds.labels(), ds);
        self.descend(&grad, eta);
        Ok(u)
    }

    fn loss_gradient(&self, gates: Gates<'_>, u: &[f64], y: &[f64], ds: &TrainingDataset) -> Vec<f64> {
        let residual: Vec<f64> = u.iter().zip(y).map(|(a, b)| a - b).collect();
        self.gradient(gates, &residual, ds.embeddings())
    }

    fn descend(&mut self, grad: &[f64], eta: f64) {
        for (w, g) in self.w.iter_mut().zip(grad) {
            *w -= eta * g;
        }
    }

    /// Gradient step on the linearized objective with gates frozen at init.
    pub fn linearized_gd_step(&self, w_bar: &[f64], ds: &TrainingDataset, eta: f64) -> Result<Vec<f64>> {
        check_eta(eta)?;
        self.check_dataset(ds)?;
        self.check_shape(w_bar)?;
        let u = self.linearized_predict_dataset(w_bar, ds)?;
        let residual: Vec<f64> = u.iter().zip(ds.labels()).map(|(a, b)| a - b).collect();
        let grad = self.gradient(Gates::Weights(&self.w_init), &residual, ds.embeddings());
        Ok(w_bar.iter().zip(&grad).map(|(w, g)| w - eta * g).collect())
    }

    /// Runs `min(max_iters, stop_at)` gradient steps, recording the trajectory.
    ///
    /// Fails with [`Error::Divergence`] if the loss becomes non-finite or grows
    /// more than tenfold within any ten-iteration window.
    pub fn train(
        &mut self,
        ds: &TrainingDataset,
        eta: f64,
        max_iters: usize,
        stop_at: Option<usize>,
    ) -> Result<TrainTrajectory> {
        let iters = stop_at.map_or(max_iters, |s| s.min(max_iters));
        Ok(self.train_with_snapshot(ds, eta, iters, None)?.0)
    }

    /// Runs `max_iters` steps and additionally returns the weights after
    /// `snapshot_at` steps, when that is within the run.
    pub fn train_with_snapshot(
        &mut self,
        ds: &TrainingDataset,
        eta: f64,
        max_iters: usize,
        snapshot_at: Option<usize>,
    ) -> Result<(TrainTrajectory, Option<Vec<f64>>)> {
        check_eta(eta)?;
        self.check_dataset(ds)?;
        let y = ds.labels();
        let zs = ds.embeddings();
        let mut traj = TrainTrajectory::default();
        let mut snapshot = None;
        let init_masks = self.eval_all(&self.w_init, &self.w_init, None, true, zs).2;
        for tau in 0..=max_iters {
            if snapshot_at == Some(tau) {
                snapshot = Some(self.w.clone());
            }
            let (u, flips, masks) = self.eval_all(&self.w, &self.w, Some(&init_masks), true, zs);
            let loss = 0.5 * u.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            traj.losses.push(loss);
            traj.max_weight_move.push(self.max_weight_move());
            traj.flip_counts.push(flips);
            if diverged(&traj.losses) {
                traj.predictions.push(u);
                return Err(Error::Divergence {
                    iter: tau,
                    trajectory: Box::new(traj),
                });
            }
            if tau < max_iters {
                let grad = self.loss_gradient(Gates::Masks(&masks), &u, &y, ds);
                self.descend(&grad, eta);
            }
            traj.predictions.push(u);
        }
        Ok((traj, snapshot))
    }

    /// `max_r |w_r - w_r(0)|_2`.
    pub fn max_weight_move(&self) -> f64 {
        let m = self.width;
        let mut sq = vec![0.0; m];
        for k in 0..=self.dim {
            let cur = &self.w[k * m..(k + 1) * m];
            let ini = &self.w_init[k * m..(k + 1) * m];
            for ((s, a), b) in sq.iter_mut().zip(cur).zip(ini) {
                *s += (a - b).powi(2);
            }
        }
        sq.into_iter().fold(0.0, f64::max).sqrt()
    }

    /// Overwrites the current weights (component-major); the initial
    /// snapshot is untouched.
    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        self.check_shape(&w)?;
        self.w = w;
        Ok(())
    }
}

/// `p[r - start] = sum_k z_k w[k * m + r]` over the block.
#[inline]
fn preact(w: &[f64], m: usize, z: &[f64], range: &Range<usize>, p: &mut [f64]) {
    p.fill(0.0);
    for (k, &zk) in z.iter().enumerate() {
        let col = &w[k * m + range.start..k * m + range.end];
        for (pi, &c) in p.iter_mut().zip(col) {
            *pi += zk * c;
        }
    }
}

/// Dot product with eight fixed accumulation lanes.
#[inline]
fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Row-major `rows x cols` to column-major.
pub(crate) fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("step size must be positive, got {eta}")));
    }
    Ok(())
}

fn diverged(losses: &[f64]) -> bool {
    let last = *losses.last().unwrap();
    if !last.is_finite() {
        return true;
    }
    let lo = losses.len().saturating_sub(11);
    let window_min = losses[lo..].iter().cloned().fold(f64::INFINITY, f64::min);
    last > 10.0 * window_min && last > 0.0
}

#[inline]
pub(crate) fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
