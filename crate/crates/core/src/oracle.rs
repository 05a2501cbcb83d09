//! Finite-support data distributions with exact posterior quantities.
//!
//! For `p0 = sum_k w_k delta_{x_k}` the posterior of `X0` given `X_t = x` is a
//! softmax over atoms, which makes the regression target
//! `f_*(x, t) = E[X0 | X_t = x]`, the marginal score and the posterior
//! covariance available in closed form.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;

/// Spatial central-difference step.
pub const FD_STEP_X: f64 = 1e-5;
/// Temporal central-difference step.
pub const FD_STEP_T: f64 = 1e-4;

/// `p0` as weighted atoms in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSupportDistribution {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
    radius_d: f64,
}

impl FiniteSupportDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::domain("distribution needs at least one atom"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::domain("atoms and weights differ in length"));
        }
        let d = atoms[0].len();
        if d == 0 || atoms.iter().any(|a| a.len() != d) {
            return Err(Error::domain("atoms must share a positive dimension"));
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("atoms must be finite"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::domain("weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        let radius_d = atoms.iter().map(|a| norm(a)).fold(0.0, f64::max);
        Ok(Self {
            atoms,
            weights,
            radius_d,
        })
    }

    /// Equal-weight atoms.
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = atoms.len().max(1);
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    /// The `2^d` corners of `[-scale, scale]^d`, equally weighted.
    pub fn hypercube_corners(d: usize, scale: f64) -> Result<Self> {
        if d == 0 || d > 16 {
            return Err(Error::domain(format!("hypercube dimension {d} outside 1..=16")));
        }
        let atoms = (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { scale } else { -scale })
                    .collect()
            })
            .collect();
        Self::uniform(atoms)
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `D = max_k |x_k|`.
    pub fn radius_d(&self) -> f64 {
        self.radius_d
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Posterior weights over atoms given `X_t = x`.
    fn responsibilities(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (alpha, h) = schedule.alpha_h(t)?;
        if h == 0.0 {
            return Err(Error::Singularity(format!("h({t}) = 0")));
        }
        let logits: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, &w)| w.ln() + alpha * dot(a, x) / h - alpha * alpha * dot(a, a) / (2.0 * h))
            .collect();
        Ok(softmax(&logits))
    }

    /// `f_*(x, t) = E[X0 | X_t = x]`.
    pub fn posterior_mean(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = self.responsibilities(schedule, x, t)?;
        let mut mean = vec![0.0; self.dim()];
        for (a, &pk) in self.atoms.iter().zip(&p) {
            for (m, &v) in mean.iter_mut().zip(a) {
                *m += pk * v;
            }
        }
        Ok(mean)
    }

    /// Marginal score via the posterior-mean decomposition
    /// `(alpha / h) f_*(x, t) - x / h`.
    pub fn true_score(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mean = self.posterior_mean(schedule, x, t)?;
        let (alpha, h) = schedule.alpha_over_h(t)?;
        Ok(mean
            .iter()
            .zip(x)
            .map(|(&m, &xi)| (alpha * m - xi) / h)
            .collect())
    }

    /// `log p_t(x) = log sum_k w_k N(x; alpha x_k, h I)`.
    pub fn log_density(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        let (alpha, h) = schedule.alpha_over_h(t)?;
        let d = self.dim() as f64;
        let terms: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, &w)| {
                let sq: f64 = x.iter().zip(a).map(|(xi, ai)| (xi - alpha * ai).powi(2)).sum();
                w.ln() - sq / (2.0 * h) - 0.5 * d * (2.0 * std::f64::consts::PI * h).ln()
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Gradient of the mixture log-density computed from the Gaussian
    /// components directly, without the posterior-mean decomposition.
    pub fn mixture_score_direct(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (alpha, h) = schedule.alpha_over_h(t)?;
        let log_terms: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, &w)| {
                let sq: f64 = x.iter().zip(a).map(|(xi, ai)| (xi - alpha * ai).powi(2)).sum();
                w.ln() - sq / (2.0 * h)
            })
            .collect();
        let p = softmax(&log_terms);
        let mut grad = vec![0.0; self.dim()];
        for (a, &pk) in self.atoms.iter().zip(&p) {
            for ((g, &ai), &xi) in grad.iter_mut().zip(a).zip(x) {
                *g += pk * (alpha * ai - xi) / h;
            }
        }
        Ok(grad)
    }

    /// `Cov(X0 | X_t = x)`.
    pub fn posterior_cov(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let p = self.responsibilities(schedule, x, t)?;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (a, &pk) in self.atoms.iter().zip(&p) {
            for (m, &v) in mean.iter_mut().zip(a) {
                *m += pk * v;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (a, &pk) in self.atoms.iter().zip(&p) {
            for i in 0..d {
                let di = a[i] - mean[i];
                for k in 0..d {
                    cov[(i, k)] += pk * di * (a[k] - mean[k]);
                }
            }
        }
        Ok(cov)
    }

    /// Largest Lipschitz constant of `f_*` in `x` over the probes, i.e. the
    /// max operator norm of `(alpha / h) Cov(X0 | X_t = x)`.
    pub fn lipschitz_beta_x(&self, schedule: &DiffusionSchedule, probes: &[(Vec<f64>, f64)]) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::domain("empty probe list"));
        }
        let mut best: f64 = 0.0;
        for (x, t) in probes {
            if *t < schedule.t0() {
                return Err(Error::domain(format!("probe time {t} below t0")));
            }
            let (alpha, h) = schedule.alpha_over_h(*t)?;
            let cov = self.posterior_cov(schedule, x, *t)?;
            best = best.max(alpha / h * op_norm_sym(&cov));
        }
        Ok(best)
    }

    /// Reference bound `D^2 alpha(t0) / h(t0)` for [`Self::lipschitz_beta_x`].
    pub fn beta_x_bound(&self, schedule: &DiffusionSchedule) -> Result<f64> {
        let (alpha, h) = schedule.alpha_over_h(schedule.t0())?;
        Ok(self.radius_d * self.radius_d * alpha / h)
    }

    /// `d/dt f_*(x, t)` by central differences, stencil clamped to `[t0, t_end]`.
    pub fn time_derivative(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let lo = (t - FD_STEP_T).max(schedule.t0());
        let hi = (t + FD_STEP_T).min(schedule.t_end());
        let a = self.posterior_mean(schedule, x, lo)?;
        let b = self.posterior_mean(schedule, x, hi)?;
        Ok(a.iter().zip(&b).map(|(u, v)| (v - u) / (hi - lo)).collect())
    }

    /// Largest `|d f_* / dt|` over probes in the box `|x|_inf <= radius_r`.
    pub fn lipschitz_beta_t(
        &self,
        schedule: &DiffusionSchedule,
        probes: &[(Vec<f64>, f64)],
        radius_r: f64,
    ) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::domain("empty probe list"));
        }
        let mut best: f64 = 0.0;
        for (x, t) in probes {
            if x.iter().any(|v| v.abs() > radius_r) {
                return Err(Error::domain(format!("probe outside box of radius {radius_r}")));
            }
            if *t < schedule.t0() || *t > schedule.t_end() {
                return Err(Error::domain(format!("probe time {t} outside [t0, t_end]")));
            }
            best = best.max(norm(&self.time_derivative(schedule, x, *t)?));
        }
        Ok(best)
    }

    /// Draws an atom with probability equal to its weight.
    pub fn sample_x0<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return a.clone();
            }
        }
        self.atoms.last().cloned().unwrap()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Operator norm of a symmetric matrix.
pub(crate) fn op_norm_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::constant(1.0, 1e-2, 5.0).unwrap()
    }

    fn two_atom() -> FiniteSupportDistribution {
        FiniteSupportDistribution::uniform(vec![vec![1.0], vec![-1.0]]).unwrap()
    }

    fn t_half() -> f64 {
        2.0 * 2f64.ln()
    }

    #[test]
    fn construction_errors() {
        assert!(FiniteSupportDistribution::new(vec![], vec![]).is_err());
        assert!(FiniteSupportDistribution::new(vec![vec![1.0]], vec![0.5]).is_err());
        assert!(FiniteSupportDistribution::new(vec![vec![1.0], vec![2.0]], vec![1.0, 0.0]).is_err());
        let d = FiniteSupportDistribution::hypercube_corners(3, 0.5).unwrap();
        assert_eq!(d.atoms().len(), 8);
        assert_abs_diff_eq!(d.radius_d(), 0.5 * 3f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn two_atom_posterior_mean() {
        let s = sched();
        let p = two_atom();
        for &t in &[0.1, 1.0, 3.0] {
            assert_abs_diff_eq!(p.posterior_mean(&s, &[0.0], t).unwrap()[0], 0.0, epsilon = 1e-15);
        }
        let m = p.posterior_mean(&s, &[1.5], t_half()).unwrap()[0];
        assert_abs_diff_eq!(m, 1f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(m, 0.761594, epsilon = 1e-6);
    }

    #[test]
    fn two_atom_posterior_mean_matches_bayes_quadrature() {
        // Bayes rule with a smoothed prior: p0 as a narrow mixture integrated
        // on a grid, then the limit of vanishing width.
        let s = sched();
        let (alpha, h) = s.alpha_h(t_half()).unwrap();
        let x = 1.5;
        let width = 1e-4;
        let n = 20_001;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..n {
            let x0 = -1.5 + 3.0 * k as f64 / (n - 1) as f64;
            let prior = (-(x0 - 1.0f64).powi(2) / (2.0 * width * width)).exp()
                + (-(x0 + 1.0f64).powi(2) / (2.0 * width * width)).exp();
            let like = (-(x - alpha * x0).powi(2) / (2.0 * h)).exp();
            num += x0 * prior * like;
            den += prior * like;
        }
        let quad = num / den;
        let exact = two_atom().posterior_mean(&s, &[x], t_half()).unwrap()[0];
        assert_abs_diff_eq!(quad, exact, epsilon = 1e-4);
    }

    #[test]
    fn single_atom_is_deterministic() {
        let s = sched();
        let p = FiniteSupportDistribution::uniform(vec![vec![0.3, -0.7]]).unwrap();
        let m = p.posterior_mean(&s, &[5.0, 2.0], 0.4).unwrap();
        assert_eq!(m, vec![0.3, -0.7]);
        let c = p.posterior_cov(&s, &[5.0, 2.0], 0.4).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        let probes = vec![(vec![0.0, 0.0], 0.5), (vec![1.0, -1.0], 2.0)];
        assert_eq!(p.lipschitz_beta_x(&s, &probes).unwrap(), 0.0);
        assert_eq!(p.lipschitz_beta_t(&s, &probes, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn true_score_values() {
        let s = sched();
        let p = two_atom();
        assert_abs_diff_eq!(p.true_score(&s, &[0.0], 0.5).unwrap()[0], 0.0, epsilon = 1e-15);
        let v = p.true_score(&s, &[1.5], t_half()).unwrap()[0];
        assert_abs_diff_eq!(v, (0.5 * 1f64.tanh() - 1.5) / 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(v, -1.492271, epsilon = 1e-6);
    }

    #[test]
    fn true_score_matches_finite_differences() {
        let s = sched();
        let p = FiniteSupportDistribution::new(
            vec![vec![0.6, 0.8], vec![-0.6, -0.8], vec![1.0, 0.0]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = rng.random_range(0.05..5.0);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let score = p.true_score(&s, &x, t).unwrap();
            for i in 0..2 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += FD_STEP_X;
                b[i] -= FD_STEP_X;
                let fd = (p.log_density(&s, &a, t).unwrap() - p.log_density(&s, &b, t).unwrap())
                    / (2.0 * FD_STEP_X);
                assert!((fd - score[i]).abs() < 1e-6 * score[i].abs().max(1.0), "{fd} vs {}", score[i]);
            }
        }
    }

    #[test]
    fn decomposition_matches_direct_mixture_gradient() {
        let s = sched();
        let p = FiniteSupportDistribution::hypercube_corners(3, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = rng.random_range(s.t0()..s.t_end());
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let a = p.true_score(&s, &x, t).unwrap();
            let b = p.mixture_score_direct(&s, &x, t).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tweedie_jacobian() {
        let s = sched();
        let p = FiniteSupportDistribution::new(vec![vec![0.6, 0.8], vec![-0.6, -0.8], vec![0.0, 1.0]], vec![0.4, 0.4, 0.2])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let t = rng.random_range(0.1..5.0);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (alpha, h) = s.alpha_h(t).unwrap();
            let cov = p.posterior_cov(&s, &x, t).unwrap();
            for k in 0..2 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[k] += FD_STEP_X;
                b[k] -= FD_STEP_X;
                let fa = p.posterior_mean(&s, &a, t).unwrap();
                let fb = p.posterior_mean(&s, &b, t).unwrap();
                for i in 0..2 {
                    let fd = (fa[i] - fb[i]) / (2.0 * FD_STEP_X);
                    assert!((fd - alpha / h * cov[(i, k)]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn two_atom_variance_identity() {
        let s = sched();
        let p = two_atom();
        let t = 0.8;
        let (alpha, h) = s.alpha_h(t).unwrap();
        for &x in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
            let c = p.posterior_cov(&s, &[x], t).unwrap()[(0, 0)];
            let th = (alpha * x / h).tanh();
            assert_abs_diff_eq!(c, 1.0 - th * th, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_x_two_atom_peaks_at_origin() {
        let s = sched();
        let p = two_atom();
        let t = 1.0;
        let (alpha, h) = s.alpha_h(t).unwrap();
        let probes: Vec<_> = [-1.0, -0.5, 0.0, 0.4, 2.0].iter().map(|&x| (vec![x], t)).collect();
        let beta = p.lipschitz_beta_x(&s, &probes).unwrap();
        assert_abs_diff_eq!(beta, alpha / h, epsilon = 1e-12);
        assert!(beta <= p.beta_x_bound(&s).unwrap());
        assert!(p.lipschitz_beta_x(&s, &[]).is_err());
    }

    #[test]
    fn beta_t_matches_analytic_chain_rule() {
        // d/dt tanh(alpha x / h) with alpha = e^{-t/2}, h = 1 - e^{-t}
        let s = sched();
        let p = two_atom();
        for &(x, t) in &[(0.5, 0.3), (1.2, 1.0), (-0.8, 2.5)] {
            let alpha = (-0.5 * t as f64).exp();
            let h = 1.0 - (-t as f64).exp();
            let da = -0.5 * alpha;
            let dh = (-t as f64).exp();
            let ratio_dot = (da * h - alpha * dh) / (h * h);
            let arg = alpha * x / h;
            let analytic = (1.0 - arg.tanh().powi(2)) * x * ratio_dot;
            let fd = p.time_derivative(&s, &[x], t).unwrap()[0];
            assert!((fd - analytic).abs() < 1e-4, "{fd} vs {analytic}");
        }
    }

    #[test]
    fn beta_t_grows_at_most_linearly_in_radius() {
        let s = sched();
        let p = FiniteSupportDistribution::hypercube_corners(2, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit: Vec<(Vec<f64>, f64)> = (0..400)
            .map(|_| {
                (
                    (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0.2..5.0),
                )
            })
            .collect();
        let mut prev = None;
        for &r in &[1.0, 2.0, 4.0, 8.0] {
            let probes: Vec<_> = unit
                .iter()
                .map(|(x, t)| (x.iter().map(|v| v * r).collect::<Vec<_>>(), *t))
                .collect();
            let beta = p.lipschitz_beta_t(&s, &probes, r).unwrap();
            assert!(beta.is_finite());
            if let Some(b) = prev {
                assert!(beta <= 2.5 * b, "R = {r}: {beta} vs {b}");
            }
            prev = Some(beta);
        }
        let outside = vec![(vec![3.0, 0.0], 1.0)];
        assert!(p.lipschitz_beta_t(&s, &outside, 2.0).is_err());
    }

    #[test]
    fn sample_x0_frequencies() {
        let p = FiniteSupportDistribution::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.2, 0.5, 0.3])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[p.sample_x0(&mut rng)[0] as usize] += 1;
        }
        for (c, &w) in counts.iter().zip(p.weights()) {
            let freq = *c as f64 / n as f64;
            assert!((freq - w).abs() <= 3.0 * (w * (1.0 - w) / n as f64).sqrt());
        }
        let single = FiniteSupportDistribution::uniform(vec![vec![4.0, 2.0]]).unwrap();
        assert_eq!(single.sample_x0(&mut rng), vec![4.0, 2.0]);
    }

    #[test]
    fn zero_weight_atom_is_rejected() {
        // an atom with weight zero is not part of the support
        let r = FiniteSupportDistribution::new(vec![vec![1.0], vec![2.0]], vec![1.0, 0.0]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    proptest::proptest! {
        #[test]
        fn posterior_mean_stays_in_ball(x in -50.0f64..50.0, y in -50.0f64..50.0, t in 0.011f64..5.0) {
            let s = sched();
            let p = FiniteSupportDistribution::hypercube_corners(2, 0.8).unwrap();
            let m = p.posterior_mean(&s, &[x, y], t).unwrap();
            proptest::prop_assert!(norm(&m) <= p.radius_d() * (1.0 + 1e-12));
            let c = p.posterior_cov(&s, &[x, y], t).unwrap();
            proptest::prop_assert!((c[(0, 1)] - c[(1, 0)]).abs() < 1e-15);
            let ev = SymmetricEigen::new(c.clone()).eigenvalues;
            proptest::prop_assert!(ev.iter().all(|&v| v > -1e-12));
            proptest::prop_assert!(c.trace() <= p.radius_d().powi(2) * (1.0 + 1e-12));
        }
    }
}
