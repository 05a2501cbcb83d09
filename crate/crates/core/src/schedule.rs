//! Forward OU noising schedule.
//!
//! The forward process `dX = -g(t)/2 X dt + sqrt(g(t)) dB` has the Gaussian
//! transition kernel `X_t | X_0 ~ N(alpha(t) X_0, h(t) I)` with
//! `alpha(t) = exp(-1/2 int_0^t g)` and `h(t) = 1 - alpha(t)^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighting function `g` of the forward SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GSpec {
    Constant(f64),
    /// `g(t) = values[i]` on `[breaks[i], breaks[i + 1])`; the last value
    /// extends to the end of the horizon.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
}

impl GSpec {
    fn validate(&self) -> Result<()> {
        match self {
            GSpec::Constant(v) => {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::domain(format!("g must be positive and finite, got {v}")));
                }
            }
            GSpec::Piecewise { breaks, values } => {
                if breaks.is_empty() || breaks.len() != values.len() {
                    return Err(Error::domain(
                        "piecewise g needs matching, non-empty breaks and values",
                    ));
                }
                if breaks[0] != 0.0 {
                    return Err(Error::domain("piecewise g must start at t = 0"));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::domain("piecewise g breaks must be strictly increasing"));
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::domain("piecewise g values must be positive and finite"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            GSpec::Constant(v) => *v,
            GSpec::Piecewise { breaks, values } => {
                let idx = breaks.partition_point(|&b| b <= t).saturating_sub(1);
                values[idx]
            }
        }
    }
}

/// Diffusion schedule: `g`, the stabilization time `t0` and horizon `t_end`.
///
/// Immutable after construction. For non-constant `g` the cumulative integral
/// is tabulated once with the composite trapezoid rule.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    g: GSpec,
    t0: f64,
    t_end: f64,
    quad_steps: usize,
    // cumulative trapezoid integral of g at the quadrature nodes
    cumulative: Vec<f64>,
}

pub const DEFAULT_QUAD_STEPS: usize = 10_000;

impl DiffusionSchedule {
    pub fn new(g: GSpec, t0: f64, t_end: f64, quad_steps: usize) -> Result<Self> {
        g.validate()?;
        if !(t0 > 0.0 && t0 < t_end && t_end.is_finite()) {
            return Err(Error::domain(format!(
                "need 0 < t0 < t_end, got t0 = {t0}, t_end = {t_end}"
            )));
        }
        if quad_steps == 0 {
            return Err(Error::domain("quad_steps must be positive"));
        }
        let cumulative = match &g {
            GSpec::Constant(_) => Vec::new(),
            GSpec::Piecewise { .. } => {
                let dt = t_end / quad_steps as f64;
                let mut acc = Vec::with_capacity(quad_steps + 1);
                acc.push(0.0);
                let mut total = 0.0;
                for k in 0..quad_steps {
                    let a = k as f64 * dt;
                    let b = (k + 1) as f64 * dt;
                    total += 0.5 * dt * (g.eval(a) + g.eval(b));
                    acc.push(total);
                }
                acc
            }
        };
        Ok(Self {
            g,
            t0,
            t_end,
            quad_steps,
            cumulative,
        })
    }

    /// Constant `g` schedule.
    pub fn constant(g: f64, t0: f64, t_end: f64) -> Result<Self> {
        Self::new(GSpec::Constant(g), t0, t_end, DEFAULT_QUAD_STEPS)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn quad_steps(&self) -> usize {
        self.quad_steps
    }

    pub fn g_spec(&self) -> &GSpec {
        &self.g
    }

    /// Length of the training interval, `T - T0`.
    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn g(&self, t: f64) -> f64 {
        self.g.eval(t)
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let eps = 1e-12 * self.t_end.max(1.0);
        if !(t >= -eps && t <= self.t_end + eps) {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.t_end
            )));
        }
        Ok(t.clamp(0.0, self.t_end))
    }

    fn check_training_time(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        if t < self.t0 * (1.0 - 1e-12) {
            return Err(Error::domain(format!(
                "time {t} below t0 = {}",
                self.t0
            )));
        }
        Ok(t)
    }

    /// `int_0^t g(s) ds`.
    fn integral(&self, t: f64) -> f64 {
        match &self.g {
            GSpec::Constant(v) => v * t,
            GSpec::Piecewise { .. } => {
                let dt = self.t_end / self.quad_steps as f64;
                let k = ((t / dt).floor() as usize).min(self.quad_steps);
                let node = k as f64 * dt;
                let partial = if t > node {
                    0.5 * (t - node) * (self.g.eval(node) + self.g.eval(t))
                } else {
                    0.0
                };
                self.cumulative[k] + partial
            }
        }
    }

    /// Returns `(alpha(t), h(t))`.
    pub fn alpha_h(&self, t: f64) -> Result<(f64, f64)> {
        let t = self.check_time(t)?;
        let big_g = self.integral(t);
        let alpha = (-0.5 * big_g).exp();
        // h = 1 - exp(-G), accurate for small t
        let h = -(-big_g).exp_m1();
        Ok((alpha, h))
    }

    /// Time weighting `lambda(t) = h(t)^2 / alpha(t)^2` on `[t0, t_end]`.
    pub fn lambda_weight(&self, t: f64) -> Result<f64> {
        let t = self.check_training_time(t)?;
        let (alpha, h) = self.alpha_h(t)?;
        Ok(h * h / (alpha * alpha))
    }

    /// Draws `X_t ~ N(alpha(t) x0, h(t) I)`.
    pub fn sample_forward<R: Rng + ?Sized>(&self, x0: &[f64], t: f64, rng: &mut R) -> Result<Vec<f64>> {
        let (alpha, h) = self.alpha_h(t)?;
        if h == 0.0 {
            return Ok(x0.to_vec());
        }
        let sd = h.sqrt();
        Ok(x0
            .iter()
            .map(|&v| {
                let xi: f64 = rng.sample(StandardNormal);
                alpha * v + sd * xi
            })
            .collect())
    }

    /// Conditional score `grad_x log p_{t|0}(xt | x0) = (alpha x0 - xt) / h`.
    pub fn conditional_score(&self, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
        if x0.len() != xt.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                got: xt.len(),
            });
        }
        let (alpha, h) = self.alpha_h(t)?;
        if h == 0.0 {
            return Err(Error::Singularity(format!("h({t}) = 0")));
        }
        Ok(x0
            .iter()
            .zip(xt)
            .map(|(&a, &b)| (alpha * a - b) / h)
            .collect())
    }

    /// `alpha / h` at time `t`, with the `h = 0` singularity reported.
    pub(crate) fn alpha_over_h(&self, t: f64) -> Result<(f64, f64)> {
        let (alpha, h) = self.alpha_h(t)?;
        if h == 0.0 {
            return Err(Error::Singularity(format!("h({t}) = 0")));
        }
        Ok((alpha, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> DiffusionSchedule {
        DiffusionSchedule::constant(1.0, 1e-3, 5.0).unwrap()
    }

    #[test]
    fn alpha_h_closed_form_values() {
        let s = unit();
        assert_eq!(s.alpha_h(0.0).unwrap(), (1.0, 0.0));
        let (a, h) = s.alpha_h(1.0).unwrap();
        assert_abs_diff_eq!(a, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(a, 0.606531, epsilon = 1e-6);
        assert_abs_diff_eq!(h, 0.632121, epsilon = 1e-6);
        let (a, h) = s.alpha_h(2.0 * 2f64.ln()).unwrap();
        assert_abs_diff_eq!(a, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(h, 0.75, epsilon = 1e-14);
    }

    #[test]
    fn time_outside_horizon_is_rejected() {
        let s = unit();
        assert!(matches!(s.alpha_h(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.alpha_h(5.5), Err(Error::Domain(_))));
        assert!(matches!(s.lambda_weight(1e-4), Err(Error::Domain(_))));
    }

    #[test]
    fn lambda_weight_values() {
        let s = unit();
        assert_abs_diff_eq!(s.lambda_weight(2.0 * 2f64.ln()).unwrap(), 2.25, epsilon = 1e-12);
        // h ~ t and alpha ~ 1 near zero
        let tiny = DiffusionSchedule::constant(1.0, 1e-6, 5.0).unwrap();
        let lw = tiny.lambda_weight(1e-6).unwrap();
        assert!((lw / 1e-12 - 1.0).abs() < 1e-5, "{lw}");
        let mut prev = 0.0;
        for k in 1..=50 {
            let v = s.lambda_weight(0.1 * k as f64).unwrap();
            assert!(v.is_finite() && v > prev);
            prev = v;
        }
    }

    #[test]
    fn piecewise_matches_constant_when_flat() {
        let pw = DiffusionSchedule::new(
            GSpec::Piecewise {
                breaks: vec![0.0, 2.0],
                values: vec![1.0, 1.0],
            },
            1e-3,
            5.0,
            DEFAULT_QUAD_STEPS,
        )
        .unwrap();
        let c = unit();
        for &t in &[0.0, 0.3, 1.0, 2.5, 4.99, 5.0] {
            let (a1, h1) = pw.alpha_h(t).unwrap();
            let (a2, h2) = c.alpha_h(t).unwrap();
            assert_abs_diff_eq!(a1, a2, epsilon = 1e-10);
            assert_abs_diff_eq!(h1, h2, epsilon = 1e-10);
        }
    }

    #[test]
    fn piecewise_two_levels() {
        let pw = DiffusionSchedule::new(
            GSpec::Piecewise {
                breaks: vec![0.0, 1.0],
                values: vec![2.0, 0.5],
            },
            1e-3,
            4.0,
            DEFAULT_QUAD_STEPS,
        )
        .unwrap();
        // int_0^3 g = 2 + 1 = 3; the jump costs at most one panel of error
        let (a, h) = pw.alpha_h(3.0).unwrap();
        assert_abs_diff_eq!(a, (-1.5f64).exp(), epsilon = 1e-3);
        assert!((a * a + h - 1.0).abs() < 1e-8);
    }

    #[test]
    fn sample_forward_at_zero_is_identity() {
        let s = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = [0.3, -1.2, 4.0];
        assert_eq!(s.sample_forward(&x0, 0.0, &mut rng).unwrap(), x0.to_vec());
    }

    #[test]
    fn sample_forward_moments() {
        let s = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = [1.5, -0.5];
        let t = 0.7;
        let (alpha, h) = s.alpha_h(t).unwrap();
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let x = s.sample_forward(&x0, t, &mut rng).unwrap();
            for i in 0..2 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((mean - alpha * x0[i]).abs() <= 4.0 * h.sqrt() / (n as f64).sqrt());
            assert!((var / h - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn conditional_score_values() {
        let s = unit();
        assert_eq!(s.conditional_score(&[0.0], &[0.0], 1.0).unwrap(), vec![0.0]);
        let t = 2.0 * 2f64.ln();
        let v = s.conditional_score(&[1.0], &[1.5], t).unwrap();
        assert_abs_diff_eq!(v[0], -4.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(
            s.conditional_score(&[1.0], &[1.0], 0.0),
            Err(Error::Singularity(_))
        ));
    }

    fn log_gauss(x: &[f64], mean: &[f64], var: f64) -> f64 {
        let d = x.len() as f64;
        let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
    }

    #[test]
    fn conditional_score_matches_finite_differences() {
        let s = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = rng.random_range(0.05..5.0);
            let x0: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xt: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (alpha, h) = s.alpha_h(t).unwrap();
            let mean: Vec<f64> = x0.iter().map(|v| alpha * v).collect();
            let analytic = s.conditional_score(&x0, &xt, t).unwrap();
            let step = 1e-5;
            for i in 0..3 {
                let mut p = xt.clone();
                let mut m = xt.clone();
                p[i] += step;
                m[i] -= step;
                let fd = (log_gauss(&p, &mean, h) - log_gauss(&m, &mean, h)) / (2.0 * step);
                assert!((fd - analytic[i]).abs() < 1e-6 * analytic[i].abs().max(1.0));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn alpha_h_identity_and_monotone(t1 in 0.0f64..5.0, dt in 1e-6f64..1.0, g in 0.1f64..3.0) {
            let s = DiffusionSchedule::constant(g, 1e-3, 6.0).unwrap();
            let (a1, h1) = s.alpha_h(t1).unwrap();
            let (a2, h2) = s.alpha_h(t1 + dt).unwrap();
            proptest::prop_assert!((a1 * a1 + h1 - 1.0).abs() < 1e-12);
            proptest::prop_assert!(a2 < a1 && h2 > h1);
        }
    }
}
