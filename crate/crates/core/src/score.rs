//! Score estimators `s(x, t) = (alpha / h) P_D(f(x, t)) - x / h` and the
//! Euler-Maruyama reverse-time sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::TwoLayerReluNet;
use crate::ntk::{KernelModel, SurrogateRkhsTarget};
use crate::oracle::{norm, FiniteSupportDistribution};
use crate::schedule::DiffusionSchedule;

/// Euclidean projection onto the ball of radius `radius`.
pub fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= radius {
        v.to_vec()
    } else {
        v.iter().map(|x| x * radius / n).collect()
    }
}

/// A regression function `(x, t) -> R^d` for the posterior mean.
pub trait Predictor: Sync {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl Predictor for TwoLayerReluNet {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.forward(x, t))
    }
}

impl Predictor for KernelModel {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(KernelModel::predict(self, x, t))
    }
}

impl Predictor for SurrogateRkhsTarget {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(SurrogateRkhsTarget::predict(self, x, t))
    }
}

/// The exact posterior mean `f_*`.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor<'a> {
    pub dist: &'a FiniteSupportDistribution,
    pub schedule: &'a DiffusionSchedule,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.dist.posterior_mean(self.schedule, x, t)
    }
}

/// The constant zero function.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub dim: usize,
}

impl Predictor for ZeroPredictor {
    fn predict(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dim])
    }
}

/// `P_D` applied after another predictor.
#[derive(Clone, Copy)]
pub struct Projected<'a> {
    pub inner: &'a dyn Predictor,
    pub radius: f64,
}

impl Predictor for Projected<'_> {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(project_ball(&self.inner.predict(x, t)?, self.radius))
    }
}

/// Wraps a closure.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.0)(x, t))
    }
}

/// A vector field `(x, t) -> R^d` used as the score in the reverse SDE.
pub trait ScoreField: Sync {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// Wraps a closure as a score field.
pub struct FnScore<F>(pub F);

impl<F> ScoreField for FnScore<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.0)(x, t))
    }
}

/// `s(x, t) = (alpha / h) P_D(f(x, t)) - x / h`.
#[derive(Clone, Copy)]
pub struct ScoreEstimator<'a> {
    pub predictor: &'a dyn Predictor,
    pub schedule: &'a DiffusionSchedule,
    pub radius_d: f64,
}

impl<'a> ScoreEstimator<'a> {
    pub fn new(predictor: &'a dyn Predictor, schedule: &'a DiffusionSchedule, radius_d: f64) -> Result<Self> {
        if !(radius_d > 0.0) {
            return Err(Error::domain("projection radius must be positive"));
        }
        Ok(Self {
            predictor,
            schedule,
            radius_d,
        })
    }

    /// `P_D(f(x, t))`.
    pub fn projected(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(project_ball(&self.predictor.predict(x, t)?, self.radius_d))
    }

    pub fn score_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if t < self.schedule.t0() {
            return Err(Error::domain(format!("time {t} below t0")));
        }
        let (alpha, h) = self.schedule.alpha_over_h(t)?;
        let f = self.projected(x, t)?;
        Ok(f.iter().zip(x).map(|(&fi, &xi)| (alpha * fi - xi) / h).collect())
    }
}

impl ScoreField for ScoreEstimator<'_> {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.score_at(x, t)
    }
}

/// Options for [`backward_sample`].
#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    pub n_steps: usize,
    pub n_samples: usize,
    /// Inject Brownian noise on the last step as well. When false the last
    /// step is the deterministic drift update.
    pub final_step_noise: bool,
}

/// Euler-Maruyama for
/// `dY = (g(T - s) Y / 2 + g(T - s) score(Y, T - s)) ds + sqrt(g(T - s)) dB`
/// on `s in [0, T - t0]`, `Y_0 ~ N(0, I)`, score evaluated at the left end.
///
/// Every chain draws from its own stream of a generator seeded from `rng`,
/// so the output does not depend on thread scheduling.
pub fn backward_sample<R: Rng + ?Sized>(
    field: &dyn ScoreField,
    schedule: &DiffusionSchedule,
    dim: usize,
    opts: SamplerOptions,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if opts.n_steps == 0 {
        return Err(Error::domain("n_steps must be at least 1"));
    }
    let base: u64 = rng.random();
    let span = schedule.t_end() - schedule.t0();
    let ds = span / opts.n_steps as f64;
    (0..opts.n_samples)
        .into_par_iter()
        .map(|k| {
            let mut chain = ChaCha8Rng::seed_from_u64(base);
            chain.set_stream(k as u64);
            let mut y: Vec<f64> = (0..dim).map(|_| chain.sample(StandardNormal)).collect();
            for step in 0..opts.n_steps {
                let t = schedule.t_end() - step as f64 * ds;
                let g = schedule.g(t);
                let s = field.score(&y, t)?;
                let noisy = opts.final_step_noise || step + 1 < opts.n_steps;
                let sd = (g * ds).sqrt();
                for (yi, si) in y.iter_mut().zip(&s) {
                    let drift = 0.5 * g * *yi + g * si;
                    let xi: f64 = if noisy { chain.sample(StandardNormal) } else { 0.0 };
                    *yi += drift * ds + sd * xi;
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp { step });
                }
            }
            Ok(y)
        })
        .collect()
}
