//! Monte Carlo population losses, the four-term error split, tail mass,
//! convergence and concentration checks, and closed-form bound calculators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TrainTrajectory;
use crate::oracle::{norm, FiniteSupportDistribution};
use crate::score::{Predictor, ScoreEstimator};
use crate::schedule::DiffusionSchedule;

/// Draws generated per parallel stream.
const DRAW_CHUNK: usize = 4096;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_err: f64::NAN,
                n,
            };
        }
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / nf).sqrt(),
            n,
        }
    }
}

/// One draw of `(t, X0, X_t)` with `t ~ Unif[t0, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
}

/// A fixed set of draws shared between estimators so that paired
/// comparisons use identical randomness.
#[derive(Debug, Clone)]
pub struct McDraws {
    pub draws: Vec<Draw>,
}

impl McDraws {
    pub fn generate<R: Rng + ?Sized>(
        dist: &FiniteSupportDistribution,
        schedule: &DiffusionSchedule,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_mc == 0 {
            return Err(Error::domain("n_mc must be at least 1"));
        }
        let base: u64 = rng.random();
        let chunks = n_mc.div_ceil(DRAW_CHUNK);
        let parts: Result<Vec<Vec<Draw>>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut r = ChaCha8Rng::seed_from_u64(base);
                r.set_stream(c as u64);
                let count = DRAW_CHUNK.min(n_mc - c * DRAW_CHUNK);
                (0..count)
                    .map(|_| {
                        let t = r.random_range(schedule.t0()..=schedule.t_end());
                        let x0 = dist.sample_x0(&mut r);
                        let xt = schedule.sample_forward(&x0, t, &mut r)?;
                        Ok(Draw { t, x0, xt })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            draws: parts?.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    fn map_values(&self, f: impl Fn(&Draw) -> Result<f64> + Sync + Send) -> Result<Vec<f64>> {
        self.draws.par_iter().map(f).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// `(1/(T - t0)) int E[|f_a - f_b|^2 1{|X_t| <= R}] dt` over shared draws.
pub fn population_l2(
    f_a: &dyn Predictor,
    f_b: &dyn Predictor,
    draws: &McDraws,
    radius_r: f64,
) -> Result<McEstimate> {
    let v = draws.map_values(|d| {
        if norm(&d.xt) > radius_r {
            return Ok(0.0);
        }
        Ok(sq_dist(&f_a.predict(&d.xt, d.t)?, &f_b.predict(&d.xt, d.t)?))
    })?;
    Ok(McEstimate::from_values(&v))
}

/// Convenience form of [`population_l2`] drawing fresh samples.
pub fn population_l2_mc<R: Rng + ?Sized>(
    f_a: &dyn Predictor,
    f_b: &dyn Predictor,
    schedule: &DiffusionSchedule,
    dist: &FiniteSupportDistribution,
    radius_r: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let draws = McDraws::generate(dist, schedule, n_mc, rng)?;
    population_l2(f_a, f_b, &draws, radius_r)
}

/// `(1/(T - t0)) int lambda(t) E|s(X_t, t) - grad log p_t(X_t)|^2 dt`.
pub fn esm_weighted_loss(
    est: &ScoreEstimator<'_>,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    draws: &McDraws,
) -> Result<McEstimate> {
    let v = draws.map_values(|d| {
        let s = est.score_at(&d.xt, d.t)?;
        let truth = dist.true_score(schedule, &d.xt, d.t)?;
        Ok(schedule.lambda_weight(d.t)? * sq_dist(&s, &truth))
    })?;
    Ok(McEstimate::from_values(&v))
}

/// `(1/(T - t0)) int P(|X_t| > R) dt`.
pub fn tail_mass(draws: &McDraws, radius_r: f64) -> McEstimate {
    let v: Vec<f64> = draws
        .draws
        .par_iter()
        .map(|d| if norm(&d.xt) > radius_r { 1.0 } else { 0.0 })
        .collect();
    McEstimate::from_values(&v)
}

/// Parameters echoed into a [`DecompositionReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEcho {
    pub radius_r: f64,
    pub delta_margin: f64,
    pub width_m: usize,
    pub n_samples: usize,
    pub eta: f64,
    pub t_hat: usize,
    pub seeds: Vec<u64>,
}

/// The four-term split of the truncated estimation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub coupling: McEstimate,
    pub label_mismatch: McEstimate,
    pub early_stopping: McEstimate,
    pub approximation: McEstimate,
    pub tail_mass: McEstimate,
    pub total_truncated: McEstimate,
    pub esm_weighted: McEstimate,
    /// `total_truncated / 4 - (sum of the four terms)`; non-positive when the
    /// split holds.
    pub inequality_gap: f64,
    /// Three combined standard errors of the gap.
    pub inequality_tol: f64,
    pub config: ReportEcho,
}

impl DecompositionReport {
    pub fn terms_sum(&self) -> f64 {
        self.coupling.mean + self.label_mismatch.mean + self.early_stopping.mean + self.approximation.mean
    }

    pub fn inequality_holds(&self) -> bool {
        self.inequality_gap <= self.inequality_tol
    }
}

/// Predictors entering the split, all fit on the same training inputs.
pub struct DecompositionInputs<'a> {
    /// `P_D o f_W(tau)`.
    pub net: &'a dyn Predictor,
    /// `f^K_tau` on the real labels.
    pub kernel: &'a dyn Predictor,
    /// `f~^K_tau` on the virtual labels.
    pub virtual_kernel: &'a dyn Predictor,
    /// The surrogate `f_H`.
    pub surrogate: &'a dyn Predictor,
    /// Input fingerprints of the components, in the order dataset, kernel,
    /// virtual kernel, surrogate.
    pub fingerprints: [&'a str; 4],
}

/// Evaluates every term on one shared draw set.
pub fn decomposition_report(
    inputs: &DecompositionInputs<'_>,
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    draws: &McDraws,
    radius_d: f64,
    echo: ReportEcho,
) -> Result<DecompositionReport> {
    let fp = inputs.fingerprints;
    if fp.iter().any(|f| *f != fp[0]) {
        return Err(Error::Consistency(
            "components were fit on different training inputs".into(),
        ));
    }
    let r = echo.radius_r;
    let oracle = crate::score::OraclePredictor { dist, schedule };
    let terms: Result<Vec<[f64; 6]>> = draws
        .draws
        .par_iter()
        .map(|d| {
            if norm(&d.xt) > r {
                return Ok([0.0; 6]);
            }
            let a = inputs.net.predict(&d.xt, d.t)?;
            let b = inputs.kernel.predict(&d.xt, d.t)?;
            let c = inputs.virtual_kernel.predict(&d.xt, d.t)?;
            let h = inputs.surrogate.predict(&d.xt, d.t)?;
            let f = oracle.predict(&d.xt, d.t)?;
            let parts = [sq_dist(&a, &b), sq_dist(&b, &c), sq_dist(&c, &h), sq_dist(&h, &f), sq_dist(&a, &f)];
            let gap = parts[4] / 4.0 - parts[..4].iter().sum::<f64>();
            Ok([parts[0], parts[1], parts[2], parts[3], parts[4], gap])
        })
        .collect();
    let terms = terms?;
    let column = |k: usize| McEstimate::from_values(&terms.iter().map(|v| v[k]).collect::<Vec<_>>());
    let gap = column(5);
    let est = ScoreEstimator::new(inputs.net, schedule, radius_d)?;
    Ok(DecompositionReport {
        coupling: column(0),
        label_mismatch: column(1),
        early_stopping: column(2),
        approximation: column(3),
        tail_mass: tail_mass(draws, r),
        total_truncated: column(4),
        esm_weighted: esm_weighted_loss(&est, dist, schedule, draws)?,
        inequality_gap: gap.mean,
        inequality_tol: 3.0 * gap.std_err,
        config: echo,
    })
}

/// Result of checking `L(tau) <= 1.1 (1 - eta lambda0)^tau L(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdVerdict {
    pub pass: bool,
    /// Largest `L(tau) / ((1 - eta lambda0)^tau L(0))`.
    pub worst_ratio: f64,
    pub first_violation: Option<usize>,
}

pub const GD_SLACK: f64 = 1.1;

pub fn verify_gd_convergence(traj: &TrainTrajectory, eta: f64, lambda0: f64) -> GdVerdict {
    let l0 = traj.losses.first().copied().unwrap_or(0.0);
    let rate = 1.0 - eta * lambda0;
    let mut worst: f64 = 0.0;
    let mut first = None;
    for (tau, &l) in traj.losses.iter().enumerate() {
        let env = rate.powi(tau as i32) * l0;
        let ratio = if l == 0.0 {
            0.0
        } else if env > 0.0 {
            l / env
        } else {
            f64::INFINITY
        };
        worst = worst.max(ratio);
        if ratio > GD_SLACK && first.is_none() {
            first = Some(tau);
        }
    }
    GdVerdict {
        pass: first.is_none(),
        worst_ratio: worst,
        first_violation: first,
    }
}

/// Violations of `t_j >= t0 + delta` and `|xt_j| <= R` in one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub time_violations: usize,
    pub space_violations: usize,
    /// `N delta / (T - t0)`.
    pub delta_time_term: f64,
}

pub fn check_sampling_concentration(
    ds: &crate::dataset::TrainingDataset,
    schedule: &DiffusionSchedule,
    radius_r: f64,
    delta_margin: f64,
) -> ConcentrationReport {
    let lo = schedule.t0() + delta_margin;
    let time_violations = ds.entries().iter().filter(|e| e.t < lo).count();
    let space_violations = ds.entries().iter().filter(|e| norm(&e.xt) > radius_r).count();
    ConcentrationReport {
        n: ds.len(),
        time_violations,
        space_violations,
        delta_time_term: ds.len() as f64 * delta_margin / schedule.horizon(),
    }
}

/// Violation frequencies over repeated independent datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStudy {
    pub trials: usize,
    pub n: usize,
    /// Fraction of all samples with `t_j < t0 + delta`.
    pub time_rate: f64,
    /// `delta / (T - t0)`.
    pub time_rate_expected: f64,
    /// Binomial standard error of `time_rate` under the expected rate.
    pub time_rate_se: f64,
    /// Fraction of all samples with `|xt_j| > R`.
    pub space_rate: f64,
    /// Fraction of datasets with at least one violation of either kind.
    pub dataset_violation_rate: f64,
    /// `min(1, N delta / (T - t0))`.
    pub delta_time_term: f64,
}

pub fn sampling_concentration_study<R: Rng + ?Sized>(
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    n: usize,
    radius_r: f64,
    delta_margin: f64,
    trials: usize,
    rng: &mut R,
) -> Result<ConcentrationStudy> {
    if trials == 0 || n == 0 {
        return Err(Error::domain("trials and dataset size must be positive"));
    }
    let base: u64 = rng.random();
    let reports: Result<Vec<ConcentrationReport>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(base);
            r.set_stream(k as u64);
            let ds = crate::dataset::TrainingDataset::collect(dist, schedule, n, &mut r)?;
            Ok(check_sampling_concentration(&ds, schedule, radius_r, delta_margin))
        })
        .collect();
    let reports = reports?;
    let total = (trials * n) as f64;
    let p = delta_margin / schedule.horizon();
    Ok(ConcentrationStudy {
        trials,
        n,
        time_rate: reports.iter().map(|r| r.time_violations).sum::<usize>() as f64 / total,
        time_rate_expected: p,
        time_rate_se: (p * (1.0 - p) / total).sqrt(),
        space_rate: reports.iter().map(|r| r.space_violations).sum::<usize>() as f64 / total,
        dataset_violation_rate: reports
            .iter()
            .filter(|r| r.time_violations + r.space_violations > 0)
            .count() as f64
            / trials as f64,
        delta_time_term: (n as f64 * p).min(1.0),
    })
}

/// Inputs to the closed-form bound calculators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// RKHS norm budget `R_H`.
    pub r_h: f64,
    pub radius_r: f64,
    pub d: usize,
    /// Constant in `Lambda(R) = lambda_c sqrt(d) R^2`.
    pub lambda_c: f64,
    pub c1: f64,
    pub c0: f64,
    pub delta: f64,
    pub n: usize,
    pub lambda0: f64,
    pub width_m: usize,
    pub delta_margin: f64,
    pub radius_d: f64,
    /// `T - t0`.
    pub horizon: f64,
    /// Measured early-stopping error standing in for `eps(N, T_hat)`.
    pub eps_stop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValues {
    pub a: f64,
    pub gamma_delta: f64,
    pub score_error_bound: f64,
    pub c_max: f64,
    pub c_min: f64,
}

/// `Lambda(R) = lambda_c sqrt(d) R^2`.
pub fn lambda_of_r(lambda_c: f64, d: usize, radius_r: f64) -> f64 {
    lambda_c * (d as f64).sqrt() * radius_r * radius_r
}

/// `A = c1 Lambda (sqrt(R_H) / Lambda)^{-2/d} log(sqrt(R_H) / Lambda)`.
pub fn approximation_bound(r_h: f64, lambda: f64, c1: f64, d: usize) -> Result<f64> {
    let ratio = r_h.sqrt() / lambda;
    if !(ratio > 1.0) {
        return Err(Error::domain(format!("sqrt(R_H) / Lambda = {ratio} must exceed 1")));
    }
    Ok(c1 * lambda * ratio.powf(-2.0 / d as f64) * ratio.ln())
}

/// `Gamma_delta` for given `A`.
pub fn gamma_delta(a: f64, d: usize, n: usize, c_max: f64, lambda0: f64, delta: f64) -> f64 {
    let (df, nf) = (d as f64, n as f64);
    let ratio = a * c_max / lambda0;
    let log_arg = std::f64::consts::E * c_max * (df * nf).powf(1.5) * a / lambda0;
    let first = 2.0 * df * (df * log_arg.ln().powf(1.5) * ratio) + 1.0 / nf.sqrt();
    first * first + df * df * ratio * ratio * ((1.0 / delta).ln() + nf.ln().ln())
}

/// Evaluates `A`, `Gamma_delta` and the total bound on the truncated loss.
pub fn bound_values(inp: &BoundInputs) -> Result<BoundValues> {
    let lambda = lambda_of_r(inp.lambda_c, inp.d, inp.radius_r);
    let a = approximation_bound(inp.r_h, lambda, inp.c1, inp.d)?;
    let c_max = (inp.radius_r.powi(2) + inp.horizon.powi(2)).sqrt();
    let c_min = inp.delta_margin;
    let g = gamma_delta(a, inp.d, inp.n, c_max, inp.lambda0, inp.delta);
    let (df, nf, r) = (inp.d as f64, inp.n as f64, inp.radius_r);
    let total = r.powf(df - 2.0) * (-r * r / 4.0).exp()
        + 4.0 * df * a * a
        + 16.0 * inp.delta_margin * inp.radius_d.powi(2) / inp.horizon
        + df.powi(10) * nf.powi(9) * c_max.powi(12)
            / ((inp.width_m as f64).sqrt() * inp.lambda0.powi(2) * inp.delta.powi(4) * c_min.powi(2))
        + 4.0 * df * a
        + 4.0 * inp.c0 * ((df * a * g).sqrt() + g)
        + 4.0 * inp.eps_stop;
    Ok(BoundValues {
        a,
        gamma_delta: g,
        score_error_bound: total,
        c_max,
        c_min,
    })
}
