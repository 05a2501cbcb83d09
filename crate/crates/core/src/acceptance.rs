//! Acceptance suite: sixteen pass/fail checks of identities, scalings and
//! end-to-end behavior, each with a printed margin.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::TrainingDataset;
use crate::diagnostics::{esm_weighted_loss, population_l2, sampling_concentration_study, McDraws, McEstimate};
use crate::error::Result;
use crate::network::TwoLayerReluNet;
use crate::ntk::{
    build_virtual_dataset, early_stopping_t_hat, eigenvalues, empirical_gram, fit_surrogate_with_gram, full_gram,
    gram, kappa, kappa_mc, label_noise, min_eigenvalue, noise_sigma, KernelModel,
};
use crate::oracle::FiniteSupportDistribution;
use crate::pipeline::{near_atom_fraction, report_json, run_pipeline};
use crate::schedule::DiffusionSchedule;
use crate::score::{backward_sample, FnScore, Projected, SamplerOptions, ScoreEstimator, ZeroPredictor};

/// Root seed of every fixture.
pub const SEED: u64 = 20240601;

/// Outcome of one criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    /// Extra measurements that do not affect the verdict.
    pub info: Vec<String>,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CriterionResult {
    /// One summary line, e.g. `[PASS] 05 block eigenvalue: ...`.
    pub fn line(&self) -> String {
        format!(
            "[{}] {:02} {}: {} ({:.1}s, budget {:.0}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    info: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            info: Vec::new(),
        }
    }
}

fn timed(id: u8, name: &'static str, budget: f64, f: impl FnOnce() -> Result<Outcome>) -> CriterionResult {
    let start = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    CriterionResult {
        id,
        name,
        pass: out.pass,
        detail: out.detail,
        info: out.info,
        seconds: start.elapsed().as_secs_f64(),
        budget_seconds: budget,
    }
}

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(SEED);
    r.set_stream(stream);
    r
}

/// Two atoms `+-(0.6, 0.8)`, `g = 1`, `t0 = 1e-2`, `T = 5`.
pub fn reference_fixture() -> (FiniteSupportDistribution, DiffusionSchedule) {
    (
        FiniteSupportDistribution::uniform(vec![vec![0.6, 0.8], vec![-0.6, -0.8]]).expect("valid atoms"),
        DiffusionSchedule::constant(1.0, 1e-2, 5.0).expect("valid schedule"),
    )
}

fn reference_dataset(n: usize) -> Result<TrainingDataset> {
    let (p, s) = reference_fixture();
    TrainingDataset::collect(&p, &s, n, &mut rng(1))
}

fn uniform_point<R: Rng>(r: &mut R, d: usize, lim: f64) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-lim..lim)).collect()
}

/// Criterion 1: `(alpha/h) f_* - x/h` against the direct mixture gradient.
pub fn score_decomposition() -> CriterionResult {
    timed(1, "score decomposition identity", 5.0, || {
        let s = DiffusionSchedule::constant(1.0, 1e-2, 5.0)?;
        let fixtures = [
            reference_fixture().0,
            FiniteSupportDistribution::hypercube_corners(3, 0.6)?,
            FiniteSupportDistribution::new(vec![vec![-1.0], vec![0.2], vec![1.5]], vec![0.5, 0.3, 0.2])?,
        ];
        let mut r = rng(11);
        let mut worst: f64 = 0.0;
        for p in &fixtures {
            for _ in 0..1000 {
                let t = r.random_range(s.t0()..=s.t_end());
                let x = uniform_point(&mut r, p.dim(), 4.0);
                let a = p.true_score(&s, &x, t)?;
                let b = p.mixture_score_direct(&s, &x, t)?;
                for (u, v) in a.iter().zip(&b) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
        Ok(Outcome::new(worst <= 1e-8, format!("max |diff| = {worst:.3e} (tol 1e-8, 3 x 1000 probes)")))
    })
}

/// Criterion 2: finite-difference Jacobian of `f_*` against `(alpha/h) Cov`.
pub fn tweedie_identity() -> CriterionResult {
    timed(2, "Tweedie identity", 10.0, || {
        let s = DiffusionSchedule::constant(1.0, 1e-2, 5.0)?;
        let p = FiniteSupportDistribution::new(
            vec![vec![0.6, 0.8], vec![-0.6, -0.8], vec![0.0, 1.0]],
            vec![0.4, 0.4, 0.2],
        )?;
        let step = 1e-5;
        let mut r = rng(12);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let t = r.random_range(s.t0()..=s.t_end());
            let x0 = p.sample_x0(&mut r);
            let x = s.sample_forward(&x0, t, &mut r)?;
            let (alpha, h) = s.alpha_h(t)?;
            let cov = p.posterior_cov(&s, &x, t)?;
            for k in 0..2 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[k] += step;
                b[k] -= step;
                let fa = p.posterior_mean(&s, &a, t)?;
                let fb = p.posterior_mean(&s, &b, t)?;
                for i in 0..2 {
                    let fd = (fa[i] - fb[i]) / (2.0 * step);
                    worst = worst.max((fd - alpha / h * cov[(i, k)]).abs());
                }
            }
        }
        Ok(Outcome::new(worst <= 1e-5, format!("max |diff| = {worst:.3e} (tol 1e-5, 200 probes)")))
    })
}

/// Criterion 3 with the closed form supplied by the caller, so that a
/// corrupted kernel can be shown to fail.
pub fn kernel_agreement_with(closed_form: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync)) -> CriterionResult {
    timed(3, "NTK closed form vs Monte Carlo", 30.0, || {
        let n_mc = 1_000_000;
        let mut r = rng(13);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
            .map(|_| {
                let mut z = uniform_point(&mut r, 2, 3.0);
                z.push(r.random_range(0.0..5.0));
                let mut w = uniform_point(&mut r, 2, 3.0);
                w.push(r.random_range(0.0..5.0));
                (z, w)
            })
            .collect();
        let zs: Result<Vec<f64>> = pairs
            .par_iter()
            .enumerate()
            .map(|(k, (z, w))| {
                let mut pr = ChaCha8Rng::seed_from_u64(SEED ^ 0x6b61_7070_61);
                pr.set_stream(k as u64);
                let mc = kappa_mc(z, w, n_mc, &mut pr)?;
                let exact = kappa(z, w);
                let ip: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
                let prob = if ip != 0.0 { (exact / ip).clamp(0.0, 1.0) } else { 0.0 };
                let se = ip.abs() * (prob * (1.0 - prob) / n_mc as f64).sqrt();
                let diff = (mc - closed_form(z, w)).abs();
                Ok(if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY })
            })
            .collect();
        let worst = zs?.into_iter().fold(0.0, f64::max);
        Ok(Outcome::new(
            worst <= 3.0,
            format!("max |mc - closed form| = {worst:.2} SE (tol 3 SE, 100 pairs, n = 1e6)"),
        ))
    })
}

pub fn kernel_agreement() -> CriterionResult {
    kernel_agreement_with(&|z, w| kappa(z, w))
}

/// Widths of the concentration sweep.
pub const SWEEP_WIDTHS: [usize; 3] = [1 << 12, 1 << 14, 1 << 16];

/// Measurements of the width sweep shared by criteria 4 and 7.
#[derive(Debug, Clone)]
pub struct WidthSweep {
    pub gram_gaps: Vec<f64>,
    pub moves_at_500: Vec<f64>,
}

pub fn width_sweep() -> Result<WidthSweep> {
    let ds = reference_dataset(32)?;
    let h = full_gram(&gram(&ds), 2);
    let eta = 0.1 / eigenvalues(&gram(&ds))?.last().copied().unwrap_or(1.0);
    let mut gaps = Vec::new();
    let mut moves = Vec::new();
    for &m in &SWEEP_WIDTHS {
        let mut net = TwoLayerReluNet::init_ntk(m, 2, ds.t0(), &mut rng(2))?;
        let h0 = empirical_gram(&net, &ds)?;
        gaps.push((h0 - &h).amax());
        let traj = net.train(&ds, eta, 500, None)?;
        moves.push(traj.max_weight_move[500]);
    }
    Ok(WidthSweep {
        gram_gaps: gaps,
        moves_at_500: moves,
    })
}

/// Criterion 4: `max |H(0) - H|` shrinks by a factor in `[2.5, 6]` from
/// `m = 2^12` to `m = 2^16`.
pub fn gram_concentration(sweep: &Result<WidthSweep>) -> CriterionResult {
    timed(4, "Gram concentration", 120.0, || {
        let s = sweep.as_ref().map_err(clone_err)?;
        let g = &s.gram_gaps;
        let factor = g[0] / g[2];
        Ok(Outcome::new(
            (2.5..=6.0).contains(&factor),
            format!(
                "gaps {:.4} / {:.4} / {:.4} for m = 2^12 / 2^14 / 2^16, factor {factor:.2} (range [2.5, 6])",
                g[0], g[1], g[2]
            ),
        ))
    })
}

/// Criterion 7: max weight movement at `tau = 500` shrinks by a factor in
/// `[3, 5.5]` from `m = 2^12` to `m = 2^16`.
pub fn weight_movement(sweep: &Result<WidthSweep>) -> CriterionResult {
    timed(7, "weight-movement scaling", 120.0, || {
        let s = sweep.as_ref().map_err(clone_err)?;
        let w = &s.moves_at_500;
        let factor = w[0] / w[2];
        Ok(Outcome::new(
            (3.0..=5.5).contains(&factor),
            format!(
                "moves {:.4} / {:.4} / {:.4} for m = 2^12 / 2^14 / 2^16, factor {factor:.2} (range [3, 5.5])",
                w[0], w[1], w[2]
            ),
        ))
    })
}

fn clone_err(e: &crate::Error) -> crate::Error {
    crate::Error::Consistency(format!("width sweep failed: {e}"))
}

/// Criterion 5: `lambda_min(H) = lambda_min(block)` for `d = 3`, `N = 8`.
pub fn block_eigenvalue() -> CriterionResult {
    timed(5, "block eigenvalue", 1.0, || {
        let p = FiniteSupportDistribution::hypercube_corners(3, 0.6)?;
        let s = DiffusionSchedule::constant(1.0, 1e-2, 5.0)?;
        let ds = TrainingDataset::collect(&p, &s, 8, &mut rng(15))?;
        let block = gram(&ds);
        let a = min_eigenvalue(&block)?;
        let b = min_eigenvalue(&full_gram(&block, 3))?;
        let diff = (a - b).abs();
        Ok(Outcome::new(
            diff <= 1e-9,
            format!("lambda_min block {a:.6e}, full {b:.6e}, |diff| = {diff:.2e} (tol 1e-9)"),
        ))
    })
}

/// Criterion 6: `L(tau) <= 1.1 (1 - eta lambda0)^tau L(0)` for `tau <= 500`.
pub fn gd_linear_convergence() -> CriterionResult {
    timed(6, "GD linear convergence", 180.0, || {
        let ds = reference_dataset(32)?;
        let eigs = eigenvalues(&gram(&ds))?;
        let eta = 0.1 / eigs.last().copied().unwrap_or(1.0);
        let mut net = TwoLayerReluNet::init_ntk(8192, 2, ds.t0(), &mut rng(2))?;
        let traj = net.train(&ds, eta, 500, None)?;
        let v = crate::diagnostics::verify_gd_convergence(&traj, eta, eigs[0]);
        Ok(Outcome::new(
            v.pass,
            format!(
                "worst L(tau) / envelope = {:.4} (slack {}), first violation {:?}",
                v.worst_ratio,
                crate::diagnostics::GD_SLACK,
                v.first_violation
            ),
        ))
    })
}

/// Criterion 8: `u^K(tau) - y = (I - eta H)^tau (u(0) - y)` for `tau <= 100`.
pub fn kernel_gd_residual() -> CriterionResult {
    timed(8, "kernel-GD residual identity", 1.0, || {
        let ds = reference_dataset(8)?;
        let d = ds.dim();
        let block = gram(&ds);
        let h = full_gram(&block, d);
        let eta = 0.5 / eigenvalues(&block)?.last().copied().unwrap_or(1.0);
        let mut r = rng(18);
        let u0: Vec<f64> = (0..ds.len() * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = nalgebra::DVector::from_vec(ds.labels());
        let mut model = KernelModel::with_gram(&ds, block, eta, &u0)?;
        let step = DMatrix::<f64>::identity(h.nrows(), h.ncols()) - &h * eta;
        let mut expect = nalgebra::DVector::from_vec(u0.clone()) - &y;
        let mut worst: f64 = 0.0;
        for tau in 0..=100 {
            if tau > 0 {
                model.step();
                expect = &step * expect;
            }
            let got = nalgebra::DVector::from_vec(model.train_predictions()) - &y;
            worst = worst.max((got - &expect).amax());
        }
        Ok(Outcome::new(worst <= 1e-10, format!("max |diff| = {worst:.3e} over tau <= 100 (tol 1e-10)")))
    })
}

/// Monte Carlo coupling term `E |P_D f_W(T_hat) - f^K_T_hat|^2` at one
/// width, together with the same quantity without the projection.
pub fn coupling_at_width(
    ds: &TrainingDataset,
    width: usize,
    paired: bool,
    eta: f64,
    t_hat: usize,
    draws: &McDraws,
) -> Result<(McEstimate, McEstimate)> {
    let (p, _) = reference_fixture();
    let mut init = rng(2);
    let mut net = if paired {
        TwoLayerReluNet::init_ntk_paired(width, 2, ds.t0(), &mut init)?
    } else {
        TwoLayerReluNet::init_ntk(width, 2, ds.t0(), &mut init)?
    };
    let u0 = net.predict_dataset(ds);
    net.train(ds, eta, t_hat, None)?;
    let mut kernel = KernelModel::new(ds, eta, &u0)?;
    kernel.run(t_hat);
    let projected = Projected {
        inner: &net,
        radius: p.radius_d(),
    };
    Ok((
        population_l2(&projected, &kernel, draws, f64::INFINITY)?,
        population_l2(&net, &kernel, draws, f64::INFINITY)?,
    ))
}

/// Criterion 9: the coupling term at `T_hat` drops at least twofold from
/// `m = 4096` to `m = 65536` on a fixed dataset, with a 3-SE allowance.
pub fn coupling_decay() -> CriterionResult {
    timed(9, "coupling decay", 600.0, || {
        let (p, s) = reference_fixture();
        let ds = reference_dataset(32)?;
        let eigs = eigenvalues(&gram(&ds))?;
        let eta = 0.1 / eigs.last().copied().unwrap_or(1.0);
        let sigma = noise_sigma(&label_noise(&ds, &p, &s)?);
        let t_hat = early_stopping_t_hat(&eigs, eta, sigma, ds.len(), 1_000_000)?;
        let draws = McDraws::generate(&p, &s, 4000, &mut rng(3))?;
        let verdict = |small: McEstimate, big: McEstimate| {
            let margin = small.mean - 2.0 * big.mean;
            let tol = 3.0 * (small.std_err.powi(2) + 4.0 * big.std_err.powi(2)).sqrt();
            (margin >= -tol, margin, tol)
        };
        let (small, raw_small) = coupling_at_width(&ds, 4096, false, eta, t_hat, &draws)?;
        let (big, raw_big) = coupling_at_width(&ds, 65536, false, eta, t_hat, &draws)?;
        let (pass, margin, tol) = verdict(small, big);
        let mut out = Outcome::new(
            pass,
            format!(
                "T_hat = {t_hat}; coupling {:.4e} (m=4096) vs {:.4e} (m=65536), ratio {:.2}; \
                 c_small - 2 c_big = {margin:.3e}, allowance -{tol:.1e}",
                small.mean,
                big.mean,
                small.mean / big.mean
            ),
        );
        out.info.push(format!(
            "without projection: {:.4e} vs {:.4e}, ratio {:.2}",
            raw_small.mean,
            raw_big.mean,
            raw_small.mean / raw_big.mean
        ));
        let (ps, raw_ps) = coupling_at_width(&ds, 4096, true, eta, t_hat, &draws)?;
        let (pb, raw_pb) = coupling_at_width(&ds, 65536, true, eta, t_hat, &draws)?;
        let (ppass, _, _) = verdict(ps, pb);
        out.info.push(format!(
            "antisymmetric init: coupling {:.4e} vs {:.4e}, ratio {:.2}, {}; without projection {:.4e} vs {:.4e}, ratio {:.2}",
            ps.mean,
            pb.mean,
            ps.mean / pb.mean,
            if ppass { "meets the 2x drop" } else { "misses the 2x drop" },
            raw_ps.mean,
            raw_pb.mean,
            raw_ps.mean / raw_pb.mean
        ));
        Ok(out)
    })
}

/// Criterion 10: `|u^K(tau) - u~^K(tau)| <= |y - y~|` at every `tau` on
/// reference runs.
pub fn mismatch_contraction() -> CriterionResult {
    timed(10, "training-sample mismatch contraction", 5.0, || {
        let (p, s) = reference_fixture();
        let mut worst_excess = f64::NEG_INFINITY;
        let mut checked = 0;
        for run in 0..3u64 {
            let ds = TrainingDataset::collect(&p, &s, 32, &mut rng(100 + run))?;
            let block = gram(&ds);
            let eigs = eigenvalues(&block)?;
            let eta = 0.1 / eigs.last().copied().unwrap_or(1.0);
            let sigma = noise_sigma(&label_noise(&ds, &p, &s)?);
            let t_hat = early_stopping_t_hat(&eigs, eta, sigma, ds.len(), 1_000_000)?;
            let sur = fit_surrogate_with_gram(&ds, &block, &p, &s, 1e-6, &[])?;
            let vds = build_virtual_dataset(&ds, |x, t| sur.predict(x, t), &p, &s)?;
            let net = TwoLayerReluNet::init_ntk(1024, 2, ds.t0(), &mut rng(200 + run))?;
            let u0 = net.predict_dataset(&ds);
            let mut a = KernelModel::with_gram(&ds, block.clone(), eta, &u0)?;
            let mut b = KernelModel::with_gram(&vds.dataset, block, eta, &u0)?;
            let gap = l2(&ds.labels(), &vds.dataset.labels());
            for tau in 0..=t_hat {
                if tau > 0 {
                    a.step();
                    b.step();
                }
                let g = l2(&a.train_predictions(), &b.train_predictions());
                worst_excess = worst_excess.max(g - gap);
                checked += 1;
            }
        }
        Ok(Outcome::new(
            worst_excess <= 1e-10,
            format!("max (|u^K - u~^K| - |y - y~|) = {worst_excess:.3e} over {checked} iterates (tol 1e-10)"),
        ))
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Criterion 11: the four-term split of the truncated loss on the
/// reference pipeline.
pub fn decomposition_inequality(out_dir: &std::path::Path) -> CriterionResult {
    timed(11, "decomposition inequality", 300.0, || {
        let mut cfg = ExperimentConfig::reference();
        cfg.out_dir = out_dir.join("reference");
        cfg.sampler.n_samples = 200;
        let out = run_pipeline(&cfg)?;
        let r = &out.report.decomposition;
        Ok(Outcome::new(
            r.inequality_holds(),
            format!(
                "total/4 = {:.4e}, terms = {:.4e} (coupling {:.2e}, label {:.2e}, stopping {:.2e}, approx {:.2e}), \
                 gap {:.3e} <= {:.3e}",
                r.total_truncated.mean / 4.0,
                r.terms_sum(),
                r.coupling.mean,
                r.label_mismatch.mean,
                r.early_stopping.mean,
                r.approximation.mean,
                r.inequality_gap,
                r.inequality_tol
            ),
        ))
    })
}

/// Fraction of `|X_t| > R` for each radius, `t ~ Unif[t0, T]`, streamed.
pub fn tail_masses(
    dist: &FiniteSupportDistribution,
    schedule: &DiffusionSchedule,
    radii: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    let chunk = 1 << 16;
    let chunks = n.div_ceil(chunk);
    let counts: Result<Vec<Vec<usize>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(SEED ^ 0x7461_696c);
            r.set_stream(c as u64);
            let mut k = vec![0; radii.len()];
            for _ in 0..chunk.min(n - c * chunk) {
                let t = r.random_range(schedule.t0()..=schedule.t_end());
                let x0 = dist.sample_x0(&mut r);
                let xt = schedule.sample_forward(&x0, t, &mut r)?;
                let nrm = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (ki, &rad) in k.iter_mut().zip(radii) {
                    if nrm > rad {
                        *ki += 1;
                    }
                }
            }
            Ok(k)
        })
        .collect();
    let mut total = vec![0usize; radii.len()];
    for k in counts? {
        for (t, v) in total.iter_mut().zip(k) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Criterion 12: `log tail(R) <= log C - R^2 / 4` with `C` fit at `R = 2`
/// (`d = 2`, so the polynomial factor is 1).
pub fn tail_envelope() -> CriterionResult {
    timed(12, "tail envelope", 60.0, || {
        let (p, s) = reference_fixture();
        let radii = [2.0, 3.0, 4.0, 5.0];
        let n = 4_000_000;
        let tails = tail_masses(&p, &s, &radii, n)?;
        let log_c = tails[0].ln() + radii[0] * radii[0] / 4.0;
        let mut pass = tails[0] > 0.0;
        let mut parts = Vec::new();
        for (&r, &m) in radii.iter().zip(&tails) {
            let env = log_c - r * r / 4.0;
            let lm = m.ln();
            pass &= lm <= env + 1e-12;
            parts.push(format!("R={r}: log tail {lm:.3} vs envelope {env:.3}"));
        }
        Ok(Outcome::new(pass, format!("{} (n = {n})", parts.join("; "))))
    })
}

/// Criterion 13: time-window violation rates over `10^4` resampled datasets.
pub fn sampling_concentration() -> CriterionResult {
    timed(13, "sampling concentration", 30.0, || {
        let (p, s) = reference_fixture();
        let n = 32;
        let trials = 10_000;
        let delta = 0.1 * s.horizon() / n as f64;
        let study = sampling_concentration_study(&p, &s, n, 1e9, delta, trials, &mut rng(14))?;
        let per_sample_dev = (study.time_rate - study.time_rate_expected).abs() / study.time_rate_expected.max(1e-300);
        let per_sample_ok = (study.time_rate - study.time_rate_expected).abs() <= 3.0 * study.time_rate_se;
        let q = 1.0 - (1.0 - study.time_rate_expected).powi(n as i32);
        let q_se = (q * (1.0 - q) / trials as f64).sqrt();
        let dataset_ok = (study.dataset_violation_rate - q).abs() <= 3.0 * q_se
            && study.dataset_violation_rate <= study.delta_time_term + 3.0 * q_se;
        Ok(Outcome::new(
            per_sample_ok && dataset_ok,
            format!(
                "per-sample rate {:.5} vs {:.5} ({:.2} SE, rel {:.3}); dataset rate {:.4} vs {:.4} \
                 ({:.2} SE), N delta/(T - t0) = {:.4}",
                study.time_rate,
                study.time_rate_expected,
                (study.time_rate - study.time_rate_expected).abs() / study.time_rate_se,
                per_sample_dev,
                study.dataset_violation_rate,
                q,
                (study.dataset_violation_rate - q).abs() / q_se,
                study.delta_time_term
            ),
        ))
    })
}

/// Criterion 14: oracle-score reverse sampling on two atoms, plus the
/// stationary Gaussian smoke test.
pub fn oracle_sampling() -> CriterionResult {
    timed(14, "oracle-score reverse sampling", 120.0, || {
        let s = DiffusionSchedule::constant(1.0, 1e-3, 5.0)?;
        let p = FiniteSupportDistribution::uniform(vec![vec![-1.0], vec![1.0]])?;
        let score = FnScore(|x: &[f64], t: f64| p.true_score(&s, x, t).expect("t >= t0"));
        let mut opts = SamplerOptions {
            n_steps: 1000,
            n_samples: 10_000,
            final_step_noise: false,
        };
        let out = backward_sample(&score, &s, 1, opts, &mut rng(4))?;
        let near = near_atom_fraction(&out, &p, 0.1);
        let balance = out.iter().filter(|v| v[0] > 0.0).count() as f64 / out.len() as f64;

        let gauss = FnScore(|x: &[f64], _t: f64| x.iter().map(|v| -v).collect::<Vec<_>>());
        let stat = backward_sample(&gauss, &s, 2, opts, &mut rng(5))?;
        let k = stat.len() as f64;
        let mut ok_stat = true;
        let mut stat_parts = Vec::new();
        for i in 0..2 {
            let mean = stat.iter().map(|v| v[i]).sum::<f64>() / k;
            let var = stat.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            ok_stat &= mean.abs() <= 3.0 / k.sqrt() && (var - 1.0).abs() <= 3.0 * (2.0 / k).sqrt();
            stat_parts.push(format!("mean {mean:.4}, var {var:.4}"));
        }
        let pass = near >= 0.95 && (balance - 0.5).abs() <= 0.03 && ok_stat;
        let mut res = Outcome::new(
            pass,
            format!(
                "within 0.1 of an atom {:.2}% (need 95%), balance {balance:.4}; stationary N(0, I): {}",
                100.0 * near,
                stat_parts.join(" / ")
            ),
        );
        opts.final_step_noise = true;
        let noisy = backward_sample(&score, &s, 1, opts, &mut rng(4))?;
        res.info.push(format!(
            "with noise on the final step: {:.2}% within 0.1 of an atom",
            100.0 * near_atom_fraction(&noisy, &p, 0.1)
        ));
        Ok(res)
    })
}

/// Criterion 15: trained net (`m = 16384`, `N = 256`) stopped at `T_hat`
/// against the zero predictor in weighted score loss.
pub fn end_to_end_score() -> CriterionResult {
    timed(15, "end-to-end learned score", 900.0, || {
        let (p, s) = reference_fixture();
        let ds = reference_dataset(256)?;
        let eigs = eigenvalues(&gram(&ds))?;
        let eta = 0.1 / eigs.last().copied().unwrap_or(1.0);
        let sigma = noise_sigma(&label_noise(&ds, &p, &s)?);
        let t_hat = early_stopping_t_hat(&eigs, eta, sigma, ds.len(), 1_000_000)?;
        let draws = McDraws::generate(&p, &s, 20_000, &mut rng(3))?;
        let zero = ZeroPredictor { dim: 2 };
        let base = esm_weighted_loss(&ScoreEstimator::new(&zero, &s, p.radius_d())?, &p, &s, &draws)?;
        let mut net = TwoLayerReluNet::init_ntk(16384, 2, ds.t0(), &mut rng(2))?;
        let mut done = 0;
        let mut checkpoints = Vec::new();
        for stop in [t_hat / 4, t_hat / 2] {
            net.train(&ds, eta, stop - done, None)?;
            done = stop;
            let e = esm_weighted_loss(&ScoreEstimator::new(&net, &s, p.radius_d())?, &p, &s, &draws)?;
            checkpoints.push(format!("ratio {:.3} at tau = {stop}", e.mean / base.mean));
        }
        net.train(&ds, eta, t_hat - done, None)?;
        let got = esm_weighted_loss(&ScoreEstimator::new(&net, &s, p.radius_d())?, &p, &s, &draws)?;
        let ratio = got.mean / base.mean;
        let mut out = Outcome::new(
            ratio <= 0.5,
            format!(
                "T_hat = {t_hat}; esm {:.4e} +- {:.1e} vs zero baseline {:.4e}, ratio {ratio:.3} (need <= 0.5)",
                got.mean, got.std_err, base.mean
            ),
        );
        out.info.push(format!("same run earlier: {}", checkpoints.join(", ")));
        Ok(out)
    })
}

/// Small pipeline fixture used for the determinism check.
pub fn small_config(out_dir: std::path::PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference();
    cfg.out_dir = out_dir;
    cfg.training.n = 16;
    cfg.training.m = 512;
    cfg.training.max_iters = 300;
    cfg.mc.n_mc = 2000;
    cfg.sampler.n_steps = 100;
    cfg.sampler.n_samples = 100;
    cfg.surrogate.n_probes = 64;
    cfg
}

/// Criterion 16: two runs of the same config give byte-identical report
/// JSON, both in memory and on disk.
pub fn determinism(out_dir: &std::path::Path) -> CriterionResult {
    timed(16, "determinism", 60.0, || {
        let cfg = small_config(out_dir.join("determinism"));
        let path = cfg.out_dir.join("report.json");
        let a = run_pipeline(&cfg)?;
        let fa = std::fs::read(&path)?;
        std::fs::remove_file(&path)?;
        let b = run_pipeline(&cfg)?;
        let fb = std::fs::read(&path)?;
        let same = report_json(&a.report)? == report_json(&b.report)? && fa == fb;
        Ok(Outcome::new(same, format!("report JSON {} bytes, identical: {same}", fa.len())))
    })
}

/// Runs every criterion in order, calling `on_result` as each finishes.
pub fn run_acceptance(out_dir: &std::path::Path, mut on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut all = Vec::new();
    let mut push = |r: CriterionResult, all: &mut Vec<CriterionResult>| {
        on_result(&r);
        all.push(r);
    };
    push(score_decomposition(), &mut all);
    push(tweedie_identity(), &mut all);
    push(kernel_agreement(), &mut all);
    let start = Instant::now();
    let sweep = width_sweep();
    let sweep_secs = start.elapsed().as_secs_f64();
    let mut c4 = gram_concentration(&sweep);
    c4.seconds += sweep_secs;
    push(c4, &mut all);
    push(block_eigenvalue(), &mut all);
    push(gd_linear_convergence(), &mut all);
    let mut c7 = weight_movement(&sweep);
    c7.seconds += sweep_secs;
    push(c7, &mut all);
    push(kernel_gd_residual(), &mut all);
    push(coupling_decay(), &mut all);
    push(mismatch_contraction(), &mut all);
    push(decomposition_inequality(out_dir), &mut all);
    push(tail_envelope(), &mut all);
    push(sampling_concentration(), &mut all);
    push(oracle_sampling(), &mut all);
    push(end_to_end_score(), &mut all);
    push(determinism(out_dir), &mut all);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_masses_decrease_with_radius() {
        let (p, s) = reference_fixture();
        let t = tail_masses(&p, &s, &[0.5, 1.0, 2.0, 3.0], 20_000).unwrap();
        assert!(t.windows(2).all(|w| w[0] >= w[1]), "{t:?}");
        assert!(t[0] > 0.5);
    }

    #[test]
    fn result_line_format() {
        let r = CriterionResult {
            id: 5,
            name: "block eigenvalue",
            pass: true,
            detail: "ok".into(),
            info: vec![],
            seconds: 0.01,
            budget_seconds: 1.0,
        };
        assert_eq!(r.line(), "[PASS] 05 block eigenvalue: ok (0.0s, budget 1s)");
    }

    #[test]
    fn cheap_criteria_pass() {
        let tmp = tempfile::tempdir().unwrap();
        for r in [score_decomposition(), block_eigenvalue(), kernel_gd_residual(), determinism(tmp.path())] {
            assert!(r.pass, "{}", r.line());
        }
    }
}
