//! Seeded end-to-end runs: data, training, kernel coupling, early stopping,
//! error split, sampling, and the artifacts they leave on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitKind, SigmaSpec, StoppingRuleKind};
use crate::dataset::TrainingDataset;
use crate::diagnostics::{
    bound_values, check_sampling_concentration, decomposition_report, verify_gd_convergence, BoundInputs,
    BoundValues, ConcentrationReport, DecompositionInputs, DecompositionReport, GdVerdict, McDraws, ReportEcho,
};
use crate::error::{Error, Result};
use crate::network::TwoLayerReluNet;
use crate::ntk::{
    build_virtual_dataset, critical_radius, early_stopping_t_hat, eigenvalues, fit_surrogate_with_gram, gram,
    holdout_t_hat, label_noise, noise_sigma, KernelModel, SurrogateRkhsTarget,
};
use crate::oracle::FiniteSupportDistribution;
use crate::persist;
use crate::score::{backward_sample, Projected, SamplerOptions, ScoreEstimator};

/// Named random streams split from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Mc = 3,
    Sampler = 4,
    Probes = 5,
}

/// Generator for one named stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSummary {
    pub rule: StoppingRuleKind,
    pub sigma: f64,
    pub critical_radius: Option<f64>,
    pub t_hat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub init: InitKind,
    pub iterations: usize,
    pub loss_initial: f64,
    pub loss_at_t_hat: f64,
    pub loss_final: f64,
    pub max_weight_move_at_t_hat: f64,
    pub flip_count_at_t_hat: usize,
    pub gd_convergence: GdVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub ridge: f64,
    pub rkhs_norm_sq: f64,
    pub probe_sup_error: Option<f64>,
}

impl From<&SurrogateRkhsTarget> for SurrogateSummary {
    fn from(s: &SurrogateRkhsTarget) -> Self {
        Self {
            ridge: s.ridge,
            rkhs_norm_sq: s.rkhs_norm_sq,
            probe_sup_error: s.probe_sup_error,
        }
    }
}

/// `|u^K(tau) - u~^K(tau)| <= |y - y~|` over `tau <= T_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSummary {
    pub label_gap: f64,
    pub worst_prediction_gap: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub n_samples: usize,
    pub n_steps: usize,
    pub final_step_noise: bool,
    pub mean: Vec<f64>,
    /// Fraction of samples within 0.1 of some atom.
    pub near_atom_fraction: f64,
}

/// Either the bound values or the reason they could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsOutcome {
    Values(BoundValues),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub spectrum: SpectrumSummary,
    pub stopping: StoppingSummary,
    pub training: TrainingSummary,
    pub surrogate: SurrogateSummary,
    pub mismatch: MismatchSummary,
    pub decomposition: DecompositionReport,
    pub concentration: ConcentrationReport,
    pub bounds: BoundsOutcome,
    pub sampling: SamplingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    pub ok: bool,
}

/// Run metadata; unlike the report it contains wall times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
}

/// In-memory products of a run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub dataset: TrainingDataset,
    /// The network at `T_hat`.
    pub net: TwoLayerReluNet,
    pub samples: Vec<Vec<f64>>,
    pub out_dir: PathBuf,
}

struct Runner {
    out_dir: PathBuf,
    stages: Vec<StageRecord>,
    artifacts: Vec<String>,
}

impl Runner {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f();
        self.stages.push(StageRecord {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            ok: r.is_ok(),
        });
        r.map_err(|e| e.at_stage(name))
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        persist::write(&self.out_dir.join(name), contents)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

/// Runs every stage for `cfg`, writing artifacts under `cfg.out_dir`.
///
/// The manifest is written whether or not the run succeeds; on failure it
/// names the failing stage and lists the artifacts written so far.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut runner = Runner {
        out_dir: cfg.out_dir.clone(),
        stages: Vec::new(),
        artifacts: Vec::new(),
    };
    let result = run_stages(cfg, &mut runner);
    let (failed_stage, error) = match &result {
        Ok(_) => (None, None),
        Err(Error::Stage { stage, source }) => (Some(stage.to_string()), Some(source.to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    let manifest = Manifest {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        complete: result.is_ok(),
        failed_stage,
        error,
        stages: runner.stages.clone(),
        artifacts: runner.artifacts.clone(),
    };
    persist::write(&cfg.out_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    result
}

fn run_stages(cfg: &ExperimentConfig, run: &mut Runner) -> Result<PipelineOutput> {
    let schedule = cfg.build_schedule()?;
    let dist = cfg.build_distribution()?;
    let d = dist.dim();
    let n = cfg.training.n;
    let seed = cfg.seed;
    let radius_d = dist.radius_d().max(f64::MIN_POSITIVE);

    let ds = run.stage("data", || {
        TrainingDataset::collect(&dist, &schedule, n, &mut stream_rng(seed, Stream::Data))
    })?;
    run.write("dataset.csv", &persist::dataset_csv(&ds))?;

    let (block, eigs) = run.stage("gram", || {
        let block = gram(&ds);
        let eigs = eigenvalues(&block)?;
        Ok((block, eigs))
    })?;
    let lambda_min = eigs[0];
    let lambda_max = *eigs.last().expect("non-empty spectrum");
    let eta = cfg.eta(lambda_max);
    run.write(
        "gram.txt",
        &persist::matrix_text(
            &block,
            &[("kind", "ntk_block".into()), ("dataset", ds.input_fingerprint())],
        ),
    )?;

    let mut net = run.stage("init", || {
        let mut rng = stream_rng(seed, Stream::Init);
        let net = match cfg.training.init {
            InitKind::Iid => TwoLayerReluNet::init_ntk(cfg.training.m, d, schedule.t0(), &mut rng)?,
            InitKind::Paired => TwoLayerReluNet::init_ntk_paired(cfg.training.m, d, schedule.t0(), &mut rng)?,
        };
        Ok(net.with_seed(seed))
    })?;
    let u0 = net.predict_dataset(&ds);

    let stopping = run.stage("stopping", || {
        let sigma = match &cfg.stopping.sigma {
            SigmaSpec::Value(v) => *v,
            SigmaSpec::Policy(_) => noise_sigma(&label_noise(&ds, &dist, &schedule)?),
        };
        match cfg.stopping.rule {
            StoppingRuleKind::CriticalRadius => Ok(StoppingSummary {
                rule: cfg.stopping.rule,
                sigma,
                critical_radius: Some(critical_radius(&eigs, n, sigma)?),
                t_hat: early_stopping_t_hat(&eigs, eta, sigma, n, cfg.training.max_iters)?,
            }),
            StoppingRuleKind::Holdout => {
                let n_val = (cfg.stopping.holdout_fraction * n as f64).round() as usize;
                Ok(StoppingSummary {
                    rule: cfg.stopping.rule,
                    sigma,
                    critical_radius: None,
                    t_hat: holdout_t_hat(&ds, eta, n - n_val, cfg.training.max_iters)?,
                })
            }
        }
    })?;
    let t_hat = stopping.t_hat;

    let (traj, snapshot) = run.stage("train", || {
        net.train_with_snapshot(&ds, eta, cfg.training.max_iters, Some(t_hat))
    })?;
    run.write("trajectory.csv", &persist::trajectory_csv(&traj))?;
    let final_net = net.clone();
    net.set_weights(snapshot.expect("t_hat is within the run"))?;
    run.write("net_t_hat.txt", &persist::net_snapshot(&net))?;
    run.write("net_final.txt", &persist::net_snapshot(&final_net))?;
    drop(final_net);
    let training = TrainingSummary {
        init: cfg.training.init,
        iterations: traj.iterations(),
        loss_initial: traj.losses[0],
        loss_at_t_hat: traj.losses[t_hat],
        loss_final: *traj.losses.last().expect("non-empty"),
        max_weight_move_at_t_hat: traj.max_weight_move[t_hat],
        flip_count_at_t_hat: traj.flip_counts[t_hat],
        gd_convergence: verify_gd_convergence(&traj, eta, lambda_min),
    };
    drop(traj);

    let surrogate = run.stage("surrogate", || {
        let probes = McDraws::generate(&dist, &schedule, cfg.surrogate.n_probes.max(1), &mut stream_rng(seed, Stream::Probes))?;
        let probes: Vec<(Vec<f64>, f64)> = probes.draws.into_iter().map(|p| (p.xt, p.t)).collect();
        let probes = if cfg.surrogate.n_probes == 0 { Vec::new() } else { probes };
        fit_surrogate_with_gram(&ds, &block, &dist, &schedule, cfg.surrogate.ridge, &probes)
    })?;

    let (kernel, virtual_kernel, mismatch, kernel_csv) = run.stage("kernel", || {
        let vds = build_virtual_dataset(&ds, |x, t| surrogate.predict(x, t), &dist, &schedule)?;
        let mut kernel = KernelModel::with_gram(&ds, block.clone(), eta, &u0)?;
        let mut virt = KernelModel::with_gram(&vds.dataset, block.clone(), eta, &u0)?;
        let y = ds.labels();
        let y_tilde = vds.dataset.labels();
        let label_gap = dist_l2(&y, &y_tilde);
        let mut worst: f64 = 0.0;
        let mut csv = String::from("iter,residual_norm,virtual_gap\n");
        for tau in 0..=t_hat {
            if tau > 0 {
                kernel.step();
                virt.step();
            }
            let u = kernel.train_predictions();
            let gap = dist_l2(&u, &virt.train_predictions());
            worst = worst.max(gap);
            csv.push_str(&format!("{tau},{:?},{gap:?}\n", dist_l2(&u, &y)));
        }
        let mismatch = MismatchSummary {
            label_gap,
            worst_prediction_gap: worst,
            holds: worst <= label_gap + 1e-10,
        };
        Ok((kernel, virt, mismatch, csv))
    })?;
    run.write("kernel_trajectory.csv", &kernel_csv)?;
    run.write(
        "gamma.txt",
        &persist::matrix_text(
            kernel.gamma(),
            &[("iteration", t_hat.to_string()), ("eta", format!("{eta:?}"))],
        ),
    )?;

    let draws = run.stage("draws", || {
        McDraws::generate(&dist, &schedule, cfg.mc.n_mc, &mut stream_rng(seed, Stream::Mc))
    })?;
    let decomposition = run.stage("decomposition", || {
        let projected = Projected {
            inner: &net,
            radius: radius_d,
        };
        let ds_fp = ds.input_fingerprint();
        let inputs = DecompositionInputs {
            net: &projected,
            kernel: &kernel,
            virtual_kernel: &virtual_kernel,
            surrogate: &surrogate,
            fingerprints: [
                &ds_fp,
                kernel.input_fingerprint(),
                virtual_kernel.input_fingerprint(),
                surrogate.input_fingerprint(),
            ],
        };
        let echo = ReportEcho {
            radius_r: cfg.truncation.radius_r,
            delta_margin: cfg.truncation.delta,
            width_m: cfg.training.m,
            n_samples: n,
            eta,
            t_hat,
            seeds: vec![seed],
        };
        decomposition_report(&inputs, &dist, &schedule, &draws, radius_d, echo)
    })?;
    drop(draws);

    let concentration = check_sampling_concentration(&ds, &schedule, cfg.truncation.radius_r, cfg.truncation.delta);

    let bounds = run.stage("bounds", || {
        let inputs = BoundInputs {
            r_h: cfg.bounds.r_h.unwrap_or(surrogate.rkhs_norm_sq),
            radius_r: cfg.truncation.radius_r,
            d,
            lambda_c: cfg.bounds.lambda_c,
            c1: cfg.bounds.c1,
            c0: cfg.bounds.c0,
            delta: cfg.bounds.delta,
            n,
            lambda0: lambda_min,
            width_m: cfg.training.m,
            delta_margin: cfg.truncation.delta,
            radius_d,
            horizon: schedule.horizon(),
            eps_stop: decomposition.early_stopping.mean,
        };
        Ok(match bound_values(&inputs) {
            Ok(v) => BoundsOutcome::Values(v),
            Err(e) => BoundsOutcome::Error(e.to_string()),
        })
    })?;

    let samples = run.stage("sampling", || {
        let est = ScoreEstimator::new(&net, &schedule, radius_d)?;
        let opts = SamplerOptions {
            n_steps: cfg.sampler.n_steps,
            n_samples: cfg.sampler.n_samples,
            final_step_noise: cfg.sampler.final_step_noise,
        };
        backward_sample(&est, &schedule, d, opts, &mut stream_rng(seed, Stream::Sampler))
    })?;
    run.write("samples.csv", &persist::points_csv(&samples))?;

    let report = PipelineReport {
        config_hash: cfg.hash(),
        seed,
        dataset_fingerprint: ds.fingerprint(),
        spectrum: SpectrumSummary {
            lambda_min,
            lambda_max,
            eta,
        },
        stopping,
        training,
        surrogate: SurrogateSummary::from(&surrogate),
        mismatch,
        decomposition,
        concentration,
        bounds,
        sampling: sampling_summary(&samples, &dist, cfg),
    };
    run.write("report.json", &report_json(&report)?)?;
    Ok(PipelineOutput {
        report,
        dataset: ds,
        net,
        samples,
        out_dir: cfg.out_dir.clone(),
    })
}

/// Reverse-samples with the score of a saved network, writing
/// `samples.csv` under `cfg.out_dir`.
pub fn sample_from_snapshot(cfg: &ExperimentConfig, snapshot: &Path) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let schedule = cfg.build_schedule()?;
    let dist = cfg.build_distribution()?;
    let net = persist::parse_net_snapshot(&std::fs::read_to_string(snapshot)?)?;
    if net.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: net.dim(),
        });
    }
    let est = ScoreEstimator::new(&net, &schedule, dist.radius_d().max(f64::MIN_POSITIVE))?;
    let opts = SamplerOptions {
        n_steps: cfg.sampler.n_steps,
        n_samples: cfg.sampler.n_samples,
        final_step_noise: cfg.sampler.final_step_noise,
    };
    let samples = backward_sample(&est, &schedule, dist.dim(), opts, &mut stream_rng(cfg.seed, Stream::Sampler))?;
    persist::write(&cfg.out_dir.join("samples.csv"), &persist::points_csv(&samples))?;
    Ok(samples)
}

/// Canonical JSON text of a report.
pub fn report_json(report: &PipelineReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

fn dist_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of `samples` within `tol` of some atom.
pub fn near_atom_fraction(samples: &[Vec<f64>], dist: &FiniteSupportDistribution, tol: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| dist.atoms().iter().any(|a| dist_l2(s, a) <= tol))
        .count();
    hits as f64 / samples.len() as f64
}

fn sampling_summary(samples: &[Vec<f64>], dist: &FiniteSupportDistribution, cfg: &ExperimentConfig) -> SamplingSummary {
    let d = dist.dim();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let k = samples.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    SamplingSummary {
        n_samples: samples.len(),
        n_steps: cfg.sampler.n_steps,
        final_step_noise: cfg.sampler.final_step_noise,
        mean,
        near_atom_fraction: near_atom_fraction(samples, dist, 0.1),
    }
}

/// Columns written by [`run_sweep`] after the axis value.
pub const SWEEP_COLUMNS: [&str; 12] = [
    "status",
    "t_hat",
    "coupling",
    "label_mismatch",
    "early_stopping",
    "approximation",
    "tail_mass",
    "total_truncated",
    "esm_weighted",
    "max_weight_move_at_t_hat",
    "gd_pass",
    "error",
];

/// One pipeline per value of the dotted numeric `axis`, each in its own
/// subdirectory of `base.out_dir`. Seeds are shared, so a width or radius
/// sweep sees the same dataset and the same Monte Carlo draws. A failing
/// run is recorded as a failed row and the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<String> {
    check_numeric_axis(base, axis)?;
    let mut csv = format!("{axis},{}\n", SWEEP_COLUMNS.join(","));
    for (k, v) in values.iter().enumerate() {
        let row = base
            .with_override(&format!("{axis}={v}"))
            .and_then(|mut c| {
                c.out_dir = sweep_dir(&base.out_dir, axis, k);
                run_pipeline(&c)
            });
        let cells = match row {
            Ok(out) => {
                let r = &out.report;
                let dec = &r.decomposition;
                vec![
                    "ok".to_string(),
                    r.stopping.t_hat.to_string(),
                    format!("{:?}", dec.coupling.mean),
                    format!("{:?}", dec.label_mismatch.mean),
                    format!("{:?}", dec.early_stopping.mean),
                    format!("{:?}", dec.approximation.mean),
                    format!("{:?}", dec.tail_mass.mean),
                    format!("{:?}", dec.total_truncated.mean),
                    format!("{:?}", dec.esm_weighted.mean),
                    format!("{:?}", r.training.max_weight_move_at_t_hat),
                    r.training.gd_convergence.pass.to_string(),
                    String::new(),
                ]
            }
            Err(e) => {
                let mut cells = vec!["failed".to_string()];
                cells.extend(std::iter::repeat_n(String::new(), SWEEP_COLUMNS.len() - 2));
                cells.push(csv_quote(&e.to_string()));
                cells
            }
        };
        csv.push_str(&format!("{v},{}\n", cells.join(",")));
    }
    Ok(csv)
}

/// Runs [`run_sweep`] and writes the table to `base.out_dir/sweep_<axis>.csv`.
pub fn run_sweep_to_file(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<PathBuf> {
    let csv = run_sweep(base, axis, values)?;
    let path = base.out_dir.join(format!("sweep_{axis}.csv"));
    persist::write(&path, &csv)?;
    Ok(path)
}

fn sweep_dir(root: &Path, axis: &str, k: usize) -> PathBuf {
    root.join(format!("sweep_{axis}_{k}"))
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn check_numeric_axis(cfg: &ExperimentConfig, axis: &str) -> Result<()> {
    let table = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut cur = &toml::Value::Table(table);
    for part in axis.split('.') {
        cur = cur
            .get(part)
            .ok_or_else(|| Error::Config(format!("sweep axis `{axis}` does not name a config field")))?;
    }
    match cur {
        toml::Value::Integer(_) | toml::Value::Float(_) => Ok(()),
        _ => Err(Error::Config(format!("sweep axis `{axis}` is not numeric"))),
    }
}
