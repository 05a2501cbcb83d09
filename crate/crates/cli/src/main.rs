//! Command-line harness.
//!
//! Settings are resolved in increasing precedence: the built-in reference
//! config (or `--config FILE`), then each `--set key=value` in order, then
//! the dedicated flags `--seed`, `--out`, `--n-steps` and `--n-samples`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ntk_score::acceptance::run_acceptance;
use ntk_score::config::{ExperimentConfig, REFERENCE_TOML};
use ntk_score::pipeline::{run_pipeline, run_sweep_to_file, sample_from_snapshot};

#[derive(Parser)]
#[command(name = "ntk-score", version, about = "NTK-regime score estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write artifacts.
    Run(Common),
    /// Run one pipeline per value of a numeric config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `training.m`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Run the acceptance suite.
    Accept {
        /// Directory for intermediate artifacts.
        #[arg(long, default_value = "out/acceptance")]
        out: PathBuf,
    },
    /// Reverse-sample from a saved network snapshot.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Snapshot written by `run` (e.g. `net_t_hat.txt`).
        #[arg(long)]
        net: PathBuf,
    },
    /// Print the reference config.
    Config,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.m=4096`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
}

impl Common {
    fn load(&self) -> ntk_score::Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={:?}", o.display().to_string()));
        }
        if let Some(n) = self.n_steps {
            overrides.push(format!("sampler.n_steps={n}"));
        }
        if let Some(n) = self.n_samples {
            overrides.push(format!("sampler.n_samples={n}"));
        }
        match &self.config {
            Some(path) => ExperimentConfig::from_file(path, &overrides),
            None => ExperimentConfig::from_toml_str(REFERENCE_TOML, &overrides),
        }
    }
}

fn exec(cmd: Command) -> ntk_score::Result<bool> {
    match cmd {
        Command::Run(common) => {
            let cfg = common.load()?;
            let out = run_pipeline(&cfg)?;
            let r = &out.report;
            println!("wrote {}", out.out_dir.display());
            println!("T_hat = {}", r.stopping.t_hat);
            println!(
                "total_truncated = {:.4e}, coupling = {:.4e}, label_mismatch = {:.4e}, early_stopping = {:.4e}, approximation = {:.4e}",
                r.decomposition.total_truncated.mean,
                r.decomposition.coupling.mean,
                r.decomposition.label_mismatch.mean,
                r.decomposition.early_stopping.mean,
                r.decomposition.approximation.mean
            );
            Ok(true)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.load()?;
            let path = run_sweep_to_file(&cfg, &axis, &values)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Accept { out } => {
            let results = run_acceptance(&out, |r| {
                println!("{}", r.line());
                for i in &r.info {
                    println!("       info: {i}");
                }
            });
            let failed = results.iter().filter(|r| !r.pass).count();
            println!("{} passed, {failed} failed", results.len() - failed);
            Ok(failed == 0)
        }
        Command::Sample { common, net } => {
            let cfg = common.load()?;
            let samples = sample_from_snapshot(&cfg, &net)?;
            println!("wrote {} samples to {}", samples.len(), cfg.out_dir.join("samples.csv").display());
            Ok(true)
        }
        Command::Config => {
            print!("{}", REFERENCE_TOML.trim_start());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
