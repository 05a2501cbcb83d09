//! Experiment configuration: a TOML document with dotted-key overrides.
//!
//! Precedence, lowest first: the config file, then `--set key=value`
//! overrides in the order given, then dedicated CLI flags such as `--seed`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};
use crate::oracle::FiniteSupportDistribution;
use crate::schedule::{DiffusionSchedule, GSpec, DEFAULT_QUAD_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub distribution: DistributionConfig,
    pub training: TrainingConfig,
    pub truncation: TruncationConfig,
    pub stopping: StoppingConfig,
    pub sampler: SamplerConfig,
    pub mc: McConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_g")]
    pub g: GSpec,
    pub t0: f64,
    pub t_end: f64,
    #[serde(default = "default_quad_steps")]
    pub quad_steps: usize,
}

fn default_g() -> GSpec {
    GSpec::Constant(1.0)
}

fn default_quad_steps() -> usize {
    DEFAULT_QUAD_STEPS
}

/// Either explicit atoms (with optional weights, uniform when absent) or a
/// named generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// `"hypercube_corners"`, using `dim` and `scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// Step size: a number, or `"c/lambda_max"` for `c / lambda_max(H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Value(f64),
    Rule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Independent neurons.
    Iid,
    /// Antisymmetric pairs; the initial output is zero.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub n: usize,
    pub m: usize,
    pub eta: EtaSpec,
    pub max_iters: usize,
    #[serde(default = "default_init")]
    pub init: InitKind,
}

fn default_init() -> InitKind {
    InitKind::Iid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    pub radius_r: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRuleKind {
    CriticalRadius,
    Holdout,
}

/// Noise level for the critical radius: a number or `"empirical"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Value(f64),
    Policy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    pub rule: StoppingRuleKind,
    #[serde(default = "default_sigma")]
    pub sigma: SigmaSpec,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
}

fn default_sigma() -> SigmaSpec {
    SigmaSpec::Policy("empirical".into())
}

fn default_holdout_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub final_step_noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_mc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_probes")]
    pub n_probes: usize,
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_probes() -> usize {
    256
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            ridge: default_ridge(),
            n_probes: default_probes(),
        }
    }
}

/// Constants of the closed-form bounds. Reported only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    /// RKHS norm budget; the fitted surrogate's norm when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_h: Option<f64>,
    #[serde(default = "one")]
    pub lambda_c: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            r_h: None,
            lambda_c: 1.0,
            c1: 1.0,
            c0: 1.0,
            delta: default_delta(),
        }
    }
}

/// Built-in reference fixture: two atoms `+-(0.6, 0.8)`, `N = 32`,
/// `m = 8192`, `T = 5`, `t0 = 1e-2`, `delta = 1e-3`, `R = D + 6`.
pub const REFERENCE_TOML: &str = r#"
seed = 20240601
out_dir = "out/reference"

[schedule]
g = 1.0
t0 = 0.01
t_end = 5.0

[distribution]
atoms = [[0.6, 0.8], [-0.6, -0.8]]

[training]
n = 32
m = 8192
eta = "0.1/lambda_max"
max_iters = 2000
init = "iid"

[truncation]
radius_r = 7.0
delta = 0.001

[stopping]
rule = "critical_radius"
sigma = "empirical"

[sampler]
n_steps = 1000
n_samples = 2000

[mc]
n_mc = 20000
"#;

impl ExperimentConfig {
    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_TOML, &[]).expect("reference config is valid")
    }

    /// Parses `text`, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.message().to_string())
            } else {
                Error::Config(format!("`{path}`: {}", inner.message()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Applies one override to an already parsed config.
    pub fn with_override(&self, kv: &str) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        apply_override(&mut table, kv)?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}` {why}")));
        let s = &self.schedule;
        if !(s.t0 > 0.0 && s.t0 < s.t_end && s.t_end.is_finite()) {
            return bad("schedule.t0", "must satisfy 0 < t0 < t_end");
        }
        if s.quad_steps == 0 {
            return bad("schedule.quad_steps", "must be positive");
        }
        self.build_schedule()?;
        self.build_distribution()?;
        let t = &self.training;
        if t.n == 0 {
            return bad("training.n", "must be at least 1");
        }
        if t.m == 0 {
            return bad("training.m", "must be at least 1");
        }
        if t.init == InitKind::Paired && t.m % 2 != 0 {
            return bad("training.m", "must be even for paired initialization");
        }
        if t.max_iters == 0 {
            return bad("training.max_iters", "must be at least 1");
        }
        match &t.eta {
            EtaSpec::Value(v) if !(*v > 0.0 && v.is_finite()) => return bad("training.eta", "must be positive"),
            EtaSpec::Rule(r) if parse_eta_rule(r).is_none() => {
                return bad("training.eta", "must be a number or of the form \"c/lambda_max\"")
            }
            _ => {}
        }
        if !(self.truncation.radius_r > 0.0) {
            return bad("truncation.radius_r", "must be positive");
        }
        if !(self.truncation.delta >= 0.0 && self.truncation.delta < s.t_end - s.t0) {
            return bad("truncation.delta", "must lie in [0, t_end - t0)");
        }
        match &self.stopping.sigma {
            SigmaSpec::Value(v) if !(*v > 0.0 && v.is_finite()) => return bad("stopping.sigma", "must be positive"),
            SigmaSpec::Policy(p) if p != "empirical" => {
                return bad("stopping.sigma", "must be a number or \"empirical\"")
            }
            _ => {}
        }
        let hf = self.stopping.holdout_fraction;
        if self.stopping.rule == StoppingRuleKind::Holdout {
            let n_val = (hf * t.n as f64).round() as usize;
            if !(hf > 0.0 && hf < 1.0) || n_val == 0 || n_val >= t.n {
                return bad("stopping.holdout_fraction", "must leave both holdout parts non-empty");
            }
        }
        if self.sampler.n_steps == 0 {
            return bad("sampler.n_steps", "must be at least 1");
        }
        if self.mc.n_mc < 2 {
            return bad("mc.n_mc", "must be at least 2");
        }
        if !(self.surrogate.ridge >= 0.0) {
            return bad("surrogate.ridge", "must be non-negative");
        }
        let b = &self.bounds;
        if !(b.delta > 0.0 && b.delta < 1.0) {
            return bad("bounds.delta", "must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        DiffusionSchedule::new(s.g.clone(), s.t0, s.t_end, s.quad_steps)
            .map_err(|e| Error::Config(format!("`schedule`: {e}")))
    }

    pub fn build_distribution(&self) -> Result<FiniteSupportDistribution> {
        let d = &self.distribution;
        let built = match (&d.atoms, &d.generator) {
            (Some(atoms), None) => match &d.weights {
                Some(w) => FiniteSupportDistribution::new(atoms.clone(), w.clone()),
                None => FiniteSupportDistribution::uniform(atoms.clone()),
            },
            (None, Some(g)) if g == "hypercube_corners" => {
                let dim = d
                    .dim
                    .ok_or_else(|| Error::Config("missing field `distribution.dim`".into()))?;
                FiniteSupportDistribution::hypercube_corners(dim, d.scale.unwrap_or(1.0))
            }
            (None, Some(g)) => {
                return Err(Error::Config(format!("`distribution.generator`: unknown generator `{g}`")))
            }
            (None, None) => {
                return Err(Error::Config(
                    "missing field `distribution.atoms` (or `distribution.generator`)".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "`distribution`: give either `atoms` or `generator`, not both".into(),
                ))
            }
        };
        built.map_err(|e| Error::Config(format!("`distribution`: {e}")))
    }

    /// Resolves the step size against `lambda_max(H)`.
    pub fn eta(&self, lambda_max: f64) -> f64 {
        match &self.training.eta {
            EtaSpec::Value(v) => *v,
            EtaSpec::Rule(r) => parse_eta_rule(r).expect("validated") / lambda_max,
        }
    }
}

/// Parses `"c/lambda_max"`.
fn parse_eta_rule(rule: &str) -> Option<f64> {
    let (c, tail) = rule.split_once('/')?;
    if tail.trim() != "lambda_max" {
        return None;
    }
    c.trim().parse::<f64>().ok().filter(|c| *c > 0.0 && c.is_finite())
}

/// Sets the dotted `key` to `value`, parsed as a TOML value (bare strings
/// are accepted when they do not parse).
pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_parses_and_round_trips() {
        let cfg = ExperimentConfig::reference();
        assert_eq!(cfg.training.m, 8192);
        assert_eq!(cfg.eta(10.0), 0.01);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = ExperimentConfig::from_toml_str(
            REFERENCE_TOML,
            &["training.m=64".into(), "training.m = 128".into(), "training.init=paired".into()],
        )
        .unwrap();
        assert_eq!(cfg.training.m, 128);
        assert_eq!(cfg.training.init, InitKind::Paired);
        let cfg = cfg.with_override("training.eta=0.5").unwrap();
        assert_eq!(cfg.training.eta, EtaSpec::Value(0.5));
        assert_ne!(cfg.hash(), ExperimentConfig::reference().hash());
    }

    #[test]
    fn missing_key_is_named() {
        let text = REFERENCE_TOML.replace("m = 8192\n", "");
        match ExperimentConfig::from_toml_str(&text, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("`m`"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let text = REFERENCE_TOML.replace("atoms = [[0.6, 0.8], [-0.6, -0.8]]\n", "");
        match ExperimentConfig::from_toml_str(&text, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("distribution.atoms"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["training.width=3".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["extra=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["training.m=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["training.eta=\"fast\"".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["stopping.sigma=\"guess\"".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["schedule.t0=9.0".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &["nokey".into()]).is_err());
        let paired_odd = ["training.init=paired".to_string(), "training.m=7".to_string()];
        assert!(ExperimentConfig::from_toml_str(REFERENCE_TOML, &paired_odd).is_err());
    }

    #[test]
    fn generator_distribution() {
        let cfg = ExperimentConfig::from_toml_str(
            &REFERENCE_TOML.replace(
                "atoms = [[0.6, 0.8], [-0.6, -0.8]]",
                "generator = \"hypercube_corners\"\ndim = 3\nscale = 0.5",
            ),
            &[],
        )
        .unwrap();
        assert_eq!(cfg.build_distribution().unwrap().atoms().len(), 8);
    }

    #[test]
    fn eta_rule_parsing() {
        assert_eq!(parse_eta_rule("0.1/lambda_max"), Some(0.1));
        assert_eq!(parse_eta_rule("0.1 / lambda_max"), Some(0.1));
        assert_eq!(parse_eta_rule("0.1/lambda_min"), None);
        assert_eq!(parse_eta_rule("-1/lambda_max"), None);
    }
}
