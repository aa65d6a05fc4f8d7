//! Run configuration: a TOML document with `[dataset]`, `[model]`,
//! `[objective]`, `[train]` and `[output]` tables. Every key has a default,
//! unknown keys are rejected, and `section.key=value` overrides are applied
//! before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distributions::BetaSampler;
use crate::error::{Error, Result};
use crate::latent::TruncationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Stick-breaking memberships gating Gaussian strengths.
    #[default]
    Sparse,
    /// Gaussian posterior with no gating.
    GaussianVae,
    /// Deterministic features, no KL.
    PureAe,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(HeadKind::Sparse),
            "gaussian_vae" => Ok(HeadKind::GaussianVae),
            "pure_ae" => Ok(HeadKind::PureAe),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Lookup,
    BagOfTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub with_descriptions: bool,
    pub strict: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            with_descriptions: false,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub encoder: EncoderKind,
    pub k: usize,
    pub alpha_qry: f64,
    pub alpha_ans: f64,
    pub sigma_prior: f64,
    /// Width of encoder features and decoded representations.
    pub dim: usize,
    /// Hidden width of the posterior heads and the decoder.
    pub hidden: usize,
    pub max_tokens: usize,
    pub beta_sampler: BetaSampler,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Sparse,
            encoder: EncoderKind::Lookup,
            k: 32,
            alpha_qry: 5.0,
            alpha_ans: 5.0,
            sigma_prior: 1.0,
            dim: 256,
            hidden: 256,
            max_tokens: 64,
            beta_sampler: BetaSampler::Kumaraswamy,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn truncation(&self) -> TruncationConfig {
        TruncationConfig {
            k: self.k,
            alpha_qry: self.alpha_qry,
            alpha_ans: self.alpha_ans,
            sigma_prior: self.sigma_prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the KL terms.
    pub beta: f64,
    /// Weight of the reconstruction term.
    pub eta: f64,
    pub tau: f64,
    /// Additive margin subtracted from positive scores.
    pub gamma: f64,
    pub lambda_prior: f64,
    pub lambda_post: f64,
    /// Add each query's anchor entity to its candidate pool.
    pub self_negatives: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            eta: 1e-2,
            tau: 0.02,
            gamma: 0.02,
            lambda_prior: 0.5,
            lambda_post: 1.0,
            self_negatives: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    /// Validate every this many epochs (0 disables validation).
    pub eval_every: usize,
    /// Cap on validation triples ranked per evaluation (0 means all).
    pub eval_max_triples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 25,
            batch_size: 256,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            eval_every: 1,
            eval_max_triples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

fn parse_scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a value")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative dataset path resolves against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if cfg.dataset.path.is_relative() && !cfg.dataset.path.as_os_str().is_empty() {
            let base = path.parent().unwrap_or(Path::new("."));
            let joined = base.join(&cfg.dataset.path);
            if joined.exists() || !cfg.dataset.path.exists() {
                cfg.dataset.path = joined;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.truncation().validate()?;
        if m.dim == 0 || m.hidden == 0 || m.max_tokens == 0 {
            return Err(Error::Config("model dim, hidden and max_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", m.dropout)));
        }
        let o = &self.objective;
        for (what, v) in [
            ("tau", o.tau),
            ("lambda_prior", o.lambda_prior),
            ("lambda_post", o.lambda_post),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositive { what, value: v });
            }
        }
        for (what, v) in [("beta", o.beta), ("eta", o.eta), ("gamma", o.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::OutOfRange { what, value: v });
            }
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::NonPositive {
                what: "learning_rate",
                value: t.learning_rate,
            });
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = t.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::NonPositive {
                    what: "grad_clip",
                    value: c,
                });
            }
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::Config("adam moments must lie in [0, 1)".into()));
        }
        if t.adam_eps.is_nan() || t.adam_eps <= 0.0 {
            return Err(Error::NonPositive {
                what: "adam_eps",
                value: t.adam_eps,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml_str(
            "[objective]\nbeta = 0.5\n",
            &[
                "objective.beta=1e-2".into(),
                "model.head=gaussian_vae".into(),
                "train.seed=7".into(),
                "dataset.path=data/umls".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.objective.beta, 1e-2);
        assert_eq!(cfg.model.head, HeadKind::GaussianVae);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.dataset.path, PathBuf::from("data/umls"));
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("beta = 0.01"));
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("[train]\ngrad_clip = 0.0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[objective]\ntau = 0.0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[model]\nk = 0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[model]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["nonsense".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.grad_clip=-1.0".into()]).is_err());
    }
}
