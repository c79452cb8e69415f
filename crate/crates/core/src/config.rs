//! Experiment configuration: one TOML file covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{EnvConfig, EnvConfigFile};
use crate::collect::{builtin_presets, held_out_preset, EnvPreset};
use crate::diffusion::DiffusionConfig;
use crate::dt::DtConfig;
use crate::error::{D2tError, Result};
use crate::expert::ExpertConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// λ1, decision-transformer learning rate.
    pub dt_lr: f64,
    /// λ2, diffusion learning rate.
    pub dm_lr: f64,
    /// I1, decision-transformer iterations.
    pub dt_iters: usize,
    /// I2, diffusion iterations.
    pub dm_iters: usize,
    pub dt_batch: usize,
    pub dm_batch: usize,
    pub weight_decay: f64,
    /// Fine-tuning learning rate is `dt_lr × finetune_lr_factor`.
    pub finetune_lr_factor: f64,
    pub finetune_iters: usize,
    /// Learning rate of the from-scratch baseline on the few-shot data.
    pub scratch_lr: f64,
    /// Gradient steps between learning-curve evaluations.
    pub curve_every: usize,
    /// Steps between logged training losses.
    pub log_every: usize,
    /// Also train the diffusion model on the few-shot pilots and channels.
    pub dm_include_fewshot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dt_lr: 1e-4,
            dm_lr: 1e-4,
            dt_iters: 5000,
            dm_iters: 10000,
            dt_batch: 64,
            dm_batch: 64,
            weight_decay: 0.01,
            finetune_lr_factor: 0.1,
            finetune_iters: 500,
            scratch_lr: 1e-4,
            curve_every: 50,
            log_every: 100,
            dm_include_fewshot: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episodes per learning-curve point during fine-tuning.
    pub curve_episodes: usize,
    /// Target return as a multiple of the best few-shot episode return.
    pub target_factor: f64,
    pub hist_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 50,
            curve_episodes: 10,
            target_factor: 1.1,
            hist_bins: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub collect: bool,
    pub train_dm: bool,
    pub pretrain_dt: bool,
    pub finetune: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            collect: true,
            train_dm: true,
            pretrain_dt: true,
            finetune: true,
            eval: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Geometry shared by every environment; presets override channel statistics.
    #[serde(default)]
    pub env: EnvConfigFile,
    #[serde(default = "builtin_presets")]
    pub presets: Vec<EnvPreset>,
    #[serde(default = "held_out_preset")]
    pub held_out: EnvPreset,
    #[serde(default)]
    pub expert: ExpertConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub dt: DtConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub stages: StageToggles,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Defaults everywhere except the mandatory seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out_dir: default_out(),
            env: EnvConfigFile::default(),
            presets: builtin_presets(),
            held_out: held_out_preset(),
            expert: ExpertConfig::default(),
            diffusion: DiffusionConfig::default(),
            dt: DtConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            stages: StageToggles::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Resolved values as TOML, for `--explain`.
    pub fn explain(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| D2tError::Config(e.to_string()))
    }

    pub fn pretrain_envs(&self) -> Result<Vec<EnvConfig>> {
        self.presets.iter().map(|p| p.apply(&self.env)).collect()
    }

    pub fn held_out_env(&self) -> Result<EnvConfig> {
        self.held_out.apply(&self.env)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(D2tError::Config(m));
        self.env.resolve()?;
        if self.presets.is_empty() {
            return fail("at least one pre-training preset is required".into());
        }
        let mut names: Vec<&str> = self.presets.iter().map(|p| p.name.as_str()).collect();
        names.push(&self.held_out.name);
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != total {
            return fail("preset names (including held_out) must be distinct".into());
        }
        self.pretrain_envs()?;
        self.held_out_env()?;
        self.expert.validate()?;
        self.diffusion.validate()?;
        self.dt.validate(self.env.episode_len)?;
        let t = &self.train;
        for (name, v) in [
            ("dt_lr", t.dt_lr),
            ("dm_lr", t.dm_lr),
            ("scratch_lr", t.scratch_lr),
            ("finetune_lr_factor", t.finetune_lr_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("train.{name} must be positive"));
            }
        }
        if t.dt_batch == 0 || t.dm_batch == 0 || t.curve_every == 0 || t.log_every == 0 {
            return fail("batch sizes, curve_every and log_every must be >= 1".into());
        }
        if self.eval.episodes == 0 || self.eval.curve_episodes == 0 || self.eval.hist_bins == 0 {
            return fail("eval episode counts and hist_bins must be >= 1".into());
        }
        if !(self.eval.target_factor > 0.0) {
            return fail("eval.target_factor must be positive".into());
        }
        Ok(())
    }
}

/// Hex SHA-256 of the JSON form of `parts`, truncated to 16 characters.
pub fn config_hash(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_string().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 5").unwrap();
        assert_eq!(cfg, ExperimentConfig::with_seed(5));
        assert_eq!(cfg.train.dt_iters, 5000);
        assert_eq!(cfg.train.dm_iters, 10000);
        assert_eq!(cfg.train.dt_lr, 1e-4);
        assert_eq!(cfg.diffusion.steps, 500);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("").is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\nbogus = 2").is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\n[dt]\nwidht = 3").is_err());
    }

    #[test]
    fn semantic_validation() {
        assert!(ExperimentConfig::from_toml_str("seed = 1\n[dt]\nwidth = 10\nheads = 4").is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\n[diffusion]\nbeta_max = 1.5").is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\npresets = []").is_err());
    }

    #[test]
    fn explain_round_trips() {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.diffusion.norm_scale = Some(2e-5);
        cfg.dt.width = 64;
        let text = cfg.explain().unwrap();
        assert!(text.contains("K = 500"));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn hash_depends_on_content() {
        let a = config_hash(&[serde_json::json!({"x": 1})]);
        assert_eq!(a, config_hash(&[serde_json::json!({"x": 1})]));
        assert_ne!(a, config_hash(&[serde_json::json!({"x": 2})]));
        assert_eq!(a.len(), 16);
    }
}
