//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recpillars::dataio::SceneConfig;
use recpillars::evaluation::EvalOptions;
use recpillars::network::ModelConfig;
use recpillars::training::{LossConfig, OptimConfig, TrainConfig};

/// File name of the resolved configuration written into output directories.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    /// Passes over the training set; replaces `steps` when set.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub bias_init: bool,
    /// Single-frame checkpoint to start from (encoder and downsampling
    /// stages are then frozen).
    pub transfer_from: Option<PathBuf>,
    /// Extra parameter-name prefixes kept fixed.
    pub freeze: Vec<String>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            epochs: None,
            batch_size: t.batch_size,
            bias_init: t.bias_init,
            transfer_from: None,
            freeze: Vec::new(),
            loss: t.loss,
            optim: t.optim,
        }
    }
}

impl TrainSection {
    pub fn total_steps(&self, n_sequences: usize) -> usize {
        match self.epochs {
            Some(e) => e * n_sequences.div_ceil(self.batch_size.max(1)),
            None => self.steps,
        }
    }

    pub fn to_train_config(&self, seed: u64, n_sequences: usize) -> TrainConfig {
        TrainConfig {
            seed,
            steps: self.total_steps(n_sequences),
            batch_size: self.batch_size,
            bias_init: self.bias_init,
            loss: self.loss.clone(),
            optim: self.optim.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Generator settings used by `synth`.
    pub scene: SceneConfig,
    pub train: TrainSection,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies `key=value` overrides
    /// and the seed override, then validates.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_override(&mut root, s)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .context("invalid configuration")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.loss.validate()?;
        self.train.optim.validate()?;
        self.eval.validate()?;
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing configuration")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RESOLVED_NAME);
        fs::write(&p, self.to_toml()?).with_context(|| format!("writing {}", p.display()))
    }
}

/// Sets `a.b.c=value` in `root`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not of the form key=value");
    };
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override key `{key}`: `{part}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use recpillars::network::MemoryPlacement;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_seed() {
        let sets = vec![
            "model.memory.placement=before_backbone".to_string(),
            "train.loss.k_max = 3".to_string(),
            "train.optim.lr=1e-3".to_string(),
            "model.grid.cell=0.5".to_string(),
        ];
        let c = RunConfig::load(None, &sets, Some(9)).unwrap();
        assert_eq!(c.model.memory.placement, MemoryPlacement::BeforeBackbone);
        assert_eq!(c.train.loss.k_max, 3);
        assert_eq!(c.train.optim.lr, 1e-3);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["train.lr=0.1".into()], None).is_err());
        assert!(RunConfig::load(None, &["bogus=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["model.grid.cells=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["seed".into()], None).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::load(None, &["train.loss.focal_gamma=-1".into()], None).is_err());
        assert!(RunConfig::load(None, &["model.grid.cell=0".into()], None).is_err());
    }

    #[test]
    fn epochs_set_steps() {
        let t = TrainSection {
            epochs: Some(2),
            batch_size: 3,
            ..Default::default()
        };
        assert_eq!(t.total_steps(10), 8);
        assert_eq!(TrainSection::default().total_steps(10), 1000);
    }
}
