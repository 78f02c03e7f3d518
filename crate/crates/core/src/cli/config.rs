use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advtrain::{AdvConfig, OptimConfig, TrainMode};
use crate::diffcore::Precision;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::toyvqa::DataConfig;

/// Everything that determines a run, as one flat table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub snapshot_capacity: usize,
    /// Record seconds-since-start in the metrics log. Off keeps logs
    /// byte-reproducible.
    pub wallclock: bool,

    pub alpha: f64,
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub init_scale: f64,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_question: usize,

    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub max_regions: usize,
    pub visual_dims: usize,
    pub feature_noise: f64,
    pub tag_noise: f64,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub min_box: u32,
    pub max_box: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adv = AdvConfig::default();
        let opt = OptimConfig::default();
        let m = ModelConfig::default();
        let d = DataConfig::default();
        Self {
            seed: 1,
            precision: Precision::F32,
            mode: TrainMode::Vanilla,
            epochs: 20,
            batch_size: 32,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            snapshot_capacity: 20,
            wallclock: false,
            alpha: adv.alpha,
            epsilon: adv.epsilon,
            ascent_steps: adv.ascent_steps,
            ascent_lr: adv.ascent_lr,
            init_scale: adv.init_scale,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            layers: m.layers,
            heads: m.heads,
            ff_dim: m.ff_dim,
            max_question: m.max_question,
            train_size: d.train_size,
            val_size: d.val_size,
            test_size: d.test_size,
            max_regions: d.max_regions,
            visual_dims: d.visual_dims,
            feature_noise: d.feature_noise,
            tag_noise: d.tag_noise,
            canvas_width: d.canvas_width,
            canvas_height: d.canvas_height,
            min_box: d.min_box,
            max_box: d.max_box,
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in file_table {
                let v = match (table.get(&k), v) {
                    (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                    (_, v) => v,
                };
                table.insert(k, v);
            }
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let old = table
                .get(key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            table.insert(key.to_string(), parse_like(old, raw.trim(), key)?);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.snapshot_capacity == 0 {
            return Err(Error::Config(
                "epochs, batch_size and snapshot_capacity must be >= 1".into(),
            ));
        }
        self.optim().validate()?;
        self.adv().validate()?;
        self.data().validate()?;
        self.model_template().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn adv(&self) -> AdvConfig {
        AdvConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            ascent_steps: self.ascent_steps,
            ascent_lr: self.ascent_lr,
            init_scale: self.init_scale,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
            max_regions: self.max_regions,
            visual_dims: self.visual_dims,
            feature_noise: self.feature_noise,
            tag_noise: self.tag_noise,
            canvas_width: self.canvas_width,
            canvas_height: self.canvas_height,
            min_box: self.min_box,
            max_box: self.max_box,
        }
    }

    /// Architecture fields; data-dependent extents come from the dataset.
    fn model_template(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_question: self.max_question,
            ..ModelConfig::default()
        }
    }

    /// Model shaped for a dataset generated with `data`.
    pub fn model_for(&self, data: &DataConfig) -> Result<ModelConfig> {
        let cfg = data.fit_model(self.model_template());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `raw` as the same TOML type as `like`; bare words become strings.
fn parse_like(like: &toml::Value, raw: &str, key: &str) -> Result<toml::Value> {
    let bad = || Error::Config(format!("bad value `{raw}` for `{key}`"));
    Ok(match like {
        toml::Value::String(_) => toml::Value::String(raw.trim_matches('"').to_string()),
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| bad())?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad())?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| bad())?),
        _ => return Err(bad()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order_and_round_trip() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "epochs=3".into(),
                "mode=adversarial".into(),
                "lr=0.01".into(),
                "epochs=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.mode, TrainMode::Adversarial);
        assert_eq!(cfg.lr, 0.01);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        for o in ["nope=1", "epochs=abc", "epochs", "epsilon=0", "precision=f16"] {
            let e = RunConfig::resolve(None, &[o.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{o}: {e}");
        }
    }

    #[test]
    fn integer_valued_floats_are_accepted() {
        assert_eq!(RunConfig::resolve(None, &["alpha=2".into()]).unwrap().alpha, 2.0);
    }
}
