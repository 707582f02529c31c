//! Run settings: defaults, then a flat `key=value` file, then flags.
//!
//! Randomness is derived from one seed: the split uses `seed`, weight init
//! `seed + 1`, and training (shuffles, dropout) `seed + 2`.

use crate::data::SplitStrategy;
use crate::kv::{KvError, KvMap};
use crate::optim::OptimizerKind;
use crate::pipeline::TrainConfig;
use crate::vit::{ModelError, ViTConfig, CONFIG_KEYS};

pub const RUN_KEYS: [&str; 9] = [
    "preset",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "momentum",
    "freeze_backbone",
    "split_strategy",
];

#[derive(Debug, thiserror::Error)]
pub enum SettingsError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub split_strategy: SplitStrategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::tiny(),
            train: TrainConfig::default(),
            seed: 0,
            split_strategy: SplitStrategy::Random,
        }
    }
}

impl RunConfig {
    pub fn split_seed(&self) -> u64 {
        self.seed
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// `file` is the config file text, `flags` the command-line values
    /// already rendered as `key=value` pairs; flags win.
    pub fn resolve(file: Option<&str>, flags: &[(&str, String)]) -> Result<Self, SettingsError> {
        let mut layered = match file {
            Some(text) => KvMap::parse(text)?,
            None => KvMap::default(),
        };
        let known: Vec<&str> = RUN_KEYS.iter().chain(CONFIG_KEYS.iter()).copied().collect();
        layered.check_known(&known)?;
        for (k, v) in flags {
            if !known.contains(k) {
                return Err(KvError::Unknown(k.to_string()).into());
            }
            layered.insert(k, v);
        }

        let mut cfg = RunConfig::default();
        if let Some(p) = layered.raw("preset") {
            cfg.model = match p {
                "tiny" => ViTConfig::tiny(),
                "base" => ViTConfig::base(),
                other => {
                    return Err(SettingsError::Value {
                        key: "preset".into(),
                        msg: format!("expected tiny or base, got {other:?}"),
                    })
                }
            };
        }
        let m = &mut cfg.model;
        set(&layered, "image_size", &mut m.image_size)?;
        set(&layered, "patch_size", &mut m.patch_size)?;
        set(&layered, "channels", &mut m.channels)?;
        set(&layered, "embed_dim", &mut m.embed_dim)?;
        set(&layered, "depth", &mut m.depth)?;
        set(&layered, "heads", &mut m.heads)?;
        set(&layered, "mlp_ratio", &mut m.mlp_ratio)?;
        set(&layered, "head_hidden", &mut m.head_hidden)?;
        set(&layered, "num_classes", &mut m.num_classes)?;
        set(&layered, "drop_rate", &mut m.drop_rate)?;
        cfg.model.validate()?;

        set(&layered, "seed", &mut cfg.seed)?;
        let t = &mut cfg.train;
        set(&layered, "epochs", &mut t.epochs)?;
        set(&layered, "batch_size", &mut t.batch_size)?;
        set(&layered, "lr", &mut t.learning_rate)?;
        set(&layered, "freeze_backbone", &mut t.freeze_backbone)?;
        let mut momentum = 0.9;
        set(&layered, "momentum", &mut momentum)?;
        t.optimizer = match layered.raw("optimizer").unwrap_or("adam") {
            "adam" => OptimizerKind::default(),
            "sgd" => OptimizerKind::Sgd { momentum },
            other => {
                return Err(SettingsError::Value {
                    key: "optimizer".into(),
                    msg: format!("expected adam or sgd, got {other:?}"),
                })
            }
        };
        cfg.split_strategy = match layered.raw("split_strategy").unwrap_or("random") {
            "random" => SplitStrategy::Random,
            "stratified" => SplitStrategy::Stratified,
            other => {
                return Err(SettingsError::Value {
                    key: "split_strategy".into(),
                    msg: format!("expected random or stratified, got {other:?}"),
                })
            }
        };
        cfg.train.seed = cfg.train_seed();
        cfg.train
            .validate()
            .map_err(|e| SettingsError::Value {
                key: "train".into(),
                msg: e.to_string(),
            })?;
        Ok(cfg)
    }
}

fn set<T: std::str::FromStr>(map: &KvMap, key: &str, slot: &mut T) -> Result<(), KvError> {
    if let Some(v) = map.get(key)? {
        *slot = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.model, ViTConfig::tiny());
        assert_eq!(c.train.epochs, 5);
        assert_eq!((c.split_seed(), c.init_seed(), c.train.seed), (0, 1, 2));
    }

    #[test]
    fn flags_override_file() {
        let file = "# desk run\nseed = 7\nepochs=3\nembed_dim=16\noptimizer=sgd\nmomentum=0.5\n";
        let c = RunConfig::resolve(Some(file), &[("epochs", "4".into())]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.model.embed_dim, 16);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd { momentum: 0.5 });
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn preset_then_keys() {
        let c = RunConfig::resolve(Some("preset=base\ndepth=1\n"), &[]).unwrap();
        assert_eq!(c.model.image_size, 224);
        assert_eq!(c.model.depth, 1);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(matches!(
            RunConfig::resolve(Some("learning_rate=0.1\n"), &[]),
            Err(SettingsError::Kv(KvError::Unknown(_)))
        ));
        assert!(RunConfig::resolve(Some("epochs=five\n"), &[]).is_err());
        assert!(RunConfig::resolve(Some("image_size=30\n"), &[]).is_err());
        assert!(RunConfig::resolve(None, &[("optimizer", "lbfgs".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("epochs", "0".into())]).is_err());
    }
}
