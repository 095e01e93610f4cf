//! Run configuration: one TOML document covering every stage.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use onerec::ecpo::{EcpoConfig, RewardSource};
use onerec::generation::GenerationRequest;
use onerec::policy::{preset, ModelConfig};
use onerec::reward::PScoreConfig;
use onerec::rng::substream;
use onerec::train::PretrainConfig;
use onerec::world::WorldConfig;

use crate::error::{config_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Architecture: a named preset, or a full custom shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub custom: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy-m".into(),
            custom: None,
        }
    }
}

/// Codebook shape; unset fields keep the model's values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub n_t: Option<usize>,
    pub l_t: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate the first `users` users; 0 means all of them.
    pub users: usize,
    pub ks: Vec<usize>,
    /// Request used for reward evaluation; its width must cover the largest K.
    pub generation: GenerationRequest,
    /// Width of the unconstrained beam that measures legality.
    pub legality_width: usize,
    /// Held-out NTP evaluation cadence during pre-training (0 = only at the end).
    pub ntp_every: usize,
    pub ntp_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            users: 0,
            ks: vec![1, 8, 32],
            generation: GenerationRequest {
                constrain_to_trie: true,
                ..GenerationRequest::default()
            },
            legality_width: 32,
            ntp_every: 100,
            ntp_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub precision: Precision,
    pub world: WorldConfig,
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    pub pretrain: PretrainConfig,
    pub pscore: PScoreConfig,
    pub posttrain: EcpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            precision: Precision::F32,
            world: WorldConfig::default(),
            model: ModelSection::default(),
            tokenizer: TokenizerSection::default(),
            pretrain: PretrainConfig::default(),
            pscore: PScoreConfig::default(),
            posttrain: EcpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stage seed derived from the master seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    substream(seed, label).next_u64()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they can
    /// (numbers, booleans, arrays, quoted strings) and as bare strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let Some((key, raw)) = o.split_once('=') else {
                return config_err(format!("override {o:?} is not key=value"));
            };
            set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// The model architecture with codebook overrides applied and the id
    /// spaces sized to the world.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match &self.model.custom {
            Some(c) => c.clone(),
            None => preset(&self.model.preset)?,
        };
        if let Some(n) = self.tokenizer.n_t {
            m.n_t = n;
        }
        if let Some(l) = self.tokenizer.l_t {
            m.l_t = l;
        }
        m.users = self.world.users;
        m.items = self.world.items;
        m.authors = self.world.clusters * self.world.authors_per_cluster;
        m.validate()?;
        Ok(m)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: derive_seed(self.seed, "world"),
            ..self.world.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, "pretrain"),
            ..self.pretrain.clone()
        }
    }

    pub fn pscore_config(&self) -> PScoreConfig {
        PScoreConfig {
            seed: derive_seed(self.seed, "pscore"),
            ..self.pscore.clone()
        }
    }

    pub fn posttrain_config(&self) -> EcpoConfig {
        EcpoConfig {
            seed: derive_seed(self.seed, "posttrain"),
            ..self.posttrain.clone()
        }
    }

    pub fn needs_pscore(&self) -> bool {
        matches!(
            self.posttrain.reward,
            RewardSource::PScore | RewardSource::Tower(_)
        )
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: HarnessError| match e {
            HarnessError::Core(e) => HarnessError::Config(e.to_string()),
            e => e,
        };
        self.world.validate().map_err(|e| invalid(e.into()))?;
        self.model_config().map_err(invalid)?;
        self.posttrain.validate().map_err(|e| invalid(e.into()))?;
        self.eval
            .generation
            .validate()
            .map_err(|e| invalid(e.into()))?;
        let ks = &self.eval.ks;
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("eval.ks must be positive and strictly ascending");
        }
        if *ks.last().unwrap() > self.eval.generation.width {
            return config_err("eval.generation.width must cover the largest K");
        }
        if self.eval.legality_width == 0 || self.eval.ntp_samples == 0 {
            return config_err("eval.legality_width and eval.ntp_samples must be positive");
        }
        if self.pretrain.batch == 0 {
            return config_err("pretrain.batch must be positive");
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return config_err(format!("override {key:?}: {part:?} is not inside a table"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        // An unset optional section becomes a table on first use.
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    config_err("empty override key")
}

/// SHA-256 of the canonical (sorted-key) JSON encoding.
pub fn hash_value(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("JSON values always encode");
    hex(&Sha256::digest(&bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "posttrain.group_size=512".into(),
                "model.preset=toy-s".into(),
                "tokenizer.n_t=32".into(),
            ])
            .unwrap();
        assert_eq!(cfg.posttrain.group_size, 512);
        assert_eq!(cfg.model.preset, "toy-s");
        assert_eq!(cfg.model_config().unwrap().n_t, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::default()
            .with_overrides(&["posttrain.gruop_size=5".into()])
            .is_err());
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::default()
            .with_overrides(&["no-equals".into()])
            .is_err());
    }

    #[test]
    fn toml_round_trip_through_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[posttrain]\nsteps = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.posttrain.steps, 3);
        assert_eq!(cfg.pretrain, PretrainConfig::default());
    }

    #[test]
    fn hashing_is_key_order_independent() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(hash_value(&a), hash_value(&b));
        assert_ne!(hash_value(&a), hash_value(&Value::Null));
    }
}
