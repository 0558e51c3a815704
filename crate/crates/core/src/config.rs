//! Versioned TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! config_version = 1
//!
//! [data]
//! gen_vocab_size = 20000
//! bow_vocab_size = 2000
//! max_input_tokens = 1024
//! lambda = 0.8
//! score_mode = "recompute"     # or "static"
//! similarity = "tfidf"         # or "mean-token-embedding"
//!
//! [model]
//! topics = 100
//! ntm_hidden = 200
//! d_model = 128
//! enc_layers = 2
//! dec_layers = 2
//! heads = 4
//! ff_hidden = 512
//! prompt_len = 7
//! prompt_hidden = 256
//!
//! [train]
//! alpha_loss = 0.01
//! ntm_pretrain_epochs = 100
//! ntm_batch_size = 8
//! joint_epochs = 5
//! batch_size = 8
//! lr_sig = 5e-5
//! lr_ntm = 1e-4
//! weight_decay = 0.01
//! clip_norm = 1.0
//! selection = true             # S
//! tpee = true                  # E
//! twed = true                  # D
//! seed = 0
//!
//! [decode]
//! alpha_step = 0.25
//! gamma = 1.5
//! n_iter = 3
//! topic_words = 30
//! max_len = 32
//! beam_width = 1
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::ntm::NtmConfig;
use crate::selection::{ScoreMode, DEFAULT_LAMBDA, DEFAULT_MAX_TOKENS};
use crate::similarity::Backend;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub config_version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub gen_vocab_size: usize,
    pub bow_vocab_size: usize,
    pub max_input_tokens: usize,
    pub lambda: f64,
    pub score_mode: ScoreMode,
    pub similarity: Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub topics: usize,
    pub ntm_hidden: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub prompt_len: usize,
    pub prompt_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha_loss: f64,
    pub ntm_pretrain_epochs: usize,
    pub ntm_batch_size: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr_sig: f64,
    pub lr_ntm: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub selection: bool,
    pub tpee: bool,
    pub twed: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub alpha_step: f64,
    pub gamma: f64,
    pub n_iter: usize,
    pub topic_words: usize,
    pub max_len: usize,
    pub beam_width: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen_vocab_size: 20000,
            bow_vocab_size: 2000,
            max_input_tokens: DEFAULT_MAX_TOKENS,
            lambda: DEFAULT_LAMBDA,
            score_mode: ScoreMode::Recompute,
            similarity: Backend::Tfidf,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            topics: 100,
            ntm_hidden: 200,
            d_model: g.d_model,
            enc_layers: g.enc_layers,
            dec_layers: g.dec_layers,
            heads: g.heads,
            ff_hidden: g.ff_hidden,
            prompt_len: g.prompt_len,
            prompt_hidden: g.prompt_hidden,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_loss: 0.01,
            ntm_pretrain_epochs: 100,
            ntm_batch_size: 8,
            joint_epochs: 5,
            batch_size: 8,
            lr_sig: 5e-5,
            lr_ntm: 1e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            selection: true,
            tpee: true,
            twed: true,
            seed: 0,
        }
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let c = ControlConfig::default();
        Self {
            alpha_step: c.alpha_step,
            gamma: c.gamma,
            n_iter: c.n_iter,
            topic_words: 30,
            max_len: 32,
            beam_width: 1,
        }
    }
}

impl DecodeConfig {
    pub fn control(&self) -> ControlConfig {
        ControlConfig {
            alpha_step: self.alpha_step,
            gamma: self.gamma,
            n_iter: self.n_iter,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config_version {} (expected {CONFIG_VERSION})", self.config_version)));
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.alpha_loss) {
            return Err(Error::Config(format!("alpha_loss must lie in [0, 1], got {}", t.alpha_loss)));
        }
        if t.batch_size == 0 || t.ntm_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.data.max_input_tokens == 0 {
            return Err(Error::Config("max_input_tokens must be positive".into()));
        }
        self.decode.control().validate()?;
        self.generator(1).validate()
    }

    /// Generator shape for a vocabulary of `vocab_size`.
    pub fn generator(&self, vocab_size: usize) -> GeneratorConfig {
        let m = &self.model;
        GeneratorConfig {
            vocab_size,
            d_model: m.d_model,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ff_hidden: m.ff_hidden,
            prompt_len: m.prompt_len,
            prompt_hidden: m.prompt_hidden,
            topics: m.topics,
            max_input_tokens: self.data.max_input_tokens,
            max_gen_len: self.decode.max_len,
        }
    }

    pub fn ntm(&self, vocab_size: usize) -> NtmConfig {
        NtmConfig {
            vocab_size,
            hidden: self.model.ntm_hidden,
            topics: self.model.topics,
        }
    }

    /// SHA-256 of the canonical TOML form, truncated to 64 bits.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml("[train]\nalpha_loss = 0.5\n[model]\ntopics = 50\n").unwrap();
        assert_eq!(c.train.alpha_loss, 0.5);
        assert_eq!(c.model.topics, 50);
        assert_eq!(c.model.prompt_len, 7);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("[train]\nalpha_loss = 1.5\n").is_err());
        assert!(Config::from_toml("config_version = 2\n").is_err());
        assert!(Config::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("[model]\nd_model = 10\nheads = 4\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
