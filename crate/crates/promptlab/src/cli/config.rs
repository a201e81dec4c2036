//! Run configuration: one TOML file with per-stage sections. Every stage
//! seed is explicit; command-line flags override individual keys.

use crate::model::{DecodeConfig, ModelConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Base directory; every relative path below lands inside it.
    pub work_dir: PathBuf,
    pub corpus: PathBuf,
    pub pretrain_corpus: PathBuf,
    pub eval_fixtures: PathBuf,
    pub vocab: PathBuf,
    pub model: PathBuf,
    pub prompt_store: PathBuf,
    pub connector: PathBuf,
    pub classifier_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("runs/default"),
            corpus: PathBuf::from("corpus.txt"),
            pretrain_corpus: PathBuf::from("pretrain.txt"),
            eval_fixtures: PathBuf::from("eval_fixtures.txt"),
            vocab: PathBuf::from("vocab.txt"),
            model: PathBuf::from("model.bin"),
            prompt_store: PathBuf::from("prompts.bin"),
            connector: PathBuf::from("connector.bin"),
            classifier_dir: PathBuf::from("classifiers"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sentences_per_attribute: usize,
    /// Multi-attribute sentences per value pair, pretraining text only.
    pub dual_per_pair: usize,
    /// Slot-less sentences for pretraining text.
    pub neutral: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences_per_attribute: 150,
            dual_per_pair: 60,
            neutral: 100,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// 0 means "size to the vocabulary when pretraining starts".
    pub vocab_size: usize,
    pub d_emb: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_emb: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_positions: 256,
            dropout_rate: 0.0,
            init_seed: 5,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: if self.vocab_size == 0 {
                vocab_size
            } else {
                self.vocab_size
            },
            d_emb: self.d_emb,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSection {
    pub length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_seed: u64,
    pub train_seed: u64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            length: 8,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            init_seed: 17,
            train_seed: 19,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub held_out_fraction: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 5e-2,
            seed: 23,
            held_out_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorSection {
    pub length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub pseudo_mode: String,
}

impl Default for ConnectorSection {
    fn default() -> Self {
        Self {
            length: 8,
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 31,
            pseudo_mode: "argmax".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Empty list means the built-in 15 neutral prefixes.
    pub prefixes: Vec<String>,
    pub samples_per_prefix: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            prefixes: Vec::new(),
            samples_per_prefix: 20,
        }
    }
}

fn default_decode() -> DecodeConfig {
    DecodeConfig::default()
}

fn default_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 7,
        position_jitter: true,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    #[serde(default = "default_pretrain")]
    pub pretrain: PretrainConfig,
    pub prompt: PromptSection,
    pub classifier: ClassifierSection,
    pub connector: ConnectorSection,
    #[serde(default = "default_decode")]
    pub decode: DecodeConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            pretrain: default_pretrain(),
            prompt: PromptSection::default(),
            classifier: ClassifierSection::default(),
            connector: ConnectorSection::default(),
            decode: default_decode(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, super::CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| super::CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| super::CliError::BadConfig(e.to_string()))
    }

    /// Resolves a configured path against the work dir.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.paths.work_dir.join(p)
        }
    }

    /// Report directory, honoring the `PROMPTLAB_REPORT_DIR` override.
    pub fn report_dir(&self) -> PathBuf {
        match std::env::var_os("PROMPTLAB_REPORT_DIR") {
            Some(dir) => PathBuf::from(dir),
            None => self.resolve(&self.paths.report_dir),
        }
    }

    pub fn eval_prefixes(&self) -> Vec<String> {
        if self.eval.prefixes.is_empty() {
            crate::corpus::default_eval_prefixes()
        } else {
            self.eval.prefixes.clone()
        }
    }

    /// The effective config as a JSON value, embedded into reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
