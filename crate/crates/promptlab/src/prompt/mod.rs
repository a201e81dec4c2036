//! Single-attribute continuous prompts: trainable matrices prepended in
//! embedding space to a frozen base model.
//!
//! Training updates only the prompt matrix. The base model's digest is
//! checked before and after in the tests, and nothing here ever holds a
//! mutable reference to it.

use crate::container::{self, ContainerError};
use crate::corpus::{LabeledSentence, Vocab};
use crate::model::{
    causal_bias, ForwardInput, InputLayout, LanguageModel, ModelError, TrainingLog,
};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, TensorError};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("corpus sentence {index} is labeled {found:?}, prompt wants {family}={value}")]
    LabelMismatch {
        index: usize,
        family: String,
        value: String,
        found: Option<String>,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("store was trained against base model {expected}, current model is {found}")]
    BaseDigestMismatch { expected: String, found: String },
    #[error("prompt length {found} does not match store length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("prompt dimension {found} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no prompt stored for {family}={value}")]
    MissingPrompt { family: String, value: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("bad store metadata: {0}")]
    BadMetadata(String),
}

/// Training provenance carried alongside each prompt matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub corpus_digest: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// A trainable matrix `[prompt_len × d_emb]` identified by (family, value).
#[derive(Debug, Clone)]
pub struct AttributePrompt {
    pub family: String,
    pub value: String,
    pub matrix: Tensor,
    pub meta: PromptMeta,
}

impl AttributePrompt {
    pub fn prompt_len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn d_emb(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.family.as_bytes());
        h.update([0]);
        h.update(self.value.as_bytes());
        h.update([0]);
        for v in self.matrix.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Fresh prompt with entries i.i.d. N(0, 0.02²).
pub fn init_prompt(
    family: &str,
    value: &str,
    prompt_len: usize,
    d_emb: usize,
    seed: u64,
) -> AttributePrompt {
    assert!(prompt_len >= 1, "prompt length must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let data: Vec<f64> = (0..prompt_len * d_emb).map(|_| normal.sample(&mut rng)).collect();
    AttributePrompt {
        family: family.to_string(),
        value: value.to_string(),
        matrix: Tensor::new(vec![prompt_len, d_emb], data)
            .expect("shape matches")
            .with_requires_grad(),
        meta: PromptMeta {
            seed,
            ..PromptMeta::default()
        },
    }
}

/// Layout for single-prompt conditioning: `[S_k; text]`, prompt ids
/// `1..=l_k`, text ids continuing after the prompt, plain causal mask.
pub struct SinglePromptLayout<'a> {
    pub prompt: &'a AttributePrompt,
}

impl InputLayout for SinglePromptLayout<'_> {
    fn build(&self, model: &LanguageModel, text_ids: &[usize]) -> Result<ForwardInput, ModelError> {
        let l_k = self.prompt.prompt_len();
        let n = text_ids.len();
        let total = l_k + n;
        let text_rows = model.embed_tokens(text_ids)?;
        let mut data = self.prompt.matrix.data().to_vec();
        data.extend_from_slice(text_rows.data());
        let mut position_ids: Vec<usize> = (1..=l_k).collect();
        position_ids.extend(l_k + 1..=l_k + n);
        let mut loss_mask = vec![true; l_k];
        loss_mask.extend(vec![false; n]);
        Ok(ForwardInput {
            input_rows: Tensor::new(vec![total, model.config().d_emb], data)?,
            position_ids,
            attention_bias: causal_bias(total),
            loss_mask,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 17,
        }
    }
}

pub fn corpus_digest(sentences: &[LabeledSentence]) -> String {
    let mut h = Sha256::new();
    for s in sentences {
        for (f, v) in &s.labels {
            h.update(f.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b",");
        }
        h.update(b"\t");
        h.update(s.text.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Mean NLL of the text tokens conditioned on `[S_k; X]`, prompt rows
/// excluded from the loss, with the gradient taken for the prompt only.
fn prompt_loss_and_grad(
    model: &LanguageModel,
    prompt_matrix: &Tensor,
    seq: &[usize],
) -> Result<(f64, Vec<f64>), PromptError> {
    let l_k = prompt_matrix.shape()[0];
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let n = inputs.len();
    let total = l_k + n;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let prompt_var = g.leaf(prompt_matrix);
    let text_rows = g.gather_rows(bound.token_emb, inputs)?;
    let rows = g.concat_rows(&[prompt_var, text_rows])?;
    let mut ids: Vec<usize> = (1..=l_k).collect();
    ids.extend(l_k + 1..=l_k + n);
    let bias = causal_bias(total);
    let logits = model.forward_on_graph(&mut g, &bound, rows, &ids, &bias, None)?;

    let mut full_targets = vec![0usize; l_k];
    full_targets.extend_from_slice(targets);
    let mut ignore = vec![true; l_k];
    ignore.extend(vec![false; n]);
    let loss = g.cross_entropy_next_token(logits, &full_targets, &ignore)?;
    g.backward(loss)?;
    Ok((g.value(loss).value(), g.grad(prompt_var).to_vec()))
}

/// Trains one attribute prompt against the frozen model. Every corpus
/// sentence must carry the prompt's (family, value) label.
pub fn train_single_prompt(
    model: &LanguageModel,
    prompt: &mut AttributePrompt,
    corpus: &[LabeledSentence],
    vocab: &Vocab,
    cfg: &PromptTrainConfig,
) -> Result<TrainingLog, PromptError> {
    if corpus.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    for (index, s) in corpus.iter().enumerate() {
        let found = s.labels.get(&prompt.family);
        if found != Some(&prompt.value) {
            return Err(PromptError::LabelMismatch {
                index,
                family: prompt.family.clone(),
                value: prompt.value.clone(),
                found: found.cloned(),
            });
        }
    }
    let sequences: Vec<Vec<usize>> = corpus.iter().map(|s| vocab.encode_for_lm(&s.text)).collect();
    for seq in &sequences {
        let total = prompt.prompt_len() + seq.len() - 1;
        if total > model.config().max_positions {
            return Err(ModelError::Capacity {
                len: total,
                max: model.config().max_positions,
            }
            .into());
        }
    }

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>), PromptError>> = batch
                .par_iter()
                .map(|&si| prompt_loss_and_grad(model, &prompt.matrix, &sequences[si]))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grad) = r?;
                epoch_loss += loss;
                let scaled: Vec<f64> = grad.iter().map(|v| v * scale).collect();
                prompt.matrix.accumulate_grad(&scaled);
            }
            adam.step(&mut [&mut prompt.matrix])?;
        }
        log.epoch_losses.push(epoch_loss / sequences.len() as f64);
    }
    prompt.meta = PromptMeta {
        corpus_digest: corpus_digest(corpus),
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    };
    Ok(log)
}

/// All trained prompts for one base model, keyed by (family, value).
/// Every prompt in a store shares d_emb, prompt length, and base digest.
#[derive(Debug, Clone)]
pub struct PromptStore {
    base_digest: String,
    prompts: BTreeMap<(String, String), AttributePrompt>,
}

impl PromptStore {
    pub fn new(model: &LanguageModel) -> Self {
        Self {
            base_digest: model.digest(),
            prompts: BTreeMap::new(),
        }
    }

    pub fn base_digest(&self) -> &str {
        &self.base_digest
    }

    pub fn insert(&mut self, prompt: AttributePrompt) -> Result<(), PromptError> {
        if let Some(existing) = self.prompts.values().next() {
            if existing.prompt_len() != prompt.prompt_len() {
                return Err(PromptError::LengthMismatch {
                    expected: existing.prompt_len(),
                    found: prompt.prompt_len(),
                });
            }
            if existing.d_emb() != prompt.d_emb() {
                return Err(PromptError::DimensionMismatch {
                    expected: existing.d_emb(),
                    found: prompt.d_emb(),
                });
            }
        }
        self.prompts
            .insert((prompt.family.clone(), prompt.value.clone()), prompt);
        Ok(())
    }

    pub fn get(&self, family: &str, value: &str) -> Result<&AttributePrompt, PromptError> {
        self.prompts
            .get(&(family.to_string(), value.to_string()))
            .ok_or_else(|| PromptError::MissingPrompt {
                family: family.to_string(),
                value: value.to_string(),
            })
    }

    pub fn keys(&self) -> impl Iterator<Item = &(String, String)> {
        self.prompts.keys()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt_len(&self) -> Option<usize> {
        self.prompts.values().next().map(|p| p.prompt_len())
    }

    /// Digest over every stored prompt, for frozen-store assertions.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base_digest.as_bytes());
        for p in self.prompts.values() {
            h.update(p.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let mut records = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for ((family, value), p) in &self.prompts {
            records.push(serde_json::json!({
                "family": family,
                "value": value,
                "meta": p.meta,
            }));
            arrays.push((
                format!("{family}={value}"),
                p.matrix.shape().to_vec(),
                p.matrix.data(),
            ));
        }
        let meta = serde_json::json!({
            "base_digest": self.base_digest,
            "records": records,
        });
        container::write_container(path, "prompt-store", meta, &arrays)?;
        Ok(())
    }

    /// Loads a store and checks it was trained against `model`.
    pub fn load(path: &Path, model: &LanguageModel) -> Result<Self, PromptError> {
        let store = Self::load_unchecked(path)?;
        let current = model.digest();
        if store.base_digest != current {
            return Err(PromptError::BaseDigestMismatch {
                expected: store.base_digest,
                found: current,
            });
        }
        Ok(store)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self, PromptError> {
        let c = container::read_container(path, "prompt-store")?;
        let base_digest = c.meta["base_digest"]
            .as_str()
            .ok_or_else(|| PromptError::BadMetadata("missing base_digest".into()))?
            .to_string();
        let records = c.meta["records"]
            .as_array()
            .ok_or_else(|| PromptError::BadMetadata("missing records".into()))?
            .clone();
        let mut store = Self {
            base_digest,
            prompts: BTreeMap::new(),
        };
        for (record, (entry, data)) in records.iter().zip(c.arrays) {
            let family = record["family"]
                .as_str()
                .ok_or_else(|| PromptError::BadMetadata("record missing family".into()))?;
            let value = record["value"]
                .as_str()
                .ok_or_else(|| PromptError::BadMetadata("record missing value".into()))?;
            let meta: PromptMeta = serde_json::from_value(record["meta"].clone())
                .map_err(|e| PromptError::BadMetadata(format!("record meta: {e}")))?;
            let matrix = Tensor::new(entry.shape.clone(), data)?.with_requires_grad();
            store.insert(AttributePrompt {
                family: family.to_string(),
                value: value.to_string(),
                matrix,
                meta,
            })?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_corpus_spec, generate_corpus, SENTIMENT};
    use crate::model::ModelConfig;

    fn tiny_model(vocab: usize) -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                vocab_size: vocab,
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 48,
                dropout_rate: 0.0,
            },
            13,
        )
        .unwrap()
    }

    fn pos_corpus() -> (Vec<LabeledSentence>, Vocab) {
        let spec = default_corpus_spec(12, 3);
        let corpus = generate_corpus(&spec).unwrap();
        let vocab = Vocab::build(&[&corpus], &[]);
        let pos: Vec<LabeledSentence> = corpus
            .into_iter()
            .filter(|s| s.labels.get(SENTIMENT) == Some(&"POS".to_string()))
            .collect();
        (pos, vocab)
    }

    #[test]
    fn init_shape_and_determinism() {
        let a = init_prompt(SENTIMENT, "POS", 8, 64, 5);
        assert_eq!(a.matrix.shape(), &[8, 64]);
        let b = init_prompt(SENTIMENT, "POS", 8, 64, 5);
        assert_eq!(a.matrix.data(), b.matrix.data());
        assert_ne!(a.matrix.data(), init_prompt(SENTIMENT, "POS", 8, 64, 6).matrix.data());
    }

    #[test]
    fn init_statistics_match_the_distribution() {
        let p = init_prompt(SENTIMENT, "POS", 8, 64, 42);
        let n = p.matrix.len() as f64;
        let mean: f64 = p.matrix.data().iter().sum::<f64>() / n;
        let std: f64 =
            (p.matrix.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 0.02).abs() < 0.005, "std {std}");
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (corpus, vocab) = pos_corpus();
        let model = tiny_model(vocab.len());
        let mut prompt = init_prompt(SENTIMENT, "POS", 4, 16, 1);
        let before = prompt.matrix.data().to_vec();
        let model_digest = model.digest();
        let cfg = PromptTrainConfig {
            epochs: 0,
            ..PromptTrainConfig::default()
        };
        train_single_prompt(&model, &mut prompt, &corpus, &vocab, &cfg).unwrap();
        assert_eq!(prompt.matrix.data(), before.as_slice());
        assert_eq!(model.digest(), model_digest);
    }

    #[test]
    fn training_moves_the_prompt_but_not_the_model() {
        let (corpus, vocab) = pos_corpus();
        let model = tiny_model(vocab.len());
        let mut prompt = init_prompt(SENTIMENT, "POS", 4, 16, 1);
        let before = prompt.matrix.data().to_vec();
        let model_digest = model.digest();
        let cfg = PromptTrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 4,
        };
        let log = train_single_prompt(&model, &mut prompt, &corpus, &vocab, &cfg).unwrap();
        assert_eq!(log.epoch_losses.len(), 2);
        assert_ne!(prompt.matrix.data(), before.as_slice());
        assert_eq!(model.digest(), model_digest, "base model must stay frozen");
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let (corpus, vocab) = pos_corpus();
        let model = tiny_model(vocab.len());
        let mut prompt = init_prompt(SENTIMENT, "NEG", 4, 16, 1);
        let err = train_single_prompt(
            &model,
            &mut prompt,
            &corpus,
            &vocab,
            &PromptTrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::LabelMismatch { index: 0, .. }));
        assert!(matches!(
            train_single_prompt(
                &model,
                &mut prompt,
                &[],
                &vocab,
                &PromptTrainConfig::default()
            ),
            Err(PromptError::EmptyCorpus)
        ));
    }

    #[test]
    fn training_loss_decreases_across_seeds() {
        let (corpus, vocab) = pos_corpus();
        let model = tiny_model(vocab.len());
        for seed in [1u64, 2, 3] {
            let mut prompt = init_prompt(SENTIMENT, "POS", 4, 16, seed);
            let cfg = PromptTrainConfig {
                epochs: 10,
                batch_size: 8,
                learning_rate: 1e-2,
                seed,
            };
            let log = train_single_prompt(&model, &mut prompt, &corpus, &vocab, &cfg).unwrap();
            for e in 0..log.epoch_losses.len() - 5 {
                assert!(
                    log.epoch_losses[e + 5] <= log.epoch_losses[e] + 1e-9,
                    "seed {seed}: epoch {e} {} -> {}",
                    log.epoch_losses[e],
                    log.epoch_losses[e + 5]
                );
            }
        }
    }

    #[test]
    fn prompt_positions_contribute_zero_loss() {
        // The masked cross-entropy must equal a hand-computed mean over the
        // text rows of the same logits.
        let (corpus, vocab) = pos_corpus();
        let model = tiny_model(vocab.len());
        let prompt = init_prompt(SENTIMENT, "POS", 4, 16, 1);
        let seq = vocab.encode_for_lm(&corpus[0].text);
        let (loss, _) = prompt_loss_and_grad(&model, &prompt.matrix, &seq).unwrap();

        let layout = SinglePromptLayout { prompt: &prompt };
        let input = layout.build(&model, &seq[..seq.len() - 1]).unwrap();
        let logits = model.forward(&input).unwrap();
        let l_k = prompt.prompt_len();
        let mut manual = 0.0;
        for (i, &target) in seq[1..].iter().enumerate() {
            let row = logits.row(l_k + i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            manual += lse - row[target];
        }
        manual /= (seq.len() - 1) as f64;
        assert!((loss - manual).abs() < 1e-12, "{loss} vs {manual}");
    }

    #[test]
    fn store_round_trips_bit_exactly() {
        let vocab_len = 60;
        let model = tiny_model(vocab_len);
        let mut store = PromptStore::new(&model);
        for (f, v) in [
            (SENTIMENT, "POS"),
            (SENTIMENT, "NEG"),
            ("TOPIC", "MUSIC"),
            ("TOPIC", "SPORT"),
            ("TOPIC", "WEATHER"),
        ] {
            store.insert(init_prompt(f, v, 4, 16, 7)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        store.save(&path).unwrap();
        let loaded = PromptStore::load(&path, &model).unwrap();
        assert_eq!(loaded.len(), 5);
        for key in store.keys() {
            let (f, v) = key;
            assert_eq!(
                store.get(f, v).unwrap().matrix.data(),
                loaded.get(f, v).unwrap().matrix.data()
            );
        }
        assert_eq!(store.digest(), loaded.digest());
    }

    #[test]
    fn store_load_rejects_wrong_model() {
        let model = tiny_model(60);
        let mut store = PromptStore::new(&model);
        store.insert(init_prompt(SENTIMENT, "POS", 4, 16, 7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        store.save(&path).unwrap();
        let other = tiny_model(61);
        assert!(matches!(
            PromptStore::load(&path, &other),
            Err(PromptError::BaseDigestMismatch { .. })
        ));
    }

    #[test]
    fn store_enforces_uniform_prompt_length() {
        let model = tiny_model(60);
        let mut store = PromptStore::new(&model);
        store.insert(init_prompt(SENTIMENT, "POS", 4, 16, 7)).unwrap();
        assert!(matches!(
            store.insert(init_prompt(SENTIMENT, "NEG", 6, 16, 7)),
            Err(PromptError::LengthMismatch { expected: 4, found: 6 })
        ));
    }
}
