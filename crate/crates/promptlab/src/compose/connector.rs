//! The trainable connector: a matrix inserted between two prompts and the
//! text, trained on single-attribute sentences paired with pseudo prompts
//! for the other family. Only the connector's parameters move.

use super::{build_pseudo_prompt_weighted, AttributeClassifier, ComposeError};
use crate::container;
use crate::corpus::{LabeledSentence, Vocab};
use crate::model::{causal_bias, LanguageModel, TrainingLog};
use crate::prompt::{corpus_digest, PromptStore};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    Argmax,
    Weighted,
}

impl std::fmt::Display for PseudoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PseudoMode::Argmax => "argmax",
            PseudoMode::Weighted => "weighted",
        })
    }
}

/// An attribute pair in slot order (first family slot, second family slot).
pub type HeldOutPair = BTreeMap<String, String>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectorMeta {
    pub pseudo_mode: PseudoMode,
    pub connector_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub held_out: Option<HeldOutPair>,
    /// Whether the connector was trained under the cross-prompt mask and
    /// re-indexed ids; inference must use the same layout.
    pub mask_rp_layout: bool,
    pub base_digest: String,
    pub store_digest: String,
    pub corpus_digest: String,
}

impl Default for ConnectorMeta {
    fn default() -> Self {
        Self {
            pseudo_mode: PseudoMode::Argmax,
            connector_len: 0,
            epochs: 0,
            learning_rate: 0.0,
            seed: 0,
            held_out: None,
            mask_rp_layout: true,
            base_digest: String::new(),
            store_digest: String::new(),
            corpus_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Connector {
    pub matrix: Tensor,
    pub meta: ConnectorMeta,
}

impl Connector {
    /// Fresh connector, entries N(0, 0.02²).
    pub fn init(connector_len: usize, d_emb: usize, seed: u64) -> Self {
        assert!(connector_len >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data: Vec<f64> = (0..connector_len * d_emb)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            matrix: Tensor::new(vec![connector_len, d_emb], data)
                .expect("shape matches")
                .with_requires_grad(),
            meta: ConnectorMeta {
                connector_len,
                seed,
                ..ConnectorMeta::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_emb(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.matrix.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), ComposeError> {
        let meta = serde_json::to_value(&self.meta)
            .map_err(|e| ComposeError::BadMetadata(e.to_string()))?;
        container::write_container(
            path,
            "connector",
            meta,
            &[("connector".into(), self.matrix.shape().to_vec(), self.matrix.data())],
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ComposeError> {
        let c = container::read_container(path, "connector")?;
        let meta: ConnectorMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| ComposeError::BadMetadata(format!("connector meta: {e}")))?;
        let (entry, data) = c
            .arrays
            .into_iter()
            .next()
            .ok_or_else(|| ComposeError::BadMetadata("missing connector array".into()))?;
        Ok(Self {
            matrix: Tensor::new(entry.shape, data)?.with_requires_grad(),
            meta,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectorTrainConfig {
    pub pseudo_mode: PseudoMode,
    pub connector_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub held_out_pair: Option<HeldOutPair>,
}

impl Default for ConnectorTrainConfig {
    fn default() -> Self {
        Self {
            pseudo_mode: PseudoMode::Argmax,
            connector_len: 8,
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 31,
            held_out_pair: None,
        }
    }
}

struct Example {
    slot1: Tensor,
    slot2: Tensor,
    seq: Vec<usize>,
}

fn example_loss_and_grad(
    model: &LanguageModel,
    connector: &Tensor,
    ex: &Example,
) -> Result<(f64, Vec<f64>), ComposeError> {
    let inputs = &ex.seq[..ex.seq.len() - 1];
    let targets = &ex.seq[1..];
    let l1 = ex.slot1.shape()[0];
    let l2 = ex.slot2.shape()[0];
    let lc = connector.shape()[0];
    let n = inputs.len();
    let total = l1 + l2 + lc + n;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let s1 = g.constant(ex.slot1.shape().to_vec(), ex.slot1.data().to_vec())?;
    let s2 = g.constant(ex.slot2.shape().to_vec(), ex.slot2.data().to_vec())?;
    let c = g.leaf(connector);
    let text = g.gather_rows(bound.token_emb, inputs)?;
    let rows = g.concat_rows(&[s1, s2, c, text])?;
    let ids: Vec<usize> = (1..=total).collect();
    let bias = causal_bias(total);
    let logits = model.forward_on_graph(&mut g, &bound, rows, &ids, &bias, None)?;

    let prompt_rows = l1 + l2 + lc;
    let mut full_targets = vec![0usize; prompt_rows];
    full_targets.extend_from_slice(targets);
    let mut ignore = vec![true; prompt_rows];
    ignore.extend(vec![false; n]);
    let loss = g.cross_entropy_next_token(logits, &full_targets, &ignore)?;
    g.backward(loss)?;
    Ok((g.value(loss).value(), g.grad(c).to_vec()))
}

/// Trains a connector on single-attribute sentences. For each sentence the
/// real prompt of its labeled family sits in its family's slot and a pseudo
/// prompt of the other family fills the other slot; slots are in sorted
/// family order regardless of which side is real. Model, prompts, and
/// classifiers are read-only throughout.
pub fn train_connector(
    model: &LanguageModel,
    store: &PromptStore,
    classifiers: &BTreeMap<String, AttributeClassifier>,
    corpus: &[LabeledSentence],
    vocab: &Vocab,
    cfg: &ConnectorTrainConfig,
) -> Result<(Connector, TrainingLog), ComposeError> {
    if corpus.is_empty() {
        return Err(ComposeError::EmptyCorpus);
    }
    let model_digest = model.digest();
    if store.base_digest() != model_digest {
        return Err(ComposeError::StoreModelMismatch {
            store: store.base_digest().to_string(),
            model: model_digest,
        });
    }
    let families: Vec<&String> = classifiers.keys().collect();

    let mut examples = Vec::new();
    for s in corpus {
        let (real_family, real_value) =
            s.labels.iter().next().ok_or(ComposeError::EmptyCorpus)?;
        let real_prompt = store.get(real_family, real_value)?;
        let pseudo_family = families
            .iter()
            .find(|f| f.as_str() != real_family)
            .ok_or_else(|| ComposeError::MissingClassifier(format!("counterpart of {real_family}")))?;
        let clf = classifiers
            .get(pseudo_family.as_str())
            .ok_or_else(|| ComposeError::MissingClassifier(pseudo_family.to_string()))?;
        let tokens = vocab.encode(&s.text);
        let (argmax_idx, _) = clf.predict_class(&tokens);
        let pseudo_value = clf.classes()[argmax_idx].clone();

        if let Some(held) = &cfg.held_out_pair {
            let mut pair = BTreeMap::new();
            pair.insert(real_family.clone(), real_value.clone());
            pair.insert((*pseudo_family).clone(), pseudo_value.clone());
            if &pair == held {
                continue;
            }
        }

        let pseudo_matrix = match cfg.pseudo_mode {
            PseudoMode::Argmax => store.get(pseudo_family, &pseudo_value)?.matrix.clone(),
            PseudoMode::Weighted => build_pseudo_prompt_weighted(clf, &tokens, store)?,
        };

        // Fixed global slot layout: families in sorted order.
        let (slot1, slot2) = if real_family == families[0] {
            (real_prompt.matrix.clone(), pseudo_matrix)
        } else {
            (pseudo_matrix, real_prompt.matrix.clone())
        };
        examples.push(Example {
            slot1,
            slot2,
            seq: vocab.encode_for_lm(&s.text),
        });
    }
    if examples.is_empty() {
        return Err(ComposeError::EmptyAfterExclusion);
    }

    let mut connector = Connector::init(cfg.connector_len, model.config().d_emb, cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 300 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>), ComposeError>> = batch
                .par_iter()
                .map(|&ei| example_loss_and_grad(model, &connector.matrix, &examples[ei]))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grad) = r?;
                epoch_loss += loss;
                let scaled: Vec<f64> = grad.iter().map(|v| v * scale).collect();
                connector.matrix.accumulate_grad(&scaled);
            }
            adam.step(&mut [&mut connector.matrix])?;
        }
        log.epoch_losses.push(epoch_loss / examples.len() as f64);
    }

    connector.meta = ConnectorMeta {
        pseudo_mode: cfg.pseudo_mode,
        connector_len: cfg.connector_len,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        held_out: cfg.held_out_pair.clone(),
        base_digest: model_digest,
        store_digest: store.digest(),
        corpus_digest: corpus_digest(corpus),
    };
    Ok((connector, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::{train_attribute_classifier, ClassifierTrainConfig};
    use crate::corpus::{default_corpus_spec, generate_corpus, SENTIMENT, TOPIC};
    use crate::model::ModelConfig;
    use crate::prompt::init_prompt;

    fn setup() -> (
        LanguageModel,
        PromptStore,
        BTreeMap<String, AttributeClassifier>,
        Vec<LabeledSentence>,
        Vocab,
    ) {
        let spec = default_corpus_spec(12, 11);
        let corpus = generate_corpus(&spec).unwrap();
        let vocab = Vocab::build(&[&corpus], &[]);
        let model = LanguageModel::new(
            ModelConfig {
                vocab_size: vocab.len(),
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 64,
                dropout_rate: 0.0,
            },
            5,
        )
        .unwrap();
        let mut store = PromptStore::new(&model);
        for (f, v) in [
            (SENTIMENT, "POS"),
            (SENTIMENT, "NEG"),
            (TOPIC, "MUSIC"),
            (TOPIC, "SPORT"),
            (TOPIC, "WEATHER"),
        ] {
            store.insert(init_prompt(f, v, 4, 16, 7)).unwrap();
        }
        let mut classifiers = BTreeMap::new();
        for f in [SENTIMENT, TOPIC] {
            classifiers.insert(
                f.to_string(),
                train_attribute_classifier(f, &corpus, &vocab, &ClassifierTrainConfig::default())
                    .unwrap(),
            );
        }
        (model, store, classifiers, corpus, vocab)
    }

    #[test]
    fn zero_epochs_keeps_the_fresh_connector() {
        let (model, store, classifiers, corpus, vocab) = setup();
        let cfg = ConnectorTrainConfig {
            epochs: 0,
            connector_len: 4,
            seed: 9,
            ..ConnectorTrainConfig::default()
        };
        let (c, log) = train_connector(&model, &store, &classifiers, &corpus, &vocab, &cfg).unwrap();
        assert!(log.epoch_losses.is_empty());
        assert_eq!(c.matrix.data(), Connector::init(4, 16, 9).matrix.data());
    }

    #[test]
    fn training_moves_only_the_connector() {
        let (model, store, classifiers, corpus, vocab) = setup();
        let model_digest = model.digest();
        let store_digest = store.digest();
        let clf_digests: Vec<String> = classifiers.values().map(|c| c.digest()).collect();
        let cfg = ConnectorTrainConfig {
            epochs: 1,
            connector_len: 4,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 9,
            ..ConnectorTrainConfig::default()
        };
        let (c, log) = train_connector(&model, &store, &classifiers, &corpus, &vocab, &cfg).unwrap();
        assert_eq!(log.epoch_losses.len(), 1);
        assert_ne!(c.matrix.data(), Connector::init(4, 16, 9).matrix.data());
        assert_eq!(model.digest(), model_digest);
        assert_eq!(store.digest(), store_digest);
        let after: Vec<String> = classifiers.values().map(|c| c.digest()).collect();
        assert_eq!(clf_digests, after);
    }

    #[test]
    fn held_out_pair_excludes_examples() {
        let (model, store, classifiers, corpus, vocab) = setup();
        let mut held = BTreeMap::new();
        held.insert(SENTIMENT.to_string(), "POS".to_string());
        held.insert(TOPIC.to_string(), "MUSIC".to_string());
        let cfg = ConnectorTrainConfig {
            epochs: 0,
            connector_len: 4,
            held_out_pair: Some(held.clone()),
            ..ConnectorTrainConfig::default()
        };
        // Training works with the pair excluded, and records it.
        let (c, _) = train_connector(&model, &store, &classifiers, &corpus, &vocab, &cfg).unwrap();
        assert_eq!(c.meta.held_out, Some(held));

        // Holding out the exact (real, pseudo) pair of a one-sentence corpus
        // empties it.
        let one = corpus
            .iter()
            .find(|s| s.labels.get(SENTIMENT) == Some(&"POS".to_string()))
            .cloned()
            .unwrap();
        let (idx, _) = classifiers[TOPIC].predict_class(&vocab.encode(&one.text));
        let mut exact = BTreeMap::new();
        exact.insert(SENTIMENT.to_string(), "POS".to_string());
        exact.insert(TOPIC.to_string(), classifiers[TOPIC].classes()[idx].clone());
        let cfg = ConnectorTrainConfig {
            epochs: 0,
            connector_len: 4,
            held_out_pair: Some(exact),
            ..ConnectorTrainConfig::default()
        };
        assert!(matches!(
            train_connector(&model, &store, &classifiers, &[one], &vocab, &cfg),
            Err(ComposeError::EmptyAfterExclusion)
        ));
    }

    #[test]
    fn store_model_mismatch_is_rejected() {
        let (model, _, classifiers, corpus, vocab) = setup();
        let other = LanguageModel::new(
            ModelConfig {
                vocab_size: vocab.len(),
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 64,
                dropout_rate: 0.0,
            },
            6,
        )
        .unwrap();
        let store = PromptStore::new(&other);
        assert!(matches!(
            train_connector(
                &model,
                &store,
                &classifiers,
                &corpus,
                &vocab,
                &ConnectorTrainConfig::default()
            ),
            Err(ComposeError::StoreModelMismatch { .. })
        ));
    }

    #[test]
    fn connector_round_trips() {
        let c = Connector::init(8, 16, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("connector.bin");
        c.save(&path).unwrap();
        let loaded = Connector::load(&path).unwrap();
        assert_eq!(c.matrix.data(), loaded.matrix.data());
        assert_eq!(c.digest(), loaded.digest());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (model, store, classifiers, corpus, vocab) = setup();
        let cfg = ConnectorTrainConfig {
            epochs: 2,
            connector_len: 4,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 9,
            ..ConnectorTrainConfig::default()
        };
        let run = || {
            let (c, _) =
                train_connector(&model, &store, &classifiers, &corpus, &vocab, &cfg).unwrap();
            c.digest()
        };
        assert_eq!(run(), run());
    }
}
