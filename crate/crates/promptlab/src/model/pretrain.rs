//! Next-token pretraining of the base model on plain text.
//!
//! Batches are gradient-accumulated: sentences are processed on worker
//! threads, but their gradients are summed in batch order, so the run is
//! bit-reproducible regardless of thread count.

use super::{causal_bias, LanguageModel, ModelError};
use crate::tensor::{Adam, AdamConfig, Graph};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Plain token sequences (sentence boundaries already marked by the caller).
#[derive(Debug, Clone)]
pub struct TokenizedDataset {
    pub sequences: Vec<Vec<usize>>,
}

impl TokenizedDataset {
    pub fn new(sequences: Vec<Vec<usize>>) -> Self {
        Self { sequences }
    }

    fn max_token(&self) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Place each sentence at a random position offset so every row of the
    /// position table gets trained; text then behaves sensibly wherever a
    /// composed layout puts it.
    pub position_jitter: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 7,
            position_jitter: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean next-token loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

fn sentence_loss_and_grads(
    model: &LanguageModel,
    seq: &[usize],
    offset: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let n = seq.len();
    let inputs = &seq[..n - 1];
    let targets = &seq[1..];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let rows = g.gather_rows(bound.token_emb, inputs)?;
    let ids: Vec<usize> = (0..inputs.len()).map(|i| offset + 1 + i).collect();
    let bias = causal_bias(inputs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let dropout = if model.config().dropout_rate > 0.0 {
        Some(&mut rng)
    } else {
        None
    };
    let logits =
        model.forward_on_graph_with_dropout(&mut g, &bound, rows, &ids, &bias, None, dropout)?;
    let loss = g.cross_entropy_next_token(logits, targets, &vec![false; targets.len()])?;
    g.backward(loss)?;
    Ok((g.value(loss).value(), model.collect_grads(&g, &bound)))
}

/// Trains the model in place by next-token cross-entropy on plain text.
/// Returns the per-epoch mean loss log.
pub fn pretrain_lm(
    model: &mut LanguageModel,
    data: &TokenizedDataset,
    cfg: &PretrainConfig,
) -> Result<TrainingLog, ModelError> {
    if data.sequences.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if data.max_token() >= model.config().vocab_size {
        return Err(ModelError::VocabMismatch {
            model: model.config().vocab_size,
            data: data.max_token() + 1,
        });
    }
    for seq in &data.sequences {
        if seq.len() < 2 {
            return Err(ModelError::TooShort {
                need: 2,
                got: seq.len(),
            });
        }
        if seq.len() > model.config().max_positions {
            return Err(ModelError::Capacity {
                len: seq.len(),
                max: model.config().max_positions,
            });
        }
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::BadConfig("batch_size must be positive".into()));
    }

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let max_positions = model.config().max_positions;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.sequences.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // Draw per-sentence offsets and dropout seeds sequentially so the
            // parallel section below has no RNG of its own.
            let jobs: Vec<(usize, usize, u64)> = batch
                .iter()
                .map(|&si| {
                    let len = data.sequences[si].len();
                    let slack = max_positions.saturating_sub(len);
                    let offset = if cfg.position_jitter && slack > 0 {
                        epoch_rng.gen_range(0..slack)
                    } else {
                        0
                    };
                    (si, offset, epoch_rng.gen::<u64>())
                })
                .collect();

            let results: Vec<Result<(f64, Vec<Vec<f64>>), ModelError>> = jobs
                .par_iter()
                .map(|&(si, offset, dseed)| {
                    sentence_loss_and_grads(model, &data.sequences[si], offset, dseed)
                })
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut params = model.params_mut();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                for (p, g) in params.iter_mut().zip(&grads) {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    p.accumulate_grad(&scaled);
                }
            }
            adam.step(&mut params)?;
        }
        log.epoch_losses.push(epoch_loss / data.sequences.len() as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(vocab: usize) -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                vocab_size: vocab,
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 24,
                dropout_rate: 0.0,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn memorizes_a_two_sentence_corpus() {
        let mut m = tiny_model(8);
        let data = TokenizedDataset::new(vec![
            vec![2, 4, 5, 6, 3],
            vec![2, 6, 5, 4, 3],
        ]);
        let cfg = PretrainConfig {
            epochs: 50,
            batch_size: 2,
            learning_rate: 1e-2,
            seed: 1,
            position_jitter: false,
        };
        let log = pretrain_lm(&mut m, &data, &cfg).unwrap();
        let first = log.epoch_losses[0];
        let last = log.final_loss().unwrap();
        assert!(last < 0.5 * first, "first {first}, last {last}");
    }

    #[test]
    fn zero_epochs_leaves_the_digest_unchanged() {
        let mut m = tiny_model(8);
        let before = m.digest();
        let data = TokenizedDataset::new(vec![vec![2, 4, 3]]);
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let log = pretrain_lm(&mut m, &data, &cfg).unwrap();
        assert!(log.epoch_losses.is_empty());
        assert_eq!(m.digest(), before);
    }

    #[test]
    fn empty_corpus_and_vocab_mismatch_error() {
        let mut m = tiny_model(8);
        assert!(matches!(
            pretrain_lm(&mut m, &TokenizedDataset::new(vec![]), &PretrainConfig::default()),
            Err(ModelError::EmptyCorpus)
        ));
        assert!(matches!(
            pretrain_lm(
                &mut m,
                &TokenizedDataset::new(vec![vec![2, 9, 3]]),
                &PretrainConfig::default()
            ),
            Err(ModelError::VocabMismatch { model: 8, data: 10 })
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = TokenizedDataset::new(vec![
            vec![2, 4, 5, 3],
            vec![2, 5, 4, 3],
            vec![2, 6, 6, 3],
        ]);
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-2,
            seed: 5,
            position_jitter: true,
        };
        let digest = |_: ()| {
            let mut m = tiny_model(8);
            pretrain_lm(&mut m, &data, &cfg).unwrap();
            m.digest()
        };
        assert_eq!(digest(()), digest(()));
    }
}
