//! Autoregressive decoding: greedy or seeded top-k, no KV cache (sequences
//! are short enough that recomputing the forward pass is fine).

use super::{ForwardInput, LanguageModel, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::TopK,
            k: 10,
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 42,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), ModelError> {
        if self.k == 0 || self.k > vocab_size {
            return Err(ModelError::BadDecodeConfig(format!(
                "k={} must be in 1..={vocab_size}",
                self.k
            )));
        }
        if self.temperature <= 0.0 {
            return Err(ModelError::BadDecodeConfig("temperature must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::BadDecodeConfig("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the model input for the current text segment. Implementations
/// decide what sits in front of the text (nothing, one prompt, a composed
/// prompt pair) and how positions and attention are laid out.
pub trait InputLayout: Sync {
    fn build(&self, model: &LanguageModel, text_ids: &[usize]) -> Result<ForwardInput, ModelError>;
}

/// Layout with no prompt rows at all: consecutive ids from 1, causal mask.
pub struct TextOnlyLayout;

impl InputLayout for TextOnlyLayout {
    fn build(&self, model: &LanguageModel, text_ids: &[usize]) -> Result<ForwardInput, ModelError> {
        super::text_forward_input(model, text_ids)
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Full text segment: the prefix followed by generated tokens.
    pub tokens: Vec<usize>,
    /// Count of freshly generated tokens.
    pub new_tokens: usize,
    /// True when generation hit the position capacity before finishing.
    pub truncated: bool,
    /// True when the model emitted `eos_id`.
    pub hit_eos: bool,
}

/// Samples a continuation of `prefix` under the given layout.
///
/// New tokens extend the text segment, so their position ids continue the
/// text-segment numbering the layout defines. The RNG is seeded from
/// `cfg.seed`; identical inputs give identical outputs.
pub fn generate(
    model: &LanguageModel,
    layout: &dyn InputLayout,
    prefix: &[usize],
    cfg: &DecodeConfig,
    eos_id: Option<usize>,
) -> Result<GenerateOutput, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::BadDecodeConfig("prefix must be non-empty".into()));
    }
    cfg.validate(model.config().vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut text = prefix.to_vec();
    let mut truncated = false;
    let mut hit_eos = false;
    for _ in 0..cfg.max_new_tokens {
        let input = match layout.build(model, &text) {
            Ok(i) => i,
            Err(ModelError::Capacity { .. }) | Err(ModelError::PositionOutOfRange { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let logits = match model.forward(&input) {
            Ok(l) => l,
            Err(ModelError::Capacity { .. }) | Err(ModelError::PositionOutOfRange { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let last = logits.row(logits.rows() - 1);
        let next = sample_token(last, cfg, &mut rng);
        if Some(next) == eos_id {
            hit_eos = true;
            break;
        }
        text.push(next);
    }
    let new_tokens = text.len() - prefix.len();
    Ok(GenerateOutput {
        tokens: text,
        new_tokens,
        truncated,
        hit_eos,
    })
}

fn sample_token(logits: &[f64], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> usize {
    match cfg.strategy {
        DecodeStrategy::Greedy => argmax(logits),
        DecodeStrategy::TopK => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            // Ties broken toward the lower index so decoding is total-order
            // deterministic.
            idx.sort_by(|&a, &b| {
                logits[b]
                    .partial_cmp(&logits[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let top = &idx[..cfg.k.min(idx.len())];
            let max = logits[top[0]];
            let weights: Vec<f64> = top
                .iter()
                .map(|&i| ((logits[i] - max) / cfg.temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (w, &i) in weights.iter().zip(top) {
                u -= w;
                if u <= 0.0 {
                    return i;
                }
            }
            *top.last().expect("top-k nonempty")
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Perplexity of a plain text segment under the model, no prompts attached:
/// `exp(mean NLL)` of every token given `bos_id` plus the preceding tokens.
pub fn perplexity(model: &LanguageModel, text: &[usize], bos_id: usize) -> Result<f64, ModelError> {
    if text.len() < 2 {
        return Err(ModelError::TooShort {
            need: 2,
            got: text.len(),
        });
    }
    let mut input_ids = Vec::with_capacity(text.len());
    input_ids.push(bos_id);
    input_ids.extend_from_slice(&text[..text.len() - 1]);
    let input = super::text_forward_input(model, &input_ids)?;
    let logits = model.forward(&input)?;
    let mut nll = 0.0;
    for (i, &target) in text.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        nll += lse - row[target];
    }
    Ok((nll / text.len() as f64).exp())
}
