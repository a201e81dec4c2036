//! Combining two single-attribute prompts for multi-attribute generation.
//!
//! Three modes:
//! - `Concat`: plain concatenation, consecutive position ids, causal mask.
//! - `MaskRp`: adds a cross-prompt attention mask (the second prompt block
//!   cannot attend to the first) and re-indexed position ids under which
//!   each prompt block restarts at 1 — composition then looks, to each
//!   prompt, exactly like its training layout, and swapping prompts cannot
//!   change text logits.
//! - `Connector`: inserts a trained bridging matrix between the prompts and
//!   the text, with plain consecutive ids.

mod classifier;
mod connector;

pub use classifier::{
    pseudo_label_agreement, train_attribute_classifier, AttributeClassifier, ClassifierTrainConfig,
};
pub use connector::{
    train_connector, Connector, ConnectorMeta, ConnectorTrainConfig, HeldOutPair, PseudoMode,
};

use crate::model::{causal_bias, ForwardInput, InputLayout, LanguageModel, ModelError};
use crate::prompt::{AttributePrompt, PromptError, PromptStore};
use crate::tensor::{Tensor, TensorError, MASK_NEG_INF};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("mode requires a connector, none was supplied")]
    MissingConnector,
    #[error("prompt dimension {prompt} does not match model d_emb {model}")]
    DimensionMismatch { prompt: usize, model: usize },
    #[error("classifier for family {0} not available")]
    MissingClassifier(String),
    #[error("corpus became empty after held-out exclusion")]
    EmptyAfterExclusion,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("classifier corpus has a single class; need at least two")]
    SingleClassCorpus,
    #[error("store digest {store} does not match model digest {model}")]
    StoreModelMismatch { store: String, model: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error("bad metadata: {0}")]
    BadMetadata(String),
}

/// Cross-prompt attention mask: rows of the second prompt block are barred
/// from the columns of the first prompt block; everything else is open
/// (causal structure is applied separately).
#[derive(Debug, Clone)]
pub struct AttentionBiasSpec {
    pub l_u: usize,
    pub l_v: usize,
    pub n: usize,
    pub matrix: Tensor,
}

/// Builds the mask for prompt lengths `l_u`, `l_v` and text length `n`.
pub fn build_map_mask(l_u: usize, l_v: usize, n: usize) -> AttentionBiasSpec {
    let total = l_u + l_v + n;
    let mut data = vec![0.0; total * total];
    for i in l_u..l_u + l_v {
        for j in 0..l_u {
            data[i * total + j] = MASK_NEG_INF;
        }
    }
    AttentionBiasSpec {
        l_u,
        l_v,
        n,
        matrix: Tensor::new(vec![total, total], data).expect("square"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Standard,
    Reindexed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIdSpec {
    pub mode: PositionMode,
    pub ids: Vec<usize>,
}

/// Consecutive ids `1..=l_u+l_v+n`.
pub fn build_standard_sequence(l_u: usize, l_v: usize, n: usize) -> PositionIdSpec {
    PositionIdSpec {
        mode: PositionMode::Standard,
        ids: (1..=l_u + l_v + n).collect(),
    }
}

/// Re-indexed ids: each prompt block restarts at 1, text continues from
/// `max(l_u, l_v) + 1` (for equal prompt lengths this is the plain
/// "text after the second prompt" numbering; the max keeps swapping the
/// prompts a no-op when lengths differ).
pub fn build_rp_sequence(l_u: usize, l_v: usize, n: usize) -> PositionIdSpec {
    let m = l_u.max(l_v);
    let mut ids: Vec<usize> = (1..=l_u).collect();
    ids.extend(1..=l_v);
    ids.extend(m + 1..=m + n);
    PositionIdSpec {
        mode: PositionMode::Reindexed,
        ids,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    Concat,
    MaskRp,
    Connector,
}

impl std::fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CompositionMode::Concat => "concat",
            CompositionMode::MaskRp => "mask-rp",
            CompositionMode::Connector => "connector",
        };
        f.write_str(s)
    }
}

/// Ordered prompts plus mode, with the mask/re-indexing toggles exposed for
/// ablation runs.
pub struct CompositionPlan<'a> {
    pub first: &'a AttributePrompt,
    pub second: &'a AttributePrompt,
    pub connector: Option<&'a Connector>,
    pub mode: CompositionMode,
    pub use_map_mask: bool,
    pub use_rp: bool,
}

impl<'a> CompositionPlan<'a> {
    pub fn new(
        first: &'a AttributePrompt,
        second: &'a AttributePrompt,
        mode: CompositionMode,
    ) -> Self {
        let on = mode == CompositionMode::MaskRp;
        Self {
            first,
            second,
            connector: None,
            mode,
            use_map_mask: on,
            use_rp: on,
        }
    }

    pub fn with_connector(mut self, connector: &'a Connector) -> Self {
        self.connector = Some(connector);
        self
    }

    /// Ablation switches for the `MaskRp` mode.
    pub fn with_ablation(mut self, use_map_mask: bool, use_rp: bool) -> Self {
        self.use_map_mask = use_map_mask;
        self.use_rp = use_rp;
        self
    }

    /// Lays out rows, position ids, attention bias, and loss mask for the
    /// given text segment.
    pub fn forward_input(
        &self,
        model: &LanguageModel,
        text_ids: &[usize],
    ) -> Result<ForwardInput, ComposeError> {
        let d = model.config().d_emb;
        for p in [self.first, self.second] {
            if p.d_emb() != d {
                return Err(ComposeError::DimensionMismatch {
                    prompt: p.d_emb(),
                    model: d,
                });
            }
        }
        let l_u = self.first.prompt_len();
        let l_v = self.second.prompt_len();
        let n = text_ids.len();
        let connector = match self.mode {
            CompositionMode::Connector => {
                Some(self.connector.ok_or(ComposeError::MissingConnector)?)
            }
            _ => None,
        };
        let l_c = connector.map_or(0, |c| c.len());
        let total = l_u + l_v + l_c + n;

        let mut rows = Vec::with_capacity(total * d);
        rows.extend_from_slice(self.first.matrix.data());
        rows.extend_from_slice(self.second.matrix.data());
        if let Some(c) = connector {
            rows.extend_from_slice(c.matrix.data());
        }
        let text_rows = model.embed_tokens(text_ids)?;
        rows.extend_from_slice(text_rows.data());

        let position_ids = if self.use_rp {
            // Prompt blocks restart at 1; connector and text continue after
            // the longest block.
            let m = l_u.max(l_v);
            let mut ids: Vec<usize> = (1..=l_u).collect();
            ids.extend(1..=l_v);
            ids.extend(m + 1..=m + l_c + n);
            ids
        } else {
            (1..=total).collect()
        };

        let mut bias = causal_bias(total);
        if self.use_map_mask {
            let data = bias.data_mut();
            for i in l_u..l_u + l_v {
                for j in 0..l_u {
                    data[i * total + j] = MASK_NEG_INF;
                }
            }
        }

        let mut loss_mask = vec![true; l_u + l_v + l_c];
        loss_mask.extend(vec![false; n]);

        Ok(ForwardInput {
            input_rows: Tensor::new(vec![total, d], rows)?,
            position_ids,
            attention_bias: bias,
            loss_mask,
        })
    }
}

impl InputLayout for CompositionPlan<'_> {
    fn build(&self, model: &LanguageModel, text_ids: &[usize]) -> Result<ForwardInput, ModelError> {
        self.forward_input(model, text_ids).map_err(|e| match e {
            ComposeError::Model(m) => m,
            other => ModelError::BadConfig(other.to_string()),
        })
    }
}

/// Convenience wrapper for building a composed [`ForwardInput`] directly.
pub fn compose(
    first: &AttributePrompt,
    second: &AttributePrompt,
    connector: Option<&Connector>,
    mode: CompositionMode,
    prefix_ids: &[usize],
    model: &LanguageModel,
) -> Result<ForwardInput, ComposeError> {
    let mut plan = CompositionPlan::new(first, second, mode);
    if let Some(c) = connector {
        plan = plan.with_connector(c);
    }
    plan.forward_input(model, prefix_ids)
}

/// Looks up the two prompts for an ordered attribute pair in the store.
pub fn plan_for_pair<'a>(
    store: &'a PromptStore,
    first: (&str, &str),
    second: (&str, &str),
    mode: CompositionMode,
) -> Result<CompositionPlan<'a>, ComposeError> {
    let a = store.get(first.0, first.1)?;
    let b = store.get(second.0, second.1)?;
    Ok(CompositionPlan::new(a, b, mode))
}

/// `S_w = Σ p_z · S_z` over a family's stored prompts in class order.
pub fn weighted_prompt_mixture(
    store: &PromptStore,
    family: &str,
    classes: &[String],
    probs: &[f64],
) -> Result<Tensor, ComposeError> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for (class, p) in classes.iter().zip(probs) {
        let prompt = store.get(family, class)?;
        let data = prompt.matrix.data();
        match &mut acc {
            None => {
                shape = prompt.matrix.shape().to_vec();
                acc = Some(data.iter().map(|v| v * p).collect());
            }
            Some(acc) => {
                if prompt.matrix.shape() != shape.as_slice() {
                    return Err(ComposeError::Prompt(PromptError::LengthMismatch {
                        expected: shape[0],
                        found: prompt.matrix.shape()[0],
                    }));
                }
                for (a, v) in acc.iter_mut().zip(data) {
                    *a += v * p;
                }
            }
        }
    }
    let acc = acc.ok_or(ComposeError::EmptyCorpus)?;
    Ok(Tensor::new(shape, acc)?)
}

/// Probability-weighted pseudo prompt for a sentence, using the
/// classifier's predicted distribution.
pub fn build_pseudo_prompt_weighted(
    classifier: &AttributeClassifier,
    sentence_tokens: &[usize],
    store: &PromptStore,
) -> Result<Tensor, ComposeError> {
    let probs = classifier.predict_probs(sentence_tokens);
    weighted_prompt_mixture(store, classifier.family(), classifier.classes(), &probs)
}

/// The stored prompt whose class index is the classifier argmax; ties break
/// toward the lowest class index. Returns the prompt and the chosen index.
pub fn build_pseudo_prompt_argmax<'a>(
    classifier: &AttributeClassifier,
    sentence_tokens: &[usize],
    store: &'a PromptStore,
) -> Result<(&'a AttributePrompt, usize), ComposeError> {
    let probs = classifier.predict_probs(sentence_tokens);
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    let class = &classifier.classes()[best];
    Ok((store.get(classifier.family(), class)?, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prompt::init_prompt;
    use crate::tensor::MASK_THRESHOLD;

    fn tiny_model() -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                vocab_size: 20,
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 64,
                dropout_rate: 0.0,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn smallest_mask_instance() {
        let spec = build_map_mask(1, 1, 1);
        let m = &spec.matrix;
        assert_eq!(m.shape(), &[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                let v = m.row(i)[j];
                if i == 1 && j == 0 {
                    assert!(v <= MASK_THRESHOLD);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_blocks_exactly_l_v_by_l_u_cells() {
        let spec = build_map_mask(2, 3, 2);
        let blocked = spec
            .matrix
            .data()
            .iter()
            .filter(|&&v| v <= MASK_THRESHOLD)
            .count();
        assert_eq!(blocked, 6);
        for i in 2..5 {
            for j in 0..2 {
                assert!(spec.matrix.row(i)[j] <= MASK_THRESHOLD);
            }
        }
    }

    #[test]
    fn rp_sequence_matches_the_equal_length_form() {
        assert_eq!(build_rp_sequence(2, 2, 3).ids, vec![1, 2, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn rp_sequence_uses_max_for_unequal_lengths() {
        let ids = build_rp_sequence(2, 3, 2).ids;
        assert_eq!(ids, vec![1, 2, 1, 2, 3, 4, 5]);
        assert_eq!(&ids[5..], &[4, 5], "text sits after the longest block");
    }

    #[test]
    fn standard_sequence_is_consecutive() {
        assert_eq!(build_standard_sequence(2, 2, 3).ids, vec![1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn concat_layout_length_arithmetic() {
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 8, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 8, 16, 2);
        let plan = CompositionPlan::new(&a, &b, CompositionMode::Concat);
        let input = plan.forward_input(&model, &[1, 2, 3]).unwrap();
        assert_eq!(input.input_rows.rows(), 19);
        assert_eq!(input.position_ids, (1..=19).collect::<Vec<_>>());
        assert!(input.loss_mask[..16].iter().all(|&m| m));
        assert!(!input.loss_mask[16]);
    }

    #[test]
    fn mask_rp_bias_embeds_the_map_mask() {
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 4, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 4, 16, 2);
        let plan = CompositionPlan::new(&a, &b, CompositionMode::MaskRp);
        let input = plan.forward_input(&model, &[1, 2]).unwrap();
        let total = 10;
        let mask = build_map_mask(4, 4, 2);
        let causal = causal_bias(total);
        for i in 0..total {
            for j in 0..total {
                let expect = causal.row(i)[j] + mask.matrix.row(i)[j];
                assert_eq!(input.attention_bias.row(i)[j], expect, "({i},{j})");
            }
        }
        assert_eq!(input.position_ids, vec![1, 2, 3, 4, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn connector_layout_contract() {
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 8, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 8, 16, 2);
        let c = Connector::init(8, 16, 3);
        let plan = CompositionPlan::new(&a, &b, CompositionMode::Connector).with_connector(&c);
        let input = plan.forward_input(&model, &[1, 2, 3]).unwrap();
        assert_eq!(input.input_rows.rows(), 27);
        let mask: Vec<bool> = input.loss_mask;
        assert!(mask[..24].iter().all(|&m| m));
        assert_eq!(mask[24..].iter().filter(|&&m| !m).count(), 3);
        assert_eq!(input.position_ids, (1..=27).collect::<Vec<_>>());
    }

    #[test]
    fn connector_mode_without_connector_errors() {
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 8, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 8, 16, 2);
        let plan = CompositionPlan::new(&a, &b, CompositionMode::Connector);
        assert!(matches!(
            plan.forward_input(&model, &[1]),
            Err(ComposeError::MissingConnector)
        ));
    }

    #[test]
    fn weighted_mixture_algebra() {
        let model = tiny_model();
        let mut store = crate::prompt::PromptStore::new(&model);
        for (v, seed) in [("MUSIC", 1u64), ("SPORT", 2), ("WEATHER", 3)] {
            store.insert(init_prompt("TOPIC", v, 4, 16, seed)).unwrap();
        }
        let classes: Vec<String> =
            ["MUSIC", "SPORT", "WEATHER"].iter().map(|s| s.to_string()).collect();

        // One-hot weights reproduce the selected prompt bit-exactly.
        let one_hot = weighted_prompt_mixture(&store, "TOPIC", &classes, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(one_hot.data(), store.get("TOPIC", "WEATHER").unwrap().matrix.data());

        // A uniform mixture over two classes is the plain average.
        let half = weighted_prompt_mixture(
            &store,
            "TOPIC",
            &classes[..2].to_vec(),
            &[0.5, 0.5],
        )
        .unwrap();
        let a = store.get("TOPIC", "MUSIC").unwrap().matrix.data();
        let b = store.get("TOPIC", "SPORT").unwrap().matrix.data();
        for ((h, x), y) in half.data().iter().zip(a).zip(b) {
            assert_eq!(*h, (x + y) / 2.0);
        }

        // Random weights match an independent per-coordinate recomputation.
        let p = [0.23, 0.54, 0.23];
        let w = weighted_prompt_mixture(&store, "TOPIC", &classes, &p).unwrap();
        let c = store.get("TOPIC", "WEATHER").unwrap().matrix.data();
        for i in 0..w.len() {
            let expect = p[0] * a[i] + p[1] * b[i] + p[2] * c[i];
            assert!((w.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn swap_invariance_under_mask_rp_with_untrained_prompts() {
        // Holds for any prompt contents: it is a structural property of the
        // mask and the re-indexed ids.
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 4, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 4, 16, 2);
        let text = [1usize, 2, 3];

        let fwd = |first, second| {
            let plan = CompositionPlan::new(first, second, CompositionMode::MaskRp);
            let input = plan.forward_input(&model, &text).unwrap();
            model.forward(&input).unwrap()
        };
        let ab = fwd(&a, &b);
        let ba = fwd(&b, &a);
        // Compare logits at text rows (the last 3).
        let total = 4 + 4 + 3;
        for row in total - 3..total {
            for (x, y) in ab.row(row).iter().zip(ba.row(row)) {
                assert!((x - y).abs() <= 1e-9, "row {row}: {x} vs {y}");
            }
        }

        // Concat, by contrast, is order sensitive.
        let fwd_concat = |first, second| {
            let plan = CompositionPlan::new(first, second, CompositionMode::Concat);
            let input = plan.forward_input(&model, &text).unwrap();
            model.forward(&input).unwrap()
        };
        let cab = fwd_concat(&a, &b);
        let cba = fwd_concat(&b, &a);
        let diff: f64 = (total - 3..total)
            .map(|r| {
                cab.row(r)
                    .iter()
                    .zip(cba.row(r))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "concat should feel prompt order, diff {diff}");
    }

    #[test]
    fn composed_second_prompt_attention_to_first_is_exactly_zero() {
        let model = tiny_model();
        let a = init_prompt("SENTIMENT", "POS", 4, 16, 1);
        let b = init_prompt("TOPIC", "MUSIC", 4, 16, 2);
        let plan = CompositionPlan::new(&a, &b, CompositionMode::MaskRp);
        let input = plan.forward_input(&model, &[1, 2, 3]).unwrap();
        let (_, probe) = model.forward_with_probe(&input).unwrap();
        for layer in &probe.per_layer {
            for head in layer {
                for i in 4..8 {
                    for j in 0..4 {
                        assert_eq!(head.row(i)[j], 0.0, "query {i} key {j}");
                    }
                }
            }
        }
    }
}
