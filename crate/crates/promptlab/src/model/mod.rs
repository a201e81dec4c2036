//! Decoder-only transformer with two extension points: an arbitrary additive
//! attention bias and a caller-supplied position-id vector.
//!
//! Position embeddings are gathered by the supplied ids rather than by
//! sequence index, and the attention bias is added to every head's logits
//! before the row softmax. Those two hooks are what the composition module
//! manipulates; the transformer itself is standard pre-norm GPT-2 shape with
//! weight tying.

mod decode;
mod pretrain;

pub use decode::{
    generate, perplexity, DecodeConfig, DecodeStrategy, GenerateOutput, InputLayout,
    TextOnlyLayout,
};
pub use pretrain::{pretrain_lm, PretrainConfig, TokenizedDataset, TrainingLog};

use crate::container::{self, ContainerError};
use crate::tensor::{Graph, Tensor, TensorError, Var, MASK_NEG_INF};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds max_positions {max}")]
    Capacity { len: usize, max: usize },
    #[error("position id {id} out of range (max_positions {max})")]
    PositionOutOfRange { id: usize, max: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("vocab mismatch: model expects {model}, data uses {data}")]
    VocabMismatch { model: usize, data: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("text too short: need at least {need} tokens, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("invalid decode config: {0}")]
    BadDecodeConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint is missing array {0}")]
    MissingArray(String),
}

/// Hyperparameters of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes while exhibiting every
    /// mechanism the crate studies.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_emb: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_positions: 256,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.d_emb == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_positions == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be positive".into()));
        }
        if self.d_emb % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_emb {} not divisible by n_heads {}",
                self.d_emb, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig("dropout_rate must be in [0,1)".into()));
        }
        Ok(())
    }
}

struct LayerParams {
    ln1_gain: Tensor,
    ln1_shift: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_shift: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// The frozen-or-trainable transformer. The output projection is weight-tied
/// to the token embedding table.
pub struct LanguageModel {
    cfg: ModelConfig,
    token_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<LayerParams>,
    lnf_gain: Tensor,
    lnf_shift: Tensor,
}

/// One forward pass worth of inputs: already-embedded rows (prompts,
/// connector, and token embeddings concatenated), explicit position ids,
/// the full additive attention bias (causal structure included), and a mask
/// marking rows excluded from any loss.
#[derive(Debug, Clone)]
pub struct ForwardInput {
    pub input_rows: Tensor,
    pub position_ids: Vec<usize>,
    pub attention_bias: Tensor,
    pub loss_mask: Vec<bool>,
}

/// Attention probabilities captured during a probed forward pass, indexed
/// `[layer][head]`, each an `[L×L]` row-stochastic matrix.
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub per_layer: Vec<Vec<Tensor>>,
}

/// Graph handles for every model parameter, in the fixed traversal order.
pub struct BoundModel {
    pub token_emb: Var,
    pub pos_emb: Var,
    layers: Vec<BoundLayer>,
    lnf_gain: Var,
    lnf_shift: Var,
}

struct BoundLayer {
    ln1_gain: Var,
    ln1_shift: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_shift: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
        .expect("shape matches")
        .with_requires_grad()
}

impl LanguageModel {
    /// Fresh randomly initialized model: weights N(0, 0.02²), zero biases,
    /// unit layer-norm gains.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let d = cfg.d_emb;
        let token_emb = init_matrix(&mut rng, cfg.vocab_size, d, std);
        let pos_emb = init_matrix(&mut rng, cfg.max_positions, d, std);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_gain: ones(d),
                ln1_shift: zeros(d),
                wq: init_matrix(&mut rng, d, d, std),
                bq: zeros(d),
                wk: init_matrix(&mut rng, d, d, std),
                bk: zeros(d),
                wv: init_matrix(&mut rng, d, d, std),
                bv: zeros(d),
                wo: init_matrix(&mut rng, d, d, std),
                bo: zeros(d),
                ln2_gain: ones(d),
                ln2_shift: zeros(d),
                w1: init_matrix(&mut rng, d, cfg.d_ff, std),
                b1: zeros(cfg.d_ff),
                w2: init_matrix(&mut rng, cfg.d_ff, d, std),
                b2: zeros(d),
            });
        }
        Ok(Self {
            cfg,
            token_emb,
            pos_emb,
            layers,
            lnf_gain: ones(d),
            lnf_shift: zeros(d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Visits every parameter with its name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.shift", &l.ln1_shift),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.shift", &l.ln2_shift),
                ("ffn.w1", &l.w1),
                ("ffn.b1", &l.b1),
                ("ffn.w2", &l.w2),
                ("ffn.b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.shift".into(), &self.lnf_shift));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_shift,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_shift,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_shift);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Content digest over config and all parameter bytes. Equal digests
    /// mean bit-identical models; prompt and connector training must leave
    /// this unchanged.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers all parameters on a graph. With `trainable`, gradients are
    /// tracked and can be pulled back out via [`collect_grads`](Self::collect_grads).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| -> Var {
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")
            }
        };
        BoundModel {
            token_emb: leaf(&self.token_emb),
            pos_emb: leaf(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    ln1_gain: leaf(&l.ln1_gain),
                    ln1_shift: leaf(&l.ln1_shift),
                    wq: leaf(&l.wq),
                    bq: leaf(&l.bq),
                    wk: leaf(&l.wk),
                    bk: leaf(&l.bk),
                    wv: leaf(&l.wv),
                    bv: leaf(&l.bv),
                    wo: leaf(&l.wo),
                    bo: leaf(&l.bo),
                    ln2_gain: leaf(&l.ln2_gain),
                    ln2_shift: leaf(&l.ln2_shift),
                    w1: leaf(&l.w1),
                    b1: leaf(&l.b1),
                    w2: leaf(&l.w2),
                    b2: leaf(&l.b2),
                })
                .collect(),
            lnf_gain: leaf(&self.lnf_gain),
            lnf_shift: leaf(&self.lnf_shift),
        }
    }

    /// Pulls per-parameter gradients off a graph after `backward`, in the
    /// same fixed order as [`params_mut`](Self::params_mut).
    pub fn collect_grads(&self, g: &Graph, bound: &BoundModel) -> Vec<Vec<f64>> {
        bound.var_order().iter().map(|v| g.grad(*v).to_vec()).collect()
    }

    /// Embeds token ids (no position information, no gradient).
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let d = self.cfg.d_emb;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(ModelError::VocabMismatch {
                    model: self.cfg.vocab_size,
                    data: id + 1,
                });
            }
            data.extend_from_slice(self.token_emb.row(id));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }

    fn validate_input(&self, input: &ForwardInput) -> Result<(), ModelError> {
        let l = input.input_rows.rows();
        if l > self.cfg.max_positions {
            return Err(ModelError::Capacity {
                len: l,
                max: self.cfg.max_positions,
            });
        }
        if input.position_ids.len() != l || input.loss_mask.len() != l {
            return Err(ModelError::BadConfig(format!(
                "input metadata lengths disagree with {l} rows"
            )));
        }
        for &id in &input.position_ids {
            if id >= self.cfg.max_positions {
                return Err(ModelError::PositionOutOfRange {
                    id,
                    max: self.cfg.max_positions,
                });
            }
        }
        if input.attention_bias.shape() != [l, l] {
            return Err(ModelError::BadConfig("attention bias must be L×L".into()));
        }
        Ok(())
    }

    /// Core forward pass over an already-bound model: returns the logits var.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        rows: Var,
        position_ids: &[usize],
        attention_bias: &Tensor,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var, ModelError> {
        self.forward_on_graph_with_dropout(g, bound, rows, position_ids, attention_bias, probe, None)
    }

    /// Forward pass with inverted-dropout masks on the residual branches,
    /// used by pretraining when `dropout_rate > 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_graph_with_dropout(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        rows: Var,
        position_ids: &[usize],
        attention_bias: &Tensor,
        mut probe: Option<&mut AttentionProbe>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let d = self.cfg.d_emb;
        let dh = d / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rate = self.cfg.dropout_rate;
        let drop = |g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>| -> Var {
            match rng {
                Some(rng) if rate > 0.0 => {
                    use rand::Rng;
                    let n = g.value(x).len();
                    let shape = g.value(x).shape().to_vec();
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let m = g.constant(shape, mask).expect("mask matches");
                    g.mul(x, m).expect("same shape")
                }
                _ => x,
            }
        };

        let pos_rows = g.gather_rows(bound.pos_emb, position_ids)?;
        let mut h = g.add(rows, pos_rows)?;
        h = drop(g, h, &mut dropout_rng);
        if let Some(p) = probe.as_deref_mut() {
            p.per_layer = (0..self.cfg.n_layers).map(|_| Vec::new()).collect();
        }
        for (li, layer) in bound.layers.iter().enumerate() {
            let a = g.layer_norm(h, layer.ln1_gain, layer.ln1_shift)?;
            let q0 = g.matmul(a, layer.wq)?;
            let q = g.add_row_broadcast(q0, layer.bq)?;
            let k0 = g.matmul(a, layer.wk)?;
            let k = g.add_row_broadcast(k0, layer.bk)?;
            let v0 = g.matmul(a, layer.wv)?;
            let v = g.add_row_broadcast(v0, layer.bv)?;
            let mut head_outs = Vec::with_capacity(self.cfg.n_heads);
            for head in 0..self.cfg.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(v, head * dh, dh)?;
                let scores0 = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores0, scale);
                let probs = g.softmax_rows_with_bias(scores, attention_bias)?;
                if let Some(p) = probe.as_deref_mut() {
                    p.per_layer[li].push(g.value(probs).clone());
                }
                head_outs.push(g.matmul(probs, vh)?);
            }
            let merged = g.concat_cols(&head_outs)?;
            let att0 = g.matmul(merged, layer.wo)?;
            let att1 = g.add_row_broadcast(att0, layer.bo)?;
            let att = drop(g, att1, &mut dropout_rng);
            h = g.add(h, att)?;
            let f = g.layer_norm(h, layer.ln2_gain, layer.ln2_shift)?;
            let f1 = g.matmul(f, layer.w1)?;
            let f1b = g.add_row_broadcast(f1, layer.b1)?;
            let act = g.gelu(f1b);
            let f2 = g.matmul(act, layer.w2)?;
            let ff0 = g.add_row_broadcast(f2, layer.b2)?;
            let ff = drop(g, ff0, &mut dropout_rng);
            h = g.add(h, ff)?;
        }
        let hf = g.layer_norm(h, bound.lnf_gain, bound.lnf_shift)?;
        Ok(g.matmul_nt(hf, bound.token_emb)?)
    }

    /// Per-position next-token logits `[L × vocab]`, no gradients.
    pub fn forward(&self, input: &ForwardInput) -> Result<Tensor, ModelError> {
        self.validate_input(input)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let rows = g.constant(
            input.input_rows.shape().to_vec(),
            input.input_rows.data().to_vec(),
        )?;
        let logits = self.forward_on_graph(
            &mut g,
            &bound,
            rows,
            &input.position_ids,
            &input.attention_bias,
            None,
        )?;
        Ok(g.value(logits).clone())
    }

    /// Same as [`forward`](Self::forward) but also captures every attention
    /// probability matrix.
    pub fn forward_with_probe(
        &self,
        input: &ForwardInput,
    ) -> Result<(Tensor, AttentionProbe), ModelError> {
        self.validate_input(input)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let rows = g.constant(
            input.input_rows.shape().to_vec(),
            input.input_rows.data().to_vec(),
        )?;
        let mut probe = AttentionProbe::default();
        let logits = self.forward_on_graph(
            &mut g,
            &bound,
            rows,
            &input.position_ids,
            &input.attention_bias,
            Some(&mut probe),
        )?;
        Ok((g.value(logits).clone(), probe))
    }

    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let arrays: Vec<(String, Vec<usize>, &[f64])> = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.data()))
            .collect();
        let meta = serde_json::json!({ "config": self.cfg, "digest": self.digest() });
        Ok(container::write_container(path, "model", meta, &arrays)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let c = container::read_container(path, "model")?;
        let cfg: ModelConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| ModelError::BadConfig(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        let mut found = std::collections::BTreeMap::new();
        for (entry, data) in c.arrays {
            found.insert(entry.name.clone(), (entry, data));
        }
        {
            let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
            let params = model.params_mut();
            for (name, p) in names.iter().zip(params) {
                let (entry, data) = found
                    .remove(name)
                    .ok_or_else(|| ModelError::MissingArray(name.clone()))?;
                if entry.shape != p.shape() {
                    return Err(ModelError::BadConfig(format!(
                        "array {name} has shape {:?}, expected {:?}",
                        entry.shape,
                        p.shape()
                    )));
                }
                p.data_mut().copy_from_slice(&data);
            }
        }
        Ok(model)
    }
}

impl BoundModel {
    /// All parameter vars in the same order as `LanguageModel::params_mut`.
    pub fn var_order(&self) -> Vec<Var> {
        let mut out = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_shift, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gain, l.ln2_shift, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.push(self.lnf_gain);
        out.push(self.lnf_shift);
        out
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d])
        .expect("shape matches")
        .with_requires_grad()
}

fn zeros(d: usize) -> Tensor {
    Tensor::zeros(vec![d]).with_requires_grad()
}

/// Causal attention bias: strictly-upper-triangle cells get the mask
/// sentinel, everything else 0.
pub fn causal_bias(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = MASK_NEG_INF;
        }
    }
    Tensor::new(vec![l, l], data).expect("square")
}

/// Standard text-only input: consecutive position ids starting at 1 and a
/// plain causal mask.
pub fn text_forward_input(model: &LanguageModel, ids: &[usize]) -> Result<ForwardInput, ModelError> {
    let rows = model.embed_tokens(ids)?;
    let l = ids.len();
    Ok(ForwardInput {
        input_rows: rows,
        position_ids: (1..=l).collect(),
        attention_bias: causal_bias(l),
        loss_mask: vec![false; l],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                vocab_size: 11,
                d_emb: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_positions: 32,
                dropout_rate: 0.0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = ModelConfig::desk_default(10);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn forward_shape_contract() {
        let m = tiny();
        let input = text_forward_input(&m, &[3]).unwrap();
        let logits = m.forward(&input).unwrap();
        assert_eq!(logits.shape(), &[1, 11]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = tiny();
        let input = text_forward_input(&m, &[3, 5, 2, 9]).unwrap();
        let a = m.forward(&input).unwrap();
        let b = m.forward(&input).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn capacity_error_past_max_positions() {
        let m = tiny();
        let ids: Vec<usize> = (0..33).map(|i| i % 11).collect();
        let err = text_forward_input(&m, &ids).and_then(|inp| m.forward(&inp));
        assert!(matches!(err, Err(ModelError::Capacity { len: 33, max: 32 })));
    }

    #[test]
    fn blocked_key_column_gets_zero_attention() {
        let m = tiny();
        let mut input = text_forward_input(&m, &[1, 2, 3, 4]).unwrap();
        // Block every query from attending to key column 1 (on top of causal).
        let l = 4;
        let mut bias = input.attention_bias.data().to_vec();
        for i in 0..l {
            bias[i * l + 1] = crate::tensor::MASK_NEG_INF;
        }
        input.attention_bias = Tensor::new(vec![l, l], bias).unwrap();
        let (_, probe) = m.forward_with_probe(&input).unwrap();
        for layer in &probe.per_layer {
            for head in layer {
                for i in 0..l {
                    assert_eq!(head.row(i)[1], 0.0);
                    let s: f64 = head.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causality_later_tokens_cannot_leak() {
        let m = tiny();
        let a = text_forward_input(&m, &[1, 2, 3, 4]).unwrap();
        let mut b = text_forward_input(&m, &[1, 2, 3, 8]).unwrap();
        b.position_ids = a.position_ids.clone();
        let la = m.forward(&a).unwrap();
        let lb = m.forward(&b).unwrap();
        for t in 0..3 {
            for (x, y) in la.row(t).iter().zip(lb.row(t)) {
                assert_eq!(x.to_bits(), y.to_bits(), "position {t} leaked");
            }
        }
    }

    #[test]
    fn permuting_rows_ids_and_bias_is_a_no_op() {
        // Attention is a set operation given explicit positions and mask.
        let m = tiny();
        let ids = [5usize, 1, 7, 2, 9];
        let input = text_forward_input(&m, &ids).unwrap();
        let base = m.forward(&input).unwrap();

        let perm = [2usize, 0, 4, 1, 3];
        let l = ids.len();
        let d = m.config().d_emb;
        let mut rows = vec![0.0; l * d];
        let mut pos = vec![0usize; l];
        let mut bias = vec![0.0; l * l];
        for (new_i, &old_i) in perm.iter().enumerate() {
            rows[new_i * d..(new_i + 1) * d]
                .copy_from_slice(input.input_rows.row(old_i));
            pos[new_i] = input.position_ids[old_i];
            for (new_j, &old_j) in perm.iter().enumerate() {
                bias[new_i * l + new_j] = input.attention_bias.row(old_i)[old_j];
            }
        }
        let permuted = ForwardInput {
            input_rows: Tensor::new(vec![l, d], rows).unwrap(),
            position_ids: pos,
            attention_bias: Tensor::new(vec![l, l], bias).unwrap(),
            loss_mask: vec![false; l],
        };
        let out = m.forward(&permuted).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (x, y) in out.row(new_i).iter().zip(base.row(old_i)) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_digest() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        let loaded = LanguageModel::load(&path).unwrap();
        assert_eq!(m.digest(), loaded.digest());
    }
}
