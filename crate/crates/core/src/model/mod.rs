//! Decoder-only causal transformer with activation taps and patches.
//!
//! Blocks are pre-norm: `x += W_O·attn(LN₁(x))`, `x += MLP(LN₂(x))`, with
//! learned positional embeddings, a learned embedding of the preceding token
//! added at every position, GELU feed-forward and an untied unembedding.
//! The per-layer activation that gets tapped or patched is the concatenation of
//! head outputs *before* the output projection `W_O`.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::numerics::AttentionKind;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    attention_head, logits_to_first_token, ForwardOutput, LogitRows, PatchSite, PatchSpec, SeqRequest,
    SeqResult, TapSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub attention_kind: AttentionKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("all model sizes must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab_size and max_seq must be positive".into()));
        }
        Ok(())
    }

    /// Length of one layer's tapped activation, `n_heads × d_head`.
    pub fn tap_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Weights in row-vector convention: activations are rows, `y = x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    /// Embedding of the preceding token, added at every position; row
    /// `vocab_size` stands for "no preceding token".
    pub prev_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_unembed: Tensor,
}

impl Model {
    /// Gaussian init (σ = 0.02, residual projections scaled by `1/√(2·n_layers)`),
    /// unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| -> Tensor {
            let dist = Normal::new(0.0, s).expect("valid std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_emb = normal(&[v, d], std);
        let pos_emb = normal(&[config.max_seq, d], std);
        let prev_emb = normal(&[v + 1, d], std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: normal(&[d, d], std),
                w_k: normal(&[d, d], std),
                w_v: normal(&[d, d], std),
                w_o: normal(&[d, d], resid_std),
                b_o: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_in: normal(&[d, f], std),
                b_in: Tensor::zeros(&[f]),
                w_out: normal(&[f, d], resid_std),
                b_out: Tensor::zeros(&[d]),
            });
        }
        let w_unembed = normal(&[d, v], std);
        Ok(Self {
            tok_emb,
            pos_emb,
            prev_emb,
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            w_unembed,
            config,
        })
    }

    /// All weight tensors in the fixed serialization order: token embedding,
    /// positional embedding, previous-token embedding, then per layer (ln1 gain, ln1 bias, W_Q, W_K, W_V,
    /// W_O, b_O, ln2 gain, ln2 bias, W_in, b_in, W_out, b_out), then final
    /// norm gain, final norm bias, unembedding.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.prev_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain, &l.ln1_bias, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.b_o, &l.ln2_gain,
                &l.ln2_bias, &l.w_in, &l.b_in, &l.w_out, &l.b_out,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.prev_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.w_unembed]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}
