use std::collections::{BTreeMap, BTreeSet};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{dot, AttentionKind, Graph, Span, Tensor, Var};

/// Which (layer, position) activations to capture. Layers are 1-based.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapSpec {
    pub layers: BTreeSet<usize>,
    pub positions: Vec<usize>,
}

impl TapSpec {
    pub fn new(layers: impl IntoIterator<Item = usize>, positions: Vec<usize>) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            positions,
        }
    }

    /// Layers `1..=n_layers` at one position.
    pub fn first_layers(n_layers: usize, position: usize) -> Self {
        Self::new(1..=n_layers, vec![position])
    }
}

/// Replacement activations for one sequence position, keyed by 1-based layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSite {
    pub position: usize,
    pub layers: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSpec {
    pub sites: Vec<PatchSite>,
}

impl PatchSpec {
    pub fn at(position: usize, layers: BTreeMap<usize, Vec<f64>>) -> Self {
        Self {
            sites: vec![PatchSite { position, layers }],
        }
    }

    /// Patch layers `1..=vectors.len()` at `position` with the given vectors.
    pub fn prefix(position: usize, vectors: &[Vec<f64>]) -> Self {
        let layers = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i + 1, v.clone()))
            .collect();
        Self::at(position, layers)
    }

    pub fn push(&mut self, site: PatchSite) {
        self.sites.push(site);
    }

    fn validate(&self, config: &ModelConfig, len: usize) -> Result<()> {
        for site in &self.sites {
            if site.position >= len {
                return Err(Error::PositionOutOfRange {
                    position: site.position,
                    len,
                });
            }
            for (&layer, vec) in &site.layers {
                config.check_layer(layer)?;
                if vec.len() != config.tap_width() {
                    return Err(Error::Dimension {
                        op: "patch",
                        left: vec![config.tap_width()],
                        right: vec![vec.len()],
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    Last,
    Rows(Vec<usize>),
}

/// One sequence in a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct SeqRequest<'r> {
    pub tokens: &'r [u32],
    pub taps: Option<&'r TapSpec>,
    pub patches: Option<&'r PatchSpec>,
    pub logits: LogitRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqResult {
    /// `rows × vocab`, one row per requested position.
    pub logits: Tensor,
    pub logit_rows: Vec<usize>,
    /// Keyed by (layer, position).
    pub taps: BTreeMap<(usize, usize), Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `seq × vocab`.
    pub logits: Tensor,
    /// Keyed by (layer, position); present exactly for the requested pairs.
    pub taps: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ForwardOutput {
    pub fn tap(&self, layer: usize, position: usize) -> Option<&[f64]> {
        self.taps.get(&(layer, position)).map(Vec::as_slice)
    }
}

/// Graph handles produced by [`Model::trace`].
pub(crate) struct Trace {
    pub logits: Option<Var>,
    /// Pre-projection attention output per layer (index 0 = layer 1).
    pub attn: Vec<Var>,
    /// Parameter leaves in [`Model::tensors`] order.
    pub params: Vec<Var>,
}

impl Model {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_seq: self.config.max_seq,
            });
        }
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Records the forward computation for `seqs` on `g`. Sequences are
    /// stacked row-wise and attend only within themselves. `logit_rows` are
    /// global stacked-row indices whose unembedded logits are produced.
    pub(crate) fn trace<'a>(
        &'a self,
        g: &mut Graph<'a>,
        seqs: &[&[u32]],
        patches: &[Option<&PatchSpec>],
        logit_rows: &[usize],
        trainable: bool,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let mut spans = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut prev_ids = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            spans.push(Span {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            if !s.is_empty() {
                prev_ids.push(cfg.vocab_size as u32);
                prev_ids.extend_from_slice(&s[..s.len() - 1]);
            }
            positions.extend(0..s.len() as u32);
        }
        for (span, p) in spans.iter().zip(patches) {
            if let Some(p) = p {
                p.validate(cfg, span.len)?;
            }
        }

        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<'a>, t: &'a Tensor| {
            let v = if trainable { g.param(t) } else { g.constant(t) };
            params.push(v);
            v
        };
        let tok = leaf(g, &self.tok_emb);
        let pos = leaf(g, &self.pos_emb);
        let prev = leaf(g, &self.prev_emb);
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let re = g.gather(prev, &prev_ids)?;
        let x = g.add(te, pe)?;
        let mut x = g.add(x, re)?;

        let mut attn = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let layer_idx = li + 1;
            let ln1_g = leaf(g, &layer.ln1_gain);
            let ln1_b = leaf(g, &layer.ln1_bias);
            let w_q = leaf(g, &layer.w_q);
            let w_k = leaf(g, &layer.w_k);
            let w_v = leaf(g, &layer.w_v);
            let w_o = leaf(g, &layer.w_o);
            let b_o = leaf(g, &layer.b_o);
            let ln2_g = leaf(g, &layer.ln2_gain);
            let ln2_b = leaf(g, &layer.ln2_bias);
            let w_in = leaf(g, &layer.w_in);
            let b_in = leaf(g, &layer.b_in);
            let w_out = leaf(g, &layer.w_out);
            let b_out = leaf(g, &layer.b_out);

            let h = g.layer_norm(x, ln1_g, ln1_b)?;
            let q = g.matmul(h, w_q)?;
            let k = g.matmul(h, w_k)?;
            let v = g.matmul(h, w_v)?;
            let mut a = g.attention(q, k, v, &spans, cfg.n_heads, cfg.attention_kind)?;

            let mut rows: Vec<(usize, &[f64])> = Vec::new();
            for (span, p) in spans.iter().zip(patches) {
                let Some(p) = p else { continue };
                for site in &p.sites {
                    if let Some(vec) = site.layers.get(&layer_idx) {
                        rows.push((span.start + site.position, vec.as_slice()));
                    }
                }
            }
            if !rows.is_empty() {
                a = g.patch_rows(a, &rows)?;
            }
            attn.push(a);

            let o = g.matmul(a, w_o)?;
            let o = g.add_row(o, b_o)?;
            x = g.add(x, o)?;

            let h2 = g.layer_norm(x, ln2_g, ln2_b)?;
            let f = g.matmul(h2, w_in)?;
            let f = g.add_row(f, b_in)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w_out)?;
            let f = g.add_row(f, b_out)?;
            x = g.add(x, f)?;
        }
        let lnf_g = leaf(g, &self.lnf_gain);
        let lnf_b = leaf(g, &self.lnf_bias);
        let w_u = leaf(g, &self.w_unembed);
        let logits = if logit_rows.is_empty() {
            None
        } else {
            let sel = g.select_rows(x, logit_rows)?;
            let hf = g.layer_norm(sel, lnf_g, lnf_b)?;
            Some(g.matmul(hf, w_u)?)
        };
        Ok(Trace {
            logits,
            attn,
            params,
        })
    }

    /// Batched inference. Each sequence is computed independently; results are
    /// bit-identical to running the sequences one at a time.
    pub fn run(&self, requests: &[SeqRequest<'_>]) -> Result<Vec<SeqResult>> {
        let seqs: Vec<&[u32]> = requests.iter().map(|r| r.tokens).collect();
        let patches: Vec<Option<&PatchSpec>> = requests.iter().map(|r| r.patches).collect();
        let mut logit_rows = Vec::new();
        let mut per_seq_rows = Vec::with_capacity(requests.len());
        let mut offset = 0;
        for r in requests {
            let len = r.tokens.len();
            let rows: Vec<usize> = match &r.logits {
                LogitRows::All => (0..len).collect(),
                LogitRows::Last => vec![len.saturating_sub(1)],
                LogitRows::Rows(rows) => rows.clone(),
            };
            for &row in &rows {
                if row >= len {
                    return Err(Error::PositionOutOfRange { position: row, len });
                }
                logit_rows.push(offset + row);
            }
            if let Some(t) = r.taps {
                for &layer in &t.layers {
                    self.config.check_layer(layer)?;
                }
                for &p in &t.positions {
                    if p >= len {
                        return Err(Error::PositionOutOfRange { position: p, len });
                    }
                }
            }
            per_seq_rows.push(rows);
            offset += len;
        }

        let mut g = Graph::new();
        let trace = self.trace(&mut g, &seqs, &patches, &logit_rows, false)?;
        let vocab = self.config.vocab_size;
        let logits = trace.logits.map(|v| g.value(v));

        let mut out = Vec::with_capacity(requests.len());
        let mut row_cursor = 0;
        let mut offset = 0;
        for (r, rows) in requests.iter().zip(per_seq_rows) {
            let mut data = Vec::with_capacity(rows.len() * vocab);
            if let Some(l) = logits {
                for i in 0..rows.len() {
                    data.extend_from_slice(l.row(row_cursor + i));
                }
            }
            row_cursor += rows.len();
            let mut taps = BTreeMap::new();
            if let Some(t) = r.taps {
                for &layer in &t.layers {
                    let a = g.value(trace.attn[layer - 1]);
                    for &p in &t.positions {
                        taps.insert((layer, p), a.row(offset + p).to_vec());
                    }
                }
            }
            offset += r.tokens.len();
            out.push(SeqResult {
                logits: Tensor::new(vec![rows.len(), vocab], data)?,
                logit_rows: rows,
                taps,
            });
        }
        Ok(out)
    }

    /// Single-sequence forward pass with optional taps and patches.
    pub fn forward(
        &self,
        tokens: &[u32],
        taps: Option<&TapSpec>,
        patches: Option<&PatchSpec>,
    ) -> Result<ForwardOutput> {
        let req = SeqRequest {
            tokens,
            taps,
            patches,
            logits: LogitRows::All,
        };
        let res = self.run(std::slice::from_ref(&req))?.pop().expect("one result");
        Ok(ForwardOutput {
            logits: res.logits,
            taps: res.taps,
        })
    }
}

/// Argmax over the vocabulary at `position`; ties go to the lowest token id.
pub fn logits_to_first_token(logits: &Tensor, position: usize) -> u32 {
    let row = logits.row(position);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// One attention head in column-vector form.
///
/// `w_k`: `d_k×d`, `w_v`: `d_v×d`, `context`: `d×n` (one column per
/// position), `q`: length `d_k`. Softmax kind computes
/// `W_V·C·softmax((W_K·C)ᵀq/√d_k)`; relaxed-linear computes `W_V·C·(W_K·C)ᵀ·q`.
pub fn attention_head(
    w_k: &Tensor,
    w_v: &Tensor,
    context: &Tensor,
    q: &[f64],
    kind: AttentionKind,
) -> Result<Vec<f64>> {
    let (dk, d) = w_k.dims2("attention_head")?;
    let (dv, d2) = w_v.dims2("attention_head")?;
    let (d3, n) = context.dims2("attention_head")?;
    if d != d2 || d != d3 || q.len() != dk {
        return Err(Error::Dimension {
            op: "attention_head",
            left: vec![dk, d, dv],
            right: vec![d3, n, q.len()],
        });
    }
    let keys = w_k.matmul(context)?; // dk×n
    let values = w_v.matmul(context)?; // dv×n
    let mut weights: Vec<f64> = (0..n)
        .map(|j| (0..dk).fold(0.0, |acc, r| acc + keys.data()[r * n + j] * q[r]))
        .collect();
    if kind == AttentionKind::Softmax && n > 0 {
        let scale = 1.0 / (dk as f64).sqrt();
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        weights = Tensor::vector(scaled).softmax(0)?.into_data();
    }
    Ok((0..dv).map(|r| dot(values.row(r), &weights)).collect())
}
