//! Trains the toy transformer on a mixture of task families.
//!
//! Each training sequence is `X₁ S Y₁ … X_n S Y_n` for one family and one
//! sampled mapping, with `n` uniform in `[min_examples, max_examples]`. The
//! loss is cross-entropy at separator positions only, predicting the label
//! that follows. Optimization is Adam with linear warmup and a constant rate
//! afterwards.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::model::{
    logits_to_first_token, AttentionKind, Checkpoint, LogitRows, Model, ModelConfig, SeqRequest,
    TrainingMeta,
};
use crate::numerics::{Graph, Tensor};
use crate::seeds::derive_seed;
use crate::tasks::{
    build_prompt, family_by_name, sample_episode, Example, FamilyKind, TaskFamily, SEPARATOR, VOCAB_SIZE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// (family name, weight); weights sum to 1.
    pub mixture: Vec<(String, f64)>,
    pub min_examples: usize,
    pub max_examples: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Fraction of random-bijection training sequences whose XOR mask sets
    /// each bit with probability `p ~ U(0, 1/2)`, so few-bit masks are common.
    pub sparse_mask_fraction: f64,
}

impl TrainConfig {
    /// The configuration behind the shipped reference checkpoint.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                d_model: 64,
                d_head: 16,
                d_ff: 256,
                vocab_size: VOCAB_SIZE,
                max_seq: 40,
                attention_kind: AttentionKind::Softmax,
            },
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 500,
            mixture: vec![
                ("random-bijection".into(), 0.6),
                ("fixed-offset".into(), 0.15),
                ("bank-translation".into(), 0.15),
                ("class-map".into(), 0.1),
            ],
            min_examples: 2,
            max_examples: 12,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            grad_clip: 1.0,
            eval_interval: 1000,
            eval_episodes: 200,
            sparse_mask_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let total: f64 = self.mixture.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 || self.mixture.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        for (name, _) in &self.mixture {
            family_by_name(name)?;
        }
        if self.min_examples == 0 || self.min_examples > self.max_examples {
            return Err(Error::Config("invalid n_examples range".into()));
        }
        if 3 * self.max_examples > self.model.max_seq {
            return Err(Error::Config("max_examples does not fit max_seq".into()));
        }
        if !(0.0..=1.0).contains(&self.sparse_mask_fraction) {
            return Err(Error::Config("sparse_mask_fraction must lie in [0, 1]".into()));
        }

        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Few-shot accuracy per family, in mixture order.
    pub accuracy: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let families: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.accuracy.iter().map(|(f, _)| f.as_str()).collect())
            .unwrap_or_default();
        write!(w, "step,loss")?;
        for f in &families {
            write!(w, ",acc_{f}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{},{}", r.step, r.loss)?;
            for (_, a) in &r.accuracy {
                write!(w, ",{a}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// One training sequence with its loss positions and targets.
struct Sample {
    tokens: Vec<u32>,
    separators: Vec<usize>,
    targets: Vec<u32>,
}

fn sample_sequence(rng: &mut ChaCha8Rng, families: &[(TaskFamily, f64)], cfg: &TrainConfig) -> Sample {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut family = &families[families.len() - 1].0;
    for (f, w) in families {
        acc += w;
        if r < acc {
            family = f;
            break;
        }
    }
    let n = rng.random_range(cfg.min_examples..=cfg.max_examples);
    let sparse = matches!(family.kind, FamilyKind::RandomBijection)
        && rng.random::<f64>() < cfg.sparse_mask_fraction;
    let mapping = if sparse {
        let p = 0.5 * rng.random::<f64>();
        let mut mask = 0;
        let mut bit = 1;
        while bit < family.label_bank.len() {
            if rng.random::<f64>() < p {
                mask |= bit;
            }
            bit <<= 1;
        }
        family.xor_mapping(mask).expect("mask within bank")
    } else {
        family.sample_mapping(rng)
    };
    let queries: Vec<u32> = family.query_bank.choose_multiple(rng, n).copied().collect();
    let mut tokens = Vec::with_capacity(3 * n);
    let mut separators = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for q in queries {
        let label = mapping.label_of(q).expect("bank query");
        tokens.push(q);
        separators.push(tokens.len());
        tokens.push(SEPARATOR);
        tokens.push(label);
        targets.push(label);
    }
    Sample {
        tokens,
        separators,
        targets,
    }
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, b1: f64, b2: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in model.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Loss and parameter gradients for one batch.
fn batch_gradients(model: &Model, batch: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in batch {
        rows.extend(s.separators.iter().map(|p| offset + p));
        targets.extend_from_slice(&s.targets);
        offset += s.tokens.len();
    }
    let patches = vec![None; batch.len()];
    let trace = model.trace(&mut g, &seqs, &patches, &rows, true)?;
    let logits = trace.logits.expect("separator rows requested");
    let loss = g.cross_entropy(logits, &targets)?;
    let loss_value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = trace
        .params
        .iter()
        .zip(model.tensors())
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss_value, grads))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().fold(0.0, |a, v| a + v * v))
        .fold(0.0, |a, v| a + v);
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains from scratch. `progress` sees every logged row as it is produced.
pub fn train(cfg: &TrainConfig, mut progress: impl FnMut(&LogRow)) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let families: Vec<(TaskFamily, f64)> = cfg
        .mixture
        .iter()
        .map(|(n, w)| Ok((family_by_name(n)?, *w)))
        .collect::<Result<_>>()?;
    let mut model = Model::init(cfg.model.clone(), derive_seed(cfg.seed, 0))?;
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut log = TrainLog::default();
    let mut running = None;
    let mut last_loss = None;

    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| sample_sequence(&mut rng, &families, cfg))
            .collect();
        let (loss, mut grads) = batch_gradients(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip(&mut grads, cfg.grad_clip);
        adam.step(&mut model, &grads, cfg.lr_at(step), cfg.beta1, cfg.beta2);
        running = Some(match running {
            None => loss,
            Some(r) => 0.98 * r + 0.02 * loss,
        });
        last_loss = Some(loss);

        let done = step + 1;
        if cfg.eval_interval > 0 && (done % cfg.eval_interval == 0 || done == cfg.steps) {
            let row = eval_row(&model, &families, done, running.unwrap_or(loss), cfg)?;
            progress(&row);
            log.rows.push(row);
        }
    }
    let meta = TrainingMeta {
        seed: cfg.seed,
        steps: cfg.steps,
        train_config_hash: cfg.hash(),
        final_loss: last_loss,
    };
    Ok((Checkpoint::new(model, meta), log))
}

fn eval_row(
    model: &Model,
    families: &[(TaskFamily, f64)],
    step: usize,
    loss: f64,
    cfg: &TrainConfig,
) -> Result<LogRow> {
    let n_shots = 10.min(cfg.max_examples);
    let accuracy = families
        .iter()
        .map(|(f, _)| {
            let acc = evaluate_icl(model, f, n_shots, cfg.eval_episodes, derive_seed(cfg.seed, 2))?;
            Ok((f.name.clone(), acc))
        })
        .collect::<Result<_>>()?;
    Ok(LogRow {
        step,
        loss,
        accuracy,
    })
}

/// Prompt of episode `i` in an ICL evaluation: its demonstrations and its
/// first test query.
pub fn icl_episode_prompt(
    family: &TaskFamily,
    n_shots: usize,
    seed: u64,
    i: usize,
) -> Result<(Vec<Example>, Example)> {
    let ep = sample_episode(family, n_shots, derive_seed(seed, i as u64))?;
    Ok((ep.demonstrations, ep.test[0]))
}

/// Fraction of episodes whose argmax at the final separator is the gold label.
pub fn evaluate_icl(
    model: &Model,
    family: &TaskFamily,
    n_shots: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Ok(0.0);
    }
    let prompts = (0..n_episodes)
        .map(|i| {
            let (demos, query) = icl_episode_prompt(family, n_shots, seed, i)?;
            Ok(build_prompt(&demos, query))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0usize;
    for chunk in prompts.chunks(64) {
        let reqs: Vec<SeqRequest> = chunk
            .iter()
            .map(|p| SeqRequest {
                tokens: &p.tokens,
                logits: LogitRows::Last,
                ..Default::default()
            })
            .collect();
        for (res, p) in model.run(&reqs)?.iter().zip(chunk) {
            if logits_to_first_token(&res.logits, 0) == p.final_query.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n_episodes as f64)
}
