//! State vectors: per-layer attention activations tapped at separator tokens,
//! plus the averaging, momentum and aggregation procedures built on them.
//!
//! State-vector file layout (all integers little-endian):
//!
//! ```text
//! "SVEC"  magic
//! u32     format version
//! u64     checkpoint hash
//! u32     L
//! u32     dim (n_heads × d_head)
//! str     metadata as JSON (u32 length + UTF-8)
//! f64 × L·dim
//! u64     FNV-1a of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lab::Lab;
use crate::model::{LogitRows, PatchSpec, SeqRequest, TapSpec};
use crate::tasks::{build_prompt, EpisodePrompt, Example};

pub const SVEC_MAGIC: &[u8; 4] = b"SVEC";
pub const SVEC_VERSION: u32 = 1;
pub const DEFAULT_INNER_WINDOW: usize = 7;

/// Where a state vector came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub family: String,
    pub seed: u64,
}

impl Origin {
    pub fn new(family: impl Into<String>, seed: u64) -> Self {
        Self {
            family: family.into(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvMeta {
    pub family: String,
    pub n_examples_seen: usize,
    /// Token position the vector was tapped at.
    pub separator_index: usize,
    pub checkpoint_hash: u64,
    pub seed: u64,
    /// Averaging window, when the vector is an inner-optimized mean.
    pub inner_window: Option<usize>,
}

/// Activations for layers `1..=L`, one vector of width `n_heads × d_head` each.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    vectors: Vec<Vec<f64>>,
    pub meta: SvMeta,
}

impl StateVector {
    pub fn new(vectors: Vec<Vec<f64>>, meta: SvMeta) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::Contract("state vector needs at least one layer".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Contract("state vector layers must be nonempty".into()));
        }
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                op: "state_vector",
                left: vec![dim],
                right: vec![bad.len()],
            });
        }
        Ok(Self { vectors, meta })
    }

    /// Number of layers covered.
    pub fn n_layers(&self) -> usize {
        self.vectors.len()
    }

    /// Width of each layer's vector.
    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.vectors[layer - 1]
    }

    /// All layers concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        self.vectors.concat()
    }

    /// Patch that writes this vector into layers `1..=L` at `position`.
    pub fn patch_at(&self, position: usize) -> PatchSpec {
        PatchSpec::prefix(position, &self.vectors)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            vectors: self
                .vectors
                .iter()
                .map(|v| v.iter().map(|x| alpha * x).collect())
                .collect(),
            meta: self.meta.clone(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.n_layers() != other.n_layers() || self.dim() != other.dim() {
            return Err(Error::Dimension {
                op,
                left: vec![self.n_layers(), self.dim()],
                right: vec![other.n_layers(), other.dim()],
            });
        }
        Ok(())
    }

    fn with_vectors(&self, vectors: Vec<Vec<f64>>) -> Self {
        Self {
            vectors,
            meta: self.meta.clone(),
        }
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(SVEC_MAGIC);
        w.u32(SVEC_VERSION);
        w.u64(self.meta.checkpoint_hash);
        w.u32(self.n_layers() as u32);
        w.u32(self.dim() as u32);
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.string(&meta);
        for v in &self.vectors {
            w.f64s(v);
        }
        Ok(w.finish())
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = Reader::open(bytes, SVEC_MAGIC)?;
        let version = r.u32()?;
        if version != SVEC_VERSION {
            return Err(Error::Format(format!("unsupported state vector version {version}")));
        }
        let hash = r.u64()?;
        let n_layers = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let meta: SvMeta =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
        if meta.checkpoint_hash != hash {
            return Err(Error::Format("metadata hash disagrees with header".into()));
        }
        let mut vectors = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            vectors.push(r.f64s(dim)?);
        }
        r.finish()?;
        Self::new(vectors, meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Loads a file, refusing one extracted from a different checkpoint
    /// unless `force` is set.
    pub fn load(path: impl AsRef<Path>, checkpoint_hash: u64, force: bool) -> Result<Self> {
        let sv = Self::from_bytes(&std::fs::read(path)?)?;
        if sv.meta.checkpoint_hash != checkpoint_hash && !force {
            return Err(Error::CheckpointMismatch {
                expected: checkpoint_hash,
                found: sv.meta.checkpoint_hash,
            });
        }
        Ok(sv)
    }
}

/// Differences of adjacent state vectors, `E_i = V_i − V_{i−1}` for `i = 2..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSequence {
    pub items: Vec<Vec<Vec<f64>>>,
}

impl InfluenceSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Momentum,
    Adagrad,
    Rmsprop,
    Adam,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Momentum => "momentum",
            Algorithm::Adagrad => "adagrad",
            Algorithm::Rmsprop => "rmsprop",
            Algorithm::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(Algorithm::Momentum),
            "adagrad" => Ok(Algorithm::Adagrad),
            "rmsprop" => Ok(Algorithm::Rmsprop),
            "adam" => Ok(Algorithm::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub algorithm: Algorithm,
    /// Momentum retention.
    pub beta: f64,
    pub lr: f64,
    pub eps: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// RMSprop squared-gradient decay.
    pub rho: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self::momentum(0.5)
    }
}

impl OptConfig {
    pub fn momentum(beta: f64) -> Self {
        Self {
            algorithm: Algorithm::Momentum,
            beta,
            lr: 0.01,
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
        }
    }

    pub fn ablation(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::momentum(0.5)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.algorithm != Algorithm::Momentum && !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_shapes(svs: &[StateVector], op: &'static str) -> Result<()> {
    let Some(first) = svs.first() else {
        return Err(Error::Contract(format!("{op} needs at least one state vector")));
    };
    for sv in &svs[1..] {
        first.same_shape(sv, op)?;
    }
    Ok(())
}

/// Elementwise mean, summed sequentially in input order.
fn mean_vectors(svs: &[StateVector]) -> Vec<Vec<f64>> {
    let n = svs.len() as f64;
    let mut acc: Vec<Vec<f64>> = svs[0].vectors.iter().map(|v| vec![0.0; v.len()]).collect();
    for sv in svs {
        for (a, v) in acc.iter_mut().zip(&sv.vectors) {
            for (x, y) in a.iter_mut().zip(v) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    acc
}

/// Mean of the last `k` state vectors.
pub fn inner_optimize(svs: &[StateVector], k: usize) -> Result<StateVector> {
    check_shapes(svs, "inner_optimize")?;
    if k == 0 || k > svs.len() {
        return Err(Error::Contract(format!(
            "window {k} outside 1..={}",
            svs.len()
        )));
    }
    let window = &svs[svs.len() - k..];
    let mut out = svs[svs.len() - 1].with_vectors(mean_vectors(window));
    out.meta.inner_window = Some(k);
    Ok(out)
}

pub fn influences(svs: &[StateVector]) -> Result<InfluenceSequence> {
    if svs.len() < 2 {
        return Err(Error::Contract(format!(
            "influences need at least two state vectors, got {}",
            svs.len()
        )));
    }
    check_shapes(svs, "influences")?;
    let items = svs
        .windows(2)
        .map(|w| {
            w[1].vectors
                .iter()
                .zip(&w[0].vectors)
                .map(|(b, a)| b.iter().zip(a).map(|(y, x)| y - x).collect())
                .collect()
        })
        .collect();
    Ok(InfluenceSequence { items })
}

fn check_stream(v_bar: &StateVector, e: &InfluenceSequence) -> Result<()> {
    if e.is_empty() {
        return Err(Error::Contract("empty influence sequence".into()));
    }
    for item in &e.items {
        if item.len() != v_bar.n_layers() || item.iter().any(|v| v.len() != v_bar.dim()) {
            return Err(Error::Dimension {
                op: "optimize",
                left: vec![v_bar.n_layers(), v_bar.dim()],
                right: vec![item.len(), item.first().map_or(0, Vec::len)],
            });
        }
    }
    Ok(())
}

fn displaced(v_bar: &StateVector, delta: &[Vec<f64>]) -> StateVector {
    v_bar.with_vectors(
        v_bar
            .vectors
            .iter()
            .zip(delta)
            .map(|(v, d)| v.iter().zip(d).map(|(a, b)| a + b).collect())
            .collect(),
    )
}

/// `m_i = β·m_{i−1} + (1−β)·E_i` from `m = 0`; returns `V̄ + m_last`.
pub fn momentum_optimize(
    v_bar: &StateVector,
    e: &InfluenceSequence,
    cfg: &OptConfig,
) -> Result<StateVector> {
    if cfg.algorithm != Algorithm::Momentum {
        return Err(Error::Config(format!(
            "momentum_optimize given {}",
            cfg.algorithm.name()
        )));
    }
    cfg.validate()?;
    check_stream(v_bar, e)?;
    let beta = cfg.beta;
    let mut m: Vec<Vec<f64>> = v_bar.vectors.iter().map(|v| vec![0.0; v.len()]).collect();
    for item in &e.items {
        for (ml, el) in m.iter_mut().zip(item) {
            for (x, g) in ml.iter_mut().zip(el) {
                *x = beta * *x + (1.0 - beta) * g;
            }
        }
    }
    Ok(displaced(v_bar, &m))
}

/// Runs Adagrad, RMSprop or Adam on a zero-initialized parameter with `−E_i`
/// as the gradient stream and returns `V̄` plus the final parameter.
pub fn ablate_optimize(
    v_bar: &StateVector,
    e: &InfluenceSequence,
    cfg: &OptConfig,
) -> Result<StateVector> {
    if cfg.algorithm == Algorithm::Momentum {
        return Err(Error::Config("ablate_optimize needs adagrad, rmsprop or adam".into()));
    }
    cfg.validate()?;
    check_stream(v_bar, e)?;
    let shape: Vec<Vec<f64>> = v_bar.vectors.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut theta = shape.clone();
    let mut s1 = shape.clone();
    let mut s2 = shape;
    for (t, item) in e.items.iter().enumerate() {
        let step = (t + 1) as i32;
        for l in 0..theta.len() {
            for j in 0..theta[l].len() {
                let g = -item[l][j];
                let update = match cfg.algorithm {
                    Algorithm::Adagrad => {
                        s2[l][j] += g * g;
                        g / (s2[l][j].sqrt() + cfg.eps)
                    }
                    Algorithm::Rmsprop => {
                        s2[l][j] = cfg.rho * s2[l][j] + (1.0 - cfg.rho) * g * g;
                        g / (s2[l][j].sqrt() + cfg.eps)
                    }
                    Algorithm::Adam => {
                        s1[l][j] = cfg.beta1 * s1[l][j] + (1.0 - cfg.beta1) * g;
                        s2[l][j] = cfg.beta2 * s2[l][j] + (1.0 - cfg.beta2) * g * g;
                        let m_hat = s1[l][j] / (1.0 - cfg.beta1.powi(step));
                        let v_hat = s2[l][j] / (1.0 - cfg.beta2.powi(step));
                        m_hat / (v_hat.sqrt() + cfg.eps)
                    }
                    Algorithm::Momentum => unreachable!("rejected above"),
                };
                theta[l][j] -= cfg.lr * update;
            }
        }
    }
    Ok(displaced(v_bar, &theta))
}

/// Dispatches on `cfg.algorithm`.
pub fn optimize(v_bar: &StateVector, e: &InfluenceSequence, cfg: &OptConfig) -> Result<StateVector> {
    match cfg.algorithm {
        Algorithm::Momentum => momentum_optimize(v_bar, e, cfg),
        _ => ablate_optimize(v_bar, e, cfg),
    }
}

pub fn average_aggregate(gsvs: &[StateVector]) -> Result<StateVector> {
    check_shapes(gsvs, "average_aggregate")?;
    let mut out = gsvs[0].with_vectors(mean_vectors(gsvs));
    out.meta.n_examples_seen = gsvs.iter().map(|g| g.meta.n_examples_seen).sum();
    Ok(out)
}

fn check_l(lab: &Lab, l: usize) -> Result<()> {
    if l == 0 || l > lab.n_layers() {
        return Err(Error::LayerOutOfRange {
            layer: l,
            n_layers: lab.n_layers(),
        });
    }
    Ok(())
}

fn sv_from_taps(
    lab: &Lab,
    taps: &std::collections::BTreeMap<(usize, usize), Vec<f64>>,
    position: usize,
    l: usize,
    n_examples_seen: usize,
    origin: &Origin,
) -> Result<StateVector> {
    let vectors = (1..=l).map(|layer| taps[&(layer, position)].clone()).collect();
    StateVector::new(
        vectors,
        SvMeta {
            family: origin.family.clone(),
            n_examples_seen,
            separator_index: position,
            checkpoint_hash: lab.hash(),
            seed: origin.seed,
            inner_window: None,
        },
    )
}

/// `V_1..V_N` for a prompt with `N` demonstrations, from one forward pass
/// per prompt. `V_i` is tapped at separator `i+1`, so it sees the first `i`
/// examples and the query that follows them.
pub fn extract_all_batch(
    lab: &Lab,
    prompts: &[&EpisodePrompt],
    l: usize,
    origins: &[Origin],
) -> Result<Vec<Vec<StateVector>>> {
    check_l(lab, l)?;
    if prompts.len() != origins.len() {
        return Err(Error::Contract("one origin per prompt required".into()));
    }
    let taps: Vec<TapSpec> = prompts
        .iter()
        .map(|p| TapSpec::new(1..=l, p.separator_positions[1..].to_vec()))
        .collect();
    let requests: Vec<SeqRequest> = prompts
        .iter()
        .zip(&taps)
        .map(|(p, t)| SeqRequest {
            tokens: &p.tokens,
            taps: Some(t),
            patches: None,
            logits: LogitRows::Rows(Vec::new()),
        })
        .collect();
    let results = lab.model().run(&requests)?;
    prompts
        .iter()
        .zip(results)
        .zip(origins)
        .map(|((p, res), origin)| {
            p.separator_positions[1..]
                .iter()
                .enumerate()
                .map(|(i, &pos)| sv_from_taps(lab, &res.taps, pos, l, i + 1, origin))
                .collect()
        })
        .collect()
}

pub fn extract_all(
    lab: &Lab,
    prompt: &EpisodePrompt,
    l: usize,
    origin: &Origin,
) -> Result<Vec<StateVector>> {
    Ok(extract_all_batch(lab, &[prompt], l, std::slice::from_ref(origin))?
        .pop()
        .expect("one prompt"))
}

/// Layers `1..=l` tapped at `position` of an arbitrary token sequence.
pub fn extract_at(
    lab: &Lab,
    tokens: &[u32],
    position: usize,
    l: usize,
    n_examples_seen: usize,
    origin: &Origin,
) -> Result<StateVector> {
    check_l(lab, l)?;
    let tap = TapSpec::new(1..=l, vec![position]);
    let req = SeqRequest {
        tokens,
        taps: Some(&tap),
        patches: None,
        logits: LogitRows::Rows(Vec::new()),
    };
    let res = lab.model().run(std::slice::from_ref(&req))?.pop().expect("one result");
    sv_from_taps(lab, &res.taps, position, l, n_examples_seen, origin)
}

/// Whether the conquer stage writes group vectors into the demonstration
/// separators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conquer {
    Patched,
    Unpatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DncResult {
    pub aggregated: StateVector,
    pub gsvs: Vec<StateVector>,
    /// Dummy pairs as demonstrations followed by the final dummy query.
    pub conquer_prompt: EpisodePrompt,
}

/// Divide-and-conquer aggregation. Each group, followed by its dummy query,
/// yields a group state vector at its final separator. The conquer prompt
/// lists the dummy pairs as examples and ends with `final_dummy`'s query; the
/// separator of example `g` is patched with group vector `g` at layers
/// `1..=l`, and the final separator is tapped.
pub fn dnc_aggregate(
    lab: &Lab,
    groups: &[Vec<Example>],
    group_dummies: &[Example],
    final_dummy: Example,
    l: usize,
    origin: &Origin,
    conquer: Conquer,
) -> Result<DncResult> {
    check_l(lab, l)?;
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Contract("groups must be nonempty".into()));
    }
    if group_dummies.len() != groups.len() {
        return Err(Error::Contract(format!(
            "{} groups need {} labeled dummies, got {}",
            groups.len(),
            groups.len(),
            group_dummies.len()
        )));
    }
    let prompts: Vec<EpisodePrompt> = groups
        .iter()
        .zip(group_dummies)
        .map(|(g, &d)| build_prompt(g, d))
        .collect();
    let taps: Vec<TapSpec> = prompts
        .iter()
        .map(|p| TapSpec::new(1..=l, vec![p.final_separator()]))
        .collect();
    let requests: Vec<SeqRequest> = prompts
        .iter()
        .zip(&taps)
        .map(|(p, t)| SeqRequest {
            tokens: &p.tokens,
            taps: Some(t),
            patches: None,
            logits: LogitRows::Rows(Vec::new()),
        })
        .collect();
    let results = lab.model().run(&requests)?;
    let gsvs = prompts
        .iter()
        .zip(&results)
        .zip(groups)
        .map(|((p, r), g)| sv_from_taps(lab, &r.taps, p.final_separator(), l, g.len(), origin))
        .collect::<Result<Vec<_>>>()?;

    let conquer_prompt = build_prompt(group_dummies, final_dummy);
    let mut patches = PatchSpec::default();
    if conquer == Conquer::Patched {
        for (gsv, &pos) in gsvs.iter().zip(&conquer_prompt.separator_positions) {
            patches.sites.extend(gsv.patch_at(pos).sites);
        }
    }
    let position = conquer_prompt.final_separator();
    let tap = TapSpec::new(1..=l, vec![position]);
    let req = SeqRequest {
        tokens: &conquer_prompt.tokens,
        taps: Some(&tap),
        patches: Some(&patches),
        logits: LogitRows::Rows(Vec::new()),
    };
    let res = lab.model().run(std::slice::from_ref(&req))?.pop().expect("one result");
    let seen = groups.iter().map(Vec::len).sum();
    let aggregated = sv_from_taps(lab, &res.taps, position, l, seen, origin)?;
    Ok(DncResult {
        aggregated,
        gsvs,
        conquer_prompt,
    })
}
