//! Zero-shot and few-shot inference with state-vector intervention, and the
//! per-method evaluation pipeline.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::lab::Lab;
use crate::model::{logits_to_first_token, LogitRows, PatchSpec, SeqRequest};
use crate::seeds::derive_seed;
use crate::statevec::{
    average_aggregate, dnc_aggregate, extract_all, inner_optimize, influences, optimize,
    Algorithm, Conquer, OptConfig, Origin, StateVector, DEFAULT_INNER_WINDOW,
};
use crate::tasks::{build_prompt, sample_split, Episode, EpisodePrompt, Example, SplitSpec, TaskFamily};

const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    FewShot,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::FewShot => "few_shot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero_shot" | "zero-shot" => Ok(Mode::ZeroShot),
            "few_shot" | "few-shot" => Ok(Mode::FewShot),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No demonstrations in zero-shot mode, plain prompt in few-shot mode.
    Regular,
    /// Demonstrations in the prompt, no intervention.
    Icl,
    SvPlain,
    SvInner,
    SvMomentum,
    SvAvgAgg,
    SvDncAgg,
    SvAblate(Algorithm),
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Regular => "regular".into(),
            Method::Icl => "icl".into(),
            Method::SvPlain => "sv_plain".into(),
            Method::SvInner => "sv_inner".into(),
            Method::SvMomentum => "sv_momentum".into(),
            Method::SvAvgAgg => "sv_avg_agg".into(),
            Method::SvDncAgg => "sv_dnc_agg".into(),
            Method::SvAblate(a) => format!("sv_ablate_{}", a.name()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "regular" => Method::Regular,
            "icl" => Method::Icl,
            "sv_plain" => Method::SvPlain,
            "sv_inner" => Method::SvInner,
            "sv_momentum" => Method::SvMomentum,
            "sv_avg_agg" => Method::SvAvgAgg,
            "sv_dnc_agg" => Method::SvDncAgg,
            other => match other.strip_prefix("sv_ablate_") {
                Some(alg) => Method::SvAblate(Algorithm::parse(alg)?),
                None => return Err(Error::Config(format!("unknown method {other:?}"))),
            },
        })
    }

    /// Whether the method patches a state vector into the prompt.
    pub fn uses_sv(self) -> bool {
        !matches!(self, Method::Regular | Method::Icl)
    }

    fn is_aggregation(self) -> bool {
        matches!(self, Method::SvAvgAgg | Method::SvDncAgg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A state vector bound to the final separator of the inference prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    sv: StateVector,
}

impl InterventionPlan {
    pub fn new(lab: &Lab, sv: StateVector) -> Result<Self> {
        if sv.meta.checkpoint_hash != lab.hash() {
            return Err(Error::CheckpointMismatch {
                expected: lab.hash(),
                found: sv.meta.checkpoint_hash,
            });
        }
        if sv.n_layers() > lab.n_layers() || sv.dim() != lab.model().config.tap_width() {
            return Err(Error::Dimension {
                op: "intervention_plan",
                left: vec![lab.n_layers(), lab.model().config.tap_width()],
                right: vec![sv.n_layers(), sv.dim()],
            });
        }
        Ok(Self { sv })
    }

    pub fn sv(&self) -> &StateVector {
        &self.sv
    }

    /// Layers `1..=L` patched.
    pub fn n_layers(&self) -> usize {
        self.sv.n_layers()
    }

    fn patch_for(&self, prompt: &EpisodePrompt) -> PatchSpec {
        self.sv.patch_at(prompt.final_separator())
    }
}

fn inference_prompt(query: Example, mode: Mode, demonstrations: &[Example]) -> Result<EpisodePrompt> {
    match mode {
        Mode::ZeroShot if !demonstrations.is_empty() => Err(Error::Contract(
            "zero-shot inference takes no demonstrations".into(),
        )),
        Mode::FewShot if demonstrations.is_empty() => Err(Error::Contract(
            "few-shot inference needs demonstrations".into(),
        )),
        _ => Ok(build_prompt(demonstrations, query)),
    }
}

/// First-token predictions at the final separator, batched.
pub fn predict_batch(lab: &Lab, prompts: &[EpisodePrompt], plan: Option<&InterventionPlan>) -> Result<Vec<u32>> {
    if let Some(p) = plan {
        if p.sv.meta.checkpoint_hash != lab.hash() {
            return Err(Error::CheckpointMismatch {
                expected: lab.hash(),
                found: p.sv.meta.checkpoint_hash,
            });
        }
    }
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(BATCH) {
        let patches: Vec<Option<PatchSpec>> = chunk
            .iter()
            .map(|pr| plan.map(|p| p.patch_for(pr)))
            .collect();
        let reqs: Vec<SeqRequest> = chunk
            .iter()
            .zip(&patches)
            .map(|(pr, patch)| SeqRequest {
                tokens: &pr.tokens,
                taps: None,
                patches: patch.as_ref(),
                logits: LogitRows::Rows(vec![pr.final_separator()]),
            })
            .collect();
        for res in lab.model().run(&reqs)? {
            out.push(logits_to_first_token(&res.logits, 0));
        }
    }
    Ok(out)
}

/// Prediction for one query, with the plan's vector written into layers
/// `1..=L` of the final separator.
pub fn run_intervened(
    lab: &Lab,
    query: Example,
    plan: Option<&InterventionPlan>,
    mode: Mode,
    demonstrations: &[Example],
) -> Result<u32> {
    let prompt = inference_prompt(query, mode, demonstrations)?;
    Ok(predict_batch(lab, std::slice::from_ref(&prompt), plan)?[0])
}

/// Batched form of [`run_intervened`] over many queries sharing one plan.
pub fn run_intervened_batch(
    lab: &Lab,
    queries: &[Example],
    plan: Option<&InterventionPlan>,
    mode: Mode,
    demonstrations: &[Example],
) -> Result<Vec<u32>> {
    let prompts = queries
        .iter()
        .map(|&q| inference_prompt(q, mode, demonstrations))
        .collect::<Result<Vec<_>>>()?;
    predict_batch(lab, &prompts, plan)
}

/// Mean wall-clock milliseconds per single-prompt forward pass.
pub fn time_per_query(lab: &Lab, prompts: &[EpisodePrompt], plan: Option<&InterventionPlan>) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let start = Instant::now();
    for p in prompts {
        predict_batch(lab, std::slice::from_ref(p), plan)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub seeds: Vec<u64>,
    pub n_shots: usize,
    pub inner_window: usize,
    /// Momentum retention and ablation hyperparameters.
    pub opt: OptConfig,
    /// Examples consumed by the aggregation methods.
    pub agg_size: usize,
    pub group_size: usize,
    /// Episodes are drawn per seed until at least this many queries are scored.
    pub min_queries: usize,
    /// Record per-query inference wall time.
    pub timing: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            n_shots: 10,
            inner_window: DEFAULT_INNER_WINDOW,
            opt: OptConfig::momentum(0.5),
            agg_size: 100,
            group_size: 10,
            min_queries: 40,
            timing: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.n_shots < 2 {
            return Err(Error::Config("n_shots must be at least 2".into()));
        }
        if self.inner_window == 0 || self.inner_window > self.n_shots {
            return Err(Error::Config(format!(
                "inner_window must lie in 1..={}",
                self.n_shots
            )));
        }
        if self.group_size == 0 || self.agg_size == 0 || !self.agg_size.is_multiple_of(self.group_size) {
            return Err(Error::Config(format!(
                "agg_size {} must be a positive multiple of group_size {}",
                self.agg_size, self.group_size
            )));
        }
        if self.min_queries == 0 {
            return Err(Error::Config("min_queries must be positive".into()));
        }
        self.opt.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub n_queries: usize,
    pub time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub family: String,
    pub mode: Mode,
    /// Patched layer count; 0 for methods without intervention.
    pub selected_l: usize,
    pub accuracy: f64,
    /// Sample standard deviation of per-seed accuracy.
    pub std: f64,
    pub n_queries: usize,
    /// Mean inference wall time per query, when timing was requested.
    pub time_ms: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

pub const CSV_HEADER: &str = "method,family,mode,L,seed,acc,std,time_ms";

fn fmt_time(t: Option<f64>) -> String {
    t.map(|t| format!("{t:.4}")).unwrap_or_default()
}

impl EvalReport {
    /// One row per seed followed by a summary row with seed `all`.
    pub fn write_csv_rows(&self, mut w: impl Write) -> Result<()> {
        for s in &self.per_seed {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},,{}",
                self.method,
                self.family,
                self.mode.name(),
                self.selected_l,
                s.seed,
                s.accuracy,
                fmt_time(s.time_ms)
            )?;
        }
        writeln!(
            w,
            "{},{},{},{},all,{:.6},{:.6},{}",
            self.method,
            self.family,
            self.mode.name(),
            self.selected_l,
            self.accuracy,
            self.std,
            fmt_time(self.time_ms)
        )?;
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn family_stream(family: &TaskFamily) -> u64 {
    fnv1a64(family.name.as_bytes())
}

/// Episode `j` for `(family, seed)`; shared across methods so comparisons
/// are paired.
pub fn episode_for(family: &TaskFamily, seed: u64, j: usize, n_demonstrations: usize, n_dummy: usize) -> Result<Episode> {
    sample_split(
        family,
        &SplitSpec {
            n_demonstrations,
            n_dummy,
            seed: derive_seed(derive_seed(seed, family_stream(family)), j as u64),
            ..SplitSpec::default()
        },
    )
}

/// The state vector a method patches in, built from one episode, together
/// with the demonstrations its few-shot prompt carries.
pub fn method_sv(
    lab: &Lab,
    ep: &Episode,
    method: Method,
    l: usize,
    settings: &EvalSettings,
) -> Result<(StateVector, Vec<Example>)> {
    let origin = Origin::new(ep.family.clone(), ep.seed);
    if method.is_aggregation() {
        let n_groups = settings.agg_size / settings.group_size;
        let groups: Vec<Vec<Example>> = ep
            .demonstrations
            .chunks(settings.group_size)
            .map(<[Example]>::to_vec)
            .collect();
        let dnc = dnc_aggregate(
            lab,
            &groups,
            &ep.dummies[..n_groups],
            ep.dummies[n_groups],
            l,
            &origin,
            Conquer::Patched,
        )?;
        let demos = ep.dummies[..n_groups].to_vec();
        let sv = match method {
            Method::SvDncAgg => dnc.aggregated,
            _ => average_aggregate(&dnc.gsvs)?,
        };
        return Ok((sv, demos));
    }
    let prompt = build_prompt(&ep.demonstrations, ep.dummy());
    let svs = extract_all(lab, &prompt, l, &origin)?;
    let sv = match method {
        Method::SvPlain => svs.last().cloned().expect("n_shots ≥ 2"),
        Method::SvInner => inner_optimize(&svs, settings.inner_window)?,
        Method::SvMomentum | Method::SvAblate(_) => {
            let v_bar = inner_optimize(&svs, settings.inner_window)?;
            let e = influences(&svs)?;
            let cfg = match method {
                Method::SvAblate(alg) => OptConfig {
                    algorithm: alg,
                    ..settings.opt
                },
                _ => OptConfig {
                    algorithm: Algorithm::Momentum,
                    ..settings.opt
                },
            };
            optimize(&v_bar, &e, &cfg)?
        }
        Method::Regular | Method::Icl | Method::SvAvgAgg | Method::SvDncAgg => {
            unreachable!("handled above")
        }
    };
    Ok((sv, ep.demonstrations.clone()))
}

fn evaluate_seed(
    lab: &Lab,
    family: &TaskFamily,
    method: Method,
    mode: Mode,
    l: usize,
    pool: Pool,
    seed: u64,
    settings: &EvalSettings,
) -> Result<SeedResult> {
    let (n_demos, n_dummy) = if method.is_aggregation() {
        (settings.agg_size, settings.agg_size / settings.group_size + 1)
    } else {
        (settings.n_shots, 1)
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut elapsed = 0.0;
    let mut j = 0;
    while total < settings.min_queries {
        let ep = episode_for(family, seed, j, n_demos, n_dummy)?;
        j += 1;
        let queries = match pool {
            Pool::Dev => &ep.dev,
            Pool::Test => &ep.test,
        };
        if queries.is_empty() {
            if j > 1000 {
                return Err(Error::InsufficientQueries {
                    needed: 1,
                    available: 0,
                });
            }
            continue;
        }
        let (plan, few_shot_demos) = if method.uses_sv() {
            let (sv, demos) = method_sv(lab, &ep, method, l, settings)?;
            (Some(InterventionPlan::new(lab, sv)?), demos)
        } else {
            (None, ep.demonstrations.clone())
        };
        let with_demos = method == Method::Icl || mode == Mode::FewShot;
        let demos: &[Example] = if with_demos { &few_shot_demos } else { &[] };
        let prompts: Vec<EpisodePrompt> = queries.iter().map(|&q| build_prompt(demos, q)).collect();
        let start = Instant::now();
        let preds = predict_batch(lab, &prompts, plan.as_ref())?;
        elapsed += start.elapsed().as_secs_f64();
        correct += preds
            .iter()
            .zip(queries)
            .filter(|(p, q)| **p == q.label)
            .count();
        total += queries.len();
    }
    Ok(SeedResult {
        seed,
        accuracy: correct as f64 / total as f64,
        n_queries: total,
        time_ms: settings.timing.then(|| elapsed * 1e3 / total as f64),
    })
}

/// Runs one method over every seed in `settings`, in parallel across seeds.
pub fn evaluate_method_on(
    lab: &Lab,
    family: &TaskFamily,
    method: Method,
    mode: Mode,
    l: usize,
    pool: Pool,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    if method.uses_sv() && (l == 0 || l > lab.n_layers()) {
        return Err(Error::LayerOutOfRange {
            layer: l,
            n_layers: lab.n_layers(),
        });
    }
    let per_seed = settings
        .seeds
        .par_iter()
        .map(|&seed| evaluate_seed(lab, family, method, mode, l, pool, seed, settings))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
    let (accuracy, std) = mean_std(&accs);
    let time_ms = if settings.timing {
        let ts: Vec<f64> = per_seed.iter().filter_map(|s| s.time_ms).collect();
        Some(mean_std(&ts).0)
    } else {
        None
    };
    let mode = if method == Method::Icl { Mode::FewShot } else { mode };
    Ok(EvalReport {
        method: method.name(),
        family: family.name.clone(),
        mode,
        selected_l: if method.uses_sv() { l } else { 0 },
        accuracy,
        std,
        n_queries: per_seed.iter().map(|s| s.n_queries).sum(),
        time_ms,
        per_seed,
    })
}

/// Test-set evaluation at layer count `l`.
pub fn evaluate_method(
    lab: &Lab,
    family: &TaskFamily,
    method: Method,
    mode: Mode,
    l: usize,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    evaluate_method_on(lab, family, method, mode, l, Pool::Test, settings)
}

/// Index of the best score; ties go to the earliest.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Candidate `L` with the highest dev accuracy; ties go to the smallest `L`.
pub fn select_layer(
    lab: &Lab,
    family: &TaskFamily,
    method: Method,
    mode: Mode,
    candidates: &[usize],
    settings: &EvalSettings,
) -> Result<(usize, Vec<EvalReport>)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate layers".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok((sorted[0], Vec::new()));
    }
    let reports = sorted
        .iter()
        .map(|&l| evaluate_method_on(lab, family, method, mode, l, Pool::Dev, settings))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    Ok((sorted[argmax_first(&scores).expect("nonempty")], reports))
}
