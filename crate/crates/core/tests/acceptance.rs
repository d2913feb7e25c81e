//! Acceptance checks. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svlab::dualform::certify;
use svlab::harness::{robustness, Resample};
use svlab::intervene::{
    evaluate_method, mean_std, method_sv, predict_batch, select_layer, time_per_query, EvalReport,
    EvalSettings, InterventionPlan, Method, Mode, CSV_HEADER,
};
use svlab::model::{
    AttentionKind, Checkpoint, LogitRows, ModelConfig, PatchSpec, SeqRequest, TapSpec,
};
use svlab::numerics::{AttentionKind as Kind, Graph, Span, Tensor, Var};
use svlab::statevec::{
    dnc_aggregate, extract_all, extract_at, influences, inner_optimize, momentum_optimize,
    Conquer, OptConfig, Origin, StateVector, SvMeta,
};
use svlab::tasks::{build_prompt, family_by_name, sample_episode, task_catalog, TaskFamily};
use svlab::trainer::{evaluate_icl, train, TrainConfig};
use svlab::{Lab, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn reference_lab() -> Result<Lab> {
    Lab::load(fixture("reference.svlb"))
}

// 1. Dual-form identity.

fn dual_form() -> Result<Outcome> {
    let start = Instant::now();
    let rows = certify(1000, 2024, 64, 32, 0.1)?;
    let secs = start.elapsed().as_secs_f64();
    let rel = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let gd = rows.iter().map(|r| r.gd_max_abs_diff).fold(0.0, f64::max);
    outcome(
        rows.len() == 1000 && rel <= 1e-10 && gd <= 1e-12 && secs < 10.0,
        format!("1000 instances, max rel err {rel:.2e}, max |dW_GD - sum| {gd:.2e}, {secs:.2}s"),
    )
}

// 2. Self-patch oracle.

fn random_prompt(rng: &mut ChaCha8Rng, families: &[TaskFamily]) -> Result<svlab::tasks::EpisodePrompt> {
    let family = families.choose(rng).expect("families");
    let n = rng.random_range(1..=12);
    let ep = sample_episode(family, n, rng.random())?;
    Ok(build_prompt(&ep.demonstrations, ep.test[0]))
}

fn self_patch() -> Result<Outcome> {
    let lab = reference_lab()?;
    let model = lab.model();
    let n = lab.n_layers();
    let families = task_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = Instant::now();
    let mut checked = 0;
    let mut identical = 0;
    for _ in 0..100 {
        let prompt = random_prompt(&mut rng, &families)?;
        let pos = prompt.final_separator();
        for l in [1, n / 2, n] {
            let tap = TapSpec::first_layers(l, pos);
            let base = model
                .run(&[SeqRequest {
                    tokens: &prompt.tokens,
                    taps: Some(&tap),
                    patches: None,
                    logits: LogitRows::All,
                }])?
                .remove(0);
            let vectors: Vec<Vec<f64>> = (1..=l).map(|layer| base.taps[&(layer, pos)].clone()).collect();
            let patch = PatchSpec::prefix(pos, &vectors);
            let patched = model
                .run(&[SeqRequest {
                    tokens: &prompt.tokens,
                    taps: None,
                    patches: Some(&patch),
                    logits: LogitRows::All,
                }])?
                .remove(0);
            checked += 1;
            let same = base.logits.shape() == patched.logits.shape()
                && base
                    .logits
                    .data()
                    .iter()
                    .zip(patched.logits.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if same {
                identical += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        identical == checked && secs < 60.0,
        format!("{identical}/{checked} bit-identical (L in 1, {}, {n}), {secs:.2}s", n / 2),
    )
}

// 3. Truncation oracle.

fn truncation() -> Result<Outcome> {
    let lab = reference_lab()?;
    let l = lab.n_layers();
    let families = task_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    let mut identical = 0;
    for _ in 0..50 {
        let prompt = random_prompt(&mut rng, &families)?;
        let origin = Origin::new("oracle", 0);
        let svs = extract_all(&lab, &prompt, l, &origin)?;
        for (i, sv) in svs.iter().enumerate() {
            let pos = prompt.separator_positions[i + 1];
            let short = extract_at(&lab, &prompt.tokens[..=pos], pos, l, i + 1, &origin)?;
            checked += 1;
            let same = sv
                .flatten()
                .iter()
                .zip(short.flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if same && sv.meta == short.meta {
                identical += 1;
            }
        }
    }
    outcome(
        checked > 0 && identical == checked,
        format!("50 episodes, {identical}/{checked} V_i bit-identical to truncated extraction"),
    )
}

// 4. Toy ICL emergence.

fn emergence() -> Result<Outcome> {
    let lab = reference_lab()?;
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture("reference_train_report.json"))?)
        .map_err(|e| svlab::Error::Format(e.to_string()))?;
    let recorded_hash = report["checkpoint_hash"].as_str().unwrap_or_default().to_string();
    let runtime_s = report["runtime_s"].as_f64().unwrap_or(f64::INFINITY);
    let recorded_cfg: Option<TrainConfig> = serde_json::from_value(report["train_config"].clone()).ok();
    let config_matches = recorded_cfg.as_ref() == Some(&TrainConfig::reference());
    let hash_matches = recorded_hash == format!("{:016x}", lab.hash());

    let rb = family_by_name("random-bijection")?;
    let few = evaluate_icl(lab.model(), &rb, 10, 1000, 0x5eed_0004)?;
    let settings = EvalSettings {
        min_queries: 200,
        ..EvalSettings::default()
    };
    let zero = evaluate_method(&lab, &rb, Method::Regular, Mode::ZeroShot, 0, &settings)?;
    let chance = rb.chance();
    outcome(
        few >= 0.90 && zero.accuracy <= 2.0 * chance && runtime_s <= 7200.0 && config_matches && hash_matches,
        format!(
            "10-shot {few:.3} (need >= 0.90), zero-shot regular {:.4} (need <= {:.4}), training {:.0}s (need <= 7200), config {}, hash {}",
            zero.accuracy,
            2.0 * chance,
            runtime_s,
            if config_matches { "matches" } else { "differs" },
            if hash_matches { "matches" } else { "differs" },
        ),
    )
}

// 5–7 share dev-selected layer counts.

struct Selected {
    families: Vec<TaskFamily>,
    l: BTreeMap<(String, String), usize>,
}

fn select_all(lab: &Lab, methods: &[Method], settings: &EvalSettings) -> Result<Selected> {
    let families = task_catalog();
    let candidates: Vec<usize> = (1..=lab.n_layers()).collect();
    let mut l = BTreeMap::new();
    for f in &families {
        for &m in methods {
            let (best, _) = select_layer(lab, f, m, Mode::ZeroShot, &candidates, settings)?;
            l.insert((f.name.clone(), m.name()), best);
        }
    }
    Ok(Selected { families, l })
}

/// `a >= b` up to summation rounding; accuracies move in steps far larger than this.
fn at_least(a: f64, b: f64) -> bool {
    a >= b - 1e-12
}

fn cross_family_mean(reports: &[EvalReport]) -> f64 {
    reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64
}

fn evaluate_selected(lab: &Lab, sel: &Selected, method: Method, settings: &EvalSettings) -> Result<Vec<EvalReport>> {
    sel.families
        .iter()
        .map(|f| {
            let l = sel.l[&(f.name.clone(), method.name())];
            evaluate_method(lab, f, method, Mode::ZeroShot, l, settings)
        })
        .collect()
}

fn trend(lab: &Lab, sel: &Selected) -> Result<Outcome> {
    let settings = EvalSettings::default();
    let plain = cross_family_mean(&evaluate_selected(lab, sel, Method::SvPlain, &settings)?);
    let inner = cross_family_mean(&evaluate_selected(lab, sel, Method::SvInner, &settings)?);
    let momentum = cross_family_mean(&evaluate_selected(lab, sel, Method::SvMomentum, &settings)?);
    outcome(
        at_least(inner, plain) && at_least(momentum, inner),
        format!(
            "cross-family zero-shot over {} families, 5 seeds: sv_plain {plain:.4}, sv_inner {inner:.4}, sv_momentum {momentum:.4}",
            sel.families.len()
        ),
    )
}

fn robustness_check(lab: &Lab, sel: &Selected) -> Result<Outcome> {
    let settings = EvalSettings::default();
    let spread = |method: Method| -> Result<f64> {
        let mut stds = Vec::new();
        for f in &sel.families {
            let l = sel.l[&(f.name.clone(), method.name())];
            let accs = robustness(lab, f, method, l, Resample::Demonstrations, 100, 0, &settings)?;
            stds.push(mean_std(&accs).1);
        }
        Ok(stds.iter().sum::<f64>() / stds.len() as f64)
    };
    let plain = spread(Method::SvPlain)?;
    let inner = spread(Method::SvInner)?;
    outcome(
        at_least(plain, inner),
        format!("mean std over 100 demonstration resamples: sv_inner {inner:.4}, sv_plain {plain:.4}"),
    )
}

fn aggregation(lab: &Lab, sel: &Selected) -> Result<Outcome> {
    let settings = EvalSettings {
        agg_size: 100,
        group_size: 10,
        ..EvalSettings::default()
    };
    let dnc = cross_family_mean(&evaluate_selected(lab, sel, Method::SvDncAgg, &settings)?);
    let avg = cross_family_mean(&evaluate_selected(lab, sel, Method::SvAvgAgg, &settings)?);

    let l = lab.n_layers();
    let mut identical = 0;
    let trials = 20;
    for (i, f) in sel.families.iter().cycle().take(trials).enumerate() {
        let ep = sample_episode(f, 10, 500 + i as u64)?;
        let origin = Origin::new(f.name.clone(), ep.seed);
        let (dummy, final_dummy) = (ep.dummy(), ep.dev[0]);
        let res = dnc_aggregate(lab, std::slice::from_ref(&ep.demonstrations), &[dummy], final_dummy, l, &origin, Conquer::Unpatched)?;
        let group_prompt = build_prompt(&ep.demonstrations, dummy);
        let gsv = extract_at(lab, &group_prompt.tokens, group_prompt.final_separator(), l, 10, &origin)?;
        let flat = build_prompt(&[dummy], final_dummy);
        let plain = extract_all(lab, &flat, l, &origin)?;
        if res.gsvs[0].vectors() == gsv.vectors() && res.aggregated.vectors() == plain[0].vectors() {
            identical += 1;
        }
    }
    outcome(
        at_least(dnc, avg) && identical == trials,
        format!(
            "100 examples in 10 groups, cross-family zero-shot: D&C {dnc:.4}, average {avg:.4}; single-group unpatched equals plain extraction {identical}/{trials}"
        ),
    )
}

// 8. Optimizer algebra.

fn random_svs(rng: &mut ChaCha8Rng, n: usize, layers: usize, dim: usize) -> Vec<StateVector> {
    (0..n)
        .map(|i| {
            let vectors = (0..layers)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            StateVector::new(
                vectors,
                SvMeta {
                    n_examples_seen: i + 1,
                    ..SvMeta::default()
                },
            )
            .expect("valid")
        })
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

fn optimizer_algebra() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    for trial in 0..200 {
        let n = rng.random_range(2..=12);
        let (layers, dim) = (rng.random_range(1..=4), rng.random_range(1..=16));
        let svs = random_svs(&mut rng, n, layers, dim);
        let e = influences(&svs)?;
        let v_bar = inner_optimize(&svs, rng.random_range(1..=n))?;

        let collapsed = momentum_optimize(&v_bar, &e, &OptConfig::momentum(0.0))?;
        let expect: Vec<f64> = v_bar
            .flatten()
            .iter()
            .zip(e.items.last().expect("nonempty").concat())
            .map(|(v, x)| v + x)
            .collect();
        if !close(&collapsed.flatten(), &expect) {
            failures.push(format!("beta=0 collapse, trial {trial}"));
        }

        let beta: f64 = rng.random_range(0.0..0.99);
        let constant: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut stream = e.clone();
        stream.items = vec![constant.clone(); n - 1];
        let zero = StateVector::new(vec![vec![0.0; dim]; layers], SvMeta::default())?;
        let m = momentum_optimize(&zero, &stream, &OptConfig::momentum(beta))?;
        let factor = 1.0 - beta.powi((n - 1) as i32);
        let expect: Vec<f64> = constant.concat().iter().map(|x| factor * x).collect();
        if !close(&m.flatten(), &expect) {
            failures.push(format!("constant influence, trial {trial}"));
        }

        let mut acc = svs[0].flatten();
        for item in &e.items {
            for (a, x) in acc.iter_mut().zip(item.concat()) {
                *a += x;
            }
        }
        if !close(&acc, &svs[n - 1].flatten()) {
            failures.push(format!("telescoping, trial {trial}"));
        }

        let alpha: f64 = rng.random_range(-4.0..4.0);
        let k = rng.random_range(1..=n);
        let scaled: Vec<StateVector> = svs.iter().map(|s| s.scale(alpha)).collect();
        let lhs = inner_optimize(&scaled, k)?.flatten();
        let rhs: Vec<f64> = inner_optimize(&svs, k)?.flatten().iter().map(|x| alpha * x).collect();
        if !close(&lhs, &rhs) {
            failures.push(format!("scaling equivariance, trial {trial}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "200 trials of beta=0 collapse, (1-beta^n)e, telescoping and scaling equivariance within 1e-12".to_string()
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    )
}

// 9. Gradient check.

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum of a node with fixed random weights.
fn project(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let w = g.leaf(w, false);
    let p = g.mul(x, w).expect("same shape");
    g.sum(p)
}

/// Norm-wise relative error between backward gradients and central
/// differences with step 1e-5.
fn grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[j];
            diff += (a - numeric).powi(2);
            norm += a.powi(2) + numeric.powi(2);
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn gradient_check() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random_tensor(&mut rng, &[3, 4], 1.0);
    let b = random_tensor(&mut rng, &[3, 4], 1.0);
    let bias = random_tensor(&mut rng, &[4], 1.0);
    let right = random_tensor(&mut rng, &[4, 2], 1.0);
    let gamma = random_tensor(&mut rng, &[4], 1.0);
    let beta = random_tensor(&mut rng, &[4], 1.0);
    let table = random_tensor(&mut rng, &[6, 3], 1.0);
    let patch = [0.5, -0.5, 0.25];
    let spans = [Span { start: 0, len: 4 }, Span { start: 4, len: 3 }];
    let qkv: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[7, 6], 1.0)).collect();

    type Case = (&'static str, Vec<Tensor>, Box<dyn for<'g> Fn(&mut Graph<'g>, &[Var]) -> Var>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), right], Box::new(|g, v| {
            let s = g.matmul(v[0], v[1]).unwrap();
            project(g, s, 1)
        })),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            project(g, s, 2)
        })),
        ("mul", vec![a.clone(), b], Box::new(|g, v| {
            let s = g.mul(v[0], v[1]).unwrap();
            project(g, s, 3)
        })),
        ("add_row", vec![a.clone(), bias], Box::new(|g, v| {
            let s = g.add_row(v[0], v[1]).unwrap();
            project(g, s, 4)
        })),
        ("scale", vec![a.clone()], Box::new(|g, v| {
            let s = g.scale(v[0], -1.7);
            project(g, s, 5)
        })),
        ("gelu", vec![a.scale(2.0)], Box::new(|g, v| {
            let s = g.gelu(v[0]);
            project(g, s, 6)
        })),
        ("softmax", vec![a.scale(3.0)], Box::new(|g, v| {
            let s = g.softmax(v[0]).unwrap();
            project(g, s, 7)
        })),
        ("sum", vec![a.clone()], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.sum(sq)
        })),
        ("layer_norm", vec![a.scale(2.0), gamma, beta], Box::new(|g, v| {
            let s = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, s, 8)
        })),
        ("gather", vec![table.clone()], Box::new(|g, v| {
            let s = g.gather(v[0], &[4, 1, 4, 0]).unwrap();
            project(g, s, 9)
        })),
        ("select_rows", vec![table.clone()], Box::new(|g, v| {
            let s = g.select_rows(v[0], &[5, 5, 2]).unwrap();
            project(g, s, 10)
        })),
        ("patch_rows", vec![table], Box::new(move |g, v| {
            let s = g.patch_rows(v[0], &[(2, &patch[..])]).unwrap();
            project(g, s, 11)
        })),
        ("attention_softmax", qkv.clone(), Box::new(move |g, x| {
            let s = g.attention(x[0], x[1], x[2], &spans, 2, Kind::Softmax).unwrap();
            project(g, s, 12)
        })),
        ("attention_relaxed", qkv, Box::new(move |g, x| {
            let s = g.attention(x[0], x[1], x[2], &spans, 2, Kind::RelaxedLinear).unwrap();
            project(g, s, 13)
        })),
        ("cross_entropy", vec![a.scale(2.0)], Box::new(|g, v| g.cross_entropy(v[0], &[3, 0, 2]).unwrap())),
    ];
    let mut worst = ("", 0.0f64);
    for (name, inputs, f) in &cases {
        let err = grad_error(inputs, |g, v| f(g, v));
        if err > worst.1 || !err.is_finite() {
            worst = (name, err);
        }
    }
    outcome(
        worst.1 <= 1e-4,
        format!("{} ops, worst relative error {:.2e} ({})", cases.len(), worst.1, worst.0),
    )
}

// 10. Determinism and persistence.

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            max_seq: 40,
            attention_kind: AttentionKind::Softmax,
            ..TrainConfig::reference().model
        },
        steps: 12,
        batch_size: 4,
        eval_interval: 6,
        eval_episodes: 8,
        ..TrainConfig::reference()
    }
}

fn eval_csv(lab: &Lab) -> Result<String> {
    let settings = EvalSettings {
        seeds: vec![0, 1],
        min_queries: 8,
        ..EvalSettings::default()
    };
    let mut buf = format!("{CSV_HEADER}\n").into_bytes();
    let f = family_by_name("random-bijection")?;
    for (method, mode, l) in [
        (Method::Regular, Mode::FewShot, 0),
        (Method::SvInner, Mode::ZeroShot, 2),
        (Method::SvMomentum, Mode::ZeroShot, 1),
    ] {
        evaluate_method(lab, &f, method, mode, l, &settings)?.write_csv_rows(&mut buf)?;
    }
    Ok(String::from_utf8(buf).expect("utf-8"))
}

fn determinism() -> Result<Outcome> {
    let cfg = tiny_train_config();
    let (ck_a, log_a) = train(&cfg, |_| {})?;
    let (ck_b, log_b) = train(&cfg, |_| {})?;
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    log_a.write_csv(&mut csv_a)?;
    log_b.write_csv(&mut csv_b)?;
    let training = ck_a.to_bytes()? == ck_b.to_bytes()? && csv_a == csv_b;

    let lab = Lab::new(ck_a.clone());
    let eval = eval_csv(&lab)? == eval_csv(&Lab::new(ck_b))?;

    let dir = tempfile::tempdir()?;
    let ck_path = dir.path().join("model.svlb");
    ck_a.save(&ck_path)?;
    let ck_round = Checkpoint::load(&ck_path)?.to_bytes()? == ck_a.to_bytes()?;

    let ep = sample_episode(&family_by_name("class-map")?, 10, 3)?;
    let prompt = build_prompt(&ep.demonstrations, ep.dummy());
    let sv = extract_all(&lab, &prompt, 2, &Origin::new("class-map", 3))?.pop().expect("nonempty");
    let sv_path = dir.path().join("v.svec");
    sv.save(&sv_path)?;
    let loaded = StateVector::load(&sv_path, lab.hash(), false)?;
    let sv_round = loaded == sv
        && loaded
            .flatten()
            .iter()
            .zip(sv.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let wrong_hash = StateVector::load(&sv_path, lab.hash() ^ 1, false).is_err();

    let mut rejected = 0;
    let mut attempts = 0;
    for (path, is_ck) in [(&ck_path, true), (&sv_path, false)] {
        let bytes = std::fs::read(path)?;
        for k in 0..8 {
            let mut bad = bytes.clone();
            let at = (k * 7919 + 13) % bad.len();
            bad[at] ^= 0x10;
            let bad_path = dir.path().join(format!("bad{k}"));
            std::fs::write(&bad_path, &bad)?;
            let err = if is_ck {
                Checkpoint::load(&bad_path).is_err()
            } else {
                StateVector::load(&bad_path, lab.hash(), true).is_err()
            };
            attempts += 1;
            rejected += usize::from(err);
        }
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 3])?;
        let err = if is_ck {
            Checkpoint::load(&cut).is_err()
        } else {
            StateVector::load(&cut, lab.hash(), true).is_err()
        };
        attempts += 1;
        rejected += usize::from(err);
    }

    outcome(
        training && eval && ck_round && sv_round && wrong_hash && rejected == attempts,
        format!(
            "training twice identical: {training}, eval CSV identical: {eval}, checkpoint round trip: {ck_round}, state vector round trip: {sv_round}, foreign checkpoint refused: {wrong_hash}, corrupted files rejected {rejected}/{attempts}"
        ),
    )
}

// 11. Efficiency.

fn efficiency(lab: &Lab) -> Result<Outcome> {
    let rb = family_by_name("random-bijection")?;
    let settings = EvalSettings::default();
    let mut zero_prompts = Vec::new();
    let mut icl_prompts = Vec::new();
    let mut plans = Vec::new();
    for j in 0..10 {
        let ep = sample_episode(&rb, 10, 900 + j)?;
        let (sv, _) = method_sv(lab, &ep, Method::SvMomentum, lab.n_layers(), &settings)?;
        plans.push(InterventionPlan::new(lab, sv)?);
        for &q in ep.test.iter().take(20) {
            zero_prompts.push(build_prompt(&[], q));
            icl_prompts.push(build_prompt(&ep.demonstrations, q));
        }
    }
    predict_batch(lab, &icl_prompts[..4], None)?;
    let mut zero_ms = f64::INFINITY;
    let mut icl_ms = f64::INFINITY;
    for _ in 0..3 {
        let mut total = 0.0;
        for (chunk, plan) in zero_prompts.chunks(20).zip(&plans) {
            total += time_per_query(lab, chunk, Some(plan))? * chunk.len() as f64;
        }
        zero_ms = zero_ms.min(total / zero_prompts.len() as f64);
        icl_ms = icl_ms.min(time_per_query(lab, &icl_prompts, None)?);
    }
    outcome(
        zero_ms < icl_ms,
        format!("per query: zero-shot intervened {zero_ms:.4} ms, 10-shot ICL {icl_ms:.4} ms"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Result<Outcome>)> = vec![
        (1, "dual-form identity", dual_form()),
        (2, "self-patch oracle", self_patch()),
        (3, "truncation oracle", truncation()),
        (4, "toy ICL emergence", emergence()),
    ];
    let model_checks = reference_lab().and_then(|lab| {
        let methods = [
            Method::SvPlain,
            Method::SvInner,
            Method::SvMomentum,
            Method::SvAvgAgg,
            Method::SvDncAgg,
        ];
        let sel = select_all(&lab, &methods[..3], &EvalSettings::default())?;
        let agg_settings = EvalSettings {
            agg_size: 100,
            group_size: 10,
            ..EvalSettings::default()
        };
        let agg_sel = select_all(&lab, &methods[3..], &agg_settings)?;
        let mut sel = sel;
        sel.l.extend(agg_sel.l);
        Ok((lab, sel))
    });
    match model_checks {
        Ok((lab, sel)) => {
            results.push((5, "trend reproduction", trend(&lab, &sel)));
            results.push((6, "robustness", robustness_check(&lab, &sel)));
            results.push((7, "aggregation", aggregation(&lab, &sel)));
            results.push((8, "optimizer algebra", optimizer_algebra()));
            results.push((9, "gradient check", gradient_check()));
            results.push((10, "determinism and persistence", determinism()));
            results.push((11, "efficiency", efficiency(&lab)));
        }
        Err(e) => {
            let msg = e.to_string();
            for (n, name) in [(5, "trend reproduction"), (6, "robustness"), (7, "aggregation")] {
                results.push((n, name, Err(svlab::Error::Config(msg.clone()))));
            }
            results.push((8, "optimizer algebra", optimizer_algebra()));
            results.push((9, "gradient check", gradient_check()));
            results.push((10, "determinism and persistence", determinism()));
            results.push((11, "efficiency", Err(svlab::Error::Config(msg))));
        }
    }
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, res) in &results {
        match res {
            Ok(o) if o.pass => println!("[PASS] criterion {n}: {name}: {}", o.detail),
            Ok(o) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name}: {}", o.detail);
            }
            Err(e) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name}: error: {e}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
