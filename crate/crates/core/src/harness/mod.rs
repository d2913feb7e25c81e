//! Experiment commands. Each command writes a fresh run directory holding a
//! config snapshot, CSV and JSON results and, where it makes sense, an SVG plot.

pub mod config;
pub mod pca;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

pub use config::Config;
pub use pca::{pca_project, pca_rows, separation, PcaExport, PcaInput, Separation};
pub use plot::{Plot, Series, Style};

use crate::dualform::certify;
use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::intervene::{
    evaluate_method, mean_std, method_sv, run_intervened_batch, select_layer, EvalReport,
    EvalSettings, InterventionPlan, Method, Mode, CSV_HEADER,
};
use crate::lab::Lab;
use crate::seeds::derive_seed;
use crate::statevec::{extract_all, Algorithm, Origin, StateVector};
use crate::tasks::{build_prompt, sample_episode, Episode, Example, TaskFamily};
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    SweepLayers,
    Ablate,
    Aggregate,
    Robustness,
    Dualform,
    Pca,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::SweepLayers => "sweep-layers",
            Command::Ablate => "ablate",
            Command::Aggregate => "aggregate",
            Command::Robustness => "robustness",
            Command::Dualform => "dualform",
            Command::Pca => "pca",
        }
    }
}

/// Civil UTC date-time from seconds since the Unix epoch.
fn utc_stamp(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}{month:02}{day:02}T{:02}{:02}{:02}",
        rem / 3600,
        (rem / 60) % 60,
        rem % 60
    )
}

/// Creates `<out>/<command>-<UTC timestamp>` (suffixed if taken) and writes
/// the config snapshot into it.
pub fn create_run_dir(cfg: &Config, cmd: Command) -> Result<PathBuf> {
    let out = cfg.path("out");
    fs::create_dir_all(&out)?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{}-{}", cmd.name(), utc_stamp(secs));
    let mut dir = out.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn results_csv(reports: &[EvalReport]) -> Result<String> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CSV_HEADER.as_bytes());
    buf.push(b'\n');
    for r in reports {
        r.write_csv_rows(&mut buf)?;
    }
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn load_lab(cfg: &Config) -> Result<Lab> {
    let path = cfg.path("checkpoint");
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Lab::load(path)
}

/// Layer count for a method: fixed by config, or chosen on the dev set.
fn choose_l(
    lab: &Lab,
    cfg: &Config,
    family: &TaskFamily,
    method: Method,
    mode: Mode,
    settings: &EvalSettings,
) -> Result<usize> {
    if !method.uses_sv() {
        return Ok(0);
    }
    match cfg.fixed_l()? {
        Some(l) => Ok(l),
        None => Ok(select_layer(lab, family, method, mode, &cfg.l_range(lab.n_layers())?, settings)?.0),
    }
}

/// Per-seed accuracy averaged over families, then mean and std over seeds.
pub fn cross_family(reports: &[&EvalReport]) -> (f64, f64) {
    if reports.is_empty() {
        return (0.0, 0.0);
    }
    let n_seeds = reports[0].per_seed.len();
    let per_seed: Vec<f64> = (0..n_seeds)
        .map(|i| reports.iter().map(|r| r.per_seed[i].accuracy).sum::<f64>() / reports.len() as f64)
        .collect();
    mean_std(&per_seed)
}

pub fn run(cmd: Command, cfg: &Config) -> Result<PathBuf> {
    match cmd {
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::SweepLayers => cmd_sweep_layers(cfg),
        Command::Ablate => cmd_ablate(cfg),
        Command::Aggregate => cmd_aggregate(cfg),
        Command::Robustness => cmd_robustness(cfg),
        Command::Dualform => cmd_dualform(cfg),
        Command::Pca => cmd_pca(cfg),
    }
}

pub fn cmd_train(cfg: &Config) -> Result<PathBuf> {
    let tc = cfg.train_config()?;
    let dir = create_run_dir(cfg, Command::Train)?;
    let start = Instant::now();
    let (ck, log) = train(&tc, |row| {
        let accs: Vec<String> = row.accuracy.iter().map(|(f, a)| format!("{f}={a:.3}")).collect();
        eprintln!("step {:>6} loss {:.4} {}", row.step, row.loss, accs.join(" "));
    })?;
    let runtime = start.elapsed().as_secs_f64();
    ck.save(dir.join("model.svlb"))?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    fs::write(dir.join("train_log.csv"), &csv)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "train_config": tc,
            "meta": ck.meta,
            "checkpoint_hash": format!("{:016x}", ck.hash()),
            "runtime_s": runtime,
            "final_accuracy": log.rows.last().map(|r| r.accuracy.clone()),
        }),
    )?;
    let mut plot = Plot::new("training", "step", "10-shot accuracy", Style::Lines);
    if let Some(first) = log.rows.first() {
        for (k, (family, _)) in first.accuracy.iter().enumerate() {
            let pts = log.rows.iter().map(|r| (r.step as f64, r.accuracy[k].1)).collect();
            plot.push(Series::new(family.clone(), pts));
        }
    }
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

pub fn cmd_eval(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let settings = cfg.eval_settings()?;
    let families = cfg.families()?;
    let methods = cfg.methods()?;
    let modes = cfg.modes()?;
    let dir = create_run_dir(cfg, Command::Eval)?;
    let mut reports = Vec::new();
    for family in &families {
        for &method in &methods {
            for &mode in &modes {
                if method == Method::Icl && mode == Mode::FewShot && modes.len() > 1 {
                    continue;
                }
                let l = choose_l(&lab, cfg, family, method, mode, &settings)?;
                reports.push(evaluate_method(&lab, family, method, mode, l, &settings)?);
            }
        }
    }
    fs::write(dir.join("results.csv"), results_csv(&reports)?)?;

    let mut summary = Vec::new();
    let mut plot = Plot::new("accuracy by method", "method index", "accuracy", Style::Points);
    for &mode in &modes {
        let mut pts = Vec::new();
        for (i, &method) in methods.iter().enumerate() {
            let sel: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.method == method.name() && (r.mode == mode || method == Method::Icl))
                .collect();
            let (mean, std) = cross_family(&sel);
            summary.push(json!({"method": method.name(), "mode": mode.name(), "mean": mean, "std": std}));
            pts.push((i as f64, mean));
        }
        plot.push(Series::new(mode.name(), pts));
    }
    let efficiency = settings.timing.then(|| {
        let mean_time = |pred: &dyn Fn(&EvalReport) -> bool| {
            let ts: Vec<f64> = reports.iter().filter(|r| pred(r)).filter_map(|r| r.time_ms).collect();
            mean_std(&ts).0
        };
        json!({
            "zero_shot_sv_ms": mean_time(&|r| r.mode == Mode::ZeroShot && r.selected_l > 0),
            "icl_ms": mean_time(&|r| r.method == "icl"),
        })
    });
    write_json(
        &dir.join("report.json"),
        &json!({"reports": reports, "cross_family": summary, "efficiency": efficiency}),
    )?;
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

pub fn cmd_sweep_layers(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let settings = cfg.eval_settings()?;
    let families = cfg.families()?;
    let methods: Vec<Method> = cfg.methods()?.into_iter().filter(|m| m.uses_sv()).collect();
    if methods.is_empty() {
        return Err(Error::Config("sweep-layers needs at least one state-vector method".into()));
    }
    let mode = cfg.modes()?[0];
    let ls = cfg.l_range(lab.n_layers())?;
    let dir = create_run_dir(cfg, Command::SweepLayers)?;
    let mut rows = String::from(CSV_HEADER);
    rows.push('\n');
    let mut detail = Vec::new();
    let mut plot = Plot::new("accuracy vs L", "L", "accuracy", Style::Lines);
    let mut curves = Vec::new();
    for &method in &methods {
        let mut pts = Vec::new();
        let mut band = Vec::new();
        for &l in &ls {
            let reports = families
                .iter()
                .map(|f| evaluate_method(&lab, f, method, mode, l, &settings))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = cross_family(&reports.iter().collect::<Vec<_>>());
            let _ = writeln!(rows, "{},mean,{},{l},all,{mean:.6},{std:.6},", method.name(), mode.name());
            pts.push((l as f64, mean));
            band.push(std);
            curves.push(json!({"method": method.name(), "L": l, "mean": mean, "std": std}));
            detail.extend(reports);
        }
        plot.push(Series::new(method.name(), pts).with_spread(band));
    }
    fs::write(dir.join("results.csv"), rows)?;
    fs::write(dir.join("per_family.csv"), results_csv(&detail)?)?;
    write_json(&dir.join("report.json"), &json!({"curves": curves, "reports": detail}))?;
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

pub fn cmd_ablate(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let settings = cfg.eval_settings()?;
    let families = cfg.families()?;
    let methods = [
        Method::SvInner,
        Method::SvMomentum,
        Method::SvAblate(Algorithm::Adagrad),
        Method::SvAblate(Algorithm::Rmsprop),
        Method::SvAblate(Algorithm::Adam),
    ];
    let dir = create_run_dir(cfg, Command::Ablate)?;
    let mut reports = Vec::new();
    for family in &families {
        for &method in &methods {
            let l = choose_l(&lab, cfg, family, method, Mode::ZeroShot, &settings)?;
            reports.push(evaluate_method(&lab, family, method, Mode::ZeroShot, l, &settings)?);
        }
    }
    fs::write(dir.join("results.csv"), results_csv(&reports)?)?;
    let mut summary = Vec::new();
    let mut pts = Vec::new();
    for (i, method) in methods.iter().enumerate() {
        let sel: Vec<&EvalReport> = reports.iter().filter(|r| r.method == method.name()).collect();
        let (mean, std) = cross_family(&sel);
        summary.push(json!({"method": method.name(), "mean": mean, "std": std}));
        pts.push((i as f64, mean));
    }
    let mut plot = Plot::new("optimizer ablation (zero-shot)", "method index", "accuracy", Style::Points);
    plot.push(Series::new("cross-family mean", pts));
    write_json(&dir.join("report.json"), &json!({"reports": reports, "cross_family": summary}))?;
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

pub fn cmd_aggregate(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let base = cfg.eval_settings()?;
    let families = cfg.families()?;
    let sizes = cfg.usize_list("agg_sizes")?;
    let dir = create_run_dir(cfg, Command::Aggregate)?;
    let mut rows = String::from(CSV_HEADER);
    rows.push('\n');
    let mut by_size = String::from("size,method,mode,acc,std\n");
    let mut reports = Vec::new();
    let mut plot = Plot::new("aggregation", "examples", "accuracy", Style::Lines);
    for mode in [Mode::ZeroShot, Mode::FewShot] {
        for method in [Method::SvAvgAgg, Method::SvDncAgg] {
            let mut pts = Vec::new();
            for &size in &sizes {
                let settings = EvalSettings {
                    agg_size: size,
                    ..base.clone()
                };
                let mut sized = Vec::new();
                for family in &families {
                    let l = choose_l(&lab, cfg, family, method, mode, &settings)?;
                    let mut r = evaluate_method(&lab, family, method, mode, l, &settings)?;
                    r.method = format!("{}_n{size}", method.name());
                    sized.push(r);
                }
                let (mean, std) = cross_family(&sized.iter().collect::<Vec<_>>());
                let _ = writeln!(by_size, "{size},{},{},{mean:.6},{std:.6}", method.name(), mode.name());
                pts.push((size as f64, mean));
                reports.extend(sized);
            }
            plot.push(Series::new(format!("{} {}", method.name(), mode.name()), pts));
        }
    }
    rows.push_str(&results_csv(&reports)?[CSV_HEADER.len() + 1..]);
    fs::write(dir.join("results.csv"), rows)?;
    fs::write(dir.join("by_size.csv"), by_size)?;
    write_json(&dir.join("report.json"), &json!({"reports": reports}))?;
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Demonstrations,
    Dummies,
}

impl Resample {
    pub fn name(self) -> &'static str {
        match self {
            Resample::Demonstrations => "demonstrations",
            Resample::Dummies => "dummies",
        }
    }
}

/// Zero-shot accuracy of `method` on a fixed set of evaluation queries under
/// `n` resampled demonstration sets (dummy resampled too) or `n` resampled
/// dummy queries (demonstrations fixed). One accuracy per resample.
pub fn robustness(
    lab: &Lab,
    family: &TaskFamily,
    method: Method,
    l: usize,
    resample: Resample,
    n: usize,
    seed: u64,
    settings: &EvalSettings,
) -> Result<Vec<f64>> {
    if !method.uses_sv() || matches!(method, Method::SvAvgAgg | Method::SvDncAgg) {
        return Err(Error::Config(format!(
            "robustness takes a single-prompt state-vector method, not {method}"
        )));
    }
    let base_seed = derive_seed(seed, fnv1a64(family.name.as_bytes()));
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let mapping = family.sample_mapping(&mut rng);
    let mut queries = family.query_bank.clone();
    queries.shuffle(&mut rng);
    let examples: Vec<Example> = queries.iter().map(|&q| mapping.example(q)).collect();
    let n_eval = settings.min_queries.min(examples.len() / 2);
    let (eval, pool) = examples.split_at(n_eval);
    if pool.len() < settings.n_shots + 1 {
        return Err(Error::InsufficientQueries {
            needed: settings.n_shots + 1,
            available: pool.len(),
        });
    }
    let mut dummies: Vec<Example> = pool[settings.n_shots..].to_vec();
    dummies.shuffle(&mut rng);
    (0..n)
        .map(|r| {
            let (demos, dummy) = match resample {
                Resample::Demonstrations => {
                    let mut p = pool.to_vec();
                    p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(base_seed, r as u64)));
                    (p[..settings.n_shots].to_vec(), p[settings.n_shots])
                }
                Resample::Dummies => (pool[..settings.n_shots].to_vec(), dummies[r % dummies.len()]),
            };
            let ep = Episode {
                family: family.name.clone(),
                seed,
                mapping: mapping.clone(),
                demonstrations: demos,
                dummies: vec![dummy],
                dev: Vec::new(),
                test: eval.to_vec(),
            };
            let (sv, _) = method_sv(lab, &ep, method, l, settings)?;
            let plan = InterventionPlan::new(lab, sv)?;
            let preds = run_intervened_batch(lab, eval, Some(&plan), Mode::ZeroShot, &[])?;
            let correct = preds.iter().zip(eval).filter(|(p, q)| **p == q.label).count();
            Ok(correct as f64 / eval.len() as f64)
        })
        .collect()
}

pub fn cmd_robustness(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let settings = cfg.eval_settings()?;
    let families = cfg.families()?;
    let methods: Vec<Method> = cfg
        .methods()?
        .into_iter()
        .filter(|m| m.uses_sv() && !matches!(m, Method::SvAvgAgg | Method::SvDncAgg))
        .collect();
    if methods.is_empty() {
        return Err(Error::Config("robustness needs a single-prompt state-vector method".into()));
    }
    let n = cfg.usize("resamples")?;
    let seed = cfg.u64("seed")?;
    let dir = create_run_dir(cfg, Command::Robustness)?;
    let mut rows = String::from(CSV_HEADER);
    rows.push('\n');
    let mut detail = String::from("resample,method,family,L,index,acc\n");
    let mut summary = Vec::new();
    let mut plot = Plot::new("accuracy std under resampling", "method index", "std", Style::Points);
    for resample in [Resample::Demonstrations, Resample::Dummies] {
        let mut pts = Vec::new();
        for (i, &method) in methods.iter().enumerate() {
            let mut stds = Vec::new();
            for family in &families {
                let l = choose_l(&lab, cfg, family, method, Mode::ZeroShot, &settings)?;
                let accs = robustness(&lab, family, method, l, resample, n, seed, &settings)?;
                let (mean, std) = mean_std(&accs);
                for (k, a) in accs.iter().enumerate() {
                    let _ = writeln!(detail, "{},{},{},{l},{k},{a:.6}", resample.name(), method.name(), family.name);
                }
                let _ = writeln!(
                    rows,
                    "{},{},zero_shot,{l},resample-{},{mean:.6},{std:.6},",
                    method.name(),
                    family.name,
                    resample.name()
                );
                summary.push(json!({
                    "resample": resample.name(), "method": method.name(), "family": family.name,
                    "L": l, "mean": mean, "std": std,
                }));
                stds.push(std);
            }
            let avg_std = stds.iter().sum::<f64>() / stds.len() as f64;
            pts.push((i as f64, avg_std));
        }
        plot.push(Series::new(resample.name(), pts));
    }
    fs::write(dir.join("results.csv"), rows)?;
    fs::write(dir.join("resamples.csv"), detail)?;
    write_json(&dir.join("report.json"), &json!({"resamples": n, "cells": summary}))?;
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

pub fn cmd_dualform(cfg: &Config) -> Result<PathBuf> {
    let n = cfg.usize("instances")?;
    let rows = certify(n, cfg.u64("seed")?, cfg.usize("max_d")?, cfg.usize("max_m")?, cfg.f64("gd_lr")?)?;
    let dir = create_run_dir(cfg, Command::Dualform)?;
    let mut csv = String::from("seed,d,m,max_rel_error,softmax_gap\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{:e},{:.6}", r.seed, r.d, r.m, r.max_rel_error, r.softmax_gap);
    }
    fs::write(dir.join("dualform.csv"), csv)?;
    let max = |f: &dyn Fn(&crate::dualform::IdentityRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let gaps: Vec<f64> = rows.iter().map(|r| r.softmax_gap).collect();
    write_json(
        &dir.join("report.json"),
        &json!({
            "instances": n,
            "max_rel_error": max(&|r| r.max_rel_error),
            "max_gd_abs_diff": max(&|r| r.gd_max_abs_diff),
            "softmax_gap_max": max(&|r| r.softmax_gap),
            "softmax_gap_mean": mean_std(&gaps).0,
        }),
    )?;
    let mut plot = Plot::new("relaxed vs softmax attention gap", "d", "max |softmax − relaxed|", Style::Points);
    plot.push(Series::new("instances", rows.iter().map(|r| (r.d as f64, r.softmax_gap)).collect()));
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}

/// State vectors `V_1..V_N` from `episodes` prompts of `family`.
pub fn pca_state_vectors(lab: &Lab, family: &TaskFamily, episodes: usize, n_shots: usize, seed: u64) -> Result<Vec<StateVector>> {
    let mut svs = Vec::new();
    for j in 0..episodes {
        let s = derive_seed(seed, j as u64);
        let ep = sample_episode(family, n_shots, s)?;
        let prompt = build_prompt(&ep.demonstrations, ep.dummy());
        svs.extend(extract_all(lab, &prompt, lab.n_layers(), &Origin::new(family.name.clone(), s))?);
    }
    Ok(svs)
}

pub fn cmd_pca(cfg: &Config) -> Result<PathBuf> {
    let lab = load_lab(cfg)?;
    let family = crate::tasks::family_by_name(cfg.get("pca_family"))?;
    let input = match cfg.get("pca_layer") {
        "flat" => PcaInput::Flattened,
        _ => PcaInput::Layer(cfg.usize("pca_layer")?),
    };
    let svs = pca_state_vectors(&lab, &family, cfg.usize("pca_episodes")?, cfg.usize("n_shots")?, cfg.u64("seed")?)?;
    let export = pca_project(&svs, input)?;
    let sep = separation(&export);
    let dir = create_run_dir(cfg, Command::Pca)?;
    let mut csv = String::from("index,position,pc1,pc2\n");
    for (i, (p, l)) in export.points.iter().zip(&export.labels).enumerate() {
        let _ = writeln!(csv, "{i},{l},{:.9},{:.9}", p[0], p[1]);
    }
    fs::write(dir.join("points.csv"), csv)?;
    write_json(&dir.join("report.json"), &json!({"explained": export.explained, "separation": sep}))?;
    let mut plot = Plot::new(format!("state vectors ({})", family.name), "pc1", "pc2", Style::Points);
    let mut positions: Vec<usize> = export.labels.clone();
    positions.sort_unstable();
    positions.dedup();
    for pos in positions {
        let pts = export
            .points
            .iter()
            .zip(&export.labels)
            .filter(|(_, &l)| l == pos)
            .map(|(p, _)| (p[0], p[1]))
            .collect();
        plot.push(Series::new(format!("position {pos}"), pts));
    }
    fs::write(dir.join("plot.svg"), plot.to_svg())?;
    Ok(dir)
}
