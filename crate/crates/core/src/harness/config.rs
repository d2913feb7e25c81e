//! Flat `key = value` experiment configuration. Values come from built-in
//! defaults, then a config file, then `--key value` command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::intervene::{EvalSettings, Method, Mode};
use crate::statevec::{Algorithm, OptConfig};
use crate::tasks::{family_by_name, task_catalog, TaskFamily};
use crate::trainer::TrainConfig;

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("checkpoint", "crates/core/fixtures/reference.svlb"),
    ("out", "runs"),
    ("seed", "0"),
    ("seeds", "5"),
    ("families", "random-bijection,fixed-offset,bank-translation,class-map"),
    ("methods", "regular,icl,sv_plain,sv_inner,sv_momentum"),
    ("mode", "zero_shot"),
    ("l", "auto"),
    ("l_min", "1"),
    ("l_max", "0"),
    ("n_shots", "10"),
    ("inner_window", "7"),
    ("beta", "0.5"),
    ("opt_lr", "0.01"),
    ("opt_eps", "1e-8"),
    ("opt_beta1", "0.9"),
    ("opt_beta2", "0.999"),
    ("opt_rho", "0.9"),
    ("agg_sizes", "10,20,30,40,50,60,70,80,90,100"),
    ("group_size", "10"),
    ("min_queries", "40"),
    ("timing", "false"),
    ("resamples", "100"),
    ("instances", "1000"),
    ("max_d", "64"),
    ("max_m", "32"),
    ("gd_lr", "0.1"),
    ("pca_family", "random-bijection"),
    ("pca_episodes", "50"),
    ("pca_layer", "flat"),
    ("steps", "20000"),
    ("batch_size", "32"),
    ("learning_rate", "0.001"),
    ("warmup_steps", "500"),
    ("mixture", "random-bijection:0.6,fixed-offset:0.15,bank-translation:0.15,class-map:0.1"),
    ("min_examples", "2"),
    ("max_examples", "12"),
    ("sparse_mask_fraction", "0.5"),
    ("eval_interval", "1000"),
    ("eval_episodes", "200"),
    ("n_layers", "4"),
    ("n_heads", "4"),
    ("d_model", "64"),
    ("d_head", "16"),
    ("d_ff", "256"),
    ("max_seq", "40"),
    ("attention", "softmax"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn check_key(key: &str) -> Result<()> {
    if DEFAULTS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key {key:?}")))
    }
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.parse_text(&text)
    }

    /// Applies `--key value` or `--key=value` pairs.
    pub fn apply_flags(&mut self, flags: &[String]) -> Result<()> {
        let mut it = flags.iter();
        while let Some(flag) = it.next() {
            let Some(body) = flag.strip_prefix("--") else {
                return Err(Error::Config(format!("expected --key, got {flag:?}")));
            };
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("flag --{body} needs a value")))?;
                    (body.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            panic!("key {key:?} has no default")
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {:?}", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad entry {s:?} in {key}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Snapshot in the same format `parse_text` reads.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let base = self.u64("seed")?;
        let n = self.usize("seeds")?;
        if n == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok((0..n as u64).map(|i| base + i).collect())
    }

    pub fn families(&self) -> Result<Vec<TaskFamily>> {
        let names = self.list("families");
        if names.iter().any(|n| n == "all") {
            return Ok(task_catalog());
        }
        names.iter().map(|n| family_by_name(n)).collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.list("methods").iter().map(|m| Method::parse(m)).collect()
    }

    pub fn modes(&self) -> Result<Vec<Mode>> {
        match self.get("mode") {
            "both" => Ok(vec![Mode::ZeroShot, Mode::FewShot]),
            m => Ok(vec![Mode::parse(m)?]),
        }
    }

    /// Fixed `L`, or `None` for dev-set selection.
    pub fn fixed_l(&self) -> Result<Option<usize>> {
        match self.get("l") {
            "auto" => Ok(None),
            _ => Ok(Some(self.usize("l")?)),
        }
    }

    /// Candidate `L` values; `l_max = 0` means the model's layer count.
    pub fn l_range(&self, n_layers: usize) -> Result<Vec<usize>> {
        let lo = self.usize("l_min")?.max(1);
        let hi = match self.usize("l_max")? {
            0 => n_layers,
            h => h.min(n_layers),
        };
        if lo > hi {
            return Err(Error::Config(format!("empty layer range {lo}..={hi}")));
        }
        Ok((lo..=hi).collect())
    }

    pub fn opt(&self) -> Result<OptConfig> {
        let cfg = OptConfig {
            algorithm: Algorithm::Momentum,
            beta: self.f64("beta")?,
            lr: self.f64("opt_lr")?,
            eps: self.f64("opt_eps")?,
            beta1: self.f64("opt_beta1")?,
            beta2: self.f64("opt_beta2")?,
            rho: self.f64("opt_rho")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let s = EvalSettings {
            seeds: self.seeds()?,
            n_shots: self.usize("n_shots")?,
            inner_window: self.usize("inner_window")?,
            opt: self.opt()?,
            agg_size: self
                .usize_list("agg_sizes")?
                .into_iter()
                .max()
                .unwrap_or(100),
            group_size: self.usize("group_size")?,
            min_queries: self.usize("min_queries")?,
            timing: self.bool("timing")?,
        };
        for size in self.usize_list("agg_sizes")? {
            if size == 0 || size % s.group_size != 0 {
                return Err(Error::Config(format!(
                    "aggregation size {size} is not a multiple of group_size {}",
                    s.group_size
                )));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::reference();
        cfg.model.n_layers = self.usize("n_layers")?;
        cfg.model.n_heads = self.usize("n_heads")?;
        cfg.model.d_model = self.usize("d_model")?;
        cfg.model.d_head = self.usize("d_head")?;
        cfg.model.d_ff = self.usize("d_ff")?;
        cfg.model.max_seq = self.usize("max_seq")?;
        cfg.model.attention_kind = match self.get("attention") {
            "softmax" => crate::numerics::AttentionKind::Softmax,
            "relaxed_linear" => crate::numerics::AttentionKind::RelaxedLinear,
            other => return Err(Error::Config(format!("unknown attention {other:?}"))),
        };
        cfg.steps = self.usize("steps")?;
        cfg.batch_size = self.usize("batch_size")?;
        cfg.learning_rate = self.f64("learning_rate")?;
        cfg.warmup_steps = self.usize("warmup_steps")?;
        cfg.mixture = self
            .list("mixture")
            .iter()
            .map(|entry| {
                let (name, w) = entry
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("mixture entry {entry:?} needs name:weight")))?;
                let w: f64 = w
                    .parse()
                    .map_err(|_| Error::Config(format!("bad mixture weight in {entry:?}")))?;
                Ok((name.to_string(), w))
            })
            .collect::<Result<_>>()?;
        cfg.min_examples = self.usize("min_examples")?;
        cfg.max_examples = self.usize("max_examples")?;
        cfg.sparse_mask_fraction = self.f64("sparse_mask_fraction")?;
        cfg.eval_interval = self.usize("eval_interval")?;
        cfg.eval_episodes = self.usize("eval_episodes")?;
        cfg.seed = self.u64("seed")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_over_file_over_default() {
        let mut c = Config::default();
        assert_eq!(c.get("seeds"), "5");
        c.parse_text("# comment\nseeds = 3\nn_shots=8  # trailing\n").unwrap();
        assert_eq!(c.usize("seeds").unwrap(), 3);
        c.apply_flags(&["--seeds".into(), "2".into(), "--n-shots=6".into()]).unwrap();
        assert_eq!(c.usize("seeds").unwrap(), 2);
        assert_eq!(c.usize("n_shots").unwrap(), 6);
        assert_eq!(c.seeds().unwrap(), vec![0, 1]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        let mut c = Config::default();
        assert!(c.parse_text("colour = blue").is_err());
        assert!(c.parse_text("just words").is_err());
        assert!(c.apply_flags(&["--seeds".into()]).is_err());
        assert!(c.apply_flags(&["seeds".into(), "1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.set("methods", "sv_inner,sv_ablate_adam").unwrap();
        let mut d = Config::default();
        d.parse_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.methods().unwrap().len(), 2);
    }

    #[test]
    fn defaults_reproduce_reference_training() {
        assert_eq!(Config::default().train_config().unwrap(), TrainConfig::reference());
        assert_eq!(Config::default().eval_settings().unwrap(), EvalSettings::default());
    }

    #[test]
    fn aggregation_sizes_must_fit_groups() {
        let mut c = Config::default();
        c.set("agg_sizes", "10,25").unwrap();
        assert!(c.eval_settings().is_err());
    }

    #[test]
    fn layer_range() {
        let mut c = Config::default();
        assert_eq!(c.l_range(4).unwrap(), vec![1, 2, 3, 4]);
        c.set("l_max", "2").unwrap();
        assert_eq!(c.l_range(4).unwrap(), vec![1, 2]);
        assert_eq!(c.fixed_l().unwrap(), None);
        c.set("l", "3").unwrap();
        assert_eq!(c.fixed_l().unwrap(), Some(3));
    }
}
