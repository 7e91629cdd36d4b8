//! Flat `key = value` experiment files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma-separated. Variants are written `label=variant:r:k` or
//! `variant:r:k`, and Split-LoRA takes a fourth field for the expert count,
//! e.g. `split-lora:32:2:16`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flylora::experiments::{ExperimentConfig, InputModel, TaskKind, TaskSpec, VariantSpec};
use flylora::{SelectionMode, TrainOptions, Variant};

/// Every key the file format understands, with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("tasks", "1"),
    ("task_kind", "linear-teacher"),
    ("n", "256"),
    ("m", "32"),
    ("samples", "4096"),
    ("noise", "0.1"),
    ("separation", "1.0"),
    ("task_seed", "100"),
    ("shared_dims", "0"),
    ("specific_dims", "0"),
    ("shared_scale", "1.0"),
    ("jitter", "0.0"),
    ("family_seed", "7"),
    ("variants", ""),
    ("rho", "0.25"),
    ("alpha", ""),
    ("selection", "signed"),
    ("balancing", "true"),
    ("balance_rate", "0.001"),
    ("seeds", "0"),
    ("epochs", "100"),
    ("lr", "0.05"),
    ("batch_size", "32"),
    ("corr_columns", "0"),
    ("corr_samples", "256"),
    ("format", "csv"),
    ("total_rank", "32"),
    ("active_rank", "8"),
    ("adapters", ""),
    ("step", "1e-5"),
    ("instances", "20"),
    ("checkpoints", "true"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.msg)
    }
}

fn err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    pub source: Option<PathBuf>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("line {} is not `key = value`", i + 1)))?;
            let k = k.trim();
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(err(k, format!("unknown key on line {}", i + 1)));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(err(k, format!("set twice (line {})", i + 1)));
            }
        }
        Ok(Self { values, source: None })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        c.source = Some(path.to_path_buf());
        Ok(c)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.get(key).is_some_and(|v| !v.is_empty())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d))
            .unwrap_or("")
    }

    pub fn require(&self, key: &str) -> Result<(), ConfigError> {
        if self.is_set(key) {
            Ok(())
        } else {
            Err(err(key, "missing required key"))
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| err(key, format!("cannot parse `{raw}`: {e}")))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>, ConfigError> {
        let seeds = self
            .list("seeds")
            .iter()
            .map(|s| s.parse().map_err(|e| err("seeds", format!("cannot parse `{s}`: {e}"))))
            .collect::<Result<Vec<u64>, _>>()?;
        if seeds.is_empty() {
            return Err(err("seeds", "need at least one seed"));
        }
        Ok(seeds)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>, ConfigError> {
        let count: usize = self.get("tasks")?;
        if count == 0 {
            return Err(err("tasks", "need at least one task"));
        }
        let kind: TaskKind = self.get("task_kind")?;
        let input = InputModel {
            shared_dims: self.get("shared_dims")?,
            specific_dims: self.get("specific_dims")?,
            shared_scale: self.get("shared_scale")?,
            jitter: self.get("jitter")?,
            family_seed: self.get("family_seed")?,
        };
        let (n, m, samples): (usize, usize, usize) = (self.get("n")?, self.get("m")?, self.get("samples")?);
        let noise: f64 = self.get("noise")?;
        let separation: f64 = self.get("separation")?;
        let base: u64 = self.get("task_seed")?;
        Ok((0..count)
            .map(|i| {
                let mut t = TaskSpec::new(format!("task{i}"), kind, n, m, samples, noise, base + i as u64)
                    .with_input(input.clone());
                t.separation = separation;
                t
            })
            .collect())
    }

    fn variant_defaults(&self, spec: &mut VariantSpec) -> Result<(), ConfigError> {
        spec.rho = self.get("rho")?;
        if self.is_set("alpha") {
            spec.alpha = Some(self.get("alpha")?);
        }
        spec.selection = match self.raw("selection") {
            "signed" => SelectionMode::Signed,
            "magnitude" => SelectionMode::Magnitude,
            o => return Err(err("selection", format!("unknown mode `{o}` (signed|magnitude)"))),
        };
        spec.balancing = self.get("balancing")?;
        spec.balance_rate = self.get("balance_rate")?;
        Ok(())
    }

    pub fn variants(&self) -> Result<Vec<VariantSpec>, ConfigError> {
        self.require("variants")?;
        let mut out = Vec::new();
        for item in self.list("variants") {
            let (label, body) = match item.split_once('=') {
                Some((l, b)) => (l.trim().to_string(), b.trim().to_string()),
                None => (item.clone(), item.clone()),
            };
            let fields: Vec<&str> = body.split(':').collect();
            let bad = |msg: &str| err("variants", format!("`{item}`: {msg}"));
            let variant: Variant = fields[0].parse().map_err(|e| bad(&format!("{e}")))?;
            let num = |i: usize, what: &str| -> Result<usize, ConfigError> {
                fields
                    .get(i)
                    .ok_or_else(|| bad(&format!("missing {what}")))?
                    .parse()
                    .map_err(|_| bad(&format!("{what} is not an integer")))
            };
            let (r, k) = (num(1, "r")?, num(2, "k")?);
            let mut spec = match variant {
                Variant::SplitLora => VariantSpec::split(label, r, num(3, "expert count")?, k),
                v => {
                    if fields.len() > 3 {
                        return Err(bad("only split-lora takes an expert count"));
                    }
                    VariantSpec::new(label, v, r, k)
                }
            };
            self.variant_defaults(&mut spec)?;
            out.push(spec);
        }
        if out.is_empty() {
            return Err(err("variants", "need at least one variant"));
        }
        Ok(out)
    }

    pub fn train_options(&self) -> Result<TrainOptions, ConfigError> {
        Ok(TrainOptions {
            epochs: self.get("epochs")?,
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            seed: 0,
        })
    }

    pub fn experiment(&self, variants: Vec<VariantSpec>, seeds: Vec<u64>) -> Result<ExperimentConfig, ConfigError> {
        let cfg = ExperimentConfig {
            tasks: self.tasks()?,
            variants,
            seeds,
            train: self.train_options()?,
            corr_columns: self.get("corr_columns")?,
            corr_samples: self.get("corr_samples")?,
        };
        cfg.validate().map_err(|e| err(key_of(&e), e.to_string()))?;
        Ok(cfg)
    }
}

/// Best-effort mapping from a core validation error to the config key.
fn key_of(e: &flylora::Error) -> &'static str {
    match e {
        flylora::Error::InvalidParameter { name, .. } => match *name {
            "k" | "r" | "experts" | "rho" | "alpha" | "n/m" => "variants",
            other => other,
        },
        _ => "variants",
    }
}
