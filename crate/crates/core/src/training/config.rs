use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Batch size of the largest sensor.
    pub base_batch: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub p_cross: f64,
    pub seed: u64,
    /// Stop after this many rounds even if epochs remain.
    pub max_steps: Option<usize>,
    /// Per-sensor batch size overrides, by sensor name.
    pub batch_overrides: BTreeMap<String, usize>,
    /// Per-sensor lr multipliers overriding `b_i / base_batch`, by sensor name.
    pub lr_overrides: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_batch: 128,
            base_lr: 1e-4,
            warmup_lr: 5e-7,
            epochs: 800,
            warmup_epochs: 10,
            milestones: vec![700],
            gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            p_cross: 0.5,
            seed: 0,
            max_steps: None,
            batch_overrides: BTreeMap::new(),
            lr_overrides: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse `{}`", key, value)))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_batch == 0 || self.batch_overrides.values().any(|&b| b == 0) {
            return fail("batch sizes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_cross) {
            return fail(format!("p_cross {} outside [0, 1]", self.p_cross));
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0) || !(self.warmup_lr >= 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("invalid optimizer moments".into());
        }
        if self.lr_overrides.values().any(|&s| !(s > 0.0)) {
            return fail("lr scales must be positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(name) = key.strip_prefix("train.batch.") {
            self.batch_overrides.insert(name.to_string(), parse(key, value)?);
            return Ok(());
        }
        if let Some(name) = key.strip_prefix("train.lr_scale.") {
            self.lr_overrides.insert(name.to_string(), parse(key, value)?);
            return Ok(());
        }
        match key {
            "train.base_batch" => self.base_batch = parse(key, value)?,
            "train.base_lr" => self.base_lr = parse(key, value)?,
            "train.warmup_lr" => self.warmup_lr = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "train.milestones" => {
                self.milestones = match value.trim() {
                    "" | "none" => vec![],
                    list => list.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?,
                }
            }
            "train.gamma" => self.gamma = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.eps" => self.eps = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.p_cross" => self.p_cross = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{}`", key))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got `{}`", line)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        let mut out: Vec<(String, String)> = [
            ("train.base_batch", self.base_batch.to_string()),
            ("train.base_lr", self.base_lr.to_string()),
            ("train.warmup_lr", self.warmup_lr.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.warmup_epochs", self.warmup_epochs.to_string()),
            ("train.milestones", list(&self.milestones)),
            ("train.gamma", self.gamma.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.eps", self.eps.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.p_cross", self.p_cross.to_string()),
            ("train.seed", self.seed.to_string()),
            (
                "train.max_steps",
                self.max_steps.map_or("none".to_string(), |s| s.to_string()),
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (name, b) in &self.batch_overrides {
            out.push((format!("train.batch.{}", name), b.to_string()));
        }
        for (name, s) in &self.lr_overrides {
            out.push((format!("train.lr_scale.{}", name), s.to_string()));
        }
        out
    }
}
