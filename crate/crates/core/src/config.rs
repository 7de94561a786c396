//! Run configuration: every setting of a command in one `key = value` file.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoePlacement};
use crate::sensors::{SensorRegistry, SensorSpec, SyntheticConfig};
use crate::training::TrainConfig;
use crate::transfer::TransferConfig;

/// Synthetic data settings. Image size comes from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_per_sensor: usize,
    pub seed: u64,
    pub smoothing: f64,
}

/// Settings of the desk-scale ablation runner.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Pretraining steps per grid cell.
    pub steps: usize,
    pub finetune_steps: usize,
    /// Seed of the held-out reconstruction plan.
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    /// Keyed by sensor id.
    pub sensors: BTreeMap<usize, SensorSpec>,
    pub data: DataConfig,
    pub ablation: AblationConfig,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 32×32 images, a 4-block trunk and four sensors
    /// in two colocated pairs (SAR-like ↔ multispectral, elevation ↔ RGB).
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.width = 32;
        model.height = 32;
        model.patch_size = 4;
        model.mask_unit = 8;
        model.embed_dim = 32;
        model.encoder.depth = 2;
        model.encoder.heads = 4;
        model.encoder.mlp_ratio = 2;
        model.encoder.num_experts = 4;
        let mut train = TrainConfig::default();
        train.base_batch = 8;
        train.base_lr = 1e-3;
        train.warmup_lr = 1e-5;
        train.epochs = 20;
        train.warmup_epochs = 1;
        train.milestones = vec![15];
        let sensors = [
            SensorSpec::new(0, "sar", 2)
                .paired(1)
                .with_stats(vec![2.0, 1.5], vec![0.5, 0.4]),
            SensorSpec::new(1, "s2", 14).paired(0),
            SensorSpec::new(2, "dsm", 1).paired(3).with_stats(vec![10.0], vec![4.0]),
            SensorSpec::new(3, "rgb", 3)
                .paired(2)
                .with_stats(vec![0.4, 0.45, 0.5], vec![0.2, 0.2, 0.25]),
        ]
        .into_iter()
        .map(|s| (s.sensor_id, s))
        .collect();
        RunConfig {
            model,
            train,
            transfer: TransferConfig {
                sensors: vec!["sar".into()],
                ..TransferConfig::default()
            },
            sensors,
            data: DataConfig {
                n_per_sensor: 64,
                seed: 0,
                smoothing: 10.0,
            },
            ablation: AblationConfig {
                steps: 100,
                finetune_steps: 50,
                eval_seed: 99,
            },
            checkpoint_every: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse `{}`", key, value)))
}

fn floats(key: &str, value: &str) -> Result<Vec<f32>> {
    value.split(',').map(|x| parse(key, x)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("sensor.") {
            return self.set_sensor(key, rest, value);
        }
        let root = key.split('.').next().unwrap_or("");
        match root {
            "model" | "encoder" => self.model.set(key, value),
            "train" => self.train.set(key, value),
            "transfer" => self.transfer.set(key, value),
            _ => {
                match key {
                    "sensors.count" => {
                        let n: usize = parse(key, value)?;
                        self.sensors.retain(|&id, _| id < n);
                    }
                    "data.n_per_sensor" => self.data.n_per_sensor = parse(key, value)?,
                    "data.seed" => self.data.seed = parse(key, value)?,
                    "data.smoothing" => self.data.smoothing = parse(key, value)?,
                    "ablation.steps" => self.ablation.steps = parse(key, value)?,
                    "ablation.finetune_steps" => self.ablation.finetune_steps = parse(key, value)?,
                    "ablation.eval_seed" => self.ablation.eval_seed = parse(key, value)?,
                    "run.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{}`", key))),
                }
                Ok(())
            }
        }
    }

    fn set_sensor(&mut self, key: &str, rest: &str, value: &str) -> Result<()> {
        let (id, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{}`", key)))?;
        let id: usize = parse(key, id)?;
        let spec = self
            .sensors
            .entry(id)
            .or_insert_with(|| SensorSpec::new(id, &format!("sensor{}", id), 1));
        match field {
            "name" => spec.name = value.trim().to_string(),
            "channels" => {
                spec.channels = parse(key, value)?;
                if spec.norm_mean.len() != spec.channels {
                    spec.norm_mean = vec![0.0; spec.channels];
                    spec.norm_std = vec![1.0; spec.channels];
                }
            }
            "paired_with" => {
                spec.paired_with = match value.trim() {
                    "" | "-" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "mean" => spec.norm_mean = floats(key, value)?,
            "std" => spec.norm_std = floats(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{}`", key))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the defaults. `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{}`", n + 1, line)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        out.extend(self.transfer.entries());
        out.push(("sensors.count".into(), self.sensors.len().to_string()));
        for (id, s) in &self.sensors {
            let k = |f: &str| format!("sensor.{}.{}", id, f);
            out.push((k("name"), s.name.clone()));
            out.push((k("channels"), s.channels.to_string()));
            out.push((k("paired_with"), s.paired_with.map_or("-".into(), |p| p.to_string())));
            out.push((k("mean"), join(&s.norm_mean)));
            out.push((k("std"), join(&s.norm_std)));
        }
        out.extend([
            ("data.n_per_sensor".to_string(), self.data.n_per_sensor.to_string()),
            ("data.seed".to_string(), self.data.seed.to_string()),
            ("data.smoothing".to_string(), self.data.smoothing.to_string()),
            ("ablation.steps".to_string(), self.ablation.steps.to_string()),
            ("ablation.finetune_steps".to_string(), self.ablation.finetune_steps.to_string()),
            ("ablation.eval_seed".to_string(), self.ablation.eval_seed.to_string()),
            ("run.checkpoint_every".to_string(), self.checkpoint_every.to_string()),
        ]);
        out
    }

    /// Fully resolved config; parsing it back gives an equal value.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    pub fn registry(&self) -> Result<SensorRegistry> {
        SensorRegistry::new(self.sensors.values().cloned().collect()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_per_sensor: self.data.n_per_sensor,
            width: self.model.width,
            height: self.model.height,
            seed: self.data.seed,
            smoothing: self.data.smoothing,
            patch_multiple: self.model.patch_size,
        }
    }

    /// Everything except the transfer section, which only the transfer
    /// commands need.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        self.registry()?;
        if self.data.n_per_sensor == 0 {
            return Err(Error::Config("data.n_per_sensor must be at least 1".into()));
        }
        if !(self.data.smoothing >= 0.0) {
            return Err(Error::Config("data.smoothing must be non-negative".into()));
        }
        Ok(())
    }

    /// Same run with MoE switched on (every other block) or off.
    pub fn with_moe(&self, on: bool) -> RunConfig {
        let mut c = self.clone();
        c.model.encoder.moe_placement = if on {
            match &self.model.encoder.moe_placement {
                MoePlacement::Explicit(v) if v.is_empty() => MoePlacement::EveryOther,
                p => p.clone(),
            }
        } else {
            MoePlacement::Explicit(vec![])
        };
        c
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("train.batch.sar", "3").unwrap();
        cfg.set("sensor.1.paired_with", "-").unwrap();
        cfg.set("sensor.0.paired_with", "-").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        for k in ["foo", "data.size", "sensor.0.colour", "sensor.x.name", "model.depth"] {
            assert!(matches!(cfg.set(k, "1"), Err(Error::Config(_))), "{}", k);
        }
    }

    #[test]
    fn default_has_two_pairs() {
        let reg = RunConfig::default().registry().unwrap();
        assert_eq!(reg.len(), 4);
        assert_eq!(reg.pairs(), vec![(0, 1), (2, 3)]);
    }
}
