//! Downstream fine-tuning: transfer modes, task heads and synthetic tasks.

pub mod heads;
pub mod modes;
pub mod tasks;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use heads::{head_registry, TaskHead, TaskTargets};
pub use modes::{mode_registry, TransferMode};
pub use tasks::{make_task, Task};

use crate::error::{Error, Result};
use crate::metrics::{MetricInput, MetricReport};
use crate::model::{Binder, ModelConfig, ParamStore};
use crate::numeric::{Tape, Tensor};
use crate::sensors::{Dataset, SensorSpec};
use crate::training::{read_table, write_table, AdamW, Entry};

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    /// `concat` (shared encoder per sensor, features concatenated) or
    /// `stack` (channels stacked before one merged embedder).
    pub mode: String,
    /// `multilabel`, `dense_regression` or `dense_classification`.
    pub head: String,
    pub frozen_trunk: bool,
    /// Names of the task's input sensors, in order.
    pub sensors: Vec<String>,
    /// Label count, output channels or class count, depending on the head.
    pub outputs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            mode: "concat".into(),
            head: "multilabel".into(),
            frozen_trunk: false,
            sensors: Vec::new(),
            outputs: 4,
            lr: 1e-3,
            weight_decay: 0.05,
            steps: 100,
            batch: 8,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse `{}`", key, value)))
}

impl TransferConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "transfer.mode" => self.mode = value.trim().to_string(),
            "transfer.head" => self.head = value.trim().to_string(),
            "transfer.frozen_trunk" => self.frozen_trunk = parse(key, value)?,
            "transfer.sensors" => {
                self.sensors = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "transfer.outputs" => self.outputs = parse(key, value)?,
            "transfer.lr" => self.lr = parse(key, value)?,
            "transfer.weight_decay" => self.weight_decay = parse(key, value)?,
            "transfer.steps" => self.steps = parse(key, value)?,
            "transfer.batch" => self.batch = parse(key, value)?,
            "transfer.seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{}`", key))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("transfer.mode", self.mode.clone()),
            ("transfer.head", self.head.clone()),
            ("transfer.frozen_trunk", self.frozen_trunk.to_string()),
            ("transfer.sensors", self.sensors.join(",")),
            ("transfer.outputs", self.outputs.to_string()),
            ("transfer.lr", self.lr.to_string()),
            ("transfer.weight_decay", self.weight_decay.to_string()),
            ("transfer.steps", self.steps.to_string()),
            ("transfer.batch", self.batch.to_string()),
            ("transfer.seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TransferConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got `{}`", line)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        mode_registry().get(&self.mode)?;
        head_registry().get(&self.head)?;
        if self.sensors.is_empty() {
            return Err(Error::Config("transfer.sensors is empty".into()));
        }
        if self.outputs == 0 || self.batch == 0 {
            return Err(Error::Config("transfer outputs and batch must be at least 1".into()));
        }
        if self.head == "dense_classification" && self.outputs < 2 {
            return Err(Error::Config("dense classification needs at least 2 classes".into()));
        }
        Ok(())
    }
}

/// One fine-tuning log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub loss: f64,
}

/// Everything needed to run a fine-tuned model.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneModel {
    pub model: ModelConfig,
    pub transfer: TransferConfig,
    pub sensors: Vec<SensorSpec>,
    /// Trunk, mode-specific and `head.*` parameters.
    pub params: ParamStore<f32>,
}

impl FinetuneModel {
    /// Start from pretrained (or freshly initialized) trunk parameters.
    pub fn new(
        model: ModelConfig,
        transfer: TransferConfig,
        sensors: Vec<SensorSpec>,
        mut params: ParamStore<f32>,
    ) -> Result<Self> {
        transfer.validate()?;
        let modes = mode_registry();
        let mode = modes.get(&transfer.mode)?;
        let heads = head_registry();
        let head = heads.get(&transfer.head)?;
        mode.prepare(&mut params, &sensors)?;
        let width = mode.head_input_width(model.embed_dim, sensors.len());
        let mut rng = ChaCha8Rng::seed_from_u64(transfer.seed);
        rng.set_stream(7);
        head.init(width, transfer.outputs, model.patch_size, &mut rng, &mut params);
        Ok(FinetuneModel {
            model,
            transfer,
            sensors,
            params,
        })
    }

    /// Head output for one batch of per-sensor images `[B, C_i, W, H]`.
    pub fn forward(&self, tape: &mut Tape<f32>, binder: &mut Binder<f32>, images: &[Tensor<f32>]) -> Result<crate::numeric::Var> {
        let modes = mode_registry();
        let mode = modes.get(&self.transfer.mode)?;
        let heads = head_registry();
        let head = heads.get(&self.transfer.head)?;
        let feats = mode.features(tape, binder, &self.model, &self.sensors, images)?;
        head.forward(tape, binder, &self.model, self.transfer.outputs, feats)
    }

    pub fn predict(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let out = self.forward(&mut tape, &mut binder, images)?;
        Ok(tape.value(out).clone())
    }

    /// Train on `task` for `transfer.steps` steps; returns the loss log.
    pub fn finetune(&mut self, task: &Task) -> Result<Vec<FinetuneRecord>> {
        let heads = head_registry();
        let head = heads.get(&self.transfer.head)?;
        let mut opt = AdamW::<f32>::new(0.9, 0.999, 1e-8, self.transfer.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(self.transfer.seed);
        rng.set_stream(8);
        let mut log = Vec::with_capacity(self.transfer.steps);
        for step in 0..self.transfer.steps {
            let idx = task.sample_batch(self.transfer.batch, &mut rng);
            let (images, targets) = task.batch(&idx)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            if self.transfer.frozen_trunk {
                binder = binder
                    .freeze_prefix("encoder.")
                    .freeze_prefix("embedder.")
                    .freeze_prefix("shared.");
            }
            let out = self.forward(&mut tape, &mut binder, &images)?;
            let loss = head.loss(&mut tape, out, &targets)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at step {}", step)));
            }
            tape.backward(loss)?;
            let grads = binder.grads(&tape);
            drop(binder);
            opt.step(&mut self.params, &grads, self.transfer.lr, |_| 1.0)?;
            log.push(FinetuneRecord { step, loss: value });
        }
        Ok(log)
    }

    /// Mean task loss over `indices` without updating.
    pub fn loss_on(&self, task: &Task, indices: &[usize]) -> Result<f64> {
        let heads = head_registry();
        let head = heads.get(&self.transfer.head)?;
        let (images, targets) = task.batch(indices)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let out = self.forward(&mut tape, &mut binder, &images)?;
        let loss = head.loss(&mut tape, out, &targets)?;
        Ok(tape.value(loss).item() as f64)
    }

    pub fn evaluate(&self, task: &Task, indices: &[usize]) -> Result<MetricReport> {
        let heads = head_registry();
        let head = heads.get(&self.transfer.head)?;
        let (images, targets) = task.batch(indices)?;
        let out = self.predict(&images)?;
        head.evaluate(&out, &targets)
    }

    /// Parameters that differ from the pretrained trunk after fine-tuning:
    /// the head and stacked embedder, plus the whole trunk unless it was frozen.
    pub fn head_params(&self) -> BTreeMap<String, Tensor<f32>> {
        let all = !self.transfer.frozen_trunk;
        self.params
            .iter()
            .filter(|(k, _)| all || k.starts_with("head.") || k.starts_with(modes::STACKED_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Saved fine-tuning head: the transfer config, the registry it was trained
/// against and the non-trunk parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFile {
    pub transfer: TransferConfig,
    pub registry: String,
    pub params: BTreeMap<String, Tensor<f32>>,
}

/// Same container as pretraining checkpoints.
pub fn save_head(head: &HeadFile, path: &Path) -> Result<()> {
    let mut entries = vec![
        ("meta.transfer".to_string(), Entry::text(&head.transfer.to_text())),
        ("meta.registry".to_string(), Entry::text(&head.registry)),
    ];
    for (k, t) in &head.params {
        entries.push((format!("param.{}", k), Entry::F32(t.clone())));
    }
    write_table(path, &entries)
}

pub fn load_head(path: &Path) -> Result<HeadFile> {
    let mut transfer = None;
    let mut registry = None;
    let mut params = BTreeMap::new();
    for (name, e) in read_table(path)? {
        match (name.as_str(), e) {
            ("meta.transfer", Entry::U8(_, b)) => transfer = Some(String::from_utf8_lossy(&b).into_owned()),
            ("meta.registry", Entry::U8(_, b)) => registry = Some(String::from_utf8_lossy(&b).into_owned()),
            (n, Entry::F32(t)) if n.starts_with("param.") => {
                params.insert(n["param.".len()..].to_string(), t);
            }
            _ => return Err(Error::format(path, format!("unexpected entry `{}`", name))),
        }
    }
    let missing = |what: &str| Error::format(path, format!("missing `{}`", what));
    Ok(HeadFile {
        transfer: TransferConfig::from_text(&transfer.ok_or_else(|| missing("meta.transfer"))?)?,
        registry: registry.ok_or_else(|| missing("meta.registry"))?,
        params,
    })
}

/// Image metrics of `pred` against `gt`, matched by sample id, one report
/// per sensor (averaged over its samples). PSNR and SSIM use the value
/// range of each ground-truth image as the dynamic range.
pub fn compare_datasets(pred: &Dataset, gt: &Dataset) -> Result<Vec<(String, MetricReport)>> {
    if pred.registry().canonical() != gt.registry().canonical() {
        return Err(Error::Incompatible("prediction and ground truth use different sensors".into()));
    }
    let mut rows = Vec::new();
    for spec in gt.registry().iter() {
        let idx = gt.sensor_indices(spec.sensor_id);
        if idx.is_empty() {
            continue;
        }
        let mut names = vec!["mae", "psnr", "ssim"];
        if spec.channels >= 2 {
            names.push("sam");
        }
        let mut acc = MetricReport::default();
        for &i in idx {
            let g = gt.sample(i);
            let j = pred
                .index_of(g.sample_id)
                .ok_or_else(|| Error::Dataset(format!("prediction lacks sample {}", g.sample_id)))?;
            let p = pred.sample(j);
            if (p.width, p.height, p.sensor_id) != (g.width, g.height, g.sensor_id) {
                return Err(Error::Dataset(format!("sample {} differs in size or sensor", g.sample_id)));
            }
            let gv: Vec<f64> = g.image.iter().map(|&x| x as f64).collect();
            let pv: Vec<f64> = p.image.iter().map(|&x| x as f64).collect();
            let lo = gv.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = gv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let r = MetricReport::compute(
                &names,
                &MetricInput::Images {
                    pred: &pv,
                    target: &gv,
                    channels: spec.channels,
                    width: g.width,
                    height: g.height,
                    max_val: if hi > lo { hi - lo } else { 1.0 },
                },
            )?;
            for (k, v) in r.values {
                *acc.values.entry(k).or_insert(0.0) += v / idx.len() as f64;
            }
        }
        rows.push((spec.name.clone(), acc));
    }
    Ok(rows)
}
