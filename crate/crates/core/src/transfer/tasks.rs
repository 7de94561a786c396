//! Synthetic downstream tasks derived from a (synthetic) dataset.

use rand::Rng;

use super::heads::TaskTargets;
use super::TransferConfig;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::sensors::{Dataset, SensorSpec};
use crate::training::step::stack_images;

/// Inputs and labels of a downstream task. Sample `k` uses dataset index
/// `inputs[k][j]` for task sensor `j`.
pub struct Task {
    pub dataset: Dataset,
    pub sensors: Vec<SensorSpec>,
    pub inputs: Vec<Vec<usize>>,
    pub head: String,
    pub outputs: usize,
    /// First 75% of samples.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    thresholds: Vec<f32>,
}

/// Build the task for `cfg.head` over `cfg.sensors`.
///
/// * `multilabel`: label `k` is set when the first sensor's channel 0 has a
///   positive mean over the `k`-th horizontal strip.
/// * `dense_regression`: predict the partner image of the first sensor.
/// * `dense_classification`: per-pixel quantile bin of the first sensor's channel 0.
pub fn make_task(dataset: &Dataset, cfg: &TransferConfig) -> Result<Task> {
    cfg.validate()?;
    let reg = dataset.registry();
    let sensors: Vec<SensorSpec> = cfg
        .sensors
        .iter()
        .map(|n| {
            reg.by_name(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown task sensor `{}`", n)))
        })
        .collect::<Result<_>>()?;
    if sensors.len() > 2 || (sensors.len() == 2 && reg.partner(sensors[0].sensor_id) != Some(sensors[1].sensor_id)) {
        return Err(Error::Config("multisensor tasks need exactly one colocated pair".into()));
    }
    let first = sensors[0].sensor_id;
    let mut inputs = Vec::new();
    for &i in dataset.sensor_indices(first) {
        if sensors.len() == 2 || cfg.head == "dense_regression" {
            let Some(j) = dataset.partner_of(i) else { continue };
            inputs.push(if sensors.len() == 2 { vec![i, j] } else { vec![i] });
        } else {
            inputs.push(vec![i]);
        }
    }
    if inputs.len() < 2 {
        return Err(Error::Dataset(format!("task needs at least 2 samples, found {}", inputs.len())));
    }
    if cfg.head == "dense_regression" {
        let partner = reg
            .partner(first)
            .ok_or_else(|| Error::Config(format!("sensor `{}` has no partner to regress", sensors[0].name)))?;
        let c = reg.get(partner).unwrap().channels;
        if c != cfg.outputs {
            return Err(Error::Config(format!("regression target has {} channels, outputs = {}", c, cfg.outputs)));
        }
    }
    if cfg.head == "multilabel" && cfg.outputs > dataset.sample(inputs[0][0]).width {
        return Err(Error::Config("more labels than image rows".into()));
    }
    let mut thresholds = Vec::new();
    if cfg.head == "dense_classification" {
        let mut values: Vec<f32> = inputs
            .iter()
            .flat_map(|v| {
                let s = dataset.sample(v[0]);
                let plane = s.width * s.height;
                dataset.normalized(v[0])[..plane].to_vec()
            })
            .collect();
        values.sort_by(f32::total_cmp);
        thresholds = (1..cfg.outputs).map(|j| values[j * values.len() / cfg.outputs]).collect();
    }
    let split = (inputs.len() * 3 / 4).max(1);
    let all: Vec<usize> = (0..inputs.len()).collect();
    Ok(Task {
        dataset: dataset.clone(),
        sensors,
        train: all[..split].to_vec(),
        test: all[split..].to_vec(),
        inputs,
        head: cfg.head.clone(),
        outputs: cfg.outputs,
        thresholds,
    })
}

impl Task {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Distinct training samples (all of them if `b` exceeds the split).
    pub fn sample_batch(&self, b: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.train.len();
        rand::seq::index::sample(rng, n, b.min(n))
            .iter()
            .map(|i| self.train[i])
            .collect()
    }

    pub fn batch(&self, samples: &[usize]) -> Result<(Vec<Tensor<f32>>, TaskTargets)> {
        let images = (0..self.sensors.len())
            .map(|j| {
                let idx: Vec<usize> = samples.iter().map(|&k| self.inputs[k][j]).collect();
                stack_images::<f32>(&self.dataset, &idx)
            })
            .collect::<Result<Vec<_>>>()?;
        let first: Vec<usize> = samples.iter().map(|&k| self.inputs[k][0]).collect();
        let targets = match self.head.as_str() {
            "multilabel" => {
                let mut labels = Vec::with_capacity(samples.len() * self.outputs);
                for &i in &first {
                    let s = self.dataset.sample(i);
                    let img = self.dataset.normalized(i);
                    let rows = s.width / self.outputs;
                    for k in 0..self.outputs {
                        let strip = &img[k * rows * s.height..(k + 1) * rows * s.height];
                        labels.push(if strip.iter().sum::<f32>() > 0.0 { 1.0 } else { 0.0 });
                    }
                }
                TaskTargets::MultiLabel(Tensor::new(vec![samples.len(), self.outputs], labels)?)
            }
            "dense_regression" => {
                let partners: Vec<usize> = first
                    .iter()
                    .map(|&i| self.dataset.partner_of(i).expect("checked when the task was built"))
                    .collect();
                TaskTargets::Regression(stack_images::<f32>(&self.dataset, &partners)?)
            }
            _ => {
                let mut classes = Vec::new();
                for &i in &first {
                    let s = self.dataset.sample(i);
                    let img = self.dataset.normalized(i);
                    classes.extend(
                        img[..s.width * s.height]
                            .iter()
                            .map(|&x| self.thresholds.iter().filter(|&&t| x >= t).count()),
                    );
                }
                TaskTargets::Classes(classes)
            }
        };
        Ok((images, targets))
    }
}
