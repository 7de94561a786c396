use rand::RngCore;

use crate::error::{Error, Result};
use crate::metrics::{MetricInput, MetricReport};
use crate::model::{init, Binder, ModelConfig, ParamStore};
use crate::numeric::{Tape, Tensor, Var};
use crate::registry::Registry;

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTargets {
    /// `[B, K]` 0/1 labels.
    MultiLabel(Tensor<f32>),
    /// `[B, K, W, H]` images.
    Regression(Tensor<f32>),
    /// `B·W·H` class indices, image-major.
    Classes(Vec<usize>),
}

pub trait TaskHead: Send + Sync {
    fn init(&self, in_width: usize, outputs: usize, patch: usize, rng: &mut dyn RngCore, store: &mut ParamStore<f32>);

    /// `features: [B, L, in_width]`.
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        binder: &mut Binder<f32>,
        cfg: &ModelConfig,
        outputs: usize,
        features: Var,
    ) -> Result<Var>;

    fn loss(&self, tape: &mut Tape<f32>, out: Var, targets: &TaskTargets) -> Result<Var>;

    fn evaluate(&self, out: &Tensor<f32>, targets: &TaskTargets) -> Result<MetricReport>;
}

fn init_linear(store: &mut ParamStore<f32>, fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) {
    store.insert("head.weight", init::xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng));
    store.insert("head.bias", init::zeros(&[fan_out]));
}

fn linear(tape: &mut Tape<f32>, binder: &mut Binder<f32>, x: Var) -> Result<Var> {
    let w = binder.var(tape, "head.weight")?;
    let b = binder.var(tape, "head.bias")?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn wrong_targets() -> Error {
    Error::InvalidArgument("targets do not match the task head".into())
}

/// Mean-pooled tokens, one linear layer, per-label sigmoid.
pub struct MultiLabelHead;

impl TaskHead for MultiLabelHead {
    fn init(&self, in_width: usize, outputs: usize, _: usize, rng: &mut dyn RngCore, store: &mut ParamStore<f32>) {
        init_linear(store, in_width, outputs, rng);
    }

    fn forward(&self, tape: &mut Tape<f32>, binder: &mut Binder<f32>, _: &ModelConfig, _: usize, features: Var) -> Result<Var> {
        let pooled = tape.mean_axis(features, 1)?;
        linear(tape, binder, pooled)
    }

    fn loss(&self, tape: &mut Tape<f32>, out: Var, targets: &TaskTargets) -> Result<Var> {
        match targets {
            TaskTargets::MultiLabel(t) => tape.bce_with_logits(out, t),
            _ => Err(wrong_targets()),
        }
    }

    fn evaluate(&self, out: &Tensor<f32>, targets: &TaskTargets) -> Result<MetricReport> {
        let TaskTargets::MultiLabel(t) = targets else {
            return Err(wrong_targets());
        };
        let scores: Vec<f64> = out.data().iter().map(|&x| x as f64).collect();
        let labels: Vec<bool> = t.data().iter().map(|&x| x > 0.5).collect();
        MetricReport::compute(
            &["map"],
            &MetricInput::Scores {
                scores: &scores,
                labels: &labels,
                classes: out.shape()[1],
            },
        )
    }
}

/// Per-token projection to `P²·K` values, folded back to `[B, K, W, H]`.
fn dense_forward(
    tape: &mut Tape<f32>,
    binder: &mut Binder<f32>,
    cfg: &ModelConfig,
    outputs: usize,
    features: Var,
) -> Result<Var> {
    let y = linear(tape, binder, features)?;
    tape.fold(y, outputs, cfg.width, cfg.height, cfg.patch_size)
}

pub struct DenseRegressionHead;

impl TaskHead for DenseRegressionHead {
    fn init(&self, in_width: usize, outputs: usize, patch: usize, rng: &mut dyn RngCore, store: &mut ParamStore<f32>) {
        init_linear(store, in_width, patch * patch * outputs, rng);
    }

    fn forward(&self, tape: &mut Tape<f32>, binder: &mut Binder<f32>, cfg: &ModelConfig, outputs: usize, features: Var) -> Result<Var> {
        dense_forward(tape, binder, cfg, outputs, features)
    }

    fn loss(&self, tape: &mut Tape<f32>, out: Var, targets: &TaskTargets) -> Result<Var> {
        match targets {
            TaskTargets::Regression(t) => tape.l1_loss(out, t, &Tensor::full(t.shape(), 1.0)),
            _ => Err(wrong_targets()),
        }
    }

    /// Metrics averaged over the images of the batch. The dynamic range of
    /// PSNR/SSIM is the target's value range.
    fn evaluate(&self, out: &Tensor<f32>, targets: &TaskTargets) -> Result<MetricReport> {
        let TaskTargets::Regression(t) = targets else {
            return Err(wrong_targets());
        };
        let s = out.shape();
        let (b, c, w, h) = (s[0], s[1], s[2], s[3]);
        let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let max_val = if hi > lo { hi - lo } else { 1.0 };
        let mut names = vec!["mae", "psnr", "ssim"];
        if c >= 2 {
            names.push("sam");
        }
        let n = c * w * h;
        let mut acc = MetricReport::default();
        for i in 0..b {
            let p: Vec<f64> = out.data()[i * n..(i + 1) * n].iter().map(|&x| x as f64).collect();
            let g: Vec<f64> = t.data()[i * n..(i + 1) * n].iter().map(|&x| x as f64).collect();
            let r = MetricReport::compute(
                &names,
                &MetricInput::Images {
                    pred: &p,
                    target: &g,
                    channels: c,
                    width: w,
                    height: h,
                    max_val,
                },
            )?;
            for (k, v) in r.values {
                *acc.values.entry(k).or_insert(0.0) += v / b as f64;
            }
        }
        Ok(acc)
    }
}

pub struct DenseClassificationHead;

impl TaskHead for DenseClassificationHead {
    fn init(&self, in_width: usize, outputs: usize, patch: usize, rng: &mut dyn RngCore, store: &mut ParamStore<f32>) {
        init_linear(store, in_width, patch * patch * outputs, rng);
    }

    fn forward(&self, tape: &mut Tape<f32>, binder: &mut Binder<f32>, cfg: &ModelConfig, outputs: usize, features: Var) -> Result<Var> {
        dense_forward(tape, binder, cfg, outputs, features)
    }

    fn loss(&self, tape: &mut Tape<f32>, out: Var, targets: &TaskTargets) -> Result<Var> {
        let TaskTargets::Classes(labels) = targets else {
            return Err(wrong_targets());
        };
        let s = tape.shape(out).to_vec();
        let logits = tape.permute(out, &[0, 2, 3, 1])?;
        let logits = tape.reshape(logits, &[s[0] * s[2] * s[3], s[1]])?;
        tape.cross_entropy(logits, labels)
    }

    fn evaluate(&self, out: &Tensor<f32>, targets: &TaskTargets) -> Result<MetricReport> {
        let TaskTargets::Classes(gt) = targets else {
            return Err(wrong_targets());
        };
        let s = out.shape();
        let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
        let d = out.data();
        let mut pred = Vec::with_capacity(b * plane);
        for i in 0..b {
            for p in 0..plane {
                let best = (0..k)
                    .max_by(|&x, &y| d[(i * k + x) * plane + p].total_cmp(&d[(i * k + y) * plane + p]).then(y.cmp(&x)))
                    .unwrap();
                pred.push(best);
            }
        }
        MetricReport::compute(
            &["miou"],
            &MetricInput::Classes {
                pred: &pred,
                gt,
                classes: k,
            },
        )
    }
}

pub fn head_registry() -> Registry<Box<dyn TaskHead>> {
    Registry::new("task head")
        .with("multilabel", Box::new(MultiLabelHead) as Box<dyn TaskHead>)
        .with("dense_regression", Box::new(DenseRegressionHead))
        .with("dense_classification", Box::new(DenseClassificationHead))
}
