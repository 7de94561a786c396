//! Per-sensor linear decoders and cross-sensor target selection.

use rand::Rng;

use super::params::Binder;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::sensors::{Dataset, MultisensorBatch};

pub fn decoder_prefix(sensor_id: usize) -> String {
    format!("decoder.{}", sensor_id)
}

/// Project `features: [B, L, D]` through sensor `target`'s decoder
/// (`proj: [P²·C, D]`) and fold the patches back to `[B, C, W, H]`.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    target: usize,
    channels: usize,
    width: usize,
    height: usize,
    patch: usize,
    features: Var,
) -> Result<Var> {
    let p = decoder_prefix(target);
    let proj = binder.var(tape, &format!("{}.proj", p))?;
    let bias = binder.var(tape, &format!("{}.bias", p))?;
    let ps = tape.shape(proj).to_vec();
    let fs = tape.shape(features).to_vec();
    if ps[0] != patch * patch * channels || fs.last() != Some(&ps[1]) {
        return Err(Error::shape("decode", &fs, &ps));
    }
    let pt = tape.transpose(proj)?;
    let y = tape.matmul(features, pt)?;
    let y = tape.add(y, bias)?;
    tape.fold(y, channels, width, height, patch)
}

/// Which decoder reconstructs which sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconstructionPlan {
    /// Dataset index of the masked input.
    pub source: usize,
    pub source_sensor: usize,
    /// Dataset index of the image to reconstruct: `source` itself or its partner.
    pub target: usize,
    pub target_sensor: usize,
}

impl ReconstructionPlan {
    pub fn is_cross(&self) -> bool {
        self.source != self.target
    }
}

/// One Bernoulli(`p_cross`) draw per paired sample, in sensor then batch
/// order; unpaired samples always reconstruct themselves.
pub fn choose_targets(
    dataset: &Dataset,
    batch: &MultisensorBatch,
    p_cross: f64,
    rng: &mut impl Rng,
) -> Result<Vec<ReconstructionPlan>> {
    if !(0.0..=1.0).contains(&p_cross) {
        return Err(Error::InvalidArgument(format!("p_cross {} outside [0, 1]", p_cross)));
    }
    let mut plans = Vec::new();
    for (&sensor, indices) in &batch.per_sensor {
        for &i in indices {
            let plan = match dataset.partner_of(i) {
                Some(j) if rng.gen::<f64>() < p_cross => ReconstructionPlan {
                    source: i,
                    source_sensor: sensor,
                    target: j,
                    target_sensor: dataset.sample(j).sensor_id,
                },
                _ => ReconstructionPlan {
                    source: i,
                    source_sensor: sensor,
                    target: i,
                    target_sensor: sensor,
                },
            };
            plans.push(plan);
        }
    }
    Ok(plans)
}

/// Mean absolute error over the masked pixels of every channel.
/// `pixel_mask` covers one `W×H` plane per sample and is shared by all channels.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, pixel_mask: &[bool]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != target.shape() || s.len() < 3 {
        return Err(Error::shape("reconstruction_loss", &s, target.shape()));
    }
    let n = s.len();
    let plane = s[n - 2] * s[n - 1];
    let samples = target.len() / (plane * s[n - 3]);
    if pixel_mask.len() != samples * plane {
        return Err(Error::shape("reconstruction_loss mask", &s, &[pixel_mask.len()]));
    }
    let weight: Vec<T> = (0..target.len())
        .map(|i| {
            let sample = i / (plane * s[n - 3]);
            if pixel_mask[sample * plane + i % plane] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    tape.l1_loss(pred, target, &Tensor::new(s, weight)?)
}
