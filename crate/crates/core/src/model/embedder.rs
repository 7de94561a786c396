//! Per-sensor patch embedding with mask-token substitution and shared
//! positional embeddings.

use super::params::{Binder, ParamStore};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

pub const MASK_TOKEN: &str = "shared.mask_token";
pub const POS_EMBED: &str = "shared.pos_embed";

pub fn kernel_name(prefix: &str) -> String {
    format!("{}.kernel", prefix)
}

pub fn bias_name(prefix: &str) -> String {
    format!("{}.bias", prefix)
}

pub fn embedder_prefix(sensor_id: usize) -> String {
    format!("embedder.{}", sensor_id)
}

/// Handle to one sensor's embedding parameters, sized from the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorEmbedder {
    pub sensor_id: usize,
    pub prefix: String,
    pub dim: usize,
    pub channels: usize,
    pub patch: usize,
}

impl SensorEmbedder {
    pub fn for_sensor<T: Scalar>(params: &ParamStore<T>, sensor_id: usize) -> Result<Self> {
        Self::with_prefix(params, &embedder_prefix(sensor_id), sensor_id)
    }

    pub fn with_prefix<T: Scalar>(params: &ParamStore<T>, prefix: &str, sensor_id: usize) -> Result<Self> {
        let k = params.get(&kernel_name(prefix))?.shape();
        if k.len() != 4 || k[2] != k[3] {
            return Err(Error::InvalidArgument(format!("{} has shape {:?}, not [D, C, P, P]", prefix, k)));
        }
        Ok(SensorEmbedder {
            sensor_id,
            prefix: prefix.to_string(),
            dim: k[0],
            channels: k[1],
            patch: k[2],
        })
    }

    /// Embed `images: [B, C, W, H]` from sensor `image_sensor` into
    /// `[B, L, D]` tokens. `token_mask` has `B·L` entries.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<T>,
        image_sensor: usize,
        images: Var,
        token_mask: &[bool],
    ) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.sensor_id,
                expected_channels: self.channels,
                got: image_sensor,
                got_channels: if s.len() == 4 { s[1] } else { 0 },
            });
        }
        let kernel = binder.var(tape, &kernel_name(&self.prefix))?;
        let bias = binder.var(tape, &bias_name(&self.prefix))?;
        let x = tape.conv_patch(images, kernel)?;
        let x = tape.add(x, bias)?;
        let x = if token_mask.iter().any(|&m| m) {
            let token = binder.var(tape, MASK_TOKEN)?;
            tape.replace_rows(x, token, token_mask)?
        } else if token_mask.len() * self.dim != tape.value(x).len() {
            return Err(Error::shape("embed mask", &s, &[token_mask.len()]));
        } else {
            x
        };
        let pos = binder.var(tape, POS_EMBED)?;
        tape.add(x, pos)
    }
}

/// Merge embedders into one over channel-stacked input: kernels are
/// concatenated along the input-channel axis and biases summed.
pub fn stack_embedders_for_transfer<T: Scalar>(parts: &[(&Tensor<T>, &Tensor<T>)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k0, b0) = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no embedders to stack".into()))?;
    let ks = k0.shape();
    if ks.len() != 4 {
        return Err(Error::shape("stack_embedders", ks, &[0, 0, 0, 0]));
    }
    let (d, p) = (ks[0], ks[2]);
    let mut channels = 0;
    for (k, b) in parts {
        let s = k.shape();
        if s.len() != 4 || s[0] != d || s[2] != p || s[3] != p || b.shape() != [d] {
            return Err(Error::shape("stack_embedders", ks, s));
        }
        channels += s[1];
    }
    let pp = p * p;
    let mut kernel = Vec::with_capacity(d * channels * pp);
    for o in 0..d {
        for (k, _) in parts {
            let c = k.shape()[1];
            kernel.extend_from_slice(&k.data()[o * c * pp..(o + 1) * c * pp]);
        }
    }
    let mut bias = b0.data().to_vec();
    for (_, b) in &parts[1..] {
        for (acc, &x) in bias.iter_mut().zip(b.data()) {
            *acc += x;
        }
    }
    Ok((Tensor::new(vec![d, channels, p, p], kernel)?, Tensor::new(vec![d], bias)?))
}
