use crate::error::{Error, Result};
use crate::model::embedder::{bias_name, embedder_prefix, kernel_name};
use crate::model::{encode, stack_embedders_for_transfer, Binder, ModelConfig, ParamStore, SensorEmbedder};
use crate::numeric::{Tape, Tensor, Var};
use crate::registry::Registry;
use crate::sensors::SensorSpec;

pub const STACKED_PREFIX: &str = "embedder.stacked";

/// How multisensor inputs reach the shared trunk during fine-tuning.
pub trait TransferMode: Send + Sync {
    /// Add mode-specific parameters derived from the pretrained ones.
    fn prepare(&self, params: &mut ParamStore<f32>, sensors: &[SensorSpec]) -> Result<()>;

    fn head_input_width(&self, dim: usize, sensors: usize) -> usize;

    /// Token features `[B, L, head_input_width]`, no masking.
    fn features(
        &self,
        tape: &mut Tape<f32>,
        binder: &mut Binder<f32>,
        cfg: &ModelConfig,
        sensors: &[SensorSpec],
        images: &[Tensor<f32>],
    ) -> Result<Var>;
}

fn check_inputs(sensors: &[SensorSpec], images: &[Tensor<f32>]) -> Result<usize> {
    if images.len() != sensors.len() {
        return Err(Error::InvalidArgument(format!(
            "task expects {} sensors, got {} inputs",
            sensors.len(),
            images.len()
        )));
    }
    let b = images[0].shape()[0];
    for (s, img) in sensors.iter().zip(images) {
        let sh = img.shape();
        if sh.len() != 4 || sh[1] != s.channels || sh[0] != b || sh[2..] != images[0].shape()[2..] {
            return Err(Error::InvalidArgument(format!(
                "input for sensor `{}` has shape {:?}",
                s.name, sh
            )));
        }
    }
    Ok(b)
}

/// Each sensor through the shared encoder; features concatenated.
pub struct ConcatMode;

impl TransferMode for ConcatMode {
    fn prepare(&self, params: &mut ParamStore<f32>, sensors: &[SensorSpec]) -> Result<()> {
        for s in sensors {
            if !params.contains(&kernel_name(&embedder_prefix(s.sensor_id))) {
                return Err(Error::Incompatible(format!("no embedder for sensor `{}`", s.name)));
            }
        }
        Ok(())
    }

    fn head_input_width(&self, dim: usize, sensors: usize) -> usize {
        dim * sensors
    }

    fn features(
        &self,
        tape: &mut Tape<f32>,
        binder: &mut Binder<f32>,
        cfg: &ModelConfig,
        sensors: &[SensorSpec],
        images: &[Tensor<f32>],
    ) -> Result<Var> {
        let b = check_inputs(sensors, images)?;
        let mut parts = Vec::with_capacity(sensors.len());
        for (s, img) in sensors.iter().zip(images) {
            let emb = SensorEmbedder::for_sensor(binder.params(), s.sensor_id)?;
            let x = tape.constant(img.clone());
            let tokens = emb.embed(tape, binder, s.sensor_id, x, &vec![false; b * cfg.tokens()])?;
            parts.push(encode(tape, binder, cfg, tokens)?.features);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_last(&parts)
        }
    }
}

/// Channels stacked before one embedder built from the per-sensor kernels.
pub struct StackMode;

impl TransferMode for StackMode {
    fn prepare(&self, params: &mut ParamStore<f32>, sensors: &[SensorSpec]) -> Result<()> {
        if params.contains(&kernel_name(STACKED_PREFIX)) {
            return Ok(());
        }
        let mut parts = Vec::with_capacity(sensors.len());
        for s in sensors {
            let p = embedder_prefix(s.sensor_id);
            let k = params
                .get(&kernel_name(&p))
                .map_err(|_| Error::Incompatible(format!("no embedder for sensor `{}`", s.name)))?;
            parts.push((k, params.get(&bias_name(&p))?));
        }
        let (k, b) = stack_embedders_for_transfer(&parts)?;
        params.insert(kernel_name(STACKED_PREFIX), k);
        params.insert(bias_name(STACKED_PREFIX), b);
        Ok(())
    }

    fn head_input_width(&self, dim: usize, _: usize) -> usize {
        dim
    }

    fn features(
        &self,
        tape: &mut Tape<f32>,
        binder: &mut Binder<f32>,
        cfg: &ModelConfig,
        sensors: &[SensorSpec],
        images: &[Tensor<f32>],
    ) -> Result<Var> {
        let b = check_inputs(sensors, images)?;
        let (w, h) = (images[0].shape()[2], images[0].shape()[3]);
        let channels: usize = sensors.iter().map(|s| s.channels).sum();
        let mut data = Vec::with_capacity(b * channels * w * h);
        for i in 0..b {
            for (s, img) in sensors.iter().zip(images) {
                let n = s.channels * w * h;
                data.extend_from_slice(&img.data()[i * n..(i + 1) * n]);
            }
        }
        let x = tape.constant(Tensor::new(vec![b, channels, w, h], data)?);
        let emb = SensorEmbedder::with_prefix(binder.params(), STACKED_PREFIX, sensors[0].sensor_id)?;
        let tokens = emb.embed(tape, binder, sensors[0].sensor_id, x, &vec![false; b * cfg.tokens()])?;
        Ok(encode(tape, binder, cfg, tokens)?.features)
    }
}

pub fn mode_registry() -> Registry<Box<dyn TransferMode>> {
    Registry::new("transfer mode")
        .with("concat", Box::new(ConcatMode) as Box<dyn TransferMode>)
        .with("stack", Box::new(StackMode))
}
