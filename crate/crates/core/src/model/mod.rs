//! Embedders, shared trunk and decoders.

pub mod config;
pub mod decoders;
pub mod embedder;
pub mod encoder;
pub mod moe;
pub mod params;

use rand::Rng;

pub use config::{EncoderConfig, ModelConfig, MoePlacement};
pub use decoders::{choose_targets, decode, reconstruction_loss, ReconstructionPlan};
pub use embedder::{stack_embedders_for_transfer, SensorEmbedder};
pub use encoder::{encode, ffn_registry, EncoderOutput, FeedForward};
pub use moe::{moe_forward, RoutingReport};
pub use params::{init, Binder, ParamStore};

use crate::error::Result;
use crate::numeric::Scalar;
use crate::sensors::SensorRegistry;

/// Embedding parameters for one sensor.
pub fn init_embedder<T: Scalar>(
    cfg: &ModelConfig,
    sensor_id: usize,
    channels: usize,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    let (d, p) = (cfg.embed_dim, cfg.patch_size);
    let prefix = embedder::embedder_prefix(sensor_id);
    store.insert(
        embedder::kernel_name(&prefix),
        init::xavier_uniform(&[d, channels, p, p], channels * p * p, d, rng),
    );
    store.insert(embedder::bias_name(&prefix), init::zeros(&[d]));
}

/// Decoder parameters for one sensor.
pub fn init_decoder<T: Scalar>(
    cfg: &ModelConfig,
    sensor_id: usize,
    channels: usize,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    let (d, p) = (cfg.embed_dim, cfg.patch_size);
    let out = p * p * channels;
    let prefix = decoders::decoder_prefix(sensor_id);
    store.insert(format!("{}.proj", prefix), init::xavier_uniform(&[out, d], d, out, rng));
    store.insert(format!("{}.bias", prefix), init::zeros(&[out]));
}

/// Fresh parameters for every sensor of `registry`, drawn from `rng` in a
/// fixed order.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, registry: &SensorRegistry, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for s in registry.iter() {
        init_embedder(cfg, s.sensor_id, s.channels, rng, &mut store);
    }
    store.insert(embedder::MASK_TOKEN, init::trunc_normal(&[cfg.embed_dim], cfg.init_std, rng));
    store.insert(
        embedder::POS_EMBED,
        init::trunc_normal(&[cfg.tokens(), cfg.embed_dim], cfg.init_std, rng),
    );
    encoder::init_encoder(cfg, rng, &mut store)?;
    for s in registry.iter() {
        init_decoder(cfg, s.sensor_id, s.channels, rng, &mut store);
    }
    Ok(store)
}
