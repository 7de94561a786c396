//! Shared pre-norm transformer trunk.

use rand::Rng;

use super::config::ModelConfig;
use super::moe::{moe_forward, mlp, ExpertVars, RoutingReport};
use super::params::{init, Binder, ParamStore};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Var, LN_EPS};
use crate::registry::Registry;

/// Output of one feed-forward sublayer.
pub struct FfnOutput {
    pub y: Var,
    pub aux_loss: Option<Var>,
    pub report: Option<RoutingReport>,
}

/// A feed-forward sublayer kind, selectable by name per block.
pub trait FeedForward<T: Scalar>: Send + Sync {
    fn init(&self, prefix: &str, cfg: &ModelConfig, rng: &mut dyn rand::RngCore, store: &mut ParamStore<T>);

    /// `x: [N, D]` → `[N, D]`.
    fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<T>,
        prefix: &str,
        cfg: &ModelConfig,
        x: Var,
    ) -> Result<FfnOutput>;
}

fn init_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore) {
    store.insert(
        format!("{}.weight", name),
        init::xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
    );
    store.insert(format!("{}.bias", name), init::zeros(&[fan_out]));
}

fn expert_vars<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, prefix: &str) -> Result<ExpertVars> {
    Ok(ExpertVars {
        fc1_w: binder.var(tape, &format!("{}.fc1.weight", prefix))?,
        fc1_b: binder.var(tape, &format!("{}.fc1.bias", prefix))?,
        fc2_w: binder.var(tape, &format!("{}.fc2.weight", prefix))?,
        fc2_b: binder.var(tape, &format!("{}.fc2.bias", prefix))?,
    })
}

fn init_mlp<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut dyn rand::RngCore) {
    let d = cfg.embed_dim;
    let h = d * cfg.encoder.mlp_ratio;
    init_linear(store, &format!("{}.fc1", prefix), d, h, rng);
    init_linear(store, &format!("{}.fc2", prefix), h, d, rng);
}

/// Two-layer GELU MLP.
pub struct DenseFfn;

impl<T: Scalar> FeedForward<T> for DenseFfn {
    fn init(&self, prefix: &str, cfg: &ModelConfig, rng: &mut dyn rand::RngCore, store: &mut ParamStore<T>) {
        init_mlp(store, &format!("{}.mlp", prefix), cfg, rng);
    }

    fn forward(&self, tape: &mut Tape<T>, binder: &mut Binder<T>, prefix: &str, _: &ModelConfig, x: Var) -> Result<FfnOutput> {
        let p = expert_vars(tape, binder, &format!("{}.mlp", prefix))?;
        Ok(FfnOutput {
            y: mlp(tape, x, &p)?,
            aux_loss: None,
            report: None,
        })
    }
}

/// Top-1 mixture of experts.
pub struct MoeFfn;

impl<T: Scalar> FeedForward<T> for MoeFfn {
    fn init(&self, prefix: &str, cfg: &ModelConfig, rng: &mut dyn rand::RngCore, store: &mut ParamStore<T>) {
        let e = cfg.encoder.num_experts;
        store.insert(
            format!("{}.gate.weight", prefix),
            init::trunc_normal(&[cfg.embed_dim, e], cfg.init_std, rng),
        );
        for k in 0..e {
            init_mlp(store, &format!("{}.expert{}", prefix, k), cfg, rng);
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<T>,
        prefix: &str,
        cfg: &ModelConfig,
        x: Var,
    ) -> Result<FfnOutput> {
        let gate = binder.var(tape, &format!("{}.gate.weight", prefix))?;
        let experts = (0..cfg.encoder.num_experts)
            .map(|k| expert_vars(tape, binder, &format!("{}.expert{}", prefix, k)))
            .collect::<Result<Vec<_>>>()?;
        let out = moe_forward(tape, x, gate, &experts, cfg.encoder.capacity_factor)?;
        Ok(FfnOutput {
            y: out.y,
            aux_loss: Some(out.aux_loss),
            report: Some(out.report),
        })
    }
}

/// Built-in feed-forward kinds: `dense` and `moe`.
pub fn ffn_registry<T: Scalar>() -> Registry<Box<dyn FeedForward<T>>> {
    Registry::new("feed-forward")
        .with("dense", Box::new(DenseFfn) as Box<dyn FeedForward<T>>)
        .with("moe", Box::new(MoeFfn))
}

pub fn block_prefix(k: usize) -> String {
    format!("encoder.block{}", k)
}

/// Add the trunk's parameters to `store`.
pub fn init_encoder<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore<T>) -> Result<()> {
    let ffns = ffn_registry::<T>();
    let d = cfg.embed_dim;
    for k in 0..cfg.encoder.depth {
        let p = block_prefix(k);
        for n in ["norm1", "norm2"] {
            store.insert(format!("{}.{}.gamma", p, n), init::ones(&[d]));
            store.insert(format!("{}.{}.beta", p, n), init::zeros(&[d]));
        }
        for n in ["q", "k", "v", "proj"] {
            init_linear(store, &format!("{}.attn.{}", p, n), d, d, rng);
        }
        ffns.get(cfg.encoder.ffn_kind(k))?.init(&p, cfg, rng, store);
    }
    Ok(())
}

fn linear<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, name: &str, x: Var) -> Result<Var> {
    let w = binder.var(tape, &format!("{}.weight", name))?;
    let b = binder.var(tape, &format!("{}.bias", name))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, name: &str, x: Var) -> Result<Var> {
    let g = binder.var(tape, &format!("{}.gamma", name))?;
    let b = binder.var(tape, &format!("{}.beta", name))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Multi-head self-attention over `x: [B, L, D]`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut split = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let y = linear(tape, binder, &format!("{}.{}", prefix, name), x)?;
        let y = tape.reshape(y, &[b, l, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = tape.softmax(scores)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, l, d])?;
    linear(tape, binder, &format!("{}.proj", prefix), o)
}

pub struct EncoderOutput {
    /// Same shape as the input tokens.
    pub features: Var,
    /// Sum of the balance losses of all sparse blocks, if any.
    pub aux_loss: Option<Var>,
    /// Routing summary per sparse block, as `(block, report)`.
    pub reports: Vec<(usize, RoutingReport)>,
}

/// Run the trunk over `[L, D]` or `[B, L, D]` tokens. Sparse blocks route
/// all `B·L` tokens of the call together.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, cfg: &ModelConfig, tokens: Var) -> Result<EncoderOutput> {
    let shape = tape.shape(tokens).to_vec();
    let d = cfg.embed_dim;
    if shape.len() < 2 || shape.len() > 3 || shape[shape.len() - 1] != d {
        return Err(Error::shape("encode", &shape, &[d]));
    }
    let mut x = if shape.len() == 2 {
        tape.reshape(tokens, &[1, shape[0], d])?
    } else {
        tokens
    };
    let (b, l) = (tape.shape(x)[0], tape.shape(x)[1]);
    let ffns = ffn_registry::<T>();
    let mut aux: Option<Var> = None;
    let mut reports = Vec::new();
    for k in 0..cfg.encoder.depth {
        let p = block_prefix(k);
        let h = norm(tape, binder, &format!("{}.norm1", p), x)?;
        let h = attention(tape, binder, &format!("{}.attn", p), cfg.encoder.heads, h)?;
        x = tape.add(x, h)?;
        let h = norm(tape, binder, &format!("{}.norm2", p), x)?;
        let h = tape.reshape(h, &[b * l, d])?;
        let out = ffns.get(cfg.encoder.ffn_kind(k))?.forward(tape, binder, &p, cfg, h)?;
        let y = tape.reshape(out.y, &[b, l, d])?;
        x = tape.add(x, y)?;
        if let Some(a) = out.aux_loss {
            aux = Some(match aux {
                Some(prev) => tape.add(prev, a)?,
                None => a,
            });
        }
        if let Some(r) = out.report {
            reports.push((k, r));
        }
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite(format!("activations after encoder block {}", k)));
        }
    }
    let features = if shape.len() == 2 { tape.reshape(x, &shape)? } else { x };
    Ok(EncoderOutput {
        features,
        aux_loss: aux,
        reports,
    })
}
