//! One pretraining round over every sensor, and the loop around it.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use super::schedule::{lr_at, schedule_for, Sampler, SensorSchedule};
use crate::error::{Error, Result};
use crate::masking::{draw_mask, MaskPlan};
use crate::model::{
    choose_targets, decode, encode, init_model, reconstruction_loss, Binder, ModelConfig, ParamStore,
    ReconstructionPlan, RoutingReport, SensorEmbedder,
};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::sensors::{Dataset, MultisensorBatch};

/// Everything random about one round, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub batch: MultisensorBatch,
    /// One plan per batch entry, per sensor.
    pub masks: BTreeMap<usize, Vec<MaskPlan>>,
    pub targets: Vec<ReconstructionPlan>,
}

impl RoundPlan {
    pub fn cross_fraction(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().filter(|p| p.is_cross()).count() as f64 / self.targets.len() as f64
    }
}

/// Masks from `mask_rng` (sensor order, then batch order), then targets from
/// `routing_rng`.
pub fn draw_round(
    dataset: &Dataset,
    cfg: &ModelConfig,
    batch: MultisensorBatch,
    p_cross: f64,
    mask_rng: &mut ChaCha8Rng,
    routing_rng: &mut ChaCha8Rng,
) -> Result<RoundPlan> {
    let mut masks = BTreeMap::new();
    for (&sensor, indices) in &batch.per_sensor {
        let plans = indices
            .iter()
            .map(|_| draw_mask(cfg.width, cfg.height, cfg.mask_unit, cfg.mask_ratio, mask_rng))
            .collect::<Result<Vec<_>>>()?;
        masks.insert(sensor, plans);
    }
    let targets = choose_targets(dataset, &batch, p_cross, routing_rng)?;
    Ok(RoundPlan { batch, masks, targets })
}

/// Normalized images of `indices`, stacked to `[B, C, W, H]`.
pub fn stack_images<T: Scalar>(dataset: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
    let first = dataset.sample(*indices.first().ok_or_else(|| Error::Dataset("empty batch".into()))?);
    let c = dataset.registry().get(first.sensor_id).unwrap().channels;
    let mut data = Vec::with_capacity(indices.len() * first.image.len());
    for &i in indices {
        let s = dataset.sample(i);
        if (s.width, s.height) != (first.width, first.height) {
            return Err(Error::Dataset("mixed image sizes in one batch".into()));
        }
        data.extend(dataset.normalized(i).into_iter().map(|x| T::of(x as f64)));
    }
    Tensor::new(vec![indices.len(), c, first.width, first.height], data)
}

pub struct RoundLoss {
    pub total: Var,
    /// Reconstruction loss per source sensor.
    pub mim: BTreeMap<usize, Var>,
    pub aux: Option<Var>,
    /// `(sensor, block, report)` for every sparse block call.
    pub routing: Vec<(usize, usize, RoutingReport)>,
}

/// Reconstruction loss of one source sensor's batch, with its self and
/// cross targets weighted by their share of the batch.
pub fn sensor_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    sensor: usize,
    indices: &[usize],
    masks: &[MaskPlan],
    targets: &[ReconstructionPlan],
) -> Result<(Var, Option<Var>, Vec<(usize, RoutingReport)>)> {
    let reg = dataset.registry();
    let p = cfg.patch_size;
    let images = tape.constant(stack_images::<T>(dataset, indices)?);
    let mut token_mask = Vec::with_capacity(indices.len() * cfg.tokens());
    for m in masks {
        token_mask.extend(m.to_token_mask(p)?);
    }
    let embedder = SensorEmbedder::for_sensor(binder.params(), sensor)?;
    let tokens = embedder.embed(tape, binder, sensor, images, &token_mask)?;
    let enc = encode(tape, binder, cfg, tokens)?;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, plan) in targets.iter().enumerate() {
        groups.entry(plan.target_sensor).or_default().push(row);
    }
    let b = indices.len();
    let mut loss: Option<Var> = None;
    for (&target_sensor, rows) in &groups {
        let feats = if rows.len() == b {
            enc.features
        } else {
            tape.gather_rows(enc.features, rows)?
        };
        let channels = reg.get(target_sensor).unwrap().channels;
        let pred = decode(tape, binder, target_sensor, channels, cfg.width, cfg.height, p, feats)?;
        let target_idx: Vec<usize> = rows.iter().map(|&r| targets[r].target).collect();
        let target = stack_images::<T>(dataset, &target_idx)?;
        let mut pixel_mask = Vec::with_capacity(rows.len() * cfg.width * cfg.height);
        for &r in rows {
            pixel_mask.extend(masks[r].to_pixel_mask());
        }
        let l = reconstruction_loss(tape, pred, &target, &pixel_mask)?;
        let l = if rows.len() == b {
            l
        } else {
            tape.scale(l, T::of(rows.len() as f64 / b as f64))
        };
        loss = Some(match loss {
            Some(prev) => tape.add(prev, l)?,
            None => l,
        });
    }
    Ok((loss.unwrap(), enc.aux_loss, enc.reports))
}

/// `Σ_sensors L_mim + λ · Σ L_aux` for one round, sensors in id order.
pub fn round_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    plan: &RoundPlan,
) -> Result<RoundLoss> {
    let mut mim = BTreeMap::new();
    let mut aux: Option<Var> = None;
    let mut routing = Vec::new();
    let mut total: Option<Var> = None;
    let mut offset = 0;
    for (&sensor, indices) in &plan.batch.per_sensor {
        let targets = &plan.targets[offset..offset + indices.len()];
        offset += indices.len();
        let (l, a, reports) = sensor_loss(tape, binder, cfg, dataset, sensor, indices, &plan.masks[&sensor], targets)?;
        mim.insert(sensor, l);
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        if let Some(a) = a {
            aux = Some(match aux {
                Some(prev) => tape.add(prev, a)?,
                None => a,
            });
        }
        routing.extend(reports.into_iter().map(|(block, r)| (sensor, block, r)));
    }
    let mut total = total.ok_or_else(|| Error::Dataset("round without sensors".into()))?;
    if let Some(a) = aux {
        if cfg.encoder.aux_weight > 0.0 {
            let weighted = tape.scale(a, T::of(cfg.encoder.aux_weight));
            total = tape.add(total, weighted)?;
        }
    }
    Ok(RoundLoss {
        total,
        mim,
        aux,
        routing,
    })
}

/// Independent random streams of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    /// Seed of the stateless epoch sampler.
    pub data_seed: u64,
    pub mask: ChaCha8Rng,
    /// Cross-target draws.
    pub routing: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        RngStreams {
            data_seed: seed ^ 0xD1B5_4A32_D192_ED03,
            mask: stream(1),
            routing: stream(2),
            init: stream(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub rngs: RngStreams,
    /// Total loss of every completed round.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub sensor: String,
    pub block: usize,
    #[serde(flatten)]
    pub report: RoutingReport,
}

/// One metrics-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Reconstruction loss per sensor name.
    pub mim: BTreeMap<String, f64>,
    pub aux: Option<f64>,
    pub cross_fraction: f64,
    pub routing: Vec<RoutingRecord>,
}

pub struct Trainer {
    pub dataset: Dataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: Vec<SensorSchedule>,
    pub state: TrainState,
    sampler: Sampler,
}

impl Trainer {
    /// Fresh parameters from the run seed.
    pub fn new(dataset: Dataset, model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let mut rngs = RngStreams::new(train.seed);
        let params = init_model(&model, dataset.registry(), &mut rngs.init)?;
        let optimizer = AdamW::new(train.beta1, train.beta2, train.eps, train.weight_decay);
        let state = TrainState {
            step: 0,
            params,
            optimizer,
            rngs,
            history: Vec::new(),
        };
        Self::from_state(dataset, model, train, state)
    }

    pub fn from_state(dataset: Dataset, model: ModelConfig, train: TrainConfig, state: TrainState) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        if let Some(s) = dataset
            .samples()
            .iter()
            .find(|s| (s.width, s.height) != (model.width, model.height))
        {
            return Err(Error::Config(format!(
                "sample {} is {}x{}, model expects {}x{}",
                s.sample_id, s.width, s.height, model.width, model.height
            )));
        }
        let schedule = schedule_for(&dataset, &train)?;
        let sampler = Sampler::new(state.rngs.data_seed);
        Ok(Trainer {
            dataset,
            model,
            train,
            schedule,
            state,
            sampler,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.schedule[0].steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        let full = self.train.epochs * self.steps_per_epoch();
        self.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.train.base_lr * lr_at(step, self.steps_per_epoch(), &self.train)
    }

    pub fn batch(&self, round: usize) -> MultisensorBatch {
        self.sampler.batch(&self.dataset, &self.schedule, round)
    }

    /// Draw a round plan from a separate seed, leaving the run's streams alone.
    pub fn plan_with(&self, batch: MultisensorBatch, seed: u64, p_cross: f64) -> Result<RoundPlan> {
        let mut r = RngStreams::new(seed);
        draw_round(&self.dataset, &self.model, batch, p_cross, &mut r.mask, &mut r.routing)
    }

    /// Loss values of `plan` under the current parameters, without updating.
    pub fn evaluate(&self, plan: &RoundPlan) -> Result<(f64, BTreeMap<usize, f64>)> {
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(&self.state.params);
        let l = round_loss(&mut tape, &mut binder, &self.model, &self.dataset, plan)?;
        let mim = l.mim.iter().map(|(&s, &v)| (s, tape.value(v).item().f64())).collect();
        Ok((tape.value(l.total).item().f64(), mim))
    }

    /// One round: draw, forward, backward, one optimizer update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let lr = self.lr(step);
        let batch = self.batch(step);
        let rngs = &mut self.state.rngs;
        let plan = draw_round(
            &self.dataset,
            &self.model,
            batch,
            self.train.p_cross,
            &mut rngs.mask,
            &mut rngs.routing,
        )?;

        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::new(&self.state.params);
        let loss = round_loss(&mut tape, &mut binder, &self.model, &self.dataset, &plan)?;
        let reg = self.dataset.registry();
        let name = |s: usize| reg.get(s).unwrap().name.clone();
        let total = tape.value(loss.total).item().f64();
        let mim: BTreeMap<String, f64> = loss
            .mim
            .iter()
            .map(|(&s, &v)| (name(s), tape.value(v).item().f64()))
            .collect();
        let aux = loss.aux.map(|a| tape.value(a).item().f64());
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: total {}, reconstruction {:?}, balance {:?}, lr {}",
                step, total, mim, aux, lr
            )));
        }
        tape.backward(loss.total)?;
        let grads = binder.grads(&tape);
        drop(binder);
        let scales: BTreeMap<usize, f64> = self.schedule.iter().map(|s| (s.sensor_id, s.lr_scale)).collect();
        self.state
            .optimizer
            .step(&mut self.state.params, &grads, lr, |s| scales.get(&s).copied().unwrap_or(1.0))?;
        self.state.step += 1;
        self.state.history.push(total);
        Ok(StepMetrics {
            step,
            epoch: step / self.steps_per_epoch(),
            lr,
            loss: total,
            mim,
            aux,
            cross_fraction: plan.cross_fraction(),
            routing: loss
                .routing
                .into_iter()
                .map(|(s, block, report)| RoutingRecord {
                    sensor: name(s),
                    block,
                    report,
                })
                .collect(),
        })
    }
}
