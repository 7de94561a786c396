//! Heterogeneous per-sensor batch sizes, epoch sampling and the lr curve.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::sensors::{Dataset, MultisensorBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSchedule {
    pub sensor_id: usize,
    pub samples: usize,
    pub batch_size: usize,
    /// Multiplier on the base lr for this sensor's own parameters.
    pub lr_scale: f64,
    pub steps_per_epoch: usize,
}

/// Batch sizes proportional to dataset size, with the largest sensor at
/// `base_batch`, and a common number of rounds per epoch.
pub fn make_schedule(sizes: &[(usize, usize)], base_batch: usize) -> Result<Vec<SensorSchedule>> {
    if base_batch == 0 {
        return Err(Error::InvalidArgument("base batch must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Dataset("no sensors to schedule".into()));
    }
    if let Some((sid, _)) = sizes.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Dataset(format!("sensor {} has no samples", sid)));
    }
    let n_max = sizes.iter().map(|&(_, n)| n).max().unwrap();
    let steps = n_max.div_ceil(base_batch);
    Ok(sizes
        .iter()
        .map(|&(sensor_id, n)| {
            let b = ((base_batch as f64 * n as f64 / n_max as f64).round() as usize).max(1);
            SensorSchedule {
                sensor_id,
                samples: n,
                batch_size: b,
                lr_scale: b as f64 / base_batch as f64,
                steps_per_epoch: steps,
            }
        })
        .collect())
}

/// [`make_schedule`] over a dataset, with per-sensor overrides applied.
pub fn schedule_for(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<SensorSchedule>> {
    let reg = dataset.registry();
    for name in cfg.batch_overrides.keys().chain(cfg.lr_overrides.keys()) {
        if reg.by_name(name).is_none() {
            return Err(Error::Config(format!("override for unknown sensor `{}`", name)));
        }
    }
    let sizes: Vec<(usize, usize)> = reg
        .iter()
        .map(|s| (s.sensor_id, dataset.sensor_indices(s.sensor_id).len()))
        .collect();
    let mut sched = make_schedule(&sizes, cfg.base_batch)?;
    for s in &mut sched {
        let name = &reg.get(s.sensor_id).unwrap().name;
        if let Some(&b) = cfg.batch_overrides.get(name) {
            s.batch_size = b;
            s.lr_scale = b as f64 / cfg.base_batch as f64;
        }
        if let Some(&f) = cfg.lr_overrides.get(name) {
            s.lr_scale = f;
        }
    }
    Ok(sched)
}

/// Learning-rate multiplier: linear warmup from `warmup_lr / base_lr` to 1,
/// then `gamma` per milestone epoch reached.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if step < warmup {
        let floor = cfg.warmup_lr / cfg.base_lr;
        return floor + (1.0 - floor) * step as f64 / warmup as f64;
    }
    let epoch = step / steps_per_epoch.max(1);
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.gamma.powi(passed as i32)
}

/// Stateless epoch sampler: round `r` of sensor `s` takes elements
/// `r·b_s .. (r+1)·b_s` of an endless stream that visits every sample once
/// per cycle in a fresh random order. Any round can be rebuilt from the seed.
pub struct Sampler {
    seed: u64,
    cache: RefCell<HashMap<(usize, usize), std::rc::Rc<Vec<usize>>>>,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler {
            seed,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn permutation(&self, sensor: usize, cycle: usize, n: usize) -> std::rc::Rc<Vec<usize>> {
        let mut cache = self.cache.borrow_mut();
        if let Some(p) = cache.get(&(sensor, cycle)) {
            return p.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((sensor as u64) << 40) | cycle as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let perm = std::rc::Rc::new(perm);
        cache.retain(|&(s, c), _| s != sensor || c + 1 >= cycle);
        cache.insert((sensor, cycle), perm.clone());
        perm
    }

    /// Dataset indices for sensor `schedule.sensor_id` in round `round`.
    pub fn sensor_round(&self, dataset: &Dataset, schedule: &SensorSchedule, round: usize) -> Vec<usize> {
        let pool = dataset.sensor_indices(schedule.sensor_id);
        let n = pool.len();
        let b = schedule.batch_size;
        (round * b..(round + 1) * b)
            .map(|k| pool[self.permutation(schedule.sensor_id, k / n, n)[k % n]])
            .collect()
    }

    pub fn batch(&self, dataset: &Dataset, schedule: &[SensorSchedule], round: usize) -> MultisensorBatch {
        MultisensorBatch {
            round_index: round as u64,
            per_sensor: schedule
                .iter()
                .map(|s| (s.sensor_id, self.sensor_round(dataset, s, round)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sensor_schedule() {
        let s = make_schedule(&[(0, 1000)], 128).unwrap();
        assert_eq!((s[0].batch_size, s[0].lr_scale, s[0].steps_per_epoch), (128, 1.0, 8));
    }

    #[test]
    fn warmup_and_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 5, &cfg), 5e-7 / 1e-4);
        assert_eq!(lr_at(50, 5, &cfg), 1.0);
        assert_eq!(lr_at(700 * 5 - 1, 5, &cfg), 1.0);
        assert!((lr_at(700 * 5, 5, &cfg) - 0.1).abs() < 1e-15);
    }
}
