use std::collections::{BTreeMap, HashMap};

use super::SensorRegistry;
use crate::error::{Error, Result};

/// One image of one sensor. Values are in sensor units, channel-first and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub sensor_id: usize,
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    /// Colocated sample of the paired sensor.
    pub partner_sample_id: Option<u64>,
}

impl SampleRecord {
    pub fn channels(&self) -> usize {
        self.image.len() / (self.width * self.height).max(1)
    }
}

/// Samples of every registered sensor with a validated pairing graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    registry: SensorRegistry,
    samples: Vec<SampleRecord>,
    by_id: HashMap<u64, usize>,
    by_sensor: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(registry: SensorRegistry, samples: Vec<SampleRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(samples.len());
        let mut by_sensor = vec![Vec::new(); registry.len()];
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.sample_id, i).is_some() {
                return Err(Error::Dataset(format!("duplicate sample id {}", s.sample_id)));
            }
            let spec = registry
                .get(s.sensor_id)
                .ok_or_else(|| Error::Dataset(format!("sample {} has unknown sensor {}", s.sample_id, s.sensor_id)))?;
            if s.width == 0 || s.height == 0 || s.image.len() != spec.channels * s.width * s.height {
                return Err(Error::Dataset(format!(
                    "sample {} holds {} values; sensor {} expects {}x{}x{}",
                    s.sample_id,
                    s.image.len(),
                    s.sensor_id,
                    spec.channels,
                    s.width,
                    s.height
                )));
            }
            if s.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("sample {} has non-finite pixels", s.sample_id)));
            }
            by_sensor[s.sensor_id].push(i);
        }
        for s in &samples {
            let Some(pid) = s.partner_sample_id else { continue };
            let p = by_id
                .get(&pid)
                .map(|&i| &samples[i])
                .ok_or_else(|| Error::Dataset(format!("sample {} references missing partner {}", s.sample_id, pid)))?;
            if registry.partner(s.sensor_id) != Some(p.sensor_id) {
                return Err(Error::Dataset(format!(
                    "sample {} (sensor {}) partnered with sensor {}, which is not its registered pair",
                    s.sample_id, s.sensor_id, p.sensor_id
                )));
            }
            if p.width != s.width || p.height != s.height {
                return Err(Error::Dataset(format!("partners {} and {} differ in size", s.sample_id, pid)));
            }
            if p.partner_sample_id != Some(s.sample_id) {
                return Err(Error::Dataset(format!("partner link {} -> {} is not symmetric", s.sample_id, pid)));
            }
        }
        Ok(Dataset {
            registry,
            samples,
            by_id,
            by_sensor,
        })
    }

    pub fn registry(&self) -> &SensorRegistry {
        &self.registry
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &SampleRecord {
        &self.samples[index]
    }

    pub fn index_of(&self, sample_id: u64) -> Option<usize> {
        self.by_id.get(&sample_id).copied()
    }

    /// Sample indices of one sensor, in storage order.
    pub fn sensor_indices(&self, sensor_id: usize) -> &[usize] {
        &self.by_sensor[sensor_id]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.by_sensor.iter().map(Vec::len).collect()
    }

    pub fn partner_of(&self, index: usize) -> Option<usize> {
        self.samples[index].partner_sample_id.and_then(|id| self.index_of(id))
    }

    /// Image standardized with its sensor's norm stats.
    pub fn normalized(&self, index: usize) -> Vec<f32> {
        let s = &self.samples[index];
        let spec = self.registry.get(s.sensor_id).expect("validated sensor");
        let hw = s.width * s.height;
        s.image
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / hw;
                (v - spec.norm_mean[c]) / spec.norm_std[c]
            })
            .collect()
    }

    /// Number of samples that have a colocated partner.
    pub fn paired_count(&self) -> usize {
        self.samples.iter().filter(|s| s.partner_sample_id.is_some()).count()
    }

    /// Copy with every pairing (registry and sample links) removed.
    pub fn without_pairing(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.partner_sample_id = None;
                s
            })
            .collect();
        Dataset::new(self.registry.without_pairing(), samples).expect("unpairing keeps invariants")
    }

    /// Restrict to a subset of sensors, renumbered densely in the given order.
    pub fn select_sensors(&self, sensor_ids: &[usize]) -> Result<Dataset> {
        let mut specs = Vec::new();
        for (new_id, &old) in sensor_ids.iter().enumerate() {
            let mut spec = self
                .registry
                .get(old)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("unknown sensor {}", old)))?;
            spec.sensor_id = new_id;
            spec.paired_with = spec
                .paired_with
                .and_then(|p| sensor_ids.iter().position(|&x| x == p));
            specs.push(spec);
        }
        let registry = SensorRegistry::new(specs)?;
        let mut samples = Vec::new();
        for (new_id, &old) in sensor_ids.iter().enumerate() {
            for &i in self.sensor_indices(old) {
                let mut s = self.samples[i].clone();
                s.sensor_id = new_id;
                if registry.partner(new_id).is_none() {
                    s.partner_sample_id = None;
                }
                samples.push(s);
            }
        }
        Dataset::new(registry, samples)
    }
}

/// One round of per-sensor batches (sample indices into a [`Dataset`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MultisensorBatch {
    pub round_index: u64,
    pub per_sensor: BTreeMap<usize, Vec<usize>>,
}
