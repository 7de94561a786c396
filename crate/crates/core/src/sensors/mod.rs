//! Sensor registry, datasets and the synthetic multisensor generator.

mod dataset;
mod manifest;
mod synthetic;

pub use dataset::{Dataset, MultisensorBatch, SampleRecord};
pub use manifest::{load_manifest, save_manifest, MANIFEST_FILE, MANIFEST_HEADER};
pub use synthetic::{gen_synthetic, smooth_field, PairTransform, SyntheticConfig};

use crate::error::{Error, Result};

/// One sensor modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub sensor_id: usize,
    pub name: String,
    pub channels: usize,
    pub paired_with: Option<usize>,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl SensorSpec {
    /// A sensor with zero-mean unit-std statistics.
    pub fn new(sensor_id: usize, name: &str, channels: usize) -> Self {
        SensorSpec {
            sensor_id,
            name: name.to_string(),
            channels,
            paired_with: None,
            norm_mean: vec![0.0; channels],
            norm_std: vec![1.0; channels],
        }
    }

    pub fn paired(mut self, other: usize) -> Self {
        self.paired_with = Some(other);
        self
    }

    pub fn with_stats(mut self, mean: Vec<f32>, std: Vec<f32>) -> Self {
        self.norm_mean = mean;
        self.norm_std = std;
        self
    }
}

/// Immutable, validated set of sensors, ordered by `sensor_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRegistry {
    specs: Vec<SensorSpec>,
}

/// Validate specs and build a registry.
pub fn register_sensors(specs: Vec<SensorSpec>) -> Result<SensorRegistry> {
    SensorRegistry::new(specs)
}

impl SensorRegistry {
    pub fn new(mut specs: Vec<SensorSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Registry("no sensors".into()));
        }
        specs.sort_by_key(|s| s.sensor_id);
        for (i, s) in specs.iter().enumerate() {
            if i > 0 && specs[i - 1].sensor_id == s.sensor_id {
                return Err(Error::Registry(format!("duplicate sensor id {}", s.sensor_id)));
            }
            if s.sensor_id != i {
                return Err(Error::Registry(format!(
                    "sensor ids must be dense 0..{}; found {}",
                    specs.len(),
                    s.sensor_id
                )));
            }
            if s.channels == 0 {
                return Err(Error::Registry(format!("sensor {} has zero channels", s.sensor_id)));
            }
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Registry(format!("sensor name `{}` must be [A-Za-z0-9_-]+", s.name)));
            }
            if s.norm_mean.len() != s.channels || s.norm_std.len() != s.channels {
                return Err(Error::Registry(format!(
                    "sensor {} needs {} norm stats per vector",
                    s.sensor_id, s.channels
                )));
            }
            if s.norm_std.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || s.norm_mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Registry(format!("sensor {} has invalid norm stats", s.sensor_id)));
            }
        }
        for s in &specs {
            if let Some(p) = s.paired_with {
                if p == s.sensor_id {
                    return Err(Error::Registry(format!("sensor {} paired with itself", p)));
                }
                let other = specs
                    .get(p)
                    .ok_or_else(|| Error::Registry(format!("sensor {} paired with unknown {}", s.sensor_id, p)))?;
                if other.paired_with != Some(s.sensor_id) {
                    return Err(Error::Registry(format!(
                        "pairing {} -> {} is not symmetric",
                        s.sensor_id, p
                    )));
                }
            }
        }
        if specs.iter().map(|s| &s.name).collect::<std::collections::HashSet<_>>().len() != specs.len() {
            return Err(Error::Registry("sensor names must be unique".into()));
        }
        Ok(SensorRegistry { specs })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&SensorSpec> {
        self.specs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SensorSpec> {
        self.specs.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<&SensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn partner(&self, id: usize) -> Option<usize> {
        self.specs.get(id).and_then(|s| s.paired_with)
    }

    /// Unordered pairs `(lo, hi)`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.specs
            .iter()
            .filter_map(|s| s.paired_with.filter(|&p| p > s.sensor_id).map(|p| (s.sensor_id, p)))
            .collect()
    }

    /// Same sensors with every pairing removed.
    pub fn without_pairing(&self) -> SensorRegistry {
        SensorRegistry {
            specs: self
                .specs
                .iter()
                .cloned()
                .map(|mut s| {
                    s.paired_with = None;
                    s
                })
                .collect(),
        }
    }

    /// Architecture-relevant description: ids, names, channel counts, pairing.
    pub fn canonical(&self) -> String {
        self.specs
            .iter()
            .map(|s| {
                format!(
                    "{}:{}:{}:{}",
                    s.sensor_id,
                    s.name,
                    s.channels,
                    s.paired_with.map_or("-".to_string(), |p| p.to_string())
                )
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table1_like() -> Vec<SensorSpec> {
        vec![
            SensorSpec::new(0, "rgb", 3),
            SensorSpec::new(1, "sar", 2).paired(2),
            SensorSpec::new(2, "s2", 14).paired(1),
            SensorSpec::new(3, "dsm", 1).paired(4),
            SensorSpec::new(4, "rgbhi", 3).paired(3),
        ]
    }

    #[test]
    fn table1_roles_register() {
        let reg = register_sensors(table1_like()).unwrap();
        assert_eq!(reg.len(), 5);
        assert_eq!(reg.pairs(), vec![(1, 2), (3, 4)]);
        assert_eq!(reg.partner(2), Some(1));
        assert_eq!(reg.partner(0), None);
    }

    #[test]
    fn single_unpaired_sensor_is_valid() {
        let reg = register_sensors(vec![SensorSpec::new(0, "rgb", 3)]).unwrap();
        assert!(reg.pairs().is_empty());
    }

    #[test]
    fn one_way_pairing_rejected() {
        let specs = vec![SensorSpec::new(0, "a", 2).paired(1), SensorSpec::new(1, "b", 3)];
        assert!(matches!(register_sensors(specs), Err(Error::Registry(m)) if m.contains("symmetric")));
    }

    #[test]
    fn invalid_registries_rejected() {
        let dup = vec![SensorSpec::new(0, "a", 2), SensorSpec::new(0, "b", 3)];
        assert!(register_sensors(dup).is_err());
        assert!(register_sensors(vec![SensorSpec::new(0, "a", 0)]).is_err());
        assert!(register_sensors(vec![SensorSpec::new(0, "a", 1).paired(0)]).is_err());
        assert!(register_sensors(vec![SensorSpec::new(1, "a", 1)]).is_err());
        let bad_std = SensorSpec::new(0, "a", 1).with_stats(vec![0.0], vec![0.0]);
        assert!(register_sensors(vec![bad_std]).is_err());
    }

    #[test]
    fn iteration_follows_sensor_id() {
        let mut specs = table1_like();
        specs.reverse();
        let reg = register_sensors(specs).unwrap();
        let ids: Vec<usize> = reg.iter().map(|s| s.sensor_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }
}
