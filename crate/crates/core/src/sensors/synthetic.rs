//! Synthetic stand-in for a multisensor corpus.
//!
//! Unpaired sensors and the lower-id side of each pair get independent
//! smooth Gaussian random fields per channel. The other side of a pair is a
//! fixed function of its partner: a channel mix plus bias, a tanh, and a
//! per-channel affine map that restores unit variance before the sensor's
//! declared statistics are applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, SampleRecord, SensorRegistry, SensorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_per_sensor: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Gaussian blur radius (pixels) of the random fields.
    pub smoothing: f64,
    /// Width and height must be multiples of this (the model patch size).
    pub patch_multiple: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_per_sensor: 64,
            width: 32,
            height: 32,
            seed: 0,
            smoothing: 10.0,
            patch_multiple: 1,
        }
    }
}

/// Unit-variance periodic Gaussian random field of shape `width × height`.
pub fn smooth_field(rng: &mut impl Rng, width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let noise: Vec<f64> = (0..width * height).map(|_| rng.sample(StandardNormal)).collect();
    if sigma <= 0.0 {
        return noise;
    }
    let kw = wrapped_kernel(width, sigma);
    let kh = wrapped_kernel(height, sigma);
    let mut tmp = vec![0.0; width * height];
    for x in 0..width {
        for y in 0..height {
            let mut acc = 0.0;
            for (d, &k) in kh.iter().enumerate() {
                acc += k * noise[x * height + (y + d) % height];
            }
            tmp[x * height + y] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for x in 0..width {
        for y in 0..height {
            let mut acc = 0.0;
            for (d, &k) in kw.iter().enumerate() {
                acc += k * tmp[((x + d) % width) * height + y];
            }
            out[x * height + y] = acc;
        }
    }
    // Separable kernel: the output variance is (Σk_w²)(Σk_h²).
    let norm = (kw.iter().map(|k| k * k).sum::<f64>() * kh.iter().map(|k| k * k).sum::<f64>()).sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Gaussian kernel folded onto a periodic axis of length `n`.
fn wrapped_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k = vec![0.0; n];
    for d in -radius..=radius {
        let w = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        k[d.rem_euclid(n as i64) as usize] += w;
    }
    k
}

/// Mean and standard deviation of `tanh(Z)` for `Z ~ N(mu, 1)`, by Simpson quadrature.
fn tanh_gaussian_moments(mu: f64) -> (f64, f64) {
    let n = 4000;
    let (lo, hi) = (mu - 10.0, mu + 10.0);
    let h = (hi - lo) / n as f64;
    let pdf = |z: f64| (-(z - mu) * (z - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (mut m1, mut m2) = (0.0, 0.0);
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let t = z.tanh();
        m1 += w * t * pdf(z);
        m2 += w * t * t * pdf(z);
    }
    m1 *= h / 3.0;
    m2 *= h / 3.0;
    (m1, (m2 - m1 * m1).max(1e-12).sqrt())
}

/// Deterministic map from a source sensor's image to its partner's image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTransform {
    pub source_channels: usize,
    pub target_channels: usize,
    /// Row-major `[target, source]`, each row of unit norm.
    pub mix: Vec<f64>,
    pub bias: Vec<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl PairTransform {
    pub fn new(source_channels: usize, target_channels: usize, rng: &mut impl Rng) -> Self {
        let mut mix = Vec::with_capacity(source_channels * target_channels);
        for _ in 0..target_channels {
            let row: Vec<f64> = (0..source_channels).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            mix.extend(row.iter().map(|v| v / norm));
        }
        let bias: Vec<f64> = (0..target_channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (center, scale) = bias.iter().map(|&b| tanh_gaussian_moments(b)).unzip();
        PairTransform {
            source_channels,
            target_channels,
            mix,
            bias,
            center,
            scale,
        }
    }

    /// Transform for the pair `(source, target)` of a dataset seed.
    pub fn for_pair(source: &SensorSpec, target: &SensorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1_000 + source.sensor_id as u64 * 64 + target.sensor_id as u64);
        PairTransform::new(source.channels, target.channels, &mut rng)
    }

    /// Map a source image (sensor units) to the partner image (sensor units).
    pub fn apply(&self, source: &SensorSpec, target: &SensorSpec, image: &[f32], hw: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.target_channels * hw];
        let mut z = vec![0.0f64; self.source_channels];
        for p in 0..hw {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = (image[c * hw + p] as f64 - source.norm_mean[c] as f64) / source.norm_std[c] as f64;
            }
            for t in 0..self.target_channels {
                let row = &self.mix[t * self.source_channels..(t + 1) * self.source_channels];
                let pre: f64 = row.iter().zip(&z).map(|(m, v)| m * v).sum::<f64>() + self.bias[t];
                let unit = (pre.tanh() - self.center[t]) / self.scale[t];
                out[t * hw + p] = (target.norm_mean[t] as f64 + target.norm_std[t] as f64 * unit) as f32;
            }
        }
        out
    }
}

/// Generate `n_per_sensor` samples for every registered sensor.
///
/// Sample ids are `sensor_id * n_per_sensor + k`; sample `k` of a paired
/// sensor is colocated with sample `k` of its partner.
pub fn gen_synthetic(registry: &SensorRegistry, cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n_per_sensor == 0 {
        return Err(Error::InvalidArgument("n_per_sensor must be at least 1".into()));
    }
    let m = cfg.patch_multiple.max(1);
    if cfg.width == 0 || cfg.height == 0 || cfg.width % m != 0 || cfg.height % m != 0 {
        return Err(Error::Divisibility {
            width: cfg.width,
            height: cfg.height,
            unit: m,
        });
    }
    let hw = cfg.width * cfg.height;
    let n = cfg.n_per_sensor;
    let id = |sensor: usize, k: usize| (sensor * n + k) as u64;

    let mut images: Vec<Option<Vec<Vec<f32>>>> = vec![None; registry.len()];
    for spec in registry.iter() {
        let derived = matches!(spec.paired_with, Some(p) if p < spec.sensor_id);
        if derived {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(spec.sensor_id as u64 + 1);
        let mut imgs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut img = Vec::with_capacity(spec.channels * hw);
            for c in 0..spec.channels {
                let field = smooth_field(&mut rng, cfg.width, cfg.height, cfg.smoothing);
                let (mu, sd) = (spec.norm_mean[c] as f64, spec.norm_std[c] as f64);
                img.extend(field.iter().map(|&v| (mu + sd * v) as f32));
            }
            imgs.push(img);
        }
        images[spec.sensor_id] = Some(imgs);
    }
    for (lo, hi) in registry.pairs() {
        let (src, dst) = (registry.get(lo).unwrap(), registry.get(hi).unwrap());
        let transform = PairTransform::for_pair(src, dst, cfg.seed);
        let derived = images[lo]
            .as_ref()
            .unwrap()
            .iter()
            .map(|img| transform.apply(src, dst, img, hw))
            .collect();
        images[hi] = Some(derived);
    }

    let mut samples = Vec::with_capacity(n * registry.len());
    for spec in registry.iter() {
        for (k, image) in images[spec.sensor_id].take().unwrap().into_iter().enumerate() {
            samples.push(SampleRecord {
                sample_id: id(spec.sensor_id, k),
                sensor_id: spec.sensor_id,
                width: cfg.width,
                height: cfg.height,
                image,
                partner_sample_id: spec.paired_with.map(|p| id(p, k)),
            });
        }
    }
    Dataset::new(registry.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::register_sensors;

    fn registry() -> SensorRegistry {
        register_sensors(vec![
            SensorSpec::new(0, "rgb", 3).with_stats(vec![0.4, 0.5, 0.6], vec![0.2, 0.25, 0.3]),
            SensorSpec::new(1, "sar", 2)
                .paired(2)
                .with_stats(vec![2.0, 1.5], vec![0.5, 0.4]),
            SensorSpec::new(2, "s2", 4)
                .paired(1)
                .with_stats(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 0.5, 0.1]),
        ])
        .unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let reg = registry();
        let cfg = SyntheticConfig {
            n_per_sensor: 4,
            width: 16,
            height: 8,
            ..Default::default()
        };
        let a = gen_synthetic(&reg, &cfg).unwrap();
        let b = gen_synthetic(&reg, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&reg, &SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partner_is_the_fixed_transform_of_its_source() {
        let reg = registry();
        let cfg = SyntheticConfig {
            n_per_sensor: 3,
            width: 8,
            height: 8,
            seed: 5,
            ..Default::default()
        };
        let ds = gen_synthetic(&reg, &cfg).unwrap();
        let t = PairTransform::for_pair(reg.get(1).unwrap(), reg.get(2).unwrap(), 5);
        for &i in ds.sensor_indices(1) {
            let p = ds.partner_of(i).unwrap();
            let want = t.apply(reg.get(1).unwrap(), reg.get(2).unwrap(), &ds.sample(i).image, 64);
            assert_eq!(ds.sample(p).image, want);
        }
    }

    #[test]
    fn channel_statistics_match_declared_stats() {
        let reg = registry();
        let cfg = SyntheticConfig {
            n_per_sensor: 1000,
            width: 8,
            height: 8,
            seed: 9,
            smoothing: 1.5,
            patch_multiple: 1,
        };
        let ds = gen_synthetic(&reg, &cfg).unwrap();
        for spec in reg.iter() {
            for c in 0..spec.channels {
                let vals: Vec<f64> = ds
                    .sensor_indices(spec.sensor_id)
                    .iter()
                    .flat_map(|&i| ds.sample(i).image[c * 64..(c + 1) * 64].iter().map(|&v| v as f64))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                assert!((mean - spec.norm_mean[c] as f64).abs() < 0.1, "{} c{c} mean {mean}", spec.name);
                assert!((sd - spec.norm_std[c] as f64).abs() < 0.1, "{} c{c} std {sd}", spec.name);
            }
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = SyntheticConfig {
            n_per_sensor: 0,
            ..Default::default()
        };
        assert!(gen_synthetic(&registry(), &cfg).is_err());
        let cfg = SyntheticConfig {
            width: 30,
            patch_multiple: 4,
            ..Default::default()
        };
        assert!(gen_synthetic(&registry(), &cfg).is_err());
    }

    #[test]
    fn fields_have_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = 0.0;
        let mut n = 0.0;
        for _ in 0..400 {
            for v in smooth_field(&mut rng, 16, 16, 2.5) {
                acc += v * v;
                n += 1.0;
            }
        }
        assert!((acc / n - 1.0).abs() < 0.05, "{}", acc / n);
    }
}
