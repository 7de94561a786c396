//! Reconstruction grids (masked input / reconstruction / ground truth) and
//! band statistics for SAR-like sensors.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::masking::draw_mask;
use crate::metrics::band_stats;
use crate::model::{decode, encode, Binder, ModelConfig, ParamStore, SensorEmbedder};
use crate::numeric::{Tape, Tensor};
use crate::sensors::{Dataset, SensorSpec};
use crate::training::step::stack_images;

/// Images `[B, C, W, H]` in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub source_sensor: usize,
    pub target_sensor: usize,
    /// Source images with masked pixels set to zero.
    pub masked_input: Tensor<f32>,
    pub prediction: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Mask the source samples `indices` with plans from `seed` and decode them
/// into their own sensor, or into the partner sensor when `cross` is set.
pub fn reconstruct(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    indices: &[usize],
    cross: bool,
    seed: u64,
) -> Result<Reconstruction> {
    let first = *indices
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to reconstruct".into()))?;
    let source_sensor = dataset.sample(first).sensor_id;
    if indices.iter().any(|&i| dataset.sample(i).sensor_id != source_sensor) {
        return Err(Error::InvalidArgument("samples from several sensors".into()));
    }
    let targets: Vec<usize> = if cross {
        indices
            .iter()
            .map(|&i| {
                dataset
                    .partner_of(i)
                    .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no partner", dataset.sample(i).sample_id)))
            })
            .collect::<Result<_>>()?
    } else {
        indices.to_vec()
    };
    let target_sensor = dataset.sample(targets[0]).sensor_id;
    let channels = dataset.registry().get(target_sensor).unwrap().channels;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut token_mask = Vec::new();
    let mut pixel_mask = Vec::new();
    for _ in indices {
        let m = draw_mask(cfg.width, cfg.height, cfg.mask_unit, cfg.mask_ratio, &mut rng)?;
        token_mask.extend(m.to_token_mask(cfg.patch_size)?);
        pixel_mask.extend(m.to_pixel_mask());
    }
    let images = stack_images::<f32>(dataset, indices)?;
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen(params);
    let x = tape.constant(images.clone());
    let emb = SensorEmbedder::for_sensor(params, source_sensor)?;
    let tokens = emb.embed(&mut tape, &mut binder, source_sensor, x, &token_mask)?;
    let feats = encode(&mut tape, &mut binder, cfg, tokens)?.features;
    let pred = decode(&mut tape, &mut binder, target_sensor, channels, cfg.width, cfg.height, cfg.patch_size, feats)?;
    let prediction = tape.value(pred).clone();

    let plane = cfg.width * cfg.height;
    let sc = images.shape()[1];
    let mut masked = images.data().to_vec();
    for (b, img) in masked.chunks_mut(sc * plane).enumerate() {
        for c in 0..sc {
            for p in 0..plane {
                if pixel_mask[b * plane + p] {
                    img[c * plane + p] = 0.0;
                }
            }
        }
    }
    Ok(Reconstruction {
        source_sensor,
        target_sensor,
        masked_input: Tensor::new(images.shape().to_vec(), masked)?,
        prediction,
        target: stack_images::<f32>(dataset, &targets)?,
    })
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Display ranges per shown channel, from the panel the grid is anchored on.
fn display_channels(c: usize) -> Vec<usize> {
    if c >= 3 {
        vec![0, 1, 2]
    } else {
        vec![0]
    }
}

fn ranges(t: &Tensor<f32>, b: usize, shown: &[usize]) -> Vec<(f32, f32)> {
    let s = t.shape();
    let plane = s[2] * s[3];
    shown
        .iter()
        .map(|&c| {
            let v = &t.data()[(b * s[1] + c) * plane..(b * s[1] + c + 1) * plane];
            let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        })
        .collect()
}

fn paint(out: &mut Raster, t: &Tensor<f32>, b: usize, shown: &[usize], range: &[(f32, f32)], ox: usize, oy: usize) {
    let s = t.shape();
    let (w, h) = (s[2], s[3]);
    for x in 0..w {
        for y in 0..h {
            let mut px = [0u8; 3];
            for (k, &c) in shown.iter().enumerate() {
                let (lo, hi) = range[k];
                let v = t.data()[((b * s[1] + c) * w + x) * h + y];
                let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                px[k] = (u.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            if shown.len() == 1 {
                px = [px[0]; 3];
            }
            let at = ((oy + y) * out.width + ox + x) * 3;
            out.rgb[at..at + 3].copy_from_slice(&px);
        }
    }
}

/// Three rows (masked input, reconstruction, ground truth) with one column
/// per sample. Sensors with three or more channels show channels 0-2 as
/// RGB, others show channel 0 in gray. Each column is stretched to the
/// range of its ground truth (masked input: its own source image).
pub fn render_grid(rec: &Reconstruction) -> Raster {
    const GAP: usize = 2;
    let s = rec.target.shape();
    let (n, w, h) = (s[0], s[2], s[3]);
    let mut out = Raster {
        width: n * w + (n - 1) * GAP,
        height: 3 * h + 2 * GAP,
        rgb: vec![255; (n * w + (n - 1) * GAP) * (3 * h + 2 * GAP) * 3],
    };
    let src_shown = display_channels(rec.masked_input.shape()[1]);
    let tgt_shown = display_channels(s[1]);
    for b in 0..n {
        let ox = b * (w + GAP);
        let src_range = ranges(&rec.masked_input, b, &src_shown);
        let tgt_range = ranges(&rec.target, b, &tgt_shown);
        paint(&mut out, &rec.masked_input, b, &src_shown, &src_range, ox, 0);
        paint(&mut out, &rec.prediction, b, &tgt_shown, &tgt_range, ox, h + GAP);
        paint(&mut out, &rec.target, b, &tgt_shown, &tgt_range, ox, 2 * (h + GAP));
    }
    out
}

pub fn write_ppm(raster: &Raster, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    bytes.extend_from_slice(&raster.rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_png(raster: &Raster, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), raster.width as u32, raster.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(&raster.rgb).map_err(io)
}

/// Per-band mean and std of ground truth and reconstruction, and SSI of the
/// reconstruction against the ground truth, in the sensor's raw units.
pub fn band_statistics(rec: &Reconstruction, spec: &SensorSpec) -> Result<Value> {
    let s = rec.target.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if spec.channels != c {
        return Err(Error::InvalidArgument(format!("sensor `{}` has {} channels, images {}", spec.name, spec.channels, c)));
    }
    let raw = |t: &Tensor<f32>, b: usize| -> Vec<f64> {
        t.data()[b * c * plane..(b + 1) * c * plane]
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let k = i / plane;
                x as f64 * spec.norm_std[k] as f64 + spec.norm_mean[k] as f64
            })
            .collect()
    };
    let mut samples = Vec::with_capacity(n);
    for b in 0..n {
        let gt = band_stats(&raw(&rec.target, b), c);
        let pr = band_stats(&raw(&rec.prediction, b), c);
        let bands: Vec<Value> = gt
            .iter()
            .zip(&pr)
            .enumerate()
            .map(|(k, (&(gm, gs), &(pm, ps)))| {
                let ssi = if gm != 0.0 && gs != 0.0 && pm != 0.0 {
                    json!((ps / pm) / (gs / gm))
                } else {
                    Value::Null
                };
                json!({
                    "band": k,
                    "ground_truth": { "mean": gm, "std": gs },
                    "reconstruction": { "mean": pm, "std": ps },
                    "ssi": ssi,
                })
            })
            .collect();
        samples.push(json!({ "sample": b, "bands": bands }));
    }
    Ok(json!({ "sensor": spec.name, "samples": samples }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_three_rows() {
        let t = Tensor::new(vec![2, 3, 4, 5], (0..120).map(|x| x as f32).collect()).unwrap();
        let rec = Reconstruction {
            source_sensor: 0,
            target_sensor: 0,
            masked_input: t.clone(),
            prediction: t.clone(),
            target: t,
        };
        let r = render_grid(&rec);
        assert_eq!((r.width, r.height), (2 * 4 + 2, 3 * 5 + 4));
        assert_eq!(r.rgb.len(), r.width * r.height * 3);
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&r, &dir.path().join("g.ppm")).unwrap();
        write_png(&r, &dir.path().join("g.png")).unwrap();
        let head = std::fs::read(dir.path().join("g.ppm")).unwrap();
        assert!(head.starts_with(b"P6\n10 19\n255\n"));
    }
}
