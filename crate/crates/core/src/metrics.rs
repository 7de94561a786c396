//! Evaluation metrics and their JSON report.
//!
//! Images are `[C, W, H]` slices in f64.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::registry::Registry;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("mae", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `10·log10(max_val² / MSE)`; `f64::INFINITY` when the inputs are equal.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    same_len("psnr", a, b)?;
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val {} must be positive", max_val)));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized Gaussian window of side `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for &gx in &g {
        for &gy in &g {
            w.push(gx * gy / (s * s));
        }
    }
    w
}

/// Window side used for a `width × height` image: 11, or the largest odd
/// size that fits.
pub fn ssim_window_size(width: usize, height: usize) -> usize {
    let m = width.min(height).min(11);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM over every valid window position and channel, with an 11×11
/// Gaussian window (σ = 1.5), `C1 = (0.01·max_val)²`, `C2 = (0.03·max_val)²`.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, width: usize, height: usize, max_val: f64) -> Result<f64> {
    same_len("ssim", a, b)?;
    if channels * width * height != a.len() || width == 0 || height == 0 {
        return Err(Error::shape("ssim", &[a.len()], &[channels, width, height]));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val {} must be positive", max_val)));
    }
    let size = ssim_window_size(width, height);
    let w = gaussian_window(size, 1.5);
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let plane = width * height;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        for x0 in 0..=width - size {
            for y0 in 0..=height - size {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..size {
                    for v in 0..size {
                        let k = w[u * size + v];
                        let i = (x0 + u) * height + y0 + v;
                        ma += k * pa[i];
                        mb += k * pb[i];
                        saa += k * pa[i] * pa[i];
                        sbb += k * pb[i] * pb[i];
                        sab += k * pa[i] * pb[i];
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean spectral angle in degrees between per-pixel channel vectors.
pub fn sam_degrees(a: &[f64], b: &[f64], channels: usize) -> Result<f64> {
    same_len("sam", a, b)?;
    if channels == 0 || a.len() % channels != 0 {
        return Err(Error::shape("sam", &[a.len()], &[channels]));
    }
    let plane = a.len() / channels;
    let mut total = 0.0;
    for p in 0..plane {
        let va: Vec<f64> = (0..channels).map(|c| a[c * plane + p]).collect();
        let vb: Vec<f64> = (0..channels).map(|c| b[c * plane + p]).collect();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument(format!("zero spectral vector at pixel {}", p)));
        }
        let (mut d, mut s) = (0.0, 0.0);
        for (x, y) in va.iter().zip(&vb) {
            let (ux, uy) = (x / na, y / nb);
            d += (ux - uy) * (ux - uy);
            s += (ux + uy) * (ux + uy);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
    }
    Ok((total / plane as f64).to_degrees())
}

/// Per-band mean and population standard deviation.
pub fn band_stats(image: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let plane = image.len() / channels.max(1);
    (0..channels)
        .map(|c| {
            let band = &image[c * plane..(c + 1) * plane];
            let mean = band.iter().sum::<f64>() / plane as f64;
            let var = band.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / plane as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// Speckle suppression index per band: `(σ_f/μ_f) / (σ_o/μ_o)`.
pub fn ssi(original: &[f64], filtered: &[f64], channels: usize) -> Result<Vec<f64>> {
    same_len("ssi", original, filtered)?;
    if channels == 0 || original.len() % channels != 0 {
        return Err(Error::shape("ssi", &[original.len()], &[channels]));
    }
    let so = band_stats(original, channels);
    let sf = band_stats(filtered, channels);
    so.iter()
        .zip(&sf)
        .enumerate()
        .map(|(c, (&(mo, dev_o), &(mf, dev_f)))| {
            if mo == 0.0 || mf == 0.0 {
                return Err(Error::InvalidArgument(format!("band {} has zero mean", c)));
            }
            if dev_o == 0.0 {
                return Err(Error::InvalidArgument(format!("band {} of the original is constant", c)));
            }
            Ok((dev_f / mf) / (dev_o / mo))
        })
        .collect()
}

/// Average precision of one class: all-points interpolation over the
/// ranking by descending score (ties keep sample order). `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut precision = Vec::with_capacity(order.len());
    let mut hit = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        hit.push(labels[i]);
    }
    for r in (0..precision.len().saturating_sub(1)).rev() {
        precision[r] = precision[r].max(precision[r + 1]);
    }
    let ap = hit
        .iter()
        .zip(&precision)
        .filter(|(&h, _)| h)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / positives as f64;
    Some(ap)
}

/// Macro mAP over classes of `[N, K]` scores. Classes without a positive
/// label are skipped; their entry in the breakdown is `None`.
pub fn map_score(scores: &[f64], labels: &[bool], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if classes == 0 || scores.len() != labels.len() || scores.len() % classes != 0 {
        return Err(Error::shape("map_score", &[scores.len()], &[labels.len(), classes]));
    }
    let n = scores.len() / classes;
    let per: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let s: Vec<f64> = (0..n).map(|i| scores[i * classes + k]).collect();
            let l: Vec<bool> = (0..n).map(|i| labels[i * classes + k]).collect();
            average_precision(&s, &l)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("no class has a positive label".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

/// Mean IoU over classes that occur in either map.
pub fn mean_iou(pred: &[usize], gt: &[usize], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("mean_iou", &[pred.len()], &[gt.len()]));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("mean_iou needs at least 2 classes".into()));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("class {} out of range {}", bad, classes)));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let per: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let d = tp[c] + fp[c] + fn_[c];
            (d > 0).then(|| tp[c] as f64 / d as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

/// What a metric is computed on.
pub enum MetricInput<'a> {
    /// Predicted and reference images, `[C, W, H]`.
    Images {
        pred: &'a [f64],
        target: &'a [f64],
        channels: usize,
        width: usize,
        height: usize,
        max_val: f64,
    },
    /// `[N, K]` scores against 0/1 labels.
    Scores {
        scores: &'a [f64],
        labels: &'a [bool],
        classes: usize,
    },
    /// Per-pixel class maps.
    Classes {
        pred: &'a [usize],
        gt: &'a [usize],
        classes: usize,
    },
}

/// A scalar value and an optional per-class or per-band breakdown.
pub struct MetricValue {
    pub value: f64,
    pub breakdown: Option<Vec<Option<f64>>>,
}

impl MetricValue {
    fn scalar(value: f64) -> Self {
        MetricValue { value, breakdown: None }
    }
}

pub trait Metric: Send + Sync {
    fn compute(&self, input: &MetricInput) -> Result<MetricValue>;
}

struct ImageMetric(fn(&[f64], &[f64], usize, usize, usize, f64) -> Result<MetricValue>);

impl Metric for ImageMetric {
    fn compute(&self, input: &MetricInput) -> Result<MetricValue> {
        match *input {
            MetricInput::Images {
                pred,
                target,
                channels,
                width,
                height,
                max_val,
            } => (self.0)(pred, target, channels, width, height, max_val),
            _ => Err(Error::InvalidArgument("metric needs images".into())),
        }
    }
}

struct MapMetric;

impl Metric for MapMetric {
    fn compute(&self, input: &MetricInput) -> Result<MetricValue> {
        match *input {
            MetricInput::Scores {
                scores,
                labels,
                classes,
            } => map_score(scores, labels, classes).map(|(v, per)| MetricValue {
                value: v,
                breakdown: Some(per),
            }),
            _ => Err(Error::InvalidArgument("mAP needs scores and labels".into())),
        }
    }
}

struct MiouMetric;

impl Metric for MiouMetric {
    fn compute(&self, input: &MetricInput) -> Result<MetricValue> {
        match *input {
            MetricInput::Classes { pred, gt, classes } => mean_iou(pred, gt, classes).map(|(v, per)| MetricValue {
                value: v,
                breakdown: Some(per),
            }),
            _ => Err(Error::InvalidArgument("mIoU needs class maps".into())),
        }
    }
}

/// Built-in metrics by name: `map`, `miou`, `mae`, `psnr`, `ssim`, `sam`, `ssi`.
pub fn metric_registry() -> Registry<Box<dyn Metric>> {
    Registry::new("metric")
        .with("map", Box::new(MapMetric) as Box<dyn Metric>)
        .with("miou", Box::new(MiouMetric))
        .with("mae", Box::new(ImageMetric(|a, b, _, _, _, _| mae(a, b).map(MetricValue::scalar))))
        .with(
            "psnr",
            Box::new(ImageMetric(|a, b, _, _, _, m| psnr(a, b, m).map(MetricValue::scalar))),
        )
        .with(
            "ssim",
            Box::new(ImageMetric(|a, b, c, w, h, m| ssim(a, b, c, w, h, m).map(MetricValue::scalar))),
        )
        .with(
            "sam",
            Box::new(ImageMetric(|a, b, c, _, _, _| sam_degrees(a, b, c).map(MetricValue::scalar))),
        )
        .with(
            "ssi",
            Box::new(ImageMetric(|a, b, c, _, _, _| {
                let per = ssi(a, b, c)?;
                Ok(MetricValue {
                    value: per.iter().sum::<f64>() / per.len() as f64,
                    breakdown: Some(per.into_iter().map(Some).collect()),
                })
            })),
        )
}

/// Named metric values with optional breakdowns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub breakdown: BTreeMap<String, Vec<Option<f64>>>,
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x > 0.0 {
        json!("inf")
    } else if x < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

fn from_num(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) if s == "inf" => Some(f64::INFINITY),
        Value::String(s) if s == "-inf" => Some(f64::NEG_INFINITY),
        Value::String(s) if s == "nan" => Some(f64::NAN),
        _ => None,
    }
}

impl MetricReport {
    /// Compute each named metric on one input; names that do not apply to
    /// this input kind are an error.
    pub fn compute(names: &[&str], input: &MetricInput) -> Result<Self> {
        let reg = metric_registry();
        let mut r = MetricReport::default();
        for &n in names {
            let v = reg.get(n)?.compute(input)?;
            r.values.insert(n.to_string(), v.value);
            if let Some(b) = v.breakdown {
                r.breakdown.insert(n.to_string(), b);
            }
        }
        Ok(r)
    }

    /// Infinite values are written as the string `"inf"`.
    pub fn to_json(&self) -> Value {
        let values: serde_json::Map<String, Value> = self.values.iter().map(|(k, &v)| (k.clone(), num(v))).collect();
        let breakdown: serde_json::Map<String, Value> = self
            .breakdown
            .iter()
            .map(|(k, v)| (k.clone(), Value::Array(v.iter().map(|x| x.map_or(Value::Null, num)).collect())))
            .collect();
        json!({ "values": values, "breakdown": breakdown })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = || Error::InvalidArgument("malformed metric report".into());
        let mut r = MetricReport::default();
        for (k, x) in v.get("values").and_then(Value::as_object).ok_or_else(bad)? {
            r.values.insert(k.clone(), from_num(x).ok_or_else(bad)?);
        }
        if let Some(b) = v.get("breakdown").and_then(Value::as_object) {
            for (k, arr) in b {
                let items = arr.as_array().ok_or_else(bad)?;
                r.breakdown.insert(k.clone(), items.iter().map(from_num).collect());
            }
        }
        Ok(r)
    }
}

fn fmt_value(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{:.4}", x)
    }
}

/// Fixed-width table: one row per label, one column per metric.
pub fn format_table(rows: &[(String, MetricReport)], columns: &[&str]) -> String {
    let rows: Vec<(Vec<String>, MetricReport)> = rows.iter().map(|(l, r)| (vec![l.clone()], r.clone())).collect();
    format_table_with(&["method"], &rows, columns)
}

/// Like [`format_table`] with several left-aligned label columns.
pub fn format_table_with(labels: &[&str], rows: &[(Vec<String>, MetricReport)], columns: &[&str]) -> String {
    let n = labels.len();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            label
                .iter()
                .cloned()
                .chain(
                    columns
                        .iter()
                        .map(|c| r.values.get(*c).map_or("-".to_string(), |&v| fmt_value(v))),
                )
                .collect()
        })
        .collect();
    let header: Vec<String> = labels
        .iter()
        .map(|l| l.to_string())
        .chain(columns.iter().map(|c| c.to_uppercase()))
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let line = |r: &[String]| -> String {
        r.iter()
            .enumerate()
            .map(|(i, c)| {
                if i < n {
                    format!("{:<w$}", c, w = widths[i])
                } else {
                    format!("{:>w$}", c, w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = vec![0.5; 16];
        let b = vec![0.6; 16];
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn report_json_keeps_infinity() {
        let mut r = MetricReport::default();
        r.values.insert("psnr".into(), f64::INFINITY);
        r.values.insert("mae".into(), 0.25);
        r.breakdown.insert("miou".into(), vec![Some(0.5), None]);
        let v = r.to_json();
        assert_eq!(v["values"]["psnr"], "inf");
        assert_eq!(MetricReport::from_json(&v).unwrap(), r);
    }

    #[test]
    fn window_shrinks_for_small_images() {
        assert_eq!(ssim_window_size(64, 64), 11);
        assert_eq!(ssim_window_size(8, 8), 7);
        assert_eq!(ssim_window_size(8, 5), 5);
    }
}
