#![allow(dead_code)]

use msgfm::model::ModelConfig;
use msgfm::sensors::{gen_synthetic, Dataset, SensorRegistry, SensorSpec, SyntheticConfig};
use msgfm::training::TrainConfig;

/// Two colocated sensors: a 2-channel SAR-like one and a 4-channel optical one.
pub fn pair_registry() -> SensorRegistry {
    SensorRegistry::new(vec![
        SensorSpec::new(0, "sar", 2)
            .paired(1)
            .with_stats(vec![2.0, 1.5], vec![0.5, 0.4]),
        SensorSpec::new(1, "s2", 4)
            .paired(0)
            .with_stats(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 0.5, 0.1]),
    ])
    .unwrap()
}

pub fn pair_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    gen_synthetic(
        &pair_registry(),
        &SyntheticConfig {
            n_per_sensor: n,
            width: size,
            height: size,
            seed,
            smoothing: 10.0,
            patch_multiple: 4,
        },
    )
    .unwrap()
}

/// 32×32 images, 4-px patches, 8-px mask units, 2 blocks with MoE in block 1.
pub fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.width = 32;
    m.height = 32;
    m.patch_size = 4;
    m.mask_unit = 8;
    m.embed_dim = 32;
    m.encoder.depth = 2;
    m.encoder.heads = 4;
    m.encoder.num_experts = 4;
    m.encoder.mlp_ratio = 2;
    m
}

pub fn tiny_train(seed: u64, p_cross: f64) -> TrainConfig {
    let mut t = TrainConfig::default();
    t.base_batch = 8;
    t.base_lr = 1e-3;
    t.warmup_lr = 1e-5;
    t.warmup_epochs = 1;
    t.epochs = 1000;
    t.milestones = vec![];
    t.seed = seed;
    t.p_cross = p_cross;
    t
}

// Scalar-loop metric oracles, written without reference to the library code.

pub fn oracle_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn oracle_psnr(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    let mse = s / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * max_val.log10() - 10.0 * mse.log10()
    }
}

/// SSIM with an explicit Gaussian of side `size`, covariance as `Σ w (x-μx)(y-μy)`.
pub fn oracle_ssim(a: &[f64], b: &[f64], c: usize, w: usize, h: usize, max_val: f64) -> f64 {
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let mid = (size / 2) as f64;
    let mut g = vec![vec![0.0; size]; size];
    let mut norm = 0.0;
    for u in 0..size {
        for v in 0..size {
            let r2 = (u as f64 - mid).powi(2) + (v as f64 - mid).powi(2);
            g[u][v] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            norm += g[u][v];
        }
    }
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);
    let at = |img: &[f64], ch: usize, x: usize, y: usize| img[ch * w * h + x * h + y];
    let mut total = 0.0;
    let mut n = 0.0;
    for ch in 0..c {
        for x0 in 0..=(w - size) {
            for y0 in 0..=(h - size) {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..size {
                    for v in 0..size {
                        mx += g[u][v] / norm * at(a, ch, x0 + u, y0 + v);
                        my += g[u][v] / norm * at(b, ch, x0 + u, y0 + v);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for u in 0..size {
                    for v in 0..size {
                        let dx = at(a, ch, x0 + u, y0 + v) - mx;
                        let dy = at(b, ch, x0 + u, y0 + v) - my;
                        vx += g[u][v] / norm * dx * dx;
                        vy += g[u][v] / norm * dy * dy;
                        cxy += g[u][v] / norm * dx * dy;
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
    }
    total / n
}

pub fn oracle_sam(a: &[f64], b: &[f64], c: usize) -> f64 {
    let plane = a.len() / c;
    let mut total = 0.0;
    for p in 0..plane {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (x, y) = (a[ch * plane + p], b[ch * plane + p]);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
        total += cos.acos();
    }
    total / plane as f64 * 180.0 / std::f64::consts::PI
}

pub fn oracle_ssi(orig: &[f64], filt: &[f64], c: usize) -> Vec<f64> {
    let plane = orig.len() / c;
    let cv = |img: &[f64], ch: usize| {
        let band = &img[ch * plane..(ch + 1) * plane];
        let mean = band.iter().sum::<f64>() / plane as f64;
        let var = band.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / plane as f64;
        var.sqrt() / mean
    };
    (0..c).map(|ch| cv(filt, ch) / cv(orig, ch)).collect()
}

/// Area under the interpolated precision-recall curve, summed over recall steps.
pub fn oracle_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    // Descending score; equal scores keep index order (insertion sort is stable).
    let mut order: Vec<usize> = Vec::new();
    for i in 0..scores.len() {
        let mut at = order.len();
        while at > 0 && scores[order[at - 1]] < scores[i] {
            at -= 1;
        }
        order.insert(at, i);
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0.0;
    for (r, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        }
        prec.push(tp / (r + 1) as f64);
        rec.push(tp / pos as f64);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..order.len() {
        if rec[k] > prev_recall {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += (rec[k] - prev_recall) * best;
            prev_recall = rec[k];
        }
    }
    Some(ap)
}

pub fn oracle_map(scores: &[f64], labels: &[bool], k: usize) -> f64 {
    let n = scores.len() / k;
    let mut sum = 0.0;
    let mut count = 0.0;
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let l: Vec<bool> = (0..n).map(|i| labels[i * k + c]).collect();
        if let Some(ap) = oracle_ap(&s, &l) {
            sum += ap;
            count += 1.0;
        }
    }
    sum / count
}

pub fn oracle_miou(pred: &[usize], gt: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for c in 0..k {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            count += 1.0;
        }
    }
    sum / count
}
