//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use super::kernels::{gelu, gemm_acc, unfold_map};
use super::tape::{expand, permute_values, plan_matmul, Op, Tape, Var};
use super::tensor::{broadcast_shape, numel, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let xa = expand(self.value(a), &out);
        let xb = expand(self.value(b), &out);
        let data = xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(out, data)?, self.rg(&[a, b])))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `[.., m, k] · [.., k, n]` with broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); plan.batch * m * n];
        {
            let va = self.value(a).data();
            let vb = self.value(b).data();
            for bi in 0..plan.batch {
                let ao = plan.a_index[bi] * m * k;
                let bo = plan.b_index[bi] * k * n;
                gemm_acc(
                    m,
                    k,
                    n,
                    &va[ao..ao + m * k],
                    &vb[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(plan.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {:?} for shape {:?}", axes, shape)));
        }
        let t = permute_values(self.value(a), axes);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(Error::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let k = *v.shape().last().ok_or_else(|| Error::InvalidArgument("softmax of a scalar".into()))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalize over the last axis, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::InvalidArgument("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| gelu(x)).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn div_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x / c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::DivScalar(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.div_scalar(s, T::of(n as f64))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("axis {} out of range for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let size = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for s in 0..size {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * size + s) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let size = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::InvalidArgument(format!("axis {} out of range", axis)))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.div_scalar(s, T::of(size.max(1) as f64)))
    }

    /// `[.., C, W, H]` → `[.., L, C·P·P]` non-overlapping patches.
    pub fn unfold(&mut self, x: Var, patch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || patch == 0 {
            return Err(Error::InvalidArgument(format!("unfold needs [.., C, W, H], got {:?}", shape)));
        }
        let n = shape.len();
        let (c, w, h) = (shape[n - 3], shape[n - 2], shape[n - 1]);
        if w % patch != 0 || h % patch != 0 {
            return Err(Error::Divisibility {
                width: w,
                height: h,
                unit: patch,
            });
        }
        let map = Arc::new(unfold_map(c, w, h, patch));
        let blk = map.len();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(v.len());
        for b in 0..v.len() / blk {
            out.extend(map.iter().map(|&s| v[b * blk + s]));
        }
        let mut out_shape = shape[..n - 3].to_vec();
        out_shape.push((w / patch) * (h / patch));
        out_shape.push(c * patch * patch);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Unfold { x, map }, rg))
    }

    /// Inverse of [`Tape::unfold`]: `[.., L, C·P·P]` → `[.., C, W, H]` (pixel shuffle).
    pub fn fold(&mut self, x: Var, channels: usize, width: usize, height: usize, patch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(Error::Divisibility {
                width,
                height,
                unit: patch,
            });
        }
        let l = (width / patch) * (height / patch);
        let f = channels * patch * patch;
        if n < 2 || shape[n - 2] != l || shape[n - 1] != f {
            return Err(Error::shape("fold", &shape, &[l, f]));
        }
        let map = Arc::new(unfold_map(channels, width, height, patch));
        let blk = map.len();
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for b in 0..v.len() / blk {
            for (i, &dst) in map.iter().enumerate() {
                out[b * blk + dst] = v[b * blk + i];
            }
        }
        let mut out_shape = shape[..n - 2].to_vec();
        out_shape.extend([channels, width, height]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Fold { x, map }, rg))
    }

    /// Non-overlapping stride-`P` convolution of one `[C, W, H]` image
    /// with a `[D, C, P, P]` kernel, as unfold + matmul. Yields `[L, D]`.
    pub fn conv_patch(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(x).to_vec();
        if ks.len() != 4 || ks[2] != ks[3] || xs.len() < 3 || xs[xs.len() - 3] != ks[1] {
            return Err(Error::shape("conv_patch", &xs, &ks));
        }
        let (d, c, p) = (ks[0], ks[1], ks[2]);
        let patches = self.unfold(x, p)?;
        let k2 = self.reshape(kernel, &[d, c * p * p])?;
        let kt = self.transpose(k2)?;
        self.matmul(patches, kt)
    }

    /// Rows `idx` of the leading axis.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::InvalidArgument("gather_rows of a scalar".into()))?;
        let w = numel(&shape[1..]);
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::InvalidArgument(format!("row {} out of range {}", bad, rows)));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &r in idx {
            out.extend_from_slice(&v[r * w..(r + 1) * w]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `base` with `src[k]` added to row `idx[k]`.
    pub fn index_add_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        let ss = self.shape(src).to_vec();
        if bs.is_empty() || ss.is_empty() || ss[0] != idx.len() || bs[1..] != ss[1..] {
            return Err(Error::shape("index_add_rows", &bs, &ss));
        }
        let w = numel(&bs[1..]);
        if let Some(&bad) = idx.iter().find(|&&r| r >= bs[0]) {
            return Err(Error::InvalidArgument(format!("row {} out of range {}", bad, bs[0])));
        }
        let mut out = self.value(base).data().to_vec();
        let sv = self.value(src).data();
        for (k, &r) in idx.iter().enumerate() {
            for j in 0..w {
                out[r * w + j] += sv[k * w + j];
            }
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            Tensor::new(bs, out)?,
            Op::IndexAddRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Flat elements `idx` of `a`, as a tensor of shape `shape`.
    pub fn take(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if numel(shape) != idx.len() {
            return Err(Error::InvalidArgument(format!("take: {} indices for shape {:?}", idx.len(), shape)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("index {} out of range {}", bad, n)));
        }
        let v = self.value(a).data();
        let out = idx.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Take(a, idx.to_vec()), rg))
    }

    /// Replace every row of `x` (viewed as `[N, D]`) whose mask bit is set with `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = self.value(token).len();
        if xs.last() != Some(&d) || self.value(x).len() != mask.len() * d {
            return Err(Error::shape("replace_rows", &xs, self.shape(token)));
        }
        let mut out = self.value(x).data().to_vec();
        let tv = self.value(token).data();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(tv);
            }
        }
        let rg = self.rg(&[x, token]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::ReplaceRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[s.len() - 1];
        }
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let w = *v.shape().last().unwrap();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean absolute error over positions with nonzero `weight`:
    /// `Σ |pred − target| · w / Σ w`. Target and weights are constants.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() || ps != weight.shape() {
            return Err(Error::shape("l1_loss", &ps, target.shape()));
        }
        let denom: T = weight.data().iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::InvalidArgument("l1_loss over an empty mask".into()));
        }
        let pv = self.value(pred).data();
        let mut total = T::zero();
        let mut dloss = Vec::with_capacity(pv.len());
        for ((&p, &t), &w) in pv.iter().zip(target.data()).zip(weight.data()) {
            let d = p - t;
            total += d.abs() * w;
            let s = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            dloss.push(s * w / denom);
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(total / denom), Op::FusedLoss { input: pred, dloss }, rg))
    }

    /// Mean binary cross-entropy on logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls != targets.shape() {
            return Err(Error::shape("bce_with_logits", &ls, targets.shape()));
        }
        let n = T::of(targets.len().max(1) as f64);
        let zv = self.value(logits).data();
        let mut total = T::zero();
        let mut dloss = Vec::with_capacity(zv.len());
        for (&z, &y) in zv.iter().zip(targets.data()) {
            total += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
            let sig = T::one() / (T::one() + (-z).exp());
            dloss.push((sig - y) / n);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total / n), Op::FusedLoss { input: logits, dloss }, rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!("label {} out of range {}", bad, k)));
        }
        let n = T::of(labels.len().max(1) as f64);
        let zv = self.value(logits).data();
        let mut total = T::zero();
        let mut dloss = vec![T::zero(); zv.len()];
        for (r, &c) in labels.iter().enumerate() {
            let row = &zv[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[c];
            for j in 0..k {
                let p = (row[j] - lse).exp();
                dloss[r * k + j] = (p - if j == c { T::one() } else { T::zero() }) / n;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total / n), Op::FusedLoss { input: logits, dloss }, rg))
    }
}
