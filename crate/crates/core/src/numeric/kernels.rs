//! Plain loops shared by the forward and backward passes.

use super::tensor::Scalar;

use rayon::prelude::*;

/// Work size (multiply-adds) above which rows are spread over the rayon pool.
/// Every output element is summed in the same order either way.
const PAR_THRESHOLD: usize = 1 << 16;

fn rows_mut<T: Scalar>(out: &mut [T], width: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if width == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    rows_mut(&mut out[..m * n], n, m * k * n, |i, out_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn gemm_nt_acc<T: Scalar>(m: usize, k: usize, n: usize, g: &[T], b: &[T], out: &mut [T]) {
    rows_mut(&mut out[..m * k], k, m * k * n, |i, out_row| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    });
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    rows_mut(&mut out[..k * n], n, m * k * n, |p, out_row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    });
}

/// Index map of a non-overlapping patch unfold.
///
/// For an image block `[C, W, H]` and patch side `p`, entry `t * (C*p*p) + f`
/// of the unfolded `[L, C*p*p]` block holds pixel `map[t * (C*p*p) + f]` of the
/// image block. Tokens run row-major over the `(W/p, H/p)` grid, features run
/// over `(c, u, v)`.
pub fn unfold_map(channels: usize, width: usize, height: usize, p: usize) -> Vec<usize> {
    let gw = width / p;
    let gh = height / p;
    let feat = channels * p * p;
    let mut map = vec![0; gw * gh * feat];
    for i in 0..gw {
        for j in 0..gh {
            let t = i * gh + j;
            for c in 0..channels {
                for u in 0..p {
                    for v in 0..p {
                        let f = c * p * p + u * p + v;
                        map[t * feat + f] = c * width * height + (i * p + u) * height + (j * p + v);
                    }
                }
            }
        }
    }
    map
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut out = [0.0; 2];
        gemm_acc(2, 2, 1, &a, &b, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn unfold_map_is_a_permutation() {
        let mut m = unfold_map(3, 8, 4, 2);
        m.sort_unstable();
        assert_eq!(m, (0..96).collect::<Vec<_>>());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
