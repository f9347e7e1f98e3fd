//! Inner loops shared by forward and backward passes.
//!
//! Reductions use a fixed four-lane accumulation order so results are
//! reproducible bit-for-bit regardless of call site.

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i];
        acc[1] += a[i + 1];
        acc[2] += a[i + 2];
        acc[3] += a[i + 3];
    }
    let mut tail = 0.0;
    for v in &a[chunks * 4..] {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const BLOCK: usize = 8;

/// Valid cross-correlation `out[t] = bias + sum_k w[k] x[t + k]`, accumulated
/// in `k` order for every output.
pub fn correlate(x: &[f64], w: &[f64], bias: f64, out: &mut [f64]) {
    let tp = out.len();
    debug_assert!(x.len() + 1 >= tp + w.len());
    let full = tp / BLOCK * BLOCK;
    for t0 in (0..full).step_by(BLOCK) {
        let mut acc = [bias; BLOCK];
        for (k, &wk) in w.iter().enumerate() {
            let xs = &x[t0 + k..t0 + k + BLOCK];
            for j in 0..BLOCK {
                acc[j] += wk * xs[j];
            }
        }
        out[t0..t0 + BLOCK].copy_from_slice(&acc);
    }
    for t in full..tp {
        let mut acc = bias;
        for (k, &wk) in w.iter().enumerate() {
            acc += wk * x[t + k];
        }
        out[t] = acc;
    }
}

/// Kernel gradient of [`correlate`]: `gw[k] += sum_t g[t] x[t + k]`, summed in
/// `t` order.
pub fn correlate_grad(g: &[f64], x: &[f64], gw: &mut [f64]) {
    let tp = g.len();
    let k = gw.len();
    let full = k / BLOCK * BLOCK;
    for k0 in (0..full).step_by(BLOCK) {
        let mut acc = [0.0; BLOCK];
        for (t, &gt) in g.iter().enumerate() {
            let xs = &x[t + k0..t + k0 + BLOCK];
            for j in 0..BLOCK {
                acc[j] += gt * xs[j];
            }
        }
        for j in 0..BLOCK {
            gw[k0 + j] += acc[j];
        }
    }
    for ki in full..k {
        let mut acc = 0.0;
        for t in 0..tp {
            acc += g[t] * x[t + ki];
        }
        gw[ki] += acc;
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, b_row, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
