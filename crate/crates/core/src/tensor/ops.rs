// Numeric kernels over flat row-major buffers. Every reduction runs
// left-to-right so results do not depend on the surrounding data.

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `aᵀ · g` for `a[m,k]`, `g[m,n]`, giving `[k,n]`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g[m,n]`, `b[k,n]`, giving `[m,k]`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] = s;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Returns `(y, xhat, inv_std)` for per-row normalisation.
pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= cols as f64;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        var /= cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            y[r * cols + c] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Multi-head scaled dot-product attention restricted by `mask`
/// (`mask[i * t + j]` true when query `i` may read key `j`).
///
/// Returns the output `[t, d]` and the attention probabilities
/// `[heads, t, t]` (zero where masked).
pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let mrow = &mask[i * t..(i + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                if !mrow[j] {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                s *= scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut sum = 0.0;
            for j in 0..t {
                if mrow[j] {
                    let e = (scores[j] - max).exp();
                    prow[j] = e;
                    sum += e;
                }
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..t {
                if !mrow[j] {
                    continue;
                }
                prow[j] /= sum;
                let p = prow[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    grad_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    mask: &[bool],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let go = &grad_out[i * d + off..i * d + off + dh];
            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mrow = &mask[i * t..(i + 1) * t];
            let mut weighted = 0.0;
            for j in 0..t {
                if !mrow[j] {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for (a, b) in go.iter().zip(vj) {
                    s += a * b;
                }
                dp[j] = s;
                weighted += prow[j] * s;
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (dvv, g) in dvj.iter_mut().zip(go) {
                    *dvv += prow[j] * g;
                }
            }
            for j in 0..t {
                if !mrow[j] {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}
