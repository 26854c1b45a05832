//! Slice-level forward and backward kernels used by the tape.
//!
//! Backward kernels accumulate (`+=`) into their gradient buffers.

use super::Real;

/// `out = a * b` or `out = a * b^T`; `a` is `m x k`.
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    S::gemm(m, k, n, a, (k as isize, 1), b, bs, S::zero(), &mut out, (n as isize, 1));
    out
}

/// Accumulates the gradients of `matmul` into `ga` and `gb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<S: Real>(
    g: &[S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    ga: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    if let Some(ga) = ga {
        // ga[m x k] += g[m x n] * B^T where B is the k x n view of b.
        let bt = if trans_b { (k as isize, 1) } else { (1, n as isize) };
        S::gemm(m, n, k, g, (n as isize, 1), b, bt, S::one(), ga, (k as isize, 1));
    }
    if let Some(gb) = gb {
        if trans_b {
            // gb[n x k] += g^T[n x m] * a[m x k]
            S::gemm(n, m, k, g, (1, n as isize), a, (k as isize, 1), S::one(), gb, (k as isize, 1));
        } else {
            // gb[k x n] += a^T[k x m] * g[m x n]
            S::gemm(k, m, n, a, (1, k as isize), g, (n as isize, 1), S::one(), gb, (n as isize, 1));
        }
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

pub(crate) fn softmax_backward<S: Real>(g: &[S], y: &[S], cols: usize, gx: &mut [S]) {
    if cols == 0 {
        return;
    }
    for ((gr, yr), gxr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
            *o += yi * (gi - dot);
        }
    }
}

pub(crate) fn log_softmax_backward<S: Real>(g: &[S], y: &[S], cols: usize, gx: &mut [S]) {
    if cols == 0 {
        return;
    }
    for ((gr, yr), gxr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
        let total: S = gr.iter().copied().sum();
        for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
            *o += gi - yi.exp() * total;
        }
    }
}

/// Per-row normalization over `groups` equal channel groups, followed by a
/// per-channel affine. Returns the output and the reciprocal standard
/// deviation of each (row, group).
pub(crate) fn group_norm<S: Real>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    cols: usize,
    groups: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let gsize = cols / groups;
    let mut out = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows * groups];
    let inv_n = S::of(1.0 / gsize as f64);
    for r in 0..rows {
        for g in 0..groups {
            let base = r * cols + g * gsize;
            let seg = &x[base..base + gsize];
            let mean = seg.iter().copied().sum::<S>() * inv_n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + S::of(eps)).sqrt();
            rstd[r * groups + g] = rs;
            for i in 0..gsize {
                let c = g * gsize + i;
                out[base + i] = (seg[i] - mean) * rs * gamma[c] + beta[c];
            }
        }
    }
    (out, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<S: Real>(
    g: &[S],
    x: &[S],
    gamma: &[S],
    rstd: &[S],
    cols: usize,
    groups: usize,
    gx: Option<&mut [S]>,
    mut ggamma: Option<&mut [S]>,
    mut gbeta: Option<&mut [S]>,
) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let gsize = cols / groups;
    let n = S::of(gsize as f64);
    let mut gx = gx;
    let mut xhat = vec![S::zero(); gsize];
    let mut gxh = vec![S::zero(); gsize];
    for r in 0..rows {
        for grp in 0..groups {
            let base = r * cols + grp * gsize;
            let seg = &x[base..base + gsize];
            let mean = seg.iter().copied().sum::<S>() / n;
            let rs = rstd[r * groups + grp];
            for i in 0..gsize {
                let c = grp * gsize + i;
                xhat[i] = (seg[i] - mean) * rs;
                gxh[i] = g[base + i] * gamma[c];
                if let Some(gg) = ggamma.as_deref_mut() {
                    gg[c] += g[base + i] * xhat[i];
                }
                if let Some(gb) = gbeta.as_deref_mut() {
                    gb[c] += g[base + i];
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let sum_g: S = gxh.iter().copied().sum();
                let sum_gx: S = gxh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                for i in 0..gsize {
                    gx[base + i] += rs / n * (n * gxh[i] - sum_g - xhat[i] * sum_gx);
                }
            }
        }
    }
}

/// Depthwise 1-D convolution over time for a `[T x C]` input with a
/// `[(left + right + 1) x C]` kernel; zero padding outside the sequence.
/// Output frame `t` reads input frames `t - left ..= t + right`.
pub(crate) fn depthwise_conv<S: Real>(
    x: &[S],
    w: &[S],
    frames: usize,
    chans: usize,
    left: usize,
    right: usize,
) -> Vec<S> {
    let taps = left + right + 1;
    let mut out = vec![S::zero(); frames * chans];
    for t in 0..frames {
        let o = &mut out[t * chans..(t + 1) * chans];
        for j in 0..taps {
            let src = t as isize - left as isize + j as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let xs = &x[src as usize * chans..(src as usize + 1) * chans];
            let ws = &w[j * chans..(j + 1) * chans];
            for c in 0..chans {
                o[c] += ws[c] * xs[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_conv_backward<S: Real>(
    g: &[S],
    x: &[S],
    w: &[S],
    frames: usize,
    chans: usize,
    left: usize,
    right: usize,
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
) {
    let taps = left + right + 1;
    for t in 0..frames {
        let gr = &g[t * chans..(t + 1) * chans];
        for j in 0..taps {
            let src = t as isize - left as isize + j as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let s = src as usize;
            if let Some(gx) = gx.as_deref_mut() {
                let ws = &w[j * chans..(j + 1) * chans];
                for c in 0..chans {
                    gx[s * chans + c] += ws[c] * gr[c];
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                let xs = &x[s * chans..(s + 1) * chans];
                for c in 0..chans {
                    gw[j * chans + c] += xs[c] * gr[c];
                }
            }
        }
    }
}

/// Per-node HAT log-probabilities for a `[(T*(U+1)) x (V+1)]` logit lattice
/// whose column 0 is the blank logit. Returns `(log p_blank, log p_label)`
/// where `log p_label[t][u]` scores target `u` (defined for `u < U`).
pub fn hat_log_probs<S: Real>(logits: &[S], targets: &[usize], frames: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let nodes_u = targets.len() + 1;
    let mut lb = vec![0.0; frames * nodes_u];
    let mut ll = vec![f64::NEG_INFINITY; frames * nodes_u];
    for t in 0..frames {
        for u in 0..nodes_u {
            let row = &logits[(t * nodes_u + u) * width..(t * nodes_u + u + 1) * width];
            let z0 = row[0].as_f64();
            lb[t * nodes_u + u] = log_sigmoid(z0);
            if u < targets.len() {
                let labels = &row[1..];
                let max = labels.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + labels.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                ll[t * nodes_u + u] = log_sigmoid(-z0) + labels[targets[u]].as_f64() - lse;
            }
        }
    }
    (lb, ll)
}

/// Forward variable of the transducer lattice. `alpha[t][u]` is the log
/// probability of having emitted `u` labels upon reaching frame `t`.
pub fn transducer_alpha(lb: &[f64], ll: &[f64], frames: usize, labels: usize) -> Vec<f64> {
    let nu = labels + 1;
    let mut alpha = vec![f64::NEG_INFINITY; frames * nu];
    for t in 0..frames {
        for u in 0..nu {
            let a = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 { alpha[(t - 1) * nu + u] + lb[(t - 1) * nu + u] } else { f64::NEG_INFINITY };
                let from_label = if u > 0 { alpha[t * nu + u - 1] + ll[t * nu + u - 1] } else { f64::NEG_INFINITY };
                log_add_exp(from_blank, from_label)
            };
            alpha[t * nu + u] = a;
        }
    }
    alpha
}

/// Backward variable: `beta[t][u]` is the log probability of completing the
/// alignment from node `(t, u)`, including the final blank.
pub(crate) fn transducer_beta(lb: &[f64], ll: &[f64], frames: usize, labels: usize) -> Vec<f64> {
    let nu = labels + 1;
    let mut beta = vec![f64::NEG_INFINITY; frames * nu];
    for t in (0..frames).rev() {
        for u in (0..nu).rev() {
            let idx = t * nu + u;
            let via_blank = if t + 1 < frames {
                lb[idx] + beta[(t + 1) * nu + u]
            } else if u == labels {
                lb[idx]
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u < labels { ll[idx] + beta[idx + 1] } else { f64::NEG_INFINITY };
            beta[idx] = log_add_exp(via_blank, via_label);
        }
    }
    beta
}

/// Gradient of the negative log-likelihood with respect to the logit
/// lattice, scaled by `upstream` and accumulated into `gz`.
pub(crate) fn transducer_backward<S: Real>(
    logits: &[S],
    targets: &[usize],
    frames: usize,
    width: usize,
    upstream: f64,
    gz: &mut [S],
) {
    if frames == 0 {
        return;
    }
    let labels = targets.len();
    let nu = labels + 1;
    let (lb, ll) = hat_log_probs(logits, targets, frames, width);
    let alpha = transducer_alpha(&lb, &ll, frames, labels);
    let beta = transducer_beta(&lb, &ll, frames, labels);
    let log_z = beta[0];
    for t in 0..frames {
        for u in 0..nu {
            let idx = t * nu + u;
            let next_blank = if t + 1 < frames {
                beta[(t + 1) * nu + u]
            } else if u == labels {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let occ_blank = (alpha[idx] + lb[idx] + next_blank - log_z).exp();
            let occ_label = if u < labels { (alpha[idx] + ll[idx] + beta[idx + 1] - log_z).exp() } else { 0.0 };
            // d nll / d log p = -occupancy
            let g_blank = -occ_blank * upstream;
            let g_label = -occ_label * upstream;
            let row = &logits[idx * width..(idx + 1) * width];
            let grow = &mut gz[idx * width..(idx + 1) * width];
            let z0 = row[0].as_f64();
            let s_pos = sigmoid(z0);
            let s_neg = 1.0 - s_pos;
            grow[0] += S::of(g_blank * s_neg - g_label * s_pos);
            if u < labels && g_label != 0.0 {
                let lab = &row[1..];
                let max = lab.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = lab.iter().map(|v| (v.as_f64() - max).exp()).sum();
                for (k, v) in lab.iter().enumerate() {
                    let p = (v.as_f64() - max).exp() / total;
                    let delta = if k == targets[u] { 1.0 } else { 0.0 };
                    grow[1 + k] += S::of(g_label * (delta - p));
                }
            }
        }
    }
}
