use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Graph, Scope};
use crate::routing::{with_adapters, ModulePath, Site, Stack};
use crate::tensor::{Real, Tensor, Var};

use super::{BlockContext, ContextSpec, EncoderConfig};

pub(crate) const NORM_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

fn norm<S: Real>(g: &mut Graph<'_, S>, scope: &Scope, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(scope, &format!("{name}.gamma"))?;
    let beta = g.param(scope, &format!("{name}.beta"))?;
    Ok(g.tape.layer_norm(x, gamma, beta, NORM_EPS)?)
}

fn linear<S: Real>(g: &mut Graph<'_, S>, scope: &Scope, w: &str, b: &str, x: Var) -> Result<Var> {
    let w = g.param(scope, w)?;
    let b = g.param(scope, b)?;
    let y = g.tape.matmul(x, w)?;
    Ok(g.tape.add_bias(y, b)?)
}

/// `x + scale * (W2 swish(W1 LN(x) + b1) + b2)`, framewise.
pub fn ffn_forward<S: Real>(g: &mut Graph<'_, S>, scope: &Scope, x: Var, residual_scale: f64) -> Result<Var> {
    let h = norm(g, scope, "ln", x)?;
    let h = linear(g, scope, "w1", "b1", h)?;
    let h = g.tape.swish(h)?;
    let mut h = linear(g, scope, "w2", "b2", h)?;
    if residual_scale != 1.0 {
        h = g.tape.scale(h, residual_scale)?;
    }
    Ok(g.tape.add(x, h)?)
}

/// Sinusoidal encodings of the given (possibly negative) positions.
pub fn sinusoid<S: Real>(positions: &[f64], d: usize) -> Tensor<S> {
    Tensor::from_fn([positions.len(), d], |i| {
        let (p, c) = (positions[i / d], i % d);
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        S::of(if c % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() })
    })
}

/// Query/key pairs outside `[t - left, t + right]`.
pub fn attention_mask(frames: usize, ctx: ContextSpec) -> Arc<[bool]> {
    (0..frames * frames)
        .map(|i| {
            let (q, k) = (i / frames, i % frames);
            k > q + ctx.right || ctx.left.is_some_and(|l| k + l < q)
        })
        .collect()
}

/// Multi-head self-attention with a residual. With `relative`, scores add a
/// relative-position term with per-head content and position biases.
pub fn mhsa_forward<S: Real>(
    g: &mut Graph<'_, S>,
    scope: &Scope,
    x: Var,
    heads: usize,
    ctx: ContextSpec,
    relative: bool,
) -> Result<Var> {
    let (frames, d) = (g.tape.shape(x)[0], g.tape.shape(x)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let h = norm(g, scope, "ln", x)?;
    let q = linear(g, scope, "wq", "bq", h)?;
    let k = linear(g, scope, "wk", "bk", h)?;
    let v = linear(g, scope, "wv", "bv", h)?;
    let rel = if relative {
        let offsets: Vec<f64> = (0..(2 * frames).saturating_sub(1)).map(|c| c as f64 - (frames as f64 - 1.0)).collect();
        let table = g.tape.constant(sinusoid(&offsets, d));
        let wp = g.param(scope, "wp")?;
        let p = g.tape.matmul(table, wp)?;
        Some((p, g.param(scope, "pos_u")?, g.param(scope, "pos_v")?))
    } else {
        None
    };
    let mask = attention_mask(frames, ctx);
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.tape.slice(q, 1, head * dh, dh)?;
        let kh = g.tape.slice(k, 1, head * dh, dh)?;
        let vh = g.tape.slice(v, 1, head * dh, dh)?;
        let scores = match rel {
            Some((p, u, bias_v)) => {
                let uh = g.tape.slice(u, 0, head, 1)?;
                let uh = g.tape.reshape(uh, vec![dh])?;
                let vb = g.tape.slice(bias_v, 0, head, 1)?;
                let vb = g.tape.reshape(vb, vec![dh])?;
                let qu = g.tape.add_bias(qh, uh)?;
                let content = g.tape.matmul_t(qu, kh)?;
                let qv = g.tape.add_bias(qh, vb)?;
                let ph = g.tape.slice(p, 1, head * dh, dh)?;
                let pos = g.tape.matmul_t(qv, ph)?;
                let pos = g.tape.rel_shift(pos)?;
                g.tape.add(content, pos)?
            }
            None => g.tape.matmul_t(qh, kh)?,
        };
        let scores = g.tape.scale(scores, inv)?;
        let scores = g.tape.masked_fill(scores, mask.clone(), MASK_FILL)?;
        let attn = g.tape.softmax(scores)?;
        outs.push(g.tape.matmul(attn, vh)?);
    }
    let heads_out = g.tape.concat(&outs, 1)?;
    let y = linear(g, scope, "wo", "bo", heads_out)?;
    Ok(g.tape.add(x, y)?)
}

/// Convolution module with a residual: pointwise + GLU, depthwise conv over
/// `[t - L, t + R]`, group norm, swish, pointwise.
pub fn conv_forward<S: Real>(
    g: &mut Graph<'_, S>,
    scope: &Scope,
    x: Var,
    kernel: usize,
    groups: usize,
    ctx: ContextSpec,
) -> Result<Var> {
    let right = ctx.right.min(kernel - 1);
    let left = kernel - 1 - right;
    if ctx.left.is_some_and(|l| left > l) {
        return Err(Error::Config(format!("kernel {kernel} exceeds the configured left context")));
    }
    let h = norm(g, scope, "ln", x)?;
    let h = linear(g, scope, "pw1.w", "pw1.b", h)?;
    let h = g.tape.glu(h)?;
    let w = g.param(scope, "dw.w")?;
    let h = g.tape.depthwise_conv1d(h, w, left, right)?;
    let b = g.param(scope, "dw.b")?;
    let h = g.tape.add_bias(h, b)?;
    let gamma = g.param(scope, "gn.gamma")?;
    let beta = g.param(scope, "gn.beta")?;
    let h = g.tape.group_norm(h, gamma, beta, groups, NORM_EPS)?;
    let h = g.tape.swish(h)?;
    let h = linear(g, scope, "pw2.w", "pw2.b", h)?;
    Ok(g.tape.add(x, h)?)
}

/// `LN(ffn_end(conv(mhsa(ffn_start(x)))))`, where every module site is
/// routed through the active domain and its adapters.
pub fn conformer_block<S: Real>(
    g: &mut Graph<'_, S>,
    enc: &EncoderConfig,
    stack: Stack,
    block: usize,
    x: Var,
) -> Result<Var> {
    let BlockContext { mhsa: attn_ctx, conv: conv_ctx } = enc.block_context(stack, block);
    let mut x = x;
    for site in Site::MODULES {
        if site == Site::Mhsa && !enc.has_mhsa(stack, block) {
            continue;
        }
        let path = ModulePath::module(stack, block, site);
        let scope = g.scope(&path);
        x = with_adapters(g, &path, x, |g, x| match site {
            Site::FfnStart | Site::FfnEnd => ffn_forward(g, &scope, x, enc.ffn_residual_scale()),
            Site::Mhsa => mhsa_forward(g, &scope, x, enc.num_heads, attn_ctx, enc.relative_position(stack)),
            _ => conv_forward(g, &scope, x, enc.conv_kernel, enc.conv_norm_groups, conv_ctx),
        })?;
    }
    let scope = g.scope(&ModulePath::block(stack, block));
    norm(g, &scope, "norm", x)
}
