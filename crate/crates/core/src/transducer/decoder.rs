use crate::error::{Error, Result};
use crate::model::{Graph, ParamSpec, SpecBuilder};
use crate::routing::{ModulePath, Site, Stack};
use crate::tensor::{kernels, Real, Tensor, Var};

use super::DecoderConfig;

/// Prediction and joint parameters of the decoder attached to `stack`
/// (a decoder stack), fed by `enc_dim`-wide encoder frames.
pub fn decoder_specs(dec: &DecoderConfig, enc_dim: usize, stack: Stack) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let rows = dec.vocab_size + 1;
    let path = ModulePath::decoder(stack, Site::Prediction);
    let mut b = SpecBuilder { out: &mut out, prefix: path.to_string(), path: Some(path) };
    b.xavier("embed_prev1", vec![rows, dec.embed_dim], rows, dec.embed_dim);
    b.xavier("embed_prev2", vec![rows, dec.embed_dim], rows, dec.embed_dim);
    b.linear("proj.w", Some("proj.b"), 2 * dec.embed_dim, dec.joint_dim);
    let path = ModulePath::decoder(stack, Site::Joint);
    let mut b = SpecBuilder { out: &mut out, prefix: path.to_string(), path: Some(path) };
    b.linear("w_enc", None, enc_dim, dec.joint_dim);
    b.linear("w_pred", Some("b"), dec.joint_dim, dec.joint_dim);
    b.linear("w_out", Some("b_out"), dec.joint_dim, dec.vocab_size + 1);
    out
}

/// Previous-token pairs `(y[u-1], y[u-2])` for every lattice row
/// `u = 0..=U`, with the start symbol before the sequence.
pub fn prediction_contexts(dec: &DecoderConfig, targets: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&bad) = targets.iter().find(|&&y| y >= dec.vocab_size) {
        return Err(Error::TokenOutOfRange { token: bad, vocab: dec.vocab_size });
    }
    let start = dec.start_symbol();
    let at = |i: isize| if i < 0 { start } else { targets[i as usize] };
    let prev1 = (0..=targets.len() as isize).map(|u| at(u - 1)).collect();
    let prev2 = (0..=targets.len() as isize).map(|u| at(u - 2)).collect();
    Ok((prev1, prev2))
}

/// Prediction network over explicit previous-token pairs: two position
/// tables, concatenated and projected to `joint_dim`. Tokens lie in
/// `[0, vocab)` or equal the start symbol.
pub fn predict<S: Real>(
    g: &mut Graph<'_, S>,
    dec: &DecoderConfig,
    stack: Stack,
    prev1: &[usize],
    prev2: &[usize],
) -> Result<Var> {
    if let Some(&bad) = prev1.iter().chain(prev2).find(|&&y| y > dec.start_symbol()) {
        return Err(Error::TokenOutOfRange { token: bad, vocab: dec.vocab_size });
    }
    let scope = g.scope(&ModulePath::decoder(stack, Site::Prediction));
    let e1 = g.param(&scope, "embed_prev1")?;
    let e2 = g.param(&scope, "embed_prev2")?;
    let a = g.tape.embedding(e1, prev1)?;
    let b = g.tape.embedding(e2, prev2)?;
    let cat = g.tape.concat(&[a, b], 1)?;
    let w = g.param(&scope, "proj.w")?;
    let bias = g.param(&scope, "proj.b")?;
    let y = g.tape.matmul(cat, w)?;
    Ok(g.tape.add_bias(y, bias)?)
}

/// Joint logits for every `(t, u)` pair of `enc [T x J]` and
/// `pred [(U+1) x joint_dim]`, as a `[(T (U+1)) x (V+1)]` lattice with row
/// `t (U+1) + u`. Column 0 is the blank logit.
pub fn joint_lattice<S: Real>(g: &mut Graph<'_, S>, stack: Stack, enc: Var, pred: Var) -> Result<Var> {
    let frames = g.tape.shape(enc)[0];
    let nodes_u = g.tape.shape(pred)[0];
    let scope = g.scope(&ModulePath::decoder(stack, Site::Joint));
    let w_enc = g.param(&scope, "w_enc")?;
    let w_pred = g.param(&scope, "w_pred")?;
    let b = g.param(&scope, "b")?;
    let a = g.tape.matmul(enc, w_enc)?;
    let p = g.tape.matmul(pred, w_pred)?;
    let p = g.tape.add_bias(p, b)?;
    let t_idx: Vec<usize> = (0..frames * nodes_u).map(|i| i / nodes_u).collect();
    let u_idx: Vec<usize> = (0..frames * nodes_u).map(|i| i % nodes_u).collect();
    let a = g.tape.embedding(a, &t_idx)?;
    let p = g.tape.embedding(p, &u_idx)?;
    let h = g.tape.add(a, p)?;
    let h = g.tape.tanh(h)?;
    let w_out = g.param(&scope, "w_out")?;
    let b_out = g.param(&scope, "b_out")?;
    let z = g.tape.matmul(h, w_out)?;
    Ok(g.tape.add_bias(z, b_out)?)
}

/// HAT output of one lattice node.
#[derive(Clone, Debug, PartialEq)]
pub struct HatOutput {
    pub blank_logit: f64,
    pub label_logits: Vec<f64>,
}

impl HatOutput {
    pub fn from_row<S: Real>(row: &[S]) -> Self {
        Self { blank_logit: row[0].as_f64(), label_logits: row[1..].iter().map(|v| v.as_f64()).collect() }
    }

    pub fn log_p_blank(&self) -> f64 {
        kernels::log_sigmoid(self.blank_logit)
    }

    /// `log(1 - sigmoid(z0)) + log_softmax(labels)`.
    pub fn log_p_labels(&self) -> Vec<f64> {
        let max = self.label_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.label_logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let non_blank = kernels::log_sigmoid(-self.blank_logit);
        self.label_logits.iter().map(|v| non_blank + v - lse).collect()
    }
}

/// Joint network on a single encoder frame and prediction vector.
pub fn joint_hat<S: Real>(
    g: &mut Graph<'_, S>,
    stack: Stack,
    enc_frame: &Tensor<S>,
    pred: &Tensor<S>,
) -> Result<HatOutput> {
    let e = g.tape.constant(enc_frame.clone().reshape([1, enc_frame.numel()])?);
    let p = g.tape.constant(pred.clone().reshape([1, pred.numel()])?);
    let z = joint_lattice(g, stack, e, p)?;
    Ok(HatOutput::from_row(g.tape.value(z).data()))
}
