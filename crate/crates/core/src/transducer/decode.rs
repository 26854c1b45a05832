use std::collections::HashMap;

use crate::error::Result;
use crate::model::Graph;
use crate::routing::{ModulePath, Site, Stack};
use crate::tensor::{kernels, Real, Tensor, Var};

use super::DecoderConfig;

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 4;

/// Decoder weights read off a graph, evaluated without recording.
struct Weights<S> {
    embed1: Tensor<S>,
    embed2: Tensor<S>,
    proj_w: Tensor<S>,
    proj_b: Tensor<S>,
    w_pred: Tensor<S>,
    b: Tensor<S>,
    w_out: Tensor<S>,
    b_out: Tensor<S>,
}

fn value<S: Real>(g: &mut Graph<'_, S>, path: ModulePath, name: &str) -> Result<Tensor<S>> {
    let scope = g.scope(&path);
    let v = g.param(&scope, name)?;
    Ok(g.tape.value(v).clone())
}

fn add_row<S: Real>(out: &mut [S], row: &[S]) {
    for (o, &r) in out.iter_mut().zip(row) {
        *o += r;
    }
}

impl<S: Real> Weights<S> {
    fn bind(g: &mut Graph<'_, S>, stack: Stack) -> Result<Self> {
        let pred = ModulePath::decoder(stack, Site::Prediction);
        let joint = ModulePath::decoder(stack, Site::Joint);
        Ok(Self {
            embed1: value(g, pred, "embed_prev1")?,
            embed2: value(g, pred, "embed_prev2")?,
            proj_w: value(g, pred, "proj.w")?,
            proj_b: value(g, pred, "proj.b")?,
            w_pred: value(g, joint, "w_pred")?,
            b: value(g, joint, "b")?,
            w_out: value(g, joint, "w_out")?,
            b_out: value(g, joint, "b_out")?,
        })
    }

    /// Prediction-side joint contribution `pred(p1, p2) W_pred + b`.
    fn pred_term(&self, p1: usize, p2: usize) -> Vec<S> {
        let mut cat = self.embed1.row(p1).to_vec();
        cat.extend_from_slice(self.embed2.row(p2));
        let jd = self.proj_w.cols();
        let mut pred = kernels::matmul(&cat, self.proj_w.data(), 1, cat.len(), jd, false);
        add_row(&mut pred, self.proj_b.data());
        let mut term = kernels::matmul(&pred, self.w_pred.data(), 1, jd, jd, false);
        add_row(&mut term, self.b.data());
        term
    }

    fn logits(&self, enc_term: &[S], pred_term: &[S]) -> Vec<S> {
        let hidden: Vec<S> = enc_term.iter().zip(pred_term).map(|(&a, &b)| (a + b).tanh()).collect();
        let mut z = kernels::matmul(&hidden, self.w_out.data(), 1, hidden.len(), self.w_out.cols(), false);
        add_row(&mut z, self.b_out.data());
        z
    }
}

/// Greedy decoding: at each frame emit the most probable symbol, moving to
/// the next frame on blank or after `max_symbols_per_frame` labels.
pub fn greedy_decode<S: Real>(
    g: &mut Graph<'_, S>,
    dec: &DecoderConfig,
    stack: Stack,
    enc: Var,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    let weights = Weights::bind(g, stack)?;
    let w_enc = value(g, ModulePath::decoder(stack, Site::Joint), "w_enc")?;
    let enc = g.tape.value(enc);
    let (frames, jd) = (enc.rows(), w_enc.cols());
    let enc_terms = kernels::matmul(enc.data(), w_enc.data(), frames, enc.cols(), jd, false);
    let start = dec.start_symbol();
    let (mut p1, mut p2) = (start, start);
    let mut cache: HashMap<(usize, usize), Vec<S>> = HashMap::new();
    let mut hyp = Vec::new();
    for t in 0..frames {
        let enc_term = &enc_terms[t * jd..(t + 1) * jd];
        for _ in 0..max_symbols_per_frame {
            let pred_term = cache.entry((p1, p2)).or_insert_with(|| weights.pred_term(p1, p2));
            let z = weights.logits(enc_term, pred_term);
            let (best, best_logit) =
                z[1..]
                    .iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            // p(blank) = sigmoid(z0) against the largest label probability
            // (1 - sigmoid(z0)) * softmax(z)[best].
            let lse = {
                let sum: f64 = z[1..].iter().map(|v| (v.as_f64() - best_logit.as_f64()).exp()).sum();
                best_logit.as_f64() + sum.ln()
            };
            let log_blank = kernels::log_sigmoid(z[0].as_f64());
            let log_label = kernels::log_sigmoid(-z[0].as_f64()) + best_logit.as_f64() - lse;
            if log_blank >= log_label {
                break;
            }
            hyp.push(best);
            (p1, p2) = (best, p1);
        }
    }
    Ok(hyp)
}
