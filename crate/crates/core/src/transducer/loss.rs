use crate::error::{Error, Result};
use crate::model::Graph;
use crate::routing::Stack;
use crate::tensor::{kernels, Real, Tensor, TensorError, Var};

use super::{joint_lattice, predict, prediction_contexts, DecoderConfig};

/// Largest instance [`loss_bruteforce`] will enumerate.
pub const MAX_ENUMERATED_ALIGNMENTS: u128 = 10_000;

/// Transducer negative log-likelihood with its forward variable.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub nll: f64,
    /// `[T x (U+1)]` row-major log forward probabilities.
    pub alpha: Vec<f64>,
    pub frames: usize,
    pub labels: usize,
}

impl LossResult {
    pub fn alpha_at(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * (self.labels + 1) + u]
    }
}

/// Differentiable loss of `targets` given encoder frames `enc [T x J]`
/// through the decoder attached to `stack`.
pub fn transducer_loss<S: Real>(
    g: &mut Graph<'_, S>,
    dec: &DecoderConfig,
    stack: Stack,
    enc: Var,
    targets: &[usize],
) -> Result<Var> {
    let frames = g.tape.shape(enc)[0];
    if frames == 0 && !targets.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "transducer_loss",
            detail: format!("{} targets cannot be emitted in zero frames", targets.len()),
        }
        .into());
    }
    let (prev1, prev2) = prediction_contexts(dec, targets)?;
    let pred = predict(g, dec, stack, &prev1, &prev2)?;
    let logits = joint_lattice(g, stack, enc, pred)?;
    Ok(g.tape.transducer_loss(logits, targets, frames)?)
}

fn check_lattice<S: Real>(logits: &Tensor<S>, targets: &[usize], frames: usize) -> Result<usize> {
    let width = logits.cols();
    if frames == 0 && !targets.is_empty() {
        return Err(TensorError::ShapeMismatch { op: "transducer_loss", detail: "U > 0 with T = 0".into() }.into());
    }
    if logits.rows() != frames * (targets.len() + 1) {
        return Err(TensorError::ShapeMismatch {
            op: "transducer_loss",
            detail: format!("lattice {:?} for T={frames}, U={}", logits.shape(), targets.len()),
        }
        .into());
    }
    if let Some(&bad) = targets.iter().find(|&&y| y + 1 >= width) {
        return Err(Error::TokenOutOfRange { token: bad, vocab: width - 1 });
    }
    Ok(width)
}

/// Loss and forward variable of a precomputed logit lattice.
pub fn lattice_loss<S: Real>(logits: &Tensor<S>, targets: &[usize], frames: usize) -> Result<LossResult> {
    let width = check_lattice(logits, targets, frames)?;
    let labels = targets.len();
    if frames == 0 {
        return Ok(LossResult { nll: 0.0, alpha: Vec::new(), frames, labels });
    }
    let (lb, ll) = kernels::hat_log_probs(logits.data(), targets, frames, width);
    let alpha = kernels::transducer_alpha(&lb, &ll, frames, labels);
    let last = (frames - 1) * (labels + 1) + labels;
    Ok(LossResult { nll: -(alpha[last] + lb[last]), alpha, frames, labels })
}

/// Number of complete alignments of `labels` labels in `frames` frames.
/// Every alignment ends with the blank that leaves the last frame, so the
/// free part interleaves `labels` labels with `frames - 1` blanks.
pub fn alignment_count(frames: usize, labels: usize) -> u128 {
    if frames == 0 {
        return u128::from(labels == 0);
    }
    let n = (frames - 1 + labels) as u128;
    let k = labels.min(frames - 1) as u128;
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Loss by explicit enumeration of every alignment.
pub fn loss_bruteforce<S: Real>(logits: &Tensor<S>, targets: &[usize], frames: usize) -> Result<f64> {
    let width = check_lattice(logits, targets, frames)?;
    let count = alignment_count(frames, targets.len());
    if count > MAX_ENUMERATED_ALIGNMENTS {
        return Err(Error::TooManyAlignments(count));
    }
    if frames == 0 {
        return Ok(0.0);
    }
    let nu = targets.len() + 1;
    let node = |t: usize, u: usize| {
        let row = &logits.data()[(t * nu + u) * width..(t * nu + u + 1) * width];
        super::HatOutput::from_row(row)
    };
    // Each alignment is a choice of which of the first `T - 1 + U` steps are
    // labels; walk them all with an explicit stack.
    let mut total = 0.0f64;
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, logp)) = stack.pop() {
        let out = node(t, u);
        if t == frames - 1 && u == targets.len() {
            total += (logp + out.log_p_blank()).exp();
            continue;
        }
        if u < targets.len() {
            stack.push((t, u + 1, logp + out.log_p_labels()[targets[u]]));
        }
        if t + 1 < frames {
            stack.push((t + 1, u, logp + out.log_p_blank()));
        }
    }
    Ok(-total.ln())
}
