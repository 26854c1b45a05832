//! Training and evaluation: backbone training (single domain or with a
//! domain one-hot), frozen-backbone per-domain training, greedy-decode
//! evaluation and the sweep harness.

mod optim;
mod sweep;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, Adam, LrSchedule};
pub use sweep::{
    curve_csv, rerun_cell, run_cell, sweep, sweep_cells, CellManifest, CellResult, CorpusSpec, SweepAxis, SweepCell,
    SweepConfig, SweepTable,
};

use crate::conformer::encode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OneHotInput, Owner};
use crate::routing::{DomainId, DomainPlan, MdaModel, Stack};
use crate::synth::Utterance;
use crate::tensor::{Tensor, TensorError};
use crate::transducer::{greedy_decode, transducer_loss, wer, ErrorCounts, DEFAULT_MAX_SYMBOLS_PER_FRAME};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Probability of training the causal decoder on a given step.
    pub causal_decoder_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            warmup_steps: 200,
            peak_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            clip_norm: 1.0,
            seed: 17,
            causal_decoder_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.causal_decoder_prob) {
            return Err(Error::Config("causal_decoder_prob outside [0, 1]".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step's mean loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub nll: f64,
    pub decoder: Stack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    SingleDomain,
    MultidomainOnehot,
}

/// Model input for an utterance: its features, plus the domain one-hot
/// when the configuration asks for one.
pub fn model_input(config: &ModelConfig, utt: &Utterance) -> Result<Tensor<f32>> {
    let Some(OneHotInput { width, domains }) = &config.domain_onehot else {
        return Ok(utt.features.clone());
    };
    let idx = domains.iter().position(|d| *d == utt.domain).ok_or_else(|| Error::UnknownDomain(utt.domain.clone()))?;
    let (frames, f) = (utt.features.rows(), utt.features.cols());
    let mut data = Vec::with_capacity(frames * (f + width));
    for t in 0..frames {
        data.extend_from_slice(utt.features.row(t));
        data.extend((0..*width).map(|j| if j == idx { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::new([frames, f + width], data)?)
}

/// Configuration for the multidomain baseline: raw features plus a
/// `width`-wide domain one-hot.
pub fn with_domain_onehot(mut config: ModelConfig, width: usize, domains: &[String]) -> ModelConfig {
    let raw = config.raw_feature_dim();
    config.encoder.feature_dim = raw + width;
    config.domain_onehot = Some(OneHotInput { width, domains: domains.to_vec() });
    config
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { step, detail: format!("non-finite {op}") },
        other => other,
    }
}

/// Runs `cfg.steps` optimizer steps on the parameters `owner` holds, with
/// the forward pass routed through `domain`.
fn fit(
    model: &mut MdaModel,
    domain: DomainId,
    corpus: &[Utterance],
    cfg: &TrainConfig,
    decoders: &[Stack],
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = LrSchedule { peak: cfg.peak_lr, warmup: cfg.warmup_steps };
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let stack = match decoders {
            [only] => *only,
            _ => {
                if rng.random_bool(cfg.causal_decoder_prob) {
                    Stack::Causal
                } else {
                    Stack::NonCausal
                }
            }
        };
        let (nll, grads, owner) = batch_gradients(model, domain, &batch, stack).map_err(|e| diverged(step, e))?;
        let mut grads = grads;
        clip_global_norm(&mut grads, cfg.clip_norm);
        let params = match owner {
            Owner::Backbone => model.backbone_mut(),
            Owner::Domain(id) => &mut model.domain_mut(id)?.params,
        };
        adam.step(params, &grads, schedule.at(step));
        if !nll.is_finite() {
            return Err(Error::Diverged { step, detail: format!("nll {nll}") });
        }
        curve.push(CurvePoint { step, nll, decoder: stack });
    }
    Ok(curve)
}

type Grads = Vec<(String, Tensor<f32>)>;

fn batch_gradients(
    model: &MdaModel,
    domain: DomainId,
    batch: &[&Utterance],
    stack: Stack,
) -> Result<(f64, Grads, Owner)> {
    let config = model.config();
    let mut g = model.graph(domain, true)?;
    let mut losses = Vec::with_capacity(batch.len());
    for utt in batch {
        let x = model_input(config, utt)?;
        let out = encode(&mut g, &config.encoder, &x, stack == Stack::NonCausal)?;
        let enc = out.noncausal.unwrap_or(out.causal);
        losses.push(transducer_loss(&mut g, &config.decoder, stack.partner(), enc, &utt.targets)?);
    }
    let mut rows = Vec::with_capacity(losses.len());
    for l in losses {
        rows.push(g.tape.reshape(l, vec![1, 1])?);
    }
    let cat = g.tape.concat(&rows, 0)?;
    let mean = g.tape.mean(cat)?;
    let nll = g.tape.value(mean).item() as f64;
    let leaves = g.trainable_leaves();
    let owner = leaves.first().map(|l| l.0).ok_or_else(|| Error::NothingTrainable(model.domain_name(domain)))?;
    let mut grads = g.into_tape().backward(mean)?;
    let out = leaves.into_iter().filter_map(|(_, key, var)| grads.take(var).map(|gr| (key, gr))).collect();
    Ok((nll, out, owner))
}

/// Trains a fresh backbone. In one-hot mode `config` must already carry
/// the domain one-hot (see [`with_domain_onehot`]).
pub fn train_backbone(
    corpus: &[Utterance],
    config: &ModelConfig,
    backbone_domain: &str,
    cfg: &TrainConfig,
    mode: BackboneMode,
) -> Result<(MdaModel, Vec<CurvePoint>)> {
    match (mode, &config.domain_onehot) {
        (BackboneMode::SingleDomain, Some(_)) => {
            return Err(Error::Config("single-domain mode takes a configuration without one-hot input".into()))
        }
        (BackboneMode::MultidomainOnehot, None) => {
            return Err(Error::Config("multidomain mode needs a domain one-hot in the configuration".into()))
        }
        _ => {}
    }
    if mode == BackboneMode::SingleDomain {
        if let Some(u) = corpus.iter().find(|u| u.domain != backbone_domain) {
            return Err(Error::DomainMismatch { expected: backbone_domain.into(), found: u.domain.clone() });
        }
    }
    let mut model = MdaModel::new(config.clone(), backbone_domain, config.init_backbone())?;
    let curve = fit(&mut model, DomainId::BACKBONE, corpus, cfg, &[Stack::Causal, Stack::NonCausal])?;
    Ok((model, curve))
}

/// Decoders whose loss depends on parameters the plan allocates.
pub fn reachable_decoders(plan: &DomainPlan) -> Vec<Stack> {
    let paths = plan.overrides.iter().chain(plan.adapters.iter().flat_map(|a| a.sites.iter()));
    let touched: BTreeSet<Stack> = paths.map(|p| p.stack).collect();
    let mut out = Vec::new();
    if touched.contains(&Stack::Causal) || touched.contains(&Stack::DecoderCausal) {
        out.push(Stack::Causal);
    }
    if touched.iter().any(|s| *s != Stack::DecoderCausal) {
        out.push(Stack::NonCausal);
    }
    out
}

/// Registers `plan` on `model` and trains only its parameters on `corpus`.
/// The backbone is never written.
pub fn train_domain(
    model: &mut MdaModel,
    plan: DomainPlan,
    corpus: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(DomainId, Vec<CurvePoint>)> {
    if let Some(u) = corpus.iter().find(|u| u.domain != plan.domain) {
        return Err(Error::DomainMismatch { expected: plan.domain.clone(), found: u.domain.clone() });
    }
    if plan.is_empty() {
        return Err(Error::NothingTrainable(plan.domain.clone()));
    }
    let decoders = reachable_decoders(&plan);
    let id = model.register_domain(plan)?;
    match fit(model, id, corpus, cfg, &decoders) {
        Ok(curve) => Ok((id, curve)),
        Err(e) => {
            model.remove_domain(id)?;
            Err(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub decoder: Stack,
    pub utterances: usize,
    pub counts: ErrorCounts,
    pub rate: f64,
}

/// Greedy-decodes every utterance through `domain` and `decoder` and
/// scores token errors.
pub fn evaluate(model: &MdaModel, utterances: &[Utterance], domain: DomainId, decoder: Stack) -> Result<EvalReport> {
    let config = model.config();
    let per_utt: Vec<ErrorCounts> = utterances
        .par_iter()
        .map(|utt| {
            let mut g = model.graph(domain, false)?;
            let x = model_input(config, utt)?;
            let out = encode(&mut g, &config.encoder, &x, decoder == Stack::NonCausal)?;
            let enc = out.noncausal.unwrap_or(out.causal);
            let hyp = greedy_decode(&mut g, &config.decoder, decoder.partner(), enc, DEFAULT_MAX_SYMBOLS_PER_FRAME)?;
            Ok(wer(&utt.targets, &hyp))
        })
        .collect::<Result<_>>()?;
    let mut counts = ErrorCounts::default();
    for c in &per_utt {
        counts.merge(c);
    }
    Ok(EvalReport {
        domain: model.domain_name(domain),
        decoder,
        utterances: utterances.len(),
        counts,
        rate: counts.rate(),
    })
}
