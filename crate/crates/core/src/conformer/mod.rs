//! Cascaded streaming conformer encoder: a causal stack feeding a
//! non-causal stack with bounded look-ahead, each with its own output
//! projection.

mod config;
mod modules;

use std::fmt;
use std::str::FromStr;

pub use config::{BlockContext, ContextSpec, EncoderConfig};
pub use modules::{attention_mask, conformer_block, conv_forward, ffn_forward, mhsa_forward, sinusoid};

use crate::error::{Error, Result};
use crate::model::{Graph, ModelConfig, ParamSpec, SpecBuilder};
use crate::routing::{ModulePath, Site, Stack};
use crate::tensor::{Real, Tensor, TensorError};

/// Outputs of both encoders, each `[T x joint_projection_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<V> {
    pub causal: V,
    /// Absent when only the causal path was run.
    pub noncausal: Option<V>,
}

/// Runs the encoder on `[T x feature_dim]` features. With
/// `with_noncausal == false` only the causal path is built.
pub fn encode<S: Real>(
    g: &mut Graph<'_, S>,
    enc: &EncoderConfig,
    features: &Tensor<S>,
    with_noncausal: bool,
) -> Result<EncoderOutput<crate::tensor::Var>> {
    if features.shape().len() != 2 || features.cols() != enc.feature_dim {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            detail: format!("features {:?} for feature_dim {}", features.shape(), enc.feature_dim),
        }
        .into());
    }
    let frames = features.rows();
    if frames == 0 {
        let empty = || Tensor::zeros([0, enc.joint_projection_dim]);
        let causal = g.tape.constant(empty());
        let noncausal = with_noncausal.then(|| g.tape.constant(empty()));
        return Ok(EncoderOutput { causal, noncausal });
    }
    let x = g.tape.constant(features.clone());
    let mut h = project(g, "causal.input_proj", x)?;
    if !enc.causal_relative_position {
        let positions: Vec<f64> = (0..frames).map(|t| t as f64).collect();
        let pe = g.tape.constant(sinusoid(&positions, enc.d_causal));
        h = g.tape.add(h, pe)?;
    }
    for b in 0..enc.causal_blocks {
        h = conformer_block(g, enc, Stack::Causal, b, h)?;
    }
    let causal = project(g, "causal.output_proj", h)?;
    let noncausal = if with_noncausal {
        let mut h = project(g, "noncausal.input_proj", h)?;
        for b in 0..enc.noncausal_blocks {
            h = conformer_block(g, enc, Stack::NonCausal, b, h)?;
        }
        Some(project(g, "noncausal.output_proj", h)?)
    } else {
        None
    };
    Ok(EncoderOutput { causal, noncausal })
}

fn project<S: Real>(g: &mut Graph<'_, S>, prefix: &str, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
    let scope = g.fixed_scope(prefix);
    let w = g.param(&scope, "w")?;
    let b = g.param(&scope, "b")?;
    let y = g.tape.matmul(x, w)?;
    Ok(g.tape.add_bias(y, b)?)
}

fn module_specs(out: &mut Vec<ParamSpec>, enc: &EncoderConfig, path: ModulePath) {
    let d = enc.dim(path.stack);
    let mut b = SpecBuilder { out, prefix: path.to_string(), path: Some(path) };
    b.norm("ln", d);
    match path.site {
        Site::FfnStart | Site::FfnEnd => {
            let hidden = enc.ffn_multiplier * d;
            b.linear("w1", Some("b1"), d, hidden);
            b.linear("w2", Some("b2"), hidden, d);
        }
        Site::Mhsa => {
            for (w, bias) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                b.linear(w, Some(bias), d, d);
            }
            if enc.relative_position(path.stack) {
                let dh = d / enc.num_heads;
                b.xavier("wp", vec![d, d], d, d);
                b.zeros("pos_u", vec![enc.num_heads, dh]);
                b.zeros("pos_v", vec![enc.num_heads, dh]);
            }
        }
        Site::Conv => {
            b.linear("pw1.w", Some("pw1.b"), d, 2 * d);
            b.xavier("dw.w", vec![enc.conv_kernel, d], enc.conv_kernel, enc.conv_kernel);
            b.zeros("dw.b", vec![d]);
            b.norm("gn", d);
            b.linear("pw2.w", Some("pw2.b"), d, d);
        }
        _ => unreachable!("not a block module"),
    }
}

/// Every encoder parameter: per stack, input projection, blocks, output
/// projection.
pub fn encoder_specs(enc: &EncoderConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for stack in Stack::ENCODERS {
        let d = enc.dim(stack);
        let din = if stack == Stack::Causal { enc.feature_dim } else { enc.d_causal };
        let mut proj = SpecBuilder { out: &mut out, prefix: format!("{}.input_proj", stack.name()), path: None };
        proj.linear("w", Some("b"), din, d);
        for block in 0..enc.blocks(stack) {
            for site in Site::MODULES {
                if site != Site::Mhsa || enc.has_mhsa(stack, block) {
                    module_specs(&mut out, enc, ModulePath::module(stack, block, site));
                }
            }
            let path = ModulePath::block(stack, block);
            SpecBuilder { out: &mut out, prefix: path.to_string(), path: Some(path) }.norm("norm", d);
        }
        let mut proj = SpecBuilder { out: &mut out, prefix: format!("{}.output_proj", stack.name()), path: None };
        proj.linear("w", Some("b"), d, enc.joint_projection_dim);
    }
    out
}

/// Component selector for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    /// One module kind summed over every block of the stack.
    Module(Site),
    /// One whole block, including its final norm.
    Block(usize),
    /// All blocks of the stack, without projections.
    Encoder,
    /// Everything attributed to the stack, projections included.
    All,
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownSelector(s.to_owned());
        Ok(match s {
            "encoder" => Self::Encoder,
            "all" => Self::All,
            _ => {
                if let Some(k) = s.strip_prefix("block-").or_else(|| s.strip_prefix("block")) {
                    Self::Block(k.parse().map_err(|_| bad())?)
                } else {
                    let site: Site = s.parse().map_err(|_| bad())?;
                    if site == Site::Block {
                        return Err(bad());
                    }
                    Self::Module(site)
                }
            }
        })
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Module(site) => f.write_str(site.name()),
            Self::Block(k) => write!(f, "block-{k}"),
            Self::Encoder => f.write_str("encoder"),
            Self::All => f.write_str("all"),
        }
    }
}

/// Exact parameter count of the selected components of `stack`.
pub fn count_params(config: &ModelConfig, stack: Stack, selector: Selector) -> Result<usize> {
    let reject = || Error::UnknownSelector(format!("{selector} for stack {}", stack.name()));
    let layout = config.backbone_layout();
    let owned = |s: &&ParamSpec| s.key.starts_with(&format!("{}.", stack.name()));
    let sum = |f: &dyn Fn(&ParamSpec) -> bool| layout.iter().filter(owned).filter(|s| f(s)).map(ParamSpec::numel).sum();
    match selector {
        Selector::All => Ok(sum(&|_| true)),
        Selector::Module(site) if stack.is_encoder() == site.is_module() => {
            Ok(sum(&|s| s.path.is_some_and(|p| p.site == site)))
        }
        Selector::Block(k) if stack.is_encoder() && k < config.encoder.blocks(stack) => {
            Ok(sum(&|s| s.path.is_some_and(|p| p.block == Some(k))))
        }
        Selector::Encoder if stack.is_encoder() => Ok(sum(&|s| s.path.is_some())),
        _ => Err(reject()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_parse() {
        assert_eq!("ffn_start".parse::<Selector>().unwrap(), Selector::Module(Site::FfnStart));
        assert_eq!("block-3".parse::<Selector>().unwrap(), Selector::Block(3));
        assert_eq!("block3".parse::<Selector>().unwrap(), Selector::Block(3));
        assert!("attention".parse::<Selector>().is_err());
        assert!("block".parse::<Selector>().is_err());
    }

    #[test]
    fn encoder_total_is_modules_plus_remainders() {
        let cfg = ModelConfig::desk();
        for stack in Stack::ENCODERS {
            let modules: usize =
                Site::MODULES.iter().map(|&s| count_params(&cfg, stack, Selector::Module(s)).unwrap()).sum();
            let blocks: usize =
                (0..cfg.encoder.blocks(stack)).map(|k| count_params(&cfg, stack, Selector::Block(k)).unwrap()).sum();
            let d = cfg.encoder.dim(stack);
            let norms = 2 * d * cfg.encoder.blocks(stack);
            assert_eq!(blocks, modules + norms);
            assert_eq!(count_params(&cfg, stack, Selector::Encoder).unwrap(), blocks);
            assert!(count_params(&cfg, stack, Selector::All).unwrap() > blocks);
        }
        assert!(count_params(&cfg, Stack::Causal, Selector::Block(3)).is_err());
        assert!(count_params(&cfg, Stack::DecoderCausal, Selector::Module(Site::Conv)).is_err());
    }
}
