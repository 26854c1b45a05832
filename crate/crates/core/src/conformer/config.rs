use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::Stack;

/// Cascaded causal / non-causal conformer encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub causal_blocks: usize,
    pub noncausal_blocks: usize,
    pub d_causal: usize,
    pub d_noncausal: usize,
    pub ffn_multiplier: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    /// Leading causal blocks built without an MHSA module.
    pub mhsa_skip_first_n: usize,
    /// Total look-ahead of the non-causal stack, in frames.
    pub right_context_frames: usize,
    pub joint_projection_dim: usize,
    #[serde(default)]
    pub causal_relative_position: bool,
    #[serde(default = "default_true")]
    pub noncausal_relative_position: bool,
    /// Scale FFN residual branches by 1/2 (macaron style) instead of 1.
    #[serde(default)]
    pub half_step_ffn: bool,
    #[serde(default = "default_groups")]
    pub conv_norm_groups: usize,
}

fn default_true() -> bool {
    true
}

fn default_groups() -> usize {
    8
}

/// Attention and convolution reach of one module. `left == None` means
/// unbounded history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextSpec {
    pub left: Option<usize>,
    pub right: usize,
}

impl ContextSpec {
    pub const CAUSAL: ContextSpec = ContextSpec { left: None, right: 0 };

    pub fn is_causal(&self) -> bool {
        self.right == 0
    }
}

/// Per-block look-ahead split between the MHSA and Conv modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockContext {
    pub mhsa: ContextSpec,
    pub conv: ContextSpec,
}

impl BlockContext {
    pub fn right_frames(&self) -> usize {
        self.mhsa.right + self.conv.right
    }
}

impl EncoderConfig {
    pub fn blocks(&self, stack: Stack) -> usize {
        match stack {
            Stack::Causal => self.causal_blocks,
            Stack::NonCausal => self.noncausal_blocks,
            _ => 0,
        }
    }

    pub fn dim(&self, stack: Stack) -> usize {
        match stack {
            Stack::Causal => self.d_causal,
            _ => self.d_noncausal,
        }
    }

    pub fn has_mhsa(&self, stack: Stack, block: usize) -> bool {
        !(stack == Stack::Causal && block < self.mhsa_skip_first_n)
    }

    pub fn relative_position(&self, stack: Stack) -> bool {
        match stack {
            Stack::Causal => self.causal_relative_position,
            _ => self.noncausal_relative_position,
        }
    }

    pub fn ffn_residual_scale(&self) -> f64 {
        if self.half_step_ffn {
            0.5
        } else {
            1.0
        }
    }

    /// Look-ahead budget of each block. The non-causal budget is spread as
    /// evenly as possible over blocks; within a block, MHSA takes the larger
    /// half and Conv the rest (capped by the kernel span).
    pub fn block_context(&self, stack: Stack, block: usize) -> BlockContext {
        if stack == Stack::Causal {
            return BlockContext { mhsa: ContextSpec::CAUSAL, conv: ContextSpec::CAUSAL };
        }
        let n = self.noncausal_blocks.max(1);
        let budget = self.right_context_frames / n + usize::from(block < self.right_context_frames % n);
        let conv_right = (budget / 2).min(self.conv_kernel - 1);
        let mhsa_right = budget - conv_right;
        BlockContext {
            mhsa: ContextSpec { left: None, right: mhsa_right },
            conv: ContextSpec { left: None, right: conv_right },
        }
    }

    /// Look-ahead of the whole non-causal path: sum of per-block budgets.
    pub fn total_right_context(&self) -> usize {
        (0..self.noncausal_blocks).map(|b| self.block_context(Stack::NonCausal, b).right_frames()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.d_causal == 0 || self.d_noncausal == 0 || self.joint_projection_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.num_heads == 0 || self.d_causal % self.num_heads != 0 || self.d_noncausal % self.num_heads != 0 {
            return fail(format!(
                "model dims {}/{} not divisible by {} heads",
                self.d_causal, self.d_noncausal, self.num_heads
            ));
        }
        if self.conv_kernel == 0 {
            return fail("conv_kernel must be positive".into());
        }
        if self.ffn_multiplier == 0 {
            return fail("ffn_multiplier must be positive".into());
        }
        if self.conv_norm_groups == 0
            || self.d_causal % self.conv_norm_groups != 0
            || self.d_noncausal % self.conv_norm_groups != 0
        {
            return fail(format!("model dims not divisible into {} norm groups", self.conv_norm_groups));
        }
        if self.mhsa_skip_first_n > self.causal_blocks {
            return fail("mhsa_skip_first_n exceeds causal block count".into());
        }
        if self.total_right_context() != self.right_context_frames {
            return fail(format!(
                "right context of {} frames does not fit {} blocks with kernel {}",
                self.right_context_frames, self.noncausal_blocks, self.conv_kernel
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn desk_context_split() {
        let enc = ModelConfig::desk().encoder;
        for b in 0..enc.noncausal_blocks {
            let ctx = enc.block_context(Stack::NonCausal, b);
            assert_eq!(ctx.right_frames(), 2);
            assert_eq!((ctx.mhsa.right, ctx.conv.right), (1, 1));
        }
        assert_eq!(enc.total_right_context(), enc.right_context_frames);
        assert!(enc.block_context(Stack::Causal, 0).mhsa.is_causal());
    }

    #[test]
    fn uneven_budget_goes_to_early_blocks() {
        let mut enc = ModelConfig::desk().encoder;
        enc.right_context_frames = 10;
        let budgets: Vec<_> = (0..4).map(|b| enc.block_context(Stack::NonCausal, b).right_frames()).collect();
        assert_eq!(budgets, vec![3, 3, 2, 2]);
        assert!(enc.validate().is_ok());
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut enc = ModelConfig::desk().encoder;
        enc.num_heads = 3;
        assert!(enc.validate().is_err());
    }
}
