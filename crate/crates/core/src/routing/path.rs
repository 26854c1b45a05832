use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stack {
    Causal,
    NonCausal,
    DecoderCausal,
    DecoderNonCausal,
}

impl Stack {
    pub const ENCODERS: [Stack; 2] = [Stack::Causal, Stack::NonCausal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Causal => "causal",
            Self::NonCausal => "noncausal",
            Self::DecoderCausal => "decoder_causal",
            Self::DecoderNonCausal => "decoder_noncausal",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Self::Causal | Self::NonCausal)
    }

    /// Decoder attached to an encoder stack (and vice versa).
    pub fn partner(self) -> Stack {
        match self {
            Self::Causal => Self::DecoderCausal,
            Self::NonCausal => Self::DecoderNonCausal,
            Self::DecoderCausal => Self::Causal,
            Self::DecoderNonCausal => Self::NonCausal,
        }
    }
}

impl FromStr for Stack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "causal" | "c" => Self::Causal,
            "noncausal" | "nc" => Self::NonCausal,
            "decoder_causal" => Self::DecoderCausal,
            "decoder_noncausal" => Self::DecoderNonCausal,
            _ => return Err(Error::InvalidPath(s.to_owned())),
        })
    }
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Stack {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Stack {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    FfnStart,
    Mhsa,
    Conv,
    FfnEnd,
    Block,
    Prediction,
    Joint,
}

impl Site {
    /// The four modules of a conformer block, in execution order.
    pub const MODULES: [Site; 4] = [Site::FfnStart, Site::Mhsa, Site::Conv, Site::FfnEnd];

    pub fn name(self) -> &'static str {
        match self {
            Self::FfnStart => "ffn_start",
            Self::Mhsa => "mhsa",
            Self::Conv => "conv",
            Self::FfnEnd => "ffn_end",
            Self::Block => "block",
            Self::Prediction => "prediction",
            Self::Joint => "joint",
        }
    }

    pub fn is_module(self) -> bool {
        Self::MODULES.contains(&self)
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ffn_start" => Self::FfnStart,
            "mhsa" => Self::Mhsa,
            "conv" => Self::Conv,
            "ffn_end" => Self::FfnEnd,
            "block" => Self::Block,
            "prediction" => Self::Prediction,
            "joint" => Self::Joint,
            _ => return Err(Error::InvalidPath(s.to_owned())),
        })
    }
}

/// Address of an overridable component, e.g. `noncausal.block3.ffn_end`,
/// `causal.block0` (a whole block) or `decoder_noncausal.joint`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModulePath {
    pub stack: Stack,
    pub block: Option<usize>,
    pub site: Site,
}

impl ModulePath {
    pub fn module(stack: Stack, block: usize, site: Site) -> Self {
        Self { stack, block: Some(block), site }
    }

    pub fn block(stack: Stack, block: usize) -> Self {
        Self { stack, block: Some(block), site: Site::Block }
    }

    pub fn decoder(stack: Stack, site: Site) -> Self {
        Self { stack, block: None, site }
    }

    /// The whole-block path enclosing a module path.
    pub fn enclosing_block(&self) -> Option<ModulePath> {
        match (self.block, self.site.is_module()) {
            (Some(b), true) => Some(Self::block(self.stack, b)),
            _ => None,
        }
    }

    /// Whether `self` lies inside (or equals) `other`.
    pub fn within(&self, other: &ModulePath) -> bool {
        self == other || self.enclosing_block().as_ref() == Some(other)
    }

    fn is_well_formed(&self) -> bool {
        match self.site {
            Site::Prediction | Site::Joint => !self.stack.is_encoder() && self.block.is_none(),
            _ => self.stack.is_encoder() && self.block.is_some(),
        }
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.block, self.site) {
            (Some(b), Site::Block) => write!(f, "{}.block{b}", self.stack.name()),
            (Some(b), site) => write!(f, "{}.block{b}.{}", self.stack.name(), site.name()),
            (None, site) => write!(f, "{}.{}", self.stack.name(), site.name()),
        }
    }
}

impl FromStr for ModulePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPath(s.to_owned());
        let mut parts = s.split('.');
        let stack: Stack = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let second = parts.next().ok_or_else(bad)?;
        let path = if let Some(idx) = second.strip_prefix("block") {
            let block = idx.parse().map_err(|_| bad())?;
            match parts.next() {
                None => Self::block(stack, block),
                Some(site) => Self::module(stack, block, site.parse().map_err(|_| bad())?),
            }
        } else {
            Self::decoder(stack, second.parse().map_err(|_| bad())?)
        };
        if parts.next().is_some() || !path.is_well_formed() {
            return Err(bad());
        }
        Ok(path)
    }
}

impl Serialize for ModulePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModulePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
