//! Model configuration, parameter layout and the forward-pass graph that
//! binds parameters from the backbone or a domain onto a tape.

mod graph;
mod params;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{AdapterBinding, Graph, Owner, Scope};
pub(crate) use params::SpecBuilder;
pub use params::{Init, ParamSet, ParamSpec};

use crate::conformer::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::transducer::{self, DecoderConfig};

/// Domain one-hot appended to every feature frame (multidomain baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneHotInput {
    pub width: usize,
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub domain_onehot: Option<OneHotInput>,
    pub init_seed: u64,
}

const DESK_JSON: &str = include_str!("../../presets/desk.json");
const PAPER_JSON: &str = include_str!("../../presets/paper.json");

impl ModelConfig {
    pub fn desk() -> Self {
        serde_json::from_str(DESK_JSON).expect("bundled desk preset parses")
    }

    pub fn paper() -> Self {
        serde_json::from_str(PAPER_JSON).expect("bundled paper preset parses")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(onehot) = &self.domain_onehot {
            if onehot.domains.len() > onehot.width {
                return Err(Error::Config(format!(
                    "{} domains do not fit a {}-wide one-hot",
                    onehot.domains.len(),
                    onehot.width
                )));
            }
            if onehot.width >= self.encoder.feature_dim {
                return Err(Error::Config("feature_dim must include the one-hot width".into()));
            }
        }
        Ok(())
    }

    /// Width of the raw acoustic features, excluding any domain one-hot.
    pub fn raw_feature_dim(&self) -> usize {
        self.encoder.feature_dim - self.domain_onehot.as_ref().map_or(0, |o| o.width)
    }

    /// Canonical JSON (object keys sorted) used for fingerprints.
    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.canonical_json())
    }

    /// Every backbone parameter in a fixed order.
    pub fn backbone_layout(&self) -> Vec<ParamSpec> {
        let mut specs = conformer::encoder_specs(&self.encoder);
        for stack in crate::routing::Stack::ENCODERS {
            specs.extend(transducer::decoder_specs(&self.decoder, self.encoder.joint_projection_dim, stack.partner()));
        }
        specs
    }

    pub fn init_backbone(&self) -> ParamSet<f32> {
        ParamSet::initialize(&self.backbone_layout(), self.init_seed, "backbone")
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map type is ordered, so a round trip through
    // `Value` sorts every object's keys.
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub(crate) fn fingerprint_of(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..16])
}
