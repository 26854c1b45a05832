use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ModulePath, Site, Stack};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Applied to a module's output, between two adjacent modules.
    Sequential,
    /// Reads the module's input; its output is added next to the module's.
    Parallel,
}

impl AdapterMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Swish,
    Identity,
}

/// Bottleneck adapters of one shape at a set of module sites.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    pub sites: BTreeSet<ModulePath>,
    pub bottleneck: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Which components a domain replaces and where it attaches adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainPlan {
    pub domain: String,
    #[serde(default)]
    pub overrides: BTreeSet<ModulePath>,
    #[serde(default)]
    pub adapters: Vec<AdapterSpec>,
    /// Seed for the domain's fresh parameters.
    #[serde(default)]
    pub seed: u64,
}

/// Every path the model structure admits, in a fixed order.
pub fn all_paths(config: &ModelConfig) -> Vec<ModulePath> {
    let mut out = Vec::new();
    for stack in Stack::ENCODERS {
        for b in 0..config.encoder.blocks(stack) {
            out.push(ModulePath::block(stack, b));
            for site in Site::MODULES {
                if site != Site::Mhsa || config.encoder.has_mhsa(stack, b) {
                    out.push(ModulePath::module(stack, b, site));
                }
            }
        }
    }
    for stack in [Stack::DecoderCausal, Stack::DecoderNonCausal] {
        out.push(ModulePath::decoder(stack, Site::Prediction));
        out.push(ModulePath::decoder(stack, Site::Joint));
    }
    out
}

/// Module sites matching a stack / site filter; `None` matches everything.
pub fn module_sites(config: &ModelConfig, stacks: &[Stack], sites: &[Site]) -> BTreeSet<ModulePath> {
    all_paths(config)
        .into_iter()
        .filter(|p| p.site.is_module() && stacks.contains(&p.stack) && sites.contains(&p.site))
        .collect()
}

pub fn path_exists(config: &ModelConfig, path: &ModulePath) -> bool {
    match path.block {
        Some(b) => {
            path.stack.is_encoder()
                && b < config.encoder.blocks(path.stack)
                && (path.site != Site::Mhsa || config.encoder.has_mhsa(path.stack, b))
        }
        None => !path.stack.is_encoder() && matches!(path.site, Site::Prediction | Site::Joint),
    }
}

impl DomainPlan {
    pub fn empty(domain: impl Into<String>) -> Self {
        Self { domain: domain.into(), overrides: BTreeSet::new(), adapters: Vec::new(), seed: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty() && self.adapters.iter().all(|a| a.sites.is_empty())
    }

    /// The shipped best recipe: parallel adapters on the causal FFN sites
    /// plus per-domain FFN-end modules in the non-causal stack.
    pub fn final_recipe(config: &ModelConfig, domain: &str, bottleneck: usize, seed: u64) -> Self {
        Self {
            domain: domain.into(),
            overrides: module_sites(config, &[Stack::NonCausal], &[Site::FfnEnd]),
            adapters: vec![AdapterSpec {
                mode: AdapterMode::Parallel,
                sites: module_sites(config, &[Stack::Causal], &[Site::FfnStart, Site::FfnEnd]),
                bottleneck,
                activation: Activation::Swish,
            }],
            seed,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.domain.is_empty() {
            return Err(Error::Config("domain name must not be empty".into()));
        }
        for path in &self.overrides {
            if !path_exists(config, path) {
                return Err(Error::InvalidPath(path.to_string()));
            }
            if self.overrides.iter().any(|o| o != path && path.within(o)) {
                return Err(Error::SiteConflict(path.to_string()));
            }
        }
        let mut seen = BTreeSet::new();
        for spec in &self.adapters {
            if spec.bottleneck == 0 {
                return Err(Error::Config("adapter bottleneck must be at least 1".into()));
            }
            for site in &spec.sites {
                if !site.site.is_module() || !path_exists(config, site) {
                    return Err(Error::InvalidPath(site.to_string()));
                }
                if !seen.insert(*site) || self.overrides.iter().any(|o| site.within(o)) {
                    return Err(Error::SiteConflict(site.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}
