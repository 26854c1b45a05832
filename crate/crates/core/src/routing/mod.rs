//! Domain registry and routing of each component to backbone or per-domain
//! parameters, plus bottleneck adapters.
//!
//! A domain owns exactly the parameters its [`DomainPlan`] allocates: fresh
//! copies of overridden components and its adapters. Nothing else is ever
//! trainable for that domain, and no domain reads another domain's
//! parameters.

mod adapter;
mod path;
mod plan;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub(crate) use adapter::with_adapters;
pub use adapter::{adapter_branch, apply_adapter, AdapterVars};
pub use path::{ModulePath, Site, Stack};
pub use plan::{all_paths, module_sites, path_exists, Activation, AdapterMode, AdapterSpec, DomainPlan};

use crate::conformer::{self, EncoderOutput};
use crate::error::{Error, Result};
use crate::model::{Graph, Init, ModelConfig, Owner, ParamSet, ParamSpec};
use crate::tensor::{Real, Tensor};

/// Small integer handle of a domain. Domain 0 is the backbone's own
/// training domain and owns no per-domain parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub u16);

impl DomainId {
    pub const BACKBONE: DomainId = DomainId(0);
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A registered domain and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainEntry<S = f32> {
    pub id: DomainId,
    pub plan: DomainPlan,
    pub params: ParamSet<S>,
}

impl<S> DomainEntry<S> {
    pub fn name(&self) -> &str {
        &self.plan.domain
    }

    /// Whether this domain supplies its own parameters for `path`.
    pub fn overrides(&self, path: &ModulePath) -> bool {
        self.plan.overrides.iter().any(|o| path.within(o))
    }
}

/// Parameters a plan allocates, in a fixed order: overridden components
/// (same shapes as the backbone) followed by adapters.
pub fn domain_layout(config: &ModelConfig, plan: &DomainPlan) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = config
        .backbone_layout()
        .into_iter()
        .filter(|s| s.path.is_some_and(|p| plan.overrides.iter().any(|o| p.within(o))))
        .collect();
    for spec in &plan.adapters {
        for site in &spec.sites {
            specs.extend(adapter_layout(config, site, spec.bottleneck));
        }
    }
    specs
}

/// The four arrays of one adapter at `site`.
pub fn adapter_layout(config: &ModelConfig, site: &ModulePath, bottleneck: usize) -> Vec<ParamSpec> {
    let d = config.encoder.dim(site.stack);
    let b = bottleneck;
    let spec = |name: &str, shape: Vec<usize>, init| ParamSpec {
        key: format!("{site}.adapter.{name}"),
        shape,
        init,
        path: Some(*site),
    };
    vec![
        spec("w_down", vec![d, b], Init::Xavier { fan_in: d, fan_out: b }),
        spec("b_down", vec![b], Init::Zeros),
        spec("w_up", vec![b, d], Init::Zeros),
        spec("b_up", vec![d], Init::Zeros),
    ]
}

/// Closed-form adapter size per site: `2 d b + b + d`.
pub fn adapter_params_per_site(d: usize, b: usize) -> usize {
    2 * d * b + b + d
}

/// Backbone plus any number of per-domain parameter sets.
#[derive(Clone, Debug)]
pub struct MdaModel<S: Real = f32> {
    config: ModelConfig,
    backbone_domain: String,
    backbone: ParamSet<S>,
    domains: BTreeMap<DomainId, DomainEntry<S>>,
}

fn check_shapes<S: Real>(specs: &[ParamSpec], params: &ParamSet<S>) -> Result<()> {
    if specs.len() != params.len() {
        let expected: BTreeSet<&String> = specs.iter().map(|s| &s.key).collect();
        let extra = params.keys().find(|k| !expected.contains(k));
        let missing = specs.iter().find(|s| !params.contains(&s.key));
        return Err(match (missing, extra) {
            (Some(m), _) => Error::MissingParam(m.key.clone()),
            (_, Some(e)) => Error::InvalidPath(e.clone()),
            _ => Error::Config("parameter count mismatch".into()),
        });
    }
    for spec in specs {
        let value = params.get(&spec.key).ok_or_else(|| Error::MissingParam(spec.key.clone()))?;
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::BundleShape {
                key: spec.key.clone(),
                expected: spec.shape.clone(),
                found: value.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<S: Real> MdaModel<S> {
    pub fn new(config: ModelConfig, backbone_domain: impl Into<String>, backbone: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        check_shapes(&config.backbone_layout(), &backbone)?;
        Ok(Self { config, backbone_domain: backbone_domain.into(), backbone, domains: BTreeMap::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &ParamSet<S> {
        &self.backbone
    }

    pub fn backbone_domain(&self) -> &str {
        &self.backbone_domain
    }

    pub(crate) fn backbone_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.backbone
    }

    pub fn domain(&self, id: DomainId) -> Result<&DomainEntry<S>> {
        self.domains.get(&id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub(crate) fn domain_mut(&mut self, id: DomainId) -> Result<&mut DomainEntry<S>> {
        self.domains.get_mut(&id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainEntry<S>> {
        self.domains.values()
    }

    /// Looks a domain up by name; the backbone domain maps to id 0.
    pub fn domain_id(&self, name: &str) -> Result<DomainId> {
        if name == self.backbone_domain {
            return Ok(DomainId::BACKBONE);
        }
        self.domains
            .values()
            .find(|d| d.name() == name)
            .map(|d| d.id)
            .ok_or_else(|| Error::UnknownDomain(name.to_owned()))
    }

    /// Name of a registered domain (the backbone domain for id 0).
    pub fn domain_name(&self, id: DomainId) -> String {
        match self.domains.get(&id) {
            Some(d) => d.name().to_owned(),
            None if id == DomainId::BACKBONE => self.backbone_domain.clone(),
            None => id.to_string(),
        }
    }

    fn check_registered(&self, id: DomainId) -> Result<()> {
        if id == DomainId::BACKBONE || self.domains.contains_key(&id) {
            Ok(())
        } else {
            Err(Error::UnknownDomain(id.to_string()))
        }
    }

    /// Allocates fresh parameters for `plan` under the smallest free id.
    /// Overrides are Xavier-initialized, adapters start at identity.
    pub fn register_domain(&mut self, plan: DomainPlan) -> Result<DomainId> {
        let id = (1..=u16::MAX)
            .map(DomainId)
            .find(|id| !self.domains.contains_key(id))
            .ok_or_else(|| Error::Config("domain ids exhausted".into()))?;
        let specs = domain_layout(&self.config, &plan);
        let params = ParamSet::<f32>::initialize(&specs, plan.seed, &format!("domain:{}", plan.domain)).cast();
        self.insert_domain(DomainEntry { id, plan, params })?;
        Ok(id)
    }

    /// Adds a domain with existing parameters, e.g. loaded from a bundle.
    pub fn insert_domain(&mut self, entry: DomainEntry<S>) -> Result<()> {
        if entry.id == DomainId::BACKBONE
            || entry.name() == self.backbone_domain
            || self.domains.contains_key(&entry.id)
            || self.domains.values().any(|d| d.name() == entry.name())
        {
            return Err(Error::DuplicateDomain(entry.name().to_owned()));
        }
        entry.plan.validate(&self.config)?;
        check_shapes(&domain_layout(&self.config, &entry.plan), &entry.params)?;
        self.domains.insert(entry.id, entry);
        Ok(())
    }

    pub fn remove_domain(&mut self, id: DomainId) -> Result<DomainEntry<S>> {
        self.domains.remove(&id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Parameter source of `path` for `domain`: its own override, else the
    /// backbone.
    pub fn resolve(&self, path: &ModulePath, domain: DomainId) -> Result<Owner> {
        if !path_exists(&self.config, path) {
            return Err(Error::InvalidPath(path.to_string()));
        }
        self.check_registered(domain)?;
        Ok(match self.domains.get(&domain) {
            Some(d) if d.overrides(path) => Owner::Domain(domain),
            _ => Owner::Backbone,
        })
    }

    /// Keys of the parameters training for `domain` may update.
    pub fn trainable_mask(&self, domain: DomainId) -> Result<BTreeSet<String>> {
        self.check_registered(domain)?;
        Ok(self.domains.get(&domain).map(|d| d.params.keys().cloned().collect()).unwrap_or_default())
    }

    /// Graph routed for `domain`. `train` makes the owner of the domain's
    /// parameters (or the backbone, for domain 0) differentiable.
    pub fn graph(&self, domain: DomainId, train: bool) -> Result<Graph<'_, S>> {
        self.check_registered(domain)?;
        let entry = self.domains.get(&domain);
        let trainable = train.then(|| entry.map_or(Owner::Backbone, |e| Owner::Domain(e.id)));
        Ok(Graph::new(&self.backbone, entry, trainable))
    }

    /// Encoder outputs for `features` routed through `domain`.
    pub fn forward_with_domain(&self, features: &Tensor<S>, domain: DomainId) -> Result<EncoderOutput<Tensor<S>>> {
        let mut g = self.graph(domain, false)?;
        let out = conformer::encode(&mut g, &self.config.encoder, features, true)?;
        Ok(EncoderOutput {
            causal: g.tape.value(out.causal).clone(),
            noncausal: out.noncausal.map(|v| g.tape.value(v).clone()),
        })
    }
}
