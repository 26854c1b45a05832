use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::routing::{Activation, AdapterMode, DomainEntry, DomainId, ModulePath};
use crate::tensor::{Real, Tape, Var};

use super::ParamSet;

/// Who a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Backbone,
    Domain(DomainId),
}

/// Resolved parameter source for one component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scope {
    pub owner: Owner,
    pub prefix: String,
}

/// An adapter the active domain attaches at a site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterBinding {
    pub mode: AdapterMode,
    pub activation: Activation,
    pub prefix: String,
}

/// One forward pass: a tape plus the parameters bound onto it so far.
///
/// Parameters are bound lazily, once per graph, from the backbone or from
/// the active domain according to its overrides. Only parameters of the
/// `trainable` owner are differentiable leaves.
pub struct Graph<'m, S: Real = f32> {
    pub tape: Tape<S>,
    backbone: &'m ParamSet<S>,
    domain: Option<&'m DomainEntry<S>>,
    trainable: Option<Owner>,
    bound: BTreeMap<(Owner, String), Var>,
}

impl<'m, S: Real> Graph<'m, S> {
    pub fn new(backbone: &'m ParamSet<S>, domain: Option<&'m DomainEntry<S>>, trainable: Option<Owner>) -> Self {
        Self { tape: Tape::new(), backbone, domain, trainable, bound: BTreeMap::new() }
    }

    /// Inference over the backbone alone.
    pub fn backbone(backbone: &'m ParamSet<S>) -> Self {
        Self::new(backbone, None, None)
    }

    pub fn domain(&self) -> Option<&'m DomainEntry<S>> {
        self.domain
    }

    pub fn scope(&self, path: &ModulePath) -> Scope {
        let owner = match self.domain {
            Some(d) if d.overrides(path) => Owner::Domain(d.id),
            _ => Owner::Backbone,
        };
        Scope { owner, prefix: path.to_string() }
    }

    /// Backbone-only component addressed by a raw key prefix.
    pub fn fixed_scope(&self, prefix: &str) -> Scope {
        Scope { owner: Owner::Backbone, prefix: prefix.to_owned() }
    }

    pub fn param(&mut self, scope: &Scope, name: &str) -> Result<Var> {
        let key = format!("{}.{name}", scope.prefix);
        self.bind(scope.owner, key)
    }

    fn bind(&mut self, owner: Owner, key: String) -> Result<Var> {
        if let Some(&v) = self.bound.get(&(owner, key.clone())) {
            return Ok(v);
        }
        let source = match owner {
            Owner::Backbone => self.backbone,
            Owner::Domain(_) => &self.domain.expect("domain owner implies an active domain").params,
        };
        let value = source.get(&key).ok_or_else(|| Error::MissingParam(key.clone()))?.clone();
        let var = self.tape.leaf(value, self.trainable == Some(owner));
        self.bound.insert((owner, key), var);
        Ok(var)
    }

    /// Adapters the active domain places at `path`.
    pub fn adapters(&self, path: &ModulePath) -> Vec<AdapterBinding> {
        let Some(d) = self.domain else { return Vec::new() };
        d.plan
            .adapters
            .iter()
            .filter(|a| a.sites.contains(path))
            .map(|a| AdapterBinding { mode: a.mode, activation: a.activation, prefix: format!("{path}.adapter") })
            .collect()
    }

    pub fn adapter_param(&mut self, binding: &AdapterBinding, name: &str) -> Result<Var> {
        let id = self.domain.expect("adapters imply an active domain").id;
        self.bind(Owner::Domain(id), format!("{}.{name}", binding.prefix))
    }

    /// Differentiable leaves bound so far, keyed by owner and parameter key.
    pub fn trainable_leaves(&self) -> Vec<(Owner, String, Var)> {
        self.bound
            .iter()
            .filter(|((o, _), _)| Some(*o) == self.trainable)
            .map(|((o, k), v)| (*o, k.clone(), *v))
            .collect()
    }

    pub fn into_tape(self) -> Tape<S> {
        self.tape
    }
}
