use crate::error::Result;
use crate::model::{AdapterBinding, Graph};
use crate::tensor::{Real, Tape, Var};

use super::{Activation, AdapterMode};

/// Adapter weights bound on a tape: `W_down [d x b]`, `b_down [b]`,
/// `W_up [b x d]`, `b_up [d]`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// `f(x W_down + b_down) W_up + b_up`.
pub fn adapter_branch<S: Real>(tape: &mut Tape<S>, x: Var, p: &AdapterVars, activation: Activation) -> Result<Var> {
    let down = tape.matmul(x, p.w_down)?;
    let down = tape.add_bias(down, p.b_down)?;
    let act = match activation {
        Activation::Swish => tape.swish(down)?,
        Activation::Identity => down,
    };
    let up = tape.matmul(act, p.w_up)?;
    Ok(tape.add_bias(up, p.b_up)?)
}

/// Residual adapter `h + branch(h)`.
pub fn apply_adapter<S: Real>(tape: &mut Tape<S>, h: Var, p: &AdapterVars, activation: Activation) -> Result<Var> {
    let branch = adapter_branch(tape, h, p, activation)?;
    Ok(tape.add(h, branch)?)
}

pub(crate) fn bind<S: Real>(g: &mut Graph<'_, S>, binding: &AdapterBinding) -> Result<AdapterVars> {
    Ok(AdapterVars {
        w_down: g.adapter_param(binding, "w_down")?,
        b_down: g.adapter_param(binding, "b_down")?,
        w_up: g.adapter_param(binding, "w_up")?,
        b_up: g.adapter_param(binding, "b_up")?,
    })
}

/// Runs a module site: `module(x)` followed by every adapter the active
/// domain attaches there.
pub(crate) fn with_adapters<'m, S: Real>(
    g: &mut Graph<'m, S>,
    path: &super::ModulePath,
    x: Var,
    module: impl FnOnce(&mut Graph<'m, S>, Var) -> Result<Var>,
) -> Result<Var> {
    let mut y = module(g, x)?;
    for binding in g.adapters(path) {
        let p = bind(g, &binding)?;
        y = match binding.mode {
            AdapterMode::Sequential => apply_adapter(&mut g.tape, y, &p, binding.activation)?,
            AdapterMode::Parallel => {
                let branch = adapter_branch(&mut g.tape, x, &p, binding.activation)?;
                g.tape.add(y, branch)?
            }
        };
    }
    Ok(y)
}
