use crate::encoder::ParamSet;
use crate::error::{Error, Result};

/// Momentum buffers plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub momentum: ParamSet,
    pub iteration: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            momentum: ParamSet::zeros_like(params),
            iteration: 0,
        }
    }
}

/// Step-decay schedule: `lr_init / 2^⌊10·iteration/total⌋`.
pub fn lr_at(iteration: u64, total: u64, lr_init: f64) -> Result<f64> {
    if iteration >= total {
        return Err(Error::OutOfRange {
            what: "iteration",
            value: iteration as f64,
            range: format!("[0, {total})"),
        });
    }
    let halvings = (10 * iteration / total) as i32;
    Ok(lr_init * 0.5f64.powi(halvings))
}

/// SGD with momentum and L2 weight decay, in place:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let shapes_match = |a: &ParamSet, b: &ParamSet| {
        a.len() == b.len() && a.values().iter().zip(b.values()).all(|(x, y)| x.dim() == y.dim())
    };
    if !shapes_match(params, grads) || !shapes_match(params, &state.momentum) {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and momentum buffers differ in shape".into(),
        ));
    }
    for ((p, g), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(state.momentum.values_mut())
    {
        ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
    }
    Ok(())
}
