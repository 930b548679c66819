//! Central finite-difference verification of analytic gradients.

use std::collections::HashMap;

use super::{NodeId, ParamSet, Tape, Tensor};
use crate::Result;

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error guarded against tiny denominators, so finite-difference
/// noise on near-zero gradients does not register as failure while real
/// absolute errors still do.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks the gradients of a tape-built scalar function of several leaf
/// tensors. `build` receives a fresh tape plus the leaves and returns the
/// loss node. Returns the maximum guarded relative error over every input
/// coordinate.
pub fn check_fn(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((
            value,
            ids.iter().map(|&id| grads.get(id).cloned()).collect(),
        ))
    };

    let (_, analytic) = eval(inputs)?;
    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let orig = input.data()[coord];
            work[which].data_mut()[coord] = orig + step;
            let (up, _) = eval(&work)?;
            work[which].data_mut()[coord] = orig - step;
            let (down, _) = eval(&work)?;
            work[which].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[which]
                .as_ref()
                .map(|g| g.data()[coord])
                .unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Checks analytic gradients of a scalar function over a full parameter
/// set. Returns the maximum guarded relative error per parameter name.
pub fn check_params(
    params: &ParamSet,
    analytic: &HashMap<String, Tensor>,
    step: f64,
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<(String, f64)>> {
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let numel = params.get(&name).numel();
        let mut worst = 0.0_f64;
        for coord in 0..numel {
            let orig = params.get(&name).data()[coord];
            set_coord(&mut work, &name, coord, orig + step);
            let up = loss_fn(&work)?;
            set_coord(&mut work, &name, coord, orig - step);
            let down = loss_fn(&work)?;
            set_coord(&mut work, &name, coord, orig);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&name).map(|g| g.data()[coord]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
        report.push((name, worst));
    }
    Ok(report)
}

fn set_coord(params: &mut ParamSet, name: &str, coord: usize, value: f64) {
    for (n, t) in params.iter_mut() {
        if n == name {
            t.data_mut()[coord] = value;
            return;
        }
    }
    unreachable!("unknown parameter {name}");
}
