//! Adam with bias correction, plus global-norm gradient clipping and
//! decaying Gaussian gradient noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{ParamSet, Tensor};
use crate::{Error, Result};

/// First/second moment accumulators, aligned with the parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update. `grads` must be aligned with the parameter order.
    /// A non-finite gradient aborts with the parameter's name.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, _), grad) in params.iter().zip(grads) {
            if !grad.is_finite() {
                return Err(Error::TrainAbort {
                    step: self.t as usize,
                    msg: format!("non-finite gradient in parameter {name}"),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (idx, (_, param)) in params.iter_mut().enumerate() {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for ((p, &g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient coordinates together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Clips to the global norm bound, then adds Gaussian noise with
/// per-coordinate variance eta / (1 + t)^0.55.
pub fn clip_and_noise(
    grads: &mut [Tensor],
    clip_norm: f64,
    eta: f64,
    t: usize,
    rng: &mut ChaCha8Rng,
) {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    if eta > 0.0 {
        let sigma = (eta / (1.0 + t as f64).powf(0.55)).sqrt();
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v += sigma * gaussian(rng);
            }
        }
    }
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
