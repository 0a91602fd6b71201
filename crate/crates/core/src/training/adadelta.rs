use crate::{Error, Result};

/// Adadelta with a learning-rate multiplier on the update.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    sq_grad: Vec<f64>,
    sq_delta: Vec<f64>,
}

impl Adadelta {
    pub fn new(n: usize) -> Self {
        Self::with_constants(n, 0.9, 1e-6)
    }

    pub fn with_constants(n: usize, rho: f64, eps: f64) -> Self {
        Adadelta {
            rho,
            eps,
            sq_grad: vec![0.0; n],
            sq_delta: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.sq_grad.len() {
            return Err(Error::Shape(format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.sq_grad.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {i} is {}", grads[i])));
        }
        let (rho, eps) = (self.rho, self.eps);
        for (((p, &g), eg), ed) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_delta)
        {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *p += lr * delta;
        }
        Ok(())
    }
}
