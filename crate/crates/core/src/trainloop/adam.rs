use crate::diffcore::{DiffError, GradientVector, ParamStore};

/// Adaptive-moment update over the flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grad` and returns the applied parameter delta.
    pub fn step(&mut self, store: &mut ParamStore, grad: &GradientVector) -> Result<GradientVector, DiffError> {
        if grad.len() != self.m.len() {
            return Err(DiffError::Shape {
                op: "adam",
                detail: format!("expected {} gradient entries, got {}", self.m.len(), grad.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut delta = GradientVector::zeros(grad.len());
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta[i] = -self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        store.add_flat(&delta)?;
        Ok(delta)
    }
}
