use super::{NumericsError, Tensor};

/// Decoupled-weight-decay Adam. No learning-rate schedule.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `grads[i]` must shape-match `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
    ) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::Invalid {
                op: "adamw",
                msg: format!("{} params but {} gradients", params.len(), grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != p.numel() {
                return Err(NumericsError::Invalid {
                    op: "adamw",
                    msg: format!(
                        "parameter {} has {} values but gradient has {}",
                        i,
                        p.numel(),
                        g.len()
                    ),
                });
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "adamw gradient" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + self.lr * self.weight_decay * *x;
            }
        }
        Ok(())
    }
}
