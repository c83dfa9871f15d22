use serde::{Deserialize, Serialize};

use super::network::Tensor;
use super::ClassifierError;

/// Optimizer and schedule settings for training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 32,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.epochs > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(ClassifierError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    params: &mut [Tensor],
    gradients: &[Vec<f64>],
    config: &AdamConfig,
    state: &mut AdamState,
    t: u64,
) -> Result<(), ClassifierError> {
    if t == 0 {
        return Err(ClassifierError::InvalidConfig("Adam step index starts at 1".into()));
    }
    if gradients.len() != params.len()
        || params.iter().zip(gradients).any(|(p, g)| p.data.len() != g.len())
    {
        return Err(ClassifierError::ShapeMismatch(
            "gradient shapes do not match parameters".into(),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        state.v = state.m.clone();
    }

    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(gradients)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p.data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
