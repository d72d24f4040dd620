//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adamw, learning_rate: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTrainConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Grads,
    pub v: Grads,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, cfg: &OptimizerConfig, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let step_size = (cfg.learning_rate / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (((p, g), m), v) in params.values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = match cfg.kind {
                    OptimizerKind::Adam => g + cfg.weight_decay as f32 * *p,
                    OptimizerKind::Adamw => {
                        *p -= lr * cfg.weight_decay as f32 * *p;
                        g
                    }
                };
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{spec_for_variant, ArchitectureSpec, Model};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let spec = ArchitectureSpec { base_channels: 2, depth: 1, ..spec_for_variant("unet3d").unwrap() };
        let mut m = Model::build(&spec, 0).unwrap();
        let before = m.params.clone();
        let grads: Grads = m.params.values.iter().map(|v| vec![0.5; v.len()]).collect();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&m.params);
        st.update(&cfg, &mut m.params, &grads);
        for (a, b) in before.values.iter().flatten().zip(m.params.values.iter().flatten()) {
            assert!(((a - b) - 1e-4).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(OptimizerConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
