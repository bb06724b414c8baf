//! First-order optimizers. Only layers flagged `trainable` are updated.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter gradients laid out like [`Network::params`]:
/// `grads[layer][tensor]`, `None` where no gradient was produced.
pub type ParamGrads = Vec<Vec<Option<Vec<f64>>>>;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    /// Adam first/second moments, lazily sized on first step.
    moments: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Frozen layers are skipped even when gradients are present.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<(), TrainError> {
        let trainable: Vec<bool> = net.layers().iter().map(|l| l.trainable).collect();
        for (layer, params) in net.params().iter().enumerate() {
            if !trainable[layer] {
                continue;
            }
            for (t, p) in params.iter().enumerate() {
                match grads
                    .get(layer)
                    .and_then(|g| g.get(t))
                    .and_then(Option::as_ref)
                {
                    Some(g) if g.len() == p.numel() => {}
                    _ => return Err(TrainError::MissingGradient { layer, tensor: t }),
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = net
                .params()
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                        .collect()
                })
                .collect();
        }
        self.steps += 1;
        let lr = self.learning_rate;
        let t = self.steps as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (layer, params) in net.params_mut().iter_mut().enumerate() {
            if !trainable[layer] {
                continue;
            }
            for (ti, p) in params.iter_mut().enumerate() {
                let g = grads[layer][ti].as_ref().expect("checked above");
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (w, gv) in p.data_mut().iter_mut().zip(g) {
                            *w -= lr * gv;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = &mut self.moments[layer][ti];
                        for (((w, gv), mv), vv) in p
                            .data_mut()
                            .iter_mut()
                            .zip(g)
                            .zip(m.iter_mut())
                            .zip(v.iter_mut())
                        {
                            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                            let m_hat = *mv / bias1;
                            let v_hat = *vv / bias2;
                            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_linear_probe;
    use crate::tensor::Tensor;

    fn probe(w: f64) -> Network {
        build_linear_probe(
            [1, 1, 1],
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            Tensor::vector(&[0.0]).unwrap(),
        )
        .unwrap()
    }

    fn grads_for(net: &Network, value: f64) -> ParamGrads {
        net.params()
            .iter()
            .map(|ps| ps.iter().map(|p| Some(vec![value; p.numel()])).collect())
            .collect()
    }

    #[test]
    fn sgd_step() {
        let mut net = probe(1.0);
        let grads = grads_for(&net, 2.0);
        Optimizer::new(OptimizerKind::Sgd, 0.1)
            .step(&mut net, &grads)
            .unwrap();
        assert!((net.params()[1][0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut net = probe(1.25);
        let before = net.clone();
        let grads = grads_for(&net, 0.0);
        Optimizer::new(OptimizerKind::Sgd, 0.5)
            .step(&mut net, &grads)
            .unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_matches_hand_rolled_recurrence() {
        let lr = 0.01;
        let mut net = probe(1.0);
        let grads = grads_for(&net, 1.0);
        Optimizer::new(OptimizerKind::Adam, lr)
            .step(&mut net, &grads)
            .unwrap();
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        let m: f64 = 0.1 * 1.0;
        let v: f64 = 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        let got = net.params()[1][0].data()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!(((1.0 - got) - lr).abs() < 1e-8);
    }

    #[test]
    fn frozen_layers_untouched_and_missing_grads_rejected() {
        let mut net = probe(1.0);
        net.set_trainable(1, false);
        let before = net.clone();
        let grads = grads_for(&net, 3.0);
        Optimizer::new(OptimizerKind::Adam, 0.1)
            .step(&mut net, &grads)
            .unwrap();
        assert_eq!(net, before);

        net.set_trainable(1, true);
        let missing: ParamGrads = vec![vec![], vec![None, None]];
        assert!(matches!(
            Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut net, &missing),
            Err(TrainError::MissingGradient {
                layer: 1,
                tensor: 0
            })
        ));
    }
}
