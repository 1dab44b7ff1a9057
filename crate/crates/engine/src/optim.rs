//! Parameter update rules.

use crate::error::{EngineError, Result};
use crate::network::{Gradients, Network};
use crate::real::Real;
use crate::tensor::Tensor;

pub trait Optimizer<T: Real> {
    /// Applies one update to every layer whose gradients are flagged `apply`.
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig {
            rho: 0.95,
            epsilon: 1e-6,
            learning_rate: 1.0,
        }
    }
}

/// Running averages for one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState<T: Real = f32> {
    pub layer: usize,
    pub param: usize,
    pub acc_grad_sq: Tensor<T>,
    pub acc_update_sq: Tensor<T>,
}

impl<T: Real> AdaDeltaState<T> {
    pub fn new(layer: usize, param: usize, shape: &[usize]) -> Self {
        AdaDeltaState {
            layer,
            param,
            acc_grad_sq: Tensor::zeros(shape),
            acc_update_sq: Tensor::zeros(shape),
        }
    }
}

/// One AdaDelta update of `weights` in place:
///
/// ```text
/// E[g²]  ← ρ·E[g²] + (1−ρ)·g²
/// Δ      ← −sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g
/// E[Δ²]  ← ρ·E[Δ²] + (1−ρ)·Δ²
/// w      ← w + lr·Δ
/// ```
pub fn adadelta_step<T: Real>(
    state: &mut AdaDeltaState<T>,
    config: &AdaDeltaConfig,
    weights: &mut Tensor<T>,
    grad: &Tensor<T>,
) -> Result<()> {
    if weights.shape() != grad.shape() || weights.shape() != state.acc_grad_sq.shape() {
        return Err(EngineError::StateMismatch(format!(
            "layer {} param {}: weights {:?}, grad {:?}, state {:?}",
            state.layer,
            state.param,
            weights.shape(),
            grad.shape(),
            state.acc_grad_sq.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(EngineError::NonFiniteGradient {
            layer: state.layer,
            param: state.param,
        });
    }
    let rho = T::from_f64(config.rho);
    let one_minus_rho = T::from_f64(1.0 - config.rho);
    let eps = T::from_f64(config.epsilon);
    let lr = T::from_f64(config.learning_rate);
    let acc_g = state.acc_grad_sq.data_mut();
    let acc_u = state.acc_update_sq.data_mut();
    for (((w, &g), ag), au) in weights
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(acc_g.iter_mut())
        .zip(acc_u.iter_mut())
    {
        *ag = rho * *ag + one_minus_rho * g * g;
        let delta = -((*au + eps).sqrt() / (*ag + eps).sqrt()) * g;
        *au = rho * *au + one_minus_rho * delta * delta;
        *w += lr * delta;
    }
    Ok(())
}

/// AdaDelta over a whole network; state is created lazily on first step.
#[derive(Clone, Debug)]
pub struct AdaDelta<T: Real = f32> {
    pub config: AdaDeltaConfig,
    states: Vec<Vec<AdaDeltaState<T>>>,
}

impl<T: Real> AdaDelta<T> {
    pub fn new(config: AdaDeltaConfig) -> Self {
        AdaDelta {
            config,
            states: Vec::new(),
        }
    }

    pub fn states(&self) -> &[Vec<AdaDeltaState<T>>] {
        &self.states
    }
}

impl<T: Real> Default for AdaDelta<T> {
    fn default() -> Self {
        Self::new(AdaDeltaConfig::default())
    }
}

fn check_layout<T: Real>(net: &Network<T>, grads: &Gradients<T>) -> Result<()> {
    if grads.layers.len() != net.len() {
        return Err(EngineError::StateMismatch(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            net.len()
        )));
    }
    Ok(())
}

impl<T: Real> Optimizer<T> for AdaDelta<T> {
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        check_layout(net, grads)?;
        if self.states.is_empty() {
            self.states = net
                .layers()
                .iter()
                .enumerate()
                .map(|(li, l)| {
                    l.params()
                        .iter()
                        .enumerate()
                        .map(|(pi, p)| AdaDeltaState::new(li, pi, p.shape()))
                        .collect()
                })
                .collect();
        } else if self.states.len() != net.len() {
            return Err(EngineError::StateMismatch("network changed since last step".into()));
        }
        for (li, lg) in grads.layers.iter().enumerate() {
            if !lg.apply || lg.params.is_empty() {
                continue;
            }
            let layer = net.layer_mut(li);
            let params = layer.params_mut();
            if params.len() != lg.params.len() || self.states[li].len() != params.len() {
                return Err(EngineError::StateMismatch(format!("layer {li} parameter count")));
            }
            for ((w, g), st) in params.iter_mut().zip(&lg.params).zip(&mut self.states[li]) {
                adadelta_step(st, &self.config, w, g)?;
            }
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent with optional momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        check_layout(net, grads)?;
        if self.velocity.is_empty() {
            self.velocity = net
                .layers()
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect();
        }
        let lr = T::from_f64(self.learning_rate);
        let mu = T::from_f64(self.momentum);
        for (li, lg) in grads.layers.iter().enumerate() {
            if !lg.apply || lg.params.is_empty() {
                continue;
            }
            for (pi, g) in lg.params.iter().enumerate() {
                if !g.is_finite() {
                    return Err(EngineError::NonFiniteGradient { layer: li, param: pi });
                }
                let v = &mut self.velocity[li][pi];
                let w = &mut net.layer_mut(li).params_mut()[pi];
                if w.shape() != g.shape() {
                    return Err(EngineError::StateMismatch(format!("layer {li} param {pi} shape")));
                }
                for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *v = mu * *v - lr * g;
                    *w += *v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_weights_and_decays_accumulators() {
        let cfg = AdaDeltaConfig::default();
        let mut st = AdaDeltaState::<f64>::new(0, 0, &[1]);
        st.acc_grad_sq = scalar(2.0);
        st.acc_update_sq = scalar(4.0);
        let mut w = scalar(1.5);
        adadelta_step(&mut st, &cfg, &mut w, &scalar(0.0)).unwrap();
        assert_eq!(w.data(), &[1.5]);
        assert!((st.acc_grad_sq.data()[0] - 1.9).abs() < 1e-12);
        assert!((st.acc_update_sq.data()[0] - 3.8).abs() < 1e-12);
    }

    #[test]
    fn fresh_unit_gradient_step_matches_hand_value() {
        // Δ = −sqrt(1e-6) / sqrt(0.05 + 1e-6)
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((expected - (-4.4721e-3)).abs() < 1e-7);
        let mut st = AdaDeltaState::<f64>::new(0, 0, &[1]);
        let mut w = scalar(0.0);
        adadelta_step(&mut st, &AdaDeltaConfig::default(), &mut w, &scalar(1.0)).unwrap();
        assert!((w.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn second_step_differs_from_first() {
        let mut st = AdaDeltaState::<f64>::new(0, 0, &[1]);
        let mut w = scalar(0.0);
        let cfg = AdaDeltaConfig::default();
        adadelta_step(&mut st, &cfg, &mut w, &scalar(1.0)).unwrap();
        let first = w.data()[0];
        adadelta_step(&mut st, &cfg, &mut w, &scalar(1.0)).unwrap();
        let second = w.data()[0] - first;
        // hand evaluation of the second step
        let ag1 = 0.05;
        let d1 = -(1e-6f64).sqrt() / (ag1 + 1e-6f64).sqrt();
        let au1 = 0.05 * d1 * d1;
        let ag2 = 0.95 * ag1 + 0.05;
        let d2 = -((au1 + 1e-6f64).sqrt() / (ag2 + 1e-6f64).sqrt());
        assert!((second - d2).abs() < 1e-15);
        assert!((second.abs() - first.abs()).abs() > 1e-5);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut st = AdaDeltaState::<f32>::new(3, 1, &[2]);
        let mut w = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let err = adadelta_step(&mut st, &AdaDeltaConfig::default(), &mut w, &g).unwrap_err();
        assert_eq!(err, EngineError::NonFiniteGradient { layer: 3, param: 1 });
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdaDeltaState::<f32>::new(0, 0, &[2]);
        let mut w = Tensor::<f32>::zeros(&[3]);
        let g = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(
            adadelta_step(&mut st, &AdaDeltaConfig::default(), &mut w, &g),
            Err(EngineError::StateMismatch(_))
        ));
    }
}
