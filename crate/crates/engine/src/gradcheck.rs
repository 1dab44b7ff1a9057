//! Central finite-difference verification of analytic gradients.
//!
//! Runs on `Network<f64>`. Every perturbed evaluation starts from a clone of
//! the original network, so dropout masks and batch statistics are the same
//! as in the analytic pass.

use crate::error::{EngineError, Result};
use crate::layer::LayerKind;
use crate::loss::cross_entropy;
use crate::network::{GradScope, Mode, Network};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum CheckLoss {
    /// Mean cross-entropy; the network must end in softmax.
    CrossEntropy(Vec<usize>),
    /// `0.5 * sum(output²)`; works for any network.
    HalfSquaredSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub index: usize,
    pub kind: &'static str,
    pub frozen: bool,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// One entry per layer with weights.
    pub layers: Vec<LayerCheck>,
    /// Max relative error of the gradient with respect to the input batch.
    pub input_max_rel_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.max_rel_error)
            .fold(self.input_max_rel_error, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks a network under cross-entropy when it ends in softmax, and under
/// `0.5 * sum(output²)` otherwise.
pub fn gradient_check(net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize]) -> Result<GradCheckReport> {
    let loss = match net.layers().last().map(|l| l.kind()) {
        Some(LayerKind::Softmax) => CheckLoss::CrossEntropy(labels.to_vec()),
        _ => CheckLoss::HalfSquaredSum,
    };
    gradient_check_with(net, batch, &loss, DEFAULT_STEP)
}

fn evaluate(net: &mut Network<f64>, batch: &Tensor<f64>, loss: &CheckLoss) -> Result<f64> {
    let out = net.forward(batch, Mode::Training)?;
    Ok(match loss {
        CheckLoss::CrossEntropy(labels) => cross_entropy(&out, labels)?.0,
        CheckLoss::HalfSquaredSum => 0.5 * out.data().iter().map(|v| v * v).sum::<f64>(),
    })
}

pub fn gradient_check_with(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    loss: &CheckLoss,
    step: f64,
) -> Result<GradCheckReport> {
    let mut analytic_net = net.clone();
    let out = analytic_net.forward(batch, Mode::Training)?;
    let grads = match loss {
        CheckLoss::CrossEntropy(labels) => {
            if !matches!(net.layers().last().map(|l| l.kind()), Some(LayerKind::Softmax)) {
                return Err(EngineError::Hyperparameter(
                    "cross-entropy check needs a softmax-terminated network".into(),
                ));
            }
            let (_, g) = cross_entropy(&out, labels)?;
            analytic_net.backward_logits(&g, GradScope::All)?
        }
        CheckLoss::HalfSquaredSum => analytic_net.backward(&out, GradScope::All)?,
    };

    let central = |probe: &dyn Fn(&mut Network<f64>, &mut Tensor<f64>, f64)| -> Result<f64> {
        let mut plus_net = net.clone();
        let mut plus_batch = batch.clone();
        probe(&mut plus_net, &mut plus_batch, step);
        let lp = evaluate(&mut plus_net, &plus_batch, loss)?;
        let mut minus_net = net.clone();
        let mut minus_batch = batch.clone();
        probe(&mut minus_net, &mut minus_batch, -step);
        let lm = evaluate(&mut minus_net, &minus_batch, loss)?;
        Ok((lp - lm) / (2.0 * step))
    };

    let mut layers = Vec::new();
    for (li, layer) in net.layers().iter().enumerate() {
        if !layer.kind().has_weights() {
            continue;
        }
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (pi, p) in layer.params().iter().enumerate() {
            for j in 0..p.len() {
                let numeric = central(&|n, _, d| n.layer_mut(li).params_mut()[pi].data_mut()[j] += d)?;
                let a = grads.layers[li].params[pi].data()[j];
                worst = worst.max(relative_error(a, numeric));
                checked += 1;
            }
        }
        layers.push(LayerCheck {
            index: li,
            kind: layer.kind().name(),
            frozen: !layer.trainable(),
            checked,
            max_rel_error: worst,
        });
    }

    let mut input_worst = 0.0f64;
    for j in 0..batch.len() {
        let numeric = central(&|_, b, d| b.data_mut()[j] += d)?;
        input_worst = input_worst.max(relative_error(grads.input.data()[j], numeric));
    }

    Ok(GradCheckReport {
        layers,
        input_max_rel_error: input_worst,
    })
}
