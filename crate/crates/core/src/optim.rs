//! Losses, L2 regularisation, Adam, and the finite-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::tensor::{Scalar, Tensor};

/// Data and regularisation parts of a training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

impl LossValue {
    pub fn new(data_loss: f64, reg_loss: f64) -> Self {
        Self {
            data_loss,
            reg_loss,
            total: data_loss + reg_loss,
        }
    }
}

/// Mean categorical cross-entropy of softmax(logits) against one-hot labels,
/// and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, onehot: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (batch, classes) = match *logits.shape() {
        [b, c] => (b, c),
        _ => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "logits (B, classes)",
                logits.shape(),
            ))
        }
    };
    if onehot.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("labels {:?}", logits.shape()),
            onehot.shape(),
        ));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for row in 0..batch {
        let z = &logits.data()[row * classes..(row + 1) * classes];
        let y = &onehot.data()[row * classes..(row + 1) * classes];
        let hot = y.iter().filter(|v| **v == T::one()).count();
        let cold = y.iter().filter(|v| **v == T::zero()).count();
        if hot != 1 || hot + cold != classes {
            return Err(Error::NotOneHot { row });
        }
        let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        let g = &mut grad.data_mut()[row * classes..(row + 1) * classes];
        for c in 0..classes {
            let log_p = z[c].as_f64() - lse;
            let target = y[c].as_f64();
            loss -= target * log_p;
            g[c] = T::from_f64_lossy((log_p.exp() - target) / batch as f64);
        }
    }
    Ok((loss / batch as f64, grad))
}

const PROB_FLOOR: f64 = 1e-7;

/// Mean pixelwise binary cross-entropy. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`; the returned gradient is taken at the clamped value.
pub fn binary_cross_entropy_pixelwise<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(
            "binary_cross_entropy_pixelwise",
            format!("target {:?}", probs.shape()),
            target.shape(),
        ));
    }
    if let Some(index) = target.data().iter().position(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::NonBinaryTarget { index });
    }
    let n = probs.len() as f64;
    let mut loss = 0.0f64;
    let grad_data = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let t = t.as_f64();
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            T::from_f64_lossy((p - t) / (p * (1.0 - p)) / n)
        })
        .collect();
    Ok((loss / n, Tensor::new(probs.shape(), grad_data)?))
}

/// `lambda · Σ w²` over weights (biases excluded); adds `2·lambda·w` to each
/// weight gradient and returns the penalty.
pub fn l2_penalty<T: Scalar>(params: &mut [&mut LayerParams<T>], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let scale = T::from_f64_lossy(2.0 * lambda);
    let mut sum = 0.0f64;
    for p in params.iter_mut() {
        let LayerParams {
            weights, weight_grad, ..
        } = &mut **p;
        for (g, &w) in weight_grad.data_mut().iter_mut().zip(weights.data()) {
            sum += w.as_f64() * w.as_f64();
            *g += scale * w;
        }
    }
    lambda * sum
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moment estimates for an ordered list of layers; two moment tensors
/// (weights, then bias) per layer.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&LayerParams<T>], config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<&[usize]> = params
            .iter()
            .flat_map(|p| [p.weights.shape(), p.bias.shape()])
            .collect();
        Ok(Self {
            config,
            step_count: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update. Gradients are consumed: they are zeroed
/// afterwards and must be recomputed before the next step.
pub fn adam_step<T: Scalar>(params: &mut [&mut LayerParams<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() * 2 != state.first_moment.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors but {} layers were passed",
            state.first_moment.len(),
            params.len()
        )));
    }
    if params.iter().any(|p| !p.grad_ready()) {
        return Err(Error::StaleGradient);
    }
    let cfg = state.config;
    let step = state.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let LayerParams {
            weights,
            bias,
            weight_grad,
            bias_grad,
            ..
        } = &mut **p;
        for (j, (value, grad)) in [(weights, &*weight_grad), (bias, &*bias_grad)].into_iter().enumerate() {
            let m = &mut state.first_moment[2 * i + j];
            let v = &mut state.second_moment[2 * i + j];
            if m.shape() != value.shape() {
                return Err(Error::shape("adam_step", format!("{:?}", m.shape()), value.shape()));
            }
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m_new = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
                let v_new = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
                *m = T::from_f64_lossy(m_new);
                *v = T::from_f64_lossy(v_new);
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *w = T::from_f64_lossy(w.as_f64() - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon));
            }
        }
        p.zero_grad();
    }
    state.step_count = step;
    Ok(())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU or pooling kink.
    pub skipped: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of `loss_fn` around `params`, compared with `analytic`
/// coordinate by coordinate: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<T: Scalar>(
    mut loss_fn: impl FnMut(&[T]) -> f64,
    params: &[T],
    analytic: &[T],
    eps: f64,
) -> GradCheck {
    finite_difference_check_piecewise(|p| (loss_fn(p), 0), params, analytic, eps)
}

/// Like [`finite_difference_check`] for piecewise-smooth losses: `loss_fn`
/// also returns a regime fingerprint, and coordinates whose ± probes land in
/// a different regime than the base point are skipped.
pub fn finite_difference_check_piecewise<T: Scalar>(
    mut loss_fn: impl FnMut(&[T]) -> (f64, u64),
    params: &[T],
    analytic: &[T],
    eps: f64,
) -> GradCheck {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let (_, base_regime) = loss_fn(params);
    let mut probe = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..params.len() {
        let origin = params[i];
        let plus = T::from_f64_lossy(origin.as_f64() + eps);
        let minus = T::from_f64_lossy(origin.as_f64() - eps);
        probe[i] = plus;
        let (lp, rp) = loss_fn(&probe);
        probe[i] = minus;
        let (lm, rm) = loss_fn(&probe);
        probe[i] = origin;
        if rp != base_regime || rm != base_regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (plus.as_f64() - minus.as_f64());
        let err = rel_error(analytic[i].as_f64(), numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report
}
