//! Binary logistic-regression probe: logits, BCE loss, analytic gradients and
//! a deterministic full-batch gradient-descent trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{sigmoid, softplus};
use crate::scalar::Scalar;

/// Linear head `z = w·h + b`.
///
/// `layer_index` is the 1-based layer the probe was fit on, or `None` for a
/// head over a composite feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ProbeModel<S> {
    pub layer_index: Option<usize>,
    pub bias: S,
    pub weights: Vec<S>,
}

impl<S: Scalar> ProbeModel<S> {
    pub fn zeros(dim: usize) -> Self {
        Self { layer_index: None, bias: S::zero(), weights: vec![S::zero(); dim] }
    }

    pub fn for_layer(mut self, layer: usize) -> Self {
        self.layer_index = Some(layer);
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, got: usize, what: &str) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch(format!("{what} has width {got}, probe expects {}", self.dim())));
        }
        Ok(())
    }

    fn logit_unchecked(&self, h: &[S]) -> S {
        self.weights.iter().zip(h).fold(self.bias, |acc, (&w, &x)| acc + w * x)
    }

    /// Logits for every row.
    pub fn logits(&self, features: &Matrix<S>) -> Result<Vec<S>> {
        self.check_dim(features.cols(), "feature matrix")?;
        Ok(features.iter_rows().map(|h| self.logit_unchecked(h)).collect())
    }

    pub fn probabilities(&self, features: &Matrix<S>) -> Result<Vec<S>> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }

    /// `l2 · ‖w‖²`; the bias is not penalized.
    pub fn penalty(&self, l2_penalty: S) -> S {
        l2_penalty * self.weights.iter().map(|&w| w * w).sum::<S>()
    }
}

/// Hyperparameters of [`train_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub l2_penalty: f64,
    /// Stop once the relative change of the penalized loss falls below this.
    pub convergence_tol: f64,
    /// Seeds data splits made on behalf of the probe; training itself is deterministic.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, max_epochs: 5000, l2_penalty: 1e-4, convergence_tol: 1e-8, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.max_epochs > 0
            && self.l2_penalty >= 0.0
            && self.l2_penalty.is_finite()
            && self.convergence_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("probe config out of bounds: {self:?}")))
        }
    }
}

pub fn probe_logit<S: Scalar>(model: &ProbeModel<S>, h: &[S]) -> Result<S> {
    model.check_dim(h.len(), "activation vector")?;
    Ok(model.logit_unchecked(h))
}

fn check_batch<S: Scalar>(model: &ProbeModel<S>, features: &Matrix<S>, labels: &[u8]) -> Result<()> {
    model.check_dim(features.cols(), "feature matrix")?;
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} rows for {} labels", features.rows(), labels.len())));
    }
    if features.rows() == 0 {
        return Err(Error::Insufficient("empty batch".into()));
    }
    Ok(())
}

/// Per-sample BCE in log-sum-exp form: `softplus(z) − y·z`.
fn sample_loss<S: Scalar>(z: S, y: u8) -> S {
    if y == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// `(sample_loss(z, y), σ(z))` sharing one exponential.
fn loss_and_prob<S: Scalar>(z: S, y: u8) -> (S, S) {
    let e = (-z.abs()).exp();
    let p = if z >= S::zero() { S::one() / (S::one() + e) } else { e / (S::one() + e) };
    // softplus(±z) = max(±z, 0) + ln(1 + e^{−|z|})
    let signed = if y == 1 { -z } else { z };
    (signed.max(S::zero()) + e.ln_1p(), p)
}

fn label<S: Scalar>(y: u8) -> S {
    if y == 1 {
        S::one()
    } else {
        S::zero()
    }
}

/// Mean binary cross-entropy, without the L2 term.
pub fn bce_loss<S: Scalar>(model: &ProbeModel<S>, features: &Matrix<S>, labels: &[u8]) -> Result<S> {
    check_batch(model, features, labels)?;
    let total: S = features.iter_rows().zip(labels).map(|(h, &y)| sample_loss(model.logit_unchecked(h), y)).sum();
    Ok(total / S::of_usize(labels.len()))
}

/// Loss and gradient of `mean BCE + l2·‖w‖²` in one pass.
fn loss_and_grad<S: Scalar>(
    model: &ProbeModel<S>,
    features: &Matrix<S>,
    labels: &[u8],
    l2_penalty: S,
) -> (S, Vec<S>, S) {
    let n = S::of_usize(labels.len());
    let mut gw = vec![S::zero(); model.dim()];
    let mut gb = S::zero();
    let mut loss = S::zero();
    for (h, &y) in features.iter_rows().zip(labels) {
        let z = model.logit_unchecked(h);
        let (l, p) = loss_and_prob(z, y);
        loss = loss + l;
        let r = p - label::<S>(y);
        gb = gb + r;
        for (g, &x) in gw.iter_mut().zip(h) {
            *g = *g + r * x;
        }
    }
    let two_l2 = S::of(2.0) * l2_penalty;
    for (g, &w) in gw.iter_mut().zip(&model.weights) {
        *g = *g / n + two_l2 * w;
    }
    (loss / n + model.penalty(l2_penalty), gw, gb / n)
}

/// Gradient of the penalized mean loss with respect to `(w, b)`.
pub fn loss_grad_weights<S: Scalar>(
    model: &ProbeModel<S>,
    features: &Matrix<S>,
    labels: &[u8],
    l2_penalty: S,
) -> Result<(Vec<S>, S)> {
    check_batch(model, features, labels)?;
    let (_, gw, gb) = loss_and_grad(model, features, labels, l2_penalty);
    Ok((gw, gb))
}

/// Gradient of the single-sample BCE with respect to the input activations: `(σ(z) − y)·w`.
pub fn loss_grad_activations<S: Scalar>(model: &ProbeModel<S>, h: &[S], y: u8) -> Result<Vec<S>> {
    let z = probe_logit(model, h)?;
    let r = sigmoid(z) - label::<S>(y);
    Ok(model.weights.iter().map(|&w| r * w).collect())
}

pub fn train_probe<S: Scalar>(features: &Matrix<S>, labels: &[u8], cfg: &ProbeConfig) -> Result<ProbeModel<S>> {
    train_probe_traced(features, labels, cfg).map(|(m, _)| m)
}

/// Like [`train_probe`], also returning the penalized loss at the start of every epoch.
pub fn train_probe_traced<S: Scalar>(
    features: &Matrix<S>,
    labels: &[u8],
    cfg: &ProbeConfig,
) -> Result<(ProbeModel<S>, Vec<S>)> {
    cfg.validate()?;
    let mut model = ProbeModel::zeros(features.cols());
    check_batch(&model, features, labels)?;
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidDump("labels must be 0 or 1".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::SingleClass);
    }
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe training features".into()));
    }

    let lr = S::of(cfg.learning_rate);
    let l2 = S::of(cfg.l2_penalty);
    let tol = S::of(cfg.convergence_tol);
    let mut history = Vec::new();
    let mut prev: Option<S> = None;
    for _ in 0..cfg.max_epochs {
        let (loss, gw, gb) = loss_and_grad(&model, features, labels, l2);
        history.push(loss);
        if let Some(p) = prev {
            let denom = p.abs().max(S::min_positive_value());
            if (p - loss).abs() / denom < tol {
                break;
            }
        }
        prev = Some(loss);
        for (w, g) in model.weights.iter_mut().zip(gw) {
            *w = *w - lr * g;
        }
        model.bias = model.bias - lr * gb;
    }
    Ok((model, history))
}
