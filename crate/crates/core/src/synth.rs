//! Planted-signal dump generator and closed-form Gaussian oracles.
//!
//! Classes are Gaussian with shared diagonal covariance `σ²I`. Fake samples
//! get a planted mean shift on selected neurons of selected layers, so the
//! Mahalanobis distance and Bayes error of every layer are known exactly.
//!
//! Normal deviates come from the Box–Muller transform applied to uniforms
//! drawn from a ChaCha8 stream (`u = (next_u64 >> 11 + 0.5) / 2^53`), so a
//! seed reproduces the same dump on any platform.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5 * libm::erfc(-x.f64() / std::f64::consts::SQRT_2))
}

/// Mahalanobis distance between two means under a diagonal covariance given by its variances.
pub fn mahalanobis<S: Scalar>(mu0: &[S], mu1: &[S], variances: &[S]) -> Result<S> {
    if mu0.len() != mu1.len() || mu0.len() != variances.len() {
        return Err(Error::DimensionMismatch(format!(
            "means of length {} and {}, {} variances",
            mu0.len(),
            mu1.len(),
            variances.len()
        )));
    }
    if variances.iter().any(|&v| v.is_nan() || v <= S::zero()) {
        return Err(Error::InvalidConfig("variances must be strictly positive".into()));
    }
    let d2: S = mu0.iter().zip(mu1).zip(variances).map(|((&a, &b), &v)| (b - a) * (b - a) / v).sum();
    Ok(d2.sqrt())
}

/// Minimum error of the equal-prior Gaussian classifier at Mahalanobis distance `d`: Φ(−d/2).
pub fn bayes_error<S: Scalar>(d: S) -> Result<S> {
    if d.is_nan() || d < S::zero() {
        return Err(Error::InvalidConfig(format!("Mahalanobis distance must be >= 0, got {d}")));
    }
    Ok(std_normal_cdf(-d / S::of(2.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct OracleAnswer<S> {
    pub layer: usize,
    pub mahalanobis: S,
    pub bayes_error: S,
    /// `Σ⁻¹(μ_fake − μ_real)`.
    pub bayes_direction: Vec<S>,
}

/// What to plant. Layer and neuron indices are 1-based; `signal_neurons[j]`
/// and `mean_shift[j]` belong to `signal_layers[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub n_layers: usize,
    pub n_samples: usize,
    pub feat_dim: usize,
    pub attn_len: usize,
    pub signal_layers: Vec<usize>,
    pub signal_neurons: Vec<Vec<usize>>,
    pub mean_shift: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub attn_shift: f64,
    /// Offset added to every activation of both classes.
    #[serde(default)]
    pub base_offset: f64,
    pub seed: u64,
}

impl PlantSpec {
    /// Same neurons and the same shift in every signal layer.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        n_layers: usize,
        n_samples: usize,
        feat_dim: usize,
        attn_len: usize,
        signal_layers: &[usize],
        neurons: &[usize],
        shift: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_samples,
            feat_dim,
            attn_len,
            signal_layers: signal_layers.to_vec(),
            signal_neurons: vec![neurons.to_vec(); signal_layers.len()],
            mean_shift: vec![vec![shift; neurons.len()]; signal_layers.len()],
            noise_sigma: 1.0,
            attn_shift: 0.0,
            base_offset: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.feat_dim == 0 {
            return bad("n_layers and feat_dim must be at least 1".into());
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.attn_shift >= 0.0 && self.attn_shift.is_finite()) {
            return bad(format!("attn_shift must be nonnegative, got {}", self.attn_shift));
        }
        if !self.base_offset.is_finite() {
            return bad("base_offset must be finite".into());
        }
        if self.signal_neurons.len() != self.signal_layers.len() || self.mean_shift.len() != self.signal_layers.len() {
            return bad("signal_neurons and mean_shift need one entry per signal layer".into());
        }
        let mut seen_layers = vec![false; self.n_layers + 1];
        for (j, &l) in self.signal_layers.iter().enumerate() {
            if l == 0 || l > self.n_layers || std::mem::replace(&mut seen_layers[l], true) {
                return bad(format!("signal layer {l} out of range or repeated"));
            }
            if self.signal_neurons[j].len() != self.mean_shift[j].len() {
                return bad(format!(
                    "layer {l}: {} neurons but {} shifts",
                    self.signal_neurons[j].len(),
                    self.mean_shift[j].len()
                ));
            }
            let mut seen = vec![false; self.feat_dim + 1];
            for &k in &self.signal_neurons[j] {
                if k == 0 || k > self.feat_dim || std::mem::replace(&mut seen[k], true) {
                    return bad(format!("layer {l}: neuron {k} out of range or repeated"));
                }
            }
            if self.mean_shift[j].iter().any(|s| !s.is_finite()) {
                return bad(format!("layer {l}: non-finite shift"));
            }
        }
        Ok(())
    }

    /// Planted `μ_fake − μ_real` of a 1-based layer.
    pub fn shift_vector(&self, layer: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.feat_dim];
        if let Some(j) = self.signal_layers.iter().position(|&l| l == layer) {
            for (&k, &s) in self.signal_neurons[j].iter().zip(&self.mean_shift[j]) {
                v[k - 1] = s;
            }
        }
        v
    }

    pub fn oracle(&self, layer: usize) -> Result<OracleAnswer<f64>> {
        let shift = self.shift_vector(layer);
        let var = self.noise_sigma * self.noise_sigma;
        let d = mahalanobis(&vec![0.0; self.feat_dim], &shift, &vec![var; self.feat_dim])?;
        Ok(OracleAnswer {
            layer,
            mahalanobis: d,
            bayes_error: bayes_error(d)?,
            bayes_direction: shift.iter().map(|s| s / var).collect(),
        })
    }
}

/// Standard normal stream: Box–Muller over ChaCha8 uniforms.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.uniform();
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Number of leading attention positions that receive the planted shift.
pub fn shifted_attention_positions(attn_len: usize) -> usize {
    if attn_len == 0 {
        0
    } else {
        (attn_len / 4).max(1)
    }
}

/// Draws a dump from the planted model. The first `⌊N/2⌋` samples are real.
///
/// Attention logits are standard normal, fake samples of signal layers get
/// `attn_shift` added on the first [`shifted_attention_positions`] positions,
/// and each row is softmax-normalized.
pub fn generate_dump(spec: &PlantSpec) -> Result<(ActivationDump, Vec<OracleAnswer<f64>>)> {
    spec.validate()?;
    let n = spec.n_samples;
    let n_real = n / 2;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n_real)).collect();
    let mut rng = GaussianStream::new(spec.seed);
    let n_shifted = shifted_attention_positions(spec.attn_len);

    let mut features = Vec::with_capacity(spec.n_layers);
    let mut attention = Vec::with_capacity(spec.n_layers);
    for layer in 1..=spec.n_layers {
        let shift = spec.shift_vector(layer);
        let is_signal = spec.signal_layers.contains(&layer);
        let mut f = Vec::with_capacity(n * spec.feat_dim);
        for &y in &labels {
            for &s in &shift {
                let planted = if y == 1 { s } else { 0.0 };
                f.push((spec.base_offset + planted + spec.noise_sigma * rng.next_normal()) as f32);
            }
        }
        features.push(Matrix::from_vec(n, spec.feat_dim, f)?);

        if spec.attn_len > 0 {
            let mut a = Vec::with_capacity(n * spec.attn_len);
            let mut row = vec![0.0; spec.attn_len];
            for &y in &labels {
                for (p, v) in row.iter_mut().enumerate() {
                    let planted = if is_signal && y == 1 && p < n_shifted { spec.attn_shift } else { 0.0 };
                    *v = rng.next_normal() + planted;
                }
                softmax_in_place(&mut row);
                a.extend(row.iter().map(|&v| v as f32));
            }
            attention.push(Matrix::from_vec(n, spec.attn_len, a)?);
        }
    }
    let attention = (spec.attn_len > 0).then_some(attention);
    let dump = ActivationDump::new(labels, features, attention)?;
    let oracles = (1..=spec.n_layers).map(|l| spec.oracle(l)).collect::<Result<_>>()?;
    Ok((dump, oracles))
}
