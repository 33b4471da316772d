//! Per-layer discrepancy profiles and critical-layer selection.
//!
//! Three candidate sets are built from the profiles and intersected:
//! layers whose centroid cosine distance stands out (`l_sep`), local maxima
//! of the attention shift (`l_attn`), and layers whose probe accuracy is near
//! the best one (`l_prob`).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::probe::{train_probe, ProbeConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub holdout_fraction: f64,
    pub probe: ProbeConfig,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self { alpha: 1.0, gamma: 0.98, holdout_fraction: 0.3, probe: ProbeConfig::default() }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "holdout_fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        self.probe.validate()
    }
}

/// Class means of one layer, accumulated in `S`. Returns `(μ_real, μ_fake)`.
pub fn class_centroids<S: Scalar>(dump: &ActivationDump, layer: usize) -> Result<(Vec<S>, Vec<S>)> {
    class_means(dump.layer_features(layer)?, dump.labels())
}

fn class_means<S: Scalar>(m: &Matrix<f32>, labels: &[u8]) -> Result<(Vec<S>, Vec<S>)> {
    let mut sums = [vec![S::zero(); m.cols()], vec![S::zero(); m.cols()]];
    let mut counts = [0usize; 2];
    for (row, &y) in m.iter_rows().zip(labels) {
        let c = usize::from(y);
        counts[c] += 1;
        for (acc, &v) in sums[c].iter_mut().zip(row) {
            *acc = *acc + S::widen(v);
        }
    }
    if counts.contains(&0) {
        return Err(Error::SingleClass);
    }
    let [real, fake] = sums;
    let scale = |v: Vec<S>, n: usize| v.into_iter().map(|x| x / S::of_usize(n)).collect();
    Ok((scale(real, counts[0]), scale(fake, counts[1])))
}

/// `1 − cos(a, b)`, or `None` when either vector has zero norm.
pub fn cosine_distance<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return None;
    }
    // clamp rounding excursions outside [0, 2]
    Some((S::one() - dot / (na * nb)).max(S::zero()).min(S::of(2.0)))
}

/// Per-layer centroid cosine distance; `None` marks a layer with a zero-norm centroid.
pub fn cosine_distance_profile<S: Scalar>(dump: &ActivationDump) -> Result<Vec<Option<S>>> {
    (1..=dump.n_layers())
        .map(|l| {
            let (r, f) = class_centroids::<S>(dump, l)?;
            Ok(cosine_distance(&r, &f))
        })
        .collect()
}

/// Class-wise mean attention of one layer, `(Ā_real, Ā_fake)`.
pub fn class_mean_attention<S: Scalar>(dump: &ActivationDump, layer: usize) -> Result<(Vec<S>, Vec<S>)> {
    class_means(dump.layer_attention(layer)?, dump.labels())
}

pub fn euclidean_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt()
}

/// Per-layer `‖Ā_real − Ā_fake‖₂`. Fails with [`Error::AttentionAbsent`] when the dump has none.
pub fn attention_shift_profile<S: Scalar>(dump: &ActivationDump) -> Result<Vec<S>> {
    if !dump.has_attention() {
        return Err(Error::AttentionAbsent);
    }
    (1..=dump.n_layers())
        .map(|l| {
            let (r, f) = class_mean_attention::<S>(dump, l)?;
            Ok(euclidean_distance(&r, &f))
        })
        .collect()
}

/// Seeded stratified split into `(train, holdout)` sample indices, both sorted.
pub fn holdout_split(labels: &[u8], holdout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_hold = (idx.len() as f64 * holdout_fraction).round() as usize;
        if n_hold == 0 || n_hold == idx.len() {
            return Err(Error::Insufficient(format!(
                "class {class} has {} samples; a {holdout_fraction} holdout leaves one side without it",
                idx.len()
            )));
        }
        holdout.extend_from_slice(&idx[..n_hold]);
        train.extend_from_slice(&idx[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

/// Held-out accuracy (threshold 0.5) of a probe trained per layer on the train split.
pub fn probing_accuracy_profile<S: Scalar>(dump: &ActivationDump, cfg: &LocalizationConfig) -> Result<Vec<S>> {
    cfg.validate()?;
    let (train_idx, hold_idx) = holdout_split(dump.labels(), cfg.holdout_fraction, cfg.probe.seed)?;
    let train = dump.select_samples(&train_idx)?;
    let hold = dump.select_samples(&hold_idx)?;
    (1..=dump.n_layers())
        .map(|l| {
            let model = train_probe(&train.layer_features(l)?.to_scalar::<S>(), train.labels(), &cfg.probe)?;
            let z = model.logits(&hold.layer_features(l)?.to_scalar::<S>())?;
            let correct = z.iter().zip(hold.labels()).filter(|(&z, &y)| (z >= S::zero()) == (y == 1)).count();
            Ok(S::of_usize(correct) / S::of_usize(hold.n_samples()))
        })
        .collect()
}

/// Layers (1-based) with `D_cos > mean + α·std` over the available layers, population std.
pub fn candidate_sep<S: Scalar>(profile: &[Option<S>], alpha: S) -> Result<Vec<usize>> {
    let avail: Vec<S> = profile.iter().flatten().copied().collect();
    if avail.len() < 2 {
        return Err(Error::Insufficient(format!(
            "separability needs at least 2 available layers, got {}",
            avail.len()
        )));
    }
    let n = S::of_usize(avail.len());
    let mean = avail.iter().copied().sum::<S>() / n;
    let var = avail.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let bound = mean + alpha * var.sqrt();
    Ok(profile.iter().enumerate().filter_map(|(i, v)| v.filter(|&v| v > bound).map(|_| i + 1)).collect())
}

/// Interior layers that strictly exceed both neighbours.
pub fn candidate_attn<S: Scalar>(profile: &[S]) -> Result<Vec<usize>> {
    if profile.len() < 3 {
        return Err(Error::Insufficient(format!("local maxima need at least 3 layers, got {}", profile.len())));
    }
    Ok((1..profile.len() - 1)
        .filter(|&i| profile[i] > profile[i - 1] && profile[i] > profile[i + 1])
        .map(|i| i + 1)
        .collect())
}

/// Layers with `acc ≥ γ · max acc`.
pub fn candidate_prob<S: Scalar>(profile: &[S], gamma: S) -> Result<Vec<usize>> {
    let best = profile
        .iter()
        .copied()
        .reduce(S::max)
        .ok_or_else(|| Error::Insufficient("empty probe-accuracy profile".into()))?;
    let bound = gamma * best;
    Ok(profile.iter().enumerate().filter(|(_, &a)| a >= bound).map(|(i, _)| i + 1).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fallback {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "sep∩prob")]
    SepProb,
    #[serde(rename = "prob-only")]
    ProbOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalLayerResult {
    pub l_sep: Vec<usize>,
    pub l_attn: Vec<usize>,
    pub l_prob: Vec<usize>,
    pub l_critical: Vec<usize>,
    pub fallback_used: Fallback,
    /// False when the separability set could not be formed (too few usable layers).
    pub sep_available: bool,
    /// False when the dump carries no attention or has fewer than 3 layers.
    pub attn_available: bool,
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| b.contains(x)).collect()
}

/// Intersects the candidate sets with the fallback chain
/// `sep∩attn∩prob → sep∩prob → prob`. `None` marks a set that could not be formed.
pub fn combine_candidates(
    l_sep: Option<Vec<usize>>,
    l_attn: Option<Vec<usize>>,
    l_prob: Vec<usize>,
) -> Result<CriticalLayerResult> {
    let sep_available = l_sep.is_some();
    let attn_available = l_attn.is_some();
    let l_sep = l_sep.unwrap_or_default();
    let l_attn = l_attn.unwrap_or_default();

    let full = if attn_available { intersect(&intersect(&l_sep, &l_attn), &l_prob) } else { Vec::new() };
    let sep_prob = intersect(&l_sep, &l_prob);
    let (l_critical, fallback_used) = if !full.is_empty() {
        (full, Fallback::None)
    } else if !sep_prob.is_empty() {
        (sep_prob, Fallback::SepProb)
    } else {
        (l_prob.clone(), Fallback::ProbOnly)
    };
    if l_critical.is_empty() {
        return Err(Error::Insufficient("every candidate set is empty".into()));
    }
    Ok(CriticalLayerResult { l_sep, l_attn, l_prob, l_critical, fallback_used, sep_available, attn_available })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LayerEntry<S> {
    pub layer: usize,
    pub d_cos: Option<S>,
    pub d_l2: Option<S>,
    pub probe_acc: S,
    pub centroid_real: Vec<S>,
    pub centroid_fake: Vec<S>,
    pub mean_attention: Option<(Vec<S>, Vec<S>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LayerProfile<S> {
    pub layers: Vec<LayerEntry<S>>,
}

impl<S: Scalar> LayerProfile<S> {
    pub fn compute(dump: &ActivationDump, cfg: &LocalizationConfig) -> Result<Self> {
        let acc = probing_accuracy_profile::<S>(dump, cfg)?;
        let mut layers = Vec::with_capacity(dump.n_layers());
        for (l, probe_acc) in (1..=dump.n_layers()).zip(acc) {
            let (centroid_real, centroid_fake) = class_centroids::<S>(dump, l)?;
            let mean_attention = if dump.has_attention() { Some(class_mean_attention::<S>(dump, l)?) } else { None };
            layers.push(LayerEntry {
                layer: l,
                d_cos: cosine_distance(&centroid_real, &centroid_fake),
                d_l2: mean_attention.as_ref().map(|(r, f)| euclidean_distance(r, f)),
                probe_acc,
                centroid_real,
                centroid_fake,
                mean_attention,
            });
        }
        Ok(Self { layers })
    }

    pub fn d_cos(&self) -> Vec<Option<S>> {
        self.layers.iter().map(|e| e.d_cos).collect()
    }

    /// `None` when attention is absent.
    pub fn d_l2(&self) -> Option<Vec<S>> {
        self.layers.iter().map(|e| e.d_l2).collect()
    }

    pub fn probe_acc(&self) -> Vec<S> {
        self.layers.iter().map(|e| e.probe_acc).collect()
    }

    pub fn critical_layers(&self, cfg: &LocalizationConfig) -> Result<CriticalLayerResult> {
        let l_sep = candidate_sep(&self.d_cos(), S::of(cfg.alpha)).ok();
        let l_attn = self.d_l2().and_then(|p| candidate_attn(&p).ok());
        let l_prob = candidate_prob(&self.probe_acc(), S::of(cfg.gamma))?;
        combine_candidates(l_sep, l_attn, l_prob)
    }

    /// `layer,d_cos,d_l2,probe_acc`; unavailable values are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<S>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("layer,d_cos,d_l2,probe_acc\n");
        for e in &self.layers {
            let _ = writeln!(out, "{},{},{},{}", e.layer, cell(e.d_cos), cell(e.d_l2), e.probe_acc);
        }
        out
    }
}

/// Full localization: profile plus critical layers.
pub fn critical_layers<S: Scalar>(
    dump: &ActivationDump,
    cfg: &LocalizationConfig,
) -> Result<(LayerProfile<S>, CriticalLayerResult)> {
    let profile = LayerProfile::<S>::compute(dump, cfg)?;
    let result = profile.critical_layers(cfg)?;
    Ok((profile, result))
}
