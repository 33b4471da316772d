//! Masking ablations against a frozen linear detector.
//!
//! Masking zeroes chosen (layer, neuron) activations in the evaluation dump;
//! the detector is never refit.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::fdu::{FduClassifier, FduSignature};
use crate::metrics::{sigmoid, softplus, DetectionMetrics};
use crate::probe::ProbeModel;
use crate::scalar::Scalar;

/// A (layer, neuron) pair, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronId {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Fdu,
    RandomIn,
    RandomEx,
    HardRandom,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [MaskMode::Fdu, MaskMode::RandomIn, MaskMode::RandomEx, MaskMode::HardRandom];
}

/// Neurons to zero. Random modes carry the drawn set and the seed that drew it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub neurons: Vec<NeuronId>,
    pub mode: MaskMode,
    pub seed: Option<u64>,
    /// Hard-random draws that fell back to the nearest magnitude.
    #[serde(default)]
    pub fallback_count: usize,
}

impl MaskSpec {
    pub fn empty(mode: MaskMode) -> Self {
        Self { neurons: Vec::new(), mode, seed: None, fallback_count: 0 }
    }

    fn check(&self, dump: &ActivationDump) -> Result<()> {
        for n in &self.neurons {
            dump.check_layer(n.layer)?;
            if n.neuron == 0 || n.neuron > dump.feat_dim() {
                return Err(Error::OutOfRange(format!(
                    "neuron {} of layer {} not in 1..={}",
                    n.neuron,
                    n.layer,
                    dump.feat_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Copy of `dump` with the named columns set to zero; all other entries untouched.
pub fn mask_features(dump: &ActivationDump, spec: &MaskSpec) -> Result<ActivationDump> {
    spec.check(dump)?;
    let mut features = dump.features().to_vec();
    for n in &spec.neurons {
        let m = &mut features[n.layer - 1];
        for r in 0..m.rows() {
            m.set(r, n.neuron - 1, 0.0);
        }
    }
    dump.with_features(features)
}

/// A detector linear in the dump activations: `z = b + Σ c_(l,k) · a_(l,k)`.
///
/// Layer probes and FDU classifiers both reduce to this form, which gives
/// exact input gradients for the Taylor estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDetector<S> {
    pub bias: S,
    pub terms: Vec<(NeuronId, S)>,
}

impl<S: Scalar> LinearDetector<S> {
    pub fn from_probe(probe: &ProbeModel<S>) -> Result<Self> {
        let layer = probe.layer_index.ok_or_else(|| Error::InvalidConfig("probe has no layer index".into()))?;
        Ok(Self {
            bias: probe.bias,
            terms: probe.weights.iter().enumerate().map(|(k, &w)| (NeuronId::new(layer, k + 1), w)).collect(),
        })
    }

    pub fn from_classifier(clf: &FduClassifier<S>) -> Result<Self> {
        let sel = clf.signature.selected();
        if sel.len() != clf.head.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} FDUs but head has {} weights",
                sel.len(),
                clf.head.dim()
            )));
        }
        Ok(Self {
            bias: clf.head.bias,
            terms: sel.iter().zip(&clf.head.weights).map(|(e, &w)| (NeuronId::new(e.layer, e.neuron), w)).collect(),
        })
    }

    fn check(&self, dump: &ActivationDump) -> Result<()> {
        for (n, _) in &self.terms {
            dump.check_layer(n.layer)?;
            if n.neuron == 0 || n.neuron > dump.feat_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "detector reads neuron {} but dump has {} per layer",
                    n.neuron,
                    dump.feat_dim()
                )));
            }
        }
        Ok(())
    }

    fn activation(dump: &ActivationDump, n: NeuronId, row: usize) -> S {
        S::widen(dump.features()[n.layer - 1].get(row, n.neuron - 1))
    }

    pub fn logits(&self, dump: &ActivationDump) -> Result<Vec<S>> {
        self.check(dump)?;
        Ok((0..dump.n_samples())
            .map(|r| self.terms.iter().fold(self.bias, |z, &(n, c)| z + c * Self::activation(dump, n, r)))
            .collect())
    }

    pub fn probabilities(&self, dump: &ActivationDump) -> Result<Vec<S>> {
        Ok(self.logits(dump)?.into_iter().map(sigmoid).collect())
    }

    /// Mean BCE of the frozen detector on `dump`.
    pub fn mean_loss(&self, dump: &ActivationDump) -> Result<S> {
        let z = self.logits(dump)?;
        let total: S =
            z.iter().zip(dump.labels()).map(|(&z, &y)| if y == 1 { softplus(-z) } else { softplus(z) }).sum();
        Ok(total / S::of_usize(dump.n_samples()))
    }
}

/// First-order estimate and actual change of the mean loss when `spec` is masked.
///
/// estimate = mean over samples of `|Σ_(k∈mask) g_k · a_k|` with `g` the
/// per-sample loss gradient at the unmasked point; actual = loss(masked) − loss(unmasked).
pub fn taylor_impact<S: Scalar>(det: &LinearDetector<S>, dump: &ActivationDump, spec: &MaskSpec) -> Result<(S, S)> {
    spec.check(dump)?;
    let z = det.logits(dump)?;
    let masked: BTreeSet<NeuronId> = spec.neurons.iter().copied().collect();
    let touched: Vec<(NeuronId, S)> = det.terms.iter().copied().filter(|(n, _)| masked.contains(n)).collect();
    let mut est = S::zero();
    for (r, (&z, &y)) in z.iter().zip(dump.labels()).enumerate() {
        let resid = sigmoid(z) - if y == 1 { S::one() } else { S::zero() };
        let first_order: S =
            touched.iter().map(|&(n, c)| resid * c * LinearDetector::<S>::activation(dump, n, r)).sum();
        est = est + first_order.abs();
    }
    let estimate = est / S::of_usize(dump.n_samples());
    let actual = det.mean_loss(&mask_features(dump, spec)?)? - det.mean_loss(dump)?;
    Ok((estimate, actual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AblationReport<S> {
    pub mode: MaskMode,
    pub seed: Option<u64>,
    pub ratio: Option<f64>,
    pub masked_neurons: Vec<NeuronId>,
    pub fallback_count: usize,
    pub baseline: DetectionMetrics<S>,
    pub masked: DetectionMetrics<S>,
    /// masked − baseline
    pub deltas: DetectionMetrics<S>,
    pub taylor_estimate: S,
    pub actual_loss_delta: S,
}

/// Metrics of the frozen detector before and after masking.
pub fn evaluate_masked<S: Scalar>(
    dump_eval: &ActivationDump,
    det: &LinearDetector<S>,
    spec: &MaskSpec,
) -> Result<AblationReport<S>> {
    let masked_dump = mask_features(dump_eval, spec)?;
    let baseline = DetectionMetrics::from_probabilities(&det.probabilities(dump_eval)?, dump_eval.labels())?;
    let masked = DetectionMetrics::from_probabilities(&det.probabilities(&masked_dump)?, dump_eval.labels())?;
    let (taylor_estimate, actual_loss_delta) = taylor_impact(det, dump_eval, spec)?;
    Ok(AblationReport {
        mode: spec.mode,
        seed: spec.seed,
        ratio: None,
        masked_neurons: spec.neurons.clone(),
        fallback_count: spec.fallback_count,
        deltas: masked.minus(&baseline),
        baseline,
        masked,
        taylor_estimate,
        actual_loss_delta,
    })
}

fn selected_ids<S: Scalar>(sig: &FduSignature<S>) -> Vec<NeuronId> {
    sig.selected().iter().map(|e| NeuronId::new(e.layer, e.neuron)).collect()
}

/// Every neuron of the signature's pool layers.
fn pool_neurons<S: Scalar>(sig: &FduSignature<S>, dump: &ActivationDump) -> Result<Vec<NeuronId>> {
    let layers = sig.pool_layers();
    for &l in &layers {
        dump.check_layer(l)?;
    }
    Ok(layers.iter().flat_map(|&l| (1..=dump.feat_dim()).map(move |k| NeuronId::new(l, k))).collect())
}

/// Number of FDUs masked at `ratio`: `ceil(ratio · n)`, at least 1.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    // tolerate representation error such as 0.3 · 10 = 3.0000000000000004
    let c = (ratio * n as f64 - 1e-9).ceil();
    (c.max(1.0) as usize).min(n)
}

/// The top `ceil(ratio · |FDU|)` FDUs in rank order.
pub fn fdu_mask<S: Scalar>(sig: &FduSignature<S>, ratio: f64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("mask ratio must be in (0, 1], got {ratio}")));
    }
    let ids = selected_ids(sig);
    let m = mask_count(ratio, ids.len());
    Ok(MaskSpec { neurons: ids[..m].to_vec(), mode: MaskMode::Fdu, seed: None, fallback_count: 0 })
}

fn draw<R: Rng>(rng: &mut R, pool: &[NeuronId], size: usize) -> Result<Vec<NeuronId>> {
    if pool.len() < size {
        return Err(Error::Insufficient(format!("cannot draw {size} neurons from a pool of {}", pool.len())));
    }
    let mut picked: Vec<NeuronId> = index::sample(rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `size` neurons drawn uniformly from the pool layers, FDUs included.
pub fn random_in_mask<S: Scalar>(
    sig: &FduSignature<S>,
    dump: &ActivationDump,
    size: usize,
    seed: u64,
) -> Result<MaskSpec> {
    let pool = pool_neurons(sig, dump)?;
    let neurons = draw(&mut ChaCha8Rng::seed_from_u64(seed), &pool, size)?;
    Ok(MaskSpec { neurons, mode: MaskMode::RandomIn, seed: Some(seed), fallback_count: 0 })
}

/// `size` neurons drawn uniformly from the pool layers, FDUs excluded.
pub fn random_ex_mask<S: Scalar>(
    sig: &FduSignature<S>,
    dump: &ActivationDump,
    size: usize,
    seed: u64,
) -> Result<MaskSpec> {
    let fdus: BTreeSet<NeuronId> = selected_ids(sig).into_iter().collect();
    let pool: Vec<NeuronId> = pool_neurons(sig, dump)?.into_iter().filter(|n| !fdus.contains(n)).collect();
    let neurons = draw(&mut ChaCha8Rng::seed_from_u64(seed), &pool, size)?;
    Ok(MaskSpec { neurons, mode: MaskMode::RandomEx, seed: Some(seed), fallback_count: 0 })
}

/// Relative half-width of the magnitude band used by [`hard_random_mask`].
pub const MAGNITUDE_BAND: f64 = 0.2;

/// One non-FDU per FDU whose `|ā|` (mean over `dump`) lies within ±20% of
/// the FDU's, matched greedily in rank order and drawn uniformly inside the
/// band. An empty band falls back to the nearest `|ā|`, lowest index on ties.
pub fn hard_random_mask<S: Scalar>(sig: &FduSignature<S>, dump: &ActivationDump, seed: u64) -> Result<MaskSpec> {
    let fdus = selected_ids(sig);
    let fdu_set: BTreeSet<NeuronId> = fdus.iter().copied().collect();
    let mut available: Vec<NeuronId> = pool_neurons(sig, dump)?.into_iter().filter(|n| !fdu_set.contains(n)).collect();
    if available.len() < fdus.len() {
        return Err(Error::Insufficient(format!("{} non-FDU neurons for {} FDUs", available.len(), fdus.len())));
    }
    let magnitude = |n: NeuronId| -> f64 {
        let col = dump.features()[n.layer - 1].column(n.neuron - 1);
        (col.iter().map(|&v| f64::from(v)).sum::<f64>() / col.len() as f64).abs()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(fdus.len());
    let mut fallback_count = 0;
    let mags: Vec<f64> = available.iter().map(|&n| magnitude(n)).collect();
    let mut mags = mags;
    for &f in &fdus {
        let target = magnitude(f);
        let (lo, hi) = (target * (1.0 - MAGNITUDE_BAND), target * (1.0 + MAGNITUDE_BAND));
        let in_band: Vec<usize> = (0..available.len()).filter(|&i| mags[i] >= lo && mags[i] <= hi).collect();
        let chosen = if in_band.is_empty() {
            fallback_count += 1;
            // `available` stays sorted, so the first minimum is the lowest index
            let mut best = 0;
            for i in 1..available.len() {
                if (mags[i] - target).abs() < (mags[best] - target).abs() {
                    best = i;
                }
            }
            best
        } else {
            in_band[rng.gen_range(0..in_band.len())]
        };
        picked.push(available.remove(chosen));
        mags.remove(chosen);
    }
    Ok(MaskSpec { neurons: picked, mode: MaskMode::HardRandom, seed: Some(seed), fallback_count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct DeclinePoint<S> {
    pub ratio: f64,
    pub masked_count: usize,
    pub acc: S,
    pub ap: S,
    pub eer: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct DeclineCurve<S> {
    pub points: Vec<DeclinePoint<S>>,
}

impl<S: Scalar> DeclineCurve<S> {
    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.ratio).collect()
    }

    /// `ratio,acc,ap,eer`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,acc,ap,eer\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.ratio, p.acc, p.ap, p.eer);
        }
        out
    }
}

/// Masks growing prefixes of the FDU ranking and records the frozen detector's metrics.
pub fn monotonic_decline_sweep<S: Scalar>(
    dump_eval: &ActivationDump,
    det: &LinearDetector<S>,
    sig: &FduSignature<S>,
    ratios: &[f64],
) -> Result<DeclineCurve<S>> {
    if ratios.is_empty() || ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("ratios must be nonempty and strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let spec = fdu_mask(sig, ratio)?;
        let masked = mask_features(dump_eval, &spec)?;
        let m = DetectionMetrics::from_probabilities(&det.probabilities(&masked)?, dump_eval.labels())?;
        points.push(DeclinePoint { ratio, masked_count: spec.neurons.len(), acc: m.acc, ap: m.ap, eer: m.eer });
    }
    Ok(DeclineCurve { points })
}

/// The four masking conditions at equal size: FDUs once, each random mode once per seed.
/// Reports come back ordered by (mode, seed).
pub fn masking_suite<S: Scalar>(
    dump_eval: &ActivationDump,
    det: &LinearDetector<S>,
    sig: &FduSignature<S>,
    seeds: &[u64],
) -> Result<Vec<AblationReport<S>>> {
    let size = sig.selected().len();
    let mut reports = Vec::new();
    let mut fdu = evaluate_masked(dump_eval, det, &fdu_mask(sig, 1.0)?)?;
    fdu.ratio = Some(1.0);
    reports.push(fdu);
    for mode in [MaskMode::RandomIn, MaskMode::RandomEx, MaskMode::HardRandom] {
        for &seed in seeds {
            let spec = match mode {
                MaskMode::RandomIn => random_in_mask(sig, dump_eval, size, seed)?,
                MaskMode::RandomEx => random_ex_mask(sig, dump_eval, size, seed)?,
                _ => hard_random_mask(sig, dump_eval, seed)?,
            };
            reports.push(evaluate_masked(dump_eval, det, &spec)?);
        }
    }
    reports.sort_by_key(|r| (r.mode, r.seed));
    Ok(reports)
}
