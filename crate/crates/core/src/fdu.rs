//! Neuron scoring and elbow-truncated selection.
//!
//! Every neuron of the candidate layers gets `S = |ḡ · ā · w|`: mean absolute
//! loss gradient with respect to the activation, mean activation, and the
//! probe weight. Scores are ranked, min-max normalized onto the unit square,
//! and the rank with the largest vertical deviation from the start–end chord
//! is the cutoff. Ranks `1..=k*` are kept.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dump::ActivationDump;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::probe::{loss_grad_activations, train_probe, ProbeConfig, ProbeModel};
use crate::scalar::Scalar;

pub const TIE_BREAK_NOTE: &str = "score descending, then layer ascending, then neuron ascending";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct NeuronScore<S> {
    pub layer: usize,
    pub neuron: usize,
    pub g_bar: S,
    pub a_bar: S,
    pub weight: S,
    pub score: S,
}

/// Per-neuron `(ḡ, ā)` of one layer under its probe.
pub fn neuron_stats<S: Scalar>(dump: &ActivationDump, layer: usize, model: &ProbeModel<S>) -> Result<Vec<(S, S)>> {
    let feats = dump.layer_features(layer)?.to_scalar::<S>();
    if feats.cols() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "layer {layer} has {} neurons, probe has {}",
            feats.cols(),
            model.dim()
        )));
    }
    let d = feats.cols();
    let mut g_sum = vec![S::zero(); d];
    let mut a_sum = vec![S::zero(); d];
    for (h, &y) in feats.iter_rows().zip(dump.labels()) {
        let g = loss_grad_activations(model, h, y)?;
        for k in 0..d {
            g_sum[k] = g_sum[k] + g[k].abs();
            a_sum[k] = a_sum[k] + h[k];
        }
    }
    let n = S::of_usize(dump.n_samples());
    Ok(g_sum.into_iter().zip(a_sum).map(|(g, a)| (g / n, a / n)).collect())
}

fn probe_for<S>(probes: &[ProbeModel<S>], layer: usize) -> Result<&ProbeModel<S>> {
    probes.iter().find(|p| p.layer_index == Some(layer)).ok_or(Error::MissingProbe(layer))
}

/// One [`NeuronScore`] per (layer, neuron) of the requested layers.
pub fn triadic_scores<S: Scalar>(
    dump: &ActivationDump,
    layers: &[usize],
    probes: &[ProbeModel<S>],
) -> Result<Vec<NeuronScore<S>>> {
    let mut out = Vec::with_capacity(layers.len() * dump.feat_dim());
    for &layer in layers {
        let model = probe_for(probes, layer)?;
        for (k, (g_bar, a_bar)) in neuron_stats(dump, layer, model)?.into_iter().enumerate() {
            let weight = model.weights[k];
            out.push(NeuronScore { layer, neuron: k + 1, g_bar, a_bar, weight, score: (g_bar * a_bar * weight).abs() });
        }
    }
    Ok(out)
}

/// One probe per layer, fit on all samples of `dump`.
pub fn train_layer_probes<S: Scalar>(
    dump: &ActivationDump,
    layers: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeModel<S>>> {
    layers
        .iter()
        .map(|&l| Ok(train_probe(&dump.layer_features(l)?.to_scalar::<S>(), dump.labels(), cfg)?.for_layer(l)))
        .collect()
}

/// Ranking curve on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCurve<S> {
    /// Raw scores, descending.
    pub sorted: Vec<S>,
    pub x: Vec<S>,
    pub y: Vec<S>,
    /// All scores equal; every `y` is 0.
    pub degenerate: bool,
}

pub fn normalize_scores<S: Scalar>(scores: &[S]) -> Result<NormalizedCurve<S>> {
    if scores.len() < 2 {
        return Err(Error::Insufficient(format!("need at least 2 scores, got {}", scores.len())));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    Ok(curve_from_sorted(sorted))
}

fn curve_from_sorted<S: Scalar>(sorted: Vec<S>) -> NormalizedCurve<S> {
    let n = sorted.len();
    let (max, min) = (sorted[0], sorted[n - 1]);
    let degenerate = max.partial_cmp(&min) != Some(Ordering::Greater);
    let span = max - min;
    let last = S::of_usize(n - 1);
    let x = (0..n).map(|k| S::of_usize(k) / last).collect();
    let y = sorted.iter().map(|&s| if degenerate { S::zero() } else { (s - min) / span }).collect();
    NormalizedCurve { sorted, x, y, degenerate }
}

/// `D(k) = y_k − (y_1 + (y_N − y_1)·x_k)`.
pub fn difference_curve<S: Scalar>(x: &[S], y: &[S]) -> Vec<S> {
    let (Some(&first), Some(&last)) = (y.first(), y.last()) else {
        return Vec::new();
    };
    x.iter().zip(y).map(|(&xk, &yk)| yk - (first + (last - first) * xk)).collect()
}

/// 1-based argmax of `|D(k)|`, smallest rank on ties; 1 for an all-zero curve.
pub fn elbow_index<S: Scalar>(difference: &[S]) -> usize {
    let mut best = 0;
    for (k, d) in difference.iter().enumerate() {
        if d.abs() > difference[best].abs() {
            best = k;
        }
    }
    best + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolScope {
    #[default]
    Global,
    PerLayer,
}

impl std::str::FromStr for PoolScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "per-layer" => Ok(Self::PerLayer),
            other => Err(Error::InvalidConfig(format!("pool scope must be global or per-layer, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FduEntry<S> {
    pub layer: usize,
    pub neuron: usize,
    pub g_bar: S,
    pub a_bar: S,
    pub weight: S,
    pub score: S,
    /// Min-max normalized score within its pool.
    pub normalized: S,
}

/// The ranking curve of one pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PoolCurve<S> {
    /// `None` for the global pool.
    pub layer: Option<usize>,
    pub x: Vec<S>,
    pub y: Vec<S>,
    pub difference: Vec<S>,
    pub elbow: usize,
    pub degenerate: bool,
}

/// Ranked neurons with the selected ones first: `entries[..elbow]` is the FDU set.
///
/// In global scope `elbow` is `k*` of the single curve and entries are in
/// rank order. In per-layer scope each layer is its own pool, `elbow` is the
/// total number selected, and both the selected and the unselected block
/// are ordered by raw score with the same tie-break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FduSignature<S> {
    pub pool_scope: PoolScope,
    pub elbow: usize,
    pub entries: Vec<FduEntry<S>>,
    pub degenerate: bool,
    pub tie_break_note: String,
    pub curves: Vec<PoolCurve<S>>,
}

fn rank_order<S: Scalar>(a: &NeuronScore<S>, b: &NeuronScore<S>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.layer.cmp(&b.layer)).then(a.neuron.cmp(&b.neuron))
}

fn entry_order<S: Scalar>(a: &FduEntry<S>, b: &FduEntry<S>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.layer.cmp(&b.layer)).then(a.neuron.cmp(&b.neuron))
}

/// Rank one pool and cut at its elbow.
fn select_pool<S: Scalar>(scores: &[NeuronScore<S>], layer: Option<usize>) -> Result<(Vec<FduEntry<S>>, PoolCurve<S>)> {
    if scores.len() < 2 {
        return Err(Error::Insufficient(format!("need at least 2 scores to rank, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite("neuron scores".into()));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(rank_order);
    let curve = curve_from_sorted(ranked.iter().map(|s| s.score).collect());
    let difference = difference_curve(&curve.x, &curve.y);
    let elbow = if curve.degenerate { 1 } else { elbow_index(&difference) };
    let entries = ranked
        .into_iter()
        .zip(&curve.y)
        .map(|(s, &normalized)| FduEntry {
            layer: s.layer,
            neuron: s.neuron,
            g_bar: s.g_bar,
            a_bar: s.a_bar,
            weight: s.weight,
            score: s.score,
            normalized,
        })
        .collect();
    let pool = PoolCurve { layer, x: curve.x, y: curve.y, difference, elbow, degenerate: curve.degenerate };
    Ok((entries, pool))
}

/// Global selection over every supplied neuron.
pub fn select_fdus<S: Scalar>(scores: &[NeuronScore<S>]) -> Result<FduSignature<S>> {
    select_fdus_scoped(scores, PoolScope::Global)
}

pub fn select_fdus_scoped<S: Scalar>(scores: &[NeuronScore<S>], scope: PoolScope) -> Result<FduSignature<S>> {
    match scope {
        PoolScope::Global => {
            let (entries, curve) = select_pool(scores, None)?;
            Ok(FduSignature {
                pool_scope: scope,
                elbow: curve.elbow,
                degenerate: curve.degenerate,
                entries,
                tie_break_note: TIE_BREAK_NOTE.into(),
                curves: vec![curve],
            })
        }
        PoolScope::PerLayer => {
            let mut layers: Vec<usize> = scores.iter().map(|s| s.layer).collect();
            layers.sort_unstable();
            layers.dedup();
            let mut selected = Vec::new();
            let mut rest = Vec::new();
            let mut curves = Vec::new();
            for l in layers {
                let pool: Vec<_> = scores.iter().filter(|s| s.layer == l).cloned().collect();
                let (mut entries, curve) = select_pool(&pool, Some(l))?;
                rest.extend(entries.split_off(curve.elbow));
                selected.extend(entries);
                curves.push(curve);
            }
            if curves.is_empty() {
                return Err(Error::Insufficient("no scores to rank".into()));
            }
            selected.sort_by(entry_order);
            rest.sort_by(entry_order);
            let elbow = selected.len();
            selected.extend(rest);
            Ok(FduSignature {
                pool_scope: scope,
                elbow,
                degenerate: curves.iter().all(|c| c.degenerate),
                entries: selected,
                tie_break_note: TIE_BREAK_NOTE.into(),
                curves,
            })
        }
    }
}

impl<S: Scalar> FduSignature<S> {
    pub fn selected(&self) -> &[FduEntry<S>] {
        &self.entries[..self.elbow]
    }

    pub fn unselected(&self) -> &[FduEntry<S>] {
        &self.entries[self.elbow..]
    }

    /// Distinct layers of the ranked pool, ascending.
    pub fn pool_layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// `rank,x,y,D`; per-layer pools are written one after another, ranks restarting.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("rank,x,y,D\n");
        for c in &self.curves {
            for k in 0..c.x.len() {
                let _ = writeln!(out, "{},{},{},{}", k + 1, c.x[k], c.y[k], c.difference[k]);
            }
        }
        out
    }
}

/// Activations of the selected neurons, one column per FDU in ranked order.
pub fn assemble_fdu_features<S: Scalar>(dump: &ActivationDump, sig: &FduSignature<S>) -> Result<Matrix<S>> {
    let sel = sig.selected();
    for e in sel {
        dump.check_layer(e.layer)?;
        if e.neuron == 0 || e.neuron > dump.feat_dim() {
            return Err(Error::OutOfRange(format!("neuron {} not in 1..={}", e.neuron, dump.feat_dim())));
        }
    }
    let n = dump.n_samples();
    let mut data = Vec::with_capacity(n * sel.len());
    for r in 0..n {
        for e in sel {
            data.push(S::widen(dump.features()[e.layer - 1].get(r, e.neuron - 1)));
        }
    }
    Matrix::from_vec(n, sel.len(), data)
}

/// Logistic head over the concatenated FDU activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FduClassifier<S> {
    pub signature: FduSignature<S>,
    pub head: ProbeModel<S>,
}

impl<S: Scalar> FduClassifier<S> {
    pub fn probabilities(&self, dump: &ActivationDump) -> Result<Vec<S>> {
        self.head.probabilities(&assemble_fdu_features(dump, &self.signature)?)
    }
}

pub fn train_fdu_classifier<S: Scalar>(
    dump_train: &ActivationDump,
    sig: &FduSignature<S>,
    cfg: &ProbeConfig,
) -> Result<FduClassifier<S>> {
    let x = assemble_fdu_features(dump_train, sig)?;
    let head = train_probe(&x, dump_train.labels(), cfg)?;
    Ok(FduClassifier { signature: sig.clone(), head })
}
