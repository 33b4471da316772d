use fdu_core::ablation::{mask_count, mask_features};
use fdu_core::dump::{decode_dump, encode_dump};
use fdu_core::fdu::{difference_curve, elbow_index, normalize_scores, select_fdus, triadic_scores, NeuronScore};
use fdu_core::localization::{cosine_distance, holdout_split};
use fdu_core::metrics::{average_precision, equal_error_rate, ScoredLabels};
use fdu_core::probe::{bce_loss, loss_grad_activations, loss_grad_weights, train_probe_traced, ProbeModel};
use fdu_core::{ActivationDump, MaskMode, MaskSpec, Matrix, NeuronId, ProbeConfig};
use proptest::prelude::*;

/// Labels with both classes present.
fn labels(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1))
}

fn dump_strategy() -> impl Strategy<Value = ActivationDump> {
    (labels(2..=12), 1usize..=4, 1usize..=6, 0usize..=5).prop_flat_map(|(labels, n_layers, d, p)| {
        let n = labels.len();
        let feats = prop::collection::vec(prop::collection::vec(-1e3f32..1e3, n * d), n_layers);
        let attn = prop::collection::vec(prop::collection::vec(0f32..1.0, n * p), n_layers);
        (Just(labels), feats, attn).prop_map(move |(labels, feats, attn)| {
            let features = feats.into_iter().map(|f| Matrix::from_vec(n, d, f).unwrap()).collect();
            let attention = (p > 0).then(|| attn.into_iter().map(|a| Matrix::from_vec(n, p, a).unwrap()).collect());
            ActivationDump::new(labels, features, attention).unwrap()
        })
    })
}

/// Mean over positives of the precision at that positive's score, ties counted together.
fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut n_pos = 0;
    for (i, &s) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        n_pos += 1;
        let above = scores.iter().filter(|&&t| t >= s).count();
        let above_pos = scores.iter().zip(labels).filter(|(&t, &y)| t >= s && y == 1).count();
        total += above_pos as f64 / above as f64;
    }
    total / n_pos as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dump_roundtrip_is_bit_exact(d in dump_strategy()) {
        let bytes = encode_dump(&d);
        prop_assert_eq!(bytes.len(), d.encoded_len());
        let back = decode_dump(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(encode_dump(&back), bytes);
    }

    #[test]
    fn truncated_dump_is_rejected(d in dump_strategy(), cut in 1usize..64) {
        let bytes = encode_dump(&d);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_dump(&bytes[..keep]).is_err());
    }

    #[test]
    fn ap_matches_brute_force(raw in prop::collection::vec(0u8..6, 2..=8), l in labels(2..=8)) {
        let n = raw.len().min(l.len());
        prop_assume!(l[..n].contains(&0) && l[..n].contains(&1));
        let scores: Vec<f64> = raw[..n].iter().map(|&s| f64::from(s)).collect();
        let sl = ScoredLabels::new(&scores, &l[..n]).unwrap();
        let ap = average_precision(&sl);
        prop_assert!((ap - ap_oracle(&scores, &l[..n])).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        raw in prop::collection::vec(0u8..20, 2..=40),
        l in labels(2..=40),
    ) {
        let n = raw.len().min(l.len());
        prop_assume!(l[..n].contains(&0) && l[..n].contains(&1));
        let l = &l[..n];
        let s: Vec<f64> = raw[..n].iter().map(|&v| f64::from(v)).collect();
        let cube: Vec<f64> = s.iter().map(|v| v * v * v - 7.0).collect();
        let affine: Vec<f64> = s.iter().map(|v| 4.0 * v + 1.5).collect();
        let base = ScoredLabels::new(&s, l).unwrap();
        for t in [&cube, &affine] {
            let sl = ScoredLabels::new(t, l).unwrap();
            prop_assert!((average_precision(&sl) - average_precision(&base)).abs() < 1e-12);
            prop_assert!((equal_error_rate(&sl) - equal_error_rate(&base)).abs() < 1e-12);
        }
    }

    #[test]
    fn eer_is_symmetric_under_class_swap(raw in prop::collection::vec(-50i32..50, 2..=40), l in labels(2..=40)) {
        let n = raw.len().min(l.len());
        prop_assume!(l[..n].contains(&0) && l[..n].contains(&1));
        let s: Vec<f64> = raw[..n].iter().map(|&v| f64::from(v)).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let flipped: Vec<u8> = l[..n].iter().map(|y| 1 - y).collect();
        let a = equal_error_rate(&ScoredLabels::new(&s, &l[..n]).unwrap());
        let b = equal_error_rate(&ScoredLabels::new(&neg, &flipped).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn separated_scores_have_zero_eer_and_unit_ap(n_neg in 1usize..20, n_pos in 1usize..20, gap in 0.1f64..5.0) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..n_neg { s.push(i as f64 * 0.01); l.push(0); }
        for i in 0..n_pos { s.push(1.0 + gap + i as f64 * 0.01); l.push(1); }
        let sl = ScoredLabels::new(&s, &l).unwrap();
        prop_assert_eq!(equal_error_rate(&sl), 0.0);
        prop_assert_eq!(average_precision(&sl), 1.0);
    }

    #[test]
    fn weight_gradient_matches_central_differences(
        n in 2usize..=10, d in 1usize..=5, seed in any::<u64>(),
    ) {
        let (model, x, y) = instance(n, d, seed);
        let l2 = 1e-3;
        let (gw, gb) = loss_grad_weights(&model, &x, &y, l2).unwrap();
        let f = |m: &ProbeModel<f64>| bce_loss(m, &x, &y).unwrap() + m.penalty(l2);
        let h = 1e-6;
        for (k, &g) in gw.iter().enumerate() {
            let (mut p, mut q) = (model.clone(), model.clone());
            p.weights[k] += h;
            q.weights[k] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            prop_assert!(rel_err(g, fd) <= 1e-5 || (g - fd).abs() < 1e-9, "w{}: {} vs {}", k, g, fd);
        }
        let (mut p, mut q) = (model.clone(), model.clone());
        p.bias += h;
        q.bias -= h;
        let fd = (f(&p) - f(&q)) / (2.0 * h);
        prop_assert!(rel_err(gb, fd) <= 1e-5 || (gb - fd).abs() < 1e-9);
    }

    #[test]
    fn activation_gradient_matches_central_differences(d in 1usize..=5, y in 0u8..=1, seed in any::<u64>()) {
        let (model, x, _) = instance(2, d, seed);
        let h0 = x.row(0).to_vec();
        let g = loss_grad_activations(&model, &h0, y).unwrap();
        let single = |h: &[f64]| bce_loss(&model, &Matrix::from_vec(1, d, h.to_vec()).unwrap(), &[y]).unwrap();
        let step = 1e-6;
        for k in 0..d {
            let (mut p, mut q) = (h0.clone(), h0.clone());
            p[k] += step;
            q[k] -= step;
            let fd = (single(&p) - single(&q)) / (2.0 * step);
            prop_assert!(rel_err(g[k], fd) <= 1e-5 || (g[k] - fd).abs() < 1e-9, "a{}: {} vs {}", k, g[k], fd);
        }
    }

    #[test]
    fn training_loss_never_increases(n in 2usize..=30, d in 1usize..=5, seed in any::<u64>()) {
        let (_, x, y) = instance(n, d, seed);
        let cfg = ProbeConfig { max_epochs: 300, ..ProbeConfig::default() };
        let (_, history) = train_probe_traced(&x, &y, &cfg).unwrap();
        for w in history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn cosine_distance_ignores_positive_scale(
        a in prop::collection::vec(-10f64..10.0, 1..=16),
        b in prop::collection::vec(-10f64..10.0, 1..=16),
        c in 1e-3f64..1e3,
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
        match (cosine_distance(a, b), cosine_distance(&sa, &sb)) {
            (Some(x), Some(y)) => {
                prop_assert!((0.0..=2.0).contains(&x));
                prop_assert!((x - y).abs() < 1e-12);
            }
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn elbow_survives_exact_affine_maps(
        raw in prop::collection::vec(0u32..1000, 2..=60),
        shift in -1000i32..1000,
        exp in -4i32..=6,
    ) {
        let s: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
        let a = 2f64.powi(exp);
        let t: Vec<f64> = s.iter().map(|v| a * v + f64::from(shift)).collect();
        let k = |v: &[f64]| {
            let c = normalize_scores(v).unwrap();
            elbow_index(&difference_curve(&c.x, &c.y))
        };
        prop_assert_eq!(k(&s), k(&t));
    }

    #[test]
    fn selection_is_a_rank_prefix(raw in prop::collection::vec(0f64..10.0, 2..=40)) {
        let scores: Vec<NeuronScore<f64>> = raw
            .iter()
            .enumerate()
            .map(|(i, &s)| NeuronScore { layer: 1 + i % 3, neuron: 1 + i / 3, g_bar: 1.0, a_bar: 1.0, weight: s, score: s })
            .collect();
        let sig = select_fdus(&scores).unwrap();
        prop_assert!(sig.elbow >= 1 && sig.elbow <= raw.len());
        prop_assert_eq!(sig.entries.len(), raw.len());
        let min_sel = sig.selected().iter().map(|e| e.score).fold(f64::INFINITY, f64::min);
        let max_rest = sig.unselected().iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_sel >= max_rest);
    }

    #[test]
    fn scores_survive_joint_sign_flip(d in dump_strategy(), seed in any::<u64>()) {
        let (model, _, _) = instance(2, d.feat_dim(), seed);
        let model = model.for_layer(1);
        let flipped_feats = d.features().iter().map(|m| m.map(|v| -v)).collect();
        let flipped = ActivationDump::new(d.labels().to_vec(), flipped_feats, None).unwrap();
        let mut neg = model.clone();
        neg.weights.iter_mut().for_each(|w| *w = -*w);
        let a = triadic_scores(&d, &[1], &[model]).unwrap();
        let b = triadic_scores(&flipped, &[1], &[neg]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.score - y.score).abs() <= 1e-12 * x.score.max(1.0));
        }
    }

    #[test]
    fn masking_is_idempotent(d in dump_strategy(), picks in prop::collection::vec((0usize..4, 0usize..6), 0..6)) {
        let neurons: Vec<NeuronId> = picks
            .into_iter()
            .map(|(l, k)| NeuronId::new(1 + l % d.n_layers(), 1 + k % d.feat_dim()))
            .collect();
        let spec = MaskSpec { neurons: neurons.clone(), mode: MaskMode::RandomIn, seed: Some(0), fallback_count: 0 };
        let once = mask_features(&d, &spec).unwrap();
        let twice = mask_features(&once, &spec).unwrap();
        prop_assert_eq!(&once, &twice);
        for (l, (m, orig)) in once.features().iter().zip(d.features()).enumerate() {
            for k in 0..d.feat_dim() {
                let masked = neurons.contains(&NeuronId::new(l + 1, k + 1));
                for r in 0..d.n_samples() {
                    let want = if masked { 0.0 } else { orig.get(r, k) };
                    prop_assert_eq!(m.get(r, k).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn holdout_split_partitions_each_class(l in labels(4..=200), frac in 0.1f64..0.9, seed in any::<u64>()) {
        let Ok((train, hold)) = holdout_split(&l, frac, seed) else { return Ok(()); };
        let mut all: Vec<usize> = train.iter().chain(&hold).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
        for class in [0u8, 1] {
            let n = l.iter().filter(|&&y| y == class).count();
            let h = hold.iter().filter(|&&i| l[i] == class).count();
            prop_assert_eq!(h, (n as f64 * frac).round() as usize);
        }
        prop_assert_eq!(holdout_split(&l, frac, seed).unwrap(), (train, hold));
    }

    #[test]
    fn mask_count_is_bounded_and_monotone(n in 1usize..500, a in 0.001f64..=1.0, b in 0.001f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (m_lo, m_hi) = (mask_count(lo, n), mask_count(hi, n));
        prop_assert!(m_lo >= 1 && m_hi <= n && m_lo <= m_hi);
        prop_assert_eq!(mask_count(1.0, n), n);
    }
}

/// Small random probe problem with features in [-1, 1].
fn instance(n: usize, d: usize, seed: u64) -> (ProbeModel<f64>, Matrix<f64>, Vec<u8>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    y[0] = 0;
    y[1] = 1;
    let model = ProbeModel {
        layer_index: None,
        bias: rng.gen_range(-1.0..1.0),
        weights: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    };
    (model, Matrix::from_vec(n, d, x).unwrap(), y)
}
