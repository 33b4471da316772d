//! Pipeline checks against the planted Gaussian model, whose answers are known in closed form.

use fdu_core::ablation::{evaluate_masked, monotonic_decline_sweep, LinearDetector};
use fdu_core::fdu::{select_fdus, train_fdu_classifier, train_layer_probes, triadic_scores};
use fdu_core::localization::{class_centroids, holdout_split, probing_accuracy_profile};
use fdu_core::probe::train_probe;
use fdu_core::synth::{bayes_error, generate_dump, mahalanobis};
use fdu_core::{read_dump, write_dump, LocalizationConfig, MaskMode, MaskSpec, NeuronId, PlantSpec, ProbeConfig};

#[test]
fn empirical_centroids_converge_to_the_planted_means() {
    let n = 1000;
    for seed in 0..20 {
        let spec = PlantSpec::uniform(2, n, 6, 0, &[2], &[1, 4], 1.25, seed);
        let (dump, _) = generate_dump(&spec).unwrap();
        for layer in 1..=2 {
            let (real, fake) = class_centroids::<f64>(&dump, layer).unwrap();
            let planted = spec.shift_vector(layer);
            let bound = 5.0 * spec.noise_sigma / (n as f64).sqrt();
            for k in 0..6 {
                let (e_real, e_fake) = (real[k].abs(), (fake[k] - planted[k]).abs());
                assert!(e_real <= bound && e_fake <= bound, "seed {seed} layer {layer} neuron {k}: {e_real} {e_fake}");
            }
        }
    }
}

#[test]
fn probe_direction_aligns_with_the_bayes_direction() {
    let spec = PlantSpec {
        mean_shift: vec![vec![1.0, -0.5, 0.75]],
        ..PlantSpec::uniform(1, 20_000, 5, 0, &[1], &[1, 3, 5], 0.0, 3)
    };
    let (dump, oracle) = generate_dump(&spec).unwrap();
    let x = dump.layer_features(1).unwrap().to_scalar::<f64>();
    let model = train_probe(&x, dump.labels(), &ProbeConfig::default()).unwrap();
    let w = &model.weights;
    let b = &oracle[0].bayes_direction;
    let dot: f64 = w.iter().zip(b).map(|(p, q)| p * q).sum();
    let cos = dot / (w.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt());
    assert!(cos >= 0.99, "cosine {cos}");
}

#[test]
fn non_signal_layers_sit_at_chance() {
    let spec = PlantSpec::uniform(4, 2000, 8, 0, &[2], &[1, 2], 1.5, 8);
    let (dump, _) = generate_dump(&spec).unwrap();
    let acc: Vec<f64> = probing_accuracy_profile(&dump, &LocalizationConfig::default()).unwrap();
    for (i, a) in acc.iter().enumerate() {
        if i + 1 == 2 {
            assert!(*a > 0.8, "signal layer {a}");
        } else {
            assert!((a - 0.5).abs() <= 0.05, "layer {} accuracy {a}", i + 1);
        }
    }
}

#[test]
fn bayes_error_is_invariant_under_joint_scaling() {
    let mu0 = [0.0, 1.0, -2.0];
    let mu1 = [1.5, 0.0, -1.0];
    let var = [1.0, 2.0, 0.5];
    let base = bayes_error(mahalanobis(&mu0, &mu1, &var).unwrap()).unwrap();
    for c in [0.1, 3.0, 250.0f64] {
        let s0: Vec<f64> = mu0.iter().map(|v| v * c).collect();
        let s1: Vec<f64> = mu1.iter().map(|v| v * c).collect();
        let sv: Vec<f64> = var.iter().map(|v| v * c * c).collect();
        let scaled = bayes_error(mahalanobis(&s0, &s1, &sv).unwrap()).unwrap();
        assert!((scaled - base).abs() < 1e-12, "c={c}");
    }
}

#[test]
fn generated_attention_rows_are_distributions() {
    let mut spec = PlantSpec::uniform(3, 50, 4, 7, &[2], &[1], 1.0, 1);
    spec.attn_shift = 2.0;
    let (dump, _) = generate_dump(&spec).unwrap();
    for layer in 1..=3 {
        for row in dump.layer_attention(layer).unwrap().iter_rows() {
            assert!(row.iter().all(|&v| v > 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-4, "{s}");
        }
    }
}

#[test]
fn generated_dump_survives_the_file_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = PlantSpec::uniform(3, 64, 5, 4, &[1, 3], &[2], 1.0, 17);
    spec.base_offset = 0.5;
    let (dump, _) = generate_dump(&spec).unwrap();
    let path = dir.path().join("planted.dump");
    write_dump(&dump, &path).unwrap();
    let back = read_dump(&path).unwrap();
    assert_eq!(back, dump);
    for l in 1..=3 {
        let (r, f) = class_centroids::<f64>(&back, l).unwrap();
        assert!(r.iter().chain(&f).all(|v| v.is_finite()));
    }
}

/// Train/holdout parts of a one-layer planted dump and its planted neurons.
fn planted(seed: u64) -> (fdu_core::ActivationDump, fdu_core::ActivationDump, Vec<usize>) {
    let neurons = vec![3, 9, 14, 20];
    let spec = PlantSpec::uniform(1, 1000, 24, 0, &[1], &neurons, 1.5, seed);
    let (dump, _) = generate_dump(&spec).unwrap();
    let (tr, ho) = holdout_split(dump.labels(), 0.3, seed).unwrap();
    (dump.select_samples(&tr).unwrap(), dump.select_samples(&ho).unwrap(), neurons)
}

#[test]
fn masking_planted_neurons_hurts_more_than_random_ones() {
    use rand::seq::index;
    use rand::SeedableRng;

    let cfg = ProbeConfig { max_epochs: 2000, ..ProbeConfig::default() };
    let mut wins = 0;
    for seed in 0..20 {
        let (train, hold, neurons) = planted(seed);
        let probe = train_layer_probes::<f64>(&train, &[1], &cfg).unwrap().remove(0);
        let det = LinearDetector::from_probe(&probe).unwrap();
        let spec = |neurons: Vec<usize>, mode| MaskSpec {
            neurons: neurons.into_iter().map(|k| NeuronId::new(1, k)).collect(),
            mode,
            seed: Some(seed),
            fallback_count: 0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let random: Vec<usize> = index::sample(&mut rng, 24, neurons.len()).into_iter().map(|i| i + 1).collect();
        let planted_drop = evaluate_masked(&hold, &det, &spec(neurons, MaskMode::Fdu)).unwrap().deltas.acc;
        let random_drop = evaluate_masked(&hold, &det, &spec(random, MaskMode::RandomIn)).unwrap().deltas.acc;
        wins += usize::from(planted_drop < random_drop);
    }
    assert!(wins >= 19, "planted mask hurt more in {wins}/20 runs");
}

#[test]
fn full_fdu_mask_does_no_better_than_half() {
    let cfg = ProbeConfig { max_epochs: 2000, ..ProbeConfig::default() };
    for seed in 0..5 {
        let (train, hold, _) = planted(100 + seed);
        let probes = train_layer_probes::<f64>(&train, &[1], &cfg).unwrap();
        let sig = select_fdus(&triadic_scores(&train, &[1], &probes).unwrap()).unwrap();
        let det = LinearDetector::from_classifier(&train_fdu_classifier(&train, &sig, &cfg).unwrap()).unwrap();
        let curve = monotonic_decline_sweep(&hold, &det, &sig, &[0.5, 1.0]).unwrap();
        let (half, full) = (curve.points[0].acc, curve.points[1].acc);
        assert!(full <= half + 0.02, "seed {seed}: {full} after {half}");
    }
}

#[test]
fn single_precision_pipeline_agrees_with_double() {
    let cfg = ProbeConfig { max_epochs: 1500, ..ProbeConfig::default() };
    let (train, _, _) = planted(42);
    let p64 = train_layer_probes::<f64>(&train, &[1], &cfg).unwrap();
    let p32 = train_layer_probes::<f32>(&train, &[1], &cfg).unwrap();
    for (a, b) in p64[0].weights.iter().zip(&p32[0].weights) {
        assert!((a - f64::from(*b)).abs() < 1e-3, "{a} vs {b}");
    }
    let s64 = select_fdus(&triadic_scores(&train, &[1], &p64).unwrap()).unwrap();
    let s32 = select_fdus(&triadic_scores(&train, &[1], &p32).unwrap()).unwrap();
    assert_eq!(selected_ids(&s64), selected_ids(&s32));
}

fn selected_ids<S: fdu_core::Scalar>(sig: &fdu_core::fdu::FduSignature<S>) -> Vec<(usize, usize)> {
    sig.selected().iter().map(|e| (e.layer, e.neuron)).collect()
}
