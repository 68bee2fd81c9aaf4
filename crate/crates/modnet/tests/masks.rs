//! Mask sampling, hardening, set algebra, baselines and the on-disk format.

mod common;

use common::tiny_model;
use modnet::mask::{
    export_binary_mask, export_heatmap_csv, export_logits, gumbel_sigmoid_sample, harden,
    import_mask, init_logits, keep_ratio, magnitude_mask, mask_complement, mask_intersect,
    mask_union, per_layer_keep_ratio, random_mask_global, random_mask_layerwise,
    relaxed_logit_grad_factor, sparsity_penalty, straight_through, BinaryMask, MaskFile,
    MaskLogits,
};
use modnet::Error;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits_from(values: Vec<f64>) -> MaskLogits<f64> {
    MaskLogits {
        names: vec!["w".into()],
        layers: vec![ArrayD::from_shape_vec(vec![values.len()], values).unwrap()],
    }
}

fn mask_from(bits: Vec<u8>) -> BinaryMask {
    BinaryMask {
        names: vec!["w".into()],
        layers: vec![ArrayD::from_shape_vec(vec![bits.len()], bits).unwrap()],
    }
}

#[test]
fn harden_is_strict_positive_threshold() {
    let logits = logits_from(vec![-1.0, 0.0, 1e-9, 2.5, -1e-9]);
    let hard = harden(&logits);
    assert_eq!(hard.layers[0].as_slice().unwrap(), &[0, 0, 1, 1, 0]);
}

#[test]
fn gumbel_rate_matches_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &pi in &[-1.5f64, 0.0, 0.8] {
        let logits = logits_from(vec![pi]);
        let expected = 1.0 / (1.0 + (-pi).exp());
        let mut ones = 0usize;
        let n = 10_000;
        for _ in 0..n {
            // Low temperature: the relaxed sample saturates toward {0,1}.
            let relaxed = gumbel_sigmoid_sample(&logits, 0.05, &mut rng).unwrap();
            let mult = straight_through(&relaxed);
            if mult[0][[0]] == 1.0 {
                ones += 1;
            }
        }
        let rate = ones as f64 / n as f64;
        assert!(
            (rate - expected).abs() < 0.02,
            "pi={pi}: rate {rate} vs sigmoid {expected}"
        );
    }
}

#[test]
fn gumbel_rejects_nonpositive_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = logits_from(vec![0.0]);
    assert!(gumbel_sigmoid_sample(&logits, 0.0, &mut rng).is_err());
    assert!(gumbel_sigmoid_sample(&logits, -1.0, &mut rng).is_err());
}

#[test]
fn straight_through_grad_factor_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = logits_from(vec![0.3, -0.7, 1.2]);
    let relaxed = gumbel_sigmoid_sample(&logits, 1.0, &mut rng).unwrap();
    let factor = relaxed_logit_grad_factor(&relaxed);
    for (f, r) in factor[0].iter().zip(relaxed.layers[0].iter()) {
        assert!((f - r * (1.0 - r)).abs() < 1e-12); // temperature 1.0
        assert!(*f >= 0.0 && *f <= 0.25);
    }
}

#[test]
fn de_morgan_identities() {
    let a = mask_from(vec![1, 1, 0, 0, 1, 0]);
    let b = mask_from(vec![1, 0, 1, 0, 1, 1]);
    let lhs = mask_complement(&mask_intersect(&a, &b).unwrap());
    let rhs = mask_union(&mask_complement(&a), &mask_complement(&b)).unwrap();
    assert_eq!(lhs.layers, rhs.layers);
    let lhs2 = mask_complement(&mask_union(&a, &b).unwrap());
    let rhs2 = mask_intersect(&mask_complement(&a), &mask_complement(&b)).unwrap();
    assert_eq!(lhs2.layers, rhs2.layers);
    // Involution and idempotence.
    assert_eq!(mask_complement(&mask_complement(&a)).layers, a.layers);
    assert_eq!(mask_intersect(&a, &a).unwrap().layers, a.layers);
    assert_eq!(mask_union(&a, &a).unwrap().layers, a.layers);
}

#[test]
fn incongruent_masks_rejected() {
    let a = mask_from(vec![1, 0]);
    let b = mask_from(vec![1, 0, 1]);
    assert!(mask_intersect(&a, &b).is_err());
    assert!(mask_union(&a, &b).is_err());
}

#[test]
fn sparsity_penalty_is_alpha_times_logit_sum() {
    let logits = logits_from(vec![0.5, -2.0, 3.0]);
    let penalty: f64 = sparsity_penalty(&logits, 0.1);
    assert!((penalty - 0.1 * 1.5).abs() < 1e-12);
    let zero: f64 = sparsity_penalty(&logits, 0.0);
    assert_eq!(zero, 0.0);
}

#[test]
fn random_global_mask_has_exact_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = vec!["a".into(), "b".into()];
    let shapes = vec![vec![4, 5], vec![30]];
    for &ratio in &[0.0, 0.3, 0.5, 1.0] {
        let mask = random_mask_global(names.clone(), &shapes, ratio, &mut rng).unwrap();
        assert_eq!(mask.ones_count(), (ratio * 50.0).floor() as usize);
    }
    assert!(random_mask_global(names, &shapes, 1.5, &mut rng).is_err());
}

#[test]
fn random_layerwise_mask_matches_per_layer_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = BinaryMask {
        names: vec!["a".into(), "b".into()],
        layers: vec![
            ArrayD::from_shape_vec(vec![2, 5], vec![1, 0, 1, 1, 0, 0, 0, 1, 0, 0]).unwrap(),
            ArrayD::from_shape_vec(vec![6], vec![1, 1, 1, 0, 0, 0]).unwrap(),
        ],
    };
    let sample = random_mask_layerwise(&reference, &mut rng);
    assert_eq!(per_layer_keep_ratio(&sample), per_layer_keep_ratio(&reference));
    assert!((keep_ratio(&sample) - keep_ratio(&reference)).abs() < 1e-12);
}

#[test]
fn magnitude_mask_keeps_largest_weights() {
    let (_, mut params) = tiny_model::<f64>(9);
    // Make magnitudes unambiguous: conv weights small, fc weights large.
    for p in params.params_mut() {
        if p.name == "conv1.weight" {
            p.values.fill(0.01);
        }
        if p.name == "fc.weight" {
            p.values.fill(5.0);
        }
    }
    let total: usize = params.maskable().iter().map(|p| p.values.len()).sum();
    let fc_len = params.get("fc.weight").unwrap().values.len();
    let ratio = fc_len as f64 / total as f64;
    let mask = magnitude_mask(&params, ratio).unwrap();
    assert_eq!(mask.ones_count(), (ratio * total as f64).floor() as usize);
    // Every kept entry sits in the fc tensor.
    let fc_idx = mask.names.iter().position(|n| n == "fc.weight").unwrap();
    assert_eq!(mask.layers[fc_idx].iter().filter(|&&b| b == 1).count(), mask.ones_count());
}

#[test]
fn init_logits_follow_parameters() {
    let (_, params) = tiny_model::<f64>(10);
    let logits = init_logits(&params, 0.5);
    assert_eq!(logits.names, params.maskable_names());
    for (l, p) in logits.layers.iter().zip(params.maskable()) {
        assert_eq!(l.shape(), p.values.shape());
        assert!(l.iter().all(|&v| v == 0.5));
    }
    // Positive init logit hardens to all-ones.
    let hard = harden(&logits);
    assert_eq!(hard.ones_count(), hard.total_entries());
}

#[test]
fn mask_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let logits = MaskLogits::<f32> {
        names: vec!["conv1.weight".into(), "fc.weight".into()],
        layers: vec![
            ArrayD::from_shape_vec(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, -0.0, 9.75]).unwrap(),
            ArrayD::from_shape_vec(vec![4], vec![1.0, 2.0, -3.5, 0.125]).unwrap(),
        ],
    };
    export_logits(&logits, 42, "run-a", dir.path()).unwrap();
    match import_mask::<f32>(dir.path()).unwrap() {
        MaskFile::Logits(l) => {
            assert_eq!(l.names, logits.names);
            for (a, b) in l.layers.iter().zip(&logits.layers) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        MaskFile::Binary(_) => panic!("wrong kind"),
    }

    let dir2 = tempfile::tempdir().unwrap();
    let mask = mask_from(vec![1, 0, 1, 1, 0]);
    export_binary_mask(&mask, 7, "run-b", dir2.path()).unwrap();
    match import_mask::<f32>(dir2.path()).unwrap() {
        MaskFile::Binary(m) => assert_eq!(m.layers, mask.layers),
        MaskFile::Logits(_) => panic!("wrong kind"),
    }
}

#[test]
fn corrupt_mask_files_rejected_with_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mask = mask_from(vec![1, 0, 1]);
    export_binary_mask(&mask, 7, "run", dir.path()).unwrap();
    // Truncate the layer file.
    std::fs::write(dir.path().join("w.bin"), [1u8, 0]).unwrap();
    match import_mask::<f32>(dir.path()) {
        Err(Error::Format { .. }) => {}
        other => panic!("expected format error, got {other:?}"),
    }
    // Byte outside {0,1}.
    std::fs::write(dir.path().join("w.bin"), [1u8, 0, 2]).unwrap();
    match import_mask::<f32>(dir.path()) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn zero_logit_heatmap_is_uniform_half() {
    let dir = tempfile::tempdir().unwrap();
    let logits = MaskLogits::<f32> {
        names: vec!["conv1.weight".into()],
        layers: vec![ArrayD::zeros(vec![3, 4])],
    };
    export_heatmap_csv(&logits, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("heatmap_conv1_weight.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        for cell in row.split(',') {
            assert_eq!(cell, "0.500000");
        }
    }
}
