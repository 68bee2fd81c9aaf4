//! Finite-difference oracles for the backward pass, mask-gradient
//! annihilation, and the all-ones-mask bitwise trajectory equivalence.

mod common;

use common::{random_batch, tiny_model};
use modnet::data::{build_full_colored_mnist, synthetic_digit_bank, BiasSpec, ColorPalette};
use modnet::mask::BinaryMask;
use modnet::nn::{
    backward, forward_tape, mask_raw_grads, MaskMultiplier, ParamKind, ParameterSet,
};
use modnet::objective::{cross_entropy_with_grad, ObjectiveSpec};
use modnet::pipeline::{stage1_train, stage3_retrain, MrmConfig, PipelineData};
use modnet::scalar::Scalar;
use ndarray::{Array4, ArrayD};

fn loss_of(
    arch: &modnet::nn::ModelArchitecture,
    params: &ParameterSet<f64>,
    mask: Option<&MaskMultiplier<f64>>,
    batch: &Array4<f64>,
    labels: &[usize],
) -> f64 {
    let (scores, _tape) = forward_tape(arch, params, mask, batch).unwrap();
    let (loss, _) = cross_entropy_with_grad(&scores, labels).unwrap();
    loss
}

fn analytic_raw_grads(
    arch: &modnet::nn::ModelArchitecture,
    params: &ParameterSet<f64>,
    mask: Option<&MaskMultiplier<f64>>,
    batch: &Array4<f64>,
    labels: &[usize],
) -> Vec<ArrayD<f64>> {
    let (scores, tape) = forward_tape(arch, params, mask, batch).unwrap();
    let (_, d_scores) = cross_entropy_with_grad(&scores, labels).unwrap();
    let bw = backward(arch, params, mask, tape, &d_scores).unwrap();
    mask_raw_grads(params, mask, bw.grads_effective)
}

fn check_against_fd(
    arch: &modnet::nn::ModelArchitecture,
    params: &ParameterSet<f64>,
    mask: Option<&MaskMultiplier<f64>>,
    batch: &Array4<f64>,
    labels: &[usize],
) {
    let grads = analytic_raw_grads(arch, params, mask, batch, labels);
    let h = 1e-6;
    let trainable = params.trainable_indices();
    for (slot, &pi) in trainable.iter().enumerate() {
        let name = params.params()[pi].name.clone();
        let numel = params.params()[pi].values.len();
        for e in 0..numel {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.params_mut()[pi].values.as_slice_mut().unwrap().get_mut(e).unwrap() += h;
            *minus.params_mut()[pi].values.as_slice_mut().unwrap().get_mut(e).unwrap() -= h;
            let fd = (loss_of(arch, &plus, mask, batch, labels)
                - loss_of(arch, &minus, mask, batch, labels))
                / (2.0 * h);
            let an = grads[slot].as_slice().unwrap()[e];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "{name}[{e}]: analytic {an:.8e} vs fd {fd:.8e}"
            );
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let (arch, params) = tiny_model::<f64>(11);
    let (batch, labels) = random_batch::<f64>(5, 2, 8, 8, 12);
    check_against_fd(&arch, &params, None, &batch, &labels);
}

#[test]
fn masked_backward_matches_finite_differences() {
    let (arch, params) = tiny_model::<f64>(21);
    let (batch, labels) = random_batch::<f64>(5, 2, 8, 8, 22);
    // Deterministic checkerboard mask over the two weight tensors.
    let mask: MaskMultiplier<f64> = params
        .maskable()
        .iter()
        .map(|p| {
            let mut m = ArrayD::zeros(p.values.raw_dim());
            for (i, v) in m.as_slice_mut().unwrap().iter_mut().enumerate() {
                *v = if i % 3 == 0 { 0.0 } else { 1.0 };
            }
            m
        })
        .collect();
    check_against_fd(&arch, &params, Some(&mask), &batch, &labels);
}

#[test]
fn masked_out_weights_get_zero_gradient() {
    let (arch, params) = tiny_model::<f64>(31);
    let (batch, labels) = random_batch::<f64>(4, 2, 8, 8, 32);
    let mask: MaskMultiplier<f64> = params
        .maskable()
        .iter()
        .map(|p| {
            let mut m = ArrayD::from_elem(p.values.raw_dim(), 1.0);
            for (i, v) in m.as_slice_mut().unwrap().iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = 0.0;
                }
            }
            m
        })
        .collect();
    let grads = analytic_raw_grads(&arch, &params, Some(&mask), &batch, &labels);
    let trainable = params.trainable_indices();
    let mut mi = 0;
    for (slot, &pi) in trainable.iter().enumerate() {
        if !params.params()[pi].kind.maskable() {
            continue;
        }
        for (g, m) in grads[slot].iter().zip(mask[mi].iter()) {
            if *m == 0.0 {
                assert_eq!(*g, 0.0, "masked-out weight received a gradient");
            }
        }
        mi += 1;
    }
    assert_eq!(params.params()[trainable[0]].kind, ParamKind::Weight);
}

#[test]
fn all_ones_mask_reproduces_stage1_bitwise() {
    let (gray, labels) = synthetic_digit_bank::<f32>(240, 5);
    let spec = BiasSpec::identity(vec![1.0, 0.9, 0.0], 2).unwrap();
    let envs =
        build_full_colored_mnist(&gray, &labels, &spec, &ColorPalette::default(), 5).unwrap();
    let data = PipelineData::from_environments(envs, 0.5, 5).unwrap();
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 3);
    cfg.n1 = 4;
    cfg.batch_size = 3;
    cfg.eval_cadence = 100;
    cfg.final_eval_cap = Some(16);
    let (arch, params) = modnet::nn::build_convnet::<f32>(3, 10, cfg.seed).unwrap();
    let (trained, snapshot, _) = stage1_train(&arch, params, &data, &cfg).unwrap();
    let names = trained.maskable_names();
    let shapes = trained.maskable_shapes();
    let ones = BinaryMask {
        names,
        layers: shapes.iter().map(|s| ndarray::ArrayD::from_elem(s.as_slice(), 1u8)).collect(),
    };
    let (retrained, _) = stage3_retrain(&arch, &snapshot, &ones, &data, &cfg).unwrap();
    for (a, b) in trained.params().iter().zip(retrained.params()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{} diverged", a.name);
        }
    }
}

#[test]
fn zero_steps_leave_snapshot_untouched() {
    let (gray, labels) = synthetic_digit_bank::<f32>(120, 6);
    let spec = BiasSpec::identity(vec![1.0, 0.9, 0.0], 2).unwrap();
    let envs =
        build_full_colored_mnist(&gray, &labels, &spec, &ColorPalette::default(), 6).unwrap();
    let data = PipelineData::from_environments(envs, 0.5, 6).unwrap();
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 3);
    cfg.n1 = 0;
    cfg.batch_size = 2;
    cfg.final_eval_cap = Some(8);
    let (arch, params) = modnet::nn::build_convnet::<f32>(3, 10, cfg.seed).unwrap();
    let before = params.clone();
    let (after, snapshot, _) = stage1_train(&arch, params, &data, &cfg).unwrap();
    for (a, b) in after.params().iter().zip(before.params()) {
        assert_eq!(a.values, b.values);
    }
    let restored = snapshot.restore();
    for (a, b) in restored.params().iter().zip(before.params()) {
        assert_eq!(a.values, b.values);
    }
}

#[test]
fn scalar_trait_round_trips() {
    let x = 1.25f32;
    assert_eq!(f32::from_le_slice(&x.to_le_bytes_vec()), x);
    let y = -3.5f64;
    assert_eq!(f64::from_le_slice(&y.to_le_bytes_vec()), y);
}
