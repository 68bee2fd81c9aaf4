use super::layers::*;
use super::{LayerSpec, ModelArchitecture, ParamKind, ParamTensor, ParameterSet};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds the three-conv-block classifier: 3×3 conv (64, 128, 256 feature
/// maps), each followed by ReLU, batch normalization and 2×2 max pooling,
/// then global average pooling and a fully connected layer. Weights are
/// fan-in-scaled uniform, deterministic in `seed`.
pub fn build_convnet<T: Scalar>(
    input_channels: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(ModelArchitecture, ParameterSet<T>)> {
    if input_channels < 1 {
        return Err(Error::invalid("input_channels must be >= 1"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    let widths = [64usize, 128, 256];
    let mut layers = Vec::new();
    let mut in_ch = input_channels;
    for (i, &out_ch) in widths.iter().enumerate() {
        layers.push(LayerSpec::Conv { name: format!("conv{}", i + 1), in_ch, out_ch });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::BatchNorm { name: format!("bn{}", i + 1), ch: out_ch });
        layers.push(LayerSpec::MaxPool2);
        in_ch = out_ch;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear { name: "fc".into(), in_dim: in_ch, out_dim: num_classes });
    let arch = ModelArchitecture { input_channels, num_classes, layers };
    let params = init_params(&arch, seed)?;
    Ok((arch, params))
}

/// Fresh parameters for an architecture, deterministic in `seed`.
pub fn init_params<T: Scalar>(arch: &ModelArchitecture, seed: u64) -> Result<ParameterSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for layer in &arch.layers {
        match layer {
            LayerSpec::Conv { name, in_ch, out_ch } => {
                let fan_in = in_ch * 9;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = ArrayD::from_shape_fn(vec![*out_ch, *in_ch, 3, 3].as_slice(), |_| {
                    c::<T>(rng.random_range(-bound..bound))
                });
                params.push(ParamTensor { name: format!("{name}.weight"), kind: ParamKind::Weight, values: w });
                params.push(ParamTensor {
                    name: format!("{name}.bias"),
                    kind: ParamKind::Bias,
                    values: ArrayD::zeros(vec![*out_ch].as_slice()),
                });
            }
            LayerSpec::BatchNorm { name, ch } => {
                params.push(ParamTensor {
                    name: format!("{name}.scale"),
                    kind: ParamKind::BnScale,
                    values: ArrayD::from_elem(vec![*ch].as_slice(), T::one()),
                });
                params.push(ParamTensor {
                    name: format!("{name}.shift"),
                    kind: ParamKind::BnShift,
                    values: ArrayD::zeros(vec![*ch].as_slice()),
                });
                params.push(ParamTensor {
                    name: format!("{name}.running_mean"),
                    kind: ParamKind::BnRunningMean,
                    values: ArrayD::zeros(vec![*ch].as_slice()),
                });
                params.push(ParamTensor {
                    name: format!("{name}.running_var"),
                    kind: ParamKind::BnRunningVar,
                    values: ArrayD::from_elem(vec![*ch].as_slice(), T::one()),
                });
            }
            LayerSpec::Linear { name, in_dim, out_dim } => {
                let bound = 1.0 / (*in_dim as f64).sqrt();
                let w = ArrayD::from_shape_fn(vec![*out_dim, *in_dim].as_slice(), |_| {
                    c::<T>(rng.random_range(-bound..bound))
                });
                params.push(ParamTensor { name: format!("{name}.weight"), kind: ParamKind::Weight, values: w });
                params.push(ParamTensor {
                    name: format!("{name}.bias"),
                    kind: ParamKind::Bias,
                    values: ArrayD::zeros(vec![*out_dim].as_slice()),
                });
            }
            LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::GlobalAvgPool => {}
        }
    }
    ParameterSet::new(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Per-maskable-weight multiplier tensors, aligned with
/// [`ParameterSet::maskable`] order.
pub type MaskMultiplier<T> = Vec<ArrayD<T>>;

fn check_mask_shapes<T: Scalar>(params: &ParameterSet<T>, mask: &MaskMultiplier<T>) -> Result<()> {
    let maskable = params.maskable();
    if mask.len() != maskable.len() {
        return Err(Error::shape(format!(
            "mask has {} layers, model has {} maskable weights",
            mask.len(),
            maskable.len()
        )));
    }
    for (m, p) in mask.iter().zip(&maskable) {
        if m.shape() != p.values.shape() {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match weight {} of shape {:?}",
                m.shape(),
                p.name,
                p.values.shape()
            )));
        }
    }
    Ok(())
}

enum Cache<T: Scalar> {
    Conv(ConvCache<T>),
    Relu(Array4<bool>),
    Bn(BnCache<T>),
    Pool { arg: Array4<u8>, in_h: usize, in_w: usize },
    Gap { h: usize, w: usize },
    Linear { input: Array2<T> },
}

/// Forward-pass record needed by the backward pass: per-layer caches plus
/// the batch statistics of every normalization layer.
pub struct Tape<T: Scalar> {
    caches: Vec<Cache<T>>,
    bn_stats: Vec<(String, BnStats<T>)>,
    batch_size: usize,
}

enum Act<T: Scalar> {
    Spatial(Array4<T>),
    Flat(Array2<T>),
}

fn run_forward<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    batch: &Array4<T>,
    mode: Mode,
    mut tape: Option<&mut Tape<T>>,
) -> Result<Array2<T>> {
    if batch.dim().1 != arch.input_channels {
        return Err(Error::shape(format!(
            "batch has {} channels, architecture expects {}",
            batch.dim().1,
            arch.input_channels
        )));
    }
    if let Some(m) = mask {
        check_mask_shapes(params, m)?;
    }
    let mut act = Act::Spatial(batch.clone());
    let mut maskable_idx = 0usize;
    for layer in &arch.layers {
        act = match (layer, act) {
            (LayerSpec::Conv { name, .. }, Act::Spatial(x)) => {
                let w = param4(params, &format!("{name}.weight"))?;
                let b = param1(params, &format!("{name}.bias"))?;
                let w_eff = apply_mask(&w, mask, maskable_idx);
                maskable_idx += 1;
                let (out, cache) = conv3x3_forward(&x.view(), &w_eff.view(), &b.view());
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Conv(cache));
                }
                Act::Spatial(out)
            }
            (LayerSpec::Relu, Act::Spatial(x)) => {
                let (out, m) = relu_forward(&x.view());
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Relu(m));
                }
                Act::Spatial(out)
            }
            (LayerSpec::BatchNorm { name, .. }, Act::Spatial(x)) => {
                let scale = param1(params, &format!("{name}.scale"))?;
                let shift = param1(params, &format!("{name}.shift"))?;
                let out = match mode {
                    Mode::Train => {
                        let (out, cache, stats) =
                            batchnorm_forward_train(&x.view(), &scale.view(), &shift.view());
                        if let Some(t) = tape.as_deref_mut() {
                            t.caches.push(Cache::Bn(cache));
                            t.bn_stats.push((name.clone(), stats));
                        }
                        out
                    }
                    Mode::Eval => {
                        let rm = param1(params, &format!("{name}.running_mean"))?;
                        let rv = param1(params, &format!("{name}.running_var"))?;
                        batchnorm_forward_eval(&x.view(), &scale.view(), &shift.view(), &rm.view(), &rv.view())
                    }
                };
                Act::Spatial(out)
            }
            (LayerSpec::MaxPool2, Act::Spatial(x)) => {
                let (in_h, in_w) = (x.dim().2, x.dim().3);
                let (out, arg) = maxpool2_forward(&x.view());
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Pool { arg, in_h, in_w });
                }
                Act::Spatial(out)
            }
            (LayerSpec::GlobalAvgPool, Act::Spatial(x)) => {
                let (h, w) = (x.dim().2, x.dim().3);
                let out = gap_forward(&x.view());
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Gap { h, w });
                }
                Act::Flat(out)
            }
            (LayerSpec::Linear { name, .. }, Act::Flat(x)) => {
                let w = param2(params, &format!("{name}.weight"))?;
                let b = param1(params, &format!("{name}.bias"))?;
                let w_eff = apply_mask2(&w, mask, maskable_idx);
                maskable_idx += 1;
                let out = linear_forward(&x.view(), &w_eff.view(), &b.view());
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Linear { input: x });
                }
                Act::Flat(out)
            }
            (spec, _) => {
                return Err(Error::invalid(format!(
                    "layer {spec:?} applied to incompatible activation rank"
                )))
            }
        };
    }
    match act {
        Act::Flat(scores) => Ok(scores),
        Act::Spatial(_) => Err(Error::invalid("architecture does not end in a flat layer")),
    }
}

fn param4<T: Scalar>(params: &ParameterSet<T>, name: &str) -> Result<Array4<T>> {
    let p = params.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    Ok(p.values.clone().into_dimensionality::<Ix4>().map_err(|e| Error::shape(e.to_string()))?)
}

fn param2<T: Scalar>(params: &ParameterSet<T>, name: &str) -> Result<Array2<T>> {
    let p = params.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    Ok(p.values.clone().into_dimensionality::<Ix2>().map_err(|e| Error::shape(e.to_string()))?)
}

fn param1<T: Scalar>(params: &ParameterSet<T>, name: &str) -> Result<Array1<T>> {
    let p = params.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    Ok(p.values.clone().into_dimensionality::<Ix1>().map_err(|e| Error::shape(e.to_string()))?)
}

fn apply_mask<T: Scalar>(w: &Array4<T>, mask: Option<&MaskMultiplier<T>>, idx: usize) -> Array4<T> {
    match mask {
        Some(m) => {
            let mv = m[idx].view().into_dimensionality::<Ix4>().expect("mask rank");
            w * &mv
        }
        None => w.clone(),
    }
}

fn apply_mask2<T: Scalar>(w: &Array2<T>, mask: Option<&MaskMultiplier<T>>, idx: usize) -> Array2<T> {
    match mask {
        Some(m) => {
            let mv = m[idx].view().into_dimensionality::<Ix2>().expect("mask rank");
            w * &mv
        }
        None => w.clone(),
    }
}

/// Class scores for a batch. With `mask` present every weight entry is
/// multiplied elementwise by its mask entry before use; an absent mask is
/// the identity mask.
pub fn forward<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    batch: &Array4<T>,
    mode: Mode,
) -> Result<Array2<T>> {
    run_forward(arch, params, mask, batch, mode, None)
}

/// Training-mode forward pass that records everything the backward pass
/// needs. Batch statistics are kept on the tape; fold them into the running
/// averages with [`commit_bn_stats`].
pub fn forward_tape<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    batch: &Array4<T>,
) -> Result<(Array2<T>, Tape<T>)> {
    let mut tape = Tape { caches: Vec::new(), bn_stats: Vec::new(), batch_size: batch.dim().0 };
    let scores = run_forward(arch, params, mask, batch, Mode::Train, Some(&mut tape))?;
    Ok((scores, tape))
}

/// Fold the tape's batch statistics into the running averages
/// (running ← momentum·running + (1−momentum)·batch).
pub fn commit_bn_stats<T: Scalar>(params: &mut ParameterSet<T>, tape: &Tape<T>) {
    let mom = c::<T>(BN_MOMENTUM);
    let one_minus = T::one() - mom;
    for (name, stats) in &tape.bn_stats {
        if let Some(p) = params.get_mut(&format!("{name}.running_mean")) {
            p.values.zip_mut_with(&stats.mean.clone().into_dyn(), |r, &m| {
                *r = *r * mom + m * one_minus;
            });
        }
        if let Some(p) = params.get_mut(&format!("{name}.running_var")) {
            p.values.zip_mut_with(&stats.var.clone().into_dyn(), |r, &v| {
                *r = *r * mom + v * one_minus;
            });
        }
    }
}

/// Gradients with respect to the *effective* (mask-multiplied) weights for
/// every trainable tensor, aligned with [`ParameterSet::trainable_indices`].
pub struct BackwardResult<T: Scalar> {
    pub grads_effective: Vec<ArrayD<T>>,
}

/// Reverse-mode sweep from d(loss)/d(scores) back to every trainable tensor.
/// Consumes the tape.
pub fn backward<T: Scalar>(
    arch: &ModelArchitecture,
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    tape: Tape<T>,
    d_scores: &Array2<T>,
) -> Result<BackwardResult<T>> {
    debug_assert_eq!(d_scores.dim().0, tape.batch_size);
    let mut grads: Vec<Option<ArrayD<T>>> = params.params().iter().map(|_| None).collect();
    let mut caches = tape.caches;
    let n_maskable_total = params.maskable().len();
    let mut maskable_idx = n_maskable_total;

    enum Grad<T: Scalar> {
        Spatial(Array4<T>),
        Flat(Array2<T>),
    }
    let mut grad = Grad::Flat(d_scores.clone());
    // First parametrized layer needs no input gradient.
    let first_param_layer = arch
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }))
        .unwrap_or(0);

    for (li, layer) in arch.layers.iter().enumerate().rev() {
        let cache = match layer {
            LayerSpec::Conv { .. }
            | LayerSpec::Relu
            | LayerSpec::BatchNorm { .. }
            | LayerSpec::MaxPool2
            | LayerSpec::GlobalAvgPool
            | LayerSpec::Linear { .. } => caches.pop(),
        };
        grad = match (layer, grad, cache) {
            (LayerSpec::Conv { name, .. }, Grad::Spatial(g), Some(Cache::Conv(cc))) => {
                maskable_idx -= 1;
                let w = param4(params, &format!("{name}.weight"))?;
                let w_eff = apply_mask(&w, mask, maskable_idx);
                let need_dx = li != first_param_layer;
                let cg = conv3x3_backward(&g.view(), &w_eff.view(), &cc, need_dx);
                set_grad(params, &mut grads, &format!("{name}.weight"), cg.d_weight.into_dyn());
                set_grad(params, &mut grads, &format!("{name}.bias"), cg.d_bias.into_dyn());
                match cg.d_input {
                    Some(dx) => Grad::Spatial(dx),
                    None => Grad::Spatial(Array4::zeros(cc.in_shape)),
                }
            }
            (LayerSpec::Relu, Grad::Spatial(g), Some(Cache::Relu(m))) => {
                Grad::Spatial(relu_backward(&g.view(), &m))
            }
            (LayerSpec::BatchNorm { name, .. }, Grad::Spatial(g), Some(Cache::Bn(bc))) => {
                let scale = param1(params, &format!("{name}.scale"))?;
                let bg = batchnorm_backward(&g.view(), &scale.view(), &bc);
                set_grad(params, &mut grads, &format!("{name}.scale"), bg.d_scale.into_dyn());
                set_grad(params, &mut grads, &format!("{name}.shift"), bg.d_shift.into_dyn());
                Grad::Spatial(bg.d_input)
            }
            (LayerSpec::MaxPool2, Grad::Spatial(g), Some(Cache::Pool { arg, in_h, in_w })) => {
                Grad::Spatial(maxpool2_backward(&g.view(), &arg, in_h, in_w))
            }
            (LayerSpec::GlobalAvgPool, Grad::Flat(g), Some(Cache::Gap { h, w })) => {
                Grad::Spatial(gap_backward(&g.view(), h, w))
            }
            (LayerSpec::Linear { name, .. }, Grad::Flat(g), Some(Cache::Linear { input })) => {
                maskable_idx -= 1;
                let w = param2(params, &format!("{name}.weight"))?;
                let w_eff = apply_mask2(&w, mask, maskable_idx);
                let lg = linear_backward(&g.view(), &input.view(), &w_eff.view());
                set_grad(params, &mut grads, &format!("{name}.weight"), lg.d_weight.into_dyn());
                set_grad(params, &mut grads, &format!("{name}.bias"), lg.d_bias.into_dyn());
                Grad::Flat(lg.d_input)
            }
            _ => return Err(Error::invalid("tape does not match architecture")),
        };
    }

    let grads_effective = params
        .trainable_indices()
        .into_iter()
        .map(|i| {
            grads[i]
                .take()
                .unwrap_or_else(|| ArrayD::zeros(params.params()[i].values.shape()))
        })
        .collect();
    Ok(BackwardResult { grads_effective })
}

fn set_grad<T: Scalar>(
    params: &ParameterSet<T>,
    grads: &mut [Option<ArrayD<T>>],
    name: &str,
    g: ArrayD<T>,
) {
    let idx = params
        .params()
        .iter()
        .position(|p| p.name == name)
        .expect("gradient for unknown parameter");
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Scalar loss over a score matrix, together with d(loss)/d(scores).
pub trait Loss<T: Scalar> {
    fn value_and_grad(&self, scores: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)>;
}

/// Mean negative log-softmax of the labelled class.
pub struct CrossEntropyLoss;

impl<T: Scalar> Loss<T> for CrossEntropyLoss {
    fn value_and_grad(&self, scores: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
        crate::objective::cross_entropy_with_grad(scores, labels)
    }
}

/// Adapter for ad-hoc losses in tests.
pub struct FnLoss<F>(pub F);

impl<T: Scalar, F> Loss<T> for FnLoss<F>
where
    F: Fn(&Array2<T>, &[usize]) -> Result<(T, Array2<T>)>,
{
    fn value_and_grad(&self, scores: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
        (self.0)(scores, labels)
    }
}

/// Loss and gradients with respect to the raw weights (the mask is a
/// constant: a masked-out entry gets gradient exactly 0). Updates the
/// normalization running statistics as a training step would.
pub fn loss_and_grads<T: Scalar>(
    arch: &ModelArchitecture,
    params: &mut ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    batch: &Array4<T>,
    labels: &[usize],
    loss_fn: &dyn Loss<T>,
) -> Result<(T, Vec<ArrayD<T>>)> {
    let (loss, grads) = loss_and_grads_effective(arch, params, mask, batch, labels, loss_fn)?;
    Ok((loss, mask_raw_grads(params, mask, grads)))
}

/// Same as [`loss_and_grads`] but returns gradients with respect to the
/// effective (mask-multiplied) weights, which is what logit learning needs.
pub fn loss_and_grads_effective<T: Scalar>(
    arch: &ModelArchitecture,
    params: &mut ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    batch: &Array4<T>,
    labels: &[usize],
    loss_fn: &dyn Loss<T>,
) -> Result<(T, Vec<ArrayD<T>>)> {
    let (scores, tape) = forward_tape(arch, params, mask, batch)?;
    let (loss, d_scores) = loss_fn.value_and_grad(&scores, labels)?;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            step: params.step_count,
            message: "non-finite loss".into(),
        });
    }
    commit_bn_stats(params, &tape);
    let bw = backward(arch, params, mask, tape, &d_scores)?;
    Ok((loss, bw.grads_effective))
}

/// Convert effective-weight gradients into raw-weight gradients by zeroing
/// masked-out entries.
pub fn mask_raw_grads<T: Scalar>(
    params: &ParameterSet<T>,
    mask: Option<&MaskMultiplier<T>>,
    mut grads: Vec<ArrayD<T>>,
) -> Vec<ArrayD<T>> {
    if let Some(m) = mask {
        let trainable = params.trainable_indices();
        let mut mi = 0usize;
        for (slot, &pi) in grads.iter_mut().zip(&trainable) {
            if params.params()[pi].kind.maskable() {
                slot.zip_mut_with(&m[mi], |g, &mm| *g *= mm);
                mi += 1;
            }
        }
    }
    grads
}
