use super::{OptimKind, OptimizerConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::ArrayD;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-tensor optimizer buffers, aligned with the trainable order of the
/// parameter set it was created for.
pub struct OptimizerState<T: Scalar> {
    pub config: OptimizerConfig,
    velocity: Vec<ArrayD<T>>,
    second_moment: Vec<ArrayD<T>>,
    adam_steps: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<_> = params
            .trainable_indices()
            .into_iter()
            .map(|i| params.params()[i].values.shape().to_vec())
            .collect();
        let zeros = |shapes: &[Vec<usize>]| -> Vec<ArrayD<T>> {
            shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect()
        };
        Ok(OptimizerState {
            velocity: zeros(&shapes),
            second_moment: if matches!(config.kind, OptimKind::Adam) { zeros(&shapes) } else { Vec::new() },
            adam_steps: 0,
            config,
        })
    }
}

/// One optimizer step. SGD-momentum: v ← μ·v + (g + wd·w); w ← w − lr(t)·v.
/// Adam: bias-corrected first/second moments. `step_index` drives the
/// step-decay learning-rate schedule.
pub fn optimizer_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ParameterSet<T>,
    grads: &[ArrayD<T>],
    step_index: usize,
) -> Result<()> {
    let trainable = params.trainable_indices();
    if grads.len() != trainable.len() {
        return Err(Error::shape(format!(
            "got {} gradients for {} trainable tensors",
            grads.len(),
            trainable.len()
        )));
    }
    for (slot, (&pi, g)) in trainable.iter().zip(grads).enumerate() {
        let p = &mut params.params_mut()[pi];
        if g.shape() != p.values.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match {} of shape {:?}",
                g.shape(),
                p.name,
                p.values.shape()
            )));
        }
        let lr = c::<T>(state.config.lr_at(step_index));
        match state.config.kind {
            OptimKind::SgdMomentum => {
                let mu = c::<T>(state.config.momentum);
                let wd = c::<T>(state.config.weight_decay);
                let v = &mut state.velocity[slot];
                ndarray::Zip::from(&mut *v).and(g).and(&p.values).for_each(|v, &g, &w| {
                    *v = mu * *v + (g + wd * w);
                });
                ndarray::Zip::from(&mut p.values).and(&*v).for_each(|w, &v| {
                    *w = *w - lr * v;
                });
            }
            OptimKind::Adam => {
                let b1 = c::<T>(ADAM_BETA1);
                let b2 = c::<T>(ADAM_BETA2);
                let eps = c::<T>(ADAM_EPS);
                let t = (state.adam_steps + 1) as i32;
                let corr1 = T::one() - b1.powi(t);
                let corr2 = T::one() - b2.powi(t);
                let m = &mut state.velocity[slot];
                let v = &mut state.second_moment[slot];
                ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                });
                ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                    *v = b2 * *v + (T::one() - b2) * g * g;
                });
                ndarray::Zip::from(&mut p.values).and(&*m).and(&*v).for_each(|w, &m, &v| {
                    let m_hat = m / corr1;
                    let v_hat = v / corr2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                });
            }
        }
    }
    if matches!(state.config.kind, OptimKind::Adam) {
        state.adam_steps += 1;
    }
    params.step_count += 1;
    Ok(())
}
