//! Minimal deterministic training substrate: the three-conv-block network,
//! forward passes with optional weight masks, reverse-mode gradients, and the
//! two optimizers with their step-decay schedules.

mod checkpoint;
mod layers;
mod model;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    backward, build_convnet, commit_bn_stats, forward, forward_tape, init_params, loss_and_grads,
    loss_and_grads_effective, mask_raw_grads, BackwardResult, CrossEntropyLoss, FnLoss, Loss,
    MaskMultiplier, Mode, Tape,
};
pub use optim::{optimizer_step, OptimizerState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// What role a named tensor plays inside the model. Only `Weight` tensors
/// (conv kernels and the linear weight) are maskable; normalization
/// parameters and running statistics are never masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn maskable(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub values: ArrayD<T>,
}

/// Named per-layer weight tensors plus the step counter. Layer names are
/// unique and shapes are fixed at construction.
#[derive(Debug, Clone)]
pub struct ParameterSet<T: Scalar> {
    params: Vec<ParamTensor<T>>,
    pub step_count: usize,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new(params: Vec<ParamTensor<T>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            if !seen.insert(p.name.clone()) {
                return Err(Error::invalid(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(ParameterSet { params, step_count: 0 })
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    /// Indices of trainable tensors, in declaration order. Gradient vectors
    /// and optimizer slots are aligned with this order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(i, _)| i)
            .collect()
    }

    /// The maskable weight tensors (conv kernels and the linear weight),
    /// in layer order.
    pub fn maskable(&self) -> Vec<&ParamTensor<T>> {
        self.params.iter().filter(|p| p.kind.maskable()).collect()
    }

    pub fn maskable_names(&self) -> Vec<String> {
        self.maskable().iter().map(|p| p.name.clone()).collect()
    }

    pub fn maskable_shapes(&self) -> Vec<Vec<usize>> {
        self.maskable().iter().map(|p| p.values.shape().to_vec()).collect()
    }

    pub fn assert_all_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    step: self.step_count,
                    message: format!("non-finite values in parameter {}", p.name),
                });
            }
        }
        Ok(())
    }
}

/// Deep copy of a parameter set's tensors at initialization time. Restoring
/// is bitwise exact.
#[derive(Debug, Clone)]
pub struct InitSnapshot<T: Scalar> {
    params: Vec<ParamTensor<T>>,
    pub seed: u64,
}

impl<T: Scalar> InitSnapshot<T> {
    pub fn take(params: &ParameterSet<T>, seed: u64) -> Self {
        InitSnapshot { params: params.params.clone(), seed }
    }

    /// A fresh parameter set holding exactly the stored values, step count 0.
    pub fn restore(&self) -> ParameterSet<T> {
        ParameterSet { params: self.params.clone(), step_count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl OptimizerConfig {
    pub fn sgd_momentum(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::SgdMomentum,
            learning_rate,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_every: 600,
            lr_decay_factor: 0.1,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::Adam,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay_every: usize::MAX,
            lr_decay_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) || self.lr_decay_factor == 0.0 {
            return Err(Error::invalid("lr_decay_factor must be in (0,1]"));
        }
        Ok(())
    }

    /// Piecewise-constant schedule: lr · factor^⌊t / every⌋.
    pub fn lr_at(&self, step: usize) -> f64 {
        let k = (step / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(k)
    }
}

/// Layer kinds of the fixed conv stack. Convolutions are 3×3, stride 1,
/// same-padding; pooling is 2×2 max.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { name: String, in_ch: usize, out_ch: usize },
    Relu,
    BatchNorm { name: String, ch: usize },
    MaxPool2,
    GlobalAvgPool,
    Linear { name: String, in_dim: usize, out_dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}
