//! Probabilistic subnetwork machinery: per-weight mask logits,
//! Gumbel-sigmoid relaxed sampling with straight-through hardening, the
//! sparsity penalty, hard thresholding, mask algebra and the baseline mask
//! constructors.

mod io;

pub use io::{export_binary_mask, export_heatmap_csv, export_logits, import_mask, MaskFile};

use crate::error::{Error, Result};
use crate::nn::{MaskMultiplier, ParameterSet};
use crate::scalar::{c, Scalar};
use ndarray::ArrayD;
use rand::Rng;

/// Per-layer real logits π, shape-matched to the maskable weights of a
/// parameter set.
#[derive(Debug, Clone)]
pub struct MaskLogits<T: Scalar> {
    pub names: Vec<String>,
    pub layers: Vec<ArrayD<T>>,
}

/// Per-layer relaxed samples in (0,1) at a fixed temperature.
#[derive(Debug, Clone)]
pub struct RelaxedMask<T: Scalar> {
    pub layers: Vec<ArrayD<T>>,
    pub temperature: f64,
}

/// Hardened {0,1} masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub names: Vec<String>,
    pub layers: Vec<ArrayD<u8>>,
}

impl<T: Scalar> MaskLogits<T> {
    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }
}

impl BinaryMask {
    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn ones_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&v| v == 1).count())
            .sum()
    }

    /// Multiplier tensors for a masked forward pass.
    pub fn to_multiplier<T: Scalar>(&self) -> MaskMultiplier<T> {
        self.layers
            .iter()
            .map(|l| l.mapv(|v| if v == 1 { T::one() } else { T::zero() }))
            .collect()
    }

    pub fn all_ones(params_like: &BinaryMask) -> BinaryMask {
        BinaryMask {
            names: params_like.names.clone(),
            layers: params_like.layers.iter().map(|l| l.mapv(|_| 1u8)).collect(),
        }
    }

    fn check_congruent(&self, other: &BinaryMask) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("masks have different layer counts"));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "mask layer shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh logits for a parameter set's maskable weights, every entry set to
/// `initial_logit` (0.0 ⇒ keep-probability one half).
pub fn init_logits<T: Scalar>(params: &ParameterSet<T>, initial_logit: f64) -> MaskLogits<T> {
    let v = c::<T>(initial_logit);
    MaskLogits {
        names: params.maskable_names(),
        layers: params
            .maskable()
            .iter()
            .map(|p| ArrayD::from_elem(p.values.shape(), v))
            .collect(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One relaxed Bernoulli sample per entry: σ((π + log u − log(1−u)) / τ).
pub fn gumbel_sigmoid_sample<T: Scalar, R: Rng + ?Sized>(
    logits: &MaskLogits<T>,
    temperature: f64,
    rng: &mut R,
) -> Result<RelaxedMask<T>> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let tau = c::<T>(temperature);
    let layers = logits
        .layers
        .iter()
        .map(|l| {
            l.mapv(|pi| {
                let u: T = loop {
                    let u = T::uniform01(rng);
                    // keep log u and log(1-u) finite
                    if u > T::zero() && u < T::one() {
                        break u;
                    }
                };
                let g = u.ln() - (T::one() - u).ln();
                sigmoid((pi + g) / tau)
            })
        })
        .collect();
    Ok(RelaxedMask { layers, temperature })
}

/// Straight-through forward values: indicator(relaxed > 0.5). The gradient
/// is taken through the relaxed sample; see [`relaxed_logit_grad_factor`].
pub fn straight_through<T: Scalar>(relaxed: &RelaxedMask<T>) -> MaskMultiplier<T> {
    let half = c::<T>(0.5);
    relaxed
        .layers
        .iter()
        .map(|l| l.mapv(|v| if v > half { T::one() } else { T::zero() }))
        .collect()
}

/// d(relaxed)/dπ per entry: relaxed·(1−relaxed)/τ. Multiplying an
/// effective-weight gradient by weight · this factor yields the logit
/// gradient of the straight-through estimator.
pub fn relaxed_logit_grad_factor<T: Scalar>(relaxed: &RelaxedMask<T>) -> Vec<ArrayD<T>> {
    let tau = c::<T>(relaxed.temperature);
    relaxed
        .layers
        .iter()
        .map(|l| l.mapv(|v| v * (T::one() - v) / tau))
        .collect()
}

/// Hard threshold: entry 1 iff π > 0 (ties at exactly 0 map to 0).
pub fn harden<T: Scalar>(logits: &MaskLogits<T>) -> BinaryMask {
    BinaryMask {
        names: logits.names.clone(),
        layers: logits
            .layers
            .iter()
            .map(|l| l.mapv(|v| u8::from(v > T::zero())))
            .collect(),
    }
}

/// α × (sum of all raw logit entries); the gradient is α everywhere.
pub fn sparsity_penalty<T: Scalar>(logits: &MaskLogits<T>, alpha: f64) -> T {
    let sum: T = logits.layers.iter().map(|l| l.iter().copied().sum::<T>()).sum();
    c::<T>(alpha) * sum
}

/// Fraction of mask entries equal to 1.
pub fn keep_ratio(mask: &BinaryMask) -> f64 {
    mask.ones_count() as f64 / mask.total_entries() as f64
}

pub fn per_layer_keep_ratio(mask: &BinaryMask) -> Vec<f64> {
    mask.layers
        .iter()
        .map(|l| l.iter().filter(|&&v| v == 1).count() as f64 / l.len() as f64)
        .collect()
}

pub fn mask_intersect(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.check_congruent(b)?;
    Ok(BinaryMask {
        names: a.names.clone(),
        layers: a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(x, y)| {
                let mut out = x.clone();
                out.zip_mut_with(y, |o, &v| *o &= v);
                out
            })
            .collect(),
    })
}

pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.check_congruent(b)?;
    Ok(BinaryMask {
        names: a.names.clone(),
        layers: a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(x, y)| {
                let mut out = x.clone();
                out.zip_mut_with(y, |o, &v| *o |= v);
                out
            })
            .collect(),
    })
}

pub fn mask_complement(a: &BinaryMask) -> BinaryMask {
    BinaryMask {
        names: a.names.clone(),
        layers: a.layers.iter().map(|l| l.mapv(|v| 1 - v)).collect(),
    }
}

/// Exactly ⌊ratio × total⌋ ones placed uniformly at random across all
/// entries jointly.
pub fn random_mask_global<R: Rng + ?Sized>(
    names: Vec<String>,
    shapes: &[Vec<usize>],
    ratio: f64,
    rng: &mut R,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("keep ratio must be in [0,1]"));
    }
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let k = (ratio * total as f64).floor() as usize;
    let chosen = rand::seq::index::sample(rng, total, k);
    let mut flat = vec![0u8; total];
    for idx in chosen.iter() {
        flat[idx] = 1;
    }
    let mut layers = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for (shape, &size) in shapes.iter().zip(&sizes) {
        let layer = ArrayD::from_shape_vec(shape.as_slice(), flat[offset..offset + size].to_vec())
            .map_err(|e| Error::shape(e.to_string()))?;
        layers.push(layer);
        offset += size;
    }
    Ok(BinaryMask { names, layers })
}

/// Per layer, exactly the reference layer's ones count at uniformly random
/// positions within that layer.
pub fn random_mask_layerwise<R: Rng + ?Sized>(reference: &BinaryMask, rng: &mut R) -> BinaryMask {
    let layers = reference
        .layers
        .iter()
        .map(|l| {
            let size = l.len();
            let ones = l.iter().filter(|&&v| v == 1).count();
            let chosen = rand::seq::index::sample(rng, size, ones);
            let mut flat = vec![0u8; size];
            for idx in chosen.iter() {
                flat[idx] = 1;
            }
            ArrayD::from_shape_vec(l.shape(), flat).expect("layer shape")
        })
        .collect();
    BinaryMask { names: reference.names.clone(), layers }
}

/// Keep the ⌊ratio × total⌋ entries of largest |w|, ties broken by
/// (layer index, entry index) ascending.
pub fn magnitude_mask<T: Scalar>(params: &ParameterSet<T>, ratio: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("keep ratio must be in [0,1]"));
    }
    let maskable = params.maskable();
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (li, p) in maskable.iter().enumerate() {
        for (ei, v) in p.values.iter().enumerate() {
            entries.push((v.abs().as_f64(), li, ei));
        }
    }
    let total = entries.len();
    let k = (ratio * total as f64).floor() as usize;
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut layers: Vec<Vec<u8>> = maskable.iter().map(|p| vec![0u8; p.values.len()]).collect();
    for &(_, li, ei) in entries.iter().take(k) {
        layers[li][ei] = 1;
    }
    let layers = maskable
        .iter()
        .zip(layers)
        .map(|(p, flat)| ArrayD::from_shape_vec(p.values.shape(), flat).expect("weight shape"))
        .collect();
    Ok(BinaryMask { names: params.maskable_names(), layers })
}
