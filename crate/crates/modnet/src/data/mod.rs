//! Biased multi-environment dataset construction: colorized digits with a
//! class→color bias relationship, a foreground/background compositor, and
//! the split / bias-rearrangement utilities used by the evaluation protocol.

mod idx;
mod io;
mod synth;

pub use idx::load_mnist_idx;
pub use io::{load_dataset_dir, save_dataset_dir};
pub use synth::{synthetic_digit_bank, synthetic_scene_bank, synthetic_shape_bank, ImageBank, SceneBank};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::{Array3, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 10;

/// Exactly ten RGB color triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorPalette {
    colors: Vec<[u8; 3]>,
}

impl ColorPalette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.len() != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "palette needs exactly {} colors, got {}",
                NUM_CLASSES,
                colors.len()
            )));
        }
        Ok(ColorPalette { colors })
    }

    pub fn color(&self, idx: usize) -> [u8; 3] {
        self.colors[idx]
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }
}

impl Default for ColorPalette {
    fn default() -> Self {
        ColorPalette {
            colors: vec![
                [0, 100, 0],
                [188, 143, 143],
                [255, 0, 0],
                [255, 215, 0],
                [0, 255, 0],
                [65, 105, 225],
                [0, 225, 225],
                [0, 0, 255],
                [255, 20, 147],
                [160, 160, 160],
            ],
        }
    }
}

/// The class→color (or class→background) bias relationship and the
/// per-environment bias coefficients. The first `num_seen` environments are
/// training domains; the rest are held-out domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    mapping: Vec<usize>,
    pub bias_coefficients: Vec<f64>,
    pub num_seen: usize,
}

impl BiasSpec {
    pub fn new(mapping: Vec<usize>, bias_coefficients: Vec<f64>, num_seen: usize) -> Result<Self> {
        if mapping.len() != NUM_CLASSES {
            return Err(Error::invalid("bias mapping must cover classes 0..10"));
        }
        let mut seen = [false; NUM_CLASSES];
        for &m in &mapping {
            if m >= NUM_CLASSES || seen[m] {
                return Err(Error::invalid("bias mapping must be a bijection on {0..9}"));
            }
            seen[m] = true;
        }
        if bias_coefficients.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("bias coefficients must be in [0,1]"));
        }
        if bias_coefficients.is_empty() || num_seen == 0 || num_seen > bias_coefficients.len() {
            return Err(Error::invalid("need at least one seen environment"));
        }
        Ok(BiasSpec { mapping, bias_coefficients, num_seen })
    }

    /// Identity class→color mapping with the given coefficients.
    pub fn identity(bias_coefficients: Vec<f64>, num_seen: usize) -> Result<Self> {
        BiasSpec::new((0..NUM_CLASSES).collect(), bias_coefficients, num_seen)
    }

    pub fn num_environments(&self) -> usize {
        self.bias_coefficients.len()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn mapped_color(&self, class: usize) -> usize {
        self.mapping[class]
    }
}

/// One environment's images with both the semantic class labels and the
/// (analysis-only) color/background labels.
#[derive(Debug, Clone)]
pub struct EnvironmentDataset<T: Scalar> {
    pub env_id: usize,
    pub seen: bool,
    /// N×3×H×W, values in [0,1].
    pub images: Array4<T>,
    pub class_labels: Vec<u8>,
    pub color_labels: Vec<u8>,
    pub bias_coefficient: f64,
}

impl<T: Scalar> EnvironmentDataset<T> {
    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    /// Fraction of items whose color label equals the mapped color of their
    /// class. Expected value is p + (1−p)/10 under uniform random colors.
    pub fn mapped_fraction(&self, spec: &BiasSpec) -> f64 {
        let hits = self
            .class_labels
            .iter()
            .zip(&self.color_labels)
            .filter(|(&cl, &co)| spec.mapped_color(cl as usize) == co as usize)
            .count();
        hits as f64 / self.len() as f64
    }
}

/// Disjoint halves of one environment.
#[derive(Debug, Clone)]
pub struct SplitPair<T: Scalar> {
    pub in_split: EnvironmentDataset<T>,
    pub out_split: EnvironmentDataset<T>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step so env streams are decorrelated
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Tint a grayscale image: zero-pad 28×28 symmetrically to 32×32, then set
/// channel c to gray × rgb[c]/255. Background stays black; no channel ever
/// exceeds the gray intensity.
pub fn colorize<T: Scalar>(gray: ArrayView2<T>, rgb: [u8; 3]) -> Array3<T> {
    let (h, w) = gray.dim();
    let (oh, ow) = (h + 4, w + 4);
    let mut out = Array3::zeros((3, oh, ow));
    for (ch, &comp) in rgb.iter().enumerate() {
        let scale = c::<T>(comp as f64 / 255.0);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y + 2, x + 2]] = gray[[y, x]] * scale;
            }
        }
    }
    out
}

/// Split item indices evenly and disjointly across environments after a
/// seeded shuffle.
fn partition_indices(n: usize, num_envs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let base = n / num_envs;
    let rem = n % num_envs;
    let mut parts = Vec::with_capacity(num_envs);
    let mut offset = 0;
    for e in 0..num_envs {
        let take = base + usize::from(e < rem);
        parts.push(idx[offset..offset + take].to_vec());
        offset += take;
    }
    parts
}

/// Per-item color indices for one environment: exactly ⌊p·n⌋ seeded items
/// receive the mapped color, the rest a uniform draw over all ten colors.
fn assign_colors(
    class_labels: &[u8],
    spec: &BiasSpec,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let n = class_labels.len();
    let k = (p * n as f64).floor() as usize;
    let mut biased = vec![false; n];
    for i in rand::seq::index::sample(rng, n, k) {
        biased[i] = true;
    }
    class_labels
        .iter()
        .zip(&biased)
        .map(|(&cl, &b)| {
            if b {
                spec.mapped_color(cl as usize) as u8
            } else {
                rng.random_range(0..NUM_CLASSES) as u8
            }
        })
        .collect()
}

/// Colorized-digit environments: grayscale digits are partitioned across
/// environments, each environment applies its bias coefficient's class→color
/// relationship, unbiased items get uniform random palette colors.
pub fn build_full_colored_mnist<T: Scalar>(
    gray: &Array3<T>,
    labels: &[u8],
    spec: &BiasSpec,
    palette: &ColorPalette,
    seed: u64,
) -> Result<Vec<EnvironmentDataset<T>>> {
    let n = gray.shape()[0];
    if labels.len() != n {
        return Err(Error::shape(format!("{} images but {} labels", n, labels.len())));
    }
    if spec.num_environments() < 2 {
        return Err(Error::invalid("need at least two environments"));
    }
    let num_envs = spec.num_environments();
    let parts = partition_indices(n, num_envs, &mut stream_rng(seed, 0));
    let (h, w) = (gray.shape()[1], gray.shape()[2]);
    let mut envs = Vec::with_capacity(num_envs);
    for (env_id, part) in parts.into_iter().enumerate() {
        let p = spec.bias_coefficients[env_id];
        let class_labels: Vec<u8> = part.iter().map(|&i| labels[i]).collect();
        let mut rng = stream_rng(seed, 1 + env_id as u64);
        let color_labels = assign_colors(&class_labels, spec, p, &mut rng);
        let mut images = Array4::zeros((part.len(), 3, h + 4, w + 4));
        for (j, (&i, &color)) in part.iter().zip(&color_labels).enumerate() {
            let img = colorize(
                gray.index_axis(ndarray::Axis(0), i),
                palette.color(color as usize),
            );
            images.index_axis_mut(ndarray::Axis(0), j).assign(&img);
        }
        envs.push(EnvironmentDataset {
            env_id,
            seen: env_id < spec.num_seen,
            images,
            class_labels,
            color_labels,
            bias_coefficient: p,
        });
    }
    Ok(envs)
}

/// Background source for the compositor: solid palette colors or ten scene
/// image classes.
pub enum Backgrounds<'a, T: Scalar> {
    Palette(&'a ColorPalette),
    Scenes(&'a SceneBank<T>),
}

/// Paste masked foreground objects onto biased backgrounds. Each output
/// pixel is the foreground where the object mask is 1 and the background
/// elsewhere; background indices follow the same exact-⌊p·n⌋ bias mechanism
/// as the colorized digits.
pub fn composite_object_background<T: Scalar>(
    foregrounds: &ImageBank<T>,
    backgrounds: &Backgrounds<T>,
    spec: &BiasSpec,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<EnvironmentDataset<T>>> {
    let n = foregrounds.labels.len();
    let (h, w) = size;
    if foregrounds.images.shape() != [n, 3, h, w] {
        return Err(Error::shape(format!(
            "foreground bank shape {:?} does not match {} items of 3×{}×{}",
            foregrounds.images.shape(),
            n,
            h,
            w
        )));
    }
    for class in 0..NUM_CLASSES {
        if !foregrounds.labels.iter().any(|&l| l as usize == class) {
            return Err(Error::invalid(format!("foreground bank has no items of class {class}")));
        }
    }
    let scene_index: Option<Vec<Vec<usize>>> = match backgrounds {
        Backgrounds::Palette(_) => None,
        Backgrounds::Scenes(bank) => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
            for (i, &l) in bank.labels.iter().enumerate() {
                per_class[l as usize].push(i);
            }
            for (class, items) in per_class.iter().enumerate() {
                if items.is_empty() {
                    return Err(Error::invalid(format!(
                        "background bank has no items of class {class}"
                    )));
                }
            }
            Some(per_class)
        }
    };
    if spec.num_environments() < 2 {
        return Err(Error::invalid("need at least two environments"));
    }
    let num_envs = spec.num_environments();
    let parts = partition_indices(n, num_envs, &mut stream_rng(seed, 0));
    let mut envs = Vec::with_capacity(num_envs);
    for (env_id, part) in parts.into_iter().enumerate() {
        let p = spec.bias_coefficients[env_id];
        let class_labels: Vec<u8> = part.iter().map(|&i| foregrounds.labels[i]).collect();
        let mut rng = stream_rng(seed, 1 + env_id as u64);
        let color_labels = assign_colors(&class_labels, spec, p, &mut rng);
        let mut images = Array4::zeros((part.len(), 3, h, w));
        for (j, (&i, &bg_class)) in part.iter().zip(&color_labels).enumerate() {
            let fg = foregrounds.images.index_axis(ndarray::Axis(0), i);
            let mask = foregrounds.masks.index_axis(ndarray::Axis(0), i);
            let mut out = images.index_axis_mut(ndarray::Axis(0), j);
            match backgrounds {
                Backgrounds::Palette(palette) => {
                    let rgb = palette.color(bg_class as usize);
                    for ch in 0..3 {
                        let bg = c::<T>(rgb[ch] as f64 / 255.0);
                        for y in 0..h {
                            for x in 0..w {
                                let m = mask[[y, x]];
                                out[[ch, y, x]] = m * fg[[ch, y, x]] + (T::one() - m) * bg;
                            }
                        }
                    }
                }
                Backgrounds::Scenes(bank) => {
                    let pool = &scene_index.as_ref().unwrap()[bg_class as usize];
                    let bg_img =
                        bank.images.index_axis(ndarray::Axis(0), pool[rng.random_range(0..pool.len())]);
                    for ch in 0..3 {
                        for y in 0..h {
                            for x in 0..w {
                                let m = mask[[y, x]];
                                out[[ch, y, x]] =
                                    m * fg[[ch, y, x]] + (T::one() - m) * bg_img[[ch, y, x]];
                            }
                        }
                    }
                }
            }
        }
        envs.push(EnvironmentDataset {
            env_id,
            seen: env_id < spec.num_seen,
            images,
            class_labels,
            color_labels,
            bias_coefficient: p,
        });
    }
    Ok(envs)
}

fn gather<T: Scalar>(env: &EnvironmentDataset<T>, indices: &[usize]) -> EnvironmentDataset<T> {
    let (_, ch, h, w) = env.images.dim();
    let mut images = Array4::zeros((indices.len(), ch, h, w));
    for (j, &i) in indices.iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), j)
            .assign(&env.images.index_axis(ndarray::Axis(0), i));
    }
    EnvironmentDataset {
        env_id: env.env_id,
        seen: env.seen,
        images,
        class_labels: indices.iter().map(|&i| env.class_labels[i]).collect(),
        color_labels: indices.iter().map(|&i| env.color_labels[i]).collect(),
        bias_coefficient: env.bias_coefficient,
    }
}

/// Class-stratified disjoint split: the in-split gets ⌊fraction·N⌋ items
/// total, with each class's share within ±1 of fraction × class count.
pub fn split_out_domain<T: Scalar>(
    env: &EnvironmentDataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<SplitPair<T>> {
    let n = env.len();
    if n < 2 {
        return Err(Error::invalid("need at least two items to split"));
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::invalid("split fraction must be in (0,1)"));
    }
    let target = (fraction * n as f64).floor() as usize;
    if target == 0 || target == n {
        return Err(Error::invalid("split fraction produces an empty split"));
    }
    let mut rng = stream_rng(seed, 0x5117 + env.env_id as u64);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &cl) in env.class_labels.iter().enumerate() {
        per_class[cl as usize].push(i);
    }
    for items in per_class.iter_mut() {
        items.shuffle(&mut rng);
    }
    // floor per class, then hand out the remainder by largest fractional part
    let mut take: Vec<usize> =
        per_class.iter().map(|v| (fraction * v.len() as f64).floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = per_class
        .iter()
        .enumerate()
        .map(|(cidx, v)| {
            let exact = fraction * v.len() as f64;
            (exact - exact.floor(), cidx)
        })
        .collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut deficit = target - take.iter().sum::<usize>();
    for &(_, cidx) in &rem {
        if deficit == 0 {
            break;
        }
        if take[cidx] < per_class[cidx].len() {
            take[cidx] += 1;
            deficit -= 1;
        }
    }
    let mut in_idx = Vec::with_capacity(target);
    let mut out_idx = Vec::with_capacity(n - target);
    for (cidx, items) in per_class.iter().enumerate() {
        in_idx.extend_from_slice(&items[..take[cidx]]);
        out_idx.extend_from_slice(&items[take[cidx]..]);
    }
    in_idx.sort_unstable();
    out_idx.sort_unstable();
    Ok(SplitPair { in_split: gather(env, &in_idx), out_split: gather(env, &out_idx) })
}

/// A fresh seeded bias mapping with no class keeping its current color;
/// coefficients are unchanged.
pub fn rearrange_bias(spec: &BiasSpec, seed: u64) -> BiasSpec {
    let mut rng = stream_rng(seed, 0xBEEF);
    let mut candidate: Vec<usize> = (0..NUM_CLASSES).collect();
    loop {
        candidate.shuffle(&mut rng);
        if candidate.iter().zip(&spec.mapping).all(|(a, b)| a != b) {
            break;
        }
    }
    BiasSpec {
        mapping: candidate,
        bias_coefficients: spec.bias_coefficients.clone(),
        num_seen: spec.num_seen,
    }
}
