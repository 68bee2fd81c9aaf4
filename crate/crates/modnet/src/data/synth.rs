//! Self-contained synthetic image banks: a rendered 10-digit glyph bank
//! (stand-in for the real digit dataset, no downloads required), a 10-class
//! shape bank with object masks for the compositor, and a 10-class textured
//! scene bank.

use super::stream_rng;
use crate::scalar::{c, Scalar};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Foreground images with per-pixel object masks and class labels.
#[derive(Debug, Clone)]
pub struct ImageBank<T: Scalar> {
    /// N×3×H×W in [0,1].
    pub images: Array4<T>,
    /// N×H×W, entries 0 or 1.
    pub masks: Array3<T>,
    pub labels: Vec<u8>,
}

/// Background images with class labels (ten texture classes).
#[derive(Debug, Clone)]
pub struct SceneBank<T: Scalar> {
    pub images: Array4<T>,
    pub labels: Vec<u8>,
}

// 5×7 glyph bitmaps for the ten digits.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

fn glyph_value(digit: usize, v: f64, u: f64) -> f64 {
    // bilinear over the 7×5 bitmap, zero outside
    let fetch = |r: i64, c: i64| -> f64 {
        if (0..7).contains(&r) && (0..5).contains(&c) {
            f64::from(GLYPHS[digit][r as usize].as_bytes()[c as usize] == b'#')
        } else {
            0.0
        }
    };
    let (r0, c0) = (v.floor(), u.floor());
    let (fr, fc) = (v - r0, u - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    fetch(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + fetch(r0 + 1, c0) * fr * (1.0 - fc)
        + fetch(r0, c0 + 1) * (1.0 - fr) * fc
        + fetch(r0 + 1, c0 + 1) * fr * fc
}

/// Render `n` grayscale 28×28 digit images (classes round-robin 0..9) with
/// random rotation, scale, shift, intensity and additive noise.
pub fn synthetic_digit_bank<T: Scalar>(n: usize, seed: u64) -> (Array3<T>, Vec<u8>) {
    let mut images = Array3::zeros((n, 28, 28));
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0f64, 0.05).unwrap();
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit as u8);
        let mut rng = stream_rng(seed, 0xD161 + i as u64);
        let theta: f64 = rng.random_range(-0.22..0.22);
        let scale: f64 = rng.random_range(0.85..1.15);
        let (sy, sx): (f64, f64) = (rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5));
        let intensity: f64 = rng.random_range(0.65..1.0);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let (glyph_h, glyph_w) = (22.0 * scale, 16.0 * scale);
        for y in 0..28 {
            for x in 0..28 {
                let dy = y as f64 - 13.5 - sy;
                let dx = x as f64 - 13.5 - sx;
                let ry = cos_t * dy + sin_t * dx;
                let rx = -sin_t * dy + cos_t * dx;
                let v = ry / (glyph_h / 7.0) + 3.0;
                let u = rx / (glyph_w / 5.0) + 2.0;
                let mut val = intensity * glyph_value(digit, v, u) + noise.sample(&mut rng);
                val = val.clamp(0.0, 1.0);
                images[[i, y, x]] = c::<T>(val);
            }
        }
    }
    (images, labels)
}

/// Whether pixel offset (dy, dx) from the shape center lies inside shape
/// class `class` of radius `r`.
fn shape_predicate(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let t = r / 3.0;
    match class {
        0 => dy * dy + dx * dx <= r * r,                          // disc
        1 => ay <= r && ax <= r,                                  // square
        2 => (-r..=r).contains(&dy) && ax <= (dy + r) / 2.0,      // triangle
        3 => ay + ax <= r,                                        // diamond
        4 => (ax <= t && ay <= r) || (ay <= t && ax <= r),        // plus
        5 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)            // ring
        }
        6 => ay <= t && ax <= r,                                  // horizontal bar
        7 => ax <= t && ay <= r,                                  // vertical bar
        8 => (ay - ax).abs() <= t && ay.max(ax) <= r,             // X
        9 => (dx <= -r + t && ay <= r) || (dy >= r - t && ax <= r), // L
        _ => unreachable!(),
    }
}

/// `n` white shapes (classes round-robin 0..9) on transparent backgrounds
/// with jittered center/size, plus the binary object masks.
pub fn synthetic_shape_bank<T: Scalar>(n: usize, size: (usize, usize), seed: u64) -> ImageBank<T> {
    let (h, w) = size;
    let mut images = Array4::zeros((n, 3, h, w));
    let mut masks = Array3::zeros((n, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        let mut rng = stream_rng(seed, 0x5AFE + i as u64);
        let r = rng.random_range(0.22..0.34) * h.min(w) as f64;
        let cy = rng.random_range(0.38..0.62) * h as f64;
        let cx = rng.random_range(0.38..0.62) * w as f64;
        let intensity: f64 = rng.random_range(0.85..1.0);
        for y in 0..h {
            for x in 0..w {
                if shape_predicate(class, y as f64 - cy, x as f64 - cx, r) {
                    masks[[i, y, x]] = T::one();
                    for ch in 0..3 {
                        images[[i, ch, y, x]] = c::<T>(intensity);
                    }
                }
            }
        }
    }
    ImageBank { images, masks, labels }
}

/// `n` textured backgrounds in ten classes: sinusoidal stripe patterns of
/// class-specific orientation and frequency with a class-specific hue.
pub fn synthetic_scene_bank<T: Scalar>(n: usize, size: (usize, usize), seed: u64) -> SceneBank<T> {
    let (h, w) = size;
    let mut images = Array4::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        let mut rng = stream_rng(seed, 0xBA5E + i as u64);
        let angle = class as f64 * std::f64::consts::PI / 10.0;
        let freq = 0.2 + 0.06 * class as f64 + rng.random_range(-0.02..0.02);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let hue = [
            0.3 + 0.07 * (class % 4) as f64,
            0.3 + 0.07 * ((class + 3) % 4) as f64,
            0.3 + 0.07 * ((class + 6) % 4) as f64,
        ];
        for y in 0..h {
            for x in 0..w {
                let s = (freq * (y as f64 * angle.cos() + x as f64 * angle.sin()) + phase).sin();
                let v = 0.5 + 0.4 * s;
                for ch in 0..3 {
                    images[[i, ch, y, x]] = c::<T>((v * (hue[ch] + 0.5)).clamp(0.0, 1.0));
                }
            }
        }
    }
    SceneBank { images, labels }
}
