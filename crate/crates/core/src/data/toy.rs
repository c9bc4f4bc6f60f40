//! Procedural grayscale dataset with one geometric template per class.

use rand::Rng as _;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{self, STREAM_DATA};

pub const TOY_TEMPLATES: [&str; 8] = [
    "square",
    "cross",
    "diagonal",
    "ring",
    "horizontal_bars",
    "vertical_bars",
    "checker",
    "anti_diagonal",
];

const NOISE_STD: f32 = 0.1;

fn lit(class: usize, side: usize, x: isize, y: isize) -> bool {
    let s = side as f32;
    let c = (s - 1.0) / 2.0;
    let (xf, yf) = (x as f32, y as f32);
    let thick = (s / 8.0).max(0.5);
    let band = (side / 4).max(1) as isize;
    match class {
        0 => (xf - c).abs() <= s / 4.0 && (yf - c).abs() <= s / 4.0,
        1 => (xf - c).abs() <= thick || (yf - c).abs() <= thick,
        2 => (xf - yf).abs() <= thick,
        3 => {
            let r = ((xf - c).powi(2) + (yf - c).powi(2)).sqrt();
            r >= s * 0.25 && r <= s * 0.45
        }
        4 => (y / band) % 2 == 0,
        5 => (x / band) % 2 == 0,
        6 => ((x as usize) < side / 2) ^ ((y as usize) < side / 2),
        _ => (xf + yf - (s - 1.0)).abs() <= thick,
    }
}

/// The clean template for `class`, shifted by `(dx, dy)` pixels, with
/// values -1 (background) and 1 (shape).
pub fn toy_template(class: usize, side: usize, dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![-1.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let (sx, sy) = (x - dx, y - dy);
            if sx < 0 || sy < 0 || sx >= side as isize || sy >= side as isize {
                continue;
            }
            if lit(class, side, sx, sy) {
                out[y as usize * side + x as usize] = 1.0;
            }
        }
    }
    out
}

/// `classes * per_class` samples; sample `i` has label `i % classes`.
pub fn make_toy_dataset(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > TOY_TEMPLATES.len() {
        return Err(Error::Argument(format!(
            "toy dataset supports 2..={} classes, got {classes}",
            TOY_TEMPLATES.len()
        )));
    }
    if side < 4 || per_class == 0 {
        return Err(Error::Argument(format!(
            "toy dataset needs side >= 4 and per_class >= 1, got side {side}, per_class {per_class}"
        )));
    }
    let n = classes * per_class;
    let plane = side * side;
    let mut images = vec![0.0f32; n * plane];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in images.chunks_exact_mut(plane).enumerate() {
        let class = i % classes;
        let mut r = rng::substream(seed, &[STREAM_DATA, i as u64]);
        let dx = r.random_range(-1i32..=1) as isize;
        let dy = r.random_range(-1i32..=1) as isize;
        img.copy_from_slice(&toy_template(class, side, dx, dy));
        for v in img.iter_mut() {
            *v = (*v + NOISE_STD * rng::normal(&mut r)).clamp(-1.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], images)?, labels, classes)
}
