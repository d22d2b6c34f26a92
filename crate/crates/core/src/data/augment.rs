//! Rotation augmentation for minority-class balancing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Label, Sample};
use crate::tensor::Tensor;

/// Largest rotation used when balancing, in degrees.
pub const MAX_ANGLE: f64 = 5.0;

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Rotates every `[.., H, W]` plane of `img` counter-clockwise by `degrees`
/// about the image centre with bilinear resampling. Samples outside the
/// source read as zero.
pub fn rotate(img: &Tensor, degrees: f64) -> Tensor {
    if degrees == 0.0 {
        return img.clone();
    }
    let shape = img.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    // Bilinear taps are shared by all planes.
    let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = snap(cx + dx * cos - dy * sin);
            let sy = snap(cy + dx * sin + dy * cos);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut t = [(0, 0.0); 4];
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (slot, (px, py, wgt)) in t.iter_mut().zip(corners) {
                if wgt != 0.0 && px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                    *slot = (py as usize * w + px as usize, wgt);
                }
            }
            taps.push(t);
        }
    }

    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for (o, s) in out.chunks_exact_mut(plane).zip(src.chunks_exact(plane)) {
        for (v, t) in o.iter_mut().zip(&taps) {
            *v = t.iter().map(|&(i, wgt)| wgt * s[i]).sum();
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Appends rotated copies of `minority` samples, cycling through them in
/// order with angles drawn uniformly from ±[`MAX_ANGLE`], until the class
/// matches the largest other class. Originals are left untouched.
pub fn balance_augment(dataset: &Dataset, minority: Label, seed: u64) -> Dataset {
    let counts = dataset.class_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let sources: Vec<&Sample> = dataset.samples.iter().filter(|s| s.label == minority).collect();
    let mut out = dataset.clone();
    if sources.is_empty() {
        log::warn!("balance_augment: no {minority} samples to augment");
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let missing = target - counts[minority.index()];
    out.samples.reserve(missing);
    for k in 0..missing {
        let src = sources[k % sources.len()];
        let angle = rng.random_range(-MAX_ANGLE..=MAX_ANGLE);
        out.samples.push(Sample {
            image: rotate(&src.image, angle),
            augmented: true,
            ..src.clone()
        });
    }
    out
}
