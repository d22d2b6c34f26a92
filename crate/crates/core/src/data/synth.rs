//! Procedural stand-in for axial brain slices.
//!
//! Each image is a bright elliptical "brain" with a dark central cavity
//! whose radius grows CN < MCI < AD, in the manner of ventricular
//! enlargement. Shape, position and contrast are jittered per image and
//! Gaussian noise is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{replicate_channels, Dataset, Label, Sample};
use crate::error::{Error, Result};

/// Generator parameters, as fractions of the image size where lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Mean cavity radius per class, indexed by [`Label::index`].
    pub cavity_radius: [f64; 3],
    /// Half-width of the uniform jitter on the cavity radius.
    pub cavity_jitter: f64,
    /// Brain semi-axes `(x, y)` before jitter.
    pub brain_axes: (f64, f64),
    pub brain_jitter: f64,
    /// Maximum centre offset in pixels.
    pub shift: f64,
    pub noise_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            cavity_radius: [0.17, 0.12, 0.07],
            cavity_jitter: 0.02,
            brain_axes: (0.36, 0.42),
            brain_jitter: 0.04,
            shift: 4.0,
            noise_std: 0.05,
        }
    }
}

/// Ground truth for one generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub label: Label,
    /// Cavity semi-axes in pixels.
    pub cavity_axes: (f64, f64),
    pub centre: (f64, f64),
}

impl SynthMeta {
    pub fn cavity_area(&self) -> f64 {
        std::f64::consts::PI * self.cavity_axes.0 * self.cavity_axes.1
    }
}

/// `n_per_class` images of each class at `size`×`size`, with default
/// parameters. Subjects are `synth-<class>-<i>`, one image each.
pub fn synth_generate(n_per_class: usize, seed: u64, size: usize) -> Result<(Dataset, Vec<SynthMeta>)> {
    synth_generate_with(n_per_class, seed, size, &SynthParams::default())
}

pub fn synth_generate_with(
    n_per_class: usize,
    seed: u64,
    size: usize,
    p: &SynthParams,
) -> Result<(Dataset, Vec<SynthMeta>)> {
    if size < 16 {
        return Err(Error::Validation(format!("synthetic image size must be at least 16, got {size}")));
    }
    let mut samples = Vec::with_capacity(3 * n_per_class);
    let mut metas = Vec::with_capacity(3 * n_per_class);
    for i in 0..n_per_class {
        for label in Label::ALL {
            let stream = (3 * i + label.index()) as u64;
            let (plane, meta) = draw(label, size, seed, stream, p);
            samples.push(Sample {
                image: replicate_channels(&plane, size, size)?,
                label,
                subject: format!("synth-{}-{i:05}", label.to_string().to_lowercase()),
                slice: 0,
                augmented: false,
            });
            metas.push(meta);
        }
    }
    Ok((Dataset::new(samples), metas))
}

fn draw(label: Label, size: usize, seed: u64, stream: u64, p: &SynthParams) -> (Vec<f64>, SynthMeta) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let s = size as f64;
    let mut jit = |half: f64| rng.random_range(-half..=half);

    let centre = ((s - 1.0) / 2.0 + jit(p.shift), (s - 1.0) / 2.0 + jit(p.shift));
    let brain = ((p.brain_axes.0 + jit(p.brain_jitter)) * s, (p.brain_axes.1 + jit(p.brain_jitter)) * s);
    let r = p.cavity_radius[label.index()];
    let cavity = ((r + jit(p.cavity_jitter)) * s, (r + jit(p.cavity_jitter)) * s);
    let tissue = 1.0 + jit(0.1);
    let fluid = 0.15 + jit(0.05);

    let noise = Normal::new(0.0, p.noise_std).expect("finite std");
    let mut plane = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - centre.0, y as f64 - centre.1);
            let in_brain = (dx / brain.0).powi(2) + (dy / brain.1).powi(2) <= 1.0;
            let in_cavity = (dx / cavity.0).powi(2) + (dy / cavity.1).powi(2) <= 1.0;
            let base = match (in_brain, in_cavity) {
                (_, true) => fluid,
                (true, false) => tissue,
                _ => 0.0,
            };
            plane.push(base + noise.sample(&mut rng));
        }
    }
    (
        plane,
        SynthMeta {
            label,
            cavity_axes: cavity,
            centre,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, _) = synth_generate(4, 11, 16).unwrap();
        let (b, _) = synth_generate(4, 11, 16).unwrap();
        let (c, _) = synth_generate(4, 12, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.class_counts(), [4, 4, 4]);
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(synth_generate(1, 0, 15).is_err());
        assert!(synth_generate(0, 0, 16).unwrap().0.is_empty());
    }

    #[test]
    fn cavity_area_orders_classes() {
        let (ds, meta) = synth_generate(60, 7, 32).unwrap();
        let mut area = [0.0; 3];
        let mut dark = [0.0; 3];
        for (s, m) in ds.samples.iter().zip(&meta) {
            area[m.label.index()] += m.cavity_area();
            // Independent estimate: dark pixels near the brain centre.
            let (cx, cy) = m.centre;
            let n = s.image.shape()[2];
            dark[s.label.index()] += (0..n * n)
                .filter(|&i| {
                    let (x, y) = ((i % n) as f64, (i / n) as f64);
                    (x - cx).hypot(y - cy) < 0.3 * n as f64 && s.image.data()[i] < 0.55
                })
                .count() as f64;
        }
        let (ad, mci, cn) = (Label::Ad.index(), Label::Mci.index(), Label::Cn.index());
        assert!(area[cn] < area[mci] && area[mci] < area[ad], "{area:?}");
        assert!(dark[cn] < dark[mci] && dark[mci] < dark[ad], "{dark:?}");
    }
}
