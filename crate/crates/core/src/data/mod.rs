//! MRI slice data: NIfTI volumes, the slice pipeline, augmentation,
//! synthetic images, manifests and subject-level splits.

pub mod augment;
pub mod manifest;
pub mod nifti;
pub mod split;
pub mod synth;
pub mod volume;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{balance_augment, rotate};
pub use manifest::{load_dataset, read_manifest, save_dataset, write_manifest, write_sample, ManifestRow};
pub use nifti::{read_nifti, write_nifti, Datatype, Volume};
pub use split::{make_split, SplitMode, SplitPlan};
pub use synth::{synth_generate, SynthMeta};
pub use volume::{extract_slices, normalize_volume, pad_volume};

/// Diagnostic class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Ad,
    Mci,
    Cn,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Ad, Label::Mci, Label::Cn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Validation(format!("class index {i} out of range")))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Ad => "AD",
            Label::Mci => "MCI",
            Label::Cn => "CN",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AD" => Ok(Label::Ad),
            "MCI" => Ok(Label::Mci),
            "CN" => Ok(Label::Cn),
            other => Err(Error::Validation(format!("unknown label `{other}` (expected AD, MCI or CN)"))),
        }
    }
}

/// One 3-channel slice image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, three identical channels.
    pub image: Tensor,
    pub label: Label,
    pub subject: String,
    pub slice: usize,
    /// True for copies added by augmentation.
    pub augmented: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts indexed by [`Label::index`].
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[s.label.index()] += 1;
        }
        c
    }

    /// Distinct subjects with their label, in first-seen order.
    pub fn subjects(&self) -> Result<Vec<(String, Label)>> {
        let mut seen = std::collections::HashMap::new();
        let mut out = Vec::new();
        for s in &self.samples {
            match seen.get(&s.subject) {
                None => {
                    seen.insert(s.subject.clone(), s.label);
                    out.push((s.subject.clone(), s.label));
                }
                Some(&l) if l != s.label => {
                    return Err(Error::Validation(format!(
                        "subject {} has samples labelled {l} and {}",
                        s.subject, s.label
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(out)
    }

    /// Stacks the images of `indices` into `[N, 3, H, W]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Validation("cannot batch an empty selection".into()))?;
        let shape = self.samples[*first].image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.samples[*first].image.len());
        for &i in indices {
            let img = &self.samples[i].image;
            if img.shape() != shape.as_slice() {
                return Err(Error::shape("dataset images", &shape, img.shape()));
            }
            data.extend_from_slice(img.data());
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label.index()).collect()
    }

    /// Indices of samples whose subject is in `subjects`.
    pub fn indices_for(&self, subjects: &std::collections::HashSet<&str>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| subjects.contains(self.samples[i].subject.as_str()))
            .collect()
    }
}

/// `[H, W]` plane replicated into `[3, H, W]`.
pub fn replicate_channels(plane: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if plane.len() != h * w {
        return Err(Error::Length {
            expected: h * w,
            found: plane.len(),
        });
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(plane);
    }
    Tensor::new([3, h, w], data)
}
