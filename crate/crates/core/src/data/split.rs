//! Subject-level holdout and k-fold partitioning.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode {
    /// Partition 0 is training, 1 is validation; `train_fraction` of the
    /// subjects (rounded) go to training.
    Holdout { train_fraction: f64 },
    KFold { k: usize },
}

impl SplitMode {
    pub const HOLDOUT_8_2: SplitMode = SplitMode::Holdout { train_fraction: 0.8 };

    pub fn n_partitions(&self) -> usize {
        match *self {
            SplitMode::Holdout { .. } => 2,
            SplitMode::KFold { k } => k,
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Holdout { train_fraction } => write!(f, "holdout({train_fraction})"),
            SplitMode::KFold { k } => write!(f, "kfold({k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub stratified: bool,
    /// `(subject, partition)` in input order.
    pub assignments: Vec<(String, usize)>,
}

impl SplitPlan {
    pub fn partition(&self, p: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, q)| *q == p)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.mode.n_partitions()];
        for (_, p) in &self.assignments {
            sizes[*p] += 1;
        }
        sizes
    }

    /// Training and validation subjects: for holdout the fixed 8:2 pair,
    /// for k-fold fold `fold` held out against the rest.
    pub fn train_val(&self, fold: usize) -> Result<(HashSet<&str>, HashSet<&str>)> {
        let held = match self.mode {
            SplitMode::Holdout { .. } => 1,
            SplitMode::KFold { k } if fold < k => fold,
            SplitMode::KFold { k } => {
                return Err(Error::Validation(format!("fold {fold} out of range for k = {k}")))
            }
        };
        let mut train = HashSet::new();
        let mut val = HashSet::new();
        for (s, p) in &self.assignments {
            if *p == held {
                val.insert(s.as_str());
            } else {
                train.insert(s.as_str());
            }
        }
        Ok((train, val))
    }
}

/// Splits `subjects` (id, label) per `mode`. With `stratified`, each class is
/// shuffled and apportioned separately so every partition holds each class
/// within one subject of its proportional share.
pub fn make_split(subjects: &[(String, Label)], mode: SplitMode, seed: u64, stratified: bool) -> Result<SplitPlan> {
    let mut seen = HashSet::new();
    for (s, _) in subjects {
        if !seen.insert(s.as_str()) {
            return Err(Error::Validation(format!("subject {s} listed twice")));
        }
    }
    let mut groups: BTreeMap<Option<Label>, Vec<usize>> = BTreeMap::new();
    for (i, (_, l)) in subjects.iter().enumerate() {
        groups.entry(stratified.then_some(*l)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
    }

    let mut part = vec![0usize; subjects.len()];
    match mode {
        SplitMode::Holdout { train_fraction } => {
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(Error::Validation(format!("train fraction {train_fraction} outside [0, 1]")));
            }
            let total = (train_fraction * subjects.len() as f64).round() as usize;
            let quotas = apportion(groups.values().map(Vec::len), train_fraction, total);
            for (members, quota) in groups.values().zip(quotas) {
                for (j, &i) in members.iter().enumerate() {
                    part[i] = usize::from(j >= quota);
                }
            }
        }
        SplitMode::KFold { k } => {
            if k < 2 {
                return Err(Error::Validation(format!("k-fold needs k >= 2, got {k}")));
            }
            if let Some((l, m)) = groups.iter().find(|(_, m)| m.len() < k) {
                let what = l.map_or("the subject set".to_string(), |l| format!("class {l}"));
                return Err(Error::Validation(format!("{what} has {} subjects, fewer than k = {k}", m.len())));
            }
            // Dealing continues across classes so fold sizes differ by at most one.
            let mut next = 0;
            for members in groups.values() {
                for &i in members {
                    part[i] = next % k;
                    next += 1;
                }
            }
        }
    }
    Ok(SplitPlan {
        mode,
        seed,
        stratified,
        assignments: subjects.iter().zip(part).map(|((s, _), p)| (s.clone(), p)).collect(),
    })
}

/// Largest-remainder apportionment of `total` across groups in proportion
/// `fraction · size`; ties go to the earlier group.
fn apportion(sizes: impl Iterator<Item = usize>, fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.map(|n| fraction * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let assigned: usize = quotas.iter().sum();
    for &g in order.iter().take(total.saturating_sub(assigned)) {
        quotas[g] += 1;
    }
    quotas
}
