use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabelEvent;
use crate::error::{Error, Result};

/// Clip id with the set of classes it contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub id: String,
    pub labels: BTreeSet<usize>,
}

impl LabelSet {
    pub fn new(id: impl Into<String>, labels: impl IntoIterator<Item = usize>) -> Self {
        LabelSet {
            id: id.into(),
            labels: labels.into_iter().collect(),
        }
    }

    pub fn from_events(id: impl Into<String>, events: &[LabelEvent]) -> Self {
        Self::new(id, events.iter().map(|e| e.class_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fold_assignments: BTreeMap<String, usize>,
    pub k: usize,
}

impl SplitPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.fold_assignments.get(id).copied()
    }

    /// Ids assigned to `fold`, sorted.
    pub fn eval_ids(&self, fold: usize) -> Vec<String> {
        self.fold_assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids outside `fold`, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.fold_assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Picks the index maximizing `key`, breaking exact ties uniformly at random.
fn argmax_random<R: Rng>(candidates: &[usize], key: impl Fn(usize) -> f64, rng: &mut R) -> usize {
    let best = candidates
        .iter()
        .map(|&j| key(j))
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = candidates.iter().copied().filter(|&j| key(j) == best).collect();
    tied[rng.random_range(0..tied.len())]
}

/// Iterative multi-label stratification into `k` folds.
///
/// Labels are processed rarest first; each example carrying the current label
/// goes to the fold that still wants the most of that label, then the fold
/// that wants the most examples overall, then a seeded random choice.
pub fn stratified_kfold(clips: &[LabelSet], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::arg("k", format!("{k} folds, need at least 2")));
    }
    if k > clips.len() {
        return Err(Error::arg(
            "k",
            format!("{k} folds for {} clips", clips.len()),
        ));
    }
    let mut seen = BTreeSet::new();
    for c in clips {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::arg("clips", format!("duplicate clip id `{}`", c.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clips.len();
    let n_labels = clips
        .iter()
        .flat_map(|c| c.labels.iter().copied())
        .max()
        .map_or(0, |m| m + 1);

    let mut desired: Vec<f64> = vec![n as f64 / k as f64; k];
    let mut desired_label = vec![vec![0.0; n_labels]; k];
    let mut remaining_per_label = vec![0usize; n_labels];
    for c in clips {
        for &l in &c.labels {
            remaining_per_label[l] += 1;
        }
    }
    for row in desired_label.iter_mut() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = remaining_per_label[l] as f64 / k as f64;
        }
    }

    let mut fold = vec![usize::MAX; n];
    let mut unassigned: Vec<usize> = (0..n).collect();
    unassigned.shuffle(&mut rng);
    let folds: Vec<usize> = (0..k).collect();

    loop {
        let rarest = (0..n_labels)
            .filter(|&l| remaining_per_label[l] > 0)
            .min_by_key(|&l| (remaining_per_label[l], l));
        let Some(label) = rarest else { break };
        let members: Vec<usize> = unassigned
            .iter()
            .copied()
            .filter(|&i| clips[i].labels.contains(&label))
            .collect();
        for i in members {
            let j = {
                let by_label = |j: usize| desired_label[j][label];
                let top = folds.iter().map(|&j| by_label(j)).fold(f64::NEG_INFINITY, f64::max);
                let tied: Vec<usize> = folds.iter().copied().filter(|&j| by_label(j) == top).collect();
                argmax_random(&tied, |j| desired[j], &mut rng)
            };
            fold[i] = j;
            desired[j] -= 1.0;
            for &l in &clips[i].labels {
                desired_label[j][l] -= 1.0;
                remaining_per_label[l] -= 1;
            }
        }
        unassigned.retain(|&i| fold[i] == usize::MAX);
    }
    for i in unassigned {
        let j = argmax_random(&folds, |j| desired[j], &mut rng);
        fold[i] = j;
        desired[j] -= 1.0;
    }

    Ok(SplitPlan {
        fold_assignments: clips
            .iter()
            .zip(&fold)
            .map(|(c, &f)| (c.id.clone(), f))
            .collect(),
        k,
    })
}

/// Stratified subset of a training split.
///
/// Each clip is stratified by its rarest label within `train`. Quotas are
/// `floor(fraction·n)` per stratum plus largest remainders up to
/// `round(fraction·N)`, and every labeled stratum keeps at least one clip. Any
/// class still absent afterwards receives one random clip. Returned ids keep
/// the order of `train`.
pub fn fewshot_subsample(train: &[LabelSet], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg("fraction", format!("{fraction} not in (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(train.iter().map(|c| c.id.clone()).collect());
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in train {
        for &l in &c.labels {
            *counts.entry(l).or_default() += 1;
        }
    }
    // Stratum key: Some(rarest label) or None for unlabeled clips.
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, c) in train.iter().enumerate() {
        let key = c.labels.iter().copied().min_by_key(|l| (counts[l], *l));
        strata.entry(key).or_default().push(i);
    }

    let target = (fraction * train.len() as f64).round() as usize;
    let mut quotas: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (key, members) in &strata {
        let exact = fraction * members.len() as f64;
        quotas.insert(*key, exact.floor() as usize);
        remainders.push((exact - exact.floor(), *key));
    }
    let assigned: usize = quotas.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, key) in remainders.iter().take(target.saturating_sub(assigned)) {
        *quotas.get_mut(key).unwrap() += 1;
    }
    for (key, q) in quotas.iter_mut() {
        if key.is_some() && *q == 0 {
            *q = 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; train.len()];
    for (key, members) in &strata {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        for &i in m.iter().take(quotas[key]) {
            chosen[i] = true;
        }
    }
    for &label in counts.keys() {
        let present = train
            .iter()
            .zip(&chosen)
            .any(|(c, &on)| on && c.labels.contains(&label));
        if !present {
            let holders: Vec<usize> = (0..train.len())
                .filter(|&i| train[i].labels.contains(&label))
                .collect();
            chosen[holders[rng.random_range(0..holders.len())]] = true;
        }
    }

    let out: Vec<String> = train
        .iter()
        .zip(&chosen)
        .filter(|(_, &on)| on)
        .map(|(c, _)| c.id.clone())
        .collect();
    if out.is_empty() {
        return Err(Error::arg("fraction", "few-shot subset is empty"));
    }
    Ok(out)
}
