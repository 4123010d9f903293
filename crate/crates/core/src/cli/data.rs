//! Corpus directories, folds, and training crops.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::corpus::{
    frame_targets, load_class_table, load_clip, load_manifest, resample, stratified_kfold, AudioClip,
    ClassTable, LabelEvent, LabelSet,
};
use crate::error::{Error, Result};

/// Clips with their events, in clip-id order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<AudioClip>,
    pub events: Vec<Vec<LabelEvent>>,
    pub table: ClassTable,
}

fn wav_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_all(paths: &[PathBuf], sample_rate: u32, workers: usize) -> Result<Vec<AudioClip>> {
    let load = |p: &PathBuf| -> Result<AudioClip> {
        let clip = load_clip(p)?;
        if clip.sample_rate == sample_rate {
            Ok(clip)
        } else {
            resample(&clip, sample_rate)
        }
    };
    if workers <= 1 {
        return paths.iter().map(load).collect();
    }
    let chunk = paths.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(load).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(paths.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

/// Reads `classes.txt`, `labels.csv` and `clips/*.wav` under `dir`. Clips
/// are loaded on `workers` threads; order never depends on the count.
pub fn load_dataset(dir: &Path, sample_rate: u32, workers: usize) -> Result<Dataset> {
    let table = load_class_table(&dir.join("classes.txt"))?;
    let mut manifest = load_manifest(&dir.join("labels.csv"), &table)?;
    let clips = load_all(&wav_paths(&dir.join("clips"))?, sample_rate, workers)?;
    if clips.is_empty() {
        return Err(Error::Config(format!("no clips under {}", dir.join("clips").display())));
    }
    for id in manifest.keys() {
        if !clips.iter().any(|c| &c.id == id) {
            return Err(Error::Config(format!("labels reference missing clip `{id}`")));
        }
    }
    let events = clips.iter().map(|c| manifest.remove(&c.id).unwrap_or_default()).collect();
    Ok(Dataset { clips, events, table })
}

impl Dataset {
    pub fn label_sets(&self, idx: &[usize]) -> Vec<LabelSet> {
        idx.iter()
            .map(|&i| LabelSet::from_events(self.clips[i].id.clone(), &self.events[i]))
            .collect()
    }

    /// `(train, eval)` clip indices for one fold of a stratified split.
    pub fn split(&self, folds: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= folds {
            return Err(Error::arg("fold", format!("{fold} with {folds} folds")));
        }
        let all: Vec<usize> = (0..self.clips.len()).collect();
        let plan = stratified_kfold(&self.label_sets(&all), folds, seed)?;
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (i, c) in self.clips.iter().enumerate() {
            if plan.fold_of(&c.id) == Some(fold) {
                eval.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, eval))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.id == id)
    }
}

/// A crop of `len` samples starting at `start`, zero padded past the end.
pub fn crop(samples: &[f64], start: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let end = (start + len).min(samples.len());
    if start < end {
        out[..end - start].copy_from_slice(&samples[start..end]);
    }
    out
}

/// Draws `batch` clips from `pool` and a uniform crop start in each.
pub fn sample_crops(ds: &Dataset, pool: &[usize], batch: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..batch)
        .map(|_| {
            let i = pool[rng.random_range(0..pool.len())];
            let n = ds.clips[i].samples.len();
            let start = if n > len { rng.random_range(0..=n - len) } else { 0 };
            (i, start)
        })
        .collect()
}

/// Frame targets of a crop: events are shifted into crop time and clipped.
pub fn crop_targets(
    events: &[LabelEvent],
    start_s: f64,
    crop_s: f64,
    frame_rate: f64,
    n_frames: usize,
    table: &ClassTable,
) -> Result<Mat> {
    let shifted: Vec<LabelEvent> = events
        .iter()
        .filter(|e| e.offset_s > start_s && e.onset_s < start_s + crop_s)
        .map(|e| LabelEvent {
            onset_s: (e.onset_s - start_s).max(0.0),
            offset_s: (e.offset_s - start_s).min(crop_s),
            ..*e
        })
        .collect();
    Ok(frame_targets(&shifted, crop_s, frame_rate, table)?.fit_to(n_frames).frames)
}
