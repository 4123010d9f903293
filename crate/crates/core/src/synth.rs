//! Synthetic corpus: sparse band-limited calls in broadband impulsive noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::corpus::{save_manifest, write_clip, AudioClip, ClassTable, LabelEvent, Manifest};
use crate::error::{Error, Result};

/// Minimum silence kept between two calls.
const CALL_GAP_S: f64 = 0.05;
const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub band_hz: (f64, f64),
    pub duration_ms: (f64, f64),
    /// Mean number of calls per clip; the count is `floor(rate)` plus one
    /// more with probability `fract(rate)`.
    pub rate: f64,
    /// Sweep across the whole band instead of holding one frequency.
    pub chirp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Gaussian floor standard deviation.
    pub floor_std: f64,
    /// Mean impulsive bursts per second.
    pub burst_rate: f64,
    pub burst_ms: (f64, f64),
    /// Burst peak relative to the floor, in dB.
    pub burst_db: (f64, f64),
    /// Call peak relative to the floor, in dB.
    pub snr_db: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub clip_s: f64,
    pub sample_rate: u32,
    pub classes: Vec<SynthClass>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// Three classes between 800 and 1200 Hz, about 7 % labeled time.
    fn default() -> Self {
        let class = |name: &str, band_hz, chirp| SynthClass {
            name: name.to_string(),
            band_hz,
            duration_ms: (120.0, 280.0),
            rate: 0.6,
            chirp,
        };
        SynthSpec {
            n_clips: 200,
            clip_s: 5.0,
            sample_rate: 8000,
            classes: vec![
                class("low", (800.0, 880.0), false),
                class("mid", (960.0, 1040.0), true),
                class("high", (1120.0, 1200.0), false),
            ],
            noise: NoiseSpec {
                floor_std: 0.01,
                burst_rate: 3.0,
                burst_ms: (1.0, 5.0),
                burst_db: (20.0, 30.0),
                snr_db: (20.0, 26.0),
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Checks the spec and returns warnings for legal but degenerate settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || !(self.clip_s > 0.0) {
            return Err(Error::Config("sample_rate and clip_s must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        for c in &self.classes {
            let (lo, hi) = c.band_hz;
            if !(lo > 0.0 && hi >= lo && hi < nyquist) {
                return Err(Error::Config(format!("class `{}` band {lo}..{hi} Hz outside (0, {nyquist})", c.name)));
            }
            let (dmin, dmax) = c.duration_ms;
            if !(dmin > 0.0 && dmax >= dmin && dmax / 1000.0 <= self.clip_s) {
                return Err(Error::Config(format!("class `{}` duration range {dmin}..{dmax} ms", c.name)));
            }
            if !(c.rate >= 0.0) {
                return Err(Error::Config(format!("class `{}` rate {} is negative", c.name, c.rate)));
            }
        }
        let n = &self.noise;
        if !(n.floor_std >= 0.0 && n.burst_rate >= 0.0 && n.burst_ms.0 > 0.0 && n.burst_ms.1 >= n.burst_ms.0) {
            return Err(Error::Config("noise parameters out of range".into()));
        }
        if n.burst_db.1 < n.burst_db.0 || n.snr_db.1 < n.snr_db.0 {
            return Err(Error::Config("dB ranges must be ordered".into()));
        }
        let mut warnings = Vec::new();
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.band_hz == b.band_hz {
                    warnings.push(format!("classes `{}` and `{}` share the band {:?} Hz", a.name, b.name, a.band_hz));
                }
            }
        }
        Ok(warnings)
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        ClassTable::new(&names, None)
    }

    /// Expected fraction of clip time covered by calls.
    pub fn expected_density(&self) -> f64 {
        let per_clip: f64 = self
            .classes
            .iter()
            .map(|c| c.rate * (c.duration_ms.0 + c.duration_ms.1) / 2000.0)
            .sum();
        per_clip / self.clip_s
    }
}

pub struct SynthCorpus {
    pub clips: Vec<AudioClip>,
    pub manifest: Manifest,
    pub table: ClassTable,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn call_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    rate.floor() as usize + rng.random_bool(rate.fract()) as usize
}

fn count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Hann-windowed tone burst, linear chirp from `f0` to `f1`.
fn call(n: usize, sr: f64, f0: f64, f1: f64, amp: f64, phase: f64) -> Vec<f64> {
    let dur = n as f64 / sr;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos();
            let k = (f1 - f0) / dur;
            amp * env * (phase + 2.0 * PI * (f0 * t + 0.5 * k * t * t)).sin()
        })
        .collect()
}

fn clip_id(i: usize) -> String {
    format!("clip{i:04}")
}

/// One clip and its events, from a generator derived from the spec seed.
pub fn synthesize_clip(spec: &SynthSpec, index: usize) -> (AudioClip, Vec<LabelEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let sr = spec.sample_rate as f64;
    let n = (spec.clip_s * sr).round() as usize;
    let floor = Normal::new(0.0, spec.noise.floor_std).expect("validated std");
    let mut x: Vec<f64> = (0..n).map(|_| floor.sample(&mut rng)).collect();

    let ref_amp = spec.noise.floor_std.max(1e-4);
    for _ in 0..count(&mut rng, spec.noise.burst_rate * spec.clip_s) {
        let len = ((uniform(&mut rng, spec.noise.burst_ms) / 1000.0 * sr).round() as usize).max(1);
        let start = rng.random_range(0..n.saturating_sub(len).max(1));
        let amp = ref_amp * 10f64.powf(uniform(&mut rng, spec.noise.burst_db) / 20.0);
        for v in x.iter_mut().skip(start).take(len) {
            *v += amp * rng.random_range(-1.0..1.0);
        }
    }

    let mut events: Vec<LabelEvent> = Vec::new();
    for (cid, class) in spec.classes.iter().enumerate() {
        for _ in 0..call_count(&mut rng, class.rate) {
            let dur = uniform(&mut rng, class.duration_ms) / 1000.0;
            let len = (dur * sr).round() as usize;
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let start = rng.random_range(0..=n - len);
                let (on, off) = (start as f64 / sr, (start + len) as f64 / sr);
                let clear = events
                    .iter()
                    .all(|e| off + CALL_GAP_S <= e.onset_s || on >= e.offset_s + CALL_GAP_S);
                if clear {
                    placed = Some((start, on, off));
                    break;
                }
            }
            let Some((start, on, off)) = placed else {
                continue;
            };
            let (lo, hi) = class.band_hz;
            let (f0, f1) = if class.chirp {
                if rng.random_bool(0.5) {
                    (lo, hi)
                } else {
                    (hi, lo)
                }
            } else {
                let f = uniform(&mut rng, class.band_hz);
                (f, f)
            };
            let amp = ref_amp * 10f64.powf(uniform(&mut rng, spec.noise.snr_db) / 20.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            for (v, c) in x[start..start + len].iter_mut().zip(call(len, sr, f0, f1, amp, phase)) {
                *v += c;
            }
            events.push(LabelEvent {
                class_id: cid,
                onset_s: on,
                offset_s: off,
                focal: false,
            });
        }
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.class_id.cmp(&b.class_id)));
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    (AudioClip::new(clip_id(index), x, spec.sample_rate), events)
}

/// Builds the whole corpus in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let table = spec.class_table()?;
    let mut clips = Vec::with_capacity(spec.n_clips);
    let mut manifest = Manifest::new();
    for i in 0..spec.n_clips {
        let (clip, events) = synthesize_clip(spec, i);
        manifest.insert(clip.id.clone(), events);
        clips.push(clip);
    }
    Ok(SynthCorpus { clips, manifest, table })
}

/// Writes `clips/<id>.wav`, `labels.csv` and `classes.txt` under `dir`.
/// Returns the spec warnings.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<Vec<String>> {
    let warnings = spec.validate()?;
    let corpus = synthesize(spec)?;
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir)?;
    for clip in &corpus.clips {
        write_clip(&clip_dir.join(format!("{}.wav", clip.id)), clip)?;
    }
    save_manifest(&dir.join("labels.csv"), &corpus.manifest, &corpus.table)?;
    std::fs::write(dir.join("classes.txt"), corpus.table.to_text())?;
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn small(n_clips: usize) -> SynthSpec {
        SynthSpec {
            n_clips,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_rate_gives_noise_only() {
        let mut spec = small(4);
        spec.classes.iter_mut().for_each(|c| c.rate = 0.0);
        let c = synthesize(&spec).unwrap();
        assert!(c.manifest.values().all(|e| e.is_empty()));
        assert!(c.clips.iter().all(|c| c.samples.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn one_call_per_clip() {
        let spec = SynthSpec {
            n_clips: 30,
            classes: vec![SynthClass {
                name: "only".into(),
                band_hz: (900.0, 1000.0),
                duration_ms: (100.0, 200.0),
                rate: 1.0,
                chirp: false,
            }],
            ..SynthSpec::default()
        };
        let c = synthesize(&spec).unwrap();
        let rows: usize = c.manifest.values().map(|e| e.len()).sum();
        assert_eq!(rows, 30);
        for events in c.manifest.values() {
            for e in events {
                let d = e.offset_s - e.onset_s;
                assert!((0.0999..=0.2001).contains(&d), "{d}");
                assert!(e.onset_s >= 0.0 && e.offset_s <= spec.clip_s);
            }
        }
    }

    #[test]
    fn default_density_near_seven_percent() {
        let spec = SynthSpec::default();
        assert!((spec.expected_density() - 0.072).abs() < 0.005);
        let c = synthesize(&small(100)).unwrap();
        let labeled: f64 = c.manifest.values().flatten().map(|e| e.offset_s - e.onset_s).sum();
        let frac = labeled / (100.0 * spec.clip_s);
        assert!((0.05..0.095).contains(&frac), "{frac}");
    }

    #[test]
    fn regeneration_is_identical() {
        let a = synthesize(&small(5)).unwrap();
        let b = synthesize(&small(5)).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.manifest, b.manifest);
        let c = synthesize(&SynthSpec { seed: 1, ..small(5) }).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn files_are_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&small(3), d1.path()).unwrap();
        generate(&small(3), d2.path()).unwrap();
        for f in ["labels.csv", "classes.txt", "clips/clip0002.wav"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn identical_bands_warn() {
        let mut spec = small(1);
        spec.classes[1].band_hz = spec.classes[0].band_hz;
        assert_eq!(spec.validate().unwrap().len(), 1);
        spec.classes[0].band_hz = (100.0, 5000.0);
        assert!(spec.validate().is_err());
    }

    fn band_power(spec: &[Complex<f64>], sr: f64, (lo, hi): (f64, f64)) -> f64 {
        let n = spec.len();
        (0..n / 2)
            .filter(|&k| {
                let f = k as f64 * sr / n as f64;
                f >= lo && f < hi
            })
            .map(|k| spec[k].norm_sqr())
            .sum::<f64>()
    }

    #[test]
    fn labeled_spans_stand_out_in_band() {
        let spec = small(20);
        let c = synthesize(&spec).unwrap();
        let sr = spec.sample_rate as f64;
        let mut planner = FftPlanner::new();
        let mut checked = 0;
        for clip in &c.clips {
            for e in &c.manifest[&clip.id] {
                let a = (e.onset_s * sr).round() as usize;
                let b = (e.offset_s * sr).round() as usize;
                let mut buf: Vec<Complex<f64>> = clip.samples[a..b].iter().map(|&v| Complex::new(v, 0.0)).collect();
                planner.plan_fft_forward(buf.len()).process(&mut buf);
                let (lo, hi) = spec.classes[e.class_id].band_hz;
                let w = hi - lo;
                // Widen by the main-lobe half width of a Hann burst.
                let d = 2.0 / (e.offset_s - e.onset_s);
                let inband = band_power(&buf, sr, (lo - d, hi + d));
                let below = band_power(&buf, sr, (lo - d - w, lo - d));
                let above = band_power(&buf, sr, (hi + d, hi + d + w));
                let db = 10.0 * (inband / below.max(above)).log10();
                assert!(db >= 10.0, "{} event {:?}: {db:.1} dB", clip.id, e);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
