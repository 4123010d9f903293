//! Between-classes mixing of waveforms weighted by A-weighted levels.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Level reported for silent input.
pub const LEVEL_FLOOR_DB: f64 = -120.0;
pub const DEFAULT_WINDOW_S: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub input_strength: f64,
    pub target_strength: f64,
    /// Probability that a sample in the batch is mixed.
    pub token_prob: f64,
    pub window_s: f64,
}

impl MixConfig {
    pub fn off() -> Self {
        MixConfig {
            input_strength: 0.0,
            target_strength: 0.0,
            token_prob: 0.0,
            window_s: DEFAULT_WINDOW_S,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bcl.input_strength", self.input_strength),
            ("bcl.target_strength", self.target_strength),
            ("bcl.token_prob", self.token_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if !(self.window_s > 0.0) {
            return Err(Error::Config(format!("bcl.window_s = {} must be positive", self.window_s)));
        }
        Ok(())
    }
}

/// IEC 61672 A-weighting gain in dB.
pub fn a_weighting_db(f: f64) -> f64 {
    if f <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let f2 = f * f;
    let ra = 12194.0f64.powi(2) * f2 * f2
        / ((f2 + 20.6f64.powi(2))
            * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
            * (f2 + 12194.0f64.powi(2)));
    20.0 * ra.log10() + 2.0
}

/// Maximum A-weighted RMS level (dB re full scale amplitude 1) over
/// consecutive non-overlapping windows. A trailing partial window is ignored
/// unless the segment is shorter than one window.
pub fn a_weighted_level(segment: &[f64], sample_rate: u32, window_s: f64) -> Result<f64> {
    if segment.is_empty() {
        return Err(Error::arg("segment", "empty"));
    }
    if !(window_s > 0.0) || sample_rate == 0 {
        return Err(Error::arg("window_s", "window and sample rate must be positive"));
    }
    let win = ((window_s * sample_rate as f64).round() as usize).clamp(1, segment.len());
    let gains: Vec<f64> = (0..win)
        .map(|k| {
            let bin = k.min(win - k) as f64;
            let f = bin * sample_rate as f64 / win as f64;
            10f64.powf(a_weighting_db(f) / 20.0)
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut best = 0.0f64;
    for chunk in segment.chunks_exact(win) {
        for (b, &x) in buf.iter_mut().zip(chunk) {
            *b = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        // Parseval: mean square = Σ|X_k|² / N².
        let energy: f64 = buf
            .iter()
            .zip(&gains)
            .map(|(c, g)| c.norm_sqr() * g * g)
            .sum();
        best = best.max(energy / (win * win) as f64);
    }
    if best <= 0.0 {
        return Ok(LEVEL_FLOOR_DB);
    }
    Ok((10.0 * best.log10()).max(LEVEL_FLOOR_DB))
}

/// Level-aware mixing of two equal-length waveforms with ratio `r ∈ (0, 1]`.
pub fn bc_mix(x1: &[f64], x2: &[f64], r: f64, g1: f64, g2: f64) -> Result<Vec<f64>> {
    if x1.len() != x2.len() {
        return Err(Error::Shape(format!("mixing {} and {} samples", x1.len(), x2.len())));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::arg("r", format!("{r} not in (0, 1]")));
    }
    let p = 1.0 / (1.0 + 10f64.powf((g1 - g2) / 20.0) * (1.0 - r) / r);
    let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
    Ok(x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (p * a + (1.0 - p) * b) / norm)
        .collect())
}

/// Soft targets `(1−s)·y1 + s·(r·y1 + (1−r)·y2)`.
pub fn mix_targets(y1: &Mat, y2: &Mat, r: f64, strength: f64) -> Result<Mat> {
    if y1.dim() != y2.dim() {
        return Err(Error::Shape(format!("targets {:?} vs {:?}", y1.dim(), y2.dim())));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::arg("strength", format!("{strength} not in [0, 1]")));
    }
    let a = 1.0 - strength * (1.0 - r);
    Ok(y1 * a + y2 * (1.0 - a))
}

/// Mixes each sample, with probability `token_prob`, with a random other
/// sample of the batch. `r ~ U(0,1)` is shrunk toward 1 by the strengths:
/// the input uses `1 − input_strength·(1−r)` and the targets use
/// `target_strength`. Levels come from the maximal A-weighted window of each
/// full sample.
pub fn mix_batch<R: Rng>(
    waves: &[Vec<f64>],
    targets: Option<&[Mat]>,
    sample_rate: u32,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Option<Vec<Mat>>)> {
    let n = waves.len();
    let mut out_w = waves.to_vec();
    let mut out_t = targets.map(|t| t.to_vec());
    if n < 2 || cfg.token_prob == 0.0 {
        return Ok((out_w, out_t));
    }
    let levels = waves
        .iter()
        .map(|w| a_weighted_level(w, sample_rate, cfg.window_s))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..n {
        if rng.random::<f64>() >= cfg.token_prob {
            continue;
        }
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let r: f64 = rng.random_range(f64::EPSILON..1.0);
        let r_in = 1.0 - cfg.input_strength * (1.0 - r);
        out_w[i] = bc_mix(&waves[i], &waves[j], r_in, levels[i], levels[j])?;
        if let (Some(src), Some(dst)) = (targets, out_t.as_mut()) {
            dst[i] = mix_targets(&src[i], &src[j], r, cfg.target_strength)?;
        }
    }
    Ok((out_w, out_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(f: f64, sr: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / sr as f64).sin()).collect()
    }

    fn rms_db(x: &[f64]) -> f64 {
        10.0 * (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).log10()
    }

    #[test]
    fn a_curve_reference_points() {
        assert!(a_weighting_db(1000.0).abs() < 0.01);
        assert!((a_weighting_db(100.0) + 19.1).abs() < 0.05);
    }

    #[test]
    fn one_khz_tone_level_is_unweighted_level() {
        let x = tone(1000.0, 8000, 8000, 1.0);
        let level = a_weighted_level(&x, 8000, 0.05).unwrap();
        assert!((level - rms_db(&x)).abs() < 0.1, "{level}");
    }

    #[test]
    fn hundred_hz_is_about_19_db_lower() {
        let lo = a_weighted_level(&tone(100.0, 8000, 8000, 0.5), 8000, 0.05).unwrap();
        let hi = a_weighted_level(&tone(1000.0, 8000, 8000, 0.5), 8000, 0.05).unwrap();
        let expected = a_weighting_db(100.0) - a_weighting_db(1000.0);
        assert!((lo - hi - expected).abs() < 0.1, "{} vs {expected}", lo - hi);
    }

    #[test]
    fn silence_hits_the_floor() {
        assert_eq!(a_weighted_level(&[0.0; 800], 8000, 0.05).unwrap(), LEVEL_FLOOR_DB);
    }

    #[test]
    fn loudest_window_wins() {
        let mut x = vec![0.0; 4000];
        x.extend(tone(1000.0, 8000, 400, 1.0));
        let level = a_weighted_level(&x, 8000, 0.05).unwrap();
        assert!((level - rms_db(&tone(1000.0, 8000, 400, 1.0))).abs() < 0.1);
    }

    #[test]
    fn mix_limits_and_equal_gain() {
        let x1 = vec![0.3, -0.2, 0.1];
        let x2 = vec![-0.5, 0.4, 0.9];
        assert_eq!(bc_mix(&x1, &x2, 1.0, -10.0, -3.0).unwrap(), x1);
        let same = bc_mix(&x1, &x1, 0.5, -6.0, -6.0).unwrap();
        for (a, b) in same.iter().zip(&x1) {
            assert!((a - b / 0.5f64.sqrt()).abs() < 1e-12);
        }
        for r in [0.1, 0.37, 0.8] {
            let m = bc_mix(&[1.0], &[0.0], r, -4.0, -4.0).unwrap()[0];
            let norm = (r * r + (1.0 - r) * (1.0 - r)).sqrt();
            assert!((m * norm - r).abs() < 1e-12);
        }
        assert!(matches!(bc_mix(&x1, &x2[..2], 0.5, 0.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn target_mixing_cases() {
        let y1 = Mat::from_elem((2, 3), 1.0);
        let y2 = Mat::zeros((2, 3));
        assert_eq!(mix_targets(&y1, &y2, 0.3, 0.0).unwrap(), y1);
        assert_eq!(mix_targets(&y1, &y2, 1.0, 1.0).unwrap(), y1);
        assert!(mix_targets(&y1, &y2, 0.5, 0.5).unwrap().iter().all(|&v| v == 0.75));
        assert!(mix_targets(&y1, &Mat::zeros((1, 3)), 0.5, 0.5).is_err());
    }

    #[test]
    fn zero_token_prob_is_identity() {
        let waves = vec![tone(500.0, 8000, 800, 0.3), tone(900.0, 8000, 800, 0.2)];
        let t = vec![Mat::from_elem((4, 2), 1.0), Mat::zeros((4, 2))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MixConfig {
            input_strength: 0.5,
            target_strength: 0.5,
            token_prob: 0.0,
            window_s: 0.05,
        };
        let (w, tt) = mix_batch(&waves, Some(&t), 8000, &cfg, &mut rng).unwrap();
        assert_eq!(w, waves);
        assert_eq!(tt.unwrap(), t);
    }

    #[test]
    fn full_token_prob_mixes_everything() {
        let waves = vec![tone(500.0, 8000, 800, 0.3), tone(900.0, 8000, 800, 0.2)];
        let t = vec![Mat::from_elem((4, 2), 1.0), Mat::zeros((4, 2))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MixConfig {
            input_strength: 0.5,
            target_strength: 0.5,
            token_prob: 1.0,
            window_s: 0.05,
        };
        let (w, tt) = mix_batch(&waves, Some(&t), 8000, &cfg, &mut rng).unwrap();
        assert_ne!(w[0], waves[0]);
        let tt = tt.unwrap();
        assert!(tt[0].iter().all(|&v| (0.5..1.0).contains(&v)));
        assert!(tt[1].iter().all(|&v| (0.0..=0.5).contains(&v)));
    }

    proptest! {
        #[test]
        fn mixing_is_scale_consistent(
            x1 in proptest::collection::vec(-1.0f64..1.0, 8),
            x2 in proptest::collection::vec(-1.0f64..1.0, 8),
            r in 0.01f64..1.0, g1 in -60.0f64..0.0, g2 in -60.0f64..0.0, a in 0.01f64..10.0,
        ) {
            let base = bc_mix(&x1, &x2, r, g1, g2).unwrap();
            let s1: Vec<f64> = x1.iter().map(|v| a * v).collect();
            let s2: Vec<f64> = x2.iter().map(|v| a * v).collect();
            let shift = 20.0 * a.log10();
            let scaled = bc_mix(&s1, &s2, r, g1 + shift, g2 + shift).unwrap();
            for (s, b) in scaled.iter().zip(&base) {
                prop_assert!((s - a * b).abs() < 1e-9 * (1.0 + a));
            }
        }

        #[test]
        fn mixed_targets_stay_in_unit_interval(
            y1 in proptest::collection::vec(0.0f64..=1.0, 6),
            y2 in proptest::collection::vec(0.0f64..=1.0, 6),
            r in 0.0f64..=1.0, s in 0.0f64..=1.0,
        ) {
            let a = Mat::from_shape_vec((2, 3), y1).unwrap();
            let b = Mat::from_shape_vec((2, 3), y2).unwrap();
            let m = mix_targets(&a, &b, r, s).unwrap();
            prop_assert!(m.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
