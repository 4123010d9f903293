use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 14.769_656_459_379_492;
/// Low-pass cutoff as a fraction of the lower Nyquist frequency.
pub const ROLLOFF: f64 = 0.947_593_716_739_959_6;
/// Total duration of the interpolation filter.
const FILTER_SUPPORT_S: f64 = 0.008;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc polyphase resampling.
///
/// The output has `round(len · target / source)` samples. Resampling to the
/// source rate returns the samples unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::arg("target_rate", "must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let source = clip.sample_rate as u64;
    let target = target_rate as u64;
    let g = gcd(source, target);
    let (up, down) = (target / g, source / g);

    // Cutoff in cycles per input sample, support radius in input samples.
    let cutoff = 0.5 * ROLLOFF * (target as f64 / source as f64).min(1.0);
    let radius = FILTER_SUPPORT_S / 2.0 * source as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let tap = |t: f64| -> f64 {
        let x = t / radius;
        if x.abs() > 1.0 {
            return 0.0;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0_beta;
        let arg = 2.0 * cutoff * t;
        let sinc = if arg == 0.0 {
            1.0
        } else {
            (PI * arg).sin() / (PI * arg)
        };
        2.0 * cutoff * sinc * window
    };

    // One kernel per output phase.
    let lo = -(radius.ceil() as i64) - 1;
    let hi = radius.ceil() as i64 + 1;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = ((phase * down) % up) as f64 / up as f64;
            (lo..=hi).map(|j| tap(j as f64 - frac)).collect()
        })
        .collect();

    let n_in = clip.samples.len() as u64;
    let n_out = ((n_in * target) as f64 / source as f64).round() as u64;
    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for n in 0..n_out {
        let base = (n * down / up) as i64;
        let kernel = &phases[(n % up) as usize];
        let mut acc = 0.0;
        for (k, &h) in kernel.iter().enumerate() {
            let idx = base + lo + k as i64;
            if idx >= 0 && (idx as u64) < n_in {
                acc += h * x[idx as usize];
            }
        }
        out.push(acc);
    }
    Ok(AudioClip {
        id: clip.id.clone(),
        samples: out,
        sample_rate: target_rate,
        source_path: clip.source_path.clone(),
    })
}
