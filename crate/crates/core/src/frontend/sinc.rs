//! Parametrized band-pass sinc kernels and their frequency responses.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Frequency resolution that fixes the kernel length.
pub const SPECTRAL_RESOLUTION_HZ: f64 = 126.0;

/// Lowest band edge used by the Mel initialization.
pub const MEL_FLOOR_HZ: f64 = 30.0;

/// Gap kept between the lower cutoff and Nyquist.
const CUTOFF_MARGIN_HZ: f64 = 1.0;

/// A learnable band-pass filter, parametrized by its lower cutoff and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SincFilter {
    pub f_low: f64,
    pub bandwidth: f64,
}

impl SincFilter {
    pub fn new(f_low: f64, bandwidth: f64) -> Self {
        SincFilter { f_low, bandwidth }
    }

    /// Clamped `(f1, f2)` in Hz.
    pub fn cutoffs(&self, sample_rate: f64) -> (f64, f64) {
        let c = Cutoffs::new(self.f_low, self.bandwidth, sample_rate);
        (c.f1, c.f2)
    }

    pub fn kernel(&self, sample_rate: f64, len: usize) -> Vec<f64> {
        band_pass(self.f_low, self.bandwidth, sample_rate, len)
    }
}

/// `floor(sample_rate / 126)`, made odd by decrementing even results.
pub fn kernel_length(sample_rate: u32) -> Result<usize> {
    if (sample_rate as f64) < SPECTRAL_RESOLUTION_HZ {
        return Err(Error::arg(
            "sample_rate",
            format!("{sample_rate} Hz is below the 126 Hz resolution"),
        ));
    }
    let k = (sample_rate as f64 / SPECTRAL_RESOLUTION_HZ).floor() as usize;
    Ok(if k % 2 == 0 { k - 1 } else { k })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_filters + 2` Mel-spaced points between 30 Hz and Nyquist; filter `i`
/// spans points `i` to `i + 2`.
pub fn mel_initialize(n_filters: usize, sample_rate: u32) -> Result<Vec<SincFilter>> {
    if n_filters < 2 {
        return Err(Error::arg("n_filters", "need at least two filters"));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(MEL_FLOOR_HZ), hz_to_mel(nyquist));
    let n_points = n_filters + 2;
    let points: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_points - 1) as f64))
        .collect();
    Ok((0..n_filters)
        .map(|i| SincFilter::new(points[i], points[i + 2] - points[i]))
        .collect())
}

struct Cutoffs {
    f1: f64,
    f2: f64,
    df1_dlow: f64,
    df2_df1: f64,
    df2_dband: f64,
}

impl Cutoffs {
    fn new(f_low: f64, band: f64, sample_rate: f64) -> Self {
        let nyquist = sample_rate / 2.0;
        let (f1, df1_dlow) = if f_low.abs() < nyquist - CUTOFF_MARGIN_HZ {
            (f_low.abs(), sign(f_low))
        } else {
            (nyquist - CUTOFF_MARGIN_HZ, 0.0)
        };
        let (f2, df2_df1, df2_dband) = if f1 + band.abs() < nyquist {
            (f1 + band.abs(), 1.0, sign(band))
        } else {
            (nyquist, 0.0, 0.0)
        };
        Cutoffs {
            f1,
            f2,
            df1_dlow,
            df2_df1,
            df2_dband,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn hamming(i: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos()
}

/// Ideal low-pass impulse response `2ν·sinc(2πνm)` at normalized frequency `ν`.
fn low_pass(nu: f64, m: f64) -> f64 {
    if m == 0.0 {
        2.0 * nu
    } else {
        (2.0 * PI * nu * m).sin() / (PI * m)
    }
}

/// Hamming-windowed band-pass kernel with the center tap normalized to one.
///
/// A zero-width band yields the all-zero kernel.
pub fn band_pass(f_low: f64, band: f64, sample_rate: f64, len: usize) -> Vec<f64> {
    let c = Cutoffs::new(f_low, band, sample_rate);
    let (nu1, nu2) = (c.f1 / sample_rate, c.f2 / sample_rate);
    let width = nu2 - nu1;
    let mut kernel = vec![0.0; len];
    if width <= 1e-12 {
        return kernel;
    }
    let center = (len - 1) / 2;
    for i in 0..=center {
        let m = (center - i) as f64;
        let v = hamming(i, len) * (low_pass(nu2, m) - low_pass(nu1, m)) / (2.0 * width);
        kernel[i] = v;
        kernel[len - 1 - i] = v;
    }
    kernel
}

/// Derivatives of [`band_pass`] with respect to `f_low` and `band`.
pub fn band_pass_grad(f_low: f64, band: f64, sample_rate: f64, len: usize) -> (Vec<f64>, Vec<f64>) {
    let c = Cutoffs::new(f_low, band, sample_rate);
    let (nu1, nu2) = (c.f1 / sample_rate, c.f2 / sample_rate);
    let width = nu2 - nu1;
    let mut d_low = vec![0.0; len];
    let mut d_band = vec![0.0; len];
    if width <= 1e-12 {
        return (d_low, d_band);
    }
    let center = (len - 1) / 2;
    for i in 0..=center {
        let m = (center - i) as f64;
        let w = hamming(i, len);
        let n = low_pass(nu2, m) - low_pass(nu1, m);
        let c1 = (2.0 * PI * nu1 * m).cos();
        let c2 = (2.0 * PI * nu2 * m).cos();
        let dk_dnu2 = w * (c2 / width - n / (2.0 * width * width));
        let dk_dnu1 = w * (-c1 / width + n / (2.0 * width * width));
        let dk_df1 = (dk_dnu1 + dk_dnu2 * c.df2_df1) / sample_rate;
        let gl = dk_df1 * c.df1_dlow;
        let gb = dk_dnu2 / sample_rate * c.df2_dband;
        d_low[i] = gl;
        d_low[len - 1 - i] = gl;
        d_band[i] = gb;
        d_band[len - 1 - i] = gb;
    }
    (d_low, d_band)
}

/// Magnitude of the DTFT of a symmetric kernel at `freq_hz`.
pub fn magnitude_response(kernel: &[f64], sample_rate: f64, freq_hz: f64) -> f64 {
    let center = (kernel.len() - 1) as f64 / 2.0;
    let omega = 2.0 * PI * freq_hz / sample_rate;
    kernel
        .iter()
        .enumerate()
        .map(|(i, h)| h * (omega * (i as f64 - center)).cos())
        .sum::<f64>()
        .abs()
}

/// Area-normalized sum of the filters' magnitude responses on `n_bins`
/// frequencies evenly spaced over `[0, Nyquist]`. Returns `(freqs, response)`.
pub fn cumulative_frequency_response(
    filters: &[SincFilter],
    sample_rate: u32,
    kernel_len: usize,
    n_bins: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_bins < 16 {
        return Err(Error::arg("n_bins", "need at least 16 bins"));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let freqs: Vec<f64> = (0..n_bins)
        .map(|i| nyquist * i as f64 / (n_bins - 1) as f64)
        .collect();
    let mut response = vec![0.0; n_bins];
    for f in filters {
        let k = f.kernel(sr, kernel_len);
        for (r, &hz) in response.iter_mut().zip(&freqs) {
            *r += magnitude_response(&k, sr, hz);
        }
    }
    let area = trapezoid(&response, nyquist / (n_bins - 1) as f64);
    if area > 0.0 {
        response.iter_mut().for_each(|r| *r /= area);
    }
    Ok((freqs, response))
}

pub fn trapezoid(values: &[f64], dx: f64) -> f64 {
    values
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]) * dx)
        .sum()
}

/// Trapezoidal mass of a sampled curve between `lo` and `hi` Hz.
pub fn band_mass(freqs: &[f64], response: &[f64], lo: f64, hi: f64) -> f64 {
    freqs
        .windows(2)
        .zip(response.windows(2))
        .filter(|(f, _)| f[0] >= lo && f[1] <= hi)
        .map(|(f, r)| 0.5 * (r[0] + r[1]) * (f[1] - f[0]))
        .sum()
}
