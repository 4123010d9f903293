use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads a mono 16-bit PCM WAV file; samples are scaled by `1/32768`.
pub fn load_clip(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "unsupported WAV encoding".into(),
        },
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("{} channels, expected mono", spec.channels),
        });
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!(
                "{:?} {}-bit samples, expected 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if samples.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "no samples".into(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        id,
        samples,
        sample_rate: spec.sample_rate,
        source_path: path.display().to_string(),
    })
}

/// Writes a clip as mono 16-bit PCM, rounding and saturating to `i16`.
pub fn write_clip(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

fn io_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, values: &[i32]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &v in values {
            match spec.bits_per_sample {
                16 => w.write_sample(v as i16).unwrap(),
                _ => w.write_sample(v).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn mono16(rate: u32) -> WavSpec {
        WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn ten_seconds_at_8khz() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, mono16(8000), &vec![0; 80_000]);
        let clip = load_clip(&p).unwrap();
        assert_eq!(clip.samples.len(), 80_000);
        assert_eq!(clip.sample_rate, 8000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.id, "a");
        assert_eq!(clip.duration_s(), 10.0);
    }

    #[test]
    fn extreme_values_scale_into_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        write_raw(&p, mono16(8000), &[-32768, 32767, 16384]);
        let clip = load_clip(&p).unwrap();
        assert_eq!(clip.samples, vec![-1.0, 32767.0 / 32768.0, 0.5]);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            ..mono16(8000)
        };
        write_raw(&p, spec, &[1, 2, 3, 4]);
        assert!(matches!(load_clip(&p), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn pcm24_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            bits_per_sample: 24,
            ..mono16(8000)
        };
        write_raw(&p, spec, &[1, 2, 3, 4]);
        assert!(matches!(load_clip(&p), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn garbage_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.wav");
        std::fs::write(&p, b"RIFX\x00\x00\x00\x00WAVEjunkjunkjunk").unwrap();
        assert!(matches!(load_clip(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn write_then_load_is_lossless_on_the_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let samples: Vec<f64> = (-50..50).map(|v| v as f64 * 300.0 / 32768.0).collect();
        write_clip(&p, &AudioClip::new("r", samples.clone(), 8000)).unwrap();
        assert_eq!(load_clip(&p).unwrap().samples, samples);
    }
}
