//! Diagnostics: mask statistics, filterbank frequency response, attention maps.

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::data::crop;
use super::train::{csv_stamp, write_run_file, Context};
use super::RunOptions;
use crate::autograd::Mat;
use crate::checkpoint;
use crate::corpus::AudioClip;
use crate::error::{Error, Result};
use crate::frontend::{band_mass, cumulative_frequency_response, Frontend};
use crate::masking::{mask_statistics, sample_mask, MaskConfig, MaskStats};
use crate::network::{transformer_forward, Mode};

pub const CFR_BINS: usize = 801;

/// Samples one mask plan over `frames` frames and writes `mask_stats.json`
/// and `mask_runs.csv`.
pub fn run_mask_stats(opts: &RunOptions, frames: usize) -> Result<MaskStats> {
    let fe = opts.settings.frontend()?;
    let cfg = MaskConfig {
        seed: opts.seed,
        ..opts.settings.mask()?
    };
    let plan = sample_mask(frames, &cfg)?;
    let frame_ms = 1000.0 / fe.effective_rate();
    let stats = mask_statistics(&plan, frame_ms);
    std::fs::create_dir_all(&opts.out)?;
    let summary = json!({
        "config_hash": opts.settings.hash(),
        "seed": opts.seed,
        "frames": frames,
        "p": cfg.p,
        "span": cfg.span,
        "clones": cfg.clones,
        "coverage": stats.coverage,
        "expected_coverage": cfg.expected_coverage(),
        "union_coverage": stats.union_coverage,
        "mode_ms": stats.mode_ms,
    });
    std::fs::write(opts.out.join("mask_stats.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut runs = csv_stamp(opts);
    runs.push_str("run_length_frames,count\n");
    for (len, n) in &stats.run_lengths {
        runs.push_str(&format!("{len},{n}\n"));
    }
    std::fs::write(opts.out.join("mask_runs.csv"), runs)?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CfrReport {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub mel_mass: f64,
    pub trained_mass: f64,
}

/// Compares the filterbank's cumulative frequency response before (Mel
/// initialization) and after training. Writes `cfr.csv` and `cfr.json`.
pub fn run_cfr(opts: &RunOptions, checkpoint_path: &Path, band: (f64, f64)) -> Result<CfrReport> {
    let ctx = Context::new(opts)?;
    let ck = checkpoint::load(checkpoint_path, &ctx.arch)?;
    let fe: &Frontend = &ctx.arch.frontend;
    let sr = fe.config().sample_rate;
    let init = ctx.arch.template("frontend").expect("frontend group");
    let (freqs, mel) = cumulative_frequency_response(&fe.filters(&init), sr, fe.kernel_len(), CFR_BINS)?;
    let (_, trained) = cumulative_frequency_response(&fe.filters(&ck.model.frontend), sr, fe.kernel_len(), CFR_BINS)?;
    let report = CfrReport {
        band_lo_hz: band.0,
        band_hi_hz: band.1,
        mel_mass: band_mass(&freqs, &mel, band.0, band.1),
        trained_mass: band_mass(&freqs, &trained, band.0, band.1),
    };
    std::fs::create_dir_all(&opts.out)?;
    for (name, resp) in [("cfr.csv", &trained), ("cfr_mel.csv", &mel)] {
        let mut csv = csv_stamp(opts);
        csv.push_str("freq_hz,response\n");
        for (f, r) in freqs.iter().zip(resp) {
            csv.push_str(&format!("{f},{r}\n"));
        }
        std::fs::write(opts.out.join(name), csv)?;
    }
    let mut v = serde_json::to_value(report)?;
    v["config_hash"] = json!(opts.settings.hash());
    v["seed"] = json!(opts.seed);
    std::fs::write(opts.out.join("cfr.json"), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionReport {
    pub maps: usize,
    pub max_row_sum_error: f64,
    pub mean_diagonal: f64,
    pub mean_off_diagonal: f64,
}

pub fn diagonal_means(m: &Mat) -> (f64, f64) {
    let n = m.nrows();
    let diag: f64 = (0..n).map(|i| m[[i, i]]).sum();
    let total = m.sum();
    let off = if n > 1 {
        (total - diag) / (n * n - n) as f64
    } else {
        0.0
    };
    (diag / n as f64, off)
}

/// Attention maps of the transformer on the first crop of up to `n_clips`
/// held-out clips. Writes every per-head map to `attention.bin` and the
/// global average to `attention.csv`.
pub fn run_attention(opts: &RunOptions, checkpoint_path: &Path, n_clips: usize) -> Result<AttentionReport> {
    let ctx = Context::new(opts)?;
    let ck = checkpoint::load(checkpoint_path, &ctx.arch)?;
    let len = ctx.crop_len(opts)?;
    let sr = ctx.arch.frontend.config().sample_rate;
    let chosen: Vec<usize> = ctx.eval.iter().copied().take(n_clips).collect();
    if chosen.is_empty() {
        return Err(Error::Metric("no held-out clips for attention maps".into()));
    }
    let mut global: Option<Mat> = None;
    let mut max_err: f64 = 0.0;
    let mut maps = 0;
    let mut arrays = Vec::new();
    for &i in &chosen {
        let clip = AudioClip::new(ctx.ds.clips[i].id.clone(), crop(&ctx.ds.clips[i].samples, 0, len), sr);
        let feat = ctx.arch.frontend.features(&ck.model.frontend, &clip)?;
        let (_, att) = transformer_forward(&ctx.arch.encoder, &ck.model.student, &feat, &mut Mode::Eval, true)?;
        let att = att.expect("collected");
        for (l, layer) in att.maps.iter().enumerate() {
            for (h, m) in layer.iter().enumerate() {
                arrays.push((format!("{}/layer{l}/head{h}", ctx.ds.clips[i].id), m.clone()));
            }
        }
        for m in att.maps.iter().flatten() {
            maps += 1;
            for row in m.rows() {
                max_err = max_err.max((row.sum() - 1.0).abs());
            }
        }
        match &mut global {
            Some(g) => *g += &att.averaged,
            None => global = Some(att.averaged),
        }
    }
    let global = global.expect("at least one clip") / chosen.len() as f64;
    let (mean_diagonal, mean_off_diagonal) = diagonal_means(&global);
    let report = AttentionReport {
        maps,
        max_row_sum_error: max_err,
        mean_diagonal,
        mean_off_diagonal,
    };
    std::fs::create_dir_all(&opts.out)?;
    let mut csv = csv_stamp(opts);
    for row in global.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    std::fs::write(opts.out.join("attention.csv"), csv)?;
    arrays.push(("global".to_string(), global));
    let meta = json!({"config_hash": opts.settings.hash(), "seed": opts.seed});
    std::fs::write(opts.out.join("attention.bin"), checkpoint::bundle_to_bytes(meta, &arrays)?)?;
    write_run_file(opts, "attention", serde_json::to_value(report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_means_of_identity_and_uniform() {
        let (d, o) = diagonal_means(&Mat::eye(4));
        assert_eq!((d, o), (1.0, 0.0));
        let (d, o) = diagonal_means(&Mat::from_elem((5, 5), 0.2));
        assert!((d - 0.2).abs() < 1e-15 && (o - 0.2).abs() < 1e-15);
    }
}
