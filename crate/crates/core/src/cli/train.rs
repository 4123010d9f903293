//! Training and evaluation runs that read a corpus directory and write
//! logs, checkpoints and reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::data::{crop, crop_targets, load_dataset, sample_crops, Dataset};
use super::RunOptions;
use crate::autograd::Mat;
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::frame_targets;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_clips, frame_binary_scores, ClipResult, EvalReport};
use crate::finetune::{finetune_step, predict_likelihoods, FinetuneState, FinetuneStats};
use crate::model::Architecture;
use crate::pretrain::{distill_step, PretrainState, StepStats};

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";

pub(super) struct Context {
    pub ds: Dataset,
    pub arch: Architecture,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Context {
    pub fn new(opts: &RunOptions) -> Result<Self> {
        let s = &opts.settings;
        let fe = s.frontend()?;
        let dir: PathBuf = s.get("data.dir")?;
        let ds = load_dataset(&dir, fe.sample_rate, opts.workers)?;
        let net = s.network(fe.out_dim(), ds.table.len())?;
        let arch = Architecture::new(fe, net)?;
        let (train, eval) = ds.split(s.get("data.folds")?, opts.fold, opts.seed)?;
        Ok(Context { ds, arch, train, eval })
    }

    pub fn crop_len(&self, opts: &RunOptions) -> Result<usize> {
        let crop_s: f64 = opts.settings.get("data.crop_s")?;
        let len = (crop_s * self.arch.frontend.config().sample_rate as f64).round() as usize;
        self.arch.frontend.check_length(len)?;
        Ok(len)
    }
}

/// Header line shared by every CSV report.
pub(super) fn csv_stamp(opts: &RunOptions) -> String {
    format!("# config_hash={} seed={}\n", opts.settings.hash(), opts.seed)
}

pub(super) fn write_run_file(opts: &RunOptions, command: &str, extra: serde_json::Value) -> Result<()> {
    let mut v = json!({
        "command": command,
        "config_hash": opts.settings.hash(),
        "seed": opts.seed,
        "fold": opts.fold,
        "labels_fraction": opts.labels_fraction,
        "workers": opts.workers,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    std::fs::write(opts.out.join(format!("{command}_run.json")), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

/// JSON-lines log. On resume, lines from `from_step` onward are dropped.
struct Log {
    w: BufWriter<File>,
}

impl Log {
    fn open(path: &Path, opts: &RunOptions, kind: &str, from_step: Option<u64>) -> Result<Self> {
        let mut kept = Vec::new();
        if let (Some(step), Ok(f)) = (from_step, File::open(path)) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                let v: serde_json::Value = serde_json::from_str(&line)?;
                match v.get("step").and_then(|s| s.as_u64()) {
                    Some(s) if s >= step => {}
                    _ => kept.push(line),
                }
            }
        }
        if kept.is_empty() {
            kept.push(serde_json::to_string(&json!({
                "kind": kind,
                "config_hash": opts.settings.hash(),
                "seed": opts.seed,
            }))?);
        }
        let mut w = BufWriter::new(File::create(path)?);
        for l in kept {
            writeln!(w, "{l}")?;
        }
        Ok(Log { w })
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, rec)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn checkpoint_of(opts: &RunOptions, kind: &str, step: u64, model: &crate::model::ModelState, opt: &std::collections::BTreeMap<String, crate::optim::AdamState>, rng: &rand_chacha::ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        step,
        config: opts.settings.canonical(),
        config_hash: opts.settings.hash(),
        seed: opts.seed,
        model: model.clone(),
        opt: opt.clone(),
        rng: rng.clone(),
    }
}

/// Periodic checkpoints kept on disk; older ones are removed.
pub const KEEP_PERIODIC: usize = 2;

fn save_periodic(opts: &RunOptions, kind: &str, ck: &Checkpoint) -> Result<()> {
    checkpoint::save(&opts.out.join(format!("{kind}_step{:06}.ckpt", ck.step)), ck)?;
    let prefix = format!("{kind}_step");
    let mut old: Vec<PathBuf> = std::fs::read_dir(&opts.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".ckpt"))
        })
        .collect();
    old.sort();
    let excess = old.len().saturating_sub(KEEP_PERIODIC);
    for p in &old[..excess] {
        std::fs::remove_file(p)?;
    }
    Ok(())
}

fn load_resume(path: &Path, arch: &Architecture, opts: &RunOptions, kind: &str) -> Result<Checkpoint> {
    let ck = checkpoint::load(path, arch)?;
    if ck.kind != kind {
        return Err(Error::State(format!("cannot resume {kind} from a {} checkpoint", ck.kind)));
    }
    if ck.config_hash != opts.settings.hash() || ck.seed != opts.seed {
        return Err(Error::Config(format!(
            "checkpoint was written with config {} seed {}, this run has {} seed {}",
            ck.config_hash,
            ck.seed,
            opts.settings.hash(),
            opts.seed
        )));
    }
    Ok(ck)
}

/// Self-supervised pretraining on the training folds. Returns the stats of
/// the steps run by this call.
pub fn run_pretrain(opts: &RunOptions) -> Result<Vec<StepStats>> {
    let ctx = Context::new(opts)?;
    let cfg = opts.settings.pretrain()?;
    cfg.validate()?;
    let len = ctx.crop_len(opts)?;
    let batch: usize = opts.settings.get("data.batch")?;
    let every: u64 = opts.settings.get("checkpoint_every")?;
    let log_every: u64 = opts.settings.get::<u64>("log_every")?.max(1);
    if ctx.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut state = match &opts.resume {
        Some(p) => {
            let ck = load_resume(p, &ctx.arch, opts, "pretrain")?;
            PretrainState {
                model: ck.model,
                opt: ck.opt,
                step: ck.step,
                rng: ck.rng,
            }
        }
        None => PretrainState::new(&ctx.arch, opts.seed),
    };
    std::fs::create_dir_all(&opts.out)?;
    let resumed = opts.resume.as_ref().map(|_| state.step);
    let mut log = Log::open(&opts.out.join(PRETRAIN_LOG), opts, "pretrain", resumed)?;
    let mut stats = Vec::new();
    while state.step < cfg.optim.total_steps {
        let picks = sample_crops(&ctx.ds, &ctx.train, batch, len, &mut state.rng);
        let waves: Vec<Vec<f64>> = picks.iter().map(|&(i, s)| crop(&ctx.ds.clips[i].samples, s, len)).collect();
        let s = match distill_step(&ctx.arch, &mut state, &waves, &cfg) {
            Ok(s) => s,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        if s.step % log_every == 0 || state.step == cfg.optim.total_steps {
            log.write(&s)?;
        }
        stats.push(s);
        if every > 0 && state.step % every == 0 && state.step < cfg.optim.total_steps {
            let ck = checkpoint_of(opts, "pretrain", state.step, &state.model, &state.opt, &state.rng);
            save_periodic(opts, "pretrain", &ck)?;
        }
    }
    log.flush()?;
    let ck = checkpoint_of(opts, "pretrain", state.step, &state.model, &state.opt, &state.rng);
    checkpoint::save(&opts.out.join(PRETRAIN_CKPT), &ck)?;
    write_run_file(opts, "pretrain", json!({ "steps": state.step }))?;
    Ok(stats)
}

/// Supervised finetuning on (a stratified fraction of) the training folds,
/// starting from `opts.init` when given and from random weights otherwise.
pub fn run_finetune(opts: &RunOptions) -> Result<Vec<FinetuneStats>> {
    let ctx = Context::new(opts)?;
    let cfg = opts.settings.finetune()?;
    cfg.validate()?;
    let len = ctx.crop_len(opts)?;
    let batch: usize = opts.settings.get("data.batch")?;
    let every: u64 = opts.settings.get("checkpoint_every")?;
    let log_every: u64 = opts.settings.get::<u64>("log_every")?.max(1);

    let pool: Vec<usize> = if opts.labels_fraction < 1.0 {
        let ids = crate::corpus::fewshot_subsample(&ctx.ds.label_sets(&ctx.train), opts.labels_fraction, opts.seed)?;
        ids.iter().filter_map(|id| ctx.ds.index_of(id)).collect()
    } else {
        ctx.train.clone()
    };
    if pool.is_empty() {
        return Err(Error::Config("no training clips selected".into()));
    }

    let mut state = match (&opts.resume, &opts.init) {
        (Some(p), _) => {
            let ck = load_resume(p, &ctx.arch, opts, "finetune")?;
            FinetuneState {
                model: ck.model,
                opt: ck.opt,
                step: ck.step,
                rng: ck.rng,
            }
        }
        (None, Some(p)) => {
            let ck = checkpoint::load(p, &ctx.arch)?;
            FinetuneState::from_pretrained(&ctx.arch, &ck.model, opts.seed)?
        }
        (None, None) => FinetuneState::from_scratch(&ctx.arch, opts.seed),
    };
    let fr = ctx.arch.frontend.config().effective_rate();
    let n_frames = ctx.arch.frontend.check_length(len)?;
    let sr = ctx.arch.frontend.config().sample_rate as f64;
    let crop_s = len as f64 / sr;

    std::fs::create_dir_all(&opts.out)?;
    let resumed = opts.resume.as_ref().map(|_| state.step);
    let mut log = Log::open(&opts.out.join(FINETUNE_LOG), opts, "finetune", resumed)?;
    let mut stats = Vec::new();
    while state.step < cfg.optim.total_steps {
        let picks = sample_crops(&ctx.ds, &pool, batch, len, &mut state.rng);
        let mut waves = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for &(i, s) in &picks {
            waves.push(crop(&ctx.ds.clips[i].samples, s, len));
            targets.push(crop_targets(&ctx.ds.events[i], s as f64 / sr, crop_s, fr, n_frames, &ctx.ds.table)?);
        }
        let s = match finetune_step(&ctx.arch, &mut state, &waves, &targets, &cfg) {
            Ok(s) => s,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        if s.step % log_every == 0 || state.step == cfg.optim.total_steps {
            log.write(&s)?;
        }
        stats.push(s);
        if every > 0 && state.step % every == 0 && state.step < cfg.optim.total_steps {
            let ck = checkpoint_of(opts, "finetune", state.step, &state.model, &state.opt, &state.rng);
            save_periodic(opts, "finetune", &ck)?;
        }
    }
    log.flush()?;
    let ck = checkpoint_of(opts, "finetune", state.step, &state.model, &state.opt, &state.rng);
    checkpoint::save(&opts.out.join(FINETUNE_CKPT), &ck)?;
    write_run_file(
        opts,
        "finetune",
        json!({ "steps": state.step, "train_clips": pool.len() }),
    )?;
    Ok(stats)
}

/// Scores a finetuned checkpoint on the held-out fold and writes
/// `metrics.csv`, `pr.csv`, `frame_scores.csv` and `summary.json`.
pub fn run_evaluate(opts: &RunOptions, checkpoint_path: &Path) -> Result<EvalReport> {
    let ctx = Context::new(opts)?;
    let ck = checkpoint::load(checkpoint_path, &ctx.arch)?;
    if ck.model.head.is_none() {
        return Err(Error::State("checkpoint has no classification head".into()));
    }
    if ctx.eval.is_empty() {
        return Err(Error::Metric("empty evaluation split".into()));
    }
    let k: usize = opts.settings.get("layer_average.K")?;
    let fr = ctx.arch.frontend.config().effective_rate();
    let thresholds = opts.settings.eval_thresholds()?;
    let cfg = opts.settings.eval()?;

    let mut liks: Vec<Mat> = Vec::with_capacity(ctx.eval.len());
    for &i in &ctx.eval {
        liks.push(predict_likelihoods(&ctx.arch, &ck.model, &ctx.ds.clips[i], k)?);
    }
    let clips: Vec<ClipResult> = liks
        .iter()
        .zip(&ctx.eval)
        .map(|(l, &i)| ClipResult {
            likelihoods: l,
            truth: &ctx.ds.events[i],
        })
        .collect();
    let report = evaluate_clips(&clips, &ctx.ds.table, fr, &thresholds, &cfg)?;

    // Frame scores over all eval frames pooled.
    let mut all_lik = Vec::new();
    let mut all_truth = Vec::new();
    for (l, &i) in liks.iter().zip(&ctx.eval) {
        let clip = &ctx.ds.clips[i];
        let t = frame_targets(&ctx.ds.events[i], clip.duration_s(), fr, &ctx.ds.table)?.fit_to(l.nrows());
        all_lik.push(l.view());
        all_truth.push(t.frames);
    }
    let lik = ndarray::concatenate(ndarray::Axis(0), &all_lik).map_err(|e| Error::Shape(e.to_string()))?;
    let views: Vec<_> = all_truth.iter().map(|t| t.view()).collect();
    let truth = crate::corpus::FrameTargets {
        frames: ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?,
        frame_rate: fr,
    };

    std::fs::create_dir_all(&opts.out)?;
    let stamp = csv_stamp(opts);
    let mut metrics = stamp.clone();
    metrics.push_str("class,ap,n_truth,n_tp,n_fp,n_fn\n");
    let mut pr = stamp.clone();
    pr.push_str("class,threshold,precision,recall\n");
    for c in &report.classes {
        let ap = c.ap.map(|a| a.to_string()).unwrap_or_default();
        metrics.push_str(&format!("{},{ap},{},{},{},{}\n", c.name, c.n_truth, c.n_tp, c.n_fp, c.n_fn));
        if let Some(curve) = &c.curve {
            for p in &curve.points {
                pr.push_str(&format!("{},{},{},{}\n", c.name, p.threshold, p.precision, p.recall));
            }
        }
    }
    let mut frames = stamp;
    frames.push_str("threshold,precision,recall,f1\n");
    for &th in &thresholds {
        let (p, r, f1) = frame_binary_scores(&lik, &truth, th)?;
        frames.push_str(&format!("{th},{p},{r},{f1}\n"));
    }
    std::fs::write(opts.out.join("metrics.csv"), metrics)?;
    std::fs::write(opts.out.join("pr.csv"), pr)?;
    std::fs::write(opts.out.join("frame_scores.csv"), frames)?;
    std::fs::write(opts.out.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_run_file(
        opts,
        "evaluate",
        json!({ "checkpoint_step": ck.step, "eval_clips": ctx.eval.len() }),
    )?;
    Ok(report)
}
