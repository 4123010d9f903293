//! Mean-teacher self-distillation.
//!
//! The student sees only unmasked frames; a convolutional decoder then
//! regresses, at the masked positions, layer-averaged and instance-normalized
//! representations that an EMA copy of the encoder computes from the full
//! sequence. One teacher pass per clip serves all mask clones.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_batch, MixConfig};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskConfig};
use crate::model::{Architecture, ModelState};
use crate::network::{transformer_forward, Mode};
use crate::optim::{clip_global_norm, cosine_lr, AdamState, OptimConfig};
use crate::params::{Bound, ParamSet};

/// Variance floor of the per-layer instance norm.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| (0.0..=1.0).contains(&t);
        if !ok(self.tau_start) || !ok(self.tau_end) || self.tau_end < self.tau_start {
            return Err(Error::Config(format!(
                "need 0 ≤ tau_start ≤ tau_end ≤ 1, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

/// Linear anneal from `tau_start` to `tau_end`, constant afterwards.
pub fn tau_schedule(step: u64, cfg: &EmaConfig) -> f64 {
    if step >= cfg.anneal_steps {
        return cfg.tau_end;
    }
    let f = step as f64 / cfg.anneal_steps as f64;
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * f
}

/// `θ_T ← τ·θ_T + (1−τ)·θ_S`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::arg("tau", format!("{tau} not in [0, 1]")));
    }
    teacher.check_same_structure(student)?;
    for (t, s) in teacher.values_mut().iter_mut().zip(student.values()) {
        t.zip_mut_with(s, |t, &s| *t = tau * *t + (1.0 - tau) * s);
    }
    Ok(())
}

/// Normalizes every column over time to zero mean and unit variance.
pub fn instance_norm_time(x: &Mat) -> Mat {
    let t = x.nrows().max(1) as f64;
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / t;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        col.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Instance-normalizes each layer output and averages the top `k` layers
/// (`k = 0` means all).
pub fn targets_from_layers(per_layer: &[Mat], k: usize) -> Result<Mat> {
    let n = per_layer.len();
    let k = if k == 0 { n } else { k };
    if k == 0 || k > n {
        return Err(Error::arg("target_layers", format!("{k} of {n} layers")));
    }
    let mut acc = instance_norm_time(&per_layer[n - k]);
    for m in &per_layer[n - k + 1..] {
        acc += &instance_norm_time(m);
    }
    Ok(acc / k as f64)
}

/// Teacher targets for one clip from detached frontend features.
pub fn teacher_targets(arch: &Architecture, teacher: &ParamSet, features: &Mat, k: usize) -> Result<Mat> {
    let (out, _) = transformer_forward(&arch.encoder, teacher, features, &mut Mode::Eval, false)?;
    targets_from_layers(&out.per_layer, k)
}

/// Mean over dimensions of the per-dimension standard deviation across all
/// rows of all target matrices.
pub fn collapse_monitor(targets: &[Mat]) -> Result<f64> {
    let rows: usize = targets.iter().map(|t| t.nrows()).sum();
    let Some(first) = targets.first() else {
        return Err(Error::arg("targets", "empty batch"));
    };
    if rows == 0 {
        return Err(Error::arg("targets", "no frames"));
    }
    let d = first.ncols();
    let mut mean = vec![0.0; d];
    for t in targets {
        for row in t.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; d];
    for t in targets {
        for row in t.rows() {
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(row) {
                *s += (v - m) * (v - m);
            }
        }
    }
    Ok(var.iter().map(|s| (s / rows as f64).sqrt()).sum::<f64>() / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mask: MaskConfig,
    pub ema: EmaConfig,
    pub optim: OptimConfig,
    pub mix: MixConfig,
    /// Teacher layers averaged into the target; 0 means all.
    pub target_layers: usize,
    /// Restrict the regression loss to masked frames.
    pub masked_loss_only: bool,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.ema.validate()?;
        self.optim.validate()?;
        self.mix.validate()
    }
}

/// Everything that changes during pretraining.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub model: ModelState,
    pub opt: BTreeMap<String, AdamState>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl PretrainState {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = arch.init_pretrain(&mut rng);
        let opt = trained_groups(&model)
            .into_iter()
            .map(|(name, p)| (name.to_string(), AdamState::new(p)))
            .collect();
        PretrainState {
            model,
            opt,
            step: 0,
            rng,
        }
    }
}

fn trained_groups(m: &ModelState) -> Vec<(&'static str, &ParamSet)> {
    m.groups()
        .into_iter()
        .filter(|(n, _)| matches!(*n, "frontend" | "student" | "decoder"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub collapse: f64,
    pub grad_norm: f64,
    pub teacher_calls: usize,
}

/// Loss graph of one distillation batch.
pub struct DistillGraph {
    pub graph: Graph,
    pub loss: Var,
    pub frontend: Bound,
    pub student: Bound,
    pub decoder: Bound,
    pub targets: Vec<Mat>,
    pub teacher_calls: usize,
}

/// Records the distillation loss for `waves`, drawing masks, noise and
/// dropout from `rng`.
pub fn distill_graph(
    arch: &Architecture,
    model: &ModelState,
    waves: &[Vec<f64>],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DistillGraph> {
    let teacher = model
        .teacher
        .as_ref()
        .ok_or_else(|| Error::State("pretraining needs a teacher".into()))?;
    let decoder = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::State("pretraining needs a decoder".into()))?;
    if waves.is_empty() {
        return Err(Error::arg("batch", "empty"));
    }
    let mut g = Graph::new();
    let pf = model.frontend.bind(&mut g, true);
    let ps = model.student.bind(&mut g, true);
    let pd = decoder.bind(&mut g, true);
    let mut losses = Vec::new();
    let mut all_targets = Vec::with_capacity(waves.len());
    let mut teacher_calls = 0;
    let d = arch.network().embed_dim;

    for wave in waves {
        let feat = arch.frontend.forward(&mut g, &pf, wave)?;
        let t = g.value(feat).nrows();
        let target = teacher_targets(arch, teacher, g.value(feat), cfg.target_layers)?;
        teacher_calls += 1;
        let x = arch.encoder.embed(&mut g, &ps, feat);
        let mask_cfg = MaskConfig {
            seed: rng.random(),
            ..cfg.mask
        };
        let plan = sample_mask(t, &mask_cfg)?;
        for c in 0..plan.clones() {
            let mask = plan.clone_mask(c);
            let kept: Vec<usize> = (0..t).filter(|&i| !mask[i]).collect();
            if kept.is_empty() {
                return Err(Error::DegenerateInput("every frame is masked".into()));
            }
            let masked: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
            let student_in = g.gather_rows(x, &kept);
            let run = arch.encoder.blocks(&mut g, &ps, student_in, &mut Mode::Train(rng));
            let noise = crate::masking::fill_masked_noise(&Mat::zeros((t, d)), &mask, rng.random())?;
            let full = g.scatter_rows(run.output, &kept, noise);
            let pred = arch.decoder.forward(&mut g, &pd, full);
            let rows: Vec<usize> = if cfg.masked_loss_only {
                masked
            } else {
                (0..t).collect()
            };
            losses.push(g.masked_mse(pred, target.clone(), &rows));
        }
        all_targets.push(target);
    }
    let loss = g.mean(&losses);
    Ok(DistillGraph {
        graph: g,
        loss,
        frontend: pf,
        student: ps,
        decoder: pd,
        targets: all_targets,
        teacher_calls,
    })
}

/// One optimizer step of self-distillation followed by the EMA update.
pub fn distill_step(
    arch: &Architecture,
    state: &mut PretrainState,
    waves: &[Vec<f64>],
    cfg: &PretrainConfig,
) -> Result<StepStats> {
    let step = state.step;
    let sr = arch.frontend.config().sample_rate;
    let (mixed, _) = mix_batch(waves, None, sr, &cfg.mix, &mut state.rng)?;
    let dg = distill_graph(arch, &state.model, &mixed, cfg, &mut state.rng)?;
    let loss = dg.graph.scalar(dg.loss);
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let collapse = collapse_monitor(&dg.targets)?;
    let mut grads = dg.graph.backward(dg.loss);
    let decoder = state.model.decoder.as_ref().expect("checked in distill_graph");
    let mut groups = vec![
        dg.frontend.grads(&mut grads, &state.model.frontend),
        dg.student.grads(&mut grads, &state.model.student),
        dg.decoder.grads(&mut grads, decoder),
    ];
    drop(dg);
    let grad_norm = clip_global_norm(&mut groups, cfg.optim.clip_norm);
    let lr = cosine_lr(step + 1, &cfg.optim);
    for (name, g) in ["frontend", "student", "decoder"].into_iter().zip(&groups) {
        let params = state.model.group_mut(name).expect("trained group");
        state
            .opt
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no optimizer state for `{name}`")))?
            .update(params, g, lr, &cfg.optim);
    }
    let tau = tau_schedule(step, &cfg.ema);
    let teacher = state.model.teacher.as_mut().expect("checked in distill_graph");
    ema_update(teacher, &state.model.student, tau)?;
    state.step += 1;
    Ok(StepStats {
        step,
        loss,
        lr,
        tau,
        collapse,
        grad_norm,
        teacher_calls: waves.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{ConvLayerSpec, FrontendConfig};
    use crate::network::{DecoderConfig, NetworkConfig};
    use crate::params::normal_init;

    fn tiny_arch() -> Architecture {
        let fe = FrontendConfig {
            conv_layers: vec![ConvLayerSpec::new(4, 10, 5), ConvLayerSpec::new(4, 3, 2)],
            ..FrontendConfig::narrowed(4, 4)
        };
        let net = NetworkConfig {
            input_dim: 4,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            layerdrop: 0.0,
            pos_kernel: 3,
            pos_groups: 2,
            decoder: DecoderConfig {
                dim: 8,
                kernel: 3,
                groups: 2,
                layers: 2,
            },
            n_classes: 2,
        };
        Architecture::new(fe, net).unwrap()
    }

    fn cfg() -> PretrainConfig {
        PretrainConfig {
            mask: MaskConfig::new(0.3, 2, 3, 0).unwrap(),
            ema: EmaConfig {
                tau_start: 0.9,
                tau_end: 0.99,
                anneal_steps: 10,
            },
            optim: OptimConfig::new(1e-3, 2, 20),
            mix: MixConfig::off(),
            target_layers: 0,
            masked_loss_only: true,
        }
    }

    fn waves(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| normal_init(&mut rng, 1, len, 0.3).into_raw_vec_and_offset().0)
            .collect()
    }

    #[test]
    fn ema_limits_and_geometric_series() {
        let s = ParamSet::from_pairs(&[("w", Mat::from_elem((2, 2), 3.0))]);
        let mut t = ParamSet::from_pairs(&[("w", Mat::from_elem((2, 2), -1.0))]);
        let t0 = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);

        let mut t = t0.clone();
        let tau: f64 = 0.999;
        for _ in 0..100 {
            ema_update(&mut t, &s, tau).unwrap();
        }
        let expect = tau.powi(100) * -1.0 + (1.0 - tau.powi(100)) * 3.0;
        assert!(t.get(0).iter().all(|&v| (v - expect).abs() < 1e-10));

        let bad = ParamSet::from_pairs(&[("w", Mat::zeros((3, 2)))]);
        assert!(matches!(ema_update(&mut t, &bad, 0.5), Err(Error::State(_))));
    }

    #[test]
    fn tau_schedule_points() {
        let c = EmaConfig {
            tau_start: 0.999,
            tau_end: 0.9999,
            anneal_steps: 1000,
        };
        assert_eq!(tau_schedule(0, &c), 0.999);
        assert_eq!(tau_schedule(1000, &c), 0.9999);
        assert_eq!(tau_schedule(5000, &c), 0.9999);
        assert!((tau_schedule(500, &c) - (0.999 + 0.9999) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_cases() {
        let constant = Mat::from_elem((6, 3), 2.5);
        assert!(instance_norm_time(&constant).iter().all(|&v| v.abs() < 1e-12));
        let x = Mat::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap();
        let a = Mat::from_shape_vec((2, 1), vec![1.0, 1.0]).unwrap();
        let b = Mat::from_shape_vec((2, 1), vec![3.0, -1.0]).unwrap();
        // Hand-computed: x → ±1/sqrt(1+ε), b → ±2/sqrt(4+ε), a → 0.
        let s1 = 1.0 / (1.0 + 1e-5f64).sqrt();
        let s2 = 2.0 / (4.0 + 1e-5f64).sqrt();
        let last = targets_from_layers(&[x.clone(), b.clone()], 1).unwrap();
        assert!((last[[0, 0]] - s2).abs() < 1e-10);
        let both = targets_from_layers(&[x, b], 0).unwrap();
        assert!((both[[0, 0]] - (-s1 + s2) / 2.0).abs() < 1e-10);
        assert!((both[[1, 0]] - (s1 - s2) / 2.0).abs() < 1e-10);
        assert!(targets_from_layers(&[a.clone()], 2).is_err());
    }

    #[test]
    fn collapse_monitor_cases() {
        let same = vec![Mat::from_elem((10, 4), 0.7); 3];
        assert!(collapse_monitor(&same).unwrap() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = vec![normal_init(&mut rng, 5000, 8, 1.0), normal_init(&mut rng, 5000, 8, 1.0)];
        assert!((collapse_monitor(&noise).unwrap() - 1.0).abs() < 0.02);
        assert!(collapse_monitor(&[]).is_err());
    }

    #[test]
    fn zero_masks_give_zero_loss() {
        let arch = tiny_arch();
        let mut state = PretrainState::new(&arch, 3);
        let mut c = cfg();
        c.mask.p = 0.0;
        let dg = distill_graph(&arch, &state.model, &waves(1, 2, 800), &c, &mut state.rng);
        // With p = 0 every frame is kept, so the masked set is empty.
        let dg = dg.unwrap();
        assert_eq!(dg.graph.scalar(dg.loss), 0.0);
    }

    #[test]
    fn teacher_runs_once_per_clip_and_only_moves_by_ema() {
        let arch = tiny_arch();
        let mut state = PretrainState::new(&arch, 4);
        let c = cfg();
        let teacher_before = state.model.teacher.clone().unwrap();
        let student_before = state.model.student.clone();
        let stats = distill_step(&arch, &mut state, &waves(2, 3, 800), &c).unwrap();
        assert_eq!(stats.teacher_calls, 3);
        let dg = distill_graph(&arch, &state.model, &waves(2, 3, 800), &c, &mut state.rng.clone()).unwrap();
        assert_eq!(dg.teacher_calls, 3);

        let mut expected = teacher_before;
        ema_update(&mut expected, &state.model.student, stats.tau).unwrap();
        assert_eq!(state.model.teacher.as_ref().unwrap(), &expected);
        assert_ne!(state.model.student, student_before);
    }

    #[test]
    fn fixed_seed_gives_identical_trajectory() {
        let arch = tiny_arch();
        let run = || {
            let mut state = PretrainState::new(&arch, 5);
            (0..10)
                .map(|i| distill_step(&arch, &mut state, &waves(i, 2, 800), &cfg()).unwrap().loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn distill_loss_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let state = PretrainState::new(&arch, 6);
        let mut model = state.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in ["student", "decoder"] {
            for v in model.group_mut(g).unwrap().values_mut() {
                *v += &(normal_init(&mut rng, v.nrows(), v.ncols(), 0.1));
            }
        }
        let c = cfg();
        let w = waves(7, 1, 600);
        let eval = |m: &ModelState| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let dg = distill_graph(&arch, m, &w, &c, &mut r).unwrap();
            dg.graph.scalar(dg.loss)
        };
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let dg = distill_graph(&arch, &model, &w, &c, &mut r).unwrap();
        let mut grads = dg.graph.backward(dg.loss);
        let analytic = [
            ("student", dg.student.grads(&mut grads, &model.student)),
            ("decoder", dg.decoder.grads(&mut grads, model.decoder.as_ref().unwrap())),
        ];
        let h = 1e-6;
        for (group, ga) in analytic {
            for i in 0..ga.len() {
                let shape = ga[i].dim();
                let mut num = Mat::zeros(shape);
                for r_ in 0..shape.0 {
                    for c_ in 0..shape.1 {
                        let orig = model.group_mut(group).unwrap().get(i)[[r_, c_]];
                        model.group_mut(group).unwrap().get_mut(i)[[r_, c_]] = orig + h;
                        let lp = eval(&model);
                        model.group_mut(group).unwrap().get_mut(i)[[r_, c_]] = orig - h;
                        let lm = eval(&model);
                        model.group_mut(group).unwrap().get_mut(i)[[r_, c_]] = orig;
                        num[[r_, c_]] = (lp - lm) / (2.0 * h);
                    }
                }
                let diff = (&ga[i] - &num).mapv(|v| v * v).sum().sqrt();
                let scale = ga[i].mapv(|v| v * v).sum().sqrt().max(num.mapv(|v| v * v).sum().sqrt());
                let rel = if scale < 1e-7 { 0.0 } else { diff / scale };
                assert!(rel < 1e-4, "{group}/{}: {rel}", i);
            }
        }
    }

    #[test]
    fn nan_input_is_a_divergence() {
        let arch = tiny_arch();
        let mut state = PretrainState::new(&arch, 8);
        let mut w = waves(3, 1, 800);
        w[0][100] = f64::NAN;
        let r = distill_step(&arch, &mut state, &w, &cfg());
        assert!(matches!(r, Err(Error::Divergence { step: 0, .. })), "{r:?}");
    }
}
