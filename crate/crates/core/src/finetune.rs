//! Supervised finetuning with a sigmoid head and focal loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_batch, MixConfig};
use crate::autograd::{clamp_prob, focal_value, Graph, Mat, Var};
use crate::corpus::AudioClip;
use crate::error::{Error, Result};
use crate::masking::{fill_masked_noise, sample_mask, MaskConfig};
use crate::model::{Architecture, ModelState};
use crate::network::{classification_head, layer_average, layer_average_node, transformer_forward, Mode};
use crate::optim::{clip_global_norm, cosine_lr, AdamState, OptimConfig};
use crate::params::Bound;

/// Focal loss of one likelihood against a soft target; `gamma = 0` is
/// binary cross-entropy. Likelihoods are clamped to `[ε, 1−ε]`.
pub fn focal_loss(likelihood: f64, target: f64, gamma: f64) -> f64 {
    focal_value(clamp_prob(likelihood), target, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    /// Steps during which only the head is trained.
    pub frozen_steps: u64,
    /// Regularizing input mask; `p = 0` disables it. Only one clone is used.
    pub mask: MaskConfig,
    pub mix: MixConfig,
    pub gamma: f64,
    /// Transformer layers averaged before the head; 0 means all.
    pub layer_average_k: usize,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.mask.validate()?;
        self.mix.validate()?;
        if self.frozen_steps > self.optim.total_steps {
            return Err(Error::Config(format!(
                "frozen_steps {} exceeds total_steps {}",
                self.frozen_steps, self.optim.total_steps
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal.gamma = {} is negative", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub model: ModelState,
    pub opt: BTreeMap<String, AdamState>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl FinetuneState {
    /// Keeps the pretrained frontend and student, drops teacher and decoder,
    /// and adds a fresh head.
    pub fn from_pretrained(arch: &Architecture, pretrained: &ModelState, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = arch.init_finetune(&mut rng);
        template.frontend.check_same_structure(&pretrained.frontend)?;
        template.student.check_same_structure(&pretrained.student)?;
        let model = ModelState {
            frontend: pretrained.frontend.clone(),
            student: pretrained.student.clone(),
            teacher: None,
            decoder: None,
            head: template.head,
        };
        Ok(Self::with_model(model, rng))
    }

    /// Randomly initialized frontend and encoder.
    pub fn from_scratch(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = arch.init_finetune(&mut rng);
        Self::with_model(model, rng)
    }

    fn with_model(model: ModelState, rng: ChaCha8Rng) -> Self {
        let mut opt = BTreeMap::new();
        opt.insert("student".to_string(), AdamState::new(&model.student));
        opt.insert(
            "head".to_string(),
            AdamState::new(model.head.as_ref().expect("head present")),
        );
        FinetuneState {
            model,
            opt,
            step: 0,
            rng,
        }
    }

    pub fn encoder_frozen(&self, cfg: &FinetuneConfig) -> bool {
        self.step < cfg.frozen_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub frozen: bool,
}

pub struct FinetuneGraph {
    pub graph: Graph,
    pub loss: Var,
    pub student: Bound,
    pub head: Bound,
}

/// Records the focal loss of a batch. Masked frames are replaced by noise
/// after the input projection.
pub fn finetune_graph(
    arch: &Architecture,
    model: &ModelState,
    waves: &[Vec<f64>],
    targets: &[Mat],
    cfg: &FinetuneConfig,
    train_encoder: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneGraph> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::State("finetuning needs a classification head".into()))?;
    if waves.is_empty() || waves.len() != targets.len() {
        return Err(Error::arg("batch", format!("{} waves, {} targets", waves.len(), targets.len())));
    }
    let mut g = Graph::new();
    let pf = model.frontend.bind(&mut g, false);
    let ps = model.student.bind(&mut g, train_encoder);
    let ph = head.bind(&mut g, true);
    let d = arch.network().embed_dim;
    let mut losses = Vec::with_capacity(waves.len());
    for (wave, target) in waves.iter().zip(targets) {
        let feat = arch.frontend.forward(&mut g, &pf, wave)?;
        let t = g.value(feat).nrows();
        if target.dim() != (t, arch.network().n_classes) {
            return Err(Error::Shape(format!(
                "targets {:?} for {t} frames and {} classes",
                target.dim(),
                arch.network().n_classes
            )));
        }
        let mut x = arch.encoder.project(&mut g, &ps, feat);
        if cfg.mask.p > 0.0 {
            let plan = sample_mask(
                t,
                &MaskConfig {
                    clones: 1,
                    seed: rng.random(),
                    ..cfg.mask
                },
            )?;
            let mask = plan.clone_mask(0);
            let kept: Vec<usize> = (0..t).filter(|&i| !mask[i]).collect();
            let noise = fill_masked_noise(&Mat::zeros((t, d)), &mask, rng.random())?;
            let rows = g.gather_rows(x, &kept);
            x = g.scatter_rows(rows, &kept, noise);
        }
        let x = arch.encoder.position(&mut g, &ps, x);
        let run = arch.encoder.blocks(&mut g, &ps, x, &mut Mode::Train(rng));
        let k = if cfg.layer_average_k == 0 {
            run.layers.len()
        } else {
            cfg.layer_average_k
        };
        let feats = layer_average_node(&mut g, &run.layers, k)?;
        let logits = arch.head.logits(&mut g, &ph, feats);
        losses.push(g.focal_from_logits(logits, target.clone(), cfg.gamma));
    }
    let loss = g.mean(&losses);
    Ok(FinetuneGraph {
        graph: g,
        loss,
        student: ps,
        head: ph,
    })
}

/// One finetuning update. The frontend never changes; the transformer is
/// updated once `frozen_steps` have passed.
pub fn finetune_step(
    arch: &Architecture,
    state: &mut FinetuneState,
    waves: &[Vec<f64>],
    targets: &[Mat],
    cfg: &FinetuneConfig,
) -> Result<FinetuneStats> {
    let step = state.step;
    let frozen = state.encoder_frozen(cfg);
    let sr = arch.frontend.config().sample_rate;
    let (mixed, mixed_t) = mix_batch(waves, Some(targets), sr, &cfg.mix, &mut state.rng)?;
    let mixed_t = mixed_t.expect("targets were given");
    let fg = finetune_graph(arch, &state.model, &mixed, &mixed_t, cfg, !frozen, &mut state.rng)?;
    let loss = fg.graph.scalar(fg.loss);
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let mut grads = fg.graph.backward(fg.loss);
    let head = state.model.head.as_ref().expect("checked in finetune_graph");
    let mut groups = vec![fg.head.grads(&mut grads, head)];
    if !frozen {
        groups.push(fg.student.grads(&mut grads, &state.model.student));
    }
    drop(fg);
    let grad_norm = clip_global_norm(&mut groups, cfg.optim.clip_norm);
    let lr = cosine_lr(step + 1, &cfg.optim);
    let names: &[&str] = if frozen { &["head"] } else { &["head", "student"] };
    for (name, g) in names.iter().zip(&groups) {
        let params = state.model.group_mut(name).expect("trained group");
        state
            .opt
            .get_mut(*name)
            .ok_or_else(|| Error::State(format!("no optimizer state for `{name}`")))?
            .update(params, g, lr, &cfg.optim);
    }
    state.step += 1;
    Ok(FinetuneStats {
        step,
        loss,
        lr,
        grad_norm,
        frozen,
    })
}

/// Framewise class likelihoods, `T × C`, in evaluation mode.
pub fn predict_likelihoods(arch: &Architecture, model: &ModelState, clip: &AudioClip, k: usize) -> Result<Mat> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::State("model has no classification head".into()))?;
    let feat = arch.frontend.features(&model.frontend, clip)?;
    let (out, _) = transformer_forward(&arch.encoder, &model.student, &feat, &mut Mode::Eval, false)?;
    let k = if k == 0 { out.per_layer.len() } else { k };
    let avg = layer_average(&out.per_layer, k)?;
    classification_head(&avg, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::frontend::{ConvLayerSpec, FrontendConfig};
    use crate::network::{DecoderConfig, NetworkConfig};
    use crate::params::normal_init;
    use proptest::prelude::*;
    use rand::Rng;

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
                layers: 1,
            },
            n_classes: 2,
        };
        Architecture::new(fe, net).unwrap()
    }

    fn cfg(gamma: f64, p: f64) -> FinetuneConfig {
        FinetuneConfig {
            optim: OptimConfig::new(3e-3, 0, 100),
            frozen_steps: 0,
            mask: MaskConfig::new(p, 2, 1, 0).unwrap(),
            mix: MixConfig::off(),
            gamma,
            layer_average_k: 0,
        }
    }

    fn bce(p: f64, y: f64) -> f64 {
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(0.5, 1.0, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal_loss(0.5, 1.0, 2.0) - 0.17329).abs() < 1e-5);
        assert!(focal_loss(1.0 - 1e-7, 1.0, 2.0) < 1e-12);
        assert!(focal_loss(1.0, 1.0, 0.0) < 1e-6);
    }

    #[test]
    fn gamma_zero_is_bce_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let y: f64 = rng.random();
            assert!((focal_loss(p, y, 0.0) - bce(p, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_gamma_never_raises_confident_loss() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            for y in [0.0, 1.0] {
                let pt = p * y + (1.0 - p) * (1.0 - y);
                if pt <= 0.5 {
                    continue;
                }
                let base = focal_loss(p, y, 0.0);
                let mut prev = base;
                for gamma in [0.5, 1.0, 2.0, 5.0] {
                    let l = focal_loss(p, y, gamma);
                    assert!(l <= base + 1e-15 && l <= prev + 1e-15);
                    prev = l;
                }
            }
        }
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        for gamma in [0.0, 1.0, 2.0] {
            for &(z, y) in &[(-2.0, 1.0), (0.3, 0.0), (1.7, 0.75), (-0.4, 0.25)] {
                let mut g = Graph::new();
                let zv = g.leaf(Mat::from_elem((1, 1), z), true);
                let l = g.focal_from_logits(zv, Mat::from_elem((1, 1), y), gamma);
                let grad = g.backward(l).get(zv).unwrap()[[0, 0]];
                let h = 1e-6;
                let f = |z: f64| focal_loss(sigmoid(z), y, gamma);
                let num = (f(z + h) - f(z - h)) / (2.0 * h);
                assert!((grad - num).abs() / num.abs().max(1e-8) < 1e-4, "γ={gamma} z={z}: {grad} vs {num}");
            }
        }
    }

    proptest! {
        #[test]
        fn focal_is_non_negative(p in 0.0f64..=1.0, y in 0.0f64..=1.0, gamma in 0.0f64..5.0) {
            prop_assert!(focal_loss(p, y, gamma) >= 0.0);
        }

        #[test]
        fn focal_vanishes_only_when_certain(p in 1e-3f64..(1.0 - 1e-3), gamma in 0.0f64..5.0) {
            prop_assert!(focal_loss(p, 1.0, gamma) > 0.0);
            prop_assert!(focal_loss(p, 0.0, gamma) > 0.0);
        }
    }

    fn batch(seed: u64) -> (Vec<Vec<f64>>, Vec<Mat>) {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<Vec<f64>> = (0..2)
            .map(|_| normal_init(&mut rng, 1, 800, 0.3).into_raw_vec_and_offset().0)
            .collect();
        let t = arch.frontend.check_length(800).unwrap();
        let targets = vec![Mat::from_elem((t, 2), 1.0), Mat::zeros((t, 2))];
        (waves, targets)
    }

    #[test]
    fn frozen_phase_keeps_frontend_and_transformer() {
        let arch = tiny_arch();
        let mut state = FinetuneState::from_scratch(&arch, 1);
        let mut c = cfg(2.0, 0.1);
        c.frozen_steps = 3;
        let (w, t) = batch(1);
        let fe = state.model.frontend.digest();
        let enc = state.model.student.digest();
        let head = state.model.head.as_ref().unwrap().digest();
        for _ in 0..3 {
            let s = finetune_step(&arch, &mut state, &w, &t, &c).unwrap();
            assert!(s.frozen);
            assert_eq!(state.model.student.digest(), enc);
        }
        assert_ne!(state.model.head.as_ref().unwrap().digest(), head);
        let s = finetune_step(&arch, &mut state, &w, &t, &c).unwrap();
        assert!(!s.frozen);
        assert_ne!(state.model.student.digest(), enc);
        assert_eq!(state.model.frontend.digest(), fe);
    }

    #[test]
    fn separable_batch_loss_decreases() {
        let arch = tiny_arch();
        let mut state = FinetuneState::from_scratch(&arch, 2);
        let c = FinetuneConfig {
            optim: OptimConfig {
                weight_decay: 0.0,
                ..OptimConfig::new(1e-3, 0, 1000)
            },
            ..cfg(0.0, 0.0)
        };
        let (w, t) = batch(3);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let s = finetune_step(&arch, &mut state, &w, &t, &c).unwrap();
            assert!(s.loss < prev, "{} then {}", prev, s.loss);
            prev = s.loss;
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let arch = tiny_arch();
        let run = || {
            let mut state = FinetuneState::from_scratch(&arch, 4);
            let (w, t) = batch(5);
            let c = FinetuneConfig {
                mix: MixConfig {
                    input_strength: 0.5,
                    target_strength: 0.5,
                    token_prob: 1.0,
                    window_s: 0.05,
                },
                ..cfg(2.0, 0.2)
            };
            (0..5)
                .map(|_| finetune_step(&arch, &mut state, &w, &t, &c).unwrap().loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predictions_are_probabilities_and_repeatable() {
        let arch = tiny_arch();
        let state = FinetuneState::from_scratch(&arch, 6);
        let (w, _) = batch(7);
        let clip = AudioClip::new("c", w[0].clone(), 8000);
        let a = predict_likelihoods(&arch, &state.model, &clip, 0).unwrap();
        let b = predict_likelihoods(&arch, &state.model, &clip, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (arch.frontend.check_length(800).unwrap(), 2));
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        let short = AudioClip::new("s", vec![0.0; 50], 8000);
        assert!(matches!(predict_likelihoods(&arch, &state.model, &short, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_head_is_a_state_error() {
        let arch = tiny_arch();
        let mut model = FinetuneState::from_scratch(&arch, 6).model;
        model.head = None;
        let clip = AudioClip::new("c", vec![0.1; 800], 8000);
        assert!(matches!(predict_likelihoods(&arch, &model, &clip, 0), Err(Error::State(_))));
    }
}
