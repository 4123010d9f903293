//! Flat `key = value` run configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::MixConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::finetune::FinetuneConfig;
use crate::frontend::{FrontendConfig, SincActivation};
use crate::masking::MaskConfig;
use crate::network::{DecoderConfig, NetworkConfig};
use crate::optim::OptimConfig;
use crate::pretrain::{EmaConfig, PretrainConfig};

/// Every accepted key with its default. The defaults are the desk-scale
/// setup.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.dir", "corpus"),
    ("data.crop_s", "1.0"),
    ("data.batch", "4"),
    ("data.folds", "5"),
    ("frontend.sample_rate", "8000"),
    ("frontend.n_filters", "16"),
    ("frontend.channels", "32"),
    ("frontend.activation", "pswish"),
    ("model.embed_dim", "32"),
    ("model.layers", "3"),
    ("model.heads", "4"),
    ("model.ffn_dim", "128"),
    ("model.pos_kernel", "9"),
    ("model.pos_groups", "4"),
    ("decoder.dim", "32"),
    ("decoder.kernel", "7"),
    ("decoder.groups", "4"),
    ("decoder.layers", "2"),
    ("dropout", "0.1"),
    ("layerdrop", "0.1"),
    ("mask.p", "0.065"),
    ("mask.M", "10"),
    ("mask.clones", "8"),
    ("ema.tau_start", "0.999"),
    ("ema.tau_end", "0.9999"),
    ("ema.anneal_steps", "600"),
    ("target.layers", "0"),
    ("loss.masked_only", "true"),
    ("lr", "0.0005"),
    ("weight_decay", "0.01"),
    ("warmup_steps", "100"),
    ("total_steps", "2000"),
    ("frozen_steps", "0"),
    ("clip_norm", "1.0"),
    ("adam.beta1", "0.9"),
    ("adam.beta2", "0.98"),
    ("adam.eps", "0.000001"),
    ("bcl.input_strength", "0.5"),
    ("bcl.target_strength", "0.5"),
    ("bcl.token_prob", "0.5"),
    ("bcl.window_s", "0.05"),
    ("focal.gamma", "2.0"),
    ("layer_average.K", "0"),
    ("eval.pool_s", "0.1"),
    ("eval.iou_min", "0.5"),
    ("eval.levels", "101"),
    ("eval.thresholds", "0.5"),
    ("log_every", "1"),
    ("checkpoint_every", "500"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Parses config text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}` = `{raw}` has the wrong type")))
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}` entry `{p}` is not a number")))
            })
            .collect()
    }

    /// Sorted `key = value` lines for every key, defaults included.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }

    /// Builds every typed section once so bad values fail at load time.
    fn check(&self) -> Result<()> {
        let fe = self.frontend()?;
        fe.validate()?;
        self.network(fe.out_dim(), 1)?.validate()?;
        self.pretrain()?.validate()?;
        self.finetune()?.validate()?;
        self.eval()?;
        self.eval_thresholds()?;
        Ok(())
    }

    pub fn frontend(&self) -> Result<FrontendConfig> {
        let activation = match self.get::<String>("frontend.activation")?.as_str() {
            "pswish" => SincActivation::PSwish,
            "leaky_relu" => SincActivation::LeakyRelu,
            "identity" => SincActivation::Identity,
            other => return Err(Error::Config(format!("unknown frontend.activation `{other}`"))),
        };
        let mut fe = FrontendConfig::narrowed(self.get("frontend.n_filters")?, self.get("frontend.channels")?);
        fe.sample_rate = self.get("frontend.sample_rate")?;
        fe.sinc_activation = activation;
        Ok(fe)
    }

    pub fn network(&self, input_dim: usize, n_classes: usize) -> Result<NetworkConfig> {
        Ok(NetworkConfig {
            input_dim,
            embed_dim: self.get("model.embed_dim")?,
            layers: self.get("model.layers")?,
            heads: self.get("model.heads")?,
            ffn_dim: self.get("model.ffn_dim")?,
            dropout: self.get("dropout")?,
            layerdrop: self.get("layerdrop")?,
            pos_kernel: self.get("model.pos_kernel")?,
            pos_groups: self.get("model.pos_groups")?,
            decoder: DecoderConfig {
                dim: self.get("decoder.dim")?,
                kernel: self.get("decoder.kernel")?,
                groups: self.get("decoder.groups")?,
                layers: self.get("decoder.layers")?,
            },
            n_classes,
        })
    }

    pub fn optim(&self) -> Result<OptimConfig> {
        Ok(OptimConfig {
            lr_peak: self.get("lr")?,
            weight_decay: self.get("weight_decay")?,
            warmup_steps: self.get("warmup_steps")?,
            total_steps: self.get("total_steps")?,
            clip_norm: self.get("clip_norm")?,
            beta1: self.get("adam.beta1")?,
            beta2: self.get("adam.beta2")?,
            eps: self.get("adam.eps")?,
        })
    }

    pub fn mask(&self) -> Result<MaskConfig> {
        Ok(MaskConfig {
            p: self.get("mask.p")?,
            span: self.get("mask.M")?,
            clones: self.get("mask.clones")?,
            seed: 0,
        })
    }

    pub fn mix(&self) -> Result<MixConfig> {
        Ok(MixConfig {
            input_strength: self.get("bcl.input_strength")?,
            target_strength: self.get("bcl.target_strength")?,
            token_prob: self.get("bcl.token_prob")?,
            window_s: self.get("bcl.window_s")?,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            mask: self.mask()?,
            ema: EmaConfig {
                tau_start: self.get("ema.tau_start")?,
                tau_end: self.get("ema.tau_end")?,
                anneal_steps: self.get("ema.anneal_steps")?,
            },
            optim: self.optim()?,
            mix: self.mix()?,
            target_layers: self.get("target.layers")?,
            masked_loss_only: self.get("loss.masked_only")?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            optim: self.optim()?,
            frozen_steps: self.get("frozen_steps")?,
            mask: MaskConfig {
                clones: 1,
                ..self.mask()?
            },
            mix: self.mix()?,
            gamma: self.get("focal.gamma")?,
            layer_average_k: self.get("layer_average.K")?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            pool_width_s: self.get("eval.pool_s")?,
            iou_min: self.get("eval.iou_min")?,
            n_levels: self.get("eval.levels")?,
        };
        if cfg.n_levels < 2 || !(cfg.pool_width_s > 0.0) {
            return Err(Error::Config("eval.levels must be ≥ 2 and eval.pool_s positive".into()));
        }
        Ok(cfg)
    }

    pub fn eval_thresholds(&self) -> Result<Vec<f64>> {
        let t = self.get_list("eval.thresholds")?;
        if t.is_empty() || t.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Config("eval.thresholds must lie in (0, 1)".into()));
        }
        Ok(t)
    }
}
