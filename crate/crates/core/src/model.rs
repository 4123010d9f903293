//! Architecture bundle and the parameter sets trained in each phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig};
use crate::network::{Decoder, Encoder, Head, NetworkConfig};
use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct Architecture {
    pub frontend: Frontend,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Head,
}

impl Architecture {
    pub fn new(frontend: FrontendConfig, network: NetworkConfig) -> Result<Self> {
        let fe = Frontend::new(frontend)?;
        if fe.config().out_dim() != network.input_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} does not match frontend width {}",
                network.input_dim,
                fe.config().out_dim()
            )));
        }
        Ok(Architecture {
            frontend: fe,
            encoder: Encoder::new(network)?,
            decoder: Decoder::new(&network)?,
            head: Head::new(&network),
        })
    }

    pub fn network(&self) -> &NetworkConfig {
        self.encoder.config()
    }

    /// Fresh parameters for pretraining: the teacher starts as a copy of the student.
    pub fn init_pretrain<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState {
        let frontend = self.frontend.init_params(rng);
        let student = self.encoder.init_params(rng);
        let decoder = self.decoder.init_params(rng);
        ModelState {
            frontend,
            teacher: Some(student.clone()),
            student,
            decoder: Some(decoder),
            head: None,
        }
    }

    /// Fresh parameters for finetuning without pretraining.
    pub fn init_finetune<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState {
        let frontend = self.frontend.init_params(rng);
        let student = self.encoder.init_params(rng);
        let head = self.head.init_params(rng);
        ModelState {
            frontend,
            student,
            teacher: None,
            decoder: None,
            head: Some(head),
        }
    }

    /// Freshly initialized group layout, used to validate loaded arrays.
    pub fn template(&self, group: &str) -> Option<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match group {
            "frontend" => Some(self.frontend.init_params(&mut rng)),
            "student" | "teacher" => Some(self.encoder.init_params(&mut rng)),
            "decoder" => Some(self.decoder.init_params(&mut rng)),
            "head" => Some(self.head.init_params(&mut rng)),
            _ => None,
        }
    }
}

/// Parameter groups; absent groups are not used by the current phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub frontend: ParamSet,
    pub student: ParamSet,
    pub teacher: Option<ParamSet>,
    pub decoder: Option<ParamSet>,
    pub head: Option<ParamSet>,
}

impl ModelState {
    /// `(group name, params)` for every present group.
    pub fn groups(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut v = vec![("frontend", &self.frontend), ("student", &self.student)];
        if let Some(t) = &self.teacher {
            v.push(("teacher", t));
        }
        if let Some(d) = &self.decoder {
            v.push(("decoder", d));
        }
        if let Some(h) = &self.head {
            v.push(("head", h));
        }
        v
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        match name {
            "frontend" => Some(&mut self.frontend),
            "student" => Some(&mut self.student),
            "teacher" => self.teacher.as_mut(),
            "decoder" => self.decoder.as_mut(),
            "head" => self.head.as_mut(),
            _ => None,
        }
    }
}
