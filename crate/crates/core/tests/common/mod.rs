#![allow(dead_code)]

use std::path::Path;

use sincdistill::cli::RunOptions;
use sincdistill::config::Settings;
use sincdistill::synth::{generate, SynthSpec};

/// Small model and short crops so a run takes seconds.
pub const TINY: &str = "
data.crop_s = 0.5
data.batch = 2
data.folds = 3
frontend.n_filters = 4
frontend.channels = 8
model.embed_dim = 8
model.layers = 1
model.heads = 2
model.ffn_dim = 16
model.pos_kernel = 3
model.pos_groups = 2
decoder.dim = 8
decoder.kernel = 3
decoder.groups = 2
decoder.layers = 1
mask.clones = 2
warmup_steps = 5
";

pub fn tiny_corpus(dir: &Path, n_clips: usize) {
    let spec = SynthSpec {
        n_clips,
        clip_s: 1.0,
        classes: SynthSpec::default()
            .classes
            .into_iter()
            .map(|mut c| {
                c.rate = 1.0;
                c.duration_ms = (100.0, 150.0);
                c
            })
            .collect(),
        ..SynthSpec::default()
    };
    generate(&spec, dir).unwrap();
}

pub fn tiny_settings(corpus: &Path, extra: &str) -> Settings {
    Settings::parse(&format!("{TINY}\ndata.dir = {}\n{extra}", corpus.display())).unwrap()
}

pub fn opts(corpus: &Path, out: &Path, extra: &str, seed: u64) -> RunOptions {
    RunOptions::new(tiny_settings(corpus, extra), out, seed)
}
