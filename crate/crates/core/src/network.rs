//! Transformer encoder, convolutional regression decoder and classification head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, ConvGeom, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_init, Bound, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub kernel: usize,
    pub groups: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Width of the frontend features.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub layerdrop: f64,
    /// Grouped positional convolution; disabled when `pos_kernel == 0`.
    pub pos_kernel: usize,
    pub pos_groups: usize,
    pub decoder: DecoderConfig,
    pub n_classes: usize,
}

impl NetworkConfig {
    /// Layout of the large reference model.
    pub fn field_scale(input_dim: usize, n_classes: usize) -> Self {
        NetworkConfig {
            input_dim,
            embed_dim: 1024,
            layers: 16,
            heads: 16,
            ffn_dim: 4096,
            dropout: 0.1,
            layerdrop: 0.1,
            pos_kernel: 19,
            pos_groups: 16,
            decoder: DecoderConfig {
                dim: 768,
                kernel: 7,
                groups: 16,
                layers: 4,
            },
            n_classes,
        }
    }

    pub fn desk(input_dim: usize, n_classes: usize) -> Self {
        NetworkConfig {
            input_dim,
            embed_dim: 32,
            layers: 3,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            layerdrop: 0.1,
            pos_kernel: 9,
            pos_groups: 4,
            decoder: DecoderConfig {
                dim: 32,
                kernel: 7,
                groups: 4,
                layers: 2,
            },
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.layers == 0 || self.input_dim == 0 || self.ffn_dim == 0 || self.n_classes == 0 {
            return bad("layers, input_dim, ffn_dim and n_classes must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("layerdrop", self.layerdrop)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} not in [0, 1]"));
            }
        }
        if self.pos_kernel > 0
            && (self.pos_kernel % 2 == 0
                || self.pos_groups == 0
                || self.embed_dim % self.pos_groups != 0)
        {
            return bad(format!(
                "positional conv needs an odd kernel and groups dividing {} (got {}, {})",
                self.embed_dim, self.pos_kernel, self.pos_groups
            ));
        }
        let d = &self.decoder;
        if d.layers == 0 || d.kernel % 2 == 0 || d.groups == 0 || d.dim % d.groups != 0 {
            return bad(format!("invalid decoder {d:?}"));
        }
        Ok(())
    }
}

/// Dropout and LayerDrop are active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = g.value(x).dim();
                let mask = Mat::from_shape_simple_fn(dim, || {
                    if p >= 1.0 || rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn skip_layer(&mut self, p: f64) -> bool {
        match self {
            Mode::Train(rng) if p > 0.0 => rng.random::<f64>() < p,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Nodes produced by one encoder pass.
pub struct EncoderRun {
    /// Output of every block before the final norm.
    pub layers: Vec<Var>,
    /// Final-normed output.
    pub output: Var,
    /// Attention nodes of the blocks that ran.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: NetworkConfig,
    proj_w: usize,
    proj_b: usize,
    pos_w: usize,
    pos_b: usize,
    blocks: Vec<BlockIdx>,
    final_g: usize,
    final_b: usize,
}

impl Encoder {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut next = 0..;
        let mut take = || next.next().unwrap();
        let (proj_w, proj_b, pos_w, pos_b) = (take(), take(), take(), take());
        let blocks = (0..cfg.layers)
            .map(|_| BlockIdx {
                ln1_g: take(),
                ln1_b: take(),
                wq: take(),
                bq: take(),
                wk: take(),
                bk: take(),
                wv: take(),
                bv: take(),
                wo: take(),
                bo: take(),
                ln2_g: take(),
                ln2_b: take(),
                w1: take(),
                b1: take(),
                w2: take(),
                b2: take(),
            })
            .collect();
        let (final_g, final_b) = (take(), take());
        Ok(Encoder {
            cfg,
            proj_w,
            proj_b,
            pos_w,
            pos_b,
            blocks,
            final_g,
            final_b,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = &self.cfg;
        let d = c.embed_dim;
        let mut p = ParamSet::new();
        p.add("enc.proj.w", fan_in_init(rng, c.input_dim, c.input_dim, d), true);
        p.add("enc.proj.b", Mat::zeros((1, d)), true);
        let (pk, pg) = (c.pos_kernel.max(1), c.pos_groups.max(1));
        let pos_fan = pk * d / pg;
        p.add("enc.pos.w", fan_in_init(rng, pos_fan, pos_fan, d), true);
        p.add("enc.pos.b", Mat::zeros((1, d)), true);
        for i in 0..c.layers {
            let n = |s: &str| format!("enc.l{i}.{s}");
            p.add(n("ln1.g"), Mat::ones((1, d)), true);
            p.add(n("ln1.b"), Mat::zeros((1, d)), true);
            for w in ["q", "k", "v", "o"] {
                p.add(n(&format!("w{w}")), fan_in_init(rng, d, d, d), true);
                p.add(n(&format!("b{w}")), Mat::zeros((1, d)), true);
            }
            p.add(n("ln2.g"), Mat::ones((1, d)), true);
            p.add(n("ln2.b"), Mat::zeros((1, d)), true);
            p.add(n("w1"), fan_in_init(rng, d, d, c.ffn_dim), true);
            p.add(n("b1"), Mat::zeros((1, c.ffn_dim)), true);
            p.add(n("w2"), fan_in_init(rng, c.ffn_dim, c.ffn_dim, d), true);
            p.add(n("b2"), Mat::zeros((1, d)), true);
        }
        p.add("enc.final.g", Mat::ones((1, d)), true);
        p.add("enc.final.b", Mat::zeros((1, d)), true);
        p
    }

    /// Linear projection of frontend features to the model width.
    pub fn project(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        g.linear(features, p.v(self.proj_w), p.v(self.proj_b))
    }

    /// Adds the grouped convolutional positional encoding, `x + GELU(conv(x))`.
    pub fn position(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        if self.cfg.pos_kernel == 0 {
            return x;
        }
        let geom = ConvGeom::same(self.cfg.pos_kernel, self.cfg.pos_groups);
        if g.value(x).nrows() + 2 * geom.pad < geom.kernel {
            return x;
        }
        let c = g.conv1d(x, p.v(self.pos_w), Some(p.v(self.pos_b)), geom);
        let c = g.gelu(c);
        g.add(x, c)
    }

    pub fn embed(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        let x = self.project(g, p, features);
        self.position(g, p, x)
    }

    /// Pre-norm transformer blocks followed by the final layer norm.
    pub fn blocks(&self, g: &mut Graph, p: &Bound, mut x: Var, mode: &mut Mode) -> EncoderRun {
        let c = &self.cfg;
        let mut layers = Vec::with_capacity(c.layers);
        let mut attention = Vec::new();
        for b in &self.blocks {
            if mode.skip_layer(c.layerdrop) {
                layers.push(x);
                continue;
            }
            let h = g.layer_norm(x, p.v(b.ln1_g), p.v(b.ln1_b));
            let q = g.linear(h, p.v(b.wq), p.v(b.bq));
            let k = g.linear(h, p.v(b.wk), p.v(b.bk));
            let v = g.linear(h, p.v(b.wv), p.v(b.bv));
            let a = g.attention(q, k, v, c.heads);
            attention.push(a);
            let o = g.linear(a, p.v(b.wo), p.v(b.bo));
            let o = mode.dropout(g, o, c.dropout);
            x = g.add(x, o);

            let h = g.layer_norm(x, p.v(b.ln2_g), p.v(b.ln2_b));
            let f = g.linear(h, p.v(b.w1), p.v(b.b1));
            let f = g.gelu(f);
            let f = mode.dropout(g, f, c.dropout);
            let f = g.linear(f, p.v(b.w2), p.v(b.b2));
            let f = mode.dropout(g, f, c.dropout);
            x = g.add(x, f);
            layers.push(x);
        }
        let output = g.layer_norm(x, p.v(self.final_g), p.v(self.final_b));
        EncoderRun {
            layers,
            output,
            attention,
        }
    }
}

/// Per-block outputs of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub per_layer: Vec<Mat>,
    pub output: Mat,
}

/// Per-layer, per-head attention maps and their global average.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<Vec<Mat>>,
    pub averaged: Mat,
}

/// Averages over heads, then over layers.
pub fn average_maps(maps: &[Vec<Mat>]) -> Option<Mat> {
    let first = maps.first()?.first()?;
    let mut total = Mat::zeros(first.dim());
    for layer in maps {
        let mut per_layer = Mat::zeros(first.dim());
        for head in layer {
            per_layer += head;
        }
        total += &(per_layer / layer.len() as f64);
    }
    Some(total / maps.len() as f64)
}

/// Gradient-free encoder pass over `T × input_dim` features.
pub fn transformer_forward(
    encoder: &Encoder,
    params: &ParamSet,
    features: &Mat,
    mode: &mut Mode,
    collect: bool,
) -> Result<(LayerOutputs, Option<AttentionMaps>)> {
    if features.nrows() == 0 || features.ncols() != encoder.cfg.input_dim {
        return Err(Error::Shape(format!(
            "encoder input {:?}, expected T × {}",
            features.dim(),
            encoder.cfg.input_dim
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let x = encoder.embed(&mut g, &p, x);
    let run = encoder.blocks(&mut g, &p, x, mode);
    let outputs = LayerOutputs {
        per_layer: run.layers.iter().map(|&v| g.value(v).clone()).collect(),
        output: g.value(run.output).clone(),
    };
    let maps = if collect {
        let maps: Vec<Vec<Mat>> = run
            .attention
            .iter()
            .map(|&a| g.attention_maps(a).expect("attention node").to_vec())
            .collect();
        let l = features.nrows();
        let averaged = average_maps(&maps).unwrap_or_else(|| Mat::zeros((l, l)));
        Some(AttentionMaps { maps, averaged })
    } else {
        None
    };
    Ok((outputs, maps))
}

/// Mean of the last `k` per-layer outputs.
pub fn layer_average(outputs: &[Mat], k: usize) -> Result<Mat> {
    if k == 0 || k > outputs.len() {
        return Err(Error::arg(
            "k",
            format!("{k} layers requested from {}", outputs.len()),
        ));
    }
    let tail = &outputs[outputs.len() - k..];
    let mut acc = tail[0].clone();
    for m in &tail[1..] {
        acc += m;
    }
    Ok(acc / k as f64)
}

/// Graph form of [`layer_average`].
pub fn layer_average_node(g: &mut Graph, layers: &[Var], k: usize) -> Result<Var> {
    if k == 0 || k > layers.len() {
        return Err(Error::arg(
            "k",
            format!("{k} layers requested from {}", layers.len()),
        ));
    }
    Ok(g.mean(&layers[layers.len() - k..]))
}

#[derive(Debug, Clone)]
struct DecoderBlockIdx {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
}

/// Grouped same-length convolutions regressing teacher targets.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    embed_dim: usize,
    in_w: usize,
    in_b: usize,
    blocks: Vec<DecoderBlockIdx>,
    out_w: usize,
    out_b: usize,
}

impl Decoder {
    pub fn new(net: &NetworkConfig) -> Result<Self> {
        net.validate()?;
        let cfg = net.decoder;
        let mut next = 0..;
        let mut take = || next.next().unwrap();
        let (in_w, in_b) = (take(), take());
        let blocks = (0..cfg.layers)
            .map(|_| DecoderBlockIdx {
                w: take(),
                b: take(),
                ln_g: take(),
                ln_b: take(),
            })
            .collect();
        let (out_w, out_b) = (take(), take());
        Ok(Decoder {
            cfg,
            embed_dim: net.embed_dim,
            in_w,
            in_b,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let (d, e) = (self.cfg.dim, self.embed_dim);
        let mut p = ParamSet::new();
        p.add("dec.in.w", fan_in_init(rng, e, e, d), true);
        p.add("dec.in.b", Mat::zeros((1, d)), true);
        let fan = self.cfg.kernel * d / self.cfg.groups;
        for i in 0..self.cfg.layers {
            p.add(format!("dec.l{i}.w"), fan_in_init(rng, fan, fan, d), true);
            p.add(format!("dec.l{i}.b"), Mat::zeros((1, d)), true);
            p.add(format!("dec.l{i}.ln.g"), Mat::ones((1, d)), true);
            p.add(format!("dec.l{i}.ln.b"), Mat::zeros((1, d)), true);
        }
        p.add("dec.out.w", fan_in_init(rng, d, d, e), true);
        p.add("dec.out.b", Mat::zeros((1, e)), true);
        p
    }

    /// `T × embed_dim` in, `T × embed_dim` predictions out. Blocks are
    /// conv → layer norm → GELU with a residual on every block after the first.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut y = g.linear(x, p.v(self.in_w), p.v(self.in_b));
        let geom = ConvGeom::same(self.cfg.kernel, self.cfg.groups);
        for (i, b) in self.blocks.iter().enumerate() {
            let residual = y;
            let mut h = g.conv1d(y, p.v(b.w), Some(p.v(b.b)), geom);
            h = g.layer_norm(h, p.v(b.ln_g), p.v(b.ln_b));
            h = g.gelu(h);
            y = if i > 0 { g.add(h, residual) } else { h };
        }
        g.linear(y, p.v(self.out_w), p.v(self.out_b))
    }
}

/// Sigmoid-activated linear projection to class likelihoods.
#[derive(Debug, Clone)]
pub struct Head {
    embed_dim: usize,
    n_classes: usize,
}

impl Head {
    pub fn new(net: &NetworkConfig) -> Self {
        Head {
            embed_dim: net.embed_dim,
            n_classes: net.n_classes,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        p.add(
            "head.w",
            fan_in_init(rng, self.embed_dim, self.embed_dim, self.n_classes),
            true,
        );
        p.add("head.b", Mat::zeros((1, self.n_classes)), true);
        p
    }

    pub fn logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.v(0), p.v(1))
    }
}

/// `σ(x·W + b)` per frame and class.
pub fn classification_head(features: &Mat, params: &ParamSet) -> Result<Mat> {
    let (w, b) = (params.get(0), params.get(1));
    if features.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "head expects width {}, got {}",
            w.nrows(),
            features.ncols()
        )));
    }
    Ok((features.dot(w) + b).mapv(sigmoid))
}
