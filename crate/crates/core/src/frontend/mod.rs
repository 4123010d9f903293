//! Raw-waveform feature extractor: a learnable sinc filterbank with one
//! PSwish per filter, followed by a strided convolution stack that brings the
//! signal down to the embedding frame rate.

pub mod sinc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Mat, Var};
use crate::corpus::AudioClip;
use crate::error::{Error, Result};
use crate::params::{fan_in_init, Bound, ParamSet};

pub use sinc::{band_mass, cumulative_frequency_response, kernel_length, mel_initialize, SincFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(channels: usize, width: usize, stride: usize) -> Self {
        ConvLayerSpec {
            channels,
            width,
            stride,
        }
    }
}

/// Activation applied to each sinc filter output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SincActivation {
    PSwish,
    LeakyRelu,
    Identity,
}

pub const PSWISH_ALPHA_INIT: f64 = 2.0;
pub const PSWISH_BETA_INIT: f64 = 0.0;
const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub n_filters: usize,
    pub sample_rate: u32,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub sinc_activation: SincActivation,
}

/// Feature-extractor layout used for 8 kHz field recordings: total stride 40.
pub const FIELD_LAYOUT: [ConvLayerSpec; 7] = [
    ConvLayerSpec::new(512, 10, 5),
    ConvLayerSpec::new(512, 3, 2),
    ConvLayerSpec::new(512, 3, 2),
    ConvLayerSpec::new(512, 3, 2),
    ConvLayerSpec::new(512, 3, 1),
    ConvLayerSpec::new(512, 2, 1),
    ConvLayerSpec::new(512, 2, 1),
];

impl FrontendConfig {
    /// Full-size configuration: 127 filters at 8 kHz with [`FIELD_LAYOUT`].
    pub fn field_scale() -> Self {
        FrontendConfig {
            n_filters: 127,
            sample_rate: 8000,
            conv_layers: FIELD_LAYOUT.to_vec(),
            sinc_activation: SincActivation::PSwish,
        }
    }

    /// The field layout with every layer narrowed to `channels`.
    pub fn narrowed(n_filters: usize, channels: usize) -> Self {
        let mut cfg = Self::field_scale();
        cfg.n_filters = n_filters;
        for l in &mut cfg.conv_layers {
            l.channels = channels;
        }
        cfg
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|l| l.stride).product()
    }

    pub fn effective_rate(&self) -> f64 {
        self.sample_rate as f64 / self.total_stride() as f64
    }

    pub fn kernel_len(&self) -> Result<usize> {
        kernel_length(self.sample_rate)
    }

    pub fn out_dim(&self) -> usize {
        self.conv_layers
            .last()
            .map_or(self.n_filters, |l| l.channels)
    }

    /// Number of output frames for `n_samples` input samples, following
    /// `L' = floor((L - w) / s) + 1` through every valid convolution.
    pub fn output_len(&self, n_samples: usize) -> Option<usize> {
        let k = self.kernel_len().ok()?;
        let mut len = ConvGeom::valid(k, 1).out_len(n_samples)?;
        for l in &self.conv_layers {
            len = ConvGeom::valid(l.width, l.stride).out_len(len)?;
        }
        Some(len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters < 2 {
            return Err(Error::arg("frontend.n_filters", "need at least two filters"));
        }
        self.kernel_len()?;
        for l in &self.conv_layers {
            if l.channels == 0 || l.width == 0 || l.stride == 0 {
                return Err(Error::arg("frontend.conv_layers", format!("invalid layer {l:?}")));
            }
        }
        Ok(())
    }
}

/// Receptive field of one output frame, in samples and milliseconds.
pub fn receptive_field(config: &FrontendConfig, sinc_kernel_len: usize) -> (usize, f64) {
    let mut rf = 1usize;
    for l in config.conv_layers.iter().rev() {
        rf = (rf - 1) * l.stride + l.width;
    }
    if sinc_kernel_len > 0 {
        rf = rf - 1 + sinc_kernel_len;
    }
    (rf, rf as f64 / config.sample_rate as f64 * 1000.0)
}

#[derive(Debug, Clone)]
struct ConvIdx {
    w: usize,
    b: usize,
    norm_g: usize,
    norm_b: usize,
    spec: ConvLayerSpec,
}

/// Parameter layout and forward pass of the feature extractor.
#[derive(Debug, Clone)]
pub struct Frontend {
    config: FrontendConfig,
    kernel_len: usize,
    low: usize,
    band: usize,
    alpha: usize,
    beta: usize,
    norm_g: usize,
    norm_b: usize,
    convs: Vec<ConvIdx>,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let kernel_len = config.kernel_len()?;
        let mut next = 0..;
        let mut take = || next.next().unwrap();
        let (low, band, alpha, beta, norm_g, norm_b) =
            (take(), take(), take(), take(), take(), take());
        let convs = config
            .conv_layers
            .iter()
            .map(|&spec| ConvIdx {
                w: take(),
                b: take(),
                norm_g: take(),
                norm_b: take(),
                spec,
            })
            .collect();
        Ok(Frontend {
            config,
            kernel_len,
            low,
            band,
            alpha,
            beta,
            norm_g,
            norm_b,
            convs,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    /// Mel-initialized filters, identity PSwish, fan-in scaled convolutions.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let n = self.config.n_filters;
        let filters = mel_initialize(n, self.config.sample_rate).expect("validated");
        let mut p = ParamSet::new();
        p.add(
            "sinc.low",
            Array2::from_shape_fn((1, n), |(_, f)| filters[f].f_low),
            true,
        );
        p.add(
            "sinc.band",
            Array2::from_shape_fn((1, n), |(_, f)| filters[f].bandwidth),
            true,
        );
        p.add("sinc.alpha", Mat::from_elem((1, n), PSWISH_ALPHA_INIT), false);
        p.add("sinc.beta", Mat::from_elem((1, n), PSWISH_BETA_INIT), false);
        p.add("sinc.norm.g", Mat::ones((1, n)), true);
        p.add("sinc.norm.b", Mat::zeros((1, n)), true);
        let mut c_in = n;
        for (i, c) in self.convs.iter().enumerate() {
            let fan_in = c.spec.width * c_in;
            p.add(
                format!("conv{i}.w"),
                fan_in_init(rng, fan_in, fan_in, c.spec.channels),
                true,
            );
            p.add(format!("conv{i}.b"), Mat::zeros((1, c.spec.channels)), true);
            p.add(format!("conv{i}.norm.g"), Mat::ones((1, c.spec.channels)), true);
            p.add(format!("conv{i}.norm.b"), Mat::zeros((1, c.spec.channels)), true);
            c_in = c.spec.channels;
        }
        p
    }

    /// Current sinc filters read from a parameter set.
    pub fn filters(&self, params: &ParamSet) -> Vec<SincFilter> {
        let low = params.get(self.low);
        let band = params.get(self.band);
        (0..self.config.n_filters)
            .map(|f| SincFilter::new(low[[0, f]], band[[0, f]]))
            .collect()
    }

    pub fn check_length(&self, n_samples: usize) -> Result<usize> {
        match self.config.output_len(n_samples) {
            Some(t) if t >= 1 => Ok(t),
            _ => Err(Error::Shape(format!(
                "{n_samples} samples is shorter than the frontend receptive field"
            ))),
        }
    }

    /// Records the frontend on `g`; returns a `T × out_dim` node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, wave: &[f64]) -> Result<Var> {
        self.check_length(wave.len())?;
        let x = g.constant(Array2::from_shape_vec((wave.len(), 1), wave.to_vec()).expect("column"));
        let kernels = g.sinc_bank(
            p.v(self.low),
            p.v(self.band),
            self.config.sample_rate as f64,
            self.kernel_len,
        );
        let mut y = g.conv1d(x, kernels, None, ConvGeom::valid(self.kernel_len, 1));
        y = match self.config.sinc_activation {
            SincActivation::PSwish => g.pswish(y, p.v(self.alpha), p.v(self.beta)),
            SincActivation::LeakyRelu => g.leaky_relu(y, LEAKY_SLOPE),
            SincActivation::Identity => y,
        };
        y = g.layer_norm(y, p.v(self.norm_g), p.v(self.norm_b));
        for c in &self.convs {
            y = g.conv1d(
                y,
                p.v(c.w),
                Some(p.v(c.b)),
                ConvGeom::valid(c.spec.width, c.spec.stride),
            );
            y = g.gelu(y);
            y = g.layer_norm(y, p.v(c.norm_g), p.v(c.norm_b));
        }
        Ok(y)
    }

    /// Gradient-free forward pass over a clip.
    pub fn features(&self, params: &ParamSet, clip: &AudioClip) -> Result<Mat> {
        if clip.sample_rate != self.config.sample_rate {
            return Err(Error::arg(
                "clip",
                format!(
                    "sample rate {} does not match the frontend's {}",
                    clip.sample_rate, self.config.sample_rate
                ),
            ));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let y = self.forward(&mut g, &p, &clip.samples)?;
        Ok(g.value(y).clone())
    }
}
