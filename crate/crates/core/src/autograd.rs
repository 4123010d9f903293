//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every value in the model is a `T × C` matrix (time rows, channel columns)
//! or a `1 × C` row vector. A [`Graph`] records one forward pass as a tape of
//! coarse operations, each carrying its own hand-written backward rule.
//! Nodes whose inputs never touch a trainable leaf are marked as not
//! requiring gradients and are skipped entirely during [`Graph::backward`].

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]` inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution over the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn valid(kernel: usize, stride: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad: 0,
            groups: 1,
        }
    }

    pub fn same(kernel: usize, groups: usize) -> Self {
        ConvGeom {
            kernel,
            stride: 1,
            pad: kernel / 2,
            groups,
        }
    }

    /// Output length, or `None` when the input is shorter than the kernel.
    pub fn out_len(&self, t_in: usize) -> Option<usize> {
        let padded = t_in + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Gelu(Var),
    LeakyRelu(Var, f64),
    PSwish {
        x: Var,
        alpha: Var,
        beta: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Mat>,
    },
    SincBank {
        low: Var,
        band: Var,
        sample_rate: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        maps: Vec<Mat>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        kept: Var,
        index: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Mat,
        rows: Vec<usize>,
    },
    Focal {
        logits: Var,
        target: Mat,
        gamma: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`], produced by [`Graph::backward`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `x + bias`, broadcasting a `1 × C` bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        self.push(value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        let value = self.value(x) * &c;
        self.push(value, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of zero nodes");
        let mut value = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            value += self.value(x);
        }
        self.push(value, Op::Sum(xs.to_vec()), xs)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let total = self.sum(xs);
        self.scale(total, 1.0 / xs.len() as f64)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    /// `x · α · σ(β · x)` with per-column `α` and `β` (`1 × C`).
    pub fn pswish(&mut self, x: Var, alpha: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let a = self.value(alpha);
        let b = self.value(beta);
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = pswish(*v, a[[0, c]], b[[0, c]]);
            }
        }
        self.push(value, Op::PSwish { x, alpha, beta }, &[x, alpha, beta])
    }

    /// Layer normalization over the columns of every row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// 1-D convolution of a `T × C_in` sequence with a weight of shape
    /// `(kernel · C_in / groups) × C_out`.
    ///
    /// Panics if the input is shorter than the kernel; callers validate lengths.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let wv = self.value(w);
        let (t_in, c_in) = xv.dim();
        let c_out = wv.ncols();
        let t_out = geom
            .out_len(t_in)
            .expect("conv1d input shorter than kernel");
        assert_eq!(c_in % geom.groups, 0, "input channels not divisible by groups");
        assert_eq!(c_out % geom.groups, 0, "output channels not divisible by groups");
        let cig = c_in / geom.groups;
        let cog = c_out / geom.groups;
        assert_eq!(wv.nrows(), geom.kernel * cig, "conv weight rows");

        let needs_cache = self.requires_grad(x) || self.requires_grad(w);
        let mut out = Mat::zeros((t_out, c_out));
        let mut cached = Vec::new();
        for g in 0..geom.groups {
            let cols = im2col(xv.view(), geom, g, cig, t_out);
            let wg = wv.slice(s![.., g * cog..(g + 1) * cog]);
            out.slice_mut(s![.., g * cog..(g + 1) * cog])
                .assign(&cols.dot(&wg));
            if needs_cache {
                cached.push(cols);
            }
        }
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            out += self.value(b);
            inputs.push(b);
        }
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols: cached,
            },
            &inputs,
        )
    }

    /// Builds the `len × F` band-pass kernel matrix from `1 × F` lower-cutoff
    /// and bandwidth parameters (in Hz).
    pub fn sinc_bank(&mut self, low: Var, band: Var, sample_rate: f64, len: usize) -> Var {
        let lv = self.value(low);
        let bv = self.value(band);
        let n = lv.ncols();
        let mut value = Mat::zeros((len, n));
        for f in 0..n {
            let k = crate::frontend::sinc::band_pass(lv[[0, f]], bv[[0, f]], sample_rate, len);
            value.column_mut(f).assign(&ndarray::Array1::from(k));
        }
        self.push(
            value,
            Op::SincBank {
                low,
                band,
                sample_rate,
            },
            &[low, band],
        )
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `L × d`
    /// with `d` split evenly into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (l, d) = self.value(q).dim();
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let dh = d / heads;
        let mut out = Mat::zeros((l, d));
        let mut maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = self.value(q).slice(cols);
            let kh = self.value(k).slice(cols);
            let vh = self.value(v).slice(cols);
            let (oh, a) = scaled_dot_attention(qh, kh, vh, dh as f64);
            out.slice_mut(cols).assign(&oh);
            maps.push(a);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                maps,
            },
            &[q, k, v],
        )
    }

    /// Attention maps recorded by an attention node, one `L × L` matrix per head.
    pub fn attention_maps(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { maps, .. } => Some(maps),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), index);
        self.push(value, Op::GatherRows(x, index.to_vec()), &[x])
    }

    /// Places row `i` of `kept` at row `index[i]` of `fill`; the remaining rows
    /// keep the values of `fill`.
    pub fn scatter_rows(&mut self, kept: Var, index: &[usize], fill: Mat) -> Var {
        let kv = self.value(kept);
        assert_eq!(kv.nrows(), index.len(), "scatter index length");
        assert_eq!(kv.ncols(), fill.ncols(), "scatter width");
        let mut value = fill;
        for (i, &r) in index.iter().enumerate() {
            value.row_mut(r).assign(&kv.row(i));
        }
        self.push(
            value,
            Op::ScatterRows {
                kept,
                index: index.to_vec(),
            },
            &[kept],
        )
    }

    /// Mean squared error restricted to `rows`; zero when `rows` is empty.
    pub fn masked_mse(&mut self, pred: Var, target: Mat, rows: &[usize]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape mismatch");
        let mut total = 0.0;
        for &r in rows {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                total += (p - t) * (p - t);
            }
        }
        let n = rows.len() * pv.ncols();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            &[pred],
        )
    }

    /// Mean focal loss of sigmoid(`logits`) against soft targets in `[0, 1]`.
    pub fn focal_from_logits(&mut self, logits: Var, target: Mat, gamma: f64) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.dim(), target.dim(), "focal shape mismatch");
        let mut total = 0.0;
        for (z, y) in zv.iter().zip(target.iter()) {
            let p = clamp_prob(sigmoid(*z));
            total += focal_value(p, *y, gamma);
        }
        let loss = total / zv.len().max(1) as f64;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::Focal {
                logits,
                target,
                gamma,
            },
            &[logits],
        )
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, g, &mut grads);
        }
        Grads(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*bias) {
                    accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, &g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::MulConst(x, c) => accumulate(grads, *x, g * c),
            Op::Scale(x, s) => accumulate(grads, *x, g * *s),
            Op::Sum(xs) => {
                for x in xs {
                    if self.wants(*x) {
                        accumulate(grads, *x, g.clone());
                    }
                }
            }
            Op::Gelu(x) => {
                let mut dx = g;
                dx.zip_mut_with(self.value(*x), |d, &v| *d *= gelu_grad(v));
                accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut dx = g;
                dx.zip_mut_with(self.value(*x), |d, &v| {
                    if v <= 0.0 {
                        *d *= slope
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::PSwish { x, alpha, beta } => {
                let xv = self.value(*x);
                let a = self.value(*alpha);
                let b = self.value(*beta);
                let cols = xv.ncols();
                let mut dx = Mat::zeros(xv.dim());
                let mut da = Mat::zeros((1, cols));
                let mut db = Mat::zeros((1, cols));
                for ((r, c), &v) in xv.indexed_iter() {
                    let (ac, bc) = (a[[0, c]], b[[0, c]]);
                    let sg = sigmoid(bc * v);
                    let gv = g[[r, c]];
                    dx[[r, c]] = gv * ac * (sg + bc * v * sg * (1.0 - sg));
                    da[[0, c]] += gv * v * sg;
                    db[[0, c]] += gv * ac * v * v * sg * (1.0 - sg);
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*alpha) {
                    accumulate(grads, *alpha, da);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    accumulate(
                        grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut dx = &g * gam;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let sum_d: f64 = row.sum();
                        let sum_dx: f64 = row.iter().zip(xhat.row(r)).map(|(d, h)| d * h).sum();
                        let is = inv_std[r];
                        for (c, d) in row.iter_mut().enumerate() {
                            *d = is / cols * (cols * *d - sum_d - xhat[[r, c]] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                let wv = self.value(*w);
                let (t_in, c_in) = self.value(*x).dim();
                let cog = wv.ncols() / geom.groups;
                let cig = c_in / geom.groups;
                if self.wants(*w) {
                    let mut dw = Mat::zeros(wv.dim());
                    for (gi, col) in cols.iter().enumerate() {
                        let gg = g.slice(s![.., gi * cog..(gi + 1) * cog]);
                        dw.slice_mut(s![.., gi * cog..(gi + 1) * cog])
                            .assign(&col.t().dot(&gg));
                    }
                    accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = Mat::zeros((t_in, c_in));
                    for gi in 0..geom.groups {
                        let gg = g.slice(s![.., gi * cog..(gi + 1) * cog]);
                        let wg = wv.slice(s![.., gi * cog..(gi + 1) * cog]);
                        let dcols = gg.dot(&wg.t());
                        col2im(&dcols, &mut dx, *geom, gi, cig);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SincBank {
                low,
                band,
                sample_rate,
            } => {
                let lv = self.value(*low);
                let bv = self.value(*band);
                let len = node.value.nrows();
                let n = lv.ncols();
                let mut dl = Mat::zeros((1, n));
                let mut dband = Mat::zeros((1, n));
                for f in 0..n {
                    let (gl, gb) = crate::frontend::sinc::band_pass_grad(
                        lv[[0, f]],
                        bv[[0, f]],
                        *sample_rate,
                        len,
                    );
                    let col = g.column(f);
                    dl[[0, f]] = col.iter().zip(&gl).map(|(a, b)| a * b).sum();
                    dband[[0, f]] = col.iter().zip(&gb).map(|(a, b)| a * b).sum();
                }
                if self.wants(*low) {
                    accumulate(grads, *low, dl);
                }
                if self.wants(*band) {
                    accumulate(grads, *band, dband);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                maps,
            } => {
                let (l, d) = self.value(*q).dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros((l, d));
                let mut dk = Mat::zeros((l, d));
                let mut dv = Mat::zeros((l, d));
                for (h, a) in maps.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let qh = self.value(*q).slice(cols);
                    let kh = self.value(*k).slice(cols);
                    let vh = self.value(*v).slice(cols);
                    dv.slice_mut(cols).assign(&a.t().dot(&go));
                    let da = go.dot(&vh.t());
                    let mut ds = da;
                    for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                        let dot: f64 = row.iter().zip(a.row(r)).map(|(x, y)| x * y).sum();
                        for (c, x) in row.iter_mut().enumerate() {
                            *x = a[[r, c]] * (*x - dot) * scale;
                        }
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kh));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qh));
                }
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::GatherRows(x, index) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                for (i, &r) in index.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &g.row(i);
                }
                accumulate(grads, *x, dx);
            }
            Op::ScatterRows { kept, index } => {
                let dk = g.select(Axis(0), index);
                accumulate(grads, *kept, dk);
            }
            Op::MaskedMse { pred, target, rows } => {
                let pv = self.value(*pred);
                let mut dp = Mat::zeros(pv.dim());
                let n = rows.len() * pv.ncols();
                if n > 0 {
                    let coef = 2.0 * g[[0, 0]] / n as f64;
                    for &r in rows {
                        for c in 0..pv.ncols() {
                            dp[[r, c]] = coef * (pv[[r, c]] - target[[r, c]]);
                        }
                    }
                }
                accumulate(grads, *pred, dp);
            }
            Op::Focal {
                logits,
                target,
                gamma,
            } => {
                let zv = self.value(*logits);
                let coef = g[[0, 0]] / zv.len().max(1) as f64;
                let mut dz = Mat::zeros(zv.dim());
                for ((idx, z), y) in zv.indexed_iter().zip(target.iter()) {
                    let raw = sigmoid(*z);
                    if raw <= FOCAL_EPS || raw >= 1.0 - FOCAL_EPS {
                        continue;
                    }
                    dz[idx] = coef * focal_dp(raw, *y, *gamma) * raw * (1.0 - raw);
                }
                accumulate(grads, *logits, dz);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: ArrayView2<f64>, geom: ConvGeom, group: usize, cig: usize, t_out: usize) -> Mat {
    let t_in = x.nrows();
    let width = geom.kernel * cig;
    let mut cols = Mat::zeros((t_out, width));
    let c0 = group * cig;
    for t in 0..t_out {
        let mut row = cols.row_mut(t);
        let row = row.as_slice_mut().expect("standard layout");
        for kk in 0..geom.kernel {
            let src = (t * geom.stride + kk) as isize - geom.pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let xr = x.row(src as usize);
            let xr = xr.as_slice().expect("standard layout");
            row[kk * cig..(kk + 1) * cig].copy_from_slice(&xr[c0..c0 + cig]);
        }
    }
    cols
}

fn col2im(dcols: &Mat, dx: &mut Mat, geom: ConvGeom, group: usize, cig: usize) {
    let t_in = dx.nrows();
    let c0 = group * cig;
    for (t, row) in dcols.rows().into_iter().enumerate() {
        for kk in 0..geom.kernel {
            let src = (t * geom.stride + kk) as isize - geom.pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let mut dst = dx.slice_mut(s![src as usize, c0..c0 + cig]);
            dst += &row.slice(s![kk * cig..(kk + 1) * cig]);
        }
    }
}

/// Single-head attention: returns `(softmax(Q·Kᵀ/√n)·V, A)`.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n: f64,
) -> (Mat, Mat) {
    let mut a = q.dot(&k.t()) / n.sqrt();
    softmax_rows(&mut a);
    let out = a.dot(&v);
    (out, a)
}

pub fn softmax_rows(a: &mut Mat) {
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.mapv_inplace(|x| x / total);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn pswish(x: f64, alpha: f64, beta: f64) -> f64 {
    x * alpha * sigmoid(beta * x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
}

/// Focal loss of one (likelihood, soft target) pair; `p` must already be clamped.
pub fn focal_value(p: f64, y: f64, gamma: f64) -> f64 {
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    if gamma == 0.0 {
        return bce;
    }
    let q = p + y - 2.0 * p * y;
    q.max(0.0).powf(gamma) * bce
}

fn focal_dp(p: f64, y: f64, gamma: f64) -> f64 {
    let dbce = -y / p + (1.0 - y) / (1.0 - p);
    if gamma == 0.0 {
        return dbce;
    }
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let q = (p + y - 2.0 * p * y).max(0.0);
    let w = q.powf(gamma);
    let dw = if q > 0.0 {
        gamma * q.powf(gamma - 1.0) * (1.0 - 2.0 * y)
    } else {
        0.0
    };
    dw * bce + w * dbce
}
