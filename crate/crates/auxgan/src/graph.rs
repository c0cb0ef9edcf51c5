//! Reverse-mode automatic differentiation over an eagerly evaluated tape.
//!
//! Every operation computes its value immediately and records what backward
//! needs on the tape. The tape order is a topological order by construction,
//! so `backward` is a single reverse sweep. One [`Graph`] instance is built
//! per forward/backward pass; parameters live outside the graph and enter as
//! leaves.
//!
//! Convolutions run as im2col + matrix multiply, processed in bounded strips
//! so high resolutions never materialize a full column matrix. Per-sample
//! work may run on multiple threads; all reductions happen in fixed index
//! order, so results are bitwise identical for any thread count.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix2, Ix4, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::dims4;

pub type TensorD = ArrayD<f64>;

/// Forward mode: train updates batch-norm running statistics, eval uses them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Running statistics and constants for one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    AffineScalar { x: usize, mul: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Softplus { x: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    Linear { x: usize, w: usize, bias: Option<usize> },
    BnStandardize { x: usize, invstd: Array1<f64>, train: bool },
    ChannelAffine { x: usize, gain: usize, bias: usize },
    SampleChannelAffine { x: usize, gain: usize, bias: usize },
    ResizeNearest { x: usize },
    AvgPool2x2 { x: usize },
    ConcatChannels { xs: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols { xs: Vec<usize> },
    GlobalSumPool { x: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
    SpectralNorm { w: usize, u: Array1<f64>, v: Array1<f64>, sigma: f64 },
    Reshape { x: usize },
    EmbedRows { table: usize, idx: Vec<usize> },
    RowDot { a: usize, b: usize },
    SoftmaxRows { x: usize },
}

struct Node {
    value: TensorD,
    grad: Option<TensorD>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    parallel: bool,
    grad_enabled: bool,
}

/// Max f64 elements per im2col strip (bounds transient conv memory).
const STRIP_ELEMS: usize = 1 << 21;

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            parallel: true,
            grad_enabled: true,
        }
    }

    /// Forward-only graph: every leaf is created without gradient tracking.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    /// Disable per-sample threading; results are identical either way.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    fn push(&mut self, value: TensorD, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn leaf(&mut self, value: TensorD, needs_grad: bool) -> Var {
        let ng = needs_grad && self.grad_enabled;
        self.push(value, Op::Leaf, ng)
    }

    pub fn constant(&mut self, value: TensorD) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &TensorD {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&TensorD> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<TensorD> {
        self.nodes[v.0].grad.take()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise -----------------------------------------------------

    /// y = mul * x + add
    pub fn affine_scalar(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| mul * v + add);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::AffineScalar { x: x.0, mul }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine_scalar(x, -1.0, 0.0)
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "add")?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "sub")?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "mul")?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Relu { x: x.0 }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid_stable);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Sigmoid { x: x.0 }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::tanh);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Tanh { x: x.0 }, ng)
    }

    /// log(1 + exp(x)) in a saturation-proof form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(softplus_stable);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Softplus { x: x.0 }, ng)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.nodes[x.0].value.len() {
            return Err(Error::config(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::config(format!("reshape: {e}")))?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape { x: x.0 }, ng))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat_channels: empty input list"));
        }
        let first = dims4(&self.nodes[xs[0].0].value, "concat_channels")?;
        let mut channels = 0usize;
        for &v in xs {
            let (n, c, h, w) = dims4(&self.nodes[v.0].value, "concat_channels")?;
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::config(format!(
                    "concat_channels: batch/spatial mismatch ({n},{h},{w}) vs ({},{},{})",
                    first.0, first.2, first.3
                )));
            }
            channels += c;
        }
        let (n, _, h, w) = first;
        let mut value = Array4::zeros((n, channels, h, w));
        let mut c0 = 0usize;
        for &v in xs {
            let a = view4(&self.nodes[v.0].value);
            let c = a.dim().1;
            value.slice_mut(s![.., c0..c0 + c, .., ..]).assign(&a);
            c0 += c;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(value.into_dyn(), Op::ConcatChannels { xs: ids }, ng))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ndarray::arr0(self.nodes[x.0].value.sum()).into_dyn();
        let ng = self.needs(&[x.0]);
        self.push(value, Op::SumAll { x: x.0 }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].value.len() as f64;
        let value = ndarray::arr0(self.nodes[x.0].value.sum() / len).into_dyn();
        let ng = self.needs(&[x.0]);
        self.push(value, Op::MeanAll { x: x.0 }, ng)
    }

    /// (n,c,h,w) -> (n,c), summing over the spatial dims.
    pub fn global_sum_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, _, _) = dims4(&self.nodes[x.0].value, "global_sum_pool")?;
        let a = view4(&self.nodes[x.0].value);
        let mut value = Array2::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                value[[i, j]] = a.slice(s![i, j, .., ..]).sum();
            }
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(value.into_dyn(), Op::GlobalSumPool { x: x.0 }, ng))
    }

    // ---- dense -------------------------------------------------------------

    /// y = x · wᵀ (+ bias); x: (n,d), w: (k,d), bias: (k).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::config(format!(
                "linear: incompatible shapes x{xs:?} w{ws:?}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(Error::config(format!(
                    "linear: bias shape {bs:?} does not match output dim {}",
                    ws[0]
                )));
            }
        }
        let xm = view2(&self.nodes[x.0].value);
        let wm = view2(&self.nodes[w.0].value);
        let mut value = xm.dot(&wm.t());
        if let Some(b) = bias {
            let bv = view1(&self.nodes[b.0].value);
            value += &bv.broadcast((value.dim().0, bv.len())).unwrap();
        }
        let ng = self.needs(&[x.0, w.0]) || bias.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
        Ok(self.push(
            value.into_dyn(),
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
            },
            ng,
        ))
    }

    /// Row lookup: table (k,d) gathered at idx -> (n,d).
    pub fn embed_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::config("embed_rows: table must be rank 2"));
        }
        let (k, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::config(format!(
                "embed_rows: index {bad} out of range for {k} rows"
            )));
        }
        let tm = view2(&self.nodes[table.0].value);
        let mut value = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&tm.row(i));
        }
        let ng = self.needs(&[table.0]);
        Ok(self.push(
            value.into_dyn(),
            Op::EmbedRows {
                table: table.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row inner product of two (n,d) arrays -> (n,).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b, "row_dot")?;
        if self.shape(a).len() != 2 {
            return Err(Error::config("row_dot: inputs must be rank 2"));
        }
        let am = view2(&self.nodes[a.0].value);
        let bm = view2(&self.nodes[b.0].value);
        let value: Array1<f64> = am
            .outer_iter()
            .zip(bm.outer_iter())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value.into_dyn(), Op::RowDot { a: a.0, b: b.0 }, ng))
    }

    /// Column slice of a (n,d) matrix: x[:, start..end].
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::config(format!(
                "slice_cols: invalid range {start}..{end} for shape {s:?}"
            )));
        }
        let xm = view2(&self.nodes[x.0].value);
        let value = xm.slice(s![.., start..end]).to_owned();
        let ng = self.needs(&[x.0]);
        Ok(self.push(value.into_dyn(), Op::SliceCols { x: x.0, start }, ng))
    }

    /// Column-wise concatenation of (n,·) matrices.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat_cols: empty input list"));
        }
        let n = self.shape(xs[0])[0];
        let mut cols = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::config(format!(
                    "concat_cols: incompatible shape {s:?}"
                )));
            }
            cols += s[1];
        }
        let mut value = Array2::zeros((n, cols));
        let mut c0 = 0;
        for &v in xs {
            let m = view2(&self.nodes[v.0].value);
            let c = m.dim().1;
            value.slice_mut(s![.., c0..c0 + c]).assign(&m);
            c0 += c;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(value.into_dyn(), Op::ConcatCols { xs: ids }, ng))
    }

    /// Row-wise softmax of (n,k) logits.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::config("softmax_rows: input must be rank 2"));
        }
        let xm = view2(&self.nodes[x.0].value);
        let mut value = xm.to_owned();
        for mut row in value.outer_iter_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(value.into_dyn(), Op::SoftmaxRows { x: x.0 }, ng))
    }

    // ---- normalization -----------------------------------------------------

    /// Standardize (n,c,h,w) per channel. Train mode uses batch statistics and
    /// updates `state`; eval mode uses the running statistics.
    pub fn bn_standardize(&mut self, x: Var, state: &mut BnState) -> Result<Var> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "bn_standardize")?;
        if c != state.channels() {
            return Err(Error::config(format!(
                "bn_standardize: {c} channels but state holds {}",
                state.channels()
            )));
        }
        let train = self.is_train();
        let a = view4(&self.nodes[x.0].value);
        let m = (n * h * w) as f64;
        let (mean, var) = if train {
            if n * h * w < 2 {
                return Err(Error::numeric(
                    "bn_standardize: train mode needs batch*h*w >= 2 (degenerate variance)",
                ));
            }
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for j in 0..c {
                let ch = a.slice(s![.., j, .., ..]);
                let mu = ch.sum() / m;
                mean[j] = mu;
                var[j] = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            }
            let mom = state.momentum;
            state.running_mean.zip_mut_with(&mean, |r, &b| *r = (1.0 - mom) * *r + mom * b);
            state.running_var.zip_mut_with(&var, |r, &b| *r = (1.0 - mom) * *r + mom * b);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let invstd = var.mapv(|v| 1.0 / (v + state.eps).sqrt());
        let mut value = Array4::zeros((n, c, h, w));
        for j in 0..c {
            let mu = mean[j];
            let is = invstd[j];
            let src = a.slice(s![.., j, .., ..]);
            let mut dst = value.slice_mut(s![.., j, .., ..]);
            dst.assign(&src);
            dst.mapv_inplace(|v| (v - mu) * is);
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(
            value.into_dyn(),
            Op::BnStandardize {
                x: x.0,
                invstd,
                train,
            },
            ng,
        ))
    }

    /// y[n,c,·] = x[n,c,·] * gain[c] + bias[c]
    pub fn channel_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, c, _, _) = dims4(&self.nodes[x.0].value, "channel_affine")?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::config(format!(
                "channel_affine: gain/bias must have shape [{c}]"
            )));
        }
        let a = view4(&self.nodes[x.0].value);
        let g = view1(&self.nodes[gain.0].value);
        let b = view1(&self.nodes[bias.0].value);
        let mut value = a.to_owned();
        for j in 0..c {
            let (gj, bj) = (g[j], b[j]);
            value
                .slice_mut(s![.., j, .., ..])
                .mapv_inplace(|v| v * gj + bj);
        }
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value.into_dyn(),
            Op::ChannelAffine {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        ))
    }

    /// y[n,c,·] = x[n,c,·] * gain[n,c] + bias[n,c] (conditional BN affine)
    pub fn sample_channel_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, c, _, _) = dims4(&self.nodes[x.0].value, "sample_channel_affine")?;
        if self.shape(gain) != [n, c] || self.shape(bias) != [n, c] {
            return Err(Error::config(format!(
                "sample_channel_affine: gain/bias must have shape [{n},{c}]"
            )));
        }
        let a = view4(&self.nodes[x.0].value);
        let g = view2(&self.nodes[gain.0].value);
        let b = view2(&self.nodes[bias.0].value);
        let mut value = a.to_owned();
        for i in 0..n {
            for j in 0..c {
                let (gij, bij) = (g[[i, j]], b[[i, j]]);
                value
                    .slice_mut(s![i, j, .., ..])
                    .mapv_inplace(|v| v * gij + bij);
            }
        }
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value.into_dyn(),
            Op::SampleChannelAffine {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        ))
    }

    /// Divide a weight by the spectral-norm estimate σ = uᵀ W̃ v, with u, v
    /// held constant. W̃ is the weight flattened to (leading dim, rest).
    pub fn spectral_norm(&mut self, w: Var, u: &Array1<f64>, v: &Array1<f64>) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        if shape.is_empty() {
            return Err(Error::config("spectral_norm: scalar weight"));
        }
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        if u.len() != rows || v.len() != cols {
            return Err(Error::config(format!(
                "spectral_norm: u/v lengths ({}, {}) do not match flattened weight ({rows}, {cols})",
                u.len(),
                v.len()
            )));
        }
        let wm = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((rows, cols))
            .expect("weight is contiguous");
        let sigma = u.dot(&wm.dot(v));
        let value = if sigma.abs() < 1e-24 {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            self.nodes[w.0].value.mapv(|x| x / sigma)
        };
        let ng = self.needs(&[w.0]);
        Ok(self.push(
            value,
            Op::SpectralNorm {
                w: w.0,
                u: u.clone(),
                v: v.clone(),
                sigma,
            },
            ng,
        ))
    }

    // ---- resampling ----------------------------------------------------

    /// Nearest-neighbor resize to (out_h, out_w); src index = floor(dst*in/out).
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "resize_nearest")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("resize_nearest: zero output size"));
        }
        let a = view4(&self.nodes[x.0].value);
        let ys = nearest_map(out_h, h);
        let xs = nearest_map(out_w, w);
        let mut value = Array4::zeros((n, c, out_h, out_w));
        for i in 0..n {
            for j in 0..c {
                let src = a.slice(s![i, j, .., ..]);
                let mut dst = value.slice_mut(s![i, j, .., ..]);
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        dst[[oy, ox]] = src[[ys[oy], xs[ox]]];
                    }
                }
            }
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(value.into_dyn(), Op::ResizeNearest { x: x.0 }, ng))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::config("upsample_nearest: factor must be >= 1"));
        }
        let (_, _, h, w) = dims4(&self.nodes[x.0].value, "upsample_nearest")?;
        self.resize_nearest(x, h * factor, w * factor)
    }

    /// 2x2 non-overlapping average pooling; spatial dims must be even.
    pub fn avg_pool_down(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value, "avg_pool_down")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "avg_pool_down: spatial dims must be even, got {h}x{w}"
            )));
        }
        let a = view4(&self.nodes[x.0].value);
        let mut value = Array4::zeros((n, c, h / 2, w / 2));
        for i in 0..n {
            for j in 0..c {
                let src = a.slice(s![i, j, .., ..]);
                let mut dst = value.slice_mut(s![i, j, .., ..]);
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        dst[[oy, ox]] = 0.25
                            * (src[[2 * oy, 2 * ox]]
                                + src[[2 * oy, 2 * ox + 1]]
                                + src[[2 * oy + 1, 2 * ox]]
                                + src[[2 * oy + 1, 2 * ox + 1]]);
                    }
                }
            }
        }
        let ng = self.needs(&[x.0]);
        Ok(self.push(value.into_dyn(), Op::AvgPool2x2 { x: x.0 }, ng))
    }

    // ---- convolution -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4(&self.nodes[x.0].value, "conv2d input")?;
        let (o, wc, kh, kw) = dims4(&self.nodes[w.0].value, "conv2d weight")?;
        if stride < 1 {
            return Err(Error::config("conv2d: stride must be >= 1"));
        }
        if wc != c {
            return Err(Error::config(format!(
                "conv2d: input has {c} channels but weight expects {wc}"
            )));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::config(format!(
                    "conv2d: bias shape {:?} does not match {o} output channels",
                    self.shape(b)
                )));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let xv = view4(&self.nodes[x.0].value);
        let wm = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight is contiguous");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };

        let mut value = Array4::zeros((n, o, oh, ow));
        {
            let slices: Vec<(ArrayView3<f64>, ArrayViewMut3<f64>)> = xv
                .outer_iter()
                .zip(value.outer_iter_mut())
                .collect();
            let run = |(xi, mut yi): (ArrayView3<f64>, ArrayViewMut3<f64>)| {
                conv_forward_sample(&xi, &wm, &geom, &mut yi);
            };
            if self.parallel && n > 1 {
                slices.into_par_iter().for_each(run);
            } else {
                slices.into_iter().for_each(run);
            }
        }
        if let Some(b) = bias {
            let bv = view1(&self.nodes[b.0].value);
            for j in 0..o {
                let bj = bv[j];
                value.slice_mut(s![.., j, .., ..]).mapv_inplace(|v| v + bj);
            }
        }
        let ng = self.needs(&[x.0, w.0]) || bias.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
        Ok(self.push(
            value.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root; leaf gradients stay on the tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::config(format!(
                "backward: root must be scalar, has shape {:?}",
                self.shape(root)
            )));
        }
        let shape = self.nodes[root.0].value.raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::ones(shape));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("grad present");
            let deltas = self.op_backward(id, &g)?;
            for (pid, delta) in deltas {
                self.accum(pid, delta);
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, delta: TensorD) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn op_backward(&self, id: usize, g: &TensorD) -> Result<Vec<(usize, TensorD)>> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::AffineScalar { x, mul } => vec![(*x, g.mapv(|v| v * mul))],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.mapv(|v| -v))],
            Op::Mul { a, b } => vec![
                (*a, g * &self.nodes[*b].value),
                (*b, g * &self.nodes[*a].value),
            ],
            Op::Relu { x } => {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[*x].value, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![(*x, d)]
            }
            Op::Sigmoid { x } => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                vec![(*x, d)]
            }
            Op::Tanh { x } => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                vec![(*x, d)]
            }
            Op::Softplus { x } => {
                let mut d = g.clone();
                d.zip_mut_with(&self.nodes[*x].value, |gv, &xv| *gv *= sigmoid_stable(xv));
                vec![(*x, d)]
            }
            Op::Reshape { x } => {
                let shape = self.nodes[*x].value.raw_dim();
                vec![(
                    *x,
                    g.clone()
                        .into_shape_with_order(shape)
                        .expect("grad is contiguous"),
                )]
            }
            Op::ConcatChannels { xs } => {
                let gv = view4(g);
                let mut out = Vec::with_capacity(xs.len());
                let mut c0 = 0usize;
                for &xid in xs {
                    let c = self.nodes[xid].value.shape()[1];
                    let slice = gv.slice(s![.., c0..c0 + c, .., ..]).to_owned();
                    out.push((xid, slice.into_dyn()));
                    c0 += c;
                }
                out
            }
            Op::SliceCols { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let gm = view2(g);
                let mut d = Array2::zeros((xs[0], xs[1]));
                d.slice_mut(s![.., *start..*start + gm.dim().1]).assign(&gm);
                vec![(*x, d.into_dyn())]
            }
            Op::ConcatCols { xs } => {
                let gm = view2(g);
                let mut out = Vec::with_capacity(xs.len());
                let mut c0 = 0usize;
                for &xid in xs {
                    let c = self.nodes[xid].value.shape()[1];
                    let slice = gm.slice(s![.., c0..c0 + c]).to_owned();
                    out.push((xid, slice.into_dyn()));
                    c0 += c;
                }
                out
            }
            Op::SumAll { x } => {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let shape = self.nodes[*x].value.raw_dim();
                vec![(*x, ArrayD::from_elem(shape, gs))]
            }
            Op::MeanAll { x } => {
                let len = self.nodes[*x].value.len() as f64;
                let gs = g.iter().next().copied().unwrap_or(0.0) / len;
                let shape = self.nodes[*x].value.raw_dim();
                vec![(*x, ArrayD::from_elem(shape, gs))]
            }
            Op::GlobalSumPool { x } => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value, "global_sum_pool grad")?;
                let gm = view2(g);
                let mut d = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        d.slice_mut(s![i, j, .., ..]).fill(gm[[i, j]]);
                    }
                }
                vec![(*x, d.into_dyn())]
            }
            Op::Linear { x, w, bias } => {
                let gm = view2(g);
                let xm = view2(&self.nodes[*x].value);
                let wm = view2(&self.nodes[*w].value);
                let mut out = vec![
                    (*x, gm.dot(&wm).into_dyn()),
                    (*w, gm.t().dot(&xm).into_dyn()),
                ];
                if let Some(b) = bias {
                    out.push((*b, gm.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }
            Op::EmbedRows { table, idx } => {
                let ts = self.nodes[*table].value.shape();
                let gm = view2(g);
                let mut d = Array2::zeros((ts[0], ts[1]));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &gm.row(r);
                }
                vec![(*table, d.into_dyn())]
            }
            Op::RowDot { a, b } => {
                let gv = view1(g);
                let am = view2(&self.nodes[*a].value);
                let bm = view2(&self.nodes[*b].value);
                let mut da = bm.to_owned();
                let mut db = am.to_owned();
                for (r, &gr) in gv.iter().enumerate() {
                    da.row_mut(r).mapv_inplace(|v| v * gr);
                    db.row_mut(r).mapv_inplace(|v| v * gr);
                }
                vec![(*a, da.into_dyn()), (*b, db.into_dyn())]
            }
            Op::SoftmaxRows { x } => {
                let y = view2(&node.value);
                let gm = view2(g);
                let mut d = (&gm * &y).to_owned();
                for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= dot * yv);
                }
                vec![(*x, d.into_dyn())]
            }
            Op::BnStandardize { x, invstd, train } => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value, "bn grad")?;
                let gv = view4(g);
                let mut d = Array4::zeros((n, c, h, w));
                if *train {
                    let y = view4(&node.value);
                    let m = (n * h * w) as f64;
                    for j in 0..c {
                        let gj = gv.slice(s![.., j, .., ..]);
                        let yj = y.slice(s![.., j, .., ..]);
                        let mean_g = gj.sum() / m;
                        let mean_gy = gj
                            .iter()
                            .zip(yj.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / m;
                        let is = invstd[j];
                        let mut dj = d.slice_mut(s![.., j, .., ..]);
                        ndarray::Zip::from(&mut dj).and(&gj).and(&yj).for_each(
                            |dv, &gvv, &yv| {
                                *dv = is * (gvv - mean_g - yv * mean_gy);
                            },
                        );
                    }
                } else {
                    for j in 0..c {
                        let is = invstd[j];
                        let gj = gv.slice(s![.., j, .., ..]);
                        let mut dj = d.slice_mut(s![.., j, .., ..]);
                        dj.assign(&gj);
                        dj.mapv_inplace(|v| v * is);
                    }
                }
                vec![(*x, d.into_dyn())]
            }
            Op::ChannelAffine { x, gain, bias } => {
                let (_, c, _, _) = dims4(&self.nodes[*x].value, "channel_affine grad")?;
                let gv = view4(g);
                let xv = view4(&self.nodes[*x].value);
                let gainv = view1(&self.nodes[*gain].value);
                let mut dx = gv.to_owned();
                let mut dgain = Array1::zeros(c);
                let mut dbias = Array1::zeros(c);
                for j in 0..c {
                    let gj = gv.slice(s![.., j, .., ..]);
                    let xj = xv.slice(s![.., j, .., ..]);
                    dgain[j] = gj.iter().zip(xj.iter()).map(|(a, b)| a * b).sum();
                    dbias[j] = gj.sum();
                    let gainj = gainv[j];
                    dx.slice_mut(s![.., j, .., ..]).mapv_inplace(|v| v * gainj);
                }
                vec![
                    (*x, dx.into_dyn()),
                    (*gain, dgain.into_dyn()),
                    (*bias, dbias.into_dyn()),
                ]
            }
            Op::SampleChannelAffine { x, gain, bias } => {
                let (n, c, _, _) = dims4(&self.nodes[*x].value, "sample_channel_affine grad")?;
                let gv = view4(g);
                let xv = view4(&self.nodes[*x].value);
                let gainv = view2(&self.nodes[*gain].value);
                let mut dx = gv.to_owned();
                let mut dgain = Array2::zeros((n, c));
                let mut dbias = Array2::zeros((n, c));
                for i in 0..n {
                    for j in 0..c {
                        let gj = gv.slice(s![i, j, .., ..]);
                        let xj = xv.slice(s![i, j, .., ..]);
                        dgain[[i, j]] = gj.iter().zip(xj.iter()).map(|(a, b)| a * b).sum();
                        dbias[[i, j]] = gj.sum();
                        let gij = gainv[[i, j]];
                        dx.slice_mut(s![i, j, .., ..]).mapv_inplace(|v| v * gij);
                    }
                }
                vec![
                    (*x, dx.into_dyn()),
                    (*gain, dgain.into_dyn()),
                    (*bias, dbias.into_dyn()),
                ]
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let shape = self.nodes[*w].value.raw_dim();
                if sigma.abs() < 1e-24 {
                    vec![(*w, ArrayD::zeros(shape))]
                } else {
                    // d(W/σ)/dW with u,v constant: g/σ − (⟨g,out⟩/σ)·uvᵀ
                    let inner: f64 = g.iter().zip(node.value.iter()).map(|(a, b)| a * b).sum();
                    let coef = inner / sigma;
                    let rows = u.len();
                    let cols = v.len();
                    let mut d = g.mapv(|x| x / sigma);
                    {
                        let mut dm = d
                            .view_mut()
                            .into_shape_with_order((rows, cols))
                            .expect("grad is contiguous");
                        for r in 0..rows {
                            let ur = u[r] * coef;
                            let mut row = dm.row_mut(r);
                            row.zip_mut_with(v, |dv, &vv| *dv -= ur * vv);
                        }
                    }
                    vec![(*w, d)]
                }
            }
            Op::ResizeNearest { x } => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value, "resize grad")?;
                let gv = view4(g);
                let (_, _, oh, ow) = (gv.dim().0, gv.dim().1, gv.dim().2, gv.dim().3);
                let ys = nearest_map(oh, h);
                let xs = nearest_map(ow, w);
                let mut d = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        let gj = gv.slice(s![i, j, .., ..]);
                        let mut dj = d.slice_mut(s![i, j, .., ..]);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dj[[ys[oy], xs[ox]]] += gj[[oy, ox]];
                            }
                        }
                    }
                }
                vec![(*x, d.into_dyn())]
            }
            Op::AvgPool2x2 { x } => {
                let (n, c, h, w) = dims4(&self.nodes[*x].value, "avg_pool grad")?;
                let gv = view4(g);
                let mut d = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        let gj = gv.slice(s![i, j, .., ..]);
                        let mut dj = d.slice_mut(s![i, j, .., ..]);
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let q = gj[[oy, ox]] * 0.25;
                                dj[[2 * oy, 2 * ox]] += q;
                                dj[[2 * oy, 2 * ox + 1]] += q;
                                dj[[2 * oy + 1, 2 * ox]] += q;
                                dj[[2 * oy + 1, 2 * ox + 1]] += q;
                            }
                        }
                    }
                }
                vec![(*x, d.into_dyn())]
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *bias, *stride, *pad, g)?,
        };
        Ok(out)
    }

    fn conv_backward(
        &self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        g: &TensorD,
    ) -> Result<Vec<(usize, TensorD)>> {
        let (n, c, h, wd) = dims4(&self.nodes[x].value, "conv2d grad input")?;
        let (o, _, kh, kw) = dims4(&self.nodes[w].value, "conv2d grad weight")?;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let gv = view4(g);
        let xv = view4(&self.nodes[x].value);
        let wm = self.nodes[w].value
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight is contiguous");

        let need_x = self.nodes[x].needs_grad;
        let need_w = self.nodes[w].needs_grad;

        let mut dx = Array4::zeros((n, c, h, wd));
        // Per-sample partial weight grads, reduced in index order afterwards.
        let tasks: Vec<(ArrayView3<f64>, ArrayView3<f64>, ArrayViewMut3<f64>)> = xv
            .outer_iter()
            .zip(gv.outer_iter())
            .zip(dx.outer_iter_mut())
            .map(|((a, b), d)| (a, b, d))
            .collect();
        let run = |(xi, gi, mut dxi): (ArrayView3<f64>, ArrayView3<f64>, ArrayViewMut3<f64>)|
         -> Array2<f64> {
            conv_backward_sample(&xi, &gi, &wm, &geom, need_x, need_w, &mut dxi)
        };
        let mut dw_parts: Vec<Array2<f64>> = if self.parallel && n > 1 {
            tasks.into_par_iter().map(run).collect()
        } else {
            tasks.into_iter().map(run).collect()
        };

        let mut out = Vec::new();
        if need_x {
            out.push((x, dx.into_dyn()));
        }
        if need_w {
            let mut dw = Array2::zeros((o, c * kh * kw));
            for part in dw_parts.drain(..) {
                dw += &part;
            }
            let dw = dw
                .into_shape_with_order((o, c, kh, kw))
                .expect("weight grad reshape");
            out.push((w, dw.into_dyn()));
        }
        if let Some(b) = bias {
            if self.nodes[b].needs_grad {
                let mut db = Array1::zeros(o);
                for j in 0..o {
                    db[j] = gv.slice(s![.., j, .., ..]).sum();
                }
                out.push((b, db.into_dyn()));
            }
        }
        Ok(out)
    }
}

// ---- conv kernels ----------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn strip_len(&self) -> usize {
        (STRIP_ELEMS / self.col_rows()).max(1).min(self.positions())
    }
}

fn col2im_strip_add(
    colgrad: &Array2<f64>,
    geom: &ConvGeom,
    p0: usize,
    p1: usize,
    dx: &mut ArrayViewMut3<f64>,
) {
    let ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ow,
        ..
    } = *geom;
    for ch in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ch);
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let src = colgrad.row(row);
                for (t, p) in (p0..p1).enumerate() {
                    let oy = p / ow;
                    let ox = p % ow;
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let ix = (ox * stride + j) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        plane[[iy as usize, ix as usize]] += src[t];
                    }
                }
            }
        }
    }
}

fn conv_forward_sample(
    x: &ArrayView3<f64>,
    wm: &ArrayView2<f64>,
    geom: &ConvGeom,
    y: &mut ArrayViewMut3<f64>,
) {
    let o = wm.dim().0;
    let positions = geom.positions();
    let mut ym = y
        .view_mut()
        .into_shape_with_order((o, positions))
        .expect("conv output is contiguous");
    if geom.is_pointwise() {
        let xm = x
            .view()
            .into_shape_with_order((geom.c, positions))
            .expect("input is contiguous");
        ym.assign(&wm.dot(&xm));
        return;
    }
    let strip = geom.strip_len();
    let mut col = Array2::zeros((geom.col_rows(), strip));
    let mut p0 = 0;
    while p0 < positions {
        let p1 = (p0 + strip).min(positions);
        let len = p1 - p0;
        let mut colv = col.slice_mut(s![.., ..len]);
        im2col_into(x, geom, p0, p1, &mut colv);
        ym.slice_mut(s![.., p0..p1]).assign(&wm.dot(&colv));
        p0 = p1;
    }
}

fn conv_backward_sample(
    x: &ArrayView3<f64>,
    g: &ArrayView3<f64>,
    wm: &ArrayView2<f64>,
    geom: &ConvGeom,
    need_x: bool,
    need_w: bool,
    dx: &mut ArrayViewMut3<f64>,
) -> Array2<f64> {
    let o = wm.dim().0;
    let positions = geom.positions();
    let gm = g
        .view()
        .into_shape_with_order((o, positions))
        .expect("grad is contiguous");
    let mut dw = Array2::zeros((o, geom.col_rows()));
    if geom.is_pointwise() {
        let xm = x
            .view()
            .into_shape_with_order((geom.c, positions))
            .expect("input is contiguous");
        if need_w {
            dw = gm.dot(&xm.t());
        }
        if need_x {
            let dxm = wm.t().dot(&gm);
            let mut dxv = dx
                .view_mut()
                .into_shape_with_order((geom.c, positions))
                .expect("dx is contiguous");
            dxv += &dxm;
        }
        return dw;
    }
    let strip = geom.strip_len();
    let mut col = Array2::zeros((geom.col_rows(), strip));
    let mut p0 = 0;
    while p0 < positions {
        let p1 = (p0 + strip).min(positions);
        let len = p1 - p0;
        let gs = gm.slice(s![.., p0..p1]);
        if need_w {
            let mut colv = col.slice_mut(s![.., ..len]);
            im2col_into(x, geom, p0, p1, &mut colv);
            dw += &gs.dot(&colv.t());
        }
        if need_x {
            let colgrad = wm.t().dot(&gs);
            col2im_strip_add(&colgrad, geom, p0, p1, dx);
        }
        p0 = p1;
    }
    dw
}

fn im2col_into(
    x: &ArrayView3<f64>,
    geom: &ConvGeom,
    p0: usize,
    p1: usize,
    col: &mut ndarray::ArrayViewMut2<f64>,
) {
    let ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ow,
        ..
    } = *geom;
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let mut dst = col.row_mut(row);
                for (t, p) in (p0..p1).enumerate() {
                    let oy = p / ow;
                    let ox = p % ow;
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let ix = (ox * stride + j) as isize - pad as isize;
                    dst[t] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        plane[[iy as usize, ix as usize]]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

// ---- small helpers ----------------------------------------------------------

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn nearest_map(out: usize, inp: usize) -> Vec<usize> {
    (0..out).map(|o| (o * inp / out).min(inp - 1)).collect()
}

pub(crate) fn view4(a: &TensorD) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

pub(crate) fn view2(a: &TensorD) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

pub(crate) fn view1(a: &TensorD) -> ndarray::ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank-1 tensor")
}


#[cfg(test)]
mod bench {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    #[ignore = "manual timing probe"]
    fn time_conv_workload() {
        let mut rng = SeedRng::new(0);
        // Shapes mimicking a width-32 generator block at 32x32, batch 16.
        let x = Array4::from_shape_fn((16, 32, 32, 32), |_| rng.normal());
        let w = Array4::from_shape_fn((32, 32, 3, 3), |_| rng.normal() * 0.05);
        let start = std::time::Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let mut g = Graph::new(Mode::Train);
            let xv = g.leaf(x.clone().into_dyn(), true);
            let wv = g.leaf(w.clone().into_dyn(), true);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let t = g.tanh(y);
            let loss = g.sum_all(t);
            g.backward(loss).unwrap();
        }
        let dt = start.elapsed().as_secs_f64() / reps as f64;
        let macs = 16.0 * 32.0 * 32.0 * 9.0 * 1024.0 * 3.0; // fwd + dx + dw
        eprintln!(
            "conv fwd+bwd: {:.1} ms, {:.2} GFLOP/s",
            dt * 1e3,
            2.0 * macs / dt / 1e9
        );
    }
}
