//! Named parameters, initialization, spectral normalization, and the
//! batch-norm layer wrappers that higher modules compose.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{BnState, Graph, TensorD, Var};
use crate::rng::SeedRng;

/// Persistent power-iteration state for a spectrally normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SnState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

/// A named trainable tensor with its gradient slot and optional SN state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub data: TensorD,
    pub grad: TensorD,
    pub sn: Option<SnState>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: TensorD) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        Self {
            name: name.into(),
            data,
            grad,
            sn: None,
        }
    }

    /// Rows/cols of the weight flattened to 2-D for spectral purposes.
    pub fn flat_dims(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[0], s[1..].iter().product())
    }

    pub fn flat_view(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.flat_dims();
        self.data
            .view()
            .into_shape_with_order((r, c))
            .expect("parameter is contiguous")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat store of all trainable tensors of one network. Iteration order is
/// insertion order, which fixes the checkpoint layout and Adam slot order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: TensorD) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, data));
        id
    }

    /// Add a parameter with spectral-norm state attached.
    pub fn add_sn(&mut self, name: impl Into<String>, data: TensorD, rng: &mut SeedRng) -> ParamId {
        let id = self.add(name, data);
        let (r, c) = self.params[id.0].flat_dims();
        self.params[id.0].sn = Some(SnState {
            u: random_unit(rng, r),
            v: random_unit(rng, c),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of trainable scalars (state tensors excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Maps bound parameters to their leaf nodes for one graph pass, so that
/// gradients can be pulled back into the set afterwards.
#[derive(Debug, Default)]
pub struct Binder {
    entries: Vec<(ParamId, Var)>,
    frozen: bool,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A binder whose parameters enter the graph without gradient tracking;
    /// gradients still flow *through* the ops to other inputs. Used for the
    /// discriminator during generator updates.
    pub fn frozen() -> Self {
        Self {
            entries: Vec::new(),
            frozen: true,
        }
    }

    /// Insert the raw parameter value as a leaf.
    pub fn bind(&mut self, g: &mut Graph, set: &ParamSet, id: ParamId) -> Var {
        let v = g.leaf(set.get(id).data.clone(), !self.frozen);
        self.entries.push((id, v));
        v
    }

    /// Insert the parameter behind its spectral-norm wrapper. In train mode
    /// the persistent u/v are advanced by one power iteration first.
    pub fn bind_sn(&mut self, g: &mut Graph, set: &mut ParamSet, id: ParamId) -> Result<Var> {
        let leaf = self.bind(g, set, id);
        let train = g.is_train();
        let p = set.get_mut(id);
        let sn = p
            .sn
            .as_mut()
            .ok_or_else(|| Error::config(format!("parameter {} has no SN state", p.name)))?;
        if train {
            let (r, c) = {
                let s = p.data.shape();
                (s[0], s[1..].iter().product::<usize>())
            };
            let w2 = p
                .data
                .view()
                .into_shape_with_order((r, c))
                .expect("parameter is contiguous");
            power_iterate(&w2, &mut sn.u, &mut sn.v, 1);
        }
        let (u, v) = (sn.u.clone(), sn.v.clone());
        g.spectral_norm(leaf, &u, &v)
    }

    /// Bind with SN if the parameter carries SN state, plain otherwise.
    pub fn bind_auto(&mut self, g: &mut Graph, set: &mut ParamSet, id: ParamId) -> Result<Var> {
        if set.get(id).sn.is_some() {
            self.bind_sn(g, set, id)
        } else {
            Ok(self.bind(g, set, id))
        }
    }

    /// Accumulate leaf gradients back into the parameter store.
    pub fn harvest(&self, g: &mut Graph, set: &mut ParamSet) {
        for &(id, var) in &self.entries {
            if let Some(grad) = g.take_grad(var) {
                set.get_mut(id).grad += &grad;
            }
        }
    }
}

/// Add a weight with or without spectral-norm state attached.
pub fn add_weight(
    set: &mut ParamSet,
    name: String,
    data: TensorD,
    sn: bool,
    rng: &mut SeedRng,
) -> ParamId {
    if sn {
        set.add_sn(name, data, rng)
    } else {
        set.add(name, data)
    }
}

// ---- initialization --------------------------------------------------------

/// Orthogonal (row- or column-orthonormal) matrix via Gram-Schmidt on a
/// Gaussian draw; the smaller dimension ends up orthonormal.
pub fn orthogonal(rng: &mut SeedRng, rows: usize, cols: usize) -> Array2<f64> {
    if rows <= cols {
        orthonormal_rows(rng, rows, cols)
    } else {
        orthonormal_rows(rng, cols, rows)
            .t()
            .as_standard_layout()
            .to_owned()
    }
}

fn orthonormal_rows(rng: &mut SeedRng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for mut row in m.outer_iter_mut() {
        for x in row.iter_mut() {
            *x = rng.normal();
        }
    }
    for i in 0..rows {
        for j in 0..i {
            let (head, mut tail) = m.view_mut().split_at(ndarray::Axis(0), i);
            let prev = head.row(j);
            let mut cur = tail.row_mut(0);
            let dot = cur.dot(&prev);
            cur.zip_mut_with(&prev, |c, &p| *c -= dot * p);
        }
        let mut cur = m.row_mut(i);
        let norm = cur.dot(&cur).sqrt();
        if norm > 1e-12 {
            cur.mapv_inplace(|v| v / norm);
        } else {
            // Degenerate draw; fall back to a unit basis vector.
            cur.fill(0.0);
            cur[i % cols] = 1.0;
        }
    }
    m
}

/// Orthogonally initialized conv weight (o, c, kh, kw).
pub fn init_conv(rng: &mut SeedRng, o: usize, c: usize, kh: usize, kw: usize) -> TensorD {
    orthogonal(rng, o, c * kh * kw)
        .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
        .expect("conv init reshape")
}

/// Orthogonally initialized linear weight (k, d).
pub fn init_linear(rng: &mut SeedRng, k: usize, d: usize) -> TensorD {
    orthogonal(rng, k, d).into_dyn()
}

pub fn init_zeros(shape: &[usize]) -> TensorD {
    ArrayD::zeros(IxDyn(shape))
}

fn random_unit(rng: &mut SeedRng, len: usize) -> Array1<f64> {
    let mut v = Array1::zeros(len);
    loop {
        for x in v.iter_mut() {
            *x = rng.normal();
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            v.mapv_inplace(|x| x / norm);
            return v;
        }
    }
}

// ---- spectral normalization -------------------------------------------------

/// One or more power iterations on W̃ (rows x cols); returns the σ estimate.
pub fn power_iterate(
    w2: &ArrayView2<f64>,
    u: &mut Array1<f64>,
    v: &mut Array1<f64>,
    iters: usize,
) -> f64 {
    for _ in 0..iters {
        let vt = w2.t().dot(u);
        let vn = vt.dot(&vt).sqrt();
        if vn < 1e-24 {
            return 0.0;
        }
        *v = vt.mapv(|x| x / vn);
        let ut = w2.dot(v);
        let un = ut.dot(&ut).sqrt();
        if un < 1e-24 {
            return 0.0;
        }
        *u = ut.mapv(|x| x / un);
    }
    u.dot(&w2.dot(v))
}

/// Result of the standalone normalization op.
#[derive(Debug, Clone)]
pub struct SnOutcome {
    pub normalized: TensorD,
    pub sigma: f64,
    /// Set when the weight was (numerically) zero and zeros were returned.
    pub degenerate: bool,
}

/// Normalize a weight by its power-iteration spectral norm estimate,
/// advancing the persistent u/v state `n_iters` times.
pub fn spectral_normalize(param: &mut Parameter, n_iters: usize) -> Result<SnOutcome> {
    if n_iters < 1 {
        return Err(Error::config("spectral_normalize: n_iters must be >= 1"));
    }
    let (r, c) = param.flat_dims();
    let sn = param
        .sn
        .as_mut()
        .ok_or_else(|| Error::config(format!("parameter {} has no SN state", param.name)))?;
    if sn.u.len() != r || sn.v.len() != c {
        return Err(Error::config(format!(
            "spectral_normalize: u/v lengths ({}, {}) do not match flattened weight ({r}, {c})",
            sn.u.len(),
            sn.v.len()
        )));
    }
    let w2 = param
        .data
        .view()
        .into_shape_with_order((r, c))
        .expect("parameter is contiguous");
    let sigma = power_iterate(&w2, &mut sn.u, &mut sn.v, n_iters);
    if sigma.abs() < 1e-24 {
        log::warn!(
            "spectral_normalize: zero weight {} — returning zeros",
            param.name
        );
        return Ok(SnOutcome {
            normalized: ArrayD::zeros(param.data.raw_dim()),
            sigma: 0.0,
            degenerate: true,
        });
    }
    Ok(SnOutcome {
        normalized: param.data.mapv(|x| x / sigma),
        sigma,
        degenerate: false,
    })
}

// ---- batch-norm layer wrappers ----------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Plain batch norm: standardize then per-channel affine with trainable
/// gain/bias.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState,
}

impl BatchNorm {
    pub fn build(set: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        let gamma = set.add(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = set.add(format!("{prefix}.beta"), init_zeros(&[channels]));
        Self {
            name: prefix.to_string(),
            gamma,
            beta,
            state: BnState::new(channels, BN_MOMENTUM, BN_EPS),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        x: Var,
    ) -> Result<Var> {
        let xhat = g.bn_standardize(x, &mut self.state)?;
        let gamma = binder.bind(g, set, self.gamma);
        let beta = binder.bind(g, set, self.beta);
        g.channel_affine(xhat, gamma, beta)
    }

    pub fn state_param_count(&self) -> usize {
        0
    }
}

/// Conditional batch norm: gain = 1 + Wg·cond, bias = Wb·cond per sample.
#[derive(Debug, Clone)]
pub struct CondBatchNorm {
    pub name: String,
    pub gain_proj: ParamId,
    pub bias_proj: ParamId,
    pub state: BnState,
}

impl CondBatchNorm {
    /// Projections start at zero so the layer begins as plain standardization.
    pub fn build(set: &mut ParamSet, prefix: &str, channels: usize, cond_dim: usize) -> Self {
        let gain_proj = set.add(format!("{prefix}.gain_proj"), init_zeros(&[channels, cond_dim]));
        let bias_proj = set.add(format!("{prefix}.bias_proj"), init_zeros(&[channels, cond_dim]));
        Self {
            name: prefix.to_string(),
            gain_proj,
            bias_proj,
            state: BnState::new(channels, BN_MOMENTUM, BN_EPS),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        let cd = g.shape(cond).to_vec();
        let want = set.get(self.gain_proj).data.shape()[1];
        if cd.len() != 2 || cd[1] != want {
            return Err(Error::config(format!(
                "conditional batch norm: cond shape {cd:?} does not match projection dim {want}"
            )));
        }
        let xhat = g.bn_standardize(x, &mut self.state)?;
        let gp = binder.bind(g, set, self.gain_proj);
        let bp = binder.bind(g, set, self.bias_proj);
        let gains_raw = g.linear(cond, gp, None)?;
        let gains = g.affine_scalar(gains_raw, 1.0, 1.0);
        let biases = g.linear(cond, bp, None)?;
        g.sample_channel_affine(xhat, gains, biases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use ndarray::{arr1, Array4};

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = SeedRng::new(11);
        let m = orthogonal(&mut rng, 8, 20);
        let gram = m.dot(&m.t());
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[[i, j]] - want).abs() < 1e-10,
                    "gram[{i},{j}] = {}",
                    gram[[i, j]]
                );
            }
        }
        // Tall case: columns orthonormal.
        let m = orthogonal(&mut rng, 20, 8);
        let gram = m.t().dot(&m);
        for i in 0..8 {
            assert!((gram[[i, i]] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_normalize_diagonal_matrix() {
        let mut rng = SeedRng::new(5);
        let mut set = ParamSet::new();
        let w = ndarray::arr2(&[[3.0, 0.0], [0.0, 1.0]]).into_dyn();
        let id = set.add_sn("w", w, &mut rng);
        let out = spectral_normalize(set.get_mut(id), 200).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-9, "sigma {}", out.sigma);
        let n = out.normalized;
        assert!((n[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((n[[1, 1]] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn spectral_normalize_identity_unchanged() {
        let mut rng = SeedRng::new(6);
        let mut set = ParamSet::new();
        let id = set.add_sn("w", ndarray::Array2::eye(4).into_dyn(), &mut rng);
        let out = spectral_normalize(set.get_mut(id), 50).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-9);
        let eye = ndarray::Array2::<f64>::eye(4).into_dyn();
        for (a, b) in out.normalized.iter().zip(eye.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_normalize_zero_weight_guards() {
        let mut rng = SeedRng::new(7);
        let mut set = ParamSet::new();
        let id = set.add_sn("w", init_zeros(&[3, 5]), &mut rng);
        let out = spectral_normalize(set.get_mut(id), 10).unwrap();
        assert!(out.degenerate);
        assert!(out.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = SeedRng::new(9);
        let mut set = ParamSet::new();
        let mut bn = BatchNorm::build(&mut set, "bn", 2);
        set.get_mut(bn.gamma).data = arr1(&[2.0, 1.0]).into_dyn();
        set.get_mut(bn.beta).data = arr1(&[3.0, -1.0]).into_dyn();
        let mut x = Array4::zeros((4, 2, 8, 8));
        for v in x.iter_mut() {
            *v = rng.normal() * 1.7 + 0.4;
        }
        let mut g = Graph::new(Mode::Train);
        let xv = g.leaf(x.into_dyn(), false);
        let mut binder = Binder::new();
        let y = bn.forward(&mut g, &mut binder, &set, xv).unwrap();
        let yv = crate::graph::view4(g.value(y));
        for c in 0..2 {
            let ch = yv.slice(ndarray::s![.., c, .., ..]);
            let m = ch.len() as f64;
            let mean = ch.sum() / m;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let want_bias = if c == 0 { 3.0 } else { -1.0 };
            let want_gain = if c == 0 { 2.0 } else { 1.0 };
            assert!((mean - want_bias).abs() < 1e-6, "mean {mean}");
            assert!((var - want_gain * want_gain).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut set = ParamSet::new();
        let mut bn = BatchNorm::build(&mut set, "bn", 1);
        set.get_mut(bn.gamma).data = arr1(&[1.5]).into_dyn();
        set.get_mut(bn.beta).data = arr1(&[0.25]).into_dyn();
        bn.state.running_mean = arr1(&[2.0]);
        bn.state.running_var = arr1(&[4.0]);
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, 2.0, 5.0]).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let xv = g.leaf(x.into_dyn(), false);
        let mut binder = Binder::new();
        let y = bn.forward(&mut g, &mut binder, &set, xv).unwrap();
        let eps = bn.state.eps;
        for (i, &xi) in [1.0f64, 2.0, 5.0].iter().enumerate() {
            let want = (xi - 2.0) / (4.0 + eps).sqrt() * 1.5 + 0.25;
            let got = g.value(y)[[0, 0, 0, i]];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn batch_norm_degenerate_variance_errors() {
        let mut set = ParamSet::new();
        let mut bn = BatchNorm::build(&mut set, "bn", 1);
        let x = Array4::zeros((1, 1, 1, 1));
        let mut g = Graph::new(Mode::Train);
        let xv = g.leaf(x.into_dyn(), false);
        let mut binder = Binder::new();
        assert!(bn.forward(&mut g, &mut binder, &set, xv).is_err());
    }

    #[test]
    fn cond_batch_norm_zero_projection_is_plain_standardization() {
        let mut rng = SeedRng::new(13);
        let mut set = ParamSet::new();
        let mut cbn = CondBatchNorm::build(&mut set, "cbn", 3, 4);
        let mut x = Array4::zeros((2, 3, 4, 4));
        for v in x.iter_mut() {
            *v = rng.normal();
        }
        let cond = ndarray::Array2::from_shape_fn((2, 4), |_| rng.normal());

        let mut g = Graph::new(Mode::Train);
        let xv = g.leaf(x.clone().into_dyn(), false);
        let cv = g.leaf(cond.into_dyn(), false);
        let mut binder = Binder::new();
        let y = cbn.forward(&mut g, &mut binder, &set, xv, cv).unwrap();

        let mut g2 = Graph::new(Mode::Train);
        let xv2 = g2.leaf(x.into_dyn(), false);
        let mut state = BnState::new(3, BN_MOMENTUM, BN_EPS);
        let want = g2.bn_standardize(xv2, &mut state).unwrap();

        for (a, b) in g.value(y).iter().zip(g2.value(want).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
