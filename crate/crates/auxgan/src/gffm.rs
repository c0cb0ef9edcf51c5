//! Gated feature fusion: a gating unit that blends a feature being refined
//! with a side feature, and the fusion module that applies two such units to
//! refine the main-branch and auxiliary-branch features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{add_weight, init_conv, init_zeros, BatchNorm, Binder, ParamId, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::dims4;

/// Weights of one gating unit. All three convolutions are pointwise (1x1):
/// the gate and refinement convs read the concatenated `(c_i + c_s)`-channel
/// input and emit `c_o` channels, and the output conv mixes `c_o` channels.
#[derive(Debug, Clone)]
pub struct GatingUnitParams {
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub c_i: usize,
    pub c_s: usize,
    pub c_o: usize,
}

/// Intermediate tensors of a gating-unit forward, exposed for property tests.
#[derive(Debug, Clone, Copy)]
pub struct GatingTrace {
    pub gate: Var,
    pub refine: Var,
    pub blend: Var,
    pub out: Var,
}

impl GatingUnitParams {
    /// `sn` attaches spectral-norm state to the conv weights (used when the
    /// enclosing generator is spectrally normalized).
    pub fn build(
        set: &mut ParamSet,
        prefix: &str,
        c_i: usize,
        c_s: usize,
        c_o: usize,
        sn: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if c_i != c_o {
            return Err(Error::config(format!(
                "gating unit {prefix}: c_i ({c_i}) must equal c_g = c_r = c_o ({c_o}) \
                 for the elementwise blend"
            )));
        }
        let cat = c_i + c_s;
        let wg_data = init_conv(rng, c_o, cat, 1, 1);
        let w_g = add_weight(set, format!("{prefix}.w_g"), wg_data, sn, rng);
        let wf_data = init_conv(rng, c_o, cat, 1, 1);
        let w_f = add_weight(set, format!("{prefix}.w_f"), wf_data, sn, rng);
        let wo_data = init_conv(rng, c_o, c_o, 1, 1);
        let w_o = add_weight(set, format!("{prefix}.w_o"), wo_data, sn, rng);
        let b_g = set.add(format!("{prefix}.b_g"), init_zeros(&[c_o]));
        let b_f = set.add(format!("{prefix}.b_f"), init_zeros(&[c_o]));
        let b_o = set.add(format!("{prefix}.b_o"), init_zeros(&[c_o]));
        Ok(Self {
            w_g,
            b_g,
            w_f,
            b_f,
            w_o,
            b_o,
            c_i,
            c_s,
            c_o,
        })
    }

    /// Full forward keeping the intermediates:
    /// gate = sigmoid(conv_g(cat)), refine = conv_f(cat),
    /// blend = gate*f_i + (1-gate)*refine, out = conv_o(blend).
    pub fn forward_trace(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        f_i: Var,
        f_s: Var,
    ) -> Result<GatingTrace> {
        let (n_i, c_i, h_i, w_i) = dims4(g.value(f_i), "gating unit f_i")?;
        let (n_s, c_s, h_s, w_s) = dims4(g.value(f_s), "gating unit f_s")?;
        if (n_i, h_i, w_i) != (n_s, h_s, w_s) {
            return Err(Error::Alignment {
                module: "gating_unit".into(),
                detail: format!(
                    "f_i is ({n_i},{c_i},{h_i},{w_i}) but f_s is ({n_s},{c_s},{h_s},{w_s})"
                ),
            });
        }
        if c_i != self.c_i || c_s != self.c_s {
            return Err(Error::config(format!(
                "gating unit: expected channels ({}, {}), got ({c_i}, {c_s})",
                self.c_i, self.c_s
            )));
        }
        let cat = g.concat_channels(&[f_i, f_s])?;
        let w_g = binder.bind_auto(g, set, self.w_g)?;
        let b_g = binder.bind(g, set, self.b_g);
        let pre_gate = g.conv2d(cat, w_g, Some(b_g), 1, 0)?;
        let gate = g.sigmoid(pre_gate);

        let w_f = binder.bind_auto(g, set, self.w_f)?;
        let b_f = binder.bind(g, set, self.b_f);
        let refine = g.conv2d(cat, w_f, Some(b_f), 1, 0)?;

        // Literal blend: gate ⊗ f_i + (1 - gate) ⊗ refine.
        let kept = g.mul(gate, f_i)?;
        let inv_gate = g.affine_scalar(gate, -1.0, 1.0);
        let added = g.mul(inv_gate, refine)?;
        let blend = g.add(kept, added)?;

        let w_o = binder.bind_auto(g, set, self.w_o)?;
        let b_o = binder.bind(g, set, self.b_o);
        let out = g.conv2d(blend, w_o, Some(b_o), 1, 0)?;
        Ok(GatingTrace {
            gate,
            refine,
            blend,
            out,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        f_i: Var,
        f_s: Var,
    ) -> Result<Var> {
        Ok(self.forward_trace(g, binder, set, f_i, f_s)?.out)
    }
}

/// One fusion module: batch norms for both branches, an optional 1x1
/// channel-alignment conv for the auxiliary feature, and one gating unit per
/// refined output. The unit for the auxiliary output is absent in the last
/// module of a network, where only the refined main feature is consumed.
#[derive(Debug, Clone)]
pub struct GffmParams {
    pub unit_main: GatingUnitParams,
    pub unit_aux: Option<GatingUnitParams>,
    pub bn_main: BatchNorm,
    pub bn_aux: BatchNorm,
    pub align_conv: Option<(ParamId, ParamId)>,
    pub c_a: usize,
    pub c_o: usize,
}

impl GffmParams {
    pub fn build(
        set: &mut ParamSet,
        prefix: &str,
        c_a: usize,
        c_o: usize,
        last: bool,
        sn: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let unit_main =
            GatingUnitParams::build(set, &format!("{prefix}.main"), c_o, c_o, c_o, sn, rng)?;
        let unit_aux = if last {
            None
        } else {
            Some(GatingUnitParams::build(
                set,
                &format!("{prefix}.aux"),
                c_o,
                c_o,
                c_o,
                sn,
                rng,
            )?)
        };
        let bn_main = BatchNorm::build(set, &format!("{prefix}.bn_main"), c_o);
        let bn_aux = BatchNorm::build(set, &format!("{prefix}.bn_aux"), c_o);
        let align_conv = if c_a != c_o {
            let data = init_conv(rng, c_o, c_a, 1, 1);
            let w = add_weight(set, format!("{prefix}.align.w"), data, sn, rng);
            let b = set.add(format!("{prefix}.align.b"), init_zeros(&[c_o]));
            Some((w, b))
        } else {
            None
        };
        Ok(Self {
            unit_main,
            unit_aux,
            bn_main,
            bn_aux,
            align_conv,
            c_a,
            c_o,
        })
    }

    /// Bring the auxiliary feature to `c_o` channels and the target spatial
    /// size: 1x1 conv (only when channels differ), then BN, then
    /// nearest-neighbor interpolation.
    pub fn align_aux(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        f_a: Var,
        target_h: usize,
        target_w: usize,
    ) -> Result<Var> {
        let (_, c_a, h, w) = dims4(g.value(f_a), "align_aux input")?;
        if c_a != self.c_a {
            return Err(Error::config(format!(
                "align_aux: expected {} auxiliary channels, got {c_a}",
                self.c_a
            )));
        }
        let mut cur = f_a;
        if let Some((wid, bid)) = self.align_conv {
            let wv = binder.bind_auto(g, set, wid)?;
            let bv = binder.bind(g, set, bid);
            cur = g.conv2d(cur, wv, Some(bv), 1, 0)?;
        }
        cur = self.bn_aux.forward(g, binder, set, cur)?;
        if (h, w) != (target_h, target_w) {
            cur = g.resize_nearest(cur, target_h, target_w)?;
        }
        Ok(cur)
    }

    /// Refine the main feature (always) and the auxiliary feature (unless
    /// this is the last module). `swap_aux_args` flips which normalized
    /// feature is refined vs used as the side input in the auxiliary unit.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        f_m: Var,
        f_a: Var,
        swap_aux_args: bool,
    ) -> Result<(Var, Option<Var>)> {
        let (_, c_m, h, w) = dims4(g.value(f_m), "gffm f_m")?;
        if c_m != self.c_o {
            return Err(Error::config(format!(
                "gffm: main feature has {c_m} channels but the module is built for {}",
                self.c_o
            )));
        }
        let m_hat = {
            let bn = &mut self.bn_main;
            bn.forward(g, binder, set, f_m)?
        };
        let a_hat = self.align_aux(g, binder, set, f_a, h, w)?;
        let refined_main = self
            .unit_main
            .forward(g, binder, set, m_hat, a_hat)?;
        let refined_aux = match &self.unit_aux {
            None => None,
            Some(unit) => {
                let (f_i, f_s) = if swap_aux_args {
                    (m_hat, a_hat)
                } else {
                    (a_hat, m_hat)
                };
                Some(unit.forward(g, binder, set, f_i, f_s)?)
            }
        };
        Ok((refined_main, refined_aux))
    }
}
