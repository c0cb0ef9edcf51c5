//! Generator and discriminator building blocks: residual blocks in the
//! SNGAN/BigGAN styles and the dense block used for the block-comparison
//! study.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{add_weight, init_conv, init_zeros, BatchNorm, Binder, CondBatchNorm, ParamId, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::dims4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    None,
    Up,
    Down,
}

/// Plain or conditional batch norm, selected per generator mode.
#[derive(Debug, Clone)]
pub enum NormLayer {
    Plain(BatchNorm),
    Cond(CondBatchNorm),
}

impl NormLayer {
    pub fn build(
        set: &mut ParamSet,
        prefix: &str,
        channels: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        match cond_dim {
            None => NormLayer::Plain(BatchNorm::build(set, prefix, channels)),
            Some(d) => NormLayer::Cond(CondBatchNorm::build(set, prefix, channels, d)),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        match (self, cond) {
            (NormLayer::Plain(bn), _) => bn.forward(g, binder, set, x),
            (NormLayer::Cond(cbn), Some(c)) => cbn.forward(g, binder, set, x, c),
            (NormLayer::Cond(_), None) => Err(Error::config(
                "conditional batch norm requires a conditioning vector",
            )),
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, NormLayer::Cond(_))
    }

    /// Name and running statistics, for checkpointing.
    pub fn state_mut(&mut self) -> (&str, &mut crate::graph::BnState) {
        match self {
            NormLayer::Plain(bn) => (bn.name.as_str(), &mut bn.state),
            NormLayer::Cond(cbn) => (cbn.name.as_str(), &mut cbn.state),
        }
    }
}

/// Residual block parameters. The skip path carries a 1x1 conv whenever the
/// channel count changes or the block resamples.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub bn1: Option<NormLayer>,
    pub bn2: Option<NormLayer>,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub skip_conv: Option<(ParamId, ParamId)>,
    pub resample: Resample,
    pub c_in: usize,
    pub c_out: usize,
    /// Discriminator-only: first block feeds raw pixels straight into conv1
    /// and pools before the skip 1x1.
    pub first: bool,
}

impl ResBlockParams {
    /// Generator-style block: BN → ReLU → [up] → conv1 → BN → ReLU → conv2,
    /// plus the (possibly learnable) skip.
    pub fn build_generator(
        set: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        up: bool,
        cond_dim: Option<usize>,
        sn: bool,
        rng: &mut SeedRng,
    ) -> Self {
        let bn1 = NormLayer::build(set, &format!("{prefix}.bn1"), c_in, cond_dim);
        let bn2 = NormLayer::build(set, &format!("{prefix}.bn2"), c_out, cond_dim);
        let w1 = init_conv(rng, c_out, c_in, 3, 3);
        let conv1 = (
            add_weight(set, format!("{prefix}.conv1.w"), w1, sn, rng),
            set.add(format!("{prefix}.conv1.b"), init_zeros(&[c_out])),
        );
        let w2 = init_conv(rng, c_out, c_out, 3, 3);
        let conv2 = (
            add_weight(set, format!("{prefix}.conv2.w"), w2, sn, rng),
            set.add(format!("{prefix}.conv2.b"), init_zeros(&[c_out])),
        );
        let skip_conv = if c_in != c_out || up {
            let ws = init_conv(rng, c_out, c_in, 1, 1);
            Some((
                add_weight(set, format!("{prefix}.skip.w"), ws, sn, rng),
                set.add(format!("{prefix}.skip.b"), init_zeros(&[c_out])),
            ))
        } else {
            None
        };
        Self {
            bn1: Some(bn1),
            bn2: Some(bn2),
            conv1,
            conv2,
            skip_conv,
            resample: if up { Resample::Up } else { Resample::None },
            c_in,
            c_out,
            first: false,
        }
    }

    /// Discriminator-style block (no norms, spectrally normalized convs):
    /// [ReLU unless first] → conv1 → ReLU → conv2 → [pool if down].
    pub fn build_discriminator(
        set: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        down: bool,
        first: bool,
        rng: &mut SeedRng,
    ) -> Self {
        let w1 = init_conv(rng, c_out, c_in, 3, 3);
        let conv1 = (
            set.add_sn(format!("{prefix}.conv1.w"), w1, rng),
            set.add(format!("{prefix}.conv1.b"), init_zeros(&[c_out])),
        );
        let w2 = init_conv(rng, c_out, c_out, 3, 3);
        let conv2 = (
            set.add_sn(format!("{prefix}.conv2.w"), w2, rng),
            set.add(format!("{prefix}.conv2.b"), init_zeros(&[c_out])),
        );
        let skip_conv = if c_in != c_out || down {
            let ws = init_conv(rng, c_out, c_in, 1, 1);
            Some((
                set.add_sn(format!("{prefix}.skip.w"), ws, rng),
                set.add(format!("{prefix}.skip.b"), init_zeros(&[c_out])),
            ))
        } else {
            None
        };
        Self {
            bn1: None,
            bn2: None,
            conv1,
            conv2,
            skip_conv,
            resample: if down { Resample::Down } else { Resample::None },
            c_in,
            c_out,
            first,
        }
    }

    fn conv(
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        ids: (ParamId, ParamId),
        x: Var,
        pad: usize,
    ) -> Result<Var> {
        let w = binder.bind_auto(g, set, ids.0)?;
        let b = binder.bind(g, set, ids.1);
        g.conv2d(x, w, Some(b), 1, pad)
    }

    /// Generator block forward. `cond` must be present iff the norms are
    /// conditional.
    pub fn forward_generator(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let conditional = self
            .bn1
            .as_ref()
            .map(|n| n.is_conditional())
            .unwrap_or(false);
        if conditional != cond.is_some() {
            return Err(Error::config(format!(
                "generator block: conditioning vector {} but block norms are {}",
                if cond.is_some() { "given" } else { "missing" },
                if conditional { "conditional" } else { "plain" },
            )));
        }
        let mut h = x;
        if let Some(bn) = self.bn1.as_mut() {
            h = bn.forward(g, binder, set, h, cond)?;
        }
        h = g.relu(h);
        if self.resample == Resample::Up {
            h = g.upsample_nearest(h, 2)?;
        }
        h = Self::conv(g, binder, set, self.conv1, h, 1)?;
        if let Some(bn) = self.bn2.as_mut() {
            h = bn.forward(g, binder, set, h, cond)?;
        }
        h = g.relu(h);
        h = Self::conv(g, binder, set, self.conv2, h, 1)?;

        let mut skip = x;
        if self.resample == Resample::Up {
            skip = g.upsample_nearest(skip, 2)?;
        }
        if let Some(ids) = self.skip_conv {
            skip = Self::conv(g, binder, set, ids, skip, 0)?;
        }
        g.add(h, skip)
    }

    /// Discriminator block forward.
    pub fn forward_discriminator(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        x: Var,
    ) -> Result<Var> {
        if self.resample == Resample::Down {
            let (_, _, h, w) = dims4(g.value(x), "disc block input")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::config(format!(
                    "disc block: down-sampling needs even spatial dims, got {h}x{w}"
                )));
            }
        }
        let mut h = x;
        if !self.first {
            h = g.relu(h);
        }
        h = Self::conv(g, binder, set, self.conv1, h, 1)?;
        h = g.relu(h);
        h = Self::conv(g, binder, set, self.conv2, h, 1)?;
        if self.resample == Resample::Down {
            h = g.avg_pool_down(h)?;
        }

        let mut skip = x;
        if self.first {
            // First block pools the raw image before the 1x1.
            if self.resample == Resample::Down {
                skip = g.avg_pool_down(skip)?;
            }
            if let Some(ids) = self.skip_conv {
                skip = Self::conv(g, binder, set, ids, skip, 0)?;
            }
        } else {
            if let Some(ids) = self.skip_conv {
                skip = Self::conv(g, binder, set, ids, skip, 0)?;
            }
            if self.resample == Resample::Down {
                skip = g.avg_pool_down(skip)?;
            }
        }
        g.add(h, skip)
    }
}

/// Dense block: stages concatenate everything produced so far, a 1x1
/// transition maps back to the declared output width.
#[derive(Debug, Clone)]
pub struct DenseBlockParams {
    pub stages: Vec<(NormLayer, (ParamId, ParamId))>,
    pub transition_norm: NormLayer,
    pub transition: (ParamId, ParamId),
    pub up: bool,
    pub c_in: usize,
    pub growth: usize,
    pub c_out: usize,
}

impl DenseBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        set: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stages: usize,
        growth: usize,
        up: bool,
        cond_dim: Option<usize>,
        sn: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::config("dense block: stage list must be non-empty"));
        }
        let mut stage_params = Vec::with_capacity(stages);
        for k in 0..stages {
            let cin_k = c_in + k * growth;
            let norm = NormLayer::build(set, &format!("{prefix}.stage{k}.bn"), cin_k, cond_dim);
            let w = init_conv(rng, growth, cin_k, 3, 3);
            let conv = (
                add_weight(set, format!("{prefix}.stage{k}.conv.w"), w, sn, rng),
                set.add(format!("{prefix}.stage{k}.conv.b"), init_zeros(&[growth])),
            );
            stage_params.push((norm, conv));
        }
        let cin_t = c_in + stages * growth;
        let transition_norm =
            NormLayer::build(set, &format!("{prefix}.transition.bn"), cin_t, cond_dim);
        let wt = init_conv(rng, c_out, cin_t, 1, 1);
        let transition = (
            add_weight(set, format!("{prefix}.transition.w"), wt, sn, rng),
            set.add(format!("{prefix}.transition.b"), init_zeros(&[c_out])),
        );
        Ok(Self {
            stages: stage_params,
            transition_norm,
            transition,
            up,
            c_in,
            growth,
            c_out,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &mut ParamSet,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let mut feats: Vec<Var> = Vec::with_capacity(self.stages.len() + 1);
        let x0 = if self.up { g.upsample_nearest(x, 2)? } else { x };
        feats.push(x0);
        for (k, (norm, conv)) in self.stages.iter_mut().enumerate() {
            let inp = g.concat_channels(&feats)?;
            let got = g.shape(inp)[1];
            let want = self.c_in + k * self.growth;
            if got != want {
                return Err(Error::config(format!(
                    "dense block stage {k}: expected {want} input channels, got {got}"
                )));
            }
            let mut h = norm.forward(g, binder, set, inp, cond)?;
            h = g.relu(h);
            h = ResBlockParams::conv(g, binder, set, *conv, h, 1)?;
            feats.push(h);
        }
        let inp = g.concat_channels(&feats)?;
        let mut h = self.transition_norm.forward(g, binder, set, inp, cond)?;
        h = g.relu(h);
        ResBlockParams::conv(g, binder, set, self.transition, h, 0)
    }
}
