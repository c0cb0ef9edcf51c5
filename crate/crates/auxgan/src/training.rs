//! Adversarial losses, the Adam optimizer, learning-rate schedule, training
//! presets, the alternating update loop, and checkpoint plumbing.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{save_image_grid, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::layers::{Binder, ParamSet};
use crate::metrics::{evaluate, EmbeddingBackend, GeneratorSource, MetricReport};
use crate::networks::{DiscriminatorParams, GeneratorParams};
use crate::rng::SeedRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hinge,
    Standard,
}

/// Training hyperparameters. Presets encode the published settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_d: usize,
    pub batch_g: usize,
    pub d_steps_per_g: usize,
    pub total_g_iters: u64,
    /// Iterations of linear learning-rate decay at the end of the run.
    pub decay_window: u64,
    pub loss: LossKind,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub adam_eps: f64,
    /// 1 = fully serial (the deterministic contract); >1 allows per-sample
    /// threading, which is bitwise identical anyway.
    pub threads: usize,
}

impl TrainConfig {
    /// Published presets plus the desk-scale smoke configuration.
    pub fn preset(name: &str) -> Result<TrainConfig> {
        let base = TrainConfig {
            preset: name.to_string(),
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            batch_d: 64,
            batch_g: 128,
            d_steps_per_g: 5,
            total_g_iters: 50_000,
            decay_window: 50_000,
            loss: LossKind::Hinge,
            seed: 1,
            eval_interval: 5_000,
            checkpoint_interval: 5_000,
            adam_eps: 1e-8,
            threads: 0,
        };
        let cfg = match name {
            // 32x32: five discriminator steps per generator step, the
            // generator batch twice the discriminator's.
            "cifar-gan" | "cifar-cgan" => base,
            // 128x128: two-time-scale updates, 1:1 steps, batch 32.
            "lsun-ttur" => TrainConfig {
                lr_g: 1e-4,
                lr_d: 4e-4,
                batch_d: 32,
                batch_g: 32,
                d_steps_per_g: 1,
                total_g_iters: 300_000,
                ..base
            },
            // High-resolution runs: TTUR with batch 16 for 100k iterations.
            "hq-256" | "hq-512" => TrainConfig {
                lr_g: 1e-4,
                lr_d: 4e-4,
                batch_d: 16,
                batch_g: 16,
                d_steps_per_g: 1,
                total_g_iters: 100_000,
                ..base
            },
            // Desk-scale smoke: 500 iterations at batch 16; the decay window
            // clamps to the run length.
            "desk-smoke" => TrainConfig {
                batch_d: 16,
                batch_g: 16,
                d_steps_per_g: 1,
                total_g_iters: 500,
                decay_window: 500,
                eval_interval: 500,
                checkpoint_interval: 250,
                ..base
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset '{other}' (expected cifar-gan, cifar-cgan, lsun-ttur, \
                     hq-256, hq-512, or desk-smoke)"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positives {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || self.beta2 >= 1.0 {
            return Err(Error::InvalidConfig("betas must lie in [0,1)".into()));
        }
        if self.batch_d == 0
            || self.batch_g == 0
            || self.d_steps_per_g == 0
            || self.total_g_iters == 0
            || self.eval_interval == 0
            || self.checkpoint_interval == 0
        {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if self.decay_window > self.total_g_iters {
            return Err(Error::InvalidConfig(format!(
                "decay_window {} exceeds total_g_iters {}",
                self.decay_window, self.total_g_iters
            )));
        }
        Ok(())
    }
}

/// Constant learning rates until the decay window, then linear to zero.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> (f64, f64) {
    let factor = if iter >= cfg.total_g_iters {
        0.0
    } else {
        let remaining = (cfg.total_g_iters - iter) as f64;
        (remaining / cfg.decay_window as f64).min(1.0)
    };
    (cfg.lr_g * factor, cfg.lr_d * factor)
}

// ---- losses -------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Saturation-proof log-sigmoid GAN losses:
/// L_D = -E log σ(real) - E log(1-σ(fake)), L_G = -E log σ(fake).
pub fn loss_standard(real: &Array1<f64>, fake: &Array1<f64>) -> (f64, f64) {
    let mean = |xs: &Array1<f64>, f: &dyn Fn(f64) -> f64| {
        xs.iter().map(|&v| f(v)).sum::<f64>() / xs.len() as f64
    };
    let l_d = mean(real, &|v| softplus(-v)) + mean(fake, &|v| softplus(v));
    let l_g = mean(fake, &|v| softplus(-v));
    (l_d, l_g)
}

/// Hinge losses: L_D = E max(0, 1-real) + E max(0, 1+fake), L_G = -E fake.
pub fn loss_hinge(real: &Array1<f64>, fake: &Array1<f64>) -> (f64, f64) {
    let l_d = real.iter().map(|&v| (1.0 - v).max(0.0)).sum::<f64>() / real.len() as f64
        + fake.iter().map(|&v| (1.0 + v).max(0.0)).sum::<f64>() / fake.len() as f64;
    let l_g = -fake.sum() / fake.len() as f64;
    (l_d, l_g)
}

/// Discriminator loss as a graph node.
pub fn d_loss(g: &mut Graph, kind: LossKind, real: Var, fake: Var) -> Result<Var> {
    match kind {
        LossKind::Hinge => {
            let r = g.affine_scalar(real, -1.0, 1.0); // 1 - real
            let r = g.relu(r);
            let rm = g.mean_all(r);
            let f = g.affine_scalar(fake, 1.0, 1.0); // 1 + fake
            let f = g.relu(f);
            let fm = g.mean_all(f);
            g.add(rm, fm)
        }
        LossKind::Standard => {
            let r = g.neg(real);
            let r = g.softplus(r);
            let rm = g.mean_all(r);
            let f = g.softplus(fake);
            let fm = g.mean_all(f);
            g.add(rm, fm)
        }
    }
}

/// Generator loss as a graph node.
pub fn g_loss(g: &mut Graph, kind: LossKind, fake: Var) -> Result<Var> {
    match kind {
        LossKind::Hinge => {
            let f = g.neg(fake);
            Ok(g.mean_all(f))
        }
        LossKind::Standard => {
            let f = g.neg(fake);
            let f = g.softplus(f);
            Ok(g.mean_all(f))
        }
    }
}

// ---- optimizer -----------------------------------------------------------------

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(set: &ParamSet) -> Self {
        let m = set.iter().map(|p| ArrayD::zeros(p.data.raw_dim())).collect();
        let v = set.iter().map(|p| ArrayD::zeros(p.data.raw_dim())).collect();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update over every parameter's accumulated grad.
pub fn adam_step(
    set: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in set.iter_mut().enumerate() {
        if let Some(bad) = p.grad.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient {bad} in parameter {}",
                p.name
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut *m).and(&p.grad).for_each(|mv, &gv| {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
        });
        ndarray::Zip::from(&mut *v).and(&p.grad).for_each(|vv, &gv| {
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        });
        ndarray::Zip::from(&mut p.data)
            .and(&*m)
            .and(&*v)
            .for_each(|dv, &mv, &vv| {
                let mh = mv / bc1;
                let vh = vv / bc2;
                *dv -= lr * mh / (vh.sqrt() + eps);
            });
    }
    Ok(())
}

// ---- train state ---------------------------------------------------------------

pub struct TrainState {
    pub cfg: TrainConfig,
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    /// Completed generator iterations.
    pub iter: u64,
    pub z_rng: SeedRng,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, gen: GeneratorParams, disc: DiscriminatorParams) -> Result<Self> {
        cfg.validate()?;
        let adam_g = AdamState::new(&gen.set);
        let adam_d = AdamState::new(&disc.set);
        let z_rng = SeedRng::new(cfg.seed).derive(0x7a);
        Ok(Self {
            cfg,
            gen,
            disc,
            adam_g,
            adam_d,
            iter: 0,
            z_rng,
        })
    }

    fn sample_latents(&mut self, n: usize) -> (Array2<f64>, Option<Vec<usize>>) {
        let d = self.gen.cfg.latent_dim;
        let mut z = Array2::zeros((n, d));
        for v in z.iter_mut() {
            *v = self.z_rng.normal();
        }
        let labels = if self.gen.cfg.conditional() {
            let k = self.gen.cfg.num_classes;
            Some((0..n).map(|_| self.z_rng.below(k)).collect())
        } else {
            None
        };
        (z, labels)
    }

    fn parallel(&self) -> bool {
        self.cfg.threads != 1
    }

    /// One discriminator update on a fresh real batch and fresh fakes.
    pub(crate) fn d_update(&mut self, data: &mut BatchIterator, lr_d: f64) -> Result<f64> {
        let real = data.next_batch()?;
        let (z, fake_labels) = self.sample_latents(self.cfg.batch_d);
        let fakes = {
            let mut g = Graph::new(Mode::Train)
                .with_parallel(self.parallel())
                .no_grad();
            let mut binder = Binder::new();
            let zv = g.leaf(z.into_dyn(), false);
            let img = self
                .gen
                .forward(&mut g, &mut binder, zv, fake_labels.as_deref())?;
            g.value(img).clone()
        };
        self.disc.set.zero_grads();
        let mut g = Graph::new(Mode::Train).with_parallel(self.parallel());
        let mut binder = Binder::new();
        let rv = g.leaf(real.pixels.into_dyn(), false);
        let fv = g.leaf(fakes, false);
        let r_logits = self
            .disc
            .forward(&mut g, &mut binder, rv, real.labels.as_deref())?;
        let f_logits = self
            .disc
            .forward(&mut g, &mut binder, fv, fake_labels.as_deref())?;
        let loss = d_loss(&mut g, self.cfg.loss, r_logits, f_logits)?;
        let loss_val = g.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite discriminator loss {loss_val}"
            )));
        }
        g.backward(loss)?;
        binder.harvest(&mut g, &mut self.disc.set);
        adam_step(
            &mut self.disc.set,
            &mut self.adam_d,
            lr_d,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
        )?;
        Ok(loss_val)
    }

    /// One generator update; the discriminator participates frozen.
    pub(crate) fn g_update(&mut self, lr_g: f64) -> Result<f64> {
        let (z, labels) = self.sample_latents(self.cfg.batch_g);
        self.gen.set.zero_grads();
        let mut g = Graph::new(Mode::Train).with_parallel(self.parallel());
        let mut binder_g = Binder::new();
        let mut binder_d = Binder::frozen();
        let zv = g.leaf(z.into_dyn(), false);
        let img = self
            .gen
            .forward(&mut g, &mut binder_g, zv, labels.as_deref())?;
        let logits = self
            .disc
            .forward(&mut g, &mut binder_d, img, labels.as_deref())?;
        let loss = g_loss(&mut g, self.cfg.loss, logits)?;
        let loss_val = g.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite generator loss {loss_val}"
            )));
        }
        g.backward(loss)?;
        binder_g.harvest(&mut g, &mut self.gen.set);
        adam_step(
            &mut self.gen.set,
            &mut self.adam_g,
            lr_g,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.adam_eps,
        )?;
        Ok(loss_val)
    }

    // ---- checkpoint wiring ----

    pub fn to_checkpoint(&mut self, data_state: (u64, u64), config_echo: String) -> Checkpoint {
        let mut tensors: Vec<(String, ArrayD<f64>)> = Vec::new();
        let push_set = |tensors: &mut Vec<(String, ArrayD<f64>)>, net: &str, set: &ParamSet| {
            for p in set.iter() {
                tensors.push((format!("{net}.param.{}", p.name), p.data.clone()));
                if let Some(sn) = &p.sn {
                    tensors.push((
                        format!("{net}.sn_u.{}", p.name),
                        sn.u.clone().into_dyn(),
                    ));
                    tensors.push((
                        format!("{net}.sn_v.{}", p.name),
                        sn.v.clone().into_dyn(),
                    ));
                }
            }
        };
        push_set(&mut tensors, "gen", &self.gen.set);
        push_set(&mut tensors, "disc", &self.disc.set);
        self.gen.visit_bn_states(&mut |name, state| {
            tensors.push((
                format!("gen.bn.{name}.mean"),
                state.running_mean.clone().into_dyn(),
            ));
            tensors.push((
                format!("gen.bn.{name}.var"),
                state.running_var.clone().into_dyn(),
            ));
        });
        let push_adam = |tensors: &mut Vec<(String, ArrayD<f64>)>,
                         tag: &str,
                         set: &ParamSet,
                         adam: &AdamState| {
            for (i, p) in set.iter().enumerate() {
                tensors.push((format!("{tag}.m.{}", p.name), adam.m[i].clone()));
                tensors.push((format!("{tag}.v.{}", p.name), adam.v[i].clone()));
            }
            tensors.push((
                format!("{tag}.step"),
                ArrayD::from_elem(IxDyn(&[1]), adam.step as f64),
            ));
        };
        push_adam(&mut tensors, "adam_g", &self.gen.set, &self.adam_g);
        push_adam(&mut tensors, "adam_d", &self.disc.set, &self.adam_d);
        Checkpoint {
            version: 1,
            iteration: self.iter,
            rng: self.z_rng.state(),
            data_epoch: data_state.0,
            data_cursor: data_state.1,
            config_echo,
            tensors,
        }
    }

    /// Restore a state built with the same architecture/config; returns the
    /// data-iterator position to seek to.
    pub fn apply_checkpoint(&mut self, cp: &Checkpoint) -> Result<(u64, u64)> {
        let mut used = 0usize;
        let get = |name: String| -> Result<&ArrayD<f64>> {
            cp.tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let fill_set = |net: &str, set: &mut ParamSet, used: &mut usize| -> Result<()> {
            for p in set.iter_mut() {
                let t = get(format!("{net}.param.{}", p.name))?;
                if t.shape() != p.data.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {net}.param.{}",
                        p.name
                    )));
                }
                p.data = t.clone();
                *used += 1;
                if let Some(sn) = &mut p.sn {
                    let u = get(format!("{net}.sn_u.{}", p.name))?;
                    let v = get(format!("{net}.sn_v.{}", p.name))?;
                    sn.u = u
                        .clone()
                        .into_dimensionality()
                        .map_err(|_| Error::Checkpoint("bad sn_u rank".into()))?;
                    sn.v = v
                        .clone()
                        .into_dimensionality()
                        .map_err(|_| Error::Checkpoint("bad sn_v rank".into()))?;
                    *used += 2;
                }
            }
            Ok(())
        };
        fill_set("gen", &mut self.gen.set, &mut used)?;
        fill_set("disc", &mut self.disc.set, &mut used)?;
        let mut bn_err = None;
        self.gen.visit_bn_states(&mut |name, state| {
            let mean = cp.tensor(&format!("gen.bn.{name}.mean"));
            let var = cp.tensor(&format!("gen.bn.{name}.var"));
            match (mean, var) {
                (Some(m), Some(v)) => {
                    state.running_mean = m.clone().into_dimensionality().expect("bn mean rank");
                    state.running_var = v.clone().into_dimensionality().expect("bn var rank");
                    used += 2;
                }
                _ => bn_err = Some(format!("missing bn state gen.bn.{name}")),
            }
        });
        if let Some(msg) = bn_err {
            return Err(Error::Checkpoint(msg));
        }
        let fill_adam =
            |tag: &str, set: &ParamSet, adam: &mut AdamState, used: &mut usize| -> Result<()> {
                for (i, p) in set.iter().enumerate() {
                    adam.m[i] = get(format!("{tag}.m.{}", p.name))?.clone();
                    adam.v[i] = get(format!("{tag}.v.{}", p.name))?.clone();
                    *used += 2;
                }
                let step = get(format!("{tag}.step"))?;
                adam.step = step[[0]] as u64;
                *used += 1;
                Ok(())
            };
        fill_adam("adam_g", &self.gen.set, &mut self.adam_g, &mut used)?;
        fill_adam("adam_d", &self.disc.set, &mut self.adam_d, &mut used)?;
        if used != cp.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the architecture consumed {used}",
                cp.tensors.len()
            )));
        }
        self.iter = cp.iteration;
        self.z_rng = SeedRng::restore(cp.rng);
        Ok((cp.data_epoch, cp.data_cursor))
    }
}

/// Metrics for one completed generator iteration.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub iter: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Run `d_steps_per_g` discriminator updates then one generator update.
pub fn train_step(state: &mut TrainState, data: &mut BatchIterator) -> Result<StepMetrics> {
    let (lr_g, lr_d) = lr_at(state.iter, &state.cfg);
    let mut loss_d = 0.0;
    for _ in 0..state.cfg.d_steps_per_g {
        loss_d = state.d_update(data, lr_d)?;
    }
    let loss_g = state.g_update(lr_g)?;
    let m = StepMetrics {
        iter: state.iter + 1,
        lr_g,
        lr_d,
        loss_d,
        loss_g,
    };
    state.iter += 1;
    Ok(m)
}

/// Optional evaluation plan run at iteration 0, every `eval_interval`, and at
/// the end of training.
pub struct EvalPlan<'a> {
    pub real: &'a Dataset,
    pub backend: &'a dyn EmbeddingBackend,
    pub n_samples: usize,
    pub is_splits: usize,
}

/// Optional periodic sample-grid emission.
#[derive(Debug, Clone)]
pub struct GridPlan {
    pub interval: u64,
    pub n: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub eval_csv: Option<PathBuf>,
    pub reports: Vec<(u64, MetricReport)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_HEADER: &str = "iter,lr_g,lr_d,loss_d,loss_g,wallclock_s";

/// The full training loop: alternating updates, per-iteration metrics rows
/// (flushed immediately), periodic checkpoints and sample grids, and
/// evaluations.
/// A non-finite loss halts with an emergency checkpoint dump.
pub fn train_loop(
    state: &mut TrainState,
    data: &mut BatchIterator,
    out_dir: &Path,
    config_echo: &str,
    eval: Option<&EvalPlan<'_>>,
    grid: Option<&GridPlan>,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_csv = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_csv)?,
    );
    if metrics.get_ref().metadata()?.len() == 0 {
        writeln!(metrics, "{METRICS_HEADER}")?;
        metrics.flush()?;
    }
    let mut artifacts = RunArtifacts {
        metrics_csv: metrics_csv.clone(),
        eval_csv: None,
        reports: Vec::new(),
        checkpoints: Vec::new(),
        final_checkpoint: out_dir.join("checkpoint_final.ckpt"),
    };

    let run_eval = |state: &mut TrainState, artifacts: &mut RunArtifacts| -> Result<()> {
        let Some(plan) = eval else { return Ok(()) };
        let iter = state.iter;
        let eval_seed = state.cfg.seed ^ 0xea10_0000 ^ iter;
        let mut source = GeneratorSource::new(&mut state.gen, eval_seed);
        let report = evaluate(
            &mut source,
            plan.real,
            plan.backend,
            plan.n_samples,
            eval_seed,
            plan.is_splits,
        )?;
        let path = out_dir.join("evals.csv");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "iter,{}", MetricReport::csv_header())?;
        }
        writeln!(f, "{iter},{}", report.csv_row())?;
        artifacts.eval_csv = Some(path);
        artifacts.reports.push((iter, report));
        Ok(())
    };

    let write_grid = |state: &mut TrainState| -> Result<()> {
        let Some(plan) = grid else { return Ok(()) };
        let iter = state.iter;
        if iter % plan.interval != 0 && iter != state.cfg.total_g_iters {
            return Ok(());
        }
        let seed = state.cfg.seed ^ 0x9a1d;
        let mut source = GeneratorSource::new(&mut state.gen, seed);
        let images = crate::metrics::SampleSource::next_images(&mut source, plan.n)?;
        save_image_grid(&out_dir.join(format!("samples_{iter:07}.png")), &images, plan.cols)?;
        Ok(())
    };

    run_eval(state, &mut artifacts)?;
    write_grid(state)?;

    let started = std::time::Instant::now();
    while state.iter < state.cfg.total_g_iters {
        let step = match train_step(state, data) {
            Ok(m) => m,
            Err(e) => {
                let halt = out_dir.join("checkpoint_halt.ckpt");
                let cp = state.to_checkpoint(data.state(), config_echo.to_string());
                save_checkpoint(&halt, &cp)?;
                return Err(Error::numeric(format!(
                    "{e}; state dumped to {}",
                    halt.display()
                )));
            }
        };
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            step.iter,
            step.lr_g,
            step.lr_d,
            step.loss_d,
            step.loss_g,
            started.elapsed().as_secs_f64()
        )?;
        metrics.flush()?;

        if state.iter % state.cfg.checkpoint_interval == 0 {
            let path = out_dir.join(format!("checkpoint_{:07}.ckpt", state.iter));
            let cp = state.to_checkpoint(data.state(), config_echo.to_string());
            save_checkpoint(&path, &cp)?;
            artifacts.checkpoints.push(path);
        }
        if state.iter % state.cfg.eval_interval == 0 && state.iter != state.cfg.total_g_iters {
            run_eval(state, &mut artifacts)?;
        }
        if state.iter != state.cfg.total_g_iters {
            write_grid(state)?;
        }
    }
    let cp = state.to_checkpoint(data.state(), config_echo.to_string());
    save_checkpoint(&artifacts.final_checkpoint, &cp)?;
    run_eval(state, &mut artifacts)?;
    write_grid(state)?;
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_shapes;
    use crate::networks::{build_discriminator, build_generator, desk_arch, GenMode};

    fn tiny_state(conditional: bool, seed: u64) -> (TrainState, BatchIterator) {
        let classes = if conditional { 4 } else { 0 };
        let (gcfg, dcfg) = desk_arch(GenMode::Proposed, classes, 8, 32);
        let gen = build_generator(&gcfg, seed).unwrap();
        let disc = build_discriminator(&dcfg, seed + 1).unwrap();
        let mut cfg = TrainConfig::preset("desk-smoke").unwrap();
        cfg.batch_d = 4;
        cfg.batch_g = 4;
        cfg.total_g_iters = 6;
        cfg.decay_window = 6;
        cfg.checkpoint_interval = 2;
        cfg.eval_interval = 3;
        cfg.seed = seed;
        cfg.threads = 1;
        let state = TrainState::new(cfg, gen, disc).unwrap();
        let ds = synthetic_shapes(16, classes.max(1), 32, seed).unwrap();
        let data = BatchIterator::new(ds, 4, seed).unwrap();
        (state, data)
    }

    #[test]
    fn standard_loss_values_and_oracle() {
        let zeros = ndarray::arr1(&[0.0, 0.0]);
        let (ld, lg) = loss_standard(&zeros, &zeros);
        assert!((ld - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        assert!((lg - (2.0f64).ln()).abs() < 1e-12);

        // Perfect discriminator drives L_D to zero.
        let big = ndarray::arr1(&[40.0]);
        let neg = ndarray::arr1(&[-40.0]);
        let (ld, _) = loss_standard(&big, &neg);
        assert!(ld < 1e-12, "{ld}");

        // Random logits against the direct per-element formula.
        let mut rng = SeedRng::new(1);
        let real = Array1::from_shape_fn(16, |_| 3.0 * rng.normal());
        let fake = Array1::from_shape_fn(16, |_| 3.0 * rng.normal());
        let (ld, lg) = loss_standard(&real, &fake);
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want_ld = real.iter().map(|&v| -sigma(v).ln()).sum::<f64>() / 16.0
            + fake.iter().map(|&v| -(1.0 - sigma(v)).ln()).sum::<f64>() / 16.0;
        let want_lg = fake.iter().map(|&v| -sigma(v).ln()).sum::<f64>() / 16.0;
        assert!((ld - want_ld).abs() < 1e-10);
        assert!((lg - want_lg).abs() < 1e-10);
    }

    #[test]
    fn hinge_loss_values_and_oracle() {
        let one = ndarray::arr1(&[1.0]);
        let minus = ndarray::arr1(&[-1.0]);
        let (ld, _) = loss_hinge(&one, &minus);
        assert_eq!(ld, 0.0);
        let zeros = ndarray::arr1(&[0.0, 0.0]);
        let (ld, lg) = loss_hinge(&zeros, &zeros);
        assert_eq!(ld, 2.0);
        assert_eq!(lg, 0.0);

        let mut rng = SeedRng::new(2);
        let real = Array1::from_shape_fn(8, |_| 2.0 * rng.normal());
        let fake = Array1::from_shape_fn(8, |_| 2.0 * rng.normal());
        let (ld, lg) = loss_hinge(&real, &fake);
        let want_ld = real.iter().map(|&v| (1.0 - v).max(0.0)).sum::<f64>() / 8.0
            + fake.iter().map(|&v| (1.0 + v).max(0.0)).sum::<f64>() / 8.0;
        assert!((ld - want_ld).abs() < 1e-12);
        assert!((lg + fake.sum() / 8.0).abs() < 1e-12);
        assert!(ld >= 0.0);
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let mut rng = SeedRng::new(3);
        let real = Array1::from_shape_fn(8, |_| rng.normal());
        let fake = Array1::from_shape_fn(8, |_| rng.normal());
        for kind in [LossKind::Hinge, LossKind::Standard] {
            let mut g = Graph::new(Mode::Eval);
            let rv = g.leaf(real.clone().into_dyn(), false);
            let fv = g.leaf(fake.clone().into_dyn(), false);
            let ld = d_loss(&mut g, kind, rv, fv).unwrap();
            let lg = g_loss(&mut g, kind, fv).unwrap();
            let (wld, wlg) = match kind {
                LossKind::Hinge => loss_hinge(&real, &fake),
                LossKind::Standard => loss_standard(&real, &fake),
            };
            assert!((g.scalar(ld) - wld).abs() < 1e-12);
            assert!((g.scalar(lg) - wlg).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        // Zero gradients leave parameters untouched but advance the step.
        let mut set = ParamSet::new();
        set.add("w", ndarray::arr1(&[1.5]).into_dyn());
        let mut adam = AdamState::new(&set);
        adam_step(&mut set, &mut adam, 0.1, 0.0, 0.9, 1e-8).unwrap();
        assert_eq!(set.get(crate::layers::ParamId(0)).data[[0]], 1.5);
        assert_eq!(adam.step, 1);

        // Fresh state, g=1, first step: bias correction cancels the decay
        // factors exactly, so the update is -lr/(1 + eps).
        let mut set = ParamSet::new();
        set.add("w", ndarray::arr1(&[1.5]).into_dyn());
        set.get_mut(crate::layers::ParamId(0)).grad.fill(1.0);
        let mut adam = AdamState::new(&set);
        adam_step(&mut set, &mut adam, 0.1, 0.0, 0.9, 1e-8).unwrap();
        let want = 1.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        let got = set.get(crate::layers::ParamId(0)).data[[0]];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn adam_three_step_trajectory_matches_scalar_oracle() {
        let (beta1, beta2, lr, eps) = (0.5, 0.9, 0.05, 1e-8);
        let grads = [0.7, -1.3, 0.2];
        let mut set = ParamSet::new();
        set.add("w", ndarray::arr1(&[0.4]).into_dyn());
        let mut adam = AdamState::new(&set);

        // Hand-rolled scalar Adam.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.4f64);
        for (t, &g) in grads.iter().enumerate() {
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let mh = m / (1.0 - beta1.powi(t as i32 + 1));
            let vh = v / (1.0 - beta2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);

            set.get_mut(crate::layers::ParamId(0)).grad.fill(g);
            adam_step(&mut set, &mut adam, lr, beta1, beta2, eps).unwrap();
        }
        let got = set.get(crate::layers::ParamId(0)).data[[0]];
        assert!((got - x).abs() < 1e-14, "{got} vs {x}");
    }

    #[test]
    fn adam_rejects_non_finite_grad_with_name() {
        let mut set = ParamSet::new();
        set.add("layer.weight", ndarray::arr1(&[1.0]).into_dyn());
        set.get_mut(crate::layers::ParamId(0)).grad.fill(f64::NAN);
        let mut adam = AdamState::new(&set);
        let err = adam_step(&mut set, &mut adam, 0.1, 0.0, 0.9, 1e-8).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let mut cfg = TrainConfig::preset("cifar-gan").unwrap();
        cfg.total_g_iters = 100;
        cfg.decay_window = 50;
        assert_eq!(lr_at(0, &cfg), (2e-4, 2e-4));
        assert_eq!(lr_at(50, &cfg), (2e-4, 2e-4));
        let (g75, _) = lr_at(75, &cfg);
        assert!((g75 - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, &cfg), (0.0, 0.0));
        let mut last = f64::INFINITY;
        for i in 0..=100 {
            let (lg, _) = lr_at(i, &cfg);
            assert!(lg <= last + 1e-15);
            // Continuity: adjacent values differ by at most one decay step.
            assert!((last - lg).abs() <= 2e-4 / 50.0 + 1e-15 || last == f64::INFINITY);
            last = lg;
        }
    }

    #[test]
    fn presets_encode_published_values() {
        for name in ["cifar-gan", "cifar-cgan"] {
            let c = TrainConfig::preset(name).unwrap();
            assert_eq!((c.lr_g, c.lr_d), (2e-4, 2e-4));
            assert_eq!(c.d_steps_per_g, 5);
            assert_eq!((c.batch_d, c.batch_g), (64, 128));
            assert_eq!(c.total_g_iters, 50_000);
            assert_eq!(c.decay_window, 50_000);
            assert_eq!((c.beta1, c.beta2), (0.0, 0.9));
            assert_eq!(c.loss, LossKind::Hinge);
        }
        let c = TrainConfig::preset("lsun-ttur").unwrap();
        assert_eq!((c.lr_g, c.lr_d), (1e-4, 4e-4));
        assert_eq!(c.d_steps_per_g, 1);
        assert_eq!((c.batch_d, c.batch_g), (32, 32));
        assert_eq!(c.decay_window, 50_000);
        for name in ["hq-256", "hq-512"] {
            let c = TrainConfig::preset(name).unwrap();
            assert_eq!((c.batch_d, c.batch_g), (16, 16));
            assert_eq!(c.total_g_iters, 100_000);
            assert_eq!(c.decay_window, 50_000);
        }
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn updates_touch_only_the_intended_network() {
        let (mut state, mut data) = tiny_state(false, 5);
        let gen_before: Vec<_> = state.gen.set.iter().map(|p| p.data.clone()).collect();
        state.d_update(&mut data, 1e-3).unwrap();
        for (p, before) in state.gen.set.iter().zip(&gen_before) {
            assert_eq!(&p.data, before, "generator changed during D update: {}", p.name);
        }
        let disc_after_d: Vec<_> = state.disc.set.iter().map(|p| p.data.clone()).collect();
        state.g_update(1e-3).unwrap();
        for (p, before) in state.disc.set.iter().zip(&disc_after_d) {
            assert_eq!(&p.data, before, "discriminator changed during G update: {}", p.name);
        }
        // And the generator did move.
        assert!(state
            .gen
            .set
            .iter()
            .zip(gen_before.iter())
            .any(|(p, b)| &p.data != b));
    }

    #[test]
    fn checkpoint_resume_is_bitwise_equivalent() {
        // Run 6 iterations straight.
        let (mut full, mut data_full) = tiny_state(true, 9);
        let mut straight = Vec::new();
        for _ in 0..6 {
            let m = train_step(&mut full, &mut data_full).unwrap();
            straight.push((m.loss_d, m.loss_g));
        }

        // Run 3, checkpoint, restore into a fresh state, run 3 more.
        let (mut a, mut data_a) = tiny_state(true, 9);
        for _ in 0..3 {
            train_step(&mut a, &mut data_a).unwrap();
        }
        let cp = a.to_checkpoint(data_a.state(), String::new());

        let (mut b, mut data_b) = tiny_state(true, 9);
        let (epoch, cursor) = b.apply_checkpoint(&cp).unwrap();
        data_b.restore(epoch, cursor);
        for i in 3..6 {
            let m = train_step(&mut b, &mut data_b).unwrap();
            assert_eq!(
                (m.loss_d, m.loss_g),
                straight[i],
                "iteration {} diverged after resume",
                i + 1
            );
        }
        for (p, q) in full.gen.set.iter().zip(b.gen.set.iter()) {
            assert_eq!(p.data, q.data, "generator parameter {} diverged", p.name);
        }
        for (p, q) in full.disc.set.iter().zip(b.disc.set.iter()) {
            assert_eq!(p.data, q.data, "discriminator parameter {} diverged", p.name);
        }
    }

    #[test]
    fn train_loop_writes_artifacts_and_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let (mut state, mut data) = tiny_state(false, 11);
            let out = dir.path().join(sub);
            let ds = data.dataset().clone();
            let backend = crate::metrics::PixelStatBackend { size: 8 };
            let plan = EvalPlan {
                real: &ds,
                backend: &backend,
                n_samples: 8,
                is_splits: 1,
            };
            let art = train_loop(&mut state, &mut data, &out, "echo", Some(&plan), None).unwrap();
            let csv = std::fs::read_to_string(&art.metrics_csv).unwrap();
            (art, csv)
        };
        let (art1, csv1) = run("a");
        let (_, csv2) = run("b");
        assert_eq!(csv1.lines().count(), 7, "header + 6 rows:\n{csv1}");
        // Identical metrics modulo the wallclock column.
        let strip = |s: &str| {
            s.lines()
                .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&csv1), strip(&csv2));
        assert_eq!(art1.checkpoints.len(), 3, "intervals at 2, 4, 6");
        assert!(art1.final_checkpoint.exists());
        // Evals at iteration 0, 3 (interval), and 6 (final).
        assert_eq!(art1.reports.len(), 3);
        assert!(art1.reports.iter().all(|(_, r)| r.fid.is_finite()));
    }
}

#[cfg(test)]
mod bench {
    use super::*;
    use crate::data::synthetic_shapes;
    use crate::networks::{build_discriminator, build_generator, desk_arch, GenMode};

    #[test]
    #[ignore = "manual timing probe"]
    fn time_desk_smoke_step() {
        for width in [16usize, 24] {
            let (gcfg, dcfg) = desk_arch(GenMode::Proposed, 4, width, 64);
            let gen = build_generator(&gcfg, 1).unwrap();
            let disc = build_discriminator(&dcfg, 2).unwrap();
            let mut cfg = TrainConfig::preset("desk-smoke").unwrap();
            cfg.seed = 1;
            let mut state = TrainState::new(cfg, gen, disc).unwrap();
            let ds = synthetic_shapes(512, 4, 32, 1).unwrap();
            let mut data = BatchIterator::new(ds, 16, 1).unwrap();
            // Warm up once, then time.
            train_step(&mut state, &mut data).unwrap();
            let t0 = std::time::Instant::now();
            let reps = 5;
            for _ in 0..reps {
                train_step(&mut state, &mut data).unwrap();
            }
            let per = t0.elapsed().as_secs_f64() / reps as f64;
            eprintln!(
                "width {width}: {:.3} s/iter -> {:.1} min for 3x500 iters (params G={} D={})",
                per,
                per * 1500.0 / 60.0,
                state.gen.param_count(),
                state.disc.param_count()
            );
        }
    }
}
