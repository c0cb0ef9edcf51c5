//! Operator surface: the run configuration file, named presets, and the
//! train / eval / generate / gradcheck / summary subcommand implementations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::data::{save_image_grid, scan_and_decode, BatchIterator, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::gffm::{GatingUnitParams, GffmParams};
use crate::gradcheck::{grad_check_params, CheckOpts};
use crate::graph::Mode;
use crate::layers::{Binder, CondBatchNorm, ParamSet};
use crate::metrics::{
    evaluate, EmbeddingBackend, ExternalWeightsBackend, GeneratorSource, PixelStatBackend,
    RandomProjBackend, SampleSource,
};
use crate::networks::{
    arch_from_table, build_discriminator, build_generator, desk_arch, BlockKind, GenArchConfig,
    GenMode,
};
use crate::rng::SeedRng;
use crate::training::{train_loop, EvalPlan, GridPlan, TrainConfig, TrainState};

/// Architecture selection section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSection {
    pub resolution: usize,
    pub mode: GenMode,
    /// 0 = table widths for the resolution; otherwise a desk-scale width.
    #[serde(default)]
    pub width: usize,
    /// 0 = default latent dimension (128 for table presets, 64 desk-scale).
    #[serde(default)]
    pub latent_dim: usize,
    /// Overrides the per-resolution default when present.
    #[serde(default)]
    pub sn_generator: Option<bool>,
    #[serde(default)]
    pub swap_gffm_args: bool,
    #[serde(default = "default_block_kind")]
    pub block_kind: BlockKind,
    /// Adds the fusion module the table omits on the fourth 128-res block.
    #[serde(default)]
    pub fill_gffm_gaps: bool,
}

fn default_block_kind() -> BlockKind {
    BlockKind::Residual
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Directory path or `synthetic://shapes?n=..&classes=..`.
    pub source: String,
    /// 0 = unconditional.
    #[serde(default)]
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    /// `pixel-stat`, `random-proj`, or `external:<archive path>`.
    pub backend: String,
    pub n_samples: usize,
    #[serde(default = "default_splits")]
    pub is_splits: usize,
}

fn default_splits() -> usize {
    1
}

/// Everything a run needs: training hyperparameters, architecture, dataset,
/// and metrics backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchSection,
    pub data: DataSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    /// Built-in presets matching the published experimental settings plus
    /// the desk-scale smoke run.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let train = TrainConfig::preset(name)?;
        let (resolution, conditional, width, latent) = match name {
            "cifar-gan" => (32, false, 0, 0),
            "cifar-cgan" => (32, true, 0, 0),
            "lsun-ttur" => (128, false, 0, 0),
            "hq-256" => (256, false, 0, 0),
            "hq-512" => (512, false, 0, 0),
            "desk-smoke" => (32, true, 16, 64),
            other => return Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        };
        let classes = if conditional {
            if name == "desk-smoke" {
                4
            } else {
                10
            }
        } else {
            0
        };
        let n = if name == "desk-smoke" { 512 } else { 2048 };
        Ok(RunConfig {
            train,
            arch: ArchSection {
                resolution,
                mode: GenMode::Proposed,
                width,
                latent_dim: latent,
                sn_generator: None,
                swap_gffm_args: false,
                block_kind: BlockKind::Residual,
                fill_gffm_gaps: false,
            },
            data: DataSection {
                source: format!(
                    "synthetic://shapes?n={n}&classes={}",
                    classes.max(1)
                ),
                num_classes: classes,
            },
            metrics: MetricsSection {
                backend: "pixel-stat".into(),
                n_samples: 512.min(n),
                is_splits: 1,
            },
        })
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.arch.swap_gffm_args && self.arch.mode != GenMode::Proposed {
            return Err(Error::InvalidConfig(
                "swap_gffm_args is only meaningful in proposed mode".into(),
            ));
        }
        if matches!(self.arch.block_kind, BlockKind::Dense { .. })
            && self.arch.mode == GenMode::Proposed
        {
            return Err(Error::InvalidConfig(
                "dense blocks are a baseline ablation; use sngan or biggan mode".into(),
            ));
        }
        if self.arch.width == 0 && ![32, 128, 256, 512].contains(&self.arch.resolution) {
            return Err(Error::InvalidConfig(format!(
                "table architectures exist for 32/128/256/512, not {}",
                self.arch.resolution
            )));
        }
        if self.arch.width > 0 && self.arch.resolution != 32 {
            return Err(Error::InvalidConfig(
                "desk-scale width override is defined for the 32x32 layout".into(),
            ));
        }
        if self.metrics.n_samples < 2 {
            return Err(Error::InvalidConfig("metrics.n_samples must be >= 2".into()));
        }
        if let Some(rest) = self.metrics.backend.strip_prefix("external:") {
            if rest.is_empty() {
                return Err(Error::InvalidConfig(
                    "external backend needs a path: external:<archive>".into(),
                ));
            }
        } else if !["pixel-stat", "random-proj"].contains(&self.metrics.backend.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "unknown metrics backend '{}'",
                self.metrics.backend
            )));
        }
        Ok(())
    }

    pub fn gen_arch(&self) -> Result<GenArchConfig> {
        let classes = self.data.num_classes;
        let mut gcfg = if self.arch.width > 0 {
            let latent = if self.arch.latent_dim > 0 {
                self.arch.latent_dim
            } else {
                64
            };
            desk_arch(self.arch.mode, classes, self.arch.width, latent).0
        } else {
            arch_from_table(self.arch.resolution, self.arch.mode, classes)?.0
        };
        if self.arch.latent_dim > 0 {
            gcfg.latent_dim = self.arch.latent_dim;
        }
        if let Some(sn) = self.arch.sn_generator {
            gcfg.sn = sn;
        }
        gcfg.swap_gffm_args = self.arch.swap_gffm_args;
        gcfg.block_kind = self.arch.block_kind;
        if self.arch.fill_gffm_gaps && self.arch.mode == GenMode::Proposed {
            for b in &mut gcfg.blocks {
                b.gffm.get_or_insert(b.channels);
            }
        }
        Ok(gcfg)
    }

    pub fn build_nets(
        &self,
    ) -> Result<(crate::networks::GeneratorParams, crate::networks::DiscriminatorParams)> {
        let gcfg = self.gen_arch()?;
        let dcfg = if self.arch.width > 0 {
            desk_arch(self.arch.mode, self.data.num_classes, self.arch.width, 64).1
        } else {
            arch_from_table(self.arch.resolution, self.arch.mode, self.data.num_classes)?.1
        };
        let gen = build_generator(&gcfg, self.train.seed)?;
        let disc = build_discriminator(&dcfg, self.train.seed ^ 0xd15c)?;
        Ok((gen, disc))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let mut spec =
            DatasetSpec::parse_source(&self.data.source, self.arch.resolution, self.train.seed)?;
        if self.data.num_classes > 0 {
            spec.num_classes = self.data.num_classes;
        }
        let ds = scan_and_decode(&spec)?;
        if self.data.num_classes > 0 && ds.spec.num_classes != self.data.num_classes {
            return Err(Error::InvalidConfig(format!(
                "config expects {} classes but the dataset provides {}",
                self.data.num_classes, ds.spec.num_classes
            )));
        }
        Ok(ds)
    }

    pub fn backend(&self) -> Result<Box<dyn EmbeddingBackend>> {
        make_backend(&self.metrics.backend, self.data.num_classes)
    }
}

pub fn make_backend(name: &str, num_classes: usize) -> Result<Box<dyn EmbeddingBackend>> {
    if let Some(path) = name.strip_prefix("external:") {
        return Ok(Box::new(ExternalWeightsBackend::from_archive(Path::new(
            path,
        ))?));
    }
    match name {
        "pixel-stat" => Ok(Box::new(PixelStatBackend::default())),
        "random-proj" => Ok(Box::new(RandomProjBackend::new(0, num_classes.max(10)))),
        other => Err(Error::InvalidConfig(format!(
            "unknown metrics backend '{other}'"
        ))),
    }
}

// ---- subcommands ---------------------------------------------------------------

/// Train per the resolved config; writes the frozen config, metrics CSV,
/// checkpoints, evaluation rows, and periodic sample grids under `out`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let frozen = config.to_toml();
    std::fs::write(out.join("config.toml"), &frozen)?;

    let (gen, disc) = config.build_nets()?;
    let mut state = TrainState::new(config.train.clone(), gen, disc)?;
    let dataset = config.dataset()?;
    let mut data = BatchIterator::new(dataset.clone(), config.train.batch_d, config.train.seed)?;
    let backend = config.backend()?;
    let plan = EvalPlan {
        real: &dataset,
        backend: backend.as_ref(),
        n_samples: config.metrics.n_samples.min(dataset.len()),
        is_splits: config.metrics.is_splits,
    };
    let grid = GridPlan {
        interval: config.train.checkpoint_interval,
        n: 16,
        cols: 4,
    };
    let artifacts = train_loop(&mut state, &mut data, out, &frozen, Some(&plan), Some(&grid))?;
    println!(
        "training complete: {} iterations, metrics at {}",
        state.iter,
        artifacts.metrics_csv.display()
    );
    for (iter, report) in &artifacts.reports {
        println!("eval @ {iter}: fid {:.4}", report.fid);
    }
    Ok(())
}

/// Rebuild the networks recorded in a checkpoint and restore the state.
pub fn load_run(checkpoint: &Path) -> Result<(RunConfig, TrainState)> {
    let cp = load_checkpoint(checkpoint)?;
    if cp.config_echo.is_empty() {
        return Err(Error::Checkpoint(
            "checkpoint carries no config echo; cannot rebuild networks".into(),
        ));
    }
    let config = RunConfig::from_toml(&cp.config_echo)?;
    let (gen, disc) = config.build_nets()?;
    let mut state = TrainState::new(config.train.clone(), gen, disc)?;
    state.apply_checkpoint(&cp)?;
    Ok((config, state))
}

/// Evaluate a checkpointed generator; appends one CSV row next to the
/// checkpoint (or under `out`) and prints the human-readable block.
pub fn cmd_eval(
    checkpoint: &Path,
    backend_override: Option<&str>,
    data_override: Option<&str>,
    n_override: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (mut config, mut state) = load_run(checkpoint)?;
    if let Some(b) = backend_override {
        config.metrics.backend = b.to_string();
    }
    if let Some(d) = data_override {
        config.data.source = d.to_string();
    }
    if let Some(n) = n_override {
        config.metrics.n_samples = n;
    }
    config.validate()?;
    let dataset = config.dataset()?;
    let backend = config.backend()?;
    let n = config.metrics.n_samples.min(dataset.len());
    let mut source = GeneratorSource::new(&mut state.gen, seed);
    let report = evaluate(
        &mut source,
        &dataset,
        backend.as_ref(),
        n,
        seed,
        config.metrics.is_splits,
    )?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("evals.csv");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    use std::io::Write;
    if fresh {
        writeln!(f, "iter,{}", crate::metrics::MetricReport::csv_header())?;
    }
    writeln!(f, "{},{}", state.iter, report.csv_row())?;
    print!("{report}");
    println!("row appended to {}", path.display());
    Ok(())
}

/// Sample a grid of images from a checkpointed generator.
pub fn cmd_generate(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    cols: usize,
    out: &Path,
) -> Result<()> {
    let (_, mut state) = load_run(checkpoint)?;
    let mut source = GeneratorSource::new(&mut state.gen, seed);
    let images = source.next_images(n)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_image_grid(out, &images, cols)?;
    println!("wrote {n} samples ({cols} per row) to {}", out.display());
    Ok(())
}

// ---- gradient-check battery ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub component: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 5;

fn randn4(rng: &mut SeedRng, n: usize, c: usize, h: usize, w: usize) -> crate::graph::TensorD {
    ndarray::Array4::from_shape_fn((n, c, h, w), |_| rng.normal()).into_dyn()
}

fn check_component(
    name: &str,
    seeds: u64,
    mode: Mode,
    max_coords: Option<usize>,
    build: impl Fn(u64) -> Result<(ParamSet, Vec<crate::graph::TensorD>, BuildFn)>,
) -> Result<GradCheckRow> {
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for seed in 0..seeds {
        let (set, inputs, f) = build(seed)?;
        let report = grad_check_params(
            |g, s, vars| f(g, s, vars),
            &set,
            &inputs,
            &CheckOpts {
                seed,
                mode,
                max_coords_per_leaf: max_coords,
                ..CheckOpts::default()
            },
        )?;
        worst = worst.max(report.max_rel_err);
        coords += report.coords_checked;
    }
    Ok(GradCheckRow {
        component: name.to_string(),
        max_rel_err: worst,
        coords,
        pass: worst <= GRADCHECK_TOLERANCE,
    })
}

type BuildFn = Box<
    dyn Fn(
        &mut crate::graph::Graph,
        &mut ParamSet,
        &[crate::graph::Var],
    ) -> Result<(crate::graph::Var, Binder)>,
>;

/// The gradient-check battery behind `auxgan gradcheck`: every component is
/// checked with central differences at double precision over several seeds.
pub fn gradcheck_rows(scope: &str) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let want = |what: &str| scope == "all" || scope == what;

    if want("gffm") {
        rows.push(check_component("gating-unit", GRADCHECK_SEEDS, Mode::Train, None, |seed| {
            let mut rng = SeedRng::new(1000 + seed);
            let mut set = ParamSet::new();
            let unit = GatingUnitParams::build(&mut set, "u", 2, 2, 2, false, &mut rng)?;
            let inputs = vec![
                randn4(&mut rng, 2, 2, 3, 3),
                randn4(&mut rng, 2, 2, 3, 3),
            ];
            let f: BuildFn = Box::new(move |g, s, vars| {
                let mut binder = Binder::new();
                let out = unit.forward(g, &mut binder, s, vars[0], vars[1])?;
                let t = g.tanh(out);
                Ok((g.sum_all(t), binder))
            });
            Ok((set, inputs, f))
        })?);
        rows.push(check_component("gffm", GRADCHECK_SEEDS, Mode::Train, None, |seed| {
            let mut rng = SeedRng::new(2000 + seed);
            let mut set = ParamSet::new();
            let proto = GffmParams::build(&mut set, "gffm", 3, 2, false, false, &mut rng)?;
            let inputs = vec![
                randn4(&mut rng, 2, 2, 4, 4),
                randn4(&mut rng, 2, 3, 2, 2),
            ];
            let f: BuildFn = Box::new(move |g, s, vars| {
                let mut gffm = proto.clone();
                let mut binder = Binder::new();
                let (main, aux) = gffm.forward(g, &mut binder, s, vars[0], vars[1], false)?;
                let t1 = g.tanh(main);
                let s1 = g.sum_all(t1);
                let aux = aux.expect("non-last module refines the auxiliary feature");
                let t2 = g.tanh(aux);
                let s2 = g.sum_all(t2);
                Ok((g.add(s1, s2)?, binder))
            });
            Ok((set, inputs, f))
        })?);
    }

    if want("blocks") {
        rows.push(check_component("gen-res-block", GRADCHECK_SEEDS, Mode::Train, None, |seed| {
            let mut rng = SeedRng::new(3000 + seed);
            let mut set = ParamSet::new();
            let proto = crate::blocks::ResBlockParams::build_generator(
                &mut set, "b", 2, 3, true, None, false, &mut rng,
            );
            let inputs = vec![randn4(&mut rng, 2, 2, 3, 3)];
            let f: BuildFn = Box::new(move |g, s, vars| {
                let mut block = proto.clone();
                let mut binder = Binder::new();
                let out = block.forward_generator(g, &mut binder, s, vars[0], None)?;
                let t = g.tanh(out);
                Ok((g.sum_all(t), binder))
            });
            Ok((set, inputs, f))
        })?);
        rows.push(check_component("cbn", GRADCHECK_SEEDS, Mode::Train, None, |seed| {
            let mut rng = SeedRng::new(4000 + seed);
            let mut set = ParamSet::new();
            let proto = CondBatchNorm::build(&mut set, "cbn", 3, 4);
            // Random projections rather than the zero init, so the gradient
            // path through the conditioning is non-trivial.
            for p in set.iter_mut() {
                for v in p.data.iter_mut() {
                    *v = 0.5 * rng.normal();
                }
            }
            let inputs = vec![
                randn4(&mut rng, 2, 3, 3, 3),
                ndarray::Array2::from_shape_fn((2, 4), |_| rng.normal()).into_dyn(),
            ];
            let f: BuildFn = Box::new(move |g, s, vars| {
                let mut cbn = proto.clone();
                let mut binder = Binder::new();
                let out = cbn.forward(g, &mut binder, s, vars[0], vars[1])?;
                let t = g.tanh(out);
                Ok((g.sum_all(t), binder))
            });
            Ok((set, inputs, f))
        })?);
        rows.push(check_component(
            "disc-res-block",
            GRADCHECK_SEEDS,
            Mode::Eval,
            None,
            |seed| {
                let mut rng = SeedRng::new(5000 + seed);
                let mut set = ParamSet::new();
                let proto = crate::blocks::ResBlockParams::build_discriminator(
                    &mut set, "d", 2, 3, true, false, &mut rng,
                );
                let inputs = vec![randn4(&mut rng, 2, 2, 4, 4)];
                let f: BuildFn = Box::new(move |g, s, vars| {
                    let mut block = proto.clone();
                    let mut binder = Binder::new();
                    let out = block.forward_discriminator(g, &mut binder, s, vars[0])?;
                    let t = g.tanh(out);
                    Ok((g.sum_all(t), binder))
                });
                Ok((set, inputs, f))
            },
        )?);
        rows.push(check_component("dense-block", GRADCHECK_SEEDS, Mode::Train, None, |seed| {
            let mut rng = SeedRng::new(6000 + seed);
            let mut set = ParamSet::new();
            let proto = crate::blocks::DenseBlockParams::build(
                &mut set, "db", 2, 3, 2, 2, true, None, false, &mut rng,
            )?;
            let inputs = vec![randn4(&mut rng, 2, 2, 3, 3)];
            let f: BuildFn = Box::new(move |g, s, vars| {
                let mut block = proto.clone();
                let mut binder = Binder::new();
                let out = block.forward(g, &mut binder, s, vars[0], None)?;
                let t = g.tanh(out);
                Ok((g.sum_all(t), binder))
            });
            Ok((set, inputs, f))
        })?);
    }

    if want("generator") || scope == "all" {
        rows.push(check_component(
            "proposed-generator-2block",
            GRADCHECK_SEEDS,
            Mode::Train,
            Some(12),
            |seed| {
                let gcfg = GenArchConfig {
                    resolution: 16,
                    stem_channels: 4,
                    blocks: vec![
                        crate::networks::GenBlockSpec {
                            channels: 4,
                            up: true,
                            gffm: Some(4),
                        },
                        crate::networks::GenBlockSpec {
                            channels: 4,
                            up: true,
                            gffm: Some(4),
                        },
                    ],
                    latent_dim: 12,
                    mode: GenMode::Proposed,
                    num_classes: 0,
                    sn: false,
                    block_kind: BlockKind::Residual,
                    swap_gffm_args: false,
                };
                let proto = build_generator(&gcfg, 7000 + seed)?;
                let mut rng = SeedRng::new(7500 + seed);
                let z = ndarray::Array2::from_shape_fn((2, 12), |_| rng.normal()).into_dyn();
                let set = proto.set.clone();
                let f: BuildFn = Box::new(move |g, s, vars| {
                    let mut gen = proto.clone();
                    gen.set = std::mem::take(s);
                    let mut binder = Binder::new();
                    let result: Result<crate::graph::Var> = (|| {
                        let img = gen.forward(g, &mut binder, vars[0], None)?;
                        let t = g.tanh(img);
                        Ok(g.mean_all(t))
                    })();
                    *s = std::mem::take(&mut gen.set);
                    Ok((result?, binder))
                });
                Ok((set, vec![z], f))
            },
        )?);
    }

    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "unknown gradcheck scope '{scope}' (expected gffm, blocks, generator, or all)"
        )));
    }
    Ok(rows)
}

/// Print the pass/fail table; Ok(true) iff every component passed.
pub fn cmd_gradcheck(scope: &str) -> Result<bool> {
    let rows = gradcheck_rows(scope)?;
    println!(
        "{:<28} {:>12} {:>8} {:>6}",
        "component", "max rel err", "coords", "pass"
    );
    let mut all = true;
    for row in &rows {
        println!(
            "{:<28} {:>12.3e} {:>8} {:>6}",
            row.component,
            row.max_rel_err,
            row.coords,
            if row.pass { "ok" } else { "FAIL" }
        );
        all &= row.pass;
    }
    println!(
        "tolerance {} over {} seeds: {}",
        GRADCHECK_TOLERANCE,
        GRADCHECK_SEEDS,
        if all { "all passed" } else { "FAILURES" }
    );
    Ok(all)
}

/// Reference parameter budgets for the 32x32 generators (in millions).
pub fn reference_target(config: &RunConfig) -> Option<(f64, f64)> {
    if config.arch.resolution != 32 || config.arch.width != 0 {
        return None;
    }
    match (config.arch.mode, config.arch.block_kind) {
        (GenMode::Proposed, BlockKind::Residual) => Some((5.68e6, 0.15)),
        (GenMode::Biggan, BlockKind::Residual) => Some((3.78e6, 0.10)),
        (GenMode::Biggan, BlockKind::Dense { .. }) => Some((4.74e6, 0.10)),
        _ => None,
    }
}

/// Print architecture summaries plus the parameter-budget comparison.
pub fn cmd_summary(config: &RunConfig) -> Result<String> {
    config.validate()?;
    let (gen, disc) = config.build_nets()?;
    let mut out = String::new();
    out.push_str(&gen.summary());
    out.push('\n');
    out.push_str(&disc.summary());
    if let Some((target, band)) = reference_target(config) {
        let actual = gen.param_count() as f64;
        let dev = (actual - target) / target;
        out.push_str(&format!(
            "\ngenerator parameters: {} vs reference {:.2}M ({:+.2}%, band ±{:.0}%)\n",
            gen.param_count(),
            target / 1e6,
            dev * 100.0,
            band * 100.0
        ));
    }
    print!("{out}");
    Ok(out)
}


#[cfg(test)]
mod battery_tests {
    use super::*;

    #[test]
    fn gradcheck_battery_passes_within_tolerance() {
        let t0 = std::time::Instant::now();
        let rows = gradcheck_rows("all").unwrap();
        let dt = t0.elapsed().as_secs_f64();
        assert_eq!(rows.len(), 7, "gating unit, gffm, cbn, 3 block kinds, generator");
        for row in &rows {
            assert!(
                row.pass,
                "{} failed: max rel err {}",
                row.component, row.max_rel_err
            );
        }
        assert!(dt < 120.0, "battery took {dt:.1}s, budget is 2 minutes");
        eprintln!("gradcheck battery: {dt:.1}s");
    }
}
