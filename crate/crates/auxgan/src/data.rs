//! Image ingestion: directory corpora with per-subdirectory class labels,
//! procedurally rendered synthetic shape datasets for desk-scale runs, and
//! seeded epoch-shuffled batch iteration.
//!
//! All emitted pixels live in [-1, 1]. Real images are center-cropped to a
//! square and bilinearly resized to the configured resolution.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory tree; first-level subdirectories (sorted lexicographically)
    /// become class labels when present.
    Directory(PathBuf),
    /// Procedurally rendered colored shapes.
    SyntheticShapes { n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub resolution: usize,
    /// 0 = unconditional.
    pub num_classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Parse a source string: either a filesystem path or a recipe like
    /// `synthetic://shapes?n=400&classes=4`.
    pub fn parse_source(s: &str, resolution: usize, seed: u64) -> Result<DatasetSpec> {
        if let Some(rest) = s.strip_prefix("synthetic://") {
            let (kind, query) = rest.split_once('?').unwrap_or((rest, ""));
            if kind != "shapes" {
                return Err(Error::data(format!("unknown synthetic recipe '{kind}'")));
            }
            let mut n = 0usize;
            let mut classes = 0usize;
            for pair in query.split('&').filter(|p| !p.is_empty()) {
                match pair.split_once('=') {
                    Some(("n", v)) => {
                        n = v
                            .parse()
                            .map_err(|_| Error::data(format!("bad n in recipe: {v}")))?
                    }
                    Some(("classes", v)) => {
                        classes = v
                            .parse()
                            .map_err(|_| Error::data(format!("bad classes in recipe: {v}")))?
                    }
                    _ => return Err(Error::data(format!("bad recipe parameter '{pair}'"))),
                }
            }
            if n == 0 {
                return Err(Error::data("synthetic recipe needs n >= 1"));
            }
            Ok(DatasetSpec {
                source: DataSource::SyntheticShapes { n },
                resolution,
                num_classes: classes,
                seed,
            })
        } else {
            Ok(DatasetSpec {
                source: DataSource::Directory(PathBuf::from(s)),
                resolution,
                num_classes: 0, // filled in by scan when subdirectories exist
                seed,
            })
        }
    }
}

#[derive(Debug, Clone)]
enum Entry {
    File { path: PathBuf, label: usize },
    Synth { index: usize, class: usize },
}

/// A scanned dataset: a stable, index-addressable list of samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    entries: Vec<Entry>,
    pub class_names: Vec<String>,
    /// Files that failed to decode during the scan.
    pub skipped: usize,
}

/// A batch of images in [-1, 1] plus labels when the dataset is labeled.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: FeatureMap,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: FeatureMap, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = pixels
            .as_array()
            .iter()
            .find(|v| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::data(format!("pixel {bad} outside [-1, 1]")));
        }
        if let Some(ls) = &labels {
            if ls.len() != pixels.batch() {
                return Err(Error::data("label count does not match batch size"));
            }
        }
        Ok(Self { pixels, labels })
    }
}

/// Scan a source into a stable dataset handle. Directory sources decode every
/// file once to weed out corrupt entries (skips are counted and logged).
pub fn scan_and_decode(spec: &DatasetSpec) -> Result<Dataset> {
    match &spec.source {
        DataSource::SyntheticShapes { n } => synthetic_shapes(
            *n,
            spec.num_classes.max(1),
            spec.resolution,
            spec.seed,
        ),
        DataSource::Directory(dir) => {
            if !dir.is_dir() {
                return Err(Error::data(format!("{} is not a directory", dir.display())));
            }
            let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            subdirs.sort();
            let mut entries = Vec::new();
            let mut skipped = 0usize;
            let mut class_names = Vec::new();
            if subdirs.is_empty() {
                for path in sorted_files(dir)? {
                    match try_decode(&path) {
                        Ok(()) => entries.push(Entry::File { path, label: 0 }),
                        Err(_) => skipped += 1,
                    }
                }
            } else {
                for (label, sub) in subdirs.iter().enumerate() {
                    class_names.push(
                        sub.file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    );
                    for path in sorted_files(sub)? {
                        match try_decode(&path) {
                            Ok(()) => entries.push(Entry::File { path, label }),
                            Err(_) => skipped += 1,
                        }
                    }
                }
            }
            if skipped > 0 {
                log::warn!("dataset scan: skipped {skipped} undecodable files");
            }
            if entries.is_empty() {
                return Err(Error::data(format!(
                    "no decodable images under {}",
                    dir.display()
                )));
            }
            let num_classes = if subdirs.is_empty() { 0 } else { subdirs.len() };
            if spec.num_classes > 0 && spec.num_classes != num_classes {
                return Err(Error::data(format!(
                    "spec expects {} classes but directory has {num_classes}",
                    spec.num_classes
                )));
            }
            let mut spec = spec.clone();
            spec.num_classes = num_classes;
            Ok(Dataset {
                spec,
                entries,
                class_names,
                skipped,
            })
        }
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn try_decode(path: &Path) -> Result<()> {
    image::open(path)
        .map(|_| ())
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Procedurally rendered anti-aliased colored shapes; class = shape type,
/// classes are balanced (label = index mod classes) and every sample is a
/// pure function of (seed, index).
pub fn synthetic_shapes(
    n: usize,
    num_classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::data(format!(
            "synthetic shapes: need n >= num_classes >= 1, got n={n} classes={num_classes}"
        )));
    }
    let entries = (0..n)
        .map(|index| Entry::Synth {
            index,
            class: index % num_classes,
        })
        .collect();
    Ok(Dataset {
        spec: DatasetSpec {
            source: DataSource::SyntheticShapes { n },
            resolution,
            num_classes,
            seed,
        },
        entries,
        class_names: (0..num_classes).map(|c| format!("shape{c}")).collect(),
        skipped: 0,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labeled(&self) -> bool {
        self.spec.num_classes > 0
    }

    pub fn label_of(&self, index: usize) -> usize {
        match &self.entries[index] {
            Entry::File { label, .. } => *label,
            Entry::Synth { class, .. } => *class,
        }
    }

    /// Decode/render one sample to (3, res, res) in [-1, 1].
    pub fn sample(&self, index: usize) -> Result<Array3<f64>> {
        match &self.entries[index] {
            Entry::File { path, .. } => {
                let img = image::open(path)
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
                preprocess(&img, self.spec.resolution)
            }
            Entry::Synth { index, class } => Ok(render_shape(
                self.spec.seed,
                *index,
                *class,
                self.spec.num_classes,
                self.spec.resolution,
            )),
        }
    }

    /// Assemble a batch from explicit indices.
    pub fn gather(&self, indices: &[usize]) -> Result<ImageBatch> {
        let res = self.spec.resolution;
        let mut pixels = Array4::zeros((indices.len(), 3, res, res));
        for (row, &i) in indices.iter().enumerate() {
            let img = self.sample(i)?;
            pixels
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&img);
        }
        let labels = if self.labeled() {
            Some(indices.iter().map(|&i| self.label_of(i)).collect())
        } else {
            None
        };
        ImageBatch::new(FeatureMap::new(pixels)?, labels)
    }
}

/// Center-crop to a square, bilinear-resize to `resolution`, map to [-1, 1].
pub fn preprocess(img: &image::DynamicImage, resolution: usize) -> Result<Array3<f64>> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::data("zero-area image"));
    }
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let mut arr = Array3::zeros((3, side as usize, side as usize));
    for y in 0..side {
        for x in 0..side {
            let p = rgb.get_pixel(x0 + x, y0 + y);
            for c in 0..3 {
                arr[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    let resized = bilinear_resize(&arr.view(), resolution, resolution);
    Ok(resized.mapv(|v| 2.0 * v - 1.0))
}

/// Bilinear resampling with the pixel-center convention
/// (src = (dst + 0.5) * in/out - 0.5, edges clamped).
pub fn bilinear_resize(src: &ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let a = src[[ch, y0, x0]];
                let b = src[[ch, y0, x1]];
                let d = src[[ch, y1, x0]];
                let e = src[[ch, y1, x1]];
                out[[ch, oy, ox]] =
                    a * (1.0 - wy) * (1.0 - wx) + b * (1.0 - wy) * wx + d * wy * (1.0 - wx)
                        + e * wy * wx;
            }
        }
    }
    out
}

// ---- synthetic renderer ------------------------------------------------------

/// Signed "inside" test for the four shape archetypes, in unit coordinates.
fn inside(kind: usize, x: f64, y: f64, size: f64) -> bool {
    match kind % 4 {
        0 => x * x + y * y <= size * size,
        1 => x.abs() <= size && y.abs() <= size,
        2 => {
            // Upward triangle.
            let yy = y + size * 0.5;
            yy >= 0.0 - size && yy <= size * 1.5 && x.abs() <= (size * 1.5 - yy) * 0.577
        }
        _ => (x.abs() <= size * 0.35 && y.abs() <= size) || (y.abs() <= size * 0.35 && x.abs() <= size),
    }
}

/// Render one anti-aliased shape sample (3, res, res) in [-1, 1].
/// Deterministic in (seed, index); the class fixes shape kind and base hue.
pub fn render_shape(
    seed: u64,
    index: usize,
    class: usize,
    num_classes: usize,
    res: usize,
) -> Array3<f64> {
    let mut rng = SeedRng::new(seed).derive(0xda7a + index as u64);
    let kind = class % 4;
    // Class-anchored hue with small per-sample jitter.
    let hue = class as f64 / num_classes.max(1) as f64 + 0.05 * (rng.uniform() - 0.5);
    let (r, g, b) = hue_to_rgb(hue.rem_euclid(1.0));
    let bg = 0.12 + 0.05 * rng.uniform();
    let cx = 0.25 * (rng.uniform() - 0.5);
    let cy = 0.25 * (rng.uniform() - 0.5);
    let size = 0.28 + 0.14 * rng.uniform();
    let fg = [r, g, b];

    let mut out = Array3::zeros((3, res, res));
    let ss = 4usize; // supersampling factor per axis
    for py in 0..res {
        for px in 0..res {
            let mut cover = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = ((px * ss + sx) as f64 + 0.5) / (res * ss) as f64 * 2.0 - 1.0 - cx;
                    let y = ((py * ss + sy) as f64 + 0.5) / (res * ss) as f64 * 2.0 - 1.0 - cy;
                    if inside(kind, x, y, size) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (ss * ss) as f64;
            for c in 0..3 {
                let v = bg * (1.0 - cover) + fg[c] * cover;
                out[[c, py, px]] = 2.0 * v - 1.0;
            }
        }
    }
    out
}

fn hue_to_rgb(h: f64) -> (f64, f64, f64) {
    let k = |n: f64| (n + h * 6.0).rem_euclid(6.0);
    let f = |n: f64| {
        let k = k(n);
        0.95 - 0.85 * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    (f(5.0), f(3.0), f(1.0))
}

/// Tile a batch of [-1, 1] images into a PNG grid (row-major, `cols` wide).
pub fn save_image_grid(path: &Path, images: &FeatureMap, cols: usize) -> Result<()> {
    let (n, c, h, w) = images.dims();
    if c != 3 || cols == 0 {
        return Err(Error::data("image grid needs RGB images and cols >= 1"));
    }
    let rows = n.div_ceil(cols);
    let mut canvas = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    let arr = images.as_array();
    for i in 0..n {
        let (row, col) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(arr[[i, 0, y, x]]),
                    to_u8(arr[[i, 1, y, x]]),
                    to_u8(arr[[i, 2, y, x]]),
                ];
                canvas.put_pixel((col * w + x) as u32, (row * h + y) as u32, image::Rgb(px));
            }
        }
    }
    canvas
        .save(path)
        .map_err(|e| Error::data(format!("saving {}: {e}", path.display())))
}

fn to_u8(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

// ---- batching ------------------------------------------------------------------

/// Epoch-shuffled, drop-last batch stream. Position is (epoch, cursor), both
/// checkpointable: the permutation is a pure function of (seed, epoch).
#[derive(Debug, Clone)]
pub struct BatchIterator {
    dataset: Dataset,
    batch_size: usize,
    base_seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchIterator {
    pub fn new(dataset: Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::data(format!(
                "batch size {batch_size} invalid for corpus of {}",
                dataset.len()
            )));
        }
        let mut it = Self {
            dataset,
            batch_size,
            base_seed: seed,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        let mut perm: Vec<usize> = (0..self.dataset.len()).collect();
        SeedRng::new(self.base_seed)
            .derive(0xe70c + self.epoch)
            .shuffle(&mut perm);
        self.perm = perm;
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn state(&self) -> (u64, u64) {
        (self.epoch, self.cursor as u64)
    }

    pub fn restore(&mut self, epoch: u64, cursor: u64) {
        self.epoch = epoch;
        self.cursor = cursor as usize;
        self.reshuffle();
    }

    /// Next batch; rolls into a freshly shuffled epoch when the remainder of
    /// the current one cannot fill a batch (drop-last).
    pub fn next_batch(&mut self) -> Result<ImageBatch> {
        if self.cursor + self.batch_size > self.perm.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let idx: Vec<usize> = self.perm[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        self.dataset.gather(&idx)
    }
}
