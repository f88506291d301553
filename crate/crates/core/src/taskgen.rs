//! Procedural multi-domain segmentation tasks.
//!
//! A tile is a textured background with rectangles, discs and bands painted on
//! top. The mask is the exact rasterization of those shapes, so labels carry no
//! noise. Domains differ in palette, texture frequency, viewpoint shear,
//! effective resolution and object density.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::augment::substream;
use crate::container::{Container, EntryData};
use crate::continual::UnlabeledSet;
use crate::error::{config_err, Error, Result};
use crate::eval::{Confusion, SegMetrics};
use crate::kvtext;
use crate::numerics::Tensor;

/// Background plus three object classes.
pub const NUM_CLASSES: usize = 4;
pub const MIN_TILE_SIZE: usize = 16;
pub const DEFAULT_TILE_SIZE: usize = 32;

const TILE_TAG: u64 = 0x7469_6c65;
const FRACTION_TAG: u64 = 0x6672_6163;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Viewpoint {
    Nadir,
    /// Each row is shifted left by `row / 2` pixels, wrapping around.
    Oblique,
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Viewpoint::Nadir => "nadir",
            Viewpoint::Oblique => "oblique",
        })
    }
}

impl FromStr for Viewpoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nadir" => Ok(Viewpoint::Nadir),
            "oblique" => Ok(Viewpoint::Oblique),
            other => config_err(format!("unknown viewpoint `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Background texture cycles per tile width.
    pub texture_freq: f64,
    pub viewpoint: Viewpoint,
    /// Fraction of full resolution retained; `0.5` averages 2×2 blocks.
    pub resolution_scale: f64,
    /// RGB colour of object classes 1, 2 and 3.
    pub palette: [[f64; 3]; 3],
    /// Expected objects per tile.
    pub object_density: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(|c: char| c == ',' || c.is_whitespace()) {
            return config_err(format!(
                "domain name `{}` must be non-empty without commas or spaces",
                self.name
            ));
        }
        if !(self.texture_freq > 0.0) || !self.texture_freq.is_finite() {
            return config_err(format!("texture_freq must be > 0, got {}", self.texture_freq));
        }
        if !(self.resolution_scale > 0.0 && self.resolution_scale <= 1.0) {
            return config_err(format!(
                "resolution_scale must lie in (0,1], got {}",
                self.resolution_scale
            ));
        }
        if !(self.object_density >= 0.0) || !self.object_density.is_finite() {
            return config_err(format!("object_density must be >= 0, got {}", self.object_density));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return config_err("palette colours must lie in [0,1]");
        }
        Ok(())
    }

    /// Low-frequency, low-resolution nadir imagery with muted colours.
    pub fn satelloid(seed: u64) -> Self {
        Self {
            name: "satelloid".into(),
            texture_freq: 1.5,
            viewpoint: Viewpoint::Nadir,
            resolution_scale: 0.5,
            palette: [[0.55, 0.45, 0.35], [0.30, 0.45, 0.25], [0.62, 0.62, 0.58]],
            object_density: 2.0,
            seed,
        }
    }

    /// Oblique, saturated, busy scenes.
    pub fn droneoid(seed: u64) -> Self {
        Self {
            name: "droneoid".into(),
            texture_freq: 6.0,
            viewpoint: Viewpoint::Oblique,
            resolution_scale: 1.0,
            palette: [[0.85, 0.20, 0.15], [0.15, 0.30, 0.85], [0.90, 0.85, 0.15]],
            object_density: 3.0,
            seed: seed.wrapping_add(1),
        }
    }

    /// Sharp nadir imagery with bright roofs and dense objects.
    pub fn aerialoid(seed: u64) -> Self {
        Self {
            name: "aerialoid".into(),
            texture_freq: 3.5,
            viewpoint: Viewpoint::Nadir,
            resolution_scale: 1.0,
            palette: [[0.92, 0.92, 0.90], [0.10, 0.55, 0.15], [0.15, 0.15, 0.20]],
            object_density: 4.0,
            seed: seed.wrapping_add(2),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "satelloid" => Ok(Self::satelloid(seed)),
            "droneoid" => Ok(Self::droneoid(seed)),
            "aerialoid" => Ok(Self::aerialoid(seed)),
            other => config_err(format!("unknown domain preset `{other}`")),
        }
    }

    pub fn to_kv(&self, prefix: &str) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let k = |s: &str| format!("{prefix}{s}");
        m.insert(k("name"), self.name.clone());
        m.insert(k("texture_freq"), self.texture_freq.to_string());
        m.insert(k("viewpoint"), self.viewpoint.to_string());
        m.insert(k("resolution_scale"), self.resolution_scale.to_string());
        let flat: Vec<f64> = self.palette.iter().flatten().copied().collect();
        m.insert(k("palette"), kvtext::join_list(&flat));
        m.insert(k("object_density"), self.object_density.to_string());
        m.insert(k("seed"), self.seed.to_string());
        m
    }

    pub fn from_kv(map: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let flat: Vec<f64> = kvtext::parse_list(kvtext::get(map, &k("palette"))?)?;
        if flat.len() != 9 {
            return Err(Error::Format(format!("palette needs 9 values, got {}", flat.len())));
        }
        let mut palette = [[0.0; 3]; 3];
        for (i, v) in flat.into_iter().enumerate() {
            palette[i / 3][i % 3] = v;
        }
        let spec = Self {
            name: kvtext::get(map, &k("name"))?.to_string(),
            texture_freq: kvtext::get_parsed(map, &k("texture_freq"))?,
            viewpoint: kvtext::get(map, &k("viewpoint"))?.parse()?,
            resolution_scale: kvtext::get_parsed(map, &k("resolution_scale"))?,
            palette,
            object_density: kvtext::get_parsed(map, &k("object_density"))?,
            seed: kvtext::get_parsed(map, &k("seed"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-pixel class ids of one tile, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {} labels for {height}x{width}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("class id {bad} outside 0..{num_classes}")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTile {
    /// `3×H×W` in `[0,1]`
    pub image: Tensor,
    pub mask: Mask,
}

/// Held-out tiles whose labels are reachable only through [`TestSplit::evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct TestSplit {
    tiles: Vec<LabeledTile>,
}

impl TestSplit {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Runs `predict` on the stacked `N×3×H×W` test images and scores its
    /// `N·H·W` row-major labels against the hidden masks.
    pub fn evaluate(
        &self,
        num_classes: usize,
        mut predict: impl FnMut(&Tensor) -> Result<Vec<u8>>,
    ) -> Result<SegMetrics> {
        let images = stack_images(self.tiles.iter().map(|t| &t.image))?;
        let pred = predict(&images)?;
        let truth: Vec<u8> = self.tiles.iter().flat_map(|t| t.mask.labels.iter().copied()).collect();
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} test pixels",
                pred.len(),
                truth.len()
            )));
        }
        Ok(Confusion::from_labels(&pred, &truth, num_classes)?.metrics())
    }
}

/// Split sizes of one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskCounts {
    pub unlabeled: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self {
            unlabeled: 96,
            train: 64,
            val: 16,
            test: 32,
        }
    }
}

impl TaskCounts {
    fn total(&self) -> usize {
        self.unlabeled + self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub domain: DomainSpec,
    pub num_classes: usize,
    pub tile_size: usize,
    /// `3×H×W` images without labels.
    pub unlabeled: Vec<Tensor>,
    pub labeled_train: Vec<LabeledTile>,
    pub labeled_val: Vec<LabeledTile>,
    test: TestSplit,
}

impl TaskDataset {
    pub fn name(&self) -> &str {
        &self.domain.name
    }

    pub fn test(&self) -> &TestSplit {
        &self.test
    }

    /// The unlabeled pool as a training set keyed by tile index.
    pub fn unlabeled_set(&self) -> Result<UnlabeledSet> {
        UnlabeledSet::new(self.name(), stack_images(self.unlabeled.iter())?)
    }

    /// Validation images as a training-shaped set, for label-free drift checks.
    pub fn val_set(&self) -> Result<UnlabeledSet> {
        UnlabeledSet::new(
            format!("{}.val", self.name()),
            stack_images(self.labeled_val.iter().map(|t| &t.image))?,
        )
    }
}

pub(crate) fn stack_images<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = items.collect();
    if items.is_empty() {
        return Err(Error::Data("no images".into()));
    }
    Tensor::stack(&items)
}

#[allow(clippy::approx_constant)] // the phase scale is part of the frozen generator output
fn texture(spec: &DomainSpec, rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let (phase_a, phase_b) = (rng.random::<f64>() * 6.283, rng.random::<f64>() * 6.283);
    let (ca, sa) = (angle.cos(), angle.sin());
    let k = std::f64::consts::TAU * spec.texture_freq / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let u = xf * ca + yf * sa;
            let v = -xf * sa + yf * ca;
            let t = 0.5
                + 0.25 * (k * u + phase_a).sin()
                + 0.15 * (1.7 * k * v + phase_b).sin()
                + 0.1 * (rng.random::<f64>() - 0.5);
            out.push(t);
        }
    }
    out
}

/// Number of objects on one tile: `⌊density⌋` plus one more with probability
/// equal to the fractional part.
fn object_count(density: f64, rng: &mut ChaCha8Rng) -> usize {
    let base = density.floor();
    base as usize + usize::from(rng.random::<f64>() < density - base)
}

fn paint(labels: &mut [u8], size: usize, class: u8, rng: &mut ChaCha8Rng) {
    let s = size as f64;
    match class {
        1 => {
            let w = rng.random_range(size / 6..=size / 3);
            let h = rng.random_range(size / 6..=size / 3);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            for y in y0..y0 + h {
                labels[y * size + x0..y * size + x0 + w].fill(class);
            }
        }
        2 => {
            let r = s * (0.08 + 0.1 * rng.random::<f64>());
            let cx = rng.random::<f64>() * s;
            let cy = rng.random::<f64>() * s;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
        _ => {
            let width = rng.random_range(2..=(size / 8).max(2));
            let start = rng.random_range(0..=size - width);
            let vertical = rng.random::<bool>();
            for y in 0..size {
                for x in 0..size {
                    let along = if vertical { x } else { y };
                    if (start..start + width).contains(&along) {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
    }
}

fn shear_rows<T: Copy>(data: &mut [T], size: usize) {
    for y in 0..size {
        data[y * size..(y + 1) * size].rotate_left((y / 2) % size);
    }
}

fn block_average(channel: &mut [f64], size: usize, block: usize) {
    for by in (0..size).step_by(block) {
        for bx in (0..size).step_by(block) {
            let ys = by..(by + block).min(size);
            let xs = bx..(bx + block).min(size);
            let n = (ys.len() * xs.len()) as f64;
            let mean = ys
                .clone()
                .flat_map(|y| xs.clone().map(move |x| (y, x)))
                .map(|(y, x)| channel[y * size + x])
                .sum::<f64>()
                / n;
            for y in ys {
                channel[y * size + xs.start..y * size + xs.end].fill(mean);
            }
        }
    }
}

/// The object classes painted on a tile, in painting order.
pub fn tile_object_classes(spec: &DomainSpec, tile_index: u64) -> Vec<u8> {
    let mut rng = substream(spec.seed, TILE_TAG, 1, tile_index);
    draw_classes(spec, &mut rng)
}

fn draw_classes(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = object_count(spec.object_density, rng);
    let start = rng.random_range(0..3u8);
    (0..n).map(|i| 1 + ((start as usize + i) % 3) as u8).collect()
}

/// Renders tile `tile_index` of a domain.
pub fn render_tile(spec: &DomainSpec, tile_index: u64, size: usize) -> Result<LabeledTile> {
    spec.validate()?;
    if size < MIN_TILE_SIZE {
        return config_err(format!("tile size {size} < {MIN_TILE_SIZE}"));
    }
    let classes = tile_object_classes(spec, tile_index);
    let mut rng = substream(spec.seed, TILE_TAG, 0, tile_index);
    let tex = texture(spec, &mut rng, size);
    let mut labels = vec![0u8; size * size];
    for &c in &classes {
        paint(&mut labels, size, c, &mut rng);
    }
    let tint: [f64; 3] = std::array::from_fn(|ch| 0.5 + 0.5 * spec.palette.iter().map(|p| p[ch]).sum::<f64>() / 3.0);
    let mut tex_sheared = tex;
    if spec.viewpoint == Viewpoint::Oblique {
        shear_rows(&mut labels, size);
        shear_rows(&mut tex_sheared, size);
    }
    let block = (1.0 / spec.resolution_scale).round().max(1.0) as usize;
    let mut data = Vec::with_capacity(3 * size * size);
    for (ch, &shade) in tint.iter().enumerate() {
        let mut plane: Vec<f64> = labels
            .iter()
            .zip(&tex_sheared)
            .map(|(&l, &t)| {
                let v = if l == 0 {
                    (0.25 + 0.5 * t) * shade
                } else {
                    spec.palette[l as usize - 1][ch] * (0.85 + 0.3 * t)
                };
                v.clamp(0.0, 1.0)
            })
            .collect();
        if block > 1 {
            block_average(&mut plane, size, block);
        }
        data.extend(plane);
    }
    Ok(LabeledTile {
        image: Tensor::new(vec![3, size, size], data)?,
        mask: Mask::new(size, size, labels, NUM_CLASSES)?,
    })
}

/// Generates all splits of one task. Tile `i` of the population is
/// unlabeled for `i < counts.unlabeled`, then train, val and test follow.
pub fn generate_task(spec: &DomainSpec, counts: TaskCounts, tile_size: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if counts.unlabeled == 0 || counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return config_err(format!("all split counts must be positive, got {counts:?}"));
    }
    let tiles = (0..counts.total() as u64)
        .map(|i| render_tile(spec, i, tile_size))
        .collect::<Result<Vec<_>>>()?;
    let mut it = tiles.into_iter();
    let unlabeled = it.by_ref().take(counts.unlabeled).map(|t| t.image).collect();
    let labeled_train = it.by_ref().take(counts.train).collect();
    let labeled_val = it.by_ref().take(counts.val).collect();
    let test = TestSplit { tiles: it.collect() };
    Ok(TaskDataset {
        domain: spec.clone(),
        num_classes: NUM_CLASSES,
        tile_size,
        unlabeled,
        labeled_train,
        labeled_val,
        test,
    })
}

/// Nested deterministic subsample of the labeled training split:
/// `⌊fraction·N⌋` tiles, taken as a prefix of one seeded permutation.
pub fn label_fraction_view(dataset: &TaskDataset, fraction: f64, seed: u64) -> Result<TaskDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config_err(format!("label fraction {fraction} outside (0,1]"));
    }
    let n = dataset.labeled_train.len();
    let keep = (fraction * n as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::Data(format!("fraction {fraction} of {n} tiles leaves none")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, FRACTION_TAG, 0, 0));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    let mut view = dataset.clone();
    view.labeled_train = chosen.into_iter().map(|i| dataset.labeled_train[i].clone()).collect();
    Ok(view)
}

/// Mean RGB, RGB standard deviation and mean absolute horizontal and vertical
/// differences of a `3×H×W` image.
fn tile_features(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data();
    let mut f = Vec::with_capacity(8);
    let plane = |c: usize| &data[c * h * w..(c + 1) * h * w];
    for c in 0..3 {
        f.push(plane(c).iter().sum::<f64>() / (h * w) as f64);
    }
    for c in 0..3 {
        let m = f[c];
        f.push((plane(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (h * w) as f64).sqrt());
    }
    let (mut gx, mut gy) = (0.0, 0.0);
    for c in 0..3 {
        let p = plane(c);
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    gx += (p[y * w + x + 1] - p[y * w + x]).abs();
                }
                if y + 1 < h {
                    gy += (p[(y + 1) * w + x] - p[y * w + x]).abs();
                }
            }
        }
    }
    f.push(gx / (3 * h * (w - 1)) as f64);
    f.push(gy / (3 * (h - 1) * w) as f64);
    f
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Energy distance between the per-tile feature distributions of the
/// unlabeled pools: `E|X−Y| − (E|X−X'| + E|Y−Y'|)/2`, clamped at zero.
pub fn domain_divergence(a: &TaskDataset, b: &TaskDataset) -> Result<f64> {
    if a.unlabeled.is_empty() || b.unlabeled.is_empty() {
        return Err(Error::Data("divergence needs non-empty tasks".into()));
    }
    let fa: Vec<Vec<f64>> = a.unlabeled.iter().map(tile_features).collect();
    let fb: Vec<Vec<f64>> = b.unlabeled.iter().map(tile_features).collect();
    // both cross orders are summed so that swapping the arguments is exact
    let cross = 0.5 * (mean_pair_distance(&fa, &fb) + mean_pair_distance(&fb, &fa));
    let within = 0.5 * (mean_pair_distance(&fa, &fa) + mean_pair_distance(&fb, &fb));
    Ok((cross - within).max(0.0))
}

const MANIFEST: &str = "manifest.txt";
const SPLITS: [&str; 4] = ["unlabeled", "train", "val", "test"];

fn split_container(images: &[&Tensor], masks: Option<Vec<&Mask>>) -> Result<Container> {
    let mut c = Container::default();
    c.push_tensor("images", stack_images(images.iter().copied())?);
    if let Some(masks) = masks {
        let (h, w) = (masks[0].height, masks[0].width);
        let values = masks
            .iter()
            .flat_map(|m| m.labels.iter().map(|&l| i32::from(l)))
            .collect();
        c.entries.push((
            "masks".into(),
            EntryData::I32 {
                shape: vec![masks.len(), h, w],
                values,
            },
        ));
    }
    c.metadata.insert("kind".into(), "tiles".into());
    Ok(c)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a dataset directory: one container per split plus a manifest with
/// the domain spec, counts and per-file sha-256 checksums.
pub fn save_dataset(dataset: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = dataset.domain.to_kv("domain.");
    manifest.insert("num_classes".into(), dataset.num_classes.to_string());
    manifest.insert("tile_size".into(), dataset.tile_size.to_string());
    let labeled = |tiles: &[LabeledTile]| {
        split_container(
            &tiles.iter().map(|t| &t.image).collect::<Vec<_>>(),
            Some(tiles.iter().map(|t| &t.mask).collect()),
        )
    };
    let containers = [
        split_container(&dataset.unlabeled.iter().collect::<Vec<_>>(), None)?,
        labeled(&dataset.labeled_train)?,
        labeled(&dataset.labeled_val)?,
        labeled(&dataset.test.tiles)?,
    ];
    for (split, c) in SPLITS.iter().zip(containers) {
        let bytes = c.to_bytes();
        let file = format!("{split}.bin");
        fs::write(dir.join(&file), &bytes)?;
        manifest.insert(format!("count.{split}"), c.tensor("images")?.shape()[0].to_string());
        manifest.insert(format!("file.{split}"), file);
        manifest.insert(format!("sha256.{split}"), sha256_hex(&bytes));
    }
    fs::write(dir.join(MANIFEST), kvtext::render(&manifest))?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("no dataset manifest at {}", path.display())),
        _ => Error::Io(e),
    })?;
    kvtext::parse(&text)
}

fn checked_split(dir: &Path, manifest: &BTreeMap<String, String>, split: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(kvtext::get(manifest, &format!("file.{split}"))?);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != kvtext::get(manifest, &format!("sha256.{split}"))? {
        return Err(Error::Checksum {
            path: path.display().to_string(),
        });
    }
    Ok((path, bytes))
}

/// Checks every split file against the manifest checksums.
pub fn verify_dataset(dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    for split in SPLITS {
        checked_split(dir, &manifest, split)?;
    }
    Ok(())
}

/// Loads a dataset directory after verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<TaskDataset> {
    let manifest = read_manifest(dir)?;
    let domain = DomainSpec::from_kv(&manifest, "domain.")?;
    let num_classes: usize = kvtext::get_parsed(&manifest, "num_classes")?;
    let tile_size: usize = kvtext::get_parsed(&manifest, "tile_size")?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let (path, bytes) = checked_split(dir, &manifest, split)?;
        let c = Container::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let images = c.tensor("images")?;
        let (n, ch, h, w) = images.dims4()?;
        if (ch, h, w) != (3, tile_size, tile_size)
            || n != kvtext::get_parsed::<usize>(&manifest, &format!("count.{split}"))?
        {
            return Err(Error::Format(format!(
                "{}: image block {:?} disagrees with manifest",
                path.display(),
                images.shape()
            )));
        }
        let tiles: Vec<Tensor> = (0..n)
            .map(|i| images.select_rows(&[i])?.reshape(&[3, h, w]))
            .collect::<Result<_>>()?;
        let masks = if split == "unlabeled" {
            None
        } else {
            let (shape, values) = c.i32_entry("masks")?;
            if shape != [n, h, w] {
                return Err(Error::Format(format!("{}: mask block {shape:?}", path.display())));
            }
            let masks = values
                .chunks_exact(h * w)
                .map(|chunk| {
                    let labels = chunk
                        .iter()
                        .map(|&v| {
                            u8::try_from(v).map_err(|_| Error::Data(format!("class id {v} in {}", path.display())))
                        })
                        .collect::<Result<Vec<u8>>>()?;
                    Mask::new(h, w, labels, num_classes)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(masks)
        };
        splits.push((tiles, masks));
    }
    let mut it = splits.into_iter();
    let (unlabeled, _) = it.next().expect("four splits");
    let mut labeled = it.map(|(images, masks)| {
        images
            .into_iter()
            .zip(masks.expect("labeled split"))
            .map(|(image, mask)| LabeledTile { image, mask })
            .collect::<Vec<_>>()
    });
    let labeled_train = labeled.next().expect("train");
    let labeled_val = labeled.next().expect("val");
    let test = TestSplit {
        tiles: labeled.next().expect("test"),
    };
    Ok(TaskDataset {
        domain,
        num_classes,
        tile_size,
        unlabeled,
        labeled_train,
        labeled_val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskCounts {
        TaskCounts {
            unlabeled: 6,
            train: 5,
            val: 2,
            test: 3,
        }
    }

    #[test]
    fn zero_density_is_all_background() {
        let spec = DomainSpec {
            object_density: 0.0,
            ..DomainSpec::aerialoid(3)
        };
        let ds = generate_task(&spec, small(), 16).unwrap();
        for t in ds.labeled_train.iter().chain(&ds.labeled_val) {
            assert!(t.mask.labels().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::droneoid(9);
        assert_eq!(
            generate_task(&spec, small(), 16).unwrap(),
            generate_task(&spec, small(), 16).unwrap()
        );
    }

    #[test]
    fn images_in_unit_range() {
        for spec in [
            DomainSpec::satelloid(1),
            DomainSpec::droneoid(1),
            DomainSpec::aerialoid(1),
        ] {
            let ds = generate_task(&spec, small(), 16).unwrap();
            for img in &ds.unlabeled {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = DomainSpec::aerialoid(0);
        for bad in [
            DomainSpec {
                texture_freq: 0.0,
                ..base.clone()
            },
            DomainSpec {
                resolution_scale: 1.5,
                ..base.clone()
            },
            DomainSpec {
                object_density: -1.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(generate_task(&bad, small(), 16), Err(Error::Config(_))));
        }
        assert!(generate_task(&base, small(), 8).is_err());
    }

    #[test]
    fn oblique_shear_moves_mask_with_image() {
        let spec = DomainSpec::droneoid(4);
        let nadir = DomainSpec {
            viewpoint: Viewpoint::Nadir,
            ..spec.clone()
        };
        let a = render_tile(&spec, 0, 16).unwrap();
        let mut b = render_tile(&nadir, 0, 16).unwrap().mask.labels().to_vec();
        shear_rows(&mut b, 16);
        assert_eq!(a.mask.labels(), &b[..]);
    }

    #[test]
    fn fraction_views() {
        let ds = generate_task(&DomainSpec::aerialoid(0), TaskCounts { train: 10, ..small() }, 16).unwrap();
        assert_eq!(label_fraction_view(&ds, 1.0, 3).unwrap(), ds);
        let half = label_fraction_view(&ds, 0.5, 3).unwrap();
        assert_eq!(half.labeled_train.len(), 5);
        assert_eq!(half.labeled_val, ds.labeled_val);
        assert!(label_fraction_view(&ds, 0.05, 3).is_err());
        assert!(label_fraction_view(&ds, 0.0, 3).is_err());
    }

    #[test]
    fn divergence_is_symmetric_and_zero_on_self() {
        let a = generate_task(&DomainSpec::aerialoid(0), small(), 16).unwrap();
        let b = generate_task(&DomainSpec::satelloid(0), small(), 16).unwrap();
        assert_eq!(domain_divergence(&a, &b).unwrap(), domain_divergence(&b, &a).unwrap());
        assert_eq!(domain_divergence(&a, &a).unwrap(), 0.0);
    }
}
