//! Image datasets: loading, normalization, augmentation and conversion to
//! k-space.
//!
//! Every dataset item carries its ground-truth image in `[0, 1]` and the
//! matching unshifted spectrum `forward_2d(image)`.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{grid_kind, read_real_grid, REAL_MAGIC};
use crate::fourier::forward_2d;
use crate::grid::{ComplexGrid, RealImage};

/// Pixels above this value count as foreground when centering.
pub const FOREGROUND_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub image: RealImage,
    pub kspace: ComplexGrid,
    pub provenance: String,
}

impl DataItem {
    pub fn from_image(image: RealImage, provenance: impl Into<String>) -> Self {
        let kspace = to_kspace(&image);
        Self {
            image,
            kspace,
            provenance: provenance.into(),
        }
    }
}

/// An ordered collection of same-size items.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    items: Vec<DataItem>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, items: Vec<DataItem>) -> Result<Self> {
        if let Some(first) = items.first() {
            let dim = first.image.dim();
            for item in &items {
                crate::grid::ensure_shape(dim, item.image.dim())?;
                crate::grid::ensure_shape(dim, item.kspace.dim())?;
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            items,
        })
    }

    pub fn items(&self) -> &[DataItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Image dimensions, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<(usize, usize)> {
        self.items.first().map(|it| it.image.dim())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Items `range` as a new dataset.
    pub fn subset(&self, range: std::ops::Range<usize>, split: Split) -> Result<Self> {
        if range.end > self.items.len() || range.start > range.end {
            return Err(Error::param(format!(
                "subset {range:?} out of bounds for {} items",
                self.items.len()
            )));
        }
        Ok(Self {
            name: self.name.clone(),
            split,
            items: self.items[range].to_vec(),
        })
    }

    /// Index batches for one pass. Order depends only on `shuffle_seed`;
    /// the final batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Applies centering and rotation to every item, in order.
    pub fn augmented(&self, spec: &AugmentSpec) -> Self {
        let mut items = Vec::new();
        for (k, item) in self.items.iter().enumerate() {
            let base = if spec.do_center_translation {
                center_translate(&item.image)
            } else {
                item.image.clone()
            };
            if spec.rotations_per_image == 0 {
                items.push(DataItem::from_image(base, item.provenance.clone()));
                continue;
            }
            for angle in rotation_angles(spec, k as u64) {
                let img = rotate(&base, angle);
                items.push(DataItem::from_image(
                    img,
                    format!("{} rot={angle:.3}", item.provenance),
                ));
            }
        }
        Self {
            name: self.name.clone(),
            split: self.split,
            items,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub do_center_translation: bool,
    pub rotations_per_image: usize,
    pub rotation_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            do_center_translation: true,
            rotations_per_image: 8,
            rotation_seed: 0,
        }
    }
}

/// Affine map of the pixel range onto `[0, 1]`. A constant image maps to zeros.
pub fn normalize(raw: &Array2<f64>) -> Result<RealImage> {
    let img = RealImage::new(raw.clone())?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return RealImage::zeros(img.rows(), img.cols());
    }
    let span = hi - lo;
    Ok(RealImage::from_array(raw.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))))
}

/// Integer translation moving the foreground intensity centroid to
/// `(⌊m/2⌋, ⌊n/2⌋)`, with zero fill. Returns the input when no pixel exceeds
/// [`FOREGROUND_THRESHOLD`].
pub fn center_translate(image: &RealImage) -> RealImage {
    let px = image.pixels();
    let (m, n) = px.dim();
    let (mut w, mut ci, mut cj) = (0.0, 0.0, 0.0);
    for ((i, j), &v) in px.indexed_iter() {
        if v > FOREGROUND_THRESHOLD {
            w += v;
            ci += v * i as f64;
            cj += v * j as f64;
        }
    }
    if w == 0.0 {
        log::warn!("center_translate: no foreground above {FOREGROUND_THRESHOLD}, leaving image unchanged");
        return image.clone();
    }
    let di = ((m / 2) as f64 - ci / w).round_ties_even() as isize;
    let dj = ((n / 2) as f64 - cj / w).round_ties_even() as isize;
    if di == 0 && dj == 0 {
        return image.clone();
    }
    let out = Array2::from_shape_fn((m, n), |(i, j)| {
        let si = i as isize - di;
        let sj = j as isize - dj;
        if si < 0 || sj < 0 || si >= m as isize || sj >= n as isize {
            0.0
        } else {
            px[[si as usize, sj as usize]]
        }
    });
    RealImage::from_array(out)
}

fn bilinear_zero(px: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (m, n) = px.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= m as f64 || j >= n as f64 {
            0.0
        } else {
            px[[i as usize, j as usize]]
        }
    };
    let mut v = 0.0;
    for (di, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dj, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let w = wy * wx;
            if w != 0.0 {
                v += w * at(y0 + di, x0 + dj);
            }
        }
    }
    v
}

/// Bilinear rotation by `degrees` (counter-clockwise in row/column space)
/// about `((m−1)/2, (n−1)/2)`, zero background, clamped to `[0, 1]`.
pub fn rotate(image: &RealImage, degrees: f64) -> RealImage {
    let px = image.pixels();
    let (m, n) = px.dim();
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    let cy = (m as f64 - 1.0) / 2.0;
    let cx = (n as f64 - 1.0) / 2.0;
    let out = Array2::from_shape_fn((m, n), |(i, j)| {
        let y = i as f64 - cy;
        let x = j as f64 - cx;
        let sy = c * y - s * x + cy;
        let sx = s * y + c * x + cx;
        bilinear_zero(px, sy, sx).clamp(0.0, 1.0)
    });
    RealImage::from_array(out)
}

/// Uniform angles in `[0, 360)` for one image; `stream` separates images
/// that share a seed.
pub fn rotation_angles(spec: &AugmentSpec, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rotation_seed);
    rng.set_stream(stream);
    (0..spec.rotations_per_image)
        .map(|_| rng.gen_range(0.0..360.0))
        .collect()
}

pub fn rotate_random(image: &RealImage, spec: &AugmentSpec) -> Vec<RealImage> {
    rotation_angles(spec, 0)
        .into_iter()
        .map(|a| rotate(image, a))
        .collect()
}

pub fn to_kspace(image: &RealImage) -> ComplexGrid {
    let zero = Array2::zeros(image.dim());
    forward_2d(&ComplexGrid::from_planes(image.pixels().clone(), zero))
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize(image: &RealImage, rows: usize, cols: usize) -> Result<RealImage> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid(rows, cols));
    }
    let px = image.pixels();
    let (m, n) = px.dim();
    if (m, n) == (rows, cols) {
        return Ok(image.clone());
    }
    let coord = |k: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((k as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let out = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (i0, i1, fy) = coord(i, rows, m);
        let (j0, j1, fx) = coord(j, cols, n);
        let top = px[[i0, j0]] * (1.0 - fx) + px[[i0, j1]] * fx;
        let bot = px[[i1, j0]] * (1.0 - fx) + px[[i1, j1]] * fx;
        top * (1.0 - fy) + bot * fy
    });
    Ok(RealImage::from_array(out))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn new(cy: f64, cx: f64, ay: f64, ax: f64, angle: f64, value: f64) -> Self {
        let (sin, cos) = angle.sin_cos();
        Self { cy, cx, ay, ax, cos, sin, value }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }
}

fn phantom_ellipses(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let cy = rng.gen_range(-0.06..0.06);
    let cx = rng.gen_range(-0.06..0.06);
    let ay = rng.gen_range(0.78..0.9);
    let ax = rng.gen_range(0.6..0.74);
    let tilt = rng.gen_range(-0.2..0.2);
    let mut out = vec![
        Ellipse::new(cy, cx, ay, ax, tilt, 1.0),
        Ellipse::new(cy, cx, ay * 0.92, ax * 0.9, tilt, -0.7),
    ];
    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let r = 0.5 * rng.gen::<f64>().sqrt();
        let t = rng.gen_range(0.0..2.0 * PI);
        let value = rng.gen_range(0.1..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        out.push(Ellipse::new(
            cy + r * t.sin(),
            cx + r * t.cos() * 0.8,
            rng.gen_range(0.05..0.3),
            rng.gen_range(0.05..0.3),
            rng.gen_range(0.0..PI),
            value,
        ));
    }
    out
}

/// One ellipse phantom rendered with 3×3 supersampling and normalized.
pub fn make_phantom(size: usize, seed: u64, index: u64) -> Result<RealImage> {
    if size == 0 {
        return Err(Error::EmptyGrid(size, size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let shapes = phantom_ellipses(&mut rng);
    const SUB: usize = 3;
    let raw = Array2::from_shape_fn((size, size), |(i, j)| {
        let mut acc = 0.0;
        for si in 0..SUB {
            for sj in 0..SUB {
                let y = 2.0 * (i as f64 + (si as f64 + 0.5) / SUB as f64) / size as f64 - 1.0;
                let x = 2.0 * (j as f64 + (sj as f64 + 0.5) / SUB as f64) / size as f64 - 1.0;
                let v: f64 = shapes.iter().filter(|e| e.contains(y, x)).map(|e| e.value).sum();
                acc += v.max(0.0);
            }
        }
        acc / (SUB * SUB) as f64
    });
    normalize(&raw)
}

/// `count` seeded phantoms of `size`×`size` with their spectra.
pub fn make_phantom_set(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::param("phantom count must be at least 1"));
    }
    let items = (0..count as u64)
        .map(|k| {
            make_phantom(size, seed, k)
                .map(|img| DataItem::from_image(img, format!("phantom seed={seed} index={k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("phantoms", Split::Train, items)
}

/// Loads one grayscale image file or real binary grid and normalizes it.
pub fn load_image(path: impl AsRef<Path>) -> Result<RealImage> {
    let path = path.as_ref();
    if grid_kind(path)? == Some(REAL_MAGIC) {
        return normalize(read_real_grid(path)?.pixels());
    }
    let img = image::open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        f64::from(img.get_pixel(j as u32, i as u32).0[0])
    });
    normalize(&raw)
}

/// Train, validation and test datasets read from one manifest.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Reads a manifest of `split path` lines (`#` starts a comment; relative
/// paths resolve against the manifest's directory). Images are resized to
/// `size` when given, otherwise all must share one size.
pub fn load_manifest(path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<DataSplits> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<(Split, PathBuf)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, char::is_whitespace);
        let split_tag = parts.next().unwrap_or("");
        let file = parts.next().map(str::trim).unwrap_or("");
        if file.is_empty() {
            return Err(Error::format(path, format!("line {}: expected `split path`", lineno + 1)));
        }
        let split = split_tag
            .parse::<Split>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        entries.push((split, base.join(file)));
    }

    let loaded: Vec<Result<DataItem>> = entries
        .par_iter()
        .map(|(_, file)| {
            let mut img = load_image(file)?;
            if let Some((r, c)) = size {
                img = resize(&img, r, c)?;
            }
            Ok(DataItem::from_image(img, file.display().to_string()))
        })
        .collect();

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut buckets: [Vec<DataItem>; 3] = Default::default();
    for ((split, _), item) in entries.iter().zip(loaded) {
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        buckets[slot].push(item?);
    }
    let [train, val, test] = buckets;
    Ok(DataSplits {
        train: Dataset::new(name.clone(), Split::Train, train)?,
        val: Dataset::new(name.clone(), Split::Val, val)?,
        test: Dataset::new(name, Split::Test, test)?,
    })
}
