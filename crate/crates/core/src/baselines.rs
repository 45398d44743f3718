//! Fixed, non-learned undersampling families used for comparison.
//!
//! All masks are produced in the DC-centered layout. Line-based families
//! select whole columns (phase-encoding lines).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::SamplingMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineFamily {
    Gaussian,
    Poisson,
    /// Phase-encoding lines: dense center band plus random outer lines.
    Line1d,
    /// One contiguous band of central lines.
    CenterBlock,
    /// Evenly spaced lattice over the whole of k-space.
    UniformGrid,
}

impl BaselineFamily {
    pub const ALL: [BaselineFamily; 5] = [
        BaselineFamily::Line1d,
        BaselineFamily::CenterBlock,
        BaselineFamily::UniformGrid,
        BaselineFamily::Gaussian,
        BaselineFamily::Poisson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineFamily::Gaussian => "gaussian",
            BaselineFamily::Poisson => "poisson",
            BaselineFamily::Line1d => "line1d",
            BaselineFamily::CenterBlock => "center_block",
            BaselineFamily::UniformGrid => "uniform_grid",
        }
    }
}

impl fmt::Display for BaselineFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::param(format!("unknown baseline family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSpec {
    pub family: BaselineFamily,
    pub rows: usize,
    pub cols: usize,
    pub target_rate: f64,
    /// Gaussian width in pixels; defaults to a quarter of the shorter side.
    /// `f64::INFINITY` gives a flat density.
    pub sigma: Option<f64>,
    /// Poisson-disc minimum distance; derived from the rate when unset.
    pub min_distance: Option<f64>,
    /// Share of the sample budget spent on the fully sampled center
    /// (Poisson: central square, line1d: central band).
    pub center_fraction: Option<f64>,
    pub seed: u64,
}

impl BaselineSpec {
    pub const DEFAULT_POISSON_CENTER: f64 = 0.5;
    pub const DEFAULT_LINE_CENTER: f64 = 0.5;

    pub fn new(family: BaselineFamily, rows: usize, cols: usize, target_rate: f64, seed: u64) -> Self {
        Self {
            family,
            rows,
            cols,
            target_rate,
            sigma: None,
            min_distance: None,
            center_fraction: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::EmptyGrid(self.rows, self.cols));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::param(format!(
                "target rate must be in (0, 1], got {}",
                self.target_rate
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::param("sigma must be positive"));
            }
        }
        if let Some(d) = self.min_distance {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::param("min distance must be positive"));
            }
        }
        if let Some(c) = self.center_fraction {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::param("center fraction must be in [0, 1]"));
            }
        }
        Ok(())
    }

    fn target_count(&self) -> usize {
        ((self.target_rate * (self.rows * self.cols) as f64).round() as usize).max(1)
    }

    fn center(&self) -> (usize, usize) {
        (self.rows / 2, self.cols / 2)
    }
}

pub fn generate(spec: &BaselineSpec) -> Result<SamplingMask> {
    match spec.family {
        BaselineFamily::Gaussian => gaussian_mask(spec),
        BaselineFamily::Poisson => poisson_mask(spec),
        BaselineFamily::Line1d => line1d_mask(spec),
        BaselineFamily::CenterBlock => center_block_mask(spec),
        BaselineFamily::UniformGrid => uniform_grid_mask(spec),
    }
}

/// Acquisition density of the Gaussian family before rate scaling.
pub fn gaussian_density(spec: &BaselineSpec) -> Array2<f64> {
    let sigma = spec.sigma.unwrap_or(spec.rows.min(spec.cols) as f64 / 4.0);
    let (ci, cj) = spec.center();
    Array2::from_shape_fn((spec.rows, spec.cols), |(i, j)| {
        if sigma.is_infinite() {
            return 1.0;
        }
        let di = i as f64 - ci as f64;
        let dj = j as f64 - cj as f64;
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    })
}

/// Scales a density so that `mean(min(1, s·g)) = rate`.
fn scale_density(g: &Array2<f64>, rate: f64) -> Result<Array2<f64>> {
    let mean = |s: f64| g.iter().map(|&v| (s * v).min(1.0)).sum::<f64>() / g.len() as f64;
    let mut hi = 1.0;
    let mut doublings = 0;
    while mean(hi) < rate {
        hi *= 2.0;
        doublings += 1;
        if doublings > 2000 || !hi.is_finite() {
            return Err(Error::Infeasible(format!(
                "density support too small for rate {rate}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(g.mapv(|v| (hi * v).min(1.0)))
}

/// Adds or removes points so the mask holds exactly `target` ones. Points are
/// added preferentially where `p` is high and removed where it is low.
fn fix_count(bits: &mut Array2<u8>, p: &Array2<f64>, target: usize, rng: &mut ChaCha8Rng) {
    let count: usize = bits.iter().map(|&b| b as usize).sum();
    if count == target {
        return;
    }
    let adding = count < target;
    let mut keyed: Vec<(f64, usize, usize)> = bits
        .indexed_iter()
        .filter(|&(_, &b)| (b == 0) == adding)
        .map(|((i, j), _)| {
            let w = if adding { p[[i, j]] } else { 1.0 - p[[i, j]] };
            let u = 1.0 - rng.gen::<f64>();
            (u.ln() / w.max(1e-12), i, j)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let k = count.abs_diff(target);
    for &(_, i, j) in keyed.iter().take(k) {
        bits[[i, j]] = u8::from(adding);
    }
}

/// Bernoulli draw from a DC-centered isotropic Gaussian density, then an exact
/// count correction to `round(rate·mn)`.
pub fn gaussian_mask(spec: &BaselineSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let p = scale_density(&gaussian_density(spec), spec.target_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bits = p.mapv(|prob| u8::from(rng.gen::<f64>() < prob));
    fix_count(&mut bits, &p, spec.target_count(), &mut rng);
    Ok(SamplingMask::from_bits(bits))
}

fn clear_of(occupied: &Array2<bool>, i: usize, j: usize, d: f64) -> bool {
    if d <= 1.0 {
        return !occupied[[i, j]];
    }
    let (m, n) = occupied.dim();
    let w = d.ceil() as isize;
    let dsq = d * d;
    for di in -w..=w {
        let ii = i as isize + di;
        if ii < 0 || ii >= m as isize {
            continue;
        }
        for dj in -w..=w {
            let jj = j as isize + dj;
            if jj < 0 || jj >= n as isize {
                continue;
            }
            if occupied[[ii as usize, jj as usize]] && ((di * di + dj * dj) as f64) < dsq {
                return false;
            }
        }
    }
    true
}

/// One exhaustive dart-throwing pass over `candidates` (already shuffled).
/// Returns the accepted points, or `None` if fewer than `quota` fit.
fn dart_throw(
    occupied: &mut Array2<bool>,
    candidates: &[(usize, usize)],
    quota: usize,
    d: f64,
) -> Option<Vec<(usize, usize)>> {
    let mut placed = Vec::with_capacity(quota);
    for &(i, j) in candidates {
        if placed.len() == quota {
            break;
        }
        if clear_of(occupied, i, j, d) {
            occupied[[i, j]] = true;
            placed.push((i, j));
        }
    }
    if placed.len() == quota {
        Some(placed)
    } else {
        for &(i, j) in &placed {
            occupied[[i, j]] = false;
        }
        None
    }
}

/// Poisson-disc mask: optional fully sampled central square, then dart
/// throwing over the rest with a minimum distance derived from the rate
/// (largest spacing, shrunk by 5% per failure, that still fits the quota).
pub fn poisson_mask(spec: &BaselineSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let (m, n) = (spec.rows, spec.cols);
    let total = spec.target_count();
    let cf = spec.center_fraction.unwrap_or(BaselineSpec::DEFAULT_POISSON_CENTER);
    let side = ((cf * total as f64).sqrt().floor() as usize).min(m).min(n);
    let (ci, cj) = spec.center();

    let mut occupied = Array2::<bool>::from_elem((m, n), false);
    let r0 = ci.saturating_sub(side / 2).min(m - side);
    let c0 = cj.saturating_sub(side / 2).min(n - side);
    for i in r0..r0 + side {
        for j in c0..c0 + side {
            occupied[[i, j]] = true;
        }
    }
    let quota = total - side * side;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut candidates: Vec<(usize, usize)> = occupied
        .indexed_iter()
        .filter(|&(_, &o)| !o)
        .map(|(ij, _)| ij)
        .collect();
    if quota > candidates.len() {
        return Err(Error::Infeasible("not enough free points for the rate".into()));
    }
    candidates.shuffle(&mut rng);

    if quota > 0 {
        match spec.min_distance {
            Some(d) => {
                dart_throw(&mut occupied, &candidates, quota, d).ok_or_else(|| {
                    Error::Infeasible(format!("min distance {d} cannot fit {quota} points"))
                })?;
            }
            None => {
                let free = candidates.len() as f64;
                let mut d = (free / quota as f64).sqrt();
                loop {
                    if dart_throw(&mut occupied, &candidates, quota, d).is_some() {
                        break;
                    }
                    if d <= 1.0 {
                        return Err(Error::Infeasible("dart throwing could not fill the quota".into()));
                    }
                    d = (d * 0.95).max(1.0);
                }
            }
        }
    }
    Ok(SamplingMask::from_bits(occupied.mapv(u8::from)))
}

fn columns_mask(rows: usize, cols: usize, selected: &[usize]) -> SamplingMask {
    let mut bits = Array2::<u8>::zeros((rows, cols));
    for &j in selected {
        bits.column_mut(j).fill(1);
    }
    SamplingMask::from_bits(bits)
}

fn line_count(spec: &BaselineSpec) -> usize {
    ((spec.target_rate * spec.cols as f64).round() as usize).clamp(1, spec.cols)
}

/// First column of a centered band of `width` columns.
fn band_start(center: usize, width: usize, total: usize) -> usize {
    center.saturating_sub(width / 2).min(total - width)
}

/// Full columns: a contiguous center band plus uniformly random outer lines.
pub fn line1d_mask(spec: &BaselineSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let lines = line_count(spec);
    let cf = spec.center_fraction.unwrap_or(BaselineSpec::DEFAULT_LINE_CENTER);
    let band = ((cf * lines as f64).round() as usize).min(lines);
    let start = band_start(spec.cols / 2, band, spec.cols);
    let mut selected: Vec<usize> = (start..start + band).collect();
    let mut outer: Vec<usize> = (0..spec.cols).filter(|j| !(start..start + band).contains(j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    outer.shuffle(&mut rng);
    selected.extend(outer.into_iter().take(lines - band));
    Ok(columns_mask(spec.rows, spec.cols, &selected))
}

/// A single contiguous band of lines centered on DC.
pub fn center_block_mask(spec: &BaselineSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let lines = line_count(spec);
    let start = band_start(spec.cols / 2, lines, spec.cols);
    let selected: Vec<usize> = (start..start + lines).collect();
    Ok(columns_mask(spec.rows, spec.cols, &selected))
}

/// Evenly spaced indices along one axis, starting at `center`, wrapping.
fn lattice_axis(len: usize, count: usize, center: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).map(|k| (center + k * len / count) % len).collect();
    idx.sort_unstable();
    idx
}

/// Chooses lattice counts `(rows, cols)` whose product is within one line of
/// the target count, preferring equal strides along both axes.
fn lattice_counts(m: usize, n: usize, target: f64) -> (usize, usize) {
    let slack = m.max(n) as f64;
    let mut best: Option<((f64, f64), (usize, usize))> = None;
    for kc in 1..=n {
        let kr = ((target / kc as f64).round() as usize).clamp(1, m);
        let miss = (kr as f64 * kc as f64 - target).abs();
        let imbalance = ((m as f64 / kr as f64) / (n as f64 / kc as f64)).ln().abs();
        let key = if miss <= slack { (imbalance, miss) } else { (f64::INFINITY, miss) };
        if best.is_none_or(|(b, _)| key < b) {
            best = Some((key, (kr, kc)));
        }
    }
    best.expect("at least one column count").1
}

/// Evenly spaced lattice of sampled points, including DC.
pub fn uniform_grid_mask(spec: &BaselineSpec) -> Result<SamplingMask> {
    spec.validate()?;
    let (m, n) = (spec.rows, spec.cols);
    let (kr, kc) = lattice_counts(m, n, spec.target_rate * (m * n) as f64);
    let (ci, cj) = spec.center();
    let rows = lattice_axis(m, kr, ci);
    let cols = lattice_axis(n, kc, cj);
    let mut bits = Array2::<u8>::zeros((m, n));
    for &i in &rows {
        for &j in &cols {
            bits[[i, j]] = 1;
        }
    }
    Ok(SamplingMask::from_bits(bits))
}
