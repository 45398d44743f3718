//! The probabilistic undersampling layer.
//!
//! Probability and mask matrices handled here use the DC-centered layout: the
//! low-frequency area is the middle of the grid. Callers that apply a mask to
//! unshifted k-space go through [`crate::fourier::CenterShift::unshifted`] first.

use std::f64::consts::SQRT_2;
use std::io::Write;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{ensure_shape, ComplexGrid, ProbabilityMatrix, SamplingMask, TwoChannelGrid};

/// Configuration of the total-rate and regional-distance constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct StableConstraintConfig {
    pub target_rate: f64,
    /// Allowed deviation of the mean probability (and realized rate) from `target_rate`.
    pub epsilon: f64,
    /// Side of the square regions the grid is partitioned into.
    pub region_size: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub seed: u64,
}

impl StableConstraintConfig {
    pub const DEFAULT_EPSILON: f64 = 0.001;
    pub const DEFAULT_REGION_SIZE: usize = 10;
    pub const DEFAULT_P_MIN: f64 = 0.01;

    pub fn new(target_rate: f64, seed: u64) -> Self {
        Self {
            target_rate,
            epsilon: Self::DEFAULT_EPSILON,
            region_size: Self::DEFAULT_REGION_SIZE,
            p_min: Self::DEFAULT_P_MIN,
            p_max: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::param(format!(
                "target rate must be in (0, 1], got {}",
                self.target_rate
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        if self.region_size == 0 {
            return Err(Error::param("region size must be positive"));
        }
        if self.p_max != 1.0 {
            return Err(Error::param("p_max is fixed at 1"));
        }
        if !(self.p_min > 0.0 && self.p_min < self.p_max) {
            return Err(Error::param(format!("p_min must lie in (0, 1), got {}", self.p_min)));
        }
        Ok(())
    }

    fn validate_for(&self, dim: (usize, usize)) -> Result<()> {
        self.validate()?;
        if self.region_size > dim.0.min(dim.1) {
            return Err(Error::param(format!(
                "region size {} exceeds grid {}x{}",
                self.region_size, dim.0, dim.1
            )));
        }
        Ok(())
    }
}

/// Per-region summary of a stable mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub region_row: usize,
    pub region_col: usize,
    pub p_mean: f64,
    pub count: usize,
    /// Smallest pairwise distance between the region's points; `None` below two points.
    pub min_dist: Option<f64>,
    /// Largest nearest-neighbor distance within the region; `None` below two points.
    pub max_nn_dist: Option<f64>,
    /// Minimum distance actually enforced, after any relaxation.
    pub r0: f64,
}

pub const REGION_CSV_HEADER: &str = "region_row,region_col,p_mean,count,min_dist,max_nn_dist,r0";

pub fn write_region_csv(reports: &[RegionReport], w: &mut impl Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "{REGION_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.region_row,
            r.region_col,
            r.p_mean,
            r.count,
            opt(r.min_dist),
            opt(r.max_nn_dist),
            r.r0
        )?;
    }
    Ok(())
}

pub fn split_channels(k: &ComplexGrid) -> TwoChannelGrid {
    TwoChannelGrid::from_channels(k.re().clone(), k.im().clone())
}

pub fn merge_channels(x: &TwoChannelGrid) -> ComplexGrid {
    ComplexGrid::from_planes(x.channel(0).clone(), x.channel(1).clone())
}

/// Hadamard product of both channels with the same binary mask.
pub fn apply_mask(x_in: &TwoChannelGrid, mask: &SamplingMask) -> Result<TwoChannelGrid> {
    ensure_shape(x_in.dim(), mask.dim())?;
    let m = mask.as_f64();
    Ok(TwoChannelGrid::from_channels(
        x_in.channel(0) * &m,
        x_in.channel(1) * &m,
    ))
}

/// Independent Bernoulli draw per entry, deterministic for a given seed.
/// Entries at or below 0 never fire; entries at or above 1 always do.
pub fn sample_bernoulli(p: &ProbabilityMatrix, seed: u64) -> SamplingMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SamplingMask::from_bits(p.probs().mapv(|prob| u8::from(rng.gen::<f64>() < prob)))
}

const PROJECTION_ITERS: usize = 50;
const PROJECTION_TOL: f64 = 1e-12;

fn clamped_mean(base: &Array2<f64>, shift: f64, lo: f64, hi: f64) -> f64 {
    base.iter().map(|&v| (v + shift).clamp(lo, hi)).sum::<f64>() / base.len() as f64
}

/// Clamps to `[p_min, p_max]` and applies a uniform additive shift (re-clamping)
/// so the mean lands on the target rate.
///
/// The shift is located by bisection on the monotone map
/// `s ↦ mean(clamp(P + s))`; the relative order of entries is preserved.
pub fn project_probabilities(
    p: &ProbabilityMatrix,
    cfg: &StableConstraintConfig,
) -> Result<ProbabilityMatrix> {
    cfg.validate()?;
    let (lo, hi, rate) = (cfg.p_min, cfg.p_max, cfg.target_rate);
    if rate < lo || rate > hi {
        return Err(Error::Infeasible(format!(
            "target rate {rate} outside [{lo}, {hi}]"
        )));
    }
    let base = p.probs().mapv(|v| v.clamp(lo, hi));
    if (clamped_mean(&base, 0.0, lo, hi) - rate).abs() <= PROJECTION_TOL {
        return Ok(ProbabilityMatrix::from_array(base));
    }
    let max = base.iter().cloned().fold(f64::MIN, f64::max);
    let min = base.iter().cloned().fold(f64::MAX, f64::min);
    let (mut s_lo, mut s_hi) = (lo - max, hi - min);
    for _ in 0..PROJECTION_ITERS {
        let mid = 0.5 * (s_lo + s_hi);
        if clamped_mean(&base, mid, lo, hi) < rate {
            s_lo = mid;
        } else {
            s_hi = mid;
        }
    }
    // Pick whichever bracket end is closer to the target.
    let (m_lo, m_hi) = (
        clamped_mean(&base, s_lo, lo, hi),
        clamped_mean(&base, s_hi, lo, hi),
    );
    let shift = if (m_lo - rate).abs() <= (m_hi - rate).abs() {
        s_lo
    } else {
        s_hi
    };
    let out = base.mapv(|v| (v + shift).clamp(lo, hi));
    let err = (out.sum() / out.len() as f64 - rate).abs();
    if err >= cfg.epsilon {
        return Err(Error::Infeasible(format!(
            "projection left mean {err} away from rate {rate}"
        )));
    }
    Ok(ProbabilityMatrix::from_array(out))
}

const POLY_A: f64 = SQRT_2 / 10.0;
const POLY_B: f64 = -SQRT_2 / 2.0;

/// Minimum distance at the vertex of the mean-probability polynomial.
pub const R0_MAX: f64 = 2.5;

/// Mean regional probability as a function of the minimum sampling distance:
/// `p̄ = (√2/10)·r₀² − (√2/2)·r₀ + 1`.
pub fn probability_from_r0(r0: f64) -> f64 {
    POLY_A * r0 * r0 + POLY_B * r0 + 1.0
}

/// Inverts [`probability_from_r0`] on its decreasing branch `r₀ ∈ [0, 2.5]`.
/// Below the vertex value (≈0.1161) no real root exists and `r₀ = 2.5` is returned.
pub fn r0_from_probability(p_mean: f64) -> Result<f64> {
    if !(p_mean > 0.0 && p_mean <= 1.0) {
        return Err(Error::param(format!(
            "mean probability must be in (0, 1], got {p_mean}"
        )));
    }
    let disc = POLY_B * POLY_B - 4.0 * POLY_A * (1.0 - p_mean);
    if disc <= 0.0 {
        return Ok(R0_MAX);
    }
    let r0 = (-POLY_B - disc.sqrt()) / (2.0 * POLY_A);
    Ok(r0.clamp(0.0, R0_MAX))
}

const RETRIES_PER_RADIUS: usize = 4;
const RELAX_FACTOR: f64 = 0.9;
const MAX_RELAX_ROUNDS: usize = 80;
const MIN_RELAXED_R0: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
struct Region {
    row: usize,
    col: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Region {
    fn height(&self) -> usize {
        self.rows.1 - self.rows.0
    }

    fn width(&self) -> usize {
        self.cols.1 - self.cols.0
    }

    fn area(&self) -> usize {
        self.height() * self.width()
    }
}

fn partition(dim: (usize, usize), size: usize) -> Vec<Region> {
    let mut out = Vec::new();
    for (row, r0) in (0..dim.0).step_by(size).enumerate() {
        for (col, c0) in (0..dim.1).step_by(size).enumerate() {
            out.push(Region {
                row,
                col,
                rows: (r0, (r0 + size).min(dim.0)),
                cols: (c0, (c0 + size).min(dim.1)),
            });
        }
    }
    out
}

/// Largest-remainder apportionment of `total` points over regions with real
/// quotas `quotas`, never exceeding a region's area.
fn apportion(quotas: &[f64], areas: &[usize], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(areas)
        .map(|(&q, &a)| (q.max(0.0).floor() as usize).min(a))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while assigned < total {
        let before = assigned;
        for &i in &order {
            if assigned == total {
                break;
            }
            if counts[i] < areas[i] {
                counts[i] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > total {
        for &i in order.iter().rev() {
            if assigned == total {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                assigned -= 1;
            }
        }
    }
    counts
}

struct Placer<'a> {
    occupied: &'a mut Array2<bool>,
    region: Region,
}

impl Placer<'_> {
    /// True when no occupied pixel lies strictly closer than `r0`.
    fn clear_of(&self, i: usize, j: usize, r0: f64) -> bool {
        if r0 <= 1.0 {
            return !self.occupied[[i, j]];
        }
        let (m, n) = self.occupied.dim();
        let w = r0.ceil() as isize;
        let r0sq = r0 * r0;
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
                if self.occupied[[ii as usize, jj as usize]] && ((di * di + dj * dj) as f64) < r0sq {
                    return false;
                }
            }
        }
        true
    }

    /// True when some already-placed point of this region lies within `reach`.
    fn linked(&self, i: usize, j: usize, reach: f64, placed: &[(usize, usize)]) -> bool {
        let reach_sq = reach * reach;
        placed.iter().any(|&(a, b)| {
            let di = a as f64 - i as f64;
            let dj = b as f64 - j as f64;
            di * di + dj * dj <= reach_sq
        })
    }

    /// Grows a point set in candidate order: each new point keeps at least
    /// `r0` from every occupied pixel and, when possible, lies within
    /// `max(2r0, 1)` of a point already placed in the region. Returns `None`
    /// when the quota cannot be met or a point ends up isolated beyond
    /// `2r0 + 1`.
    fn grow(&mut self, order: &[(usize, usize)], quota: usize, r0: f64) -> Option<Vec<(usize, usize)>> {
        let reach = (2.0 * r0).max(1.0);
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(quota);
        let mut taken = vec![false; order.len()];

        while placed.len() < quota {
            let mut progressed = false;
            for (idx, &(i, j)) in order.iter().enumerate() {
                if placed.len() == quota {
                    break;
                }
                if taken[idx] || !self.clear_of(i, j, r0) {
                    continue;
                }
                if !placed.is_empty() && !self.linked(i, j, reach, &placed) {
                    continue;
                }
                taken[idx] = true;
                self.occupied[[i, j]] = true;
                placed.push((i, j));
                progressed = true;
            }
            if placed.len() == quota || progressed {
                continue;
            }
            // Cluster saturated: start a new one at the best remaining candidate.
            let seed = order
                .iter()
                .enumerate()
                .find(|&(idx, &(i, j))| !taken[idx] && self.clear_of(i, j, r0));
            match seed {
                Some((idx, &(i, j))) => {
                    taken[idx] = true;
                    self.occupied[[i, j]] = true;
                    placed.push((i, j));
                }
                None => {
                    self.release(&placed);
                    return None;
                }
            }
        }

        let limit = 2.0 * r0 + 1.0;
        if let Some(nn) = max_nn_distance(&placed) {
            if nn > limit {
                self.release(&placed);
                return None;
            }
        }
        Some(placed)
    }

    fn release(&mut self, placed: &[(usize, usize)]) {
        for &(i, j) in placed {
            self.occupied[[i, j]] = false;
        }
    }

    /// Candidate pixels ordered by weighted random keys `ln(u)/p`, so
    /// higher-probability pixels tend to come first.
    fn candidate_order(&self, probs: &Array2<f64>, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let Region { rows, cols, .. } = self.region;
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(self.region.area());
        for i in rows.0..rows.1 {
            for j in cols.0..cols.1 {
                let u = 1.0 - rng.gen::<f64>();
                let p = probs[[i, j]].max(1e-12);
                keyed.push((u.ln() / p, i, j));
            }
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        keyed.into_iter().map(|(_, i, j)| (i, j)).collect()
    }
}

fn pairwise_sq(a: (usize, usize), b: (usize, usize)) -> f64 {
    let di = a.0 as f64 - b.0 as f64;
    let dj = a.1 as f64 - b.1 as f64;
    di * di + dj * dj
}

fn min_pairwise_distance(points: &[(usize, usize)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut best = f64::INFINITY;
    for (k, &a) in points.iter().enumerate() {
        for &b in &points[k + 1..] {
            best = best.min(pairwise_sq(a, b));
        }
    }
    Some(best.sqrt())
}

fn max_nn_distance(points: &[(usize, usize)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut worst = 0.0_f64;
    for (k, &a) in points.iter().enumerate() {
        let nn = points
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != k)
            .map(|(_, &b)| pairwise_sq(a, b))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nn);
    }
    Some(worst.sqrt())
}

/// Synthesizes a reproducible mask from a projected probability matrix.
///
/// The grid is cut into `region_size`-square regions (edge regions truncated).
/// Each region receives `≈ p̄·area` points, with a largest-remainder correction
/// so the total equals `round(ΣP)`. Inside a region, points are placed by
/// dart throwing over weighted-random candidates: each point keeps at least
/// `r₀ = r0_from_probability(p̄)` from all occupied pixels and lies within
/// `2r₀` of a neighbor. A region that cannot be filled is retried, then has
/// its `r₀` relaxed by a factor of 0.9; the enforced value is reported.
pub fn generate_stable_mask(
    p: &ProbabilityMatrix,
    cfg: &StableConstraintConfig,
) -> Result<(SamplingMask, Vec<RegionReport>)> {
    let dim = p.dim();
    cfg.validate_for(dim)?;
    let probs = p.probs();
    if probs.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::param("probabilities must lie in [0, 1]; project them first"));
    }
    let mean = p.mean();
    if (mean - cfg.target_rate).abs() >= cfg.epsilon {
        return Err(Error::param(format!(
            "probability mean {mean} is not within {} of rate {}; project first",
            cfg.epsilon, cfg.target_rate
        )));
    }

    let regions = partition(dim, cfg.region_size);
    let sums: Vec<f64> = regions
        .iter()
        .map(|r| {
            probs
                .slice(ndarray::s![r.rows.0..r.rows.1, r.cols.0..r.cols.1])
                .sum()
        })
        .collect();
    let areas: Vec<usize> = regions.iter().map(Region::area).collect();
    let total = probs.sum().round() as usize;
    let quotas = apportion(&sums, &areas, total);

    let mut occupied = Array2::<bool>::from_elem(dim, false);
    let mut reports = Vec::with_capacity(regions.len());

    for (index, (region, &quota)) in regions.iter().zip(&quotas).enumerate() {
        let p_mean = sums[index] / region.area() as f64;
        let mut r0 = r0_from_probability(p_mean.max(f64::MIN_POSITIVE))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let mut placer = Placer {
            occupied: &mut occupied,
            region: *region,
        };

        let mut points = Vec::new();
        if quota > 0 {
            let mut done = false;
            for _ in 0..MAX_RELAX_ROUNDS {
                for _ in 0..RETRIES_PER_RADIUS {
                    let order = placer.candidate_order(probs, &mut rng);
                    if let Some(found) = placer.grow(&order, quota, r0) {
                        points = found;
                        done = true;
                        break;
                    }
                }
                if done {
                    break;
                }
                r0 *= RELAX_FACTOR;
                if r0 < MIN_RELAXED_R0 {
                    r0 = 0.0;
                }
            }
            if !done {
                // With r0 = 0 growth runs over 4-neighbors and always fills the quota.
                r0 = 0.0;
                let order = placer.candidate_order(probs, &mut rng);
                points = placer
                    .grow(&order, quota, r0)
                    .ok_or_else(|| Error::Infeasible(format!("region ({}, {}) cannot hold {quota} points", region.row, region.col)))?;
            }
            if r0 < r0_from_probability(p_mean.max(f64::MIN_POSITIVE))? {
                log::debug!(
                    "region ({}, {}) relaxed r0 to {r0:.4} for {quota} points",
                    region.row,
                    region.col
                );
            }
        }

        reports.push(RegionReport {
            region_row: region.row,
            region_col: region.col,
            p_mean,
            count: points.len(),
            min_dist: min_pairwise_distance(&points),
            max_nn_dist: max_nn_distance(&points),
            r0,
        });
    }

    let mask = SamplingMask::from_bits(occupied.mapv(u8::from));
    Ok((mask, reports))
}

/// Backward pass of [`apply_mask`].
///
/// The gradient w.r.t. the k-space input is exact (`grad_out ∘ M`). The
/// gradient w.r.t. the probabilities uses the straight-through surrogate
/// `M ≈ P`: `∂L/∂P(x, y) = Σ_c grad_out(x, y, c) · X_in(x, y, c)`.
pub fn mask_backward(
    grad_out: &TwoChannelGrid,
    x_in: &TwoChannelGrid,
    mask: &SamplingMask,
) -> Result<(TwoChannelGrid, Array2<f64>)> {
    ensure_shape(mask.dim(), grad_out.dim())?;
    ensure_shape(mask.dim(), x_in.dim())?;
    let grad_x = apply_mask(grad_out, mask)?;
    let mut grad_p = Array2::zeros(mask.dim());
    Zip::from(&mut grad_p)
        .and(grad_out.channel(0))
        .and(grad_out.channel(1))
        .and(x_in.channel(0))
        .and(x_in.channel(1))
        .for_each(|gp, &g0, &g1, &x0, &x1| *gp = g0 * x0 + g1 * x1);
    Ok((grad_x, grad_p))
}
