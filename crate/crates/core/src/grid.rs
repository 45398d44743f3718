//! Two-dimensional value types shared by every stage of the pipeline.
//!
//! Complex data is always carried as two real planes. Indices are row-major
//! with the origin at `(0, 0)`; whether a grid is DC-centered or not is a
//! convention of the caller (see [`crate::fourier::center_shift`]).

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid(rows, cols));
    }
    Ok(())
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn check_finite(a: &Array2<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_shape(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// An m×n complex array stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    re: Array2<f64>,
    im: Array2<f64>,
}

impl ComplexGrid {
    pub fn new(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        check_dims(re.nrows(), re.ncols())?;
        check_same(&re, &im)?;
        check_finite(&re, "complex grid (real plane)")?;
        check_finite(&im, "complex grid (imaginary plane)")?;
        Ok(Self { re, im })
    }

    /// Builds a grid without the finiteness scan. Used internally where the
    /// inputs are already known to be valid.
    pub(crate) fn from_planes(re: Array2<f64>, im: Array2<f64>) -> Self {
        debug_assert_eq!(re.dim(), im.dim());
        Self { re, im }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_dims(rows, cols)?;
        Ok(Self {
            re: Array2::zeros((rows, cols)),
            im: Array2::zeros((rows, cols)),
        })
    }

    pub fn from_real(re: Array2<f64>) -> Result<Self> {
        let im = Array2::zeros(re.dim());
        Self::new(re, im)
    }

    pub fn rows(&self) -> usize {
        self.re.nrows()
    }

    pub fn cols(&self) -> usize {
        self.re.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.re.dim()
    }

    pub fn re(&self) -> &Array2<f64> {
        &self.re
    }

    pub fn im(&self) -> &Array2<f64> {
        &self.im
    }

    pub fn into_planes(self) -> (Array2<f64>, Array2<f64>) {
        (self.re, self.im)
    }

    /// Pointwise modulus `|z|`.
    pub fn magnitude(&self) -> Array2<f64> {
        Zip::from(&self.re)
            .and(&self.im)
            .map_collect(|&a, &b| a.hypot(b))
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().map(|v| v * v).sum::<f64>() + self.im.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_planes(&self.re * s, &self.im * s)
    }

    pub fn conj(&self) -> Self {
        Self::from_planes(self.re.clone(), -&self.im)
    }
}

/// The two-channel real form of a complex grid: channel 0 is the real part,
/// channel 1 the imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoChannelGrid {
    channels: [Array2<f64>; 2],
}

impl TwoChannelGrid {
    pub fn new(ch0: Array2<f64>, ch1: Array2<f64>) -> Result<Self> {
        check_dims(ch0.nrows(), ch0.ncols())?;
        check_same(&ch0, &ch1)?;
        check_finite(&ch0, "two-channel grid")?;
        check_finite(&ch1, "two-channel grid")?;
        Ok(Self {
            channels: [ch0, ch1],
        })
    }

    pub(crate) fn from_channels(ch0: Array2<f64>, ch1: Array2<f64>) -> Self {
        debug_assert_eq!(ch0.dim(), ch1.dim());
        Self {
            channels: [ch0, ch1],
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    pub fn channel(&self, c: usize) -> &Array2<f64> {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Array2<f64>; 2] {
        &self.channels
    }

    pub fn into_channels(self) -> [Array2<f64>; 2] {
        self.channels
    }
}

/// A single-channel real image. Range checking to `[0, 1]` happens only in
/// [`RealImage::normalized`]; network activations and residual outputs are
/// free to leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pixels: Array2<f64>,
}

impl RealImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        check_dims(pixels.nrows(), pixels.ncols())?;
        check_finite(&pixels, "image")?;
        Ok(Self { pixels })
    }

    /// Accepts only images already inside `[0, 1]`.
    pub fn normalized(pixels: Array2<f64>) -> Result<Self> {
        let img = Self::new(pixels)?;
        if img.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::param("normalized image has pixels outside [0, 1]"));
        }
        Ok(img)
    }

    pub(crate) fn from_array(pixels: Array2<f64>) -> Self {
        Self { pixels }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_dims(rows, cols)?;
        Ok(Self {
            pixels: Array2::zeros((rows, cols)),
        })
    }

    pub fn rows(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn cols(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }
}

/// Binary undersampling pattern. Bits are stored as `u8` holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SamplingMask {
    bits: Array2<u8>,
}

impl SamplingMask {
    pub fn new(bits: Array2<u8>) -> Result<Self> {
        check_dims(bits.nrows(), bits.ncols())?;
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::param("sampling mask entries must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    pub(crate) fn from_bits(bits: Array2<u8>) -> Self {
        Self { bits }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_dims(rows, cols)?;
        Ok(Self {
            bits: Array2::zeros((rows, cols)),
        })
    }

    pub fn ones(rows: usize, cols: usize) -> Result<Self> {
        check_dims(rows, cols)?;
        Ok(Self {
            bits: Array2::ones((rows, cols)),
        })
    }

    pub fn rows(&self) -> usize {
        self.bits.nrows()
    }

    pub fn cols(&self) -> usize {
        self.bits.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[[row, col]] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn rate(&self) -> f64 {
        rate_of(self)
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.bits.mapv(f64::from)
    }
}

/// Fraction of acquired points in `mask`.
pub fn rate_of(mask: &SamplingMask) -> f64 {
    mask.count() as f64 / mask.bits.len() as f64
}

/// Per-point acquisition probabilities. Construction only checks finiteness;
/// bounds and the mean-rate constraint are established by
/// [`crate::sampler::project_probabilities`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    probs: Array2<f64>,
}

impl ProbabilityMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        check_dims(probs.nrows(), probs.ncols())?;
        check_finite(&probs, "probability matrix")?;
        Ok(Self { probs })
    }

    pub(crate) fn from_array(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(rows: usize, cols: usize, value: f64) -> Result<Self> {
        check_dims(rows, cols)?;
        Self::new(Array2::from_elem((rows, cols), value))
    }

    pub fn rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.probs.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn into_array(self) -> Array2<f64> {
        self.probs
    }

    pub fn mean(&self) -> f64 {
        self.probs.sum() / self.probs.len() as f64
    }
}

/// Log-magnitude display of a k-space grid: `log(1 + |K|)` scaled so the
/// brightest pixel is exactly 1. An all-zero grid maps to an all-zero image.
pub fn log_magnitude_display(grid: &ComplexGrid) -> RealImage {
    let mut img = grid.magnitude().mapv(f64::ln_1p);
    let peak = img.iter().cloned().fold(0.0_f64, f64::max);
    if peak > 0.0 {
        img.mapv_inplace(|v| v / peak);
    }
    RealImage::from_array(img)
}
