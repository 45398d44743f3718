//! Matrix-form 2D DFT.
//!
//! `forward_2d(x) = F_m · x · F_n` and `inverse_2d(k) = (1/mn) · F_mᴴ · k · F_nᴴ`,
//! with `F_n[j][k] = ω^{jk}`, `ω = exp(-2πi/n)`. The real and imaginary planes
//! of every Fourier matrix are computed once and shared through a process-wide
//! cache.
//!
//! Transforms operate on unshifted data (DC at `(0, 0)`). [`CenterShift`] moves
//! DC to `(⌊m/2⌋, ⌊n/2⌋)` for mask definition and display.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use once_cell::sync::Lazy;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, ProbabilityMatrix, RealImage, SamplingMask, TwoChannelGrid};

/// The n×n DFT matrix, held as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMatrix {
    n: usize,
    re: Array2<f64>,
    im: Array2<f64>,
}

impl FourierMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn re(&self) -> &Array2<f64> {
        &self.re
    }

    pub fn im(&self) -> &Array2<f64> {
        &self.im
    }
}

static CACHE: Lazy<Mutex<HashMap<usize, Arc<FourierMatrix>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn build(n: usize) -> FourierMatrix {
    let mut re = Array2::zeros((n, n));
    let mut im = Array2::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            // Reduce the exponent first so large jk keeps full precision.
            let e = (j * k) % n;
            let theta = -2.0 * PI * e as f64 / n as f64;
            re[[j, k]] = theta.cos();
            im[[j, k]] = theta.sin();
        }
    }
    FourierMatrix { n, re, im }
}

/// Returns the (cached) n-point DFT matrix.
pub fn dft_matrix(n: usize) -> Result<Arc<FourierMatrix>> {
    if n == 0 {
        return Err(Error::param("DFT size must be at least 1"));
    }
    let mut cache = CACHE.lock().expect("fourier cache poisoned");
    Ok(cache.entry(n).or_insert_with(|| Arc::new(build(n))).clone())
}

/// `(Lᶜ) · X · (Rᶜ)` where `ᶜ` is an optional conjugation of the Fourier matrix.
fn sandwich(
    left: &FourierMatrix,
    right: &FourierMatrix,
    conjugate: bool,
    xr: &Array2<f64>,
    xi: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let s = if conjugate { -1.0 } else { 1.0 };
    let (a, b) = (&left.re, &left.im);
    // T = L · X
    let tr = a.dot(xr) - &(b.dot(xi) * s);
    let ti = a.dot(xi) + &(b.dot(xr) * s);
    // Y = T · R
    let (e, g) = (&right.re, &right.im);
    let yr = tr.dot(e) - &(ti.dot(g) * s);
    let yi = tr.dot(g) * s + &ti.dot(e);
    (yr, yi)
}

/// `F_m · x · F_n`.
pub fn forward_2d(x: &ComplexGrid) -> ComplexGrid {
    let (m, n) = x.dim();
    let fm = dft_matrix(m).expect("grid dims are positive");
    let fn_ = dft_matrix(n).expect("grid dims are positive");
    let (re, im) = sandwich(&fm, &fn_, false, x.re(), x.im());
    ComplexGrid::from_planes(re, im)
}

/// `(1/mn) · F_mᴴ · k · F_nᴴ`.
pub fn inverse_2d(k: &ComplexGrid) -> ComplexGrid {
    let (m, n) = k.dim();
    let fm = dft_matrix(m).expect("grid dims are positive");
    let fn_ = dft_matrix(n).expect("grid dims are positive");
    let (re, im) = sandwich(&fm, &fn_, true, k.re(), k.im());
    let scale = 1.0 / (m * n) as f64;
    ComplexGrid::from_planes(re * scale, im * scale)
}

/// Backward pass of [`inverse_2d`].
///
/// `grad_out` holds `∂L/∂Re` and `∂L/∂Im` of the inverse-transform output.
/// The gradient map `g ↦ (1/mn) · F_mᴴ · g · F_nᴴ` acts on the conjugate
/// (Wirtinger) form `∂L/∂Re − i·∂L/∂Im`, so the input is conjugated before
/// the map and the result conjugated back. The returned grid has the same
/// `(∂L/∂Re, ∂L/∂Im)` layout for the k-space input.
pub fn ift_backward(grad_out: &ComplexGrid) -> ComplexGrid {
    inverse_2d(&grad_out.conj()).conj()
}

/// DC-centering for grids and masks.
///
/// `shifted` moves index `(0, 0)` to `(⌊m/2⌋, ⌊n/2⌋)`; `unshifted` is its exact
/// inverse for every size. For even sizes the two coincide.
pub trait CenterShift: Sized {
    fn shifted(&self) -> Self;
    fn unshifted(&self) -> Self;
}

fn roll<T: Clone>(a: &Array2<T>, dr: usize, dc: usize) -> Array2<T> {
    let (m, n) = a.dim();
    Array2::from_shape_fn((m, n), |(i, j)| {
        a[[(i + m - dr % m) % m, (j + n - dc % n) % n]].clone()
    })
}

/// Moves DC from `(0, 0)` to `(⌊m/2⌋, ⌊n/2⌋)`.
pub fn center_shift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (m, n) = a.dim();
    roll(a, m / 2, n / 2)
}

/// Inverse of [`center_shift`].
pub fn center_unshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (m, n) = a.dim();
    roll(a, m - m / 2, n - n / 2)
}

impl CenterShift for ComplexGrid {
    fn shifted(&self) -> Self {
        ComplexGrid::from_planes(center_shift(self.re()), center_shift(self.im()))
    }

    fn unshifted(&self) -> Self {
        ComplexGrid::from_planes(center_unshift(self.re()), center_unshift(self.im()))
    }
}

impl CenterShift for TwoChannelGrid {
    fn shifted(&self) -> Self {
        TwoChannelGrid::from_channels(center_shift(self.channel(0)), center_shift(self.channel(1)))
    }

    fn unshifted(&self) -> Self {
        TwoChannelGrid::from_channels(
            center_unshift(self.channel(0)),
            center_unshift(self.channel(1)),
        )
    }
}

impl CenterShift for RealImage {
    fn shifted(&self) -> Self {
        RealImage::from_array(center_shift(self.pixels()))
    }

    fn unshifted(&self) -> Self {
        RealImage::from_array(center_unshift(self.pixels()))
    }
}

impl CenterShift for SamplingMask {
    fn shifted(&self) -> Self {
        SamplingMask::from_bits(center_shift(self.bits()))
    }

    fn unshifted(&self) -> Self {
        SamplingMask::from_bits(center_unshift(self.bits()))
    }
}

impl CenterShift for ProbabilityMatrix {
    fn shifted(&self) -> Self {
        ProbabilityMatrix::from_array(center_shift(self.probs()))
    }

    fn unshifted(&self) -> Self {
        ProbabilityMatrix::from_array(center_unshift(self.probs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(m: usize, n: usize, seed: u64) -> ComplexGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0));
        let im = Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0));
        ComplexGrid::new(re, im).unwrap()
    }

    /// Direct evaluation of the double-sum definition.
    fn brute_force_dft(x: &ComplexGrid) -> ComplexGrid {
        let (m, n) = x.dim();
        let mut re = Array2::zeros((m, n));
        let mut im = Array2::zeros((m, n));
        for u in 0..m {
            for v in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for p in 0..m {
                    for q in 0..n {
                        let phase =
                            -2.0 * PI * ((u * p) as f64 / m as f64 + (v * q) as f64 / n as f64);
                        let (c, s) = (phase.cos(), phase.sin());
                        let (a, b) = (x.re()[[p, q]], x.im()[[p, q]]);
                        sr += a * c - b * s;
                        si += a * s + b * c;
                    }
                }
                re[[u, v]] = sr;
                im[[u, v]] = si;
            }
        }
        ComplexGrid::new(re, im).unwrap()
    }

    fn max_rel_err(a: &ComplexGrid, b: &ComplexGrid) -> f64 {
        let scale = b.re().iter().chain(b.im().iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        let diff = a
            .re()
            .iter()
            .zip(b.re().iter())
            .chain(a.im().iter().zip(b.im().iter()))
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        diff / scale.max(f64::MIN_POSITIVE)
    }

    #[test]
    fn small_matrices() {
        let f1 = dft_matrix(1).unwrap();
        assert_eq!(f1.re()[[0, 0]], 1.0);
        assert_eq!(f1.im()[[0, 0]], 0.0);

        let f2 = dft_matrix(2).unwrap();
        let expect = [[1.0, 1.0], [1.0, -1.0]];
        for j in 0..2 {
            for k in 0..2 {
                assert!((f2.re()[[j, k]] - expect[j][k]).abs() < 1e-15);
                assert!(f2.im()[[j, k]].abs() < 1e-15);
            }
        }

        let f4 = dft_matrix(4).unwrap();
        assert!(f4.re()[[1, 1]].abs() < 1e-15);
        assert!((f4.im()[[1, 1]] + 1.0).abs() < 1e-15);
        // ω^(2·2) = ω^4 = 1; the -1 entries sit where jk ≡ 2 (mod 4).
        assert!((f4.re()[[2, 2]] - 1.0).abs() < 1e-15);
        assert!(f4.im()[[2, 2]].abs() < 1e-15);
        assert!((f4.re()[[1, 2]] + 1.0).abs() < 1e-15);
        assert!((f4.re()[[2, 3]] + 1.0).abs() < 1e-15);

        assert!(dft_matrix(0).is_err());
    }

    #[test]
    fn matrix_is_symmetric_and_unitary_up_to_scale() {
        for n in [3, 8, 17] {
            let f = dft_matrix(n).unwrap();
            assert_eq!(f.re(), &f.re().t());
            assert_eq!(f.im(), &f.im().t());
            // (1/n) F Fᴴ = I
            let pr = f.re().dot(&f.re().t()) + f.im().dot(&f.im().t());
            let pi = f.im().dot(&f.re().t()) - f.re().dot(&f.im().t());
            for j in 0..n {
                for k in 0..n {
                    let expect = if j == k { 1.0 } else { 0.0 };
                    assert!((pr[[j, k]] / n as f64 - expect).abs() < 1e-12);
                    assert!((pi[[j, k]] / n as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_and_constant() {
        let mut re = Array2::zeros((4, 4));
        re[[0, 0]] = 1.0;
        let k = forward_2d(&ComplexGrid::from_real(re).unwrap());
        assert!(k.re().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(k.im().iter().all(|v| v.abs() < 1e-14));

        let k = forward_2d(&ComplexGrid::from_real(Array2::ones((4, 4))).unwrap());
        for ((i, j), v) in k.re().indexed_iter() {
            let expect = if (i, j) == (0, 0) { 16.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-13);
        }
        assert!(k.im().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn inverse_examples() {
        let z = inverse_2d(&ComplexGrid::zeros(5, 3).unwrap());
        assert!(z.re().iter().chain(z.im().iter()).all(|&v| v == 0.0));

        let mut re = Array2::zeros((4, 4));
        re[[0, 0]] = 16.0;
        let x = inverse_2d(&ComplexGrid::from_real(re).unwrap());
        assert!(x.re().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(x.im().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn forward_matches_double_sum() {
        for (m, n, seed) in [(8, 8, 1), (5, 7, 2), (1, 6, 3)] {
            let x = random_grid(m, n, seed);
            assert!(max_rel_err(&forward_2d(&x), &brute_force_dft(&x)) < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let x = random_grid(16, 16, 9);
        assert!(max_rel_err(&inverse_2d(&forward_2d(&x)), &x) < 1e-10);
        let x = random_grid(7, 12, 10);
        assert!(max_rel_err(&inverse_2d(&forward_2d(&x)), &x) < 1e-10);
    }

    #[test]
    fn parseval_and_linearity() {
        for (size, seed) in [(4, 1u64), (13, 2), (32, 3), (64, 4)] {
            let x = random_grid(size, size, seed);
            let k = forward_2d(&x);
            let lhs = x.energy();
            let rhs = k.energy() / (size * size) as f64;
            assert!((lhs - rhs).abs() / lhs < 1e-9);
        }

        let x = random_grid(9, 6, 11);
        let y = random_grid(9, 6, 12);
        let (a, b) = (0.7, -2.3);
        let combo = ComplexGrid::from_planes(
            x.re() * a + &(y.re() * b),
            x.im() * a + &(y.im() * b),
        );
        let lhs = forward_2d(&combo);
        let (fx, fy) = (forward_2d(&x), forward_2d(&y));
        let rhs = ComplexGrid::from_planes(
            fx.re() * a + &(fy.re() * b),
            fx.im() * a + &(fy.im() * b),
        );
        assert!(max_rel_err(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let g = ift_backward(&ComplexGrid::zeros(4, 4).unwrap());
        assert!(g.re().iter().chain(g.im().iter()).all(|&v| v == 0.0));

        let mut re = Array2::zeros((4, 4));
        re[[0, 0]] = 1.0;
        let g = ift_backward(&ComplexGrid::from_real(re).unwrap());
        assert!(g.re().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(g.im().iter().all(|v| v.abs() < 1e-15));
    }

    /// Real Jacobian of `inverse_2d` on a 4×4 grid, probed column by column,
    /// flattened as `[re..., im...]`.
    fn dense_inverse_jacobian(m: usize, n: usize) -> Array2<f64> {
        let d = 2 * m * n;
        let mut jac = Array2::zeros((d, d));
        for col in 0..d {
            let mut re = Array2::zeros((m, n));
            let mut im = Array2::zeros((m, n));
            if col < m * n {
                re[[col / n, col % n]] = 1.0;
            } else {
                im[[(col - m * n) / n, (col - m * n) % n]] = 1.0;
            }
            let out = inverse_2d(&ComplexGrid::new(re, im).unwrap());
            for (row, v) in out.re().iter().chain(out.im().iter()).enumerate() {
                jac[[row, col]] = *v;
            }
        }
        jac
    }

    #[test]
    fn backward_is_adjoint_of_inverse() {
        let (m, n) = (4, 4);
        let jac = dense_inverse_jacobian(m, n);
        let g = random_grid(m, n, 21);
        let flat: Vec<f64> = g.re().iter().chain(g.im().iter()).cloned().collect();
        let expect = jac.t().dot(&ndarray::Array1::from(flat));
        let got = ift_backward(&g);
        for (a, b) in got.re().iter().chain(got.im().iter()).zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // L(k) = Σ w ⊙ Re(IFT(k)) + Σ v ⊙ Im(IFT(k)) + ½‖IFT(k)‖²
        let (m, n) = (8, 8);
        let k = random_grid(m, n, 31);
        let w = random_grid(m, n, 32);
        let loss = |k: &ComplexGrid| {
            let x = inverse_2d(k);
            (x.re() * w.re()).sum() + (x.im() * w.im()).sum() + 0.5 * x.energy()
        };
        let x = inverse_2d(&k);
        let upstream = ComplexGrid::from_planes(w.re() + x.re(), w.im() + x.im());
        let analytic = ift_backward(&upstream);

        let h = 1e-6;
        let mut max_rel = 0.0_f64;
        for plane in 0..2 {
            for i in 0..m {
                for j in 0..n {
                    let bump = |delta: f64| {
                        let (mut re, mut im) = (k.re().clone(), k.im().clone());
                        if plane == 0 {
                            re[[i, j]] += delta;
                        } else {
                            im[[i, j]] += delta;
                        }
                        loss(&ComplexGrid::from_planes(re, im))
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = if plane == 0 { analytic.re()[[i, j]] } else { analytic.im()[[i, j]] };
                    max_rel = max_rel.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
                }
            }
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn shift_examples() {
        let a = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as i32);
        assert_eq!(center_shift(&center_shift(&a)), a);

        let mut d = Array2::<u8>::zeros((4, 4));
        d[[0, 0]] = 1;
        let s = center_shift(&d);
        assert_eq!(s[[2, 2]], 1);
        assert_eq!(s.sum(), 1);

        let odd = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as i32);
        let s = center_shift(&odd);
        assert_eq!(s[[2, 2]], 0);
        assert_ne!(center_shift(&s), odd);
        assert_eq!(center_unshift(&s), odd);
        assert_eq!(center_shift(&center_unshift(&odd)), odd);

        let rect = Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as i32);
        assert_eq!(center_unshift(&center_shift(&rect)), rect);
    }
}
