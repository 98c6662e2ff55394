//! Planar Fourier transforms on the cell-centered `r×r` grid.
//!
//! The forward real transform divides by `r²`, so coefficients approximate the
//! continuous Fourier coefficients of the sampled function. The half-plane layout
//! is `r × (r/2 + 1)` with the first axis holding signed modes `m₁` (index `m₁ mod r`)
//! and the second axis holding `m₂ ∈ [0, r/2]`.
//!
//! Every transform here comes with an exact adjoint so the differentiation engine
//! can reuse it.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::engine::Scalar;

/// Width of the half-plane spectrum for an `r×r` real grid.
pub fn half_width(r: usize) -> usize {
    r / 2 + 1
}

/// Multiplicity of a half-plane column under conjugate-symmetric reconstruction.
pub(crate) fn column_weight(r: usize, k2: usize) -> usize {
    if k2 == 0 || (r % 2 == 0 && k2 == r / 2) {
        1
    } else {
        2
    }
}

/// Forward/inverse complex FFT plans for one square size.
pub struct Fft2<T: Scalar> {
    r: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
    buf: Vec<Complex<T>>,
    tmp: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(r: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            r,
            fwd: planner.plan_fft_forward(r),
            inv: planner.plan_fft_inverse(r),
            buf: vec![Complex::new(T::zero(), T::zero()); r * r],
            tmp: vec![Complex::new(T::zero(), T::zero()); r * r],
        }
    }

    pub fn size(&self) -> usize {
        self.r
    }

    /// Unnormalized in-place 2D transform of `self.buf`.
    fn transform(&mut self, inverse: bool) {
        let r = self.r;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(&mut self.buf);
        for i in 0..r {
            for j in 0..r {
                self.tmp[j * r + i] = self.buf[i * r + j];
            }
        }
        plan.process(&mut self.tmp);
        for i in 0..r {
            for j in 0..r {
                self.buf[i * r + j] = self.tmp[j * r + i];
            }
        }
    }

    /// Half-plane spectrum of a real plane, normalized by `1/r²`.
    pub fn rfft2(&mut self, x: &[T], out: &mut [Complex<T>]) {
        let r = self.r;
        let h = half_width(r);
        for (b, &v) in self.buf.iter_mut().zip(x) {
            *b = Complex::new(v, T::zero());
        }
        self.transform(false);
        let norm = T::one() / T::of((r * r) as f64);
        for i in 0..r {
            for j in 0..h {
                out[i * h + j] = self.buf[i * r + j] * norm;
            }
        }
    }

    /// Real plane from a half-plane spectrum: `x[n] = Σ_half w(k₂) Re(X[k] e^{iθ})`.
    ///
    /// Exact inverse of [`Fft2::rfft2`]; imaginary parts of self-conjugate bins are
    /// discarded by the real-part projection.
    pub fn irfft2(&mut self, spec: &[Complex<T>], out: &mut [T]) {
        let r = self.r;
        let h = half_width(r);
        let half = T::of(0.5);
        self.buf.fill(Complex::new(T::zero(), T::zero()));
        for i in 0..r {
            let ni = (r - i) % r;
            for j in 0..h {
                let w = T::of(column_weight(r, j) as f64) * half;
                let v = spec[i * h + j] * w;
                let nj = (r - j) % r;
                self.buf[i * r + j] = self.buf[i * r + j] + v;
                self.buf[ni * r + nj] = self.buf[ni * r + nj] + v.conj();
            }
        }
        self.transform(true);
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = b.re;
        }
    }

    /// Adjoint of [`Fft2::rfft2`]: real plane from a half-plane cotangent.
    pub fn rfft2_adjoint(&mut self, grad: &[Complex<T>], out: &mut [T]) {
        let r = self.r;
        let h = half_width(r);
        self.buf.fill(Complex::new(T::zero(), T::zero()));
        for i in 0..r {
            for j in 0..h {
                self.buf[i * r + j] = grad[i * h + j];
            }
        }
        self.transform(true);
        let norm = T::one() / T::of((r * r) as f64);
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = b.re * norm;
        }
    }

    /// Adjoint of [`Fft2::irfft2`]: half-plane cotangent from a real cotangent.
    pub fn irfft2_adjoint(&mut self, grad: &[T], out: &mut [Complex<T>]) {
        let r = self.r;
        let h = half_width(r);
        for (b, &v) in self.buf.iter_mut().zip(grad) {
            *b = Complex::new(v, T::zero());
        }
        self.transform(false);
        for i in 0..r {
            for j in 0..h {
                out[i * h + j] = self.buf[i * r + j] * T::of(column_weight(r, j) as f64);
            }
        }
    }

    /// Full normalized spectrum of a real plane.
    fn full_forward(&mut self, x: &[T], out: &mut [Complex<T>]) {
        let r = self.r;
        for (b, &v) in self.buf.iter_mut().zip(x) {
            *b = Complex::new(v, T::zero());
        }
        self.transform(false);
        let norm = T::one() / T::of((r * r) as f64);
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = *b * norm;
        }
    }
}

/// Per-axis routing of source Fourier indices to target indices with the phase
/// correction for cell-centered nodes. Nyquist bins of an even source are split
/// into `±r/2` halves, which reproduces the sine the grid actually observes.
fn axis_routes<T: Scalar>(r_src: usize, r_dst: usize) -> Vec<Vec<(usize, Complex<T>)>> {
    let mut routes = Vec::with_capacity(r_src);
    for j in 0..r_src {
        let mut modes: Vec<(i64, f64)> = Vec::new();
        if r_src % 2 == 0 && j == r_src / 2 {
            let n = (r_src / 2) as i64;
            modes.push((n, 0.5));
            modes.push((-n, 0.5));
        } else if j <= r_src / 2 {
            modes.push((j as i64, 1.0));
        } else {
            modes.push((j as i64 - r_src as i64, 1.0));
        }
        let mut out = Vec::new();
        for (k, split) in modes {
            if 2 * k.unsigned_abs() as usize > r_dst {
                continue;
            }
            let phase = std::f64::consts::PI * k as f64 * (1.0 / r_dst as f64 - 1.0 / r_src as f64);
            let f = Complex::new(split * phase.cos(), split * phase.sin());
            let t = k.rem_euclid(r_dst as i64) as usize;
            out.push((t, Complex::new(T::of(f.re), T::of(f.im))));
        }
        routes.push(out);
    }
    routes
}

/// Band-limited (trigonometric) resampling of real planes between two grid sizes,
/// with its adjoint.
pub struct SpectralResampler<T: Scalar> {
    src: Fft2<T>,
    dst: Fft2<T>,
    routes_src: Vec<Vec<(usize, Complex<T>)>>,
    spec: Vec<Complex<T>>,
}

impl<T: Scalar> SpectralResampler<T> {
    pub fn new(r_src: usize, r_dst: usize) -> Self {
        Self {
            src: Fft2::new(r_src),
            dst: Fft2::new(r_dst),
            routes_src: axis_routes(r_src, r_dst),
            spec: vec![Complex::new(T::zero(), T::zero()); r_src * r_src],
        }
    }

    pub fn forward(&mut self, x: &[T], out: &mut [T]) {
        let rs = self.src.size();
        let rd = self.dst.size();
        self.src.full_forward(x, &mut self.spec);
        let zero = Complex::new(T::zero(), T::zero());
        self.dst.buf.fill(zero);
        for j1 in 0..rs {
            for &(t1, f1) in &self.routes_src[j1] {
                for j2 in 0..rs {
                    let v = self.spec[j1 * rs + j2] * f1;
                    for &(t2, f2) in &self.routes_src[j2] {
                        let idx = t1 * rd + t2;
                        self.dst.buf[idx] = self.dst.buf[idx] + v * f2;
                    }
                }
            }
        }
        self.dst.transform(true);
        for (o, b) in out.iter_mut().zip(&self.dst.buf) {
            *o = b.re;
        }
    }

    pub fn adjoint(&mut self, grad: &[T], out: &mut [T]) {
        let rs = self.src.size();
        let rd = self.dst.size();
        for (b, &v) in self.dst.buf.iter_mut().zip(grad) {
            *b = Complex::new(v, T::zero());
        }
        self.dst.transform(false);
        let zero = Complex::new(T::zero(), T::zero());
        for j1 in 0..rs {
            for j2 in 0..rs {
                let mut acc = zero;
                for &(t1, f1) in &self.routes_src[j1] {
                    for &(t2, f2) in &self.routes_src[j2] {
                        acc = acc + (f1 * f2).conj() * self.dst.buf[t1 * rd + t2];
                    }
                }
                self.src.buf[j1 * rs + j2] = acc;
            }
        }
        self.src.transform(true);
        let norm = T::one() / T::of((rs * rs) as f64);
        for (o, b) in out.iter_mut().zip(&self.src.buf) {
            *o = b.re * norm;
        }
    }
}

/// Iterator over the retained half-plane modes `|m₁| < modes`, `0 ≤ m₂ < modes`,
/// yielding `(mode index, row index, column index)` for an `r`-grid.
pub fn retained_modes(modes: usize, r: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let span = 2 * modes - 1;
    (0..span).flat_map(move |a| {
        let m1 = a as i64 - (modes as i64 - 1);
        let row = m1.rem_euclid(r as i64) as usize;
        (0..modes).map(move |m2| (a * modes + m2, row, m2))
    })
}

/// Number of stored coefficients for a cutoff of `modes` lowest modes per axis.
pub fn mode_count(modes: usize) -> usize {
    (2 * modes - 1) * modes
}

/// Smallest grid size that represents every retained mode below Nyquist.
pub fn min_resolution(modes: usize) -> usize {
    2 * modes - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(r: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..r * r).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rfft_irfft_roundtrip_odd_and_even() {
        for r in [1usize, 2, 5, 8, 9] {
            let x = random_plane(r, r as u64);
            let mut fft = Fft2::<f64>::new(r);
            let mut spec = vec![Complex::new(0.0, 0.0); r * half_width(r)];
            fft.rfft2(&x, &mut spec);
            let mut back = vec![0.0; r * r];
            fft.irfft2(&spec, &mut back);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12, "r={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dc_coefficient_is_the_mean() {
        let r = 6;
        let x = random_plane(r, 3);
        let mean = x.iter().sum::<f64>() / (r * r) as f64;
        let mut fft = Fft2::<f64>::new(r);
        let mut spec = vec![Complex::new(0.0, 0.0); r * half_width(r)];
        fft.rfft2(&x, &mut spec);
        assert!((spec[0].re - mean).abs() < 1e-14);
    }

    #[test]
    fn resample_adjoint_identity() {
        for (a, b) in [(4usize, 8usize), (8, 4), (5, 8), (6, 9), (8, 8)] {
            let x = random_plane(a, 11);
            let y = random_plane(b, 12);
            let mut rs = SpectralResampler::<f64>::new(a, b);
            let mut ax = vec![0.0; b * b];
            rs.forward(&x, &mut ax);
            let mut aty = vec![0.0; a * a];
            rs.adjoint(&y, &mut aty);
            let lhs: f64 = ax.iter().zip(&y).map(|(p, q)| p * q).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{a}->{b}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn resample_same_size_is_identity() {
        let x = random_plane(8, 5);
        let mut rs = SpectralResampler::<f64>::new(8, 8);
        let mut out = vec![0.0; 64];
        rs.forward(&x, &mut out);
        for (a, b) in x.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retained_mode_layout() {
        let modes: Vec<_> = retained_modes(2, 8).collect();
        assert_eq!(modes.len(), mode_count(2));
        assert_eq!(modes[0], (0, 7, 0));
        assert_eq!(modes[2], (2, 0, 0));
        assert_eq!(modes[5], (5, 1, 1));
    }
}
