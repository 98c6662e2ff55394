//! Forward and adjoint kernels on flat `[B, C, H, W]` buffers.

use num_complex::Complex;

use super::scalar::{gemm, Mat};
use super::Scalar;
use crate::spectral::{half_width, retained_modes, Fft2, SpectralResampler};

fn wrap(i: isize, r: usize) -> usize {
    i.rem_euclid(r as isize) as usize
}

/// Circular im2col of one `[cin, r, r]` image into `[cin·k·k, r·r]`.
fn im2col<T: Scalar>(x: &[T], cin: usize, r: usize, k: usize, col: &mut [T]) {
    let rr = r * r;
    let p = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &x[ci * rr..(ci + 1) * rr];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut col[row * rr..(row + 1) * rr];
                let sh = wrap(dx as isize - p, r);
                for y in 0..r {
                    let ys = wrap(y as isize + dy as isize - p, r);
                    let src = &plane[ys * r..(ys + 1) * r];
                    let d = &mut dst[y * r..(y + 1) * r];
                    d[..r - sh].copy_from_slice(&src[sh..]);
                    d[r - sh..].copy_from_slice(&src[..sh]);
                }
            }
        }
    }
}

/// Pixel-major patches: row `p` holds the taps of pixel `p` ordered by (dy, dx, channel).
fn im2row<T: Scalar>(x: &[T], cin: usize, r: usize, k: usize, xt: &mut [T], rows: &mut [T]) {
    let rr = r * r;
    for ci in 0..cin {
        for p in 0..rr {
            xt[p * cin + ci] = x[ci * rr + p];
        }
    }
    let ck = cin * k * k;
    let pad = (k / 2) as isize;
    for y in 0..r {
        for xx in 0..r {
            let dst = &mut rows[(y * r + xx) * ck..(y * r + xx + 1) * ck];
            for dy in 0..k {
                let ys = wrap(y as isize + dy as isize - pad, r);
                for dx in 0..k {
                    let xs = wrap(xx as isize + dx as isize - pad, r);
                    let t = (dy * k + dx) * cin;
                    dst[t..t + cin].copy_from_slice(&xt[(ys * r + xs) * cin..][..cin]);
                }
            }
        }
    }
}



/// Geometry of a stride-1 circular convolution (cross-correlation) with odd kernel `k`.
/// A channel mix is the `k = 1` case.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub r: usize,
    pub k: usize,
}

impl ConvDims {
    fn rr(&self) -> usize {
        self.r * self.r
    }
    fn ck(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv_forward<T: Scalar>(d: ConvDims, x: &[T], w: &[T], out: &mut [T]) {
    let rr = d.rr();
    let ck = d.ck();
    let mut col = if d.k == 1 { Vec::new() } else { vec![T::zero(); ck * rr] };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * rr..(b + 1) * d.cin * rr];
        let ob = &mut out[b * d.cout * rr..(b + 1) * d.cout * rr];
        let cols: &[T] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.cin, d.r, d.k, &mut col);
            &col
        };
        gemm(d.cout, ck, rr, Mat { data: w, trans: false }, Mat { data: cols, trans: false }, T::zero(), ob);
    }
}

/// Accumulates kernel gradients into `gw` and, when requested, input gradients into `gx`.
pub fn conv_backward<T: Scalar>(d: ConvDims, x: &[T], w: &[T], gout: &[T], gw: &mut [T], gx: Option<&mut [T]>) {
    let rr = d.rr();
    let ck = d.ck();
    let kk = d.k * d.k;
    let mut rows = vec![T::zero(); rr * ck];
    let mut xt = vec![T::zero(); rr * d.cin];
    let mut gws = vec![T::zero(); d.cout * ck];
    for b in 0..d.batch {
        let xb = &x[b * d.cin * rr..(b + 1) * d.cin * rr];
        let gb = &gout[b * d.cout * rr..(b + 1) * d.cout * rr];
        // The GEMM backend is much faster with both operands row-major here.
        im2row(xb, d.cin, d.r, d.k, &mut xt, &mut rows);
        gemm(d.cout, rr, ck, Mat { data: gb, trans: false }, Mat { data: &rows, trans: false }, T::one(), &mut gws);
    }
    for o in 0..d.cout {
        for s in 0..kk {
            for i in 0..d.cin {
                let g = &mut gw[(o * d.cin + i) * kk + s];
                *g = *g + gws[o * ck + s * d.cin + i];
            }
        }
    }
    let Some(gx) = gx else { return };
    // The input adjoint is a correlation of `gout` with the flipped, transposed kernel.
    let k = d.k;
    let mut wt = vec![T::zero(); w.len()];
    for o in 0..d.cout {
        for i in 0..d.cin {
            for dy in 0..k {
                for dx in 0..k {
                    wt[((i * d.cout + o) * k + (k - 1 - dy)) * k + (k - 1 - dx)] = w[((o * d.cin + i) * k + dy) * k + dx];
                }
            }
        }
    }
    let dt = ConvDims {
        batch: d.batch,
        cin: d.cout,
        cout: d.cin,
        r: d.r,
        k,
    };
    let mut tmp = vec![T::zero(); d.batch * d.cin * rr];
    conv_forward(dt, gout, &wt, &mut tmp);
    for (g, v) in gx.iter_mut().zip(&tmp) {
        *g = *g + *v;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_forward<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

pub fn silu_backward<T: Scalar>(x: &[T], g: &[T], gx: &mut [T]) {
    for ((o, &v), &gv) in gx.iter_mut().zip(x).zip(g) {
        let s = sigmoid(v);
        *o = *o + gv * s * (T::one() + v * (T::one() - s));
    }
}

/// Sum of `f(a[i], b[i])` with lane-split accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    const L: usize = 8;
    let mut acc = [0.0f64; L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        for l in 0..L {
            acc[l] += f(ca[l].as_f64(), cb[l].as_f64());
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| f(x.as_f64(), y.as_f64())).sum();
    acc.iter().sum::<f64>() + tail
}

/// Per-(sample, group) statistics: `(mean, 1/sqrt(var + eps))`.
fn group_stats<T: Scalar>(x: &[T], eps: f64) -> (T, T) {
    let n = x.len() as f64;
    let mean = lane_sum(x, x, |v, _| v) / n;
    let var = lane_sum(x, x, |v, _| (v - mean) * (v - mean)) / n;
    (T::of(mean), T::of(1.0 / (var + eps).sqrt()))
}

pub fn group_norm_forward<T: Scalar>(x: &[T], batch: usize, channels: usize, hw: usize, groups: usize, eps: f64, out: &mut [T]) {
    let gsize = channels / groups * hw;
    for bg in 0..batch * groups {
        let xs = &x[bg * gsize..(bg + 1) * gsize];
        let (mean, inv) = group_stats(xs, eps);
        for (o, &v) in out[bg * gsize..(bg + 1) * gsize].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
    eps: f64,
    gx: &mut [T],
) {
    let gsize = channels / groups * hw;
    for bg in 0..batch * groups {
        let range = bg * gsize..(bg + 1) * gsize;
        let xs = &x[range.clone()];
        let gs = &g[range.clone()];
        let (mean, inv) = group_stats(xs, eps);
        let n = gsize as f64;
        let (m, iv) = (mean.as_f64(), inv.as_f64());
        let mean_g = T::of(lane_sum(gs, gs, |v, _| v) / n);
        let mean_gy = T::of(lane_sum(xs, gs, |v, gv| gv * (v - m) * iv) / n);
        for ((o, &v), &gv) in gx[range].iter_mut().zip(xs).zip(gs) {
            let y = (v - mean) * inv;
            *o = *o + inv * (gv - mean_g - y * mean_gy);
        }
    }
}

pub fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, r: usize, out: &mut [T]) {
    let h = r / 2;
    let q = T::of(0.25);
    for p in 0..planes {
        let xi = &x[p * r * r..(p + 1) * r * r];
        let oi = &mut out[p * h * h..(p + 1) * h * h];
        for i in 0..h {
            for j in 0..h {
                let a = xi[2 * i * r + 2 * j] + xi[2 * i * r + 2 * j + 1];
                let b = xi[(2 * i + 1) * r + 2 * j] + xi[(2 * i + 1) * r + 2 * j + 1];
                oi[i * h + j] = (a + b) * q;
            }
        }
    }
}

pub fn avg_pool2_backward<T: Scalar>(g: &[T], planes: usize, r: usize, gx: &mut [T]) {
    let h = r / 2;
    let q = T::of(0.25);
    for p in 0..planes {
        let gi = &g[p * h * h..(p + 1) * h * h];
        let xo = &mut gx[p * r * r..(p + 1) * r * r];
        for i in 0..h {
            for j in 0..h {
                let v = gi[i * h + j] * q;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * i + di) * r + 2 * j + dj;
                    xo[idx] = xo[idx] + v;
                }
            }
        }
    }
}

pub fn rfft2_forward<T: Scalar>(x: &[T], planes: usize, r: usize, out: &mut [Complex<T>]) {
    let mut fft = Fft2::new(r);
    let hs = r * half_width(r);
    for p in 0..planes {
        fft.rfft2(&x[p * r * r..(p + 1) * r * r], &mut out[p * hs..(p + 1) * hs]);
    }
}

pub fn rfft2_backward<T: Scalar>(g: &[Complex<T>], planes: usize, r: usize, gx: &mut [T]) {
    let mut fft = Fft2::new(r);
    let hs = r * half_width(r);
    let mut tmp = vec![T::zero(); r * r];
    for p in 0..planes {
        fft.rfft2_adjoint(&g[p * hs..(p + 1) * hs], &mut tmp);
        for (o, &v) in gx[p * r * r..(p + 1) * r * r].iter_mut().zip(&tmp) {
            *o = *o + v;
        }
    }
}

pub fn irfft2_forward<T: Scalar>(x: &[Complex<T>], planes: usize, r: usize, out: &mut [T]) {
    let mut fft = Fft2::new(r);
    let hs = r * half_width(r);
    for p in 0..planes {
        fft.irfft2(&x[p * hs..(p + 1) * hs], &mut out[p * r * r..(p + 1) * r * r]);
    }
}

pub fn irfft2_backward<T: Scalar>(g: &[T], planes: usize, r: usize, gx: &mut [Complex<T>]) {
    let mut fft = Fft2::new(r);
    let hs = r * half_width(r);
    let mut tmp = vec![Complex::new(T::zero(), T::zero()); hs];
    for p in 0..planes {
        fft.irfft2_adjoint(&g[p * r * r..(p + 1) * r * r], &mut tmp);
        for (o, &v) in gx[p * hs..(p + 1) * hs].iter_mut().zip(&tmp) {
            *o = *o + v;
        }
    }
}

/// Geometry of a mode-truncated complex channel mix on half-plane spectra.
#[derive(Debug, Clone, Copy)]
pub struct ModeMixDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub r: usize,
    pub modes: usize,
}

/// Real block form `[[Wr, Wi], [−Wi, Wr]]` of mode `m`, shape `[2·cin, 2·cout]`.
fn weight_block<T: Scalar>(d: ModeMixDims, w: &[T], nm: usize, m: usize, out: &mut [T]) {
    let (ci, co) = (d.cin, d.cout);
    let cols = 2 * co;
    for o in 0..co {
        for i in 0..ci {
            let at = 2 * ((o * ci + i) * nm + m);
            let (re, im) = (w[at], w[at + 1]);
            out[i * cols + o] = re;
            out[i * cols + co + o] = im;
            out[(ci + i) * cols + o] = -im;
            out[(ci + i) * cols + co + o] = re;
        }
    }
}

/// Gathers mode `pos` of every plane into `[B, 2c]` rows `[re…, im…]`.
fn gather_mode<T: Scalar>(x: &[Complex<T>], batch: usize, c: usize, plane: usize, pos: usize, out: &mut [T]) {
    for b in 0..batch {
        for i in 0..c {
            let v = x[(b * c + i) * plane + pos];
            out[b * 2 * c + i] = v.re;
            out[b * 2 * c + c + i] = v.im;
        }
    }
}

/// `out[b, o, m] = Σ_i W[o, i, m] · X[b, i, m]` on retained modes; zero elsewhere.
pub fn mode_mix_forward<T: Scalar>(d: ModeMixDims, x: &[Complex<T>], w: &[T], out: &mut [Complex<T>]) {
    let h = half_width(d.r);
    let plane = d.r * h;
    let nm = crate::spectral::mode_count(d.modes);
    out.fill(Complex::new(T::zero(), T::zero()));
    let mut wb = vec![T::zero(); 4 * d.cin * d.cout];
    let mut xm = vec![T::zero(); 2 * d.batch * d.cin];
    let mut om = vec![T::zero(); 2 * d.batch * d.cout];
    for (m, row, col) in retained_modes(d.modes, d.r) {
        let pos = row * h + col;
        weight_block(d, w, nm, m, &mut wb);
        gather_mode(x, d.batch, d.cin, plane, pos, &mut xm);
        gemm(d.batch, 2 * d.cin, 2 * d.cout, Mat { data: &xm, trans: false }, Mat { data: &wb, trans: false }, T::zero(), &mut om);
        for b in 0..d.batch {
            for o in 0..d.cout {
                out[(b * d.cout + o) * plane + pos] = Complex::new(om[b * 2 * d.cout + o], om[b * 2 * d.cout + d.cout + o]);
            }
        }
    }
}

pub fn mode_mix_backward<T: Scalar>(
    d: ModeMixDims,
    x: &[Complex<T>],
    w: &[T],
    g: &[Complex<T>],
    gw: &mut [T],
    mut gx: Option<&mut [Complex<T>]>,
) {
    let h = half_width(d.r);
    let plane = d.r * h;
    let nm = crate::spectral::mode_count(d.modes);
    let (ci, co) = (d.cin, d.cout);
    let mut wb = vec![T::zero(); 4 * ci * co];
    let mut gwb = vec![T::zero(); 4 * ci * co];
    let mut xm = vec![T::zero(); 2 * d.batch * ci];
    let mut gm = vec![T::zero(); 2 * d.batch * co];
    let mut gxm = vec![T::zero(); 2 * d.batch * ci];
    for (m, row, col) in retained_modes(d.modes, d.r) {
        let pos = row * h + col;
        gather_mode(x, d.batch, ci, plane, pos, &mut xm);
        gather_mode(g, d.batch, co, plane, pos, &mut gm);
        gemm(2 * ci, d.batch, 2 * co, Mat { data: &xm, trans: true }, Mat { data: &gm, trans: false }, T::zero(), &mut gwb);
        let cols = 2 * co;
        for o in 0..co {
            for i in 0..ci {
                let at = 2 * ((o * ci + i) * nm + m);
                gw[at] = gw[at] + gwb[i * cols + o] + gwb[(ci + i) * cols + co + o];
                gw[at + 1] = gw[at + 1] + gwb[i * cols + co + o] - gwb[(ci + i) * cols + o];
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            weight_block(d, w, nm, m, &mut wb);
            gemm(d.batch, 2 * co, 2 * ci, Mat { data: &gm, trans: false }, Mat { data: &wb, trans: true }, T::zero(), &mut gxm);
            for b in 0..d.batch {
                for i in 0..ci {
                    let at = (b * ci + i) * plane + pos;
                    gx[at] = gx[at] + Complex::new(gxm[b * 2 * ci + i], gxm[b * 2 * ci + ci + i]);
                }
            }
        }
    }
}

pub fn spectral_upsample_forward<T: Scalar>(x: &[T], planes: usize, r: usize, out: &mut [T]) {
    let r2 = 2 * r;
    let mut rs = SpectralResampler::new(r, r2);
    for p in 0..planes {
        rs.forward(&x[p * r * r..(p + 1) * r * r], &mut out[p * r2 * r2..(p + 1) * r2 * r2]);
    }
}

pub fn spectral_upsample_backward<T: Scalar>(g: &[T], planes: usize, r: usize, gx: &mut [T]) {
    let r2 = 2 * r;
    let mut rs = SpectralResampler::new(r, r2);
    let mut tmp = vec![T::zero(); r * r];
    for p in 0..planes {
        rs.adjoint(&g[p * r2 * r2..(p + 1) * r2 * r2], &mut tmp);
        for (o, &v) in gx[p * r * r..(p + 1) * r * r].iter_mut().zip(&tmp) {
            *o = *o + v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2row_permutes_im2col() {
        let (cin, r, k) = (2, 5, 3);
        let x: Vec<f64> = (0..cin * r * r).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let ck = cin * k * k;
        let mut col = vec![0.0; ck * r * r];
        im2col(&x, cin, r, k, &mut col);
        let mut xt = vec![0.0; x.len()];
        let mut rows = vec![0.0; ck * r * r];
        im2row(&x, cin, r, k, &mut xt, &mut rows);
        for ci in 0..cin {
            for s in 0..k * k {
                for p in 0..r * r {
                    assert_eq!(col[(ci * k * k + s) * r * r + p], rows[p * ck + s * cin + ci]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_direct_circular_sum() {
        let d = ConvDims {
            batch: 2,
            cin: 2,
            cout: 3,
            r: 4,
            k: 3,
        };
        let x: Vec<f64> = (0..d.batch * d.cin * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..d.cout * d.cin * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut out = vec![0.0; d.batch * d.cout * 16];
        conv_forward(d, &x, &w, &mut out);
        for b in 0..d.batch {
            for o in 0..d.cout {
                for y in 0..4 {
                    for xx in 0..4 {
                        let mut acc = 0.0;
                        for i in 0..d.cin {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let ys = (y + 4 + dy - 1) % 4;
                                    let xs = (xx + 4 + dx - 1) % 4;
                                    acc += w[((o * d.cin + i) * 3 + dy) * 3 + dx] * x[((b * d.cin + i) * 4 + ys) * 4 + xs];
                                }
                            }
                        }
                        let got = out[((b * d.cout + o) * 4 + y) * 4 + xx];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_wider_than_grid_wraps() {
        // r = 1: every tap reads the single pixel.
        let d = ConvDims {
            batch: 1,
            cin: 1,
            cout: 1,
            r: 1,
            k: 3,
        };
        let w: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut out = vec![0.0];
        conv_forward(d, &[2.0], &w, &mut out);
        assert_eq!(out[0], 90.0);
    }
}
