//! Radial power spectra, Fréchet distances over pluggable features, and score
//! error against closed-form Gaussian oracles.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{score_from_denoiser, ve_posterior, Denoiser, GaussianData, KlBasis};
use crate::engine::kernels::{avg_pool2_forward, conv_forward, ConvDims};
use crate::error::{Error, Result};
use crate::grid::{resample, GridFunction, ResampleMethod};
use crate::spectral::{column_weight, half_width, Fft2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    /// Integer mode radius of the annulus.
    pub radius: usize,
    /// Mean `|m|` of the modes in the annulus.
    pub mean_frequency: f64,
    /// Mean power per mode.
    pub power: f64,
    /// Number of full-plane modes in the annulus.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    pub resolution: usize,
    pub bins: Vec<SpectrumBin>,
}

impl RadialSpectrum {
    /// `Σ power·count`, the mean square of the source by Parseval.
    pub fn total_power(&self) -> f64 {
        self.bins.iter().map(|b| b.power * b.count as f64).sum()
    }

    /// Per-bin power averaged over several spectra of one resolution.
    pub fn average(spectra: &[RadialSpectrum]) -> Result<RadialSpectrum> {
        let first = spectra.first().ok_or_else(|| Error::Contract("no spectra to average".into()))?;
        if spectra.iter().any(|s| s.resolution != first.resolution) {
            return Err(Error::Contract("averaging spectra of different resolutions".into()));
        }
        let mut out = first.clone();
        for (k, b) in out.bins.iter_mut().enumerate() {
            b.power = spectra.iter().map(|s| s.bins[k].power).sum::<f64>() / spectra.len() as f64;
        }
        Ok(out)
    }
}

/// Radial power spectrum with `1/r²` transform normalization, channels averaged.
/// Bin `k` collects modes with `round(|m|) = k`; the DC mode is alone in bin 0.
pub fn radial_spectrum(g: &GridFunction) -> RadialSpectrum {
    let r = g.resolution();
    let h = half_width(r);
    let mut fft = Fft2::<f64>::new(r);
    let mut spec = vec![Complex::new(0.0, 0.0); r * h];
    let max_bin = ((2.0f64).sqrt() * (r / 2) as f64).round() as usize + 1;
    let mut power = vec![0.0; max_bin];
    let mut freq = vec![0.0; max_bin];
    let mut count = vec![0usize; max_bin];
    let signed = |i: usize| if 2 * i > r { i as f64 - r as f64 } else { i as f64 };
    for c in 0..g.channels() {
        fft.rfft2(g.channel(c), &mut spec);
        for i in 0..r {
            for j in 0..h {
                let w = column_weight(r, j);
                let rad = signed(i).hypot(j as f64);
                let k = rad.round() as usize;
                power[k] += w as f64 * spec[i * h + j].norm_sqr();
                if c == 0 {
                    freq[k] += w as f64 * rad;
                    count[k] += w;
                }
            }
        }
    }
    let nc = g.channels() as f64;
    let bins = (0..max_bin)
        .filter(|&k| count[k] > 0)
        .map(|k| SpectrumBin {
            radius: k,
            mean_frequency: freq[k] / count[k] as f64,
            power: power[k] / (count[k] as f64 * nc),
            count: count[k],
        })
        .collect();
    RadialSpectrum { resolution: r, bins }
}

/// `Σ_band |P_a − P_b| / Σ_band P_b` over bins with `lo ≤ radius ≤ hi`.
pub fn relative_spectrum_error(a: &RadialSpectrum, reference: &RadialSpectrum, lo: usize, hi: usize) -> Result<f64> {
    if a.resolution != reference.resolution {
        return Err(Error::Contract(format!(
            "comparing spectra at r={} and r={}",
            a.resolution, reference.resolution
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, q) in a.bins.iter().zip(&reference.bins) {
        if (lo..=hi).contains(&q.radius) {
            num += (p.power - q.power).abs() * q.count as f64;
            den += q.power * q.count as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::Contract(format!("reference has no power in bins {lo}..={hi}")));
    }
    Ok(num / den)
}

/// Low-band and high-band relative spectrum errors, split at a quarter of the
/// finest training Nyquist radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandErrors {
    pub split: usize,
    pub coherence: f64,
    pub fidelity: f64,
}

pub fn band_errors(samples: &[GridFunction], reference: &[GridFunction], train_max: usize) -> Result<BandErrors> {
    let a = RadialSpectrum::average(&samples.iter().map(radial_spectrum).collect::<Vec<_>>())?;
    let b = RadialSpectrum::average(&reference.iter().map(radial_spectrum).collect::<Vec<_>>())?;
    let split = (train_max / 2) / 4;
    Ok(BandErrors {
        split,
        coherence: relative_spectrum_error(&a, &b, 0, split)?,
        fidelity: relative_spectrum_error(&a, &b, split + 1, usize::MAX)?,
    })
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(|v| v.len()).ok_or_else(|| Error::Contract("empty feature set".into()))?;
    if b.is_empty() {
        return Err(Error::Contract("empty feature set".into()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != d) {
        return Err(Error::Contract(format!("feature dimension mismatch: {} vs {d}", v.len())));
    }
    let (ma, ca) = moments(a, d);
    let (mb, cb) = moments(b, d);
    let sa = sym_sqrt(&ca);
    let m = &sa * &cb * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dist = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Mean and covariance; a `1e-6·I` ridge keeps undersampled sets well posed.
fn moments(x: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut mean = DVector::zeros(d);
    for v in x {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n.max(2) - 1) as f64;
    if n <= d {
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Maps images of any resolution to a fixed-length vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureExtractor {
    /// Area-resample to 16×16 and flatten.
    FlattenLowres,
    /// Seeded random three-layer convolutional projection to 256 values.
    FixedRandomConv { seed: u64 },
}

impl fmt::Display for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FlattenLowres => write!(f, "flatten-lowres"),
            Self::FixedRandomConv { seed } => write!(f, "fixed-random-conv(seed={seed})"),
        }
    }
}

impl std::str::FromStr for FeatureExtractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten-lowres" => Ok(Self::FlattenLowres),
            "fixed-random-conv" => Ok(Self::FixedRandomConv { seed: 0 }),
            _ => Err(Error::Config(format!(
                "unknown feature extractor `{s}` (expected flatten-lowres or fixed-random-conv)"
            ))),
        }
    }
}

const LOWRES: usize = 16;
const CONV_INPUT: usize = 32;
const CONV_WIDTHS: [usize; 3] = [16, 32, 64];

impl FeatureExtractor {
    pub fn extract(&self, g: &GridFunction) -> Result<Vec<f64>> {
        match self {
            Self::FlattenLowres => Ok(resample(g, LOWRES, ResampleMethod::Area)?.into_values()),
            Self::FixedRandomConv { seed } => random_conv_features(g, *seed),
        }
    }

    pub fn extract_all(&self, set: &[GridFunction]) -> Result<Vec<Vec<f64>>> {
        set.iter().map(|g| self.extract(g)).collect()
    }
}

/// 32×32 input, three 3×3 conv + ReLU layers with 2× average pooling between
/// them, then pooling down to 2×2 over 64 channels.
fn random_conv_features(g: &GridFunction, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = resample(g, CONV_INPUT, ResampleMethod::Area)?.into_values();
    let mut cin = g.channels();
    let mut r = CONV_INPUT;
    for (layer, &cout) in CONV_WIDTHS.iter().enumerate() {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut y = vec![0.0; cout * r * r];
        conv_forward(ConvDims { batch: 1, cin, cout, r, k: 3 }, &x, &w, &mut y);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        let pools = if layer + 1 < CONV_WIDTHS.len() { 1 } else { 2 };
        for _ in 0..pools {
            let mut p = vec![0.0; cout * (r / 2) * (r / 2)];
            avg_pool2_forward(&y, cout, r, &mut p);
            y = p;
            r /= 2;
        }
        x = y;
        cin = cout;
    }
    debug_assert_eq!(x.len(), 256);
    Ok(x)
}

/// Proxy FID between two image sets under one extractor.
pub fn proxy_fid(a: &[GridFunction], b: &[GridFunction], fx: &FeatureExtractor) -> Result<f64> {
    frechet_gaussian(&fx.extract_all(a)?, &fx.extract_all(b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorReport {
    pub resolution: usize,
    /// Mean relative error over all used probes.
    pub mean: f64,
    /// `(σ, mean relative error)` per probe level.
    pub per_sigma: Vec<(f64, f64)>,
    pub probes: usize,
    pub skipped: usize,
}

/// Noise levels at which score error is probed by default.
pub const PROBE_SIGMAS: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

/// Relative score error of `model` against the exact Gaussian score on probes
/// `x = x₀ + σξ`, `x₀ ~ data`, white `ξ`.
pub fn score_error(
    model: &mut dyn Denoiser,
    data: &GaussianData,
    basis: &KlBasis,
    sigmas: &[f64],
    per_sigma: usize,
    rng: &mut impl RngCore,
) -> Result<ScoreErrorReport> {
    let r = basis.resolution();
    let mut rows = Vec::with_capacity(sigmas.len());
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for &s in sigmas {
        let mut xs = Vec::with_capacity(per_sigma);
        for _ in 0..per_sigma {
            let x0 = data.sample(basis, rng)?;
            let v = x0.values().iter().map(|v| v + s * rng.sample::<f64, _>(StandardNormal)).collect();
            xs.push(GridFunction::new(1, r, v)?);
        }
        let den = model.denoise_batch(&xs, s)?;
        let (mut acc, mut n) = (0.0, 0usize);
        for (x, d) in xs.iter().zip(&den) {
            let (_, oracle) = ve_posterior(x, s, data, basis)?;
            let on = oracle.l2_norm();
            if on == 0.0 {
                skipped += 1;
                continue;
            }
            let est = score_from_denoiser(x, s, d)?;
            acc += est.sub(&oracle)?.l2_norm() / on;
            n += 1;
        }
        if n > 0 {
            rows.push((s, acc / n as f64));
        }
        total += acc;
        used += n;
    }
    Ok(ScoreErrorReport {
        resolution: r,
        mean: if used > 0 { total / used as f64 } else { f64::NAN },
        per_sigma: rows,
        probes: used,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_features_have_fixed_width() {
        for r in [8, 24, 48] {
            let g = GridFunction::constant(1, r, 0.3);
            assert_eq!(FeatureExtractor::FixedRandomConv { seed: 1 }.extract(&g).unwrap().len(), 256);
        }
    }

    #[test]
    fn extractor_names_round_trip() {
        let f: FeatureExtractor = "flatten-lowres".parse().unwrap();
        assert_eq!(f.to_string(), "flatten-lowres");
        assert!("inception".parse::<FeatureExtractor>().is_err());
    }
}
