//! Functions on the unit square sampled on cell-centered grids, resampling between
//! grid sizes, and multi-resolution datasets.
//!
//! Values are stored channel-major, then row, then column. Row `i` samples
//! `y = (i+½)/r` and column `j` samples `x = (j+½)/r`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralResampler;

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    channels: usize,
    resolution: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(channels: usize, resolution: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || resolution == 0 {
            return Err(Error::Contract("grid functions need at least one channel and one node".into()));
        }
        if values.len() != channels * resolution * resolution {
            return Err(Error::Contract(format!(
                "{} values cannot fill {channels} channels at r={resolution}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite grid value at index {pos}")));
        }
        Ok(Self {
            channels,
            resolution,
            values,
        })
    }

    pub fn zeros(channels: usize, resolution: usize) -> Self {
        Self::constant(channels, resolution, 0.0)
    }

    pub fn constant(channels: usize, resolution: usize, value: f64) -> Self {
        assert!(channels > 0 && resolution > 0 && value.is_finite());
        Self {
            channels,
            resolution,
            values: vec![value; channels * resolution * resolution],
        }
    }

    /// Samples `f(channel, x, y)` at every node.
    pub fn from_fn(channels: usize, resolution: usize, f: impl Fn(usize, f64, f64) -> f64) -> Result<Self> {
        let r = resolution;
        let mut values = Vec::with_capacity(channels * r * r);
        for c in 0..channels {
            for i in 0..r {
                let y = (i as f64 + 0.5) / r as f64;
                for j in 0..r {
                    values.push(f(c, (j as f64 + 0.5) / r as f64, y));
                }
            }
        }
        Self::new(channels, resolution, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        let r = self.resolution;
        self.values[(c * r + i) * r + j]
    }

    fn check_compatible(&self, other: &GridFunction) -> Result<()> {
        if self.channels != other.channels || self.resolution != other.resolution {
            return Err(Error::Contract(format!(
                "grid functions differ: {}ch@{} vs {}ch@{}",
                self.channels, self.resolution, other.channels, other.resolution
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        GridFunction::new(self.channels, self.resolution, values)
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + s * b)
    }

    pub fn scale(&self, s: f64) -> Result<GridFunction> {
        GridFunction::new(self.channels, self.resolution, self.values.iter().map(|v| v * s).collect())
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of values times cell area, per channel.
    pub fn integral(&self) -> Vec<f64> {
        let area = 1.0 / (self.resolution * self.resolution) as f64;
        (0..self.channels).map(|c| self.channel(c).iter().sum::<f64>() * area).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    Bilinear,
    Area,
    /// Trigonometric interpolation (exact for band-limited data).
    Spectral,
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "area" => Ok(Self::Area),
            "spectral" => Ok(Self::Spectral),
            other => Err(Error::Config(format!("unknown resample method `{other}`"))),
        }
    }
}

/// Row-stochastic `[r_dst × r_src]` matrix for one axis.
fn axis_weights(r_src: usize, r_dst: usize, method: ResampleMethod) -> Vec<f64> {
    let mut w = vec![0.0; r_dst * r_src];
    match method {
        ResampleMethod::Bilinear => {
            for t in 0..r_dst {
                let s = ((t as f64 + 0.5) * r_src as f64 / r_dst as f64 - 0.5).clamp(0.0, (r_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(r_src - 1);
                let frac = s - i0 as f64;
                w[t * r_src + i0] += 1.0 - frac;
                w[t * r_src + i1] += frac;
            }
        }
        ResampleMethod::Area => {
            // Exact integer arithmetic on the common refinement r_src·r_dst.
            for t in 0..r_dst {
                let (lo, hi) = (t * r_src, (t + 1) * r_src);
                for s in 0..r_src {
                    let (a, b) = (s * r_dst, (s + 1) * r_dst);
                    let overlap = hi.min(b).saturating_sub(lo.max(a));
                    if overlap > 0 {
                        w[t * r_src + s] = overlap as f64 / r_src as f64;
                    }
                }
            }
        }
        ResampleMethod::Spectral => unreachable!(),
    }
    w
}

/// Resamples to `r_target`; returns a bit-exact copy when the resolution is unchanged.
pub fn resample(g: &GridFunction, r_target: usize, method: ResampleMethod) -> Result<GridFunction> {
    if r_target == 0 {
        return Err(Error::Contract("target resolution must be positive".into()));
    }
    let rs = g.resolution;
    if r_target == rs {
        return Ok(g.clone());
    }
    let rt = r_target;
    let mut values = vec![0.0; g.channels * rt * rt];
    if method == ResampleMethod::Spectral {
        let mut rsm = SpectralResampler::<f64>::new(rs, rt);
        for c in 0..g.channels {
            rsm.forward(g.channel(c), &mut values[c * rt * rt..(c + 1) * rt * rt]);
        }
        return GridFunction::new(g.channels, rt, values);
    }
    let w = axis_weights(rs, rt, method);
    let mut rows = vec![0.0; rt * rs];
    for c in 0..g.channels {
        let src = g.channel(c);
        // Columns first: rows[i][t] = Σ_s src[i][s] w[t][s].
        for i in 0..rs {
            for t in 0..rt {
                let wt = &w[t * rs..(t + 1) * rs];
                rows[t * rs + i] = src[i * rs..(i + 1) * rs].iter().zip(wt).map(|(a, b)| a * b).sum();
            }
        }
        let out = &mut values[c * rt * rt..(c + 1) * rt * rt];
        for u in 0..rt {
            let wu = &w[u * rs..(u + 1) * rs];
            for t in 0..rt {
                out[u * rt + t] = rows[t * rs..(t + 1) * rs].iter().zip(wu).map(|(a, b)| a * b).sum();
            }
        }
    }
    GridFunction::new(g.channels, rt, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKindName {
    BandLimitedFourier,
    GaussianProcess,
    EdgePlusSmooth,
}

impl FromStr for SyntheticKindName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band-limited-fourier" => Ok(Self::BandLimitedFourier),
            "gaussian-process" => Ok(Self::GaussianProcess),
            "edge-plus-smooth" => Ok(Self::EdgePlusSmooth),
            other => Err(Error::Config(format!("unknown synthetic distribution kind `{other}`"))),
        }
    }
}

/// Continuous random-function families with exact point evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Independent Gaussian coefficients on every mode with `|m₁|, |m₂| ≤ cutoff`.
    BandLimitedFourier { cutoff: usize },
    /// Zero-mean field whose mode variances decay as `(1 + |m|²)^(−alpha)`, truncated to `|m₁|, |m₂| ≤ cutoff`.
    GaussianProcess { alpha: f64, cutoff: usize },
    /// A smooth-edged periodic disk plus a low-mode Gaussian field.
    EdgePlusSmooth {
        sharpness: f64,
        smooth_cutoff: usize,
        smooth_std: f64,
    },
}

impl SyntheticKind {
    pub fn name(&self) -> SyntheticKindName {
        match self {
            Self::BandLimitedFourier { .. } => SyntheticKindName::BandLimitedFourier,
            Self::GaussianProcess { .. } => SyntheticKindName::GaussianProcess,
            Self::EdgePlusSmooth { .. } => SyntheticKindName::EdgePlusSmooth,
        }
    }

    /// Defaults for a named family.
    pub fn default_for(name: SyntheticKindName) -> Self {
        match name {
            SyntheticKindName::BandLimitedFourier => Self::BandLimitedFourier { cutoff: 3 },
            SyntheticKindName::GaussianProcess => Self::GaussianProcess { alpha: 2.0, cutoff: 7 },
            SyntheticKindName::EdgePlusSmooth => Self::EdgePlusSmooth {
                sharpness: 0.01,
                smooth_cutoff: 3,
                smooth_std: 0.2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, channels: usize, seed: u64) -> Self {
        Self { kind, channels, seed }
    }

    /// Draws one continuous function.
    pub fn draw(&self, rng: &mut impl RngCore) -> Result<Field> {
        if self.channels == 0 {
            return Err(Error::Config("synthetic data needs at least one channel".into()));
        }
        match self.kind {
            SyntheticKind::BandLimitedFourier { cutoff } => {
                let spectrum = FieldSpectrum::new(cutoff, |_| 1.0, 0.5);
                Ok(Field::Fourier(spectrum.draw(self.channels, rng)))
            }
            SyntheticKind::GaussianProcess { alpha, cutoff } => {
                if !(alpha >= 0.0) {
                    return Err(Error::Config(format!("eigenvalue decay must be nonnegative, got {alpha}")));
                }
                let spectrum = FieldSpectrum::gaussian_process(alpha, cutoff);
                Ok(Field::Fourier(spectrum.draw(self.channels, rng)))
            }
            SyntheticKind::EdgePlusSmooth {
                sharpness,
                smooth_cutoff,
                smooth_std,
            } => {
                if !(sharpness > 0.0) {
                    return Err(Error::Config(format!("edge sharpness must be positive, got {sharpness}")));
                }
                let disks = (0..self.channels)
                    .map(|_| Disk {
                        cx: rng.random(),
                        cy: rng.random(),
                        radius: rng.random_range(0.15..0.35),
                        width: sharpness,
                    })
                    .collect();
                let smooth = FieldSpectrum::new(smooth_cutoff, |_| 1.0, smooth_std).draw(self.channels, rng);
                Ok(Field::EdgePlusSmooth { disks, smooth })
            }
        }
    }
}

/// Mode box with per-mode relative variances, scaled to a target per-pixel standard deviation.
#[derive(Debug, Clone)]
pub struct FieldSpectrum {
    cutoff: usize,
    /// Full-plane variance of the coefficient at each `(m₁, m₂)` in the box.
    variance: BTreeMap<(i64, i64), f64>,
}

impl FieldSpectrum {
    fn new(cutoff: usize, weight: impl Fn((i64, i64)) -> f64, pixel_std: f64) -> Self {
        let c = cutoff as i64;
        let raw: BTreeMap<(i64, i64), f64> =
            (-c..=c).flat_map(|a| (-c..=c).map(move |b| (a, b))).map(|m| (m, weight(m))).collect();
        let total: f64 = raw.values().sum();
        let amp2 = pixel_std * pixel_std / total;
        Self {
            cutoff,
            variance: raw.into_iter().map(|(m, w)| (m, w * amp2)).collect(),
        }
    }

    /// Spectrum of the Gaussian-process family, per-pixel standard deviation 0.5.
    pub fn gaussian_process(alpha: f64, cutoff: usize) -> Self {
        Self::new(cutoff, |(a, b)| (1.0 + (a * a + b * b) as f64).powf(-alpha), 0.5)
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// Variance of the full-plane coefficient at mode `m`; zero outside the box.
    pub fn variance(&self, m: (i64, i64)) -> f64 {
        self.variance.get(&m).copied().unwrap_or(0.0)
    }

    fn draw(&self, channels: usize, rng: &mut impl RngCore) -> FourierField {
        let c = self.cutoff as i64;
        let mut terms = Vec::new();
        for ch in 0..channels {
            for a in -c..=c {
                for b in 0..=c {
                    // Half-plane representatives of each ±m pair.
                    if b == 0 && a < 0 {
                        continue;
                    }
                    let v = self.variance((a, b));
                    if (a, b) == (0, 0) {
                        let z: f64 = rng.sample(StandardNormal);
                        terms.push(Term { channel: ch, m: (0, 0), cos: v.sqrt() * z, sin: 0.0 });
                    } else {
                        let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                        let s = (2.0 * v).sqrt();
                        terms.push(Term { channel: ch, m: (a, b), cos: s * z1, sin: s * z2 });
                    }
                }
            }
        }
        FourierField { channels, terms }
    }
}

#[derive(Debug, Clone)]
struct Term {
    channel: usize,
    /// Frequencies along (x, y).
    m: (i64, i64),
    cos: f64,
    sin: f64,
}

/// Finite real trigonometric series.
#[derive(Debug, Clone)]
pub struct FourierField {
    channels: usize,
    terms: Vec<Term>,
}

impl FourierField {
    fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.channel == c)
            .map(|t| {
                let ph = TAU * (t.m.0 as f64 * x + t.m.1 as f64 * y);
                t.cos * ph.cos() + t.sin * ph.sin()
            })
            .sum()
    }

    fn sample(&self, r: usize) -> Vec<f64> {
        // Separable evaluation through per-axis phase tables.
        let nodes: Vec<f64> = (0..r).map(|i| (i as f64 + 0.5) / r as f64).collect();
        let mut out = vec![0.0; self.channels * r * r];
        for t in &self.terms {
            let ex: Vec<(f64, f64)> = nodes.iter().map(|&x| (TAU * t.m.0 as f64 * x).sin_cos()).collect();
            let ey: Vec<(f64, f64)> = nodes.iter().map(|&y| (TAU * t.m.1 as f64 * y).sin_cos()).collect();
            let plane = &mut out[t.channel * r * r..(t.channel + 1) * r * r];
            for (i, &(sy, cy)) in ey.iter().enumerate() {
                for (j, &(sx, cx)) in ex.iter().enumerate() {
                    let (c, s) = (cx * cy - sx * sy, sx * cy + cx * sy);
                    plane[i * r + j] += t.cos * c + t.sin * s;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Disk {
    cx: f64,
    cy: f64,
    radius: f64,
    width: f64,
}

impl Disk {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let wrap = |d: f64| d - d.round();
        let dist = wrap(x - self.cx).hypot(wrap(y - self.cy));
        0.5 * ((self.radius - dist) / self.width).tanh()
    }
}

/// One continuous random function, evaluable at any grid.
#[derive(Debug, Clone)]
pub enum Field {
    Fourier(FourierField),
    EdgePlusSmooth { disks: Vec<Disk>, smooth: FourierField },
}

impl Field {
    pub fn channels(&self) -> usize {
        match self {
            Field::Fourier(f) => f.channels,
            Field::EdgePlusSmooth { disks, .. } => disks.len(),
        }
    }

    pub fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        match self {
            Field::Fourier(f) => f.eval(c, x, y),
            Field::EdgePlusSmooth { disks, smooth } => disks[c].eval(x, y) + smooth.eval(c, x, y),
        }
    }

    pub fn sample(&self, r: usize) -> Result<GridFunction> {
        if r == 0 {
            return Err(Error::Contract("resolution must be positive".into()));
        }
        match self {
            Field::Fourier(f) => GridFunction::new(f.channels, r, f.sample(r)),
            Field::EdgePlusSmooth { disks, smooth } => {
                let mut values = smooth.sample(r);
                for (c, disk) in disks.iter().enumerate() {
                    for i in 0..r {
                        let y = (i as f64 + 0.5) / r as f64;
                        for j in 0..r {
                            values[(c * r + i) * r + j] += disk.eval((j as f64 + 0.5) / r as f64, y);
                        }
                    }
                }
                GridFunction::new(disks.len(), r, values)
            }
        }
    }
}

/// Evaluates one random draw at the `r×r` nodes. Equal rng states give the same
/// underlying function at every resolution.
pub fn sample_on_grid(spec: &SyntheticSpec, r: usize, rng: &mut impl RngCore) -> Result<GridFunction> {
    spec.draw(rng)?.sample(r)
}

/// Per-channel affine map from raw values to model space: `model = raw·scale + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub shift: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { scale: 1.0, shift: 0.0 };
    /// 8-bit pixels to `[−1, 1]`.
    pub const BYTE: Normalization = Normalization {
        scale: 1.0 / 127.5,
        shift: -1.0,
    };

    pub fn invert(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiResDataset {
    entries: Vec<BTreeMap<usize, GridFunction>>,
    resolutions: Vec<usize>,
    channels: usize,
    normalization: Vec<Normalization>,
}

#[derive(Debug, Clone)]
pub enum DataSourceSpec<'a> {
    Images(&'a Path),
    Synthetic(&'a SyntheticSpec),
}

impl MultiResDataset {
    pub fn from_parts(
        entries: Vec<BTreeMap<usize, GridFunction>>,
        resolutions: Vec<usize>,
        channels: usize,
        normalization: Vec<Normalization>,
    ) -> Result<Self> {
        let mut resolutions = resolutions;
        resolutions.sort_unstable();
        resolutions.dedup();
        if normalization.len() != channels {
            return Err(Error::Contract("one normalization per channel required".into()));
        }
        for (k, e) in entries.iter().enumerate() {
            for r in &resolutions {
                match e.get(r) {
                    Some(g) if g.channels == channels && g.resolution == *r => {}
                    _ => return Err(Error::Contract(format!("entry {k} lacks a {channels}-channel level at r={r}"))),
                }
            }
        }
        Ok(Self {
            entries,
            resolutions,
            channels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn normalization(&self) -> &[Normalization] {
        &self.normalization
    }

    pub fn entries(&self) -> &[BTreeMap<usize, GridFunction>] {
        &self.entries
    }

    pub fn get(&self, index: usize, r: usize) -> Option<&GridFunction> {
        self.entries.get(index).and_then(|e| e.get(&r))
    }

    pub fn iter(&self, r: usize) -> impl Iterator<Item = &GridFunction> {
        self.entries.iter().filter_map(move |e| e.get(&r))
    }

    /// Adds a level at `r_target` by bilinear upsampling of the finest existing level.
    pub fn with_upsampled(mut self, r_target: usize) -> Result<Self> {
        let Some(&top) = self.resolutions.last() else {
            return Err(Error::Config("cannot upsample a dataset without levels".into()));
        };
        if r_target <= top {
            return Err(Error::Config(format!(
                "upsampling target {r_target} must exceed the finest level {top}"
            )));
        }
        for e in &mut self.entries {
            let up = resample(&e[&top], r_target, ResampleMethod::Bilinear)?;
            e.insert(r_target, up);
        }
        self.resolutions.push(r_target);
        Ok(self)
    }
}

/// Builds a pyramid per source. Image sources are area-downsampled from their full
/// resolution; synthetic sources are evaluated exactly at each level.
pub fn build_dataset(
    source: DataSourceSpec<'_>,
    resolutions: &[usize],
    count: usize,
    rng: &mut impl RngCore,
) -> Result<MultiResDataset> {
    let mut res = resolutions.to_vec();
    res.sort_unstable();
    res.dedup();
    if res.first() == Some(&0) {
        return Err(Error::Config("resolutions must be positive".into()));
    }
    match source {
        DataSourceSpec::Synthetic(spec) => {
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let field = spec.draw(rng)?;
                let levels = res.iter().map(|&r| field.sample(r).map(|g| (r, g))).collect::<Result<_>>()?;
                entries.push(levels);
            }
            MultiResDataset::from_parts(entries, res, spec.channels, vec![Normalization::IDENTITY; spec.channels])
        }
        DataSourceSpec::Images(dir) => {
            let files = crate::imageio::list_pngs(dir)?;
            let max_r = res.last().copied().unwrap_or(0);
            let mut entries = Vec::new();
            let mut channels = None;
            for path in files.iter().take(count) {
                let raw = crate::imageio::load_png(path)?;
                let entry = path.display().to_string();
                if raw.resolution < max_r {
                    return Err(Error::Ingestion {
                        entry,
                        reason: format!("source resolution {} is below requested {max_r}", raw.resolution),
                    });
                }
                match channels {
                    None => channels = Some(raw.channels),
                    Some(c) if c != raw.channels => {
                        return Err(Error::Ingestion {
                            entry,
                            reason: format!("has {} channels, earlier entries have {c}", raw.channels),
                        })
                    }
                    _ => {}
                }
                let norm = raw.scale(Normalization::BYTE.scale)?.values.iter().map(|v| v + Normalization::BYTE.shift).collect();
                let g = GridFunction::new(raw.channels, raw.resolution, norm)?;
                let levels = res.iter().map(|&r| resample(&g, r, ResampleMethod::Area).map(|x| (r, x))).collect::<Result<_>>()?;
                entries.push(levels);
            }
            if count > 0 && entries.len() < count {
                return Err(Error::Ingestion {
                    entry: dir.display().to_string(),
                    reason: format!("requested {count} images, found {}", entries.len()),
                });
            }
            let channels = channels.unwrap_or(1);
            MultiResDataset::from_parts(entries, res, channels, vec![Normalization::BYTE; channels])
        }
    }
}

/// Supplies batches of training functions at a requested resolution.
pub trait DataSource {
    fn channels(&self) -> usize;

    fn resolutions(&self) -> Vec<usize>;

    fn batch(&mut self, r: usize, n: usize, rng: &mut dyn RngCore) -> Result<Vec<GridFunction>>;
}

impl fmt::Display for SyntheticKindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BandLimitedFourier => "band-limited-fourier",
            Self::GaussianProcess => "gaussian-process",
            Self::EdgePlusSmooth => "edge-plus-smooth",
        })
    }
}

/// Draws uniformly with replacement from a stored dataset.
pub struct DatasetSource<'a> {
    pub dataset: &'a MultiResDataset,
}

impl DataSource for DatasetSource<'_> {
    fn channels(&self) -> usize {
        self.dataset.channels
    }

    fn resolutions(&self) -> Vec<usize> {
        self.dataset.resolutions.clone()
    }

    fn batch(&mut self, r: usize, n: usize, rng: &mut dyn RngCore) -> Result<Vec<GridFunction>> {
        if self.dataset.is_empty() {
            return Err(Error::Contract("cannot draw batches from an empty dataset".into()));
        }
        if !self.dataset.resolutions.contains(&r) {
            return Err(Error::Contract(format!("dataset has no level at r={r}")));
        }
        Ok((0..n)
            .map(|_| self.dataset.entries[rng.random_range(0..self.dataset.len())][&r].clone())
            .collect())
    }
}

/// Fresh synthetic draws for every batch item. Resolutions listed in `upsampled`
/// are produced by bilinear upsampling of a draw at the mapped source resolution.
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    pub native: Vec<usize>,
    pub upsampled: BTreeMap<usize, usize>,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticSpec, native: &[usize]) -> Self {
        Self {
            spec,
            native: native.to_vec(),
            upsampled: BTreeMap::new(),
        }
    }

    pub fn with_upsampled(mut self, target: usize, from: usize) -> Self {
        self.upsampled.insert(target, from);
        self
    }
}

impl DataSource for SyntheticSource {
    fn channels(&self) -> usize {
        self.spec.channels
    }

    fn resolutions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.native.iter().chain(self.upsampled.keys()).copied().collect();
        v.sort_unstable();
        v
    }

    fn batch(&mut self, r: usize, n: usize, mut rng: &mut dyn RngCore) -> Result<Vec<GridFunction>> {
        (0..n)
            .map(|_| {
                let field = self.spec.draw(&mut rng)?;
                match self.upsampled.get(&r) {
                    Some(&from) => resample(&field.sample(from)?, r, ResampleMethod::Bilinear),
                    None => field.sample(r),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_in_x_varies_along_columns() {
        let g = GridFunction::from_fn(1, 4, |_, x, _| (TAU * x).sin()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.get(0, i, j), (TAU * (j as f64 + 0.5) / 4.0).sin());
            }
        }
    }

    #[test]
    fn area_weights_partition_unity() {
        for (a, b) in [(256, 96), (7, 3), (3, 7), (5, 5)] {
            let w = axis_weights(a, b, ResampleMethod::Area);
            for t in 0..b {
                let s: f64 = w[t * a..(t + 1) * a].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_rng_state_same_function() {
        let spec = SyntheticSpec::new(SyntheticKind::default_for(SyntheticKindName::EdgePlusSmooth), 2, 0);
        let rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_on_grid(&spec, 9, &mut rng.clone()).unwrap();
        let field = spec.draw(&mut rng.clone()).unwrap();
        let b = GridFunction::from_fn(2, 9, |c, x, y| field.eval(c, x, y)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
