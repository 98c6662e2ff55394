//! Forward noising, Gaussian score oracles, Karhunen–Loève noise and the
//! deterministic second-order sampler.
//!
//! Two frames are used. The variance-preserving frame has
//! `x_t = a·x₀ + √v·ξ` with `a = e^{−t/2}`, `v = 1 − e^{−t}`; the variance-exploding
//! frame has `x = x₀ + σ·ξ`. They are related by `σ² = v / a²` and `x_t = a·x`.

mod oracle;

use std::collections::HashMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::model::{from_batch, to_batch, ModelState, Network};

pub use oracle::{
    heun_convergence, oracle_suite, reverse_sde_sign_check, terminal_variance_check, ConvergenceReport, OracleCheck,
    SignReport, TerminalVariance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Cos,
    Sin,
}

/// One real Fourier eigenvector on the cell-centered grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisMode {
    /// Signed frequencies along (x, y) with `|mᵢ| ≤ r/2`.
    pub m: (i64, i64),
    pub part: Part,
    pub eigenvalue: f64,
}

/// Covariance `C` with eigenvalues `(1 + |m|²)^(−alpha)` on the Fourier basis,
/// optionally truncated to the `n` largest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceOperator {
    pub alpha: f64,
    pub truncation: Option<usize>,
}

impl CovarianceOperator {
    pub const WHITE: CovarianceOperator = CovarianceOperator {
        alpha: 0.0,
        truncation: None,
    };

    pub fn new(alpha: f64, truncation: Option<usize>) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("eigenvalue decay must be nonnegative, got {alpha}")));
        }
        Ok(Self { alpha, truncation })
    }

    pub fn is_white(&self) -> bool {
        self.alpha == 0.0 && self.truncation.is_none()
    }

    /// Trace-class in the continuum limit.
    pub fn is_trace_class(&self) -> bool {
        self.alpha > 1.0 || self.truncation.is_some()
    }

    pub fn eigenvalue(&self, m: (i64, i64)) -> f64 {
        (1.0 + (m.0 * m.0 + m.1 * m.1) as f64).powf(-self.alpha)
    }
}

/// Orthonormal real Fourier basis of `ℝ^{r×r}` sorted by nonincreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct KlBasis {
    r: usize,
    modes: Vec<BasisMode>,
    /// Row `k` holds eigenvector `k`.
    vectors: Vec<f64>,
}

fn signed(k: usize, r: usize) -> i64 {
    if 2 * k > r {
        k as i64 - r as i64
    } else {
        k as i64
    }
}

impl KlBasis {
    pub fn new(c: &CovarianceOperator, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Contract("resolution must be positive".into()));
        }
        let nodes: Vec<f64> = (0..r).map(|i| (i as f64 + 0.5) / r as f64).collect();
        let raw = |m: (i64, i64), part: Part| -> Vec<f64> {
            let mut v = Vec::with_capacity(r * r);
            for &y in &nodes {
                for &x in &nodes {
                    let ph = std::f64::consts::TAU * (m.0 as f64 * x + m.1 as f64 * y);
                    v.push(if part == Part::Cos { ph.cos() } else { ph.sin() });
                }
            }
            v
        };
        let mut found: Vec<(BasisMode, Vec<f64>)> = Vec::with_capacity(r * r);
        for a in 0..r {
            for b in 0..r {
                let (na, nb) = ((r - a) % r, (r - b) % r);
                // Keep one representative per {m, −m} class.
                if (na, nb) < (a, b) {
                    continue;
                }
                let m = (signed(a, r), signed(b, r));
                let eigenvalue = c.eigenvalue(m);
                for part in [Part::Cos, Part::Sin] {
                    let v = raw(m, part);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    // Self-conjugate classes have one vanishing part.
                    if norm < 1e-6 {
                        continue;
                    }
                    found.push((BasisMode { m, part, eigenvalue }, v.into_iter().map(|x| x / norm).collect()));
                }
            }
        }
        debug_assert_eq!(found.len(), r * r);
        found.sort_by(|(p, _), (q, _)| {
            q.eigenvalue
                .total_cmp(&p.eigenvalue)
                .then((p.m.0 * p.m.0 + p.m.1 * p.m.1).cmp(&(q.m.0 * q.m.0 + q.m.1 * q.m.1)))
                .then(p.m.cmp(&q.m))
                .then(p.part.cmp(&q.part))
        });
        let n = match c.truncation {
            None => r * r,
            Some(n) if n <= r * r => n,
            Some(n) => {
                return Err(Error::Truncation {
                    requested: n,
                    available: r * r,
                    resolution: r,
                })
            }
        };
        found.truncate(n);
        let mut modes = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * r * r);
        for (m, v) in found {
            modes.push(m);
            vectors.extend(v);
        }
        Ok(Self { r, modes, vectors })
    }

    pub fn resolution(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[BasisMode] {
        &self.modes
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        let n = self.r * self.r;
        &self.vectors[k * n..(k + 1) * n]
    }

    /// Coordinates `⟨x, e_k⟩` of one plane.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|k| self.vector(k).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Σ_k coeffs[k]·e_k`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.r * self.r];
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                for (o, v) in out.iter_mut().zip(self.vector(k)) {
                    *o += c * v;
                }
            }
        }
        out
    }
}

/// `Σ_{k≤n} √λ_k ξ_k e_k` per channel.
pub fn kl_noise(c: &CovarianceOperator, r: usize, channels: usize, rng: &mut impl RngCore) -> Result<GridFunction> {
    if c.is_white() {
        let values = (0..channels * r * r).map(|_| rng.sample(StandardNormal)).collect();
        return GridFunction::new(channels, r, values);
    }
    let basis = KlBasis::new(c, r)?;
    kl_noise_with(&basis, channels, rng)
}

pub fn kl_noise_with(basis: &KlBasis, channels: usize, rng: &mut impl RngCore) -> Result<GridFunction> {
    let mut values = Vec::with_capacity(channels * basis.r * basis.r);
    for _ in 0..channels {
        let coeffs: Vec<f64> = basis
            .modes
            .iter()
            .map(|m| m.eigenvalue.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        values.extend(basis.synthesize(&coeffs));
    }
    GridFunction::new(channels, basis.r, values)
}

/// Exact marginal `x_t = e^{−t/2}x₀ + √(1−e^{−t})·C^{1/2}ξ`; returns `(x_t, C^{1/2}ξ)`.
pub fn perturb(
    x0: &GridFunction,
    t: f64,
    c: &CovarianceOperator,
    rng: &mut impl RngCore,
) -> Result<(GridFunction, GridFunction)> {
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("diffusion time must be nonnegative, got {t}")));
    }
    let noise = kl_noise(c, x0.resolution(), x0.channels(), rng)?;
    if t == 0.0 {
        return Ok((x0.clone(), noise));
    }
    let a = (-t / 2.0).exp();
    let xt = x0.scale(a)?.axpy((1.0 - (-t).exp()).sqrt(), &noise)?;
    Ok((xt, noise))
}

/// VE noise level equivalent to VP time `t`.
pub fn sigma_of_time(t: f64) -> f64 {
    ((1.0 - (-t).exp()) / (-t).exp()).sqrt()
}

pub fn time_of_sigma(sigma: f64) -> f64 {
    (1.0 + sigma * sigma).ln()
}

/// Gaussian law with a mean function and covariance diagonal in a [`KlBasis`].
#[derive(Debug, Clone)]
pub struct GaussianData {
    pub mean: GridFunction,
    /// Variances `s_k` of the coordinates, aligned with the basis order.
    pub variances: Vec<f64>,
}

impl GaussianData {
    pub fn new(mean: GridFunction, variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Contract("data variances must be nonnegative".into()));
        }
        if mean.channels() != 1 {
            return Err(Error::Contract("Gaussian oracle data is single-channel".into()));
        }
        Ok(Self { mean, variances })
    }

    /// `s_k = λ_k` for every basis vector.
    pub fn stationary(basis: &KlBasis) -> Self {
        Self {
            mean: GridFunction::zeros(1, basis.r),
            variances: basis.modes.iter().map(|m| m.eigenvalue).collect(),
        }
    }

    /// Variances of the grid samples of a synthetic Gaussian-process draw.
    pub fn from_spectrum(spectrum: &crate::grid::FieldSpectrum, basis: &KlBasis) -> Self {
        let r2 = (basis.r * basis.r) as f64;
        let variances = basis
            .modes
            .iter()
            .map(|m| {
                let v = spectrum.variance(m.m);
                // A self-conjugate pair (DC, Nyquist) carries the full coefficient in one vector.
                r2 * v
            })
            .collect();
        Self {
            mean: GridFunction::zeros(1, basis.r),
            variances,
        }
    }

    pub fn sample(&self, basis: &KlBasis, rng: &mut impl RngCore) -> Result<GridFunction> {
        let coeffs: Vec<f64> = self.variances.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let v = basis.synthesize(&coeffs);
        GridFunction::new(1, basis.r, v)?.add(&self.mean)
    }
}

/// Results of the closed-form Gaussian conditioning in the VP frame.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    /// `(x − a·E[X₀|x]) / v`.
    pub score: GridFunction,
    pub grad_log_p: GridFunction,
    pub posterior_mean: GridFunction,
}

/// Per-mode Gaussian conditioning at VP time `t`. Panics if the score operator
/// and `−C∇log p_t` disagree beyond `1e-10` relative.
pub fn analytic_score(x: &GridFunction, t: f64, data: &GaussianData, basis: &KlBasis) -> Result<AnalyticScore> {
    if !(t > 0.0) {
        return Err(Error::Singular(format!("score needs t > 0 (1 − e^(−t) vanishes at t = {t})")));
    }
    check_plane(x, basis)?;
    let (a, v) = ((-t / 2.0).exp(), 1.0 - (-t).exp());
    let am = data.mean.scale(a)?;
    let dev = basis.project(x.sub(&am)?.values());
    let mut post = Vec::with_capacity(dev.len());
    let mut grad = Vec::with_capacity(dev.len());
    for ((d, s), m) in dev.iter().zip(&data.variances).zip(&basis.modes) {
        let denom = a * a * s + v * m.eigenvalue;
        if denom > 0.0 {
            post.push(a * s * d / denom);
            grad.push(-d / denom);
        } else {
            post.push(0.0);
            grad.push(0.0);
        }
    }
    let posterior_mean = GridFunction::new(1, basis.r, basis.synthesize(&post))?.add(&data.mean)?;
    let grad_log_p = GridFunction::new(1, basis.r, basis.synthesize(&grad))?;
    let score = x.axpy(-a, &posterior_mean)?.scale(1.0 / v)?;
    // s = −C∇log p, computed independently from the gradient coordinates.
    let c_grad: Vec<f64> = grad.iter().zip(&basis.modes).map(|(g, m)| -m.eigenvalue * g).collect();
    let expected = basis.synthesize(&c_grad);
    let scale = score.l2_norm().max(1e-300);
    let gap = score.values().iter().zip(&expected).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    assert!(gap <= 1e-10 * scale.max(1.0), "score operator disagrees with −C∇log p: gap {gap:e}");
    Ok(AnalyticScore {
        score,
        grad_log_p,
        posterior_mean,
    })
}

fn check_plane(x: &GridFunction, basis: &KlBasis) -> Result<()> {
    if x.channels() != 1 || x.resolution() != basis.r {
        return Err(Error::Contract(format!(
            "expected a single-channel r={} function, got {}ch@{}",
            basis.r,
            x.channels(),
            x.resolution()
        )));
    }
    Ok(())
}

/// `(D − x)/σ²`.
pub fn score_from_denoiser(x: &GridFunction, sigma: f64, denoised: &GridFunction) -> Result<GridFunction> {
    if !(sigma > 0.0) {
        return Err(Error::Singular(format!("noise level must be positive, got {sigma}")));
    }
    denoised.sub(x)?.scale(1.0 / (sigma * sigma))
}

/// VE-frame Gaussian oracle with noise covariance `σ²C`: returns `(E[X₀|x], ∇log p_σ(x))`.
pub fn ve_posterior(
    x: &GridFunction,
    sigma: f64,
    data: &GaussianData,
    basis: &KlBasis,
) -> Result<(GridFunction, GridFunction)> {
    check_plane(x, basis)?;
    let dev = basis.project(x.sub(&data.mean)?.values());
    let s2 = sigma * sigma;
    let mut post = Vec::with_capacity(dev.len());
    let mut grad = Vec::with_capacity(dev.len());
    for ((d, s), m) in dev.iter().zip(&data.variances).zip(&basis.modes) {
        let denom = s + s2 * m.eigenvalue;
        if denom > 0.0 {
            post.push(s * d / denom);
            grad.push(-d / denom);
        } else {
            post.push(0.0);
            grad.push(0.0);
        }
    }
    let mean = GridFunction::new(1, basis.r, basis.synthesize(&post))?.add(&data.mean)?;
    Ok((mean, GridFunction::new(1, basis.r, basis.synthesize(&grad))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// `σ₀ > … > σ_{N−1} > σ_N = 0`.
    pub sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps == 0 || !(sigma_min > 0.0) || !(sigma_max > sigma_min) || !(rho > 0.0) {
            return Err(Error::Config(format!(
                "invalid schedule: steps={steps}, sigma_min={sigma_min}, sigma_max={sigma_max}, rho={rho}"
            )));
        }
        let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
        let mut sigmas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                (hi + f * (lo - hi)).powf(rho)
            })
            .collect();
        sigmas.push(0.0);
        Ok(Self {
            sigmas,
            sigma_min,
            sigma_max,
            rho,
        })
    }

    /// `σ_min = 0.002`, `σ_max = 80`, `ρ = 7`.
    pub fn standard(steps: usize) -> Self {
        Self::new(steps, 0.002, 80.0, 7.0).expect("standard schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// Denoiser evaluations of one Heun pass.
    pub fn evaluations(&self) -> usize {
        2 * self.steps() - 1
    }
}

/// Batched denoiser `D(x; σ)` on grid functions.
pub trait Denoiser {
    fn denoise_batch(&mut self, xs: &[GridFunction], sigma: f64) -> Result<Vec<GridFunction>>;
}

/// Exact posterior mean for Gaussian data under VE noise with covariance `σ²C`.
pub struct GaussianDenoiser<'a> {
    pub data: &'a GaussianData,
    pub basis: &'a KlBasis,
}

impl Denoiser for GaussianDenoiser<'_> {
    fn denoise_batch(&mut self, xs: &[GridFunction], sigma: f64) -> Result<Vec<GridFunction>> {
        xs.iter().map(|x| ve_posterior(x, sigma, self.data, self.basis).map(|p| p.0)).collect()
    }
}

/// A trained network as a denoiser, with a per-resolution graph cache.
pub struct ModelDenoiser<'a> {
    state: &'a ModelState,
    params: &'a crate::engine::ParamStore<f32>,
    net: Network<f32>,
}

impl<'a> ModelDenoiser<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Self::with_params(state, &state.params)
    }

    /// Uses `params` (for instance an averaged copy) in place of the live weights.
    pub fn with_params(state: &'a ModelState, params: &'a crate::engine::ParamStore<f32>) -> Self {
        Self {
            state,
            params,
            net: Network::new(&state.spec),
        }
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn denoise_batch(&mut self, xs: &[GridFunction], sigma: f64) -> Result<Vec<GridFunction>> {
        if let Some(x) = xs.first() {
            self.state.check_resolution(x.resolution())?;
        }
        let batch = to_batch::<f32>(xs)?;
        let out = self.net.denoise(self.params, &batch, &vec![sigma; xs.len()])?;
        from_batch(&out)
    }
}

/// Heun integration of `dx/dσ = (x − D(x;σ))/σ` from `x` at `σ₀` down to `σ_N = 0`.
/// Returns the number of denoiser evaluations.
pub fn heun_integrate(
    xs: &mut [GridFunction],
    schedule: &DiffusionSchedule,
    denoiser: &mut dyn Denoiser,
) -> Result<usize> {
    let mut evals = 0;
    let n = schedule.steps();
    for i in 0..n {
        let (s, s_next) = (schedule.sigmas[i], schedule.sigmas[i + 1]);
        let d0 = denoiser.denoise_batch(xs, s)?;
        evals += 1;
        let slope: Vec<GridFunction> = xs.iter().zip(&d0).map(|(x, d)| x.sub(d)?.scale(1.0 / s)).collect::<Result<_>>()?;
        let euler: Vec<GridFunction> =
            xs.iter().zip(&slope).map(|(x, k)| x.axpy(s_next - s, k)).collect::<Result<_>>()?;
        if s_next == 0.0 {
            xs.clone_from_slice(&euler);
            continue;
        }
        let d1 = denoiser.denoise_batch(&euler, s_next)?;
        evals += 1;
        for ((x, k0), (e, d)) in xs.iter_mut().zip(&slope).zip(euler.iter().zip(&d1)) {
            let k1 = e.sub(d)?.scale(1.0 / s_next)?;
            *x = x.axpy(0.5 * (s_next - s), &k0.add(&k1)?)?;
        }
    }
    Ok(evals)
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Vec<GridFunction>,
    pub evaluations: usize,
}

/// Draws `count` samples at resolution `r`: `x ← σ₀·C^{1/2}ξ`, then Heun integration.
pub fn sample(
    denoiser: &mut dyn Denoiser,
    count: usize,
    r: usize,
    channels: usize,
    schedule: &DiffusionSchedule,
    c: &CovarianceOperator,
    rng: &mut impl RngCore,
) -> Result<SampleRun> {
    let basis = if c.is_white() { None } else { Some(KlBasis::new(c, r)?) };
    let mut xs = Vec::with_capacity(count);
    for _ in 0..count {
        let noise = match &basis {
            None => kl_noise(c, r, channels, rng)?,
            Some(b) => kl_noise_with(b, channels, rng)?,
        };
        xs.push(noise.scale(schedule.sigmas[0])?);
    }
    if count == 0 {
        return Ok(SampleRun {
            samples: xs,
            evaluations: 0,
        });
    }
    let evaluations = heun_integrate(&mut xs, schedule, denoiser)?;
    Ok(SampleRun {
        samples: xs,
        evaluations,
    })
}

/// Cache of KL bases keyed by resolution.
#[derive(Debug, Default)]
pub struct BasisCache {
    c: Option<CovarianceOperator>,
    bases: HashMap<usize, KlBasis>,
}

impl BasisCache {
    pub fn new(c: CovarianceOperator) -> Self {
        Self {
            c: Some(c),
            bases: HashMap::new(),
        }
    }

    pub fn get(&mut self, r: usize) -> Result<&KlBasis> {
        if !self.bases.contains_key(&r) {
            let c = self.c.ok_or_else(|| Error::Contract("basis cache without covariance".into()))?;
            self.bases.insert(r, KlBasis::new(&c, r)?);
        }
        Ok(&self.bases[&r])
    }
}
