//! Closed-form Gaussian checks for the noising process, the score and the sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{
    analytic_score, heun_integrate, kl_noise, kl_noise_with, perturb, sample, CovarianceOperator, DiffusionSchedule,
    GaussianData, GaussianDenoiser, KlBasis,
};
use crate::error::Result;
use crate::grid::GridFunction;

/// One line of the oracle battery.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl OracleCheck {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value < tolerance,
            detail,
        }
    }
}

/// Which drift sign of the time-reversed process transports the terminal law back
/// to the data law, measured on the variance of a single Gaussian coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct SignReport {
    pub target_variance: f64,
    /// Terminal variance with drift `½Y − s(t, Y)`, i.e. `½Y + C∇log p`.
    pub minus_score: f64,
    /// Terminal variance with drift `½Y + s(t, Y)`.
    pub plus_score: f64,
}

impl SignReport {
    pub fn relative_error(&self, v: f64) -> f64 {
        (v / self.target_variance - 1.0).abs()
    }

    /// `true` when the `½Y − s` drift reproduces the data law and the other sign does not.
    pub fn minus_score_is_correct(&self) -> bool {
        self.relative_error(self.minus_score) < 1e-6 && self.relative_error(self.plus_score) > 0.1
    }
}

/// Integrates the variance ODE of the reverse-time process for one mode with data
/// variance `s` and noise eigenvalue `lambda` over `[0, horizon]`.
///
/// Forward: `dX = −½X dt + √λ dW`, so `p(t) = a²s + vλ`. The score operator of
/// the mode is `s(t, y) = λ·y / p(t)`. A reverse drift `½Y + c·s` with diffusion
/// `λ` gives `dV/dτ = (1 + 2cλ/p)V + λ`.
pub fn reverse_sde_sign_check(s: f64, lambda: f64, horizon: f64) -> SignReport {
    let p = |t: f64| {
        let a2 = (-t).exp();
        a2 * s + (1.0 - a2) * lambda
    };
    let run = |c: f64| {
        let steps = 20_000;
        let h = horizon / steps as f64;
        let f = |tau: f64, v: f64| (1.0 + 2.0 * c * lambda / p(horizon - tau)) * v + lambda;
        let mut v = p(horizon);
        for i in 0..steps {
            let tau = i as f64 * h;
            let k1 = f(tau, v);
            let k2 = f(tau + h / 2.0, v + h / 2.0 * k1);
            let k3 = f(tau + h / 2.0, v + h / 2.0 * k2);
            let k4 = f(tau + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    };
    SignReport {
        target_variance: s,
        minus_score: run(-1.0),
        plus_score: run(1.0),
    }
}

/// Probability-flow gain of one coordinate with data variance `s` and unit noise
/// eigenvalue: `x(σ) ∝ √(s + σ²)`.
fn exact_gain(s: f64, sigma0: f64) -> f64 {
    (s / (s + sigma0 * sigma0)).sqrt()
}

/// Heun gain on a one-mode problem, read off by integrating `x = 1` through the sampler.
fn heun_gain(s: f64, steps: usize) -> Result<f64> {
    let c = CovarianceOperator::new(0.0, Some(1))?;
    let basis = KlBasis::new(&c, 1)?;
    let data = GaussianData::new(GridFunction::zeros(1, 1), vec![s])?;
    let schedule = DiffusionSchedule::standard(steps);
    let mut xs = vec![GridFunction::constant(1, 1, 1.0)];
    let mut den = GaussianDenoiser {
        data: &data,
        basis: &basis,
    };
    heun_integrate(&mut xs, &schedule, &mut den)?;
    Ok(xs[0].values()[0])
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub steps: Vec<usize>,
    /// `|ln(gain_heun / gain_exact)|`, the relative error of the terminal standard deviation.
    pub errors: Vec<f64>,
    /// `errors[i] / errors[i + 1]`.
    pub ratios: Vec<f64>,
}

/// Terminal gain error of the Heun integrator for a one-mode Gaussian at each step count.
pub fn heun_convergence(s: f64, steps: &[usize]) -> Result<ConvergenceReport> {
    let sigma0 = DiffusionSchedule::standard(2).sigma_max;
    let exact = exact_gain(s, sigma0);
    let errors = steps
        .iter()
        .map(|&n| Ok((heun_gain(s, n)? / exact).ln().abs()))
        .collect::<Result<Vec<f64>>>()?;
    let ratios = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(ConvergenceReport {
        steps: steps.to_vec(),
        errors,
        ratios,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminalVariance {
    pub steps: usize,
    pub target: f64,
    /// Variance the discretized flow maps the initial law to; differs from
    /// `target` by the integrator's bias only.
    pub discretized_target: f64,
    /// Sample variance of the terminal coordinate.
    pub raw: f64,
    /// Terminal variance rescaled by the ratio of the initial law's variance to its
    /// sample variance; removes the Monte Carlo error shared by input and output.
    pub ratio_estimate: f64,
    pub runs: usize,
}

impl TerminalVariance {
    /// Relative error against the data law.
    pub fn relative_error(&self) -> f64 {
        (self.ratio_estimate / self.target - 1.0).abs()
    }

    /// Relative error against what the discretized flow should produce.
    pub fn discretized_error(&self) -> f64 {
        (self.ratio_estimate / self.discretized_target - 1.0).abs()
    }
}

/// Samples a stationary one-mode target (`s = λ`) at resolution `r` through the
/// full sampler with the exact Gaussian denoiser.
pub fn terminal_variance_check(r: usize, runs: usize, steps: usize, seed: u64) -> Result<TerminalVariance> {
    let c = CovarianceOperator::new(2.0, Some(1))?;
    let basis = KlBasis::new(&c, r)?;
    let data = GaussianData::stationary(&basis);
    let schedule = DiffusionSchedule::standard(steps);
    let sigma0 = schedule.sigmas[0];
    let target = data.variances[0];
    let lambda = basis.modes()[0].eigenvalue;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = rng.clone();
    let mut den = GaussianDenoiser {
        data: &data,
        basis: &basis,
    };
    let run = sample(&mut den, runs, r, 1, &schedule, &c, &mut rng)?;
    // Replay the initial draws from the same stream.
    let init: Vec<f64> = (0..runs)
        .map(|_| Ok(basis.project(kl_noise_with(&basis, 1, &mut init_rng)?.values())[0] * sigma0))
        .collect::<Result<_>>()?;
    let fin: Vec<f64> = run.samples.iter().map(|x| basis.project(x.values())[0]).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let raw = var(&fin);
    let init_law = sigma0 * sigma0 * lambda;
    // The flow only sees s/λ, so the unit-eigenvalue gain applies after rescaling.
    let gain = heun_gain(target / lambda, steps)?;
    Ok(TerminalVariance {
        steps,
        target,
        discretized_target: gain * gain * init_law,
        raw,
        ratio_estimate: raw * init_law / var(&init),
        runs,
    })
}

/// Largest relative error of per-mode KL noise variances against `λ_k`, and the
/// largest normalized off-diagonal covariance.
pub fn kl_spectrum(alpha: f64, n: usize, r: usize, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let c = CovarianceOperator::new(alpha, Some(n))?;
    let basis = KlBasis::new(&c, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cov = vec![0.0; n * n];
    for _ in 0..draws {
        let z = basis.project(kl_noise_with(&basis, 1, &mut rng)?.values());
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += z[i] * z[j];
            }
        }
    }
    let lam: Vec<f64> = basis.modes().iter().map(|m| m.eigenvalue).collect();
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let v = cov[i * n + j] / draws as f64;
            if i == j {
                diag = diag.max((v / lam[i] - 1.0).abs());
            } else {
                off = off.max(v.abs() / (lam[i] * lam[j]).sqrt());
            }
        }
    }
    Ok((diag, off))
}

fn sign_consistency(seed: u64) -> Result<OracleCheck> {
    let c = CovarianceOperator::new(2.0, None)?;
    let r = 8;
    let basis = KlBasis::new(&c, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Data with a spectrum unlike the noise, so the score is not a multiple of x.
    let variances = basis.modes().iter().map(|m| 0.5 * m.eigenvalue.sqrt()).collect();
    let data = GaussianData::new(GridFunction::zeros(1, r), variances)?;
    let mut worst = 0.0f64;
    for &t in &[0.05, 0.3, 1.0, 3.0] {
        for _ in 0..8 {
            let x = GridFunction::new(1, r, (0..r * r).map(|_| rng.sample(StandardNormal)).collect())?;
            let out = analytic_score(&x, t, &data, &basis)?;
            // Recompute −C∇log p from the grid-space gradient.
            let coords = basis.project(out.grad_log_p.values());
            let c_grad: Vec<f64> = coords.iter().zip(basis.modes()).map(|(g, m)| -m.eigenvalue * g).collect();
            let expected = basis.synthesize(&c_grad);
            let gap = out.score.values().iter().zip(&expected).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            worst = worst.max(gap / out.score.l2_norm().max(1.0));
        }
    }
    Ok(OracleCheck::below(
        "score sign consistency",
        worst,
        1e-10,
        "max |s + C∇log p| relative to |s| over 32 draws".into(),
    ))
}

fn white_init_variance(seed: u64) -> Result<OracleCheck> {
    let schedule = DiffusionSchedule::standard(18);
    let sigma0 = schedule.sigmas[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for &r in &[8usize, 16, 32] {
        let draws = 40_000 / (r * r) + 20;
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..draws {
            let x = kl_noise(&CovarianceOperator::WHITE, r, 1, &mut rng)?.scale(sigma0)?;
            acc += x.values().iter().map(|v| v * v).sum::<f64>();
            count += r * r;
        }
        let rel = (acc / count as f64 / (sigma0 * sigma0) - 1.0).abs();
        detail.push_str(&format!("r={r}: {rel:.4} "));
        worst = worst.max(rel);
    }
    Ok(OracleCheck::below("white init per-pixel variance", worst, 0.05, detail))
}

fn stationary_limit(seed: u64) -> Result<OracleCheck> {
    // At large t the marginal forgets x₀: coordinates have mean 0 and variance λ_k.
    let c = CovarianceOperator::new(2.0, Some(8))?;
    let r = 8;
    let basis = KlBasis::new(&c, r)?;
    let x0 = GridFunction::constant(1, r, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 10_000;
    let n = basis.len();
    let mut sum = vec![0.0; n];
    for _ in 0..draws {
        let (xt, _) = perturb(&x0, 50.0, &c, &mut rng)?;
        for (s, z) in sum.iter_mut().zip(basis.project(xt.values())) {
            *s += z;
        }
    }
    let worst = sum
        .iter()
        .zip(basis.modes())
        .map(|(s, m)| (s / draws as f64).abs() / (m.eigenvalue / draws as f64).sqrt())
        .fold(0.0, f64::max);
    Ok(OracleCheck::below(
        "stationary limit mean",
        worst,
        4.0,
        "largest |mean| in standard errors at t=50".into(),
    ))
}

fn variance_interpolation(seed: u64) -> Result<OracleCheck> {
    // At t = ln 2, a = 1/√2 and v = ½: Var = ½s_k + ½λ_k.
    let c = CovarianceOperator::new(2.0, Some(8))?;
    let r = 8;
    let basis = KlBasis::new(&c, r)?;
    let variances: Vec<f64> = basis.modes().iter().map(|m| 2.0 * m.eigenvalue.sqrt()).collect();
    let data = GaussianData::new(GridFunction::zeros(1, r), variances.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 10_000;
    let mut acc = vec![0.0; basis.len()];
    for _ in 0..draws {
        let x0 = data.sample(&basis, &mut rng)?;
        let (xt, _) = perturb(&x0, 2f64.ln(), &c, &mut rng)?;
        for (a, z) in acc.iter_mut().zip(basis.project(xt.values())) {
            *a += z * z;
        }
    }
    let worst = acc
        .iter()
        .zip(&variances)
        .zip(basis.modes())
        .map(|((a, s), m)| (a / draws as f64 / (0.5 * s + 0.5 * m.eigenvalue) - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(OracleCheck::below("variance interpolation at t=ln 2", worst, 0.10, String::new()))
}

fn posterior_recovery(seed: u64) -> Result<OracleCheck> {
    let c = CovarianceOperator::new(2.0, Some(6))?;
    let r = 8;
    let basis = KlBasis::new(&c, r)?;
    let variances: Vec<f64> = basis.modes().iter().map(|m| 0.7 * m.eigenvalue.sqrt()).collect();
    let data = GaussianData::new(GridFunction::zeros(1, r), variances.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = data.sample(&basis, &mut rng)?;
    let z0 = basis.project(x0.values());
    let t = 0.7;
    let (a, v) = ((-t / 2.0f64).exp(), 1.0 - (-t as f64).exp());
    let draws = 4000;
    let n = basis.len();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for _ in 0..draws {
        let (xt, _) = perturb(&x0, t, &c, &mut rng)?;
        let post = analytic_score(&xt, t, &data, &basis)?.posterior_mean;
        for (k, z) in basis.project(post.values()).into_iter().enumerate() {
            sum[k] += z;
            sq[k] += z * z;
        }
    }
    let mut worst = 0.0f64;
    for k in 0..n {
        let (s, lam) = (variances[k], basis.modes()[k].eigenvalue);
        let expected = a * a * s / (a * a * s + v * lam) * z0[k];
        let mean = sum[k] / draws as f64;
        let se = ((sq[k] / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt().max(1e-300);
        worst = worst.max((mean - expected).abs() / se);
    }
    Ok(OracleCheck::below(
        "posterior mean recovers shrunken x0",
        worst,
        3.0,
        "largest deviation in standard errors".into(),
    ))
}

/// The full battery: noise, marginals, score sign, integrator order and terminal law.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut checks = vec![sign_consistency(seed)?];

    let (diag, off) = kl_spectrum(2.0, 16, 8, 10_000, seed ^ 0x11)?;
    checks.push(OracleCheck::below(
        "KL noise spectrum",
        diag,
        0.10,
        format!("max relative variance error over 16 modes; max normalized off-diagonal {off:.4}"),
    ));
    checks.push(OracleCheck::below("KL noise decorrelation", off, 0.05, String::new()));

    checks.push(white_init_variance(seed ^ 0x22)?);
    checks.push(stationary_limit(seed ^ 0x33)?);
    checks.push(variance_interpolation(seed ^ 0x44)?);
    checks.push(posterior_recovery(seed ^ 0x55)?);

    let sign = reverse_sde_sign_check(0.3, 1.0, 8.0);
    checks.push(OracleCheck {
        name: "reverse drift sign".into(),
        value: sign.relative_error(sign.minus_score),
        tolerance: 1e-6,
        passed: sign.minus_score_is_correct(),
        detail: format!(
            "target {:.4}; drift ½Y − s gives {:.6}, ½Y + s gives {:.4}",
            sign.target_variance, sign.minus_score, sign.plus_score
        ),
    });

    let conv = heun_convergence(0.25, &[9, 18, 36])?;
    let off_band = conv.ratios.iter().map(|q| if (3.0..=5.0).contains(q) { 0.0 } else { 1.0 }).sum::<f64>();
    checks.push(OracleCheck {
        name: "Heun second-order convergence".into(),
        value: off_band,
        tolerance: 0.5,
        passed: off_band == 0.0,
        detail: format!("errors {:?}, ratios {:?}", conv.errors, conv.ratios),
    });

    // The 18-step pass carries a discretization bias of several percent in
    // variance, so it is held to the flow it discretizes; the data law itself is
    // checked at a step count where the bias is below the Monte Carlo tolerance.
    let tv = terminal_variance_check(8, 4096, 18, seed ^ 0x66)?;
    checks.push(OracleCheck::below(
        "terminal variance vs discretized flow (18 steps)",
        tv.discretized_error(),
        0.02,
        format!(
            "flow predicts {:.4}, ratio estimate {:.4}; bias against the data law {:.4}",
            tv.discretized_target,
            tv.ratio_estimate,
            tv.relative_error()
        ),
    ));
    let tv = terminal_variance_check(8, 4096, 64, seed ^ 0x77)?;
    checks.push(OracleCheck::below(
        "terminal variance vs data law (64 steps)",
        tv.relative_error(),
        0.02,
        format!(
            "target {:.4}, ratio estimate {:.4}, raw sample variance {:.4} over {} runs",
            tv.target, tv.ratio_estimate, tv.raw, tv.runs
        ),
    ));
    Ok(checks)
}
