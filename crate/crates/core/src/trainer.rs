//! Denoising score matching over resolution mixtures, with optional
//! batch-conditional freezing for fine-tuning at a new resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::grid::{DataSource, GridFunction};
use crate::model::{to_batch, ModelState, Network, SIGMA_DATA};

/// Categorical law over training resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionMixture {
    weights: BTreeMap<usize, f64>,
}

impl ResolutionMixture {
    pub fn new(weights: BTreeMap<usize, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("resolution mixture is empty".into()));
        }
        if let Some((r, w)) = weights.iter().find(|(_, w)| !(**w >= 0.0)) {
            return Err(Error::Config(format!("weight {w} for r={r} is negative")));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(resolutions: &[usize]) -> Result<Self> {
        let set: BTreeSet<usize> = resolutions.iter().copied().collect();
        let w = 1.0 / set.len().max(1) as f64;
        Self::new(set.into_iter().map(|r| (r, w)).collect())
    }

    /// Fixed weights on the two finest resolutions; the remainder decays by
    /// `ratio` per step down the rest, renormalized to `1 − top − second`.
    pub fn weighted(resolutions: &[usize], top: f64, second: f64, ratio: f64) -> Result<Self> {
        let mut res: Vec<usize> = resolutions.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        res.reverse();
        if res.len() < 3 {
            return Err(Error::Config("weighted mixture needs at least three resolutions".into()));
        }
        if !(top >= 0.0 && second >= 0.0 && top + second <= 1.0 && ratio > 0.0) {
            return Err(Error::Config(format!("invalid weighted mixture ({top}, {second}, ratio {ratio})")));
        }
        let rest = 1.0 - top - second;
        let raw: Vec<f64> = (0..res.len() - 2).map(|i| ratio.powi(i as i32)).collect();
        let norm: f64 = raw.iter().sum();
        let mut weights = BTreeMap::from([(res[0], top), (res[1], second)]);
        for (r, w) in res[2..].iter().zip(raw) {
            weights.insert(*r, rest * w / norm);
        }
        // Absorb rounding so the sum is exactly representable as 1.
        let total: f64 = weights.values().sum();
        *weights.get_mut(&res[res.len() - 1]).unwrap() += 1.0 - total;
        Self::new(weights)
    }

    /// `{target: w_target}` plus an even split of the rest over `base`.
    pub fn finetune(target: usize, w_target: f64, base: &[usize]) -> Result<Self> {
        if !(0.0..=1.0).contains(&w_target) {
            return Err(Error::Config(format!("target weight {w_target} outside [0, 1]")));
        }
        let base: BTreeSet<usize> = base.iter().copied().collect();
        if base.contains(&target) {
            return Err(Error::Config(format!("target resolution {target} is already a base resolution")));
        }
        let mut weights: BTreeMap<usize, f64> = base.iter().map(|&r| (r, (1.0 - w_target) / base.len() as f64)).collect();
        weights.insert(target, w_target);
        if base.is_empty() {
            weights.insert(target, 1.0);
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> &BTreeMap<usize, f64> {
        &self.weights
    }

    pub fn weight(&self, r: usize) -> f64 {
        self.weights.get(&r).copied().unwrap_or(0.0)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.weights.keys().copied().collect()
    }

    /// Every resolution must be offered by the data and accepted by the model.
    pub fn validate(&self, model: &ModelState, available: &[usize]) -> Result<()> {
        for &r in self.weights.keys() {
            if !available.contains(&r) {
                return Err(Error::Config(format!("mixture resolution {r} is not in the data ({available:?})")));
            }
            model.check_resolution(r)?;
        }
        Ok(())
    }
}

/// One categorical draw; a whole batch shares the result.
pub fn draw_resolution(mix: &ResolutionMixture, rng: &mut impl RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (&r, &w) in &mix.weights {
        acc += w;
        last = r;
        if u < acc && w > 0.0 {
            return r;
        }
    }
    // Only reachable through rounding at u ≈ 1; fall back to the last positive weight.
    mix.weights.iter().rev().find(|(_, w)| **w > 0.0).map(|(r, _)| *r).unwrap_or(last)
}

/// Log-normal training noise: `ln σ ~ N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaLaw {
    pub mean: f64,
    pub std: f64,
}

impl Default for SigmaLaw {
    fn default() -> Self {
        Self { mean: -1.2, std: 1.2 }
    }
}

impl SigmaLaw {
    pub fn draw(&self, rng: &mut impl RngCore) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean + self.std * z).exp()
    }
}

/// `(σ² + σ_d²) / (σ·σ_d)²`.
pub fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub sigma_law: SigmaLaw,
    pub ema_decay: f64,
    /// Global gradient norm limit; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Draw and log resolutions only, without data or updates.
    #[serde(default)]
    pub dry_run: bool,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 400k steps at batch 256.
    pub fn paper() -> Self {
        Self {
            steps: 400_000,
            batch_size: 256,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sigma_law: SigmaLaw::default(),
            ema_decay: 0.9999,
            grad_clip: None,
            seed: 0,
            dry_run: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            ema_decay: 0.999,
            grad_clip: Some(10.0),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam moments need beta in [0, 1) and eps > 0".into()));
        }
        if !(self.sigma_law.std >= 0.0) {
            return Err(Error::Config("sigma_law.std must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Clean items with their noise levels and noised copies.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub clean: Vec<GridFunction>,
    pub sigmas: Vec<f64>,
    pub noisy: Vec<GridFunction>,
}

pub fn noise_batch(clean: Vec<GridFunction>, law: &SigmaLaw, rng: &mut impl RngCore) -> Result<NoisedBatch> {
    let Some(first) = clean.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let r = first.resolution();
    if let Some(g) = clean.iter().find(|g| g.resolution() != r) {
        return Err(Error::Contract(format!("mixed resolutions {} and {r} in one batch", g.resolution())));
    }
    let mut sigmas = Vec::with_capacity(clean.len());
    let mut noisy = Vec::with_capacity(clean.len());
    for x in &clean {
        let s = law.draw(rng);
        let v = x.values().iter().map(|v| v + s * rng.sample::<f64, _>(StandardNormal)).collect();
        sigmas.push(s);
        noisy.push(GridFunction::new(x.channels(), r, v)?);
    }
    Ok(NoisedBatch { clean, sigmas, noisy })
}

/// Batch mean of `λ(σ)·mean over pixels and channels of (D − x)²`.
pub fn weighted_loss(denoised: &[GridFunction], batch: &NoisedBatch) -> Result<f64> {
    let mut total = 0.0;
    for ((d, x), &s) in denoised.iter().zip(&batch.clean).zip(&batch.sigmas) {
        let n = x.values().len() as f64;
        let se: f64 = d.values().iter().zip(x.values()).map(|(a, b)| (a - b).powi(2)).sum();
        total += loss_weight(s) * se / n;
    }
    Ok(total / batch.clean.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub sigmas: Vec<f64>,
    pub grads: ParamStore<f32>,
}

/// Loss and parameter gradients of the network on one batch.
pub fn dsm_loss(
    net: &mut Network<f32>,
    params: &ParamStore<f32>,
    clean: Vec<GridFunction>,
    law: &SigmaLaw,
    rng: &mut impl RngCore,
) -> Result<LossEval> {
    let batch = noise_batch(clean, law, rng)?;
    let x: Tensor<f32> = to_batch(&batch.noisy)?;
    let target: Tensor<f32> = to_batch(&batch.clean)?;
    let d = net.denoise(params, &x, &batch.sigmas)?;
    let b = batch.sigmas.len();
    let per = d.len() / b;
    let mut seed = Tensor::zeros(d.shape());
    let mut loss = 0.0;
    for (i, &s) in batch.sigmas.iter().enumerate() {
        let w = loss_weight(s);
        let mut se = 0.0;
        for k in i * per..(i + 1) * per {
            let e = (d.data()[k] - target.data()[k]) as f64;
            se += e * e;
            seed.data_mut()[k] = (2.0 * w * e / (b * per) as f64) as f32;
        }
        loss += w * se / per as f64;
    }
    let grads = net.backward(params, &seed)?.params;
    Ok(LossEval {
        loss: loss / b as f64,
        sigmas: batch.sigmas,
        grads,
    })
}

/// Adam moments with a step counter per parameter, so parameters that sit out
/// some steps get their own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: ParamStore<f32> = params.iter().map(|(k, p)| (k.clone(), Tensor::zeros(p.shape()))).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: params.keys().map(|k| (k.clone(), 0)).collect(),
        }
    }

    fn update(&mut self, name: &str, p: &mut Tensor<f32>, g: &Tensor<f32>, scale: f64, cfg: &TrainConfig) {
        let t = self.t.get_mut(name).expect("moment for every parameter");
        *t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(*t as i32);
        let bc2 = 1.0 - b2.powi(*t as i32);
        let step = (cfg.lr / bc1) as f32;
        let (b1, b2, eps, bc2, scale) = (b1 as f32, b2 as f32, cfg.eps as f32, bc2 as f32, scale as f32);
        let m = self.m.get_mut(name).unwrap().data_mut();
        let v = self.v.get_mut(name).unwrap().data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * scale;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= step * *mi / ((*vi / bc2).sqrt() + eps);
        }
    }
}

/// Live weights, averaged weights and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub ema: ParamStore<f32>,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: ModelState) -> Self {
        Self {
            ema: model.params.clone(),
            adam: Adam::new(&model.params),
            model,
            step: 0,
        }
    }

    /// The averaged weights as a model.
    pub fn ema_model(&self) -> ModelState {
        ModelState {
            params: self.ema.clone(),
            ..self.model.clone()
        }
    }
}

/// Parameters frozen only on batches drawn at one resolution, on top of the
/// model's static mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionalFreeze {
    pub resolution: Option<usize>,
    pub params: BTreeSet<String>,
}

/// Per-step evidence about the conditional freeze set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    /// The conditional set was in force on this step.
    pub active: bool,
    /// Every parameter of the set is bitwise unchanged by the step.
    pub unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub resolution: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<FreezeAudit>,
}

/// Independent streams for resolution draws, data and noise, so a dry run
/// reproduces the resolution sequence of the real run with the same seed.
/// Every step starts at its own block of each stream, so a resumed run draws
/// exactly what an uninterrupted one would.
struct Streams {
    mix: ChaCha8Rng,
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Self {
            mix: mk(1),
            data: mk(2),
            noise: mk(3),
        }
    }

    fn seek(&mut self, step: u64) {
        let pos = (step as u128) << 36;
        for r in [&mut self.mix, &mut self.data, &mut self.noise] {
            r.set_word_pos(pos);
        }
    }
}

fn param_norm(p: &ParamStore<f32>) -> f64 {
    p.values().map(|t| t.sq_norm()).sum::<f64>().sqrt()
}

/// Runs `cfg.steps` updates. `log` receives one record per step.
pub fn train(
    state: &mut TrainState,
    source: &mut dyn DataSource,
    mix: &ResolutionMixture,
    cfg: &TrainConfig,
    cond: &ConditionalFreeze,
    log: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    mix.validate(&state.model, &source.resolutions())?;
    if source.channels() != state.model.spec.data_channels {
        return Err(Error::Config(format!(
            "data has {} channels, model expects {}",
            source.channels(),
            state.model.spec.data_channels
        )));
    }
    if let Some(p) = cond.params.iter().find(|p| !state.model.params.contains_key(*p)) {
        return Err(Error::Config(format!("freeze set names unknown parameter `{p}`")));
    }
    let mut streams = Streams::new(cfg.seed);
    let mut net = Network::<f32>::new(&state.model.spec);
    let t0 = Instant::now();
    for _ in 0..cfg.steps {
        let step = state.step + 1;
        streams.seek(step);
        let r = draw_resolution(mix, &mut streams.mix);
        if cfg.dry_run {
            state.step = step;
            log(&MetricRecord {
                step,
                resolution: r,
                loss: None,
                lr: cfg.lr,
                grad_norm: None,
                wall_time: t0.elapsed().as_secs_f64(),
                freeze: None,
            })?;
            continue;
        }
        let clean = source.batch(r, cfg.batch_size, &mut streams.data)?;
        let eval = dsm_loss(&mut net, &state.model.params, clean, &cfg.sigma_law, &mut streams.noise)?;
        let cond_active = cond.resolution == Some(r);
        let frozen = |name: &str| state.model.is_frozen(name) || (cond_active && cond.params.contains(name));
        let sq: f64 = eval.grads.iter().filter(|(k, _)| !frozen(k)).map(|(_, g)| g.sq_norm()).sum();
        let grad_norm = sq.sqrt();
        if !eval.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "step {step} at r={r}: loss {}, gradient norm {grad_norm}, parameter norm {:.4e}, sigmas {:?}",
                eval.loss,
                param_norm(&state.model.params),
                eval.sigmas
            )));
        }
        let scale = match cfg.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let before: Vec<(String, Tensor<f32>)> = if cond.params.is_empty() {
            Vec::new()
        } else {
            cond.params.iter().map(|k| (k.clone(), state.model.params[k].clone())).collect()
        };
        let names: Vec<String> = state.model.params.keys().filter(|k| !frozen(k)).cloned().collect();
        for name in &names {
            let p = state.model.params.get_mut(name).unwrap();
            state.adam.update(name, p, &eval.grads[name], scale, cfg);
            // Averaged copies only move when the live weights do.
            let e = state.ema.get_mut(name).unwrap();
            if cfg.ema_decay == 0.0 {
                *e = p.clone();
            } else {
                let d = cfg.ema_decay as f32;
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
        state.step = step;
        let freeze = (!before.is_empty()).then(|| FreezeAudit {
            active: cond_active,
            unchanged: before.iter().all(|(k, v)| bit_equal(v, &state.model.params[k])),
        });
        log(&MetricRecord {
            step,
            resolution: r,
            loss: Some(eval.loss),
            lr: cfg.lr,
            grad_norm: Some(grad_norm),
            wall_time: t0.elapsed().as_secs_f64(),
            freeze,
        })?;
    }
    Ok(())
}

pub fn bit_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub target_resolution: usize,
    pub target_weight: f64,
    /// Resolutions of the pre-training mixture; share `1 − target_weight` evenly.
    pub base_resolutions: Vec<usize>,
    /// Freeze spatial kernels outside these levels.
    pub except_levels: BTreeSet<usize>,
    /// Freeze only on batches at the target resolution instead of always.
    pub batch_conditional: bool,
    pub train: TrainConfig,
}

impl FinetuneConfig {
    /// `w_R = 0.2`, lr `1e-4`, 10k steps, spatial kernels frozen except the bottom level.
    pub fn paper(target: usize, base: &[usize], levels: usize) -> Self {
        Self {
            target_resolution: target,
            target_weight: 0.2,
            base_resolutions: base.to_vec(),
            except_levels: BTreeSet::from([levels.saturating_sub(1)]),
            batch_conditional: true,
            train: TrainConfig {
                steps: 10_000,
                lr: 1e-4,
                ..TrainConfig::paper()
            },
        }
    }

    pub fn mixture(&self) -> Result<ResolutionMixture> {
        ResolutionMixture::finetune(self.target_resolution, self.target_weight, &self.base_resolutions)
    }
}

/// Continues training `start` (typically the pretrained averaged weights) on
/// the fine-tuning mixture. Fresh optimizer moments; the static freeze mask of
/// `start` stays in force.
pub fn finetune(
    start: ModelState,
    source: &mut dyn DataSource,
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainState> {
    let top = cfg.base_resolutions.iter().copied().max().unwrap_or(0);
    if cfg.target_resolution <= top {
        return Err(Error::Config(format!(
            "fine-tuning target {} must exceed the finest pre-training resolution {top}",
            cfg.target_resolution
        )));
    }
    start.check_resolution(cfg.target_resolution)?;
    let mix = cfg.mixture()?;
    let mut model = start;
    let spatial = model.clone().freeze_spatial(&cfg.except_levels)?;
    let frozen_set: BTreeSet<String> = spatial.frozen.iter().filter(|(k, v)| **v && !model.is_frozen(k)).map(|(k, _)| k.clone()).collect();
    let cond = if cfg.batch_conditional {
        ConditionalFreeze {
            resolution: Some(cfg.target_resolution),
            params: frozen_set,
        }
    } else {
        model = spatial;
        ConditionalFreeze::default()
    };
    let mut state = TrainState::new(model);
    train(&mut state, source, &mix, &cfg.train, &cond, log)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_mixture_matches_the_decay_allocation() {
        let m = ResolutionMixture::weighted(&[32, 48, 64, 80, 96], 0.4, 0.3, 0.5).unwrap();
        let w = m.weights();
        assert_eq!(w[&96], 0.4);
        assert_eq!(w[&80], 0.3);
        // 0.3 split as 4:2:1.
        assert!((w[&64] - 0.3 * 4.0 / 7.0).abs() < 1e-12);
        assert!((w[&48] - 0.3 * 2.0 / 7.0).abs() < 1e-12);
        assert!((w[&32] - 0.3 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_entry_mixture_always_draws_it() {
        let m = ResolutionMixture::uniform(&[24]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| draw_resolution(&m, &mut rng) == 24));
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        assert!(ResolutionMixture::new(BTreeMap::new()).is_err());
        assert!(ResolutionMixture::new(BTreeMap::from([(16, 0.5), (32, 0.4)])).is_err());
        assert!(ResolutionMixture::new(BTreeMap::from([(16, 1.5), (32, -0.5)])).is_err());
        assert!(ResolutionMixture::finetune(32, 1.2, &[16]).is_err());
    }

    #[test]
    fn finetune_mixture_splits_the_rest_evenly() {
        let m = ResolutionMixture::finetune(128, 0.2, &[32, 48, 64, 80, 96]).unwrap();
        assert_eq!(m.weight(128), 0.2);
        for r in [32, 48, 64, 80, 96] {
            assert!((m.weight(r) - 0.16).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_weight_is_inverse_target_variance() {
        // λ(σ) is the reciprocal of the c_out² factor.
        for s in [0.01, 0.5, 3.0] {
            let c_out = s * SIGMA_DATA / (s * s + SIGMA_DATA * SIGMA_DATA).sqrt();
            assert!((loss_weight(s) * c_out * c_out - 1.0).abs() < 1e-12);
        }
    }
}
