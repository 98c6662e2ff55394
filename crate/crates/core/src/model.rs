//! UNet denoisers built from dual convolutions, plus the baseline variants, with
//! noise-level preconditioning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dualconv::{dual_conv_node, init_spatial, init_spectral};
use crate::engine::{grad_check, GradCheckReport, Gradients, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::spectral::min_resolution;

/// Standard deviation of the data assumed by the preconditioning.
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Dfu,
    FnoUnet,
    MultiresUnet,
    SingleresUnet,
}

impl Arch {
    pub fn has_spectral(self) -> bool {
        matches!(self, Arch::Dfu | Arch::FnoUnet)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfu" => Ok(Arch::Dfu),
            "fno-unet" => Ok(Arch::FnoUnet),
            "multires-unet" => Ok(Arch::MultiresUnet),
            "singleres-unet" => Ok(Arch::SingleresUnet),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Dfu => "dfu",
            Arch::FnoUnet => "fno-unet",
            Arch::MultiresUnet => "multires-unet",
            Arch::SingleresUnet => "singleres-unet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub spatial_k: usize,
    /// Mode cutoff at the top level; halved at each level below.
    pub modes: usize,
    pub emb_dim: usize,
    #[serde(default = "one")]
    pub data_channels: usize,
    /// Training resolution of a single-resolution baseline.
    #[serde(default)]
    pub train_resolution: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelSpec {
    pub fn paper() -> Self {
        Self {
            arch: Arch::Dfu,
            levels: 4,
            blocks_per_level: 4,
            base_channels: 64,
            channel_mult: vec![1, 2, 2, 2],
            spatial_k: 3,
            modes: 16,
            emb_dim: 256,
            data_channels: 3,
            train_resolution: None,
        }
    }

    pub fn desk() -> Self {
        Self {
            arch: Arch::Dfu,
            levels: 3,
            blocks_per_level: 1,
            base_channels: 16,
            channel_mult: vec![1, 2, 2],
            spatial_k: 3,
            modes: 8,
            emb_dim: 64,
            data_channels: 1,
            train_resolution: None,
        }
    }

    /// Same layout with another architecture; baselines adjust kernel size as required.
    pub fn with_arch(&self, arch: Arch) -> Self {
        let mut s = self.clone();
        s.arch = arch;
        if arch == Arch::FnoUnet {
            s.spatial_k = 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.blocks_per_level == 0 || self.base_channels == 0 || self.emb_dim == 0 {
            return bad("levels, blocks_per_level, base_channels and emb_dim must be positive".into());
        }
        if self.data_channels == 0 {
            return bad("data_channels must be positive".into());
        }
        if self.channel_mult.len() != self.levels || self.channel_mult.contains(&0) {
            return bad(format!(
                "channel_mult needs {} positive entries, got {:?}",
                self.levels, self.channel_mult
            ));
        }
        if self.spatial_k % 2 == 0 {
            return bad(format!("spatial_k must be odd, got {}", self.spatial_k));
        }
        if self.arch == Arch::FnoUnet && self.spatial_k != 1 {
            return bad("fno-unet requires spatial_k = 1".into());
        }
        if self.arch.has_spectral() && (self.modes >> (self.levels - 1)) == 0 {
            return bad(format!(
                "mode cutoff {} cannot be halved across {} levels",
                self.modes, self.levels
            ));
        }
        match (self.arch, self.train_resolution) {
            (Arch::SingleresUnet, None) => return bad("singleres-unet needs train_resolution".into()),
            (Arch::SingleresUnet, Some(_)) | (_, None) => {}
            (_, Some(_)) => return bad("train_resolution applies only to singleres-unet".into()),
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Mode cutoff at `level`, or `None` without a spectral branch.
    pub fn level_modes(&self, level: usize) -> Option<usize> {
        self.arch.has_spectral().then(|| self.modes >> level)
    }

    fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn min_admissible(&self) -> usize {
        let d = self.divisor();
        let mut r = d;
        while !self.fits(r) {
            r += d;
        }
        r
    }

    fn fits(&self, r: usize) -> bool {
        r % self.divisor() == 0
            && (0..self.levels).all(|l| self.level_modes(l).is_none_or(|m| (r >> l) >= min_resolution(m)))
    }

    pub fn is_admissible(&self, r: usize) -> bool {
        r > 0 && self.fits(r) && self.train_resolution.is_none_or(|t| t == r)
    }

    /// Human-readable description of the admissible set.
    pub fn admissible_description(&self) -> String {
        if let Some(t) = self.train_resolution {
            return format!("{t} (single-resolution model)");
        }
        let (m, d) = (self.min_admissible(), self.divisor());
        let list: Vec<String> = (0..6).map(|i| (m + i * d).to_string()).collect();
        format!("{}, ... (multiples of {d} from {m})", list.join(", "))
    }

    pub fn check_resolution(&self, r: usize) -> Result<()> {
        if self.is_admissible(r) {
            return Ok(());
        }
        let reason = if let Some(t) = self.train_resolution.filter(|&t| t != r) {
            format!("single-resolution model was built for {t}")
        } else if r % self.divisor() != 0 {
            format!("not divisible by 2^(levels-1) = {}", self.divisor())
        } else {
            let l = (0..self.levels)
                .find(|&l| self.level_modes(l).is_some_and(|m| (r >> l) < min_resolution(m)))
                .unwrap_or(0);
            format!(
                "level {l} would run at {} but its {} modes need at least {}",
                r >> l,
                self.level_modes(l).unwrap_or(0),
                self.level_modes(l).map(min_resolution).unwrap_or(0)
            )
        };
        Err(Error::InadmissibleResolution {
            resolution: r,
            reason,
            admissible: self.admissible_description(),
        })
    }

    /// Level of a parameter from its name; stem and head belong to level 0.
    pub fn param_level(name: &str) -> Option<usize> {
        let mut parts = name.split('.');
        match parts.next()? {
            "enc" | "dec" => parts.next()?.parse().ok(),
            "stem" | "head" => Some(0),
            _ => None,
        }
    }
}

/// Largest group count not above 8 that divides `c`.
pub fn group_count(c: usize) -> usize {
    (1..=8).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Parameters, freeze mask and architecture of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub frozen: BTreeMap<String, bool>,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.get(name).copied().unwrap_or(false)
    }

    /// Freezes every spatial kernel with `k > 1` outside `except_levels`.
    pub fn freeze_spatial(mut self, except_levels: &BTreeSet<usize>) -> Result<Self> {
        if self.spec.arch != Arch::Dfu {
            return Err(Error::Config(format!("spatial freezing applies to dfu models, not {}", self.spec.arch)));
        }
        if let Some(&l) = except_levels.iter().find(|&&l| l >= self.spec.levels) {
            return Err(Error::Config(format!("level {l} out of range for {} levels", self.spec.levels)));
        }
        for name in spatial_kernel_names(&self.params) {
            let level = ModelSpec::param_level(&name).unwrap_or(0);
            self.frozen.insert(name, !except_levels.contains(&level));
        }
        Ok(self)
    }

    pub fn freeze_all(mut self) -> Self {
        for v in self.frozen.values_mut() {
            *v = true;
        }
        self
    }

    pub fn check_resolution(&self, r: usize) -> Result<()> {
        self.spec.check_resolution(r)
    }
}

/// Names of spatial kernels wider than one pixel.
pub fn spatial_kernel_names<T: Scalar>(params: &ParamStore<T>) -> Vec<String> {
    params
        .iter()
        .filter(|(n, t)| n.ends_with(".spatial") && t.shape().len() == 4 && t.shape()[2] > 1)
        .map(|(n, _)| n.clone())
        .collect()
}

/// Builds the graph for a batch at one resolution. Inputs: `x` `[B, C, r, r]`
/// (already scaled by `c_in`) and `emb` `[B, F, 1, 1]` noise features. Output: `out`.
pub fn build_graph<T: Scalar>(spec: &ModelSpec, batch: usize, r: usize) -> Result<Graph<T>> {
    spec.validate()?;
    spec.check_resolution(r)?;
    let mut g = Graph::new();
    let x = g.input("x", &[batch, spec.data_channels, r, r]);
    let feats = g.input("emb", &[batch, spec.base_channels, 1, 1]);

    g.set_scope("emb");
    let w1 = g.param("emb.fc1.weight", &[spec.emb_dim, spec.base_channels]);
    let b1 = g.param("emb.fc1.bias", &[spec.emb_dim]);
    let w2 = g.param("emb.fc2.weight", &[spec.emb_dim, spec.emb_dim]);
    let b2 = g.param("emb.fc2.bias", &[spec.emb_dim]);
    let e = g.channel_mix(feats, w1)?;
    let e = g.broadcast_add(e, b1)?;
    let e = g.silu(e)?;
    let e = g.channel_mix(e, w2)?;
    let e = g.broadcast_add(e, b2)?;
    let emb = g.silu(e)?;

    let k = spec.spatial_k;
    g.set_scope("stem");
    let mut h = dual_conv_node(&mut g, x, "stem", spec.channels(0), k, spec.level_modes(0))?;
    let mut skips = Vec::new();
    for l in 0..spec.levels {
        for b in 0..spec.blocks_per_level {
            let name = format!("enc.{l}.block.{b}");
            g.set_scope(name.clone());
            h = block(&mut g, spec, h, emb, &name, spec.channels(l), l)?;
            skips.push(h);
        }
        if l + 1 < spec.levels {
            g.set_scope(format!("enc.{l}.down"));
            h = g.avg_pool2(h)?;
        }
    }
    for l in (0..spec.levels).rev() {
        for b in 0..spec.blocks_per_level {
            let name = format!("dec.{l}.block.{b}");
            g.set_scope(name.clone());
            let s = skips.pop().expect("one skip per encoder block");
            let cat = g.concat(h, s)?;
            h = block(&mut g, spec, cat, emb, &name, spec.channels(l), l)?;
        }
        if l > 0 {
            g.set_scope(format!("dec.{l}.up"));
            h = g.spectral_upsample2(h)?;
        }
    }
    g.set_scope("head");
    let h = norm_act(&mut g, h, "head.norm")?;
    let out = dual_conv_node(&mut g, h, "head.conv", spec.data_channels, k, spec.level_modes(0))?;
    g.output("out", out);
    Ok(g)
}

fn norm_act<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId> {
    let c = g.shape(x)[1];
    let n = g.group_norm(x, group_count(c), 1e-5)?;
    let s = g.param(format!("{name}.scale"), &[c]);
    let t = g.param(format!("{name}.shift"), &[c]);
    let n = g.affine(n, s, t)?;
    g.silu(n)
}

fn block<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    x: NodeId,
    emb: NodeId,
    name: &str,
    cout: usize,
    level: usize,
) -> Result<NodeId> {
    let cin = g.shape(x)[1];
    let modes = spec.level_modes(level);
    let h = norm_act(g, x, &format!("{name}.norm1"))?;
    let h = dual_conv_node(g, h, &format!("{name}.conv1"), cout, spec.spatial_k, modes)?;
    let we = g.param(format!("{name}.emb.weight"), &[cout, spec.emb_dim]);
    let e = g.channel_mix(emb, we)?;
    let h = g.broadcast_add(h, e)?;
    let h = norm_act(g, h, &format!("{name}.norm2"))?;
    let h = dual_conv_node(g, h, &format!("{name}.conv2"), cout, spec.spatial_k, modes)?;
    let skip = if cin == cout {
        x
    } else {
        let ws = g.param(format!("{name}.skip.weight"), &[cout, cin]);
        g.channel_mix(x, ws)?
    };
    g.add(h, skip)
}

/// Finite-difference checks in f64 of one residual block with a widening skip
/// and of the whole network, at resolution `r` with batch 2.
///
/// With one channel per norm group a per-channel offset ahead of the norm has an
/// exactly zero gradient, which a relative test cannot score; keep the block at
/// 16 output channels or more and use specs whose levels have at least 16.
pub fn block_grad_check(spec: &ModelSpec, r: usize, step: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    spec.validate()?;
    spec.check_resolution(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize], scale: f64| Tensor::<f64>::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal));

    let (cin, cout) = (spec.channels(0), (2 * spec.channels(0)).max(16));
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2, cin, r, r]);
    let emb = g.input("emb", &[2, spec.emb_dim, 1, 1]);
    let out = block(&mut g, spec, x, emb, "block", cout, 0)?;
    g.output("out", out);
    let params: ParamStore<f64> = g.param_shapes().iter().map(|(k, s)| (k.clone(), randn(s, 0.5))).collect();
    let inputs = BTreeMap::from([("x".to_string(), randn(&[2, cin, r, r], 1.0)), ("emb".to_string(), randn(&[2, spec.emb_dim, 1, 1], 1.0))]);
    let mut block_rep = grad_check(&mut g, &inputs, &params, "out", step, seed)?;
    block_rep.label = format!("{} block r={r}", spec.arch);

    let mut net = build_graph::<f64>(spec, 2, r)?;
    let mut params: ParamStore<f64> = net.param_shapes().iter().map(|(k, s)| (k.clone(), randn(s, 0.3))).collect();
    for (k, t) in params.iter_mut() {
        if k.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
    let inputs = BTreeMap::from([
        ("x".to_string(), randn(&[2, spec.data_channels, r, r], 1.0)),
        ("emb".to_string(), randn(&[2, spec.base_channels, 1, 1], 1.0)),
    ]);
    let mut net_rep = grad_check(&mut net, &inputs, &params, "out", step, seed ^ 1)?;
    net_rep.label = format!("{} network r={r}", spec.arch);
    Ok(vec![block_rep, net_rep])
}

/// Initializes every parameter the network reads, deterministically from `rng`.
pub fn build(spec: &ModelSpec, rng: &mut impl RngCore) -> Result<ModelState> {
    spec.validate()?;
    let r = spec.min_admissible();
    let shapes = build_graph::<f32>(spec, 1, r)?.param_shapes();
    let mut params = ParamStore::new();
    for (name, shape) in &shapes {
        let t = if name.ends_with(".spatial") {
            init_spatial(shape[0], shape[1], shape[2], rng)
        } else if name.ends_with(".spectral") {
            init_spectral(shape[0], shape[1], spec.modes_for_count(shape[2]), rng)
        } else if name.ends_with(".scale") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".bias") || name.ends_with(".shift") {
            Tensor::zeros(shape)
        } else {
            // Linear maps `[out, in]`.
            let std = (1.0 / shape[1] as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                (std * z) as f32
            })
        };
        params.insert(name.clone(), t);
    }
    let frozen = params.keys().map(|k| (k.clone(), false)).collect();
    Ok(ModelState {
        spec: spec.clone(),
        params,
        frozen,
    })
}

impl ModelSpec {
    fn modes_for_count(&self, count: usize) -> usize {
        (1..=self.modes).find(|&m| crate::spectral::mode_count(m) == count).expect("valid spectral shape")
    }
}

/// Preconditioning coefficients `(c_skip, c_out, c_in, c_noise)`.
pub fn precond(sigma: f64) -> (f64, f64, f64, f64) {
    let s2 = sigma * sigma + SIGMA_DATA * SIGMA_DATA;
    (
        SIGMA_DATA * SIGMA_DATA / s2,
        sigma * SIGMA_DATA / s2.sqrt(),
        1.0 / s2.sqrt(),
        sigma.ln() / 4.0,
    )
}

/// Sinusoidal features of the noise input, cosines then sines.
pub fn noise_features(c_noise: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (1.0f64 / 10000.0).powf(i as f64 / denom);
        out[i] = (c_noise * freq).cos();
        out[half + i] = (c_noise * freq).sin();
    }
    out
}

/// Graph cache plus preconditioning around the raw network.
pub struct Network<T: Scalar> {
    spec: ModelSpec,
    graphs: HashMap<(usize, usize), Graph<T>>,
    last: Option<(usize, usize)>,
    sigmas: Vec<f64>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            spec: spec.clone(),
            graphs: HashMap::new(),
            last: None,
            sigmas: Vec::new(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn graph(&mut self, batch: usize, r: usize) -> Result<&mut Graph<T>> {
        if !self.graphs.contains_key(&(batch, r)) {
            let g = build_graph(&self.spec, batch, r)?;
            self.graphs.insert((batch, r), g);
        }
        Ok(self.graphs.get_mut(&(batch, r)).unwrap())
    }

    /// Denoised estimates `D(x; σ_b)` for a batch `[B, C, r, r]` with per-item noise levels.
    pub fn denoise(&mut self, params: &ParamStore<T>, x: &Tensor<T>, sigmas: &[f64]) -> Result<Tensor<T>> {
        let [b, c, r, r2] = *x.shape() else {
            return Err(Error::Contract(format!("expected a [B,C,r,r] batch, got {:?}", x.shape())));
        };
        if r != r2 || b != sigmas.len() || c != self.spec.data_channels {
            return Err(Error::Contract(format!(
                "batch {:?} does not match {} noise levels and {} channels",
                x.shape(),
                sigmas.len(),
                self.spec.data_channels
            )));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Singular(format!("noise level {s} must be positive and finite")));
        }
        let per = c * r * r;
        let f = self.spec.base_channels;
        let mut xin = Tensor::zeros(x.shape());
        let mut emb = Tensor::zeros(&[b, f, 1, 1]);
        for (i, &s) in sigmas.iter().enumerate() {
            let (_, _, c_in, c_noise) = precond(s);
            for (o, v) in xin.data_mut()[i * per..(i + 1) * per].iter_mut().zip(&x.data()[i * per..(i + 1) * per]) {
                *o = *v * T::of(c_in);
            }
            for (o, v) in emb.data_mut()[i * f..(i + 1) * f].iter_mut().zip(noise_features(c_noise, f)) {
                *o = T::of(v);
            }
        }
        let inputs = BTreeMap::from([("x".to_string(), xin), ("emb".to_string(), emb)]);
        let raw = self.graph(b, r)?.forward(&inputs, params)?.remove("out").unwrap();
        self.last = Some((b, r));
        self.sigmas = sigmas.to_vec();
        let mut out = Tensor::zeros(x.shape());
        for (i, &s) in sigmas.iter().enumerate() {
            let (c_skip, c_out, _, _) = precond(s);
            let (cs, co) = (T::of(c_skip), T::of(c_out));
            for k in i * per..(i + 1) * per {
                out.data_mut()[k] = cs * x.data()[k] + co * raw.data()[k];
            }
        }
        Ok(out)
    }

    /// Parameter gradients for the last [`Network::denoise`] call given `∂L/∂D`.
    pub fn backward(&mut self, params: &ParamStore<T>, grad_denoised: &Tensor<T>) -> Result<Gradients<T>> {
        let Some(key) = self.last else {
            return Err(Error::State("backward called before denoise".into()));
        };
        let per = grad_denoised.len() / key.0;
        let mut seed = grad_denoised.clone();
        for (i, &s) in self.sigmas.iter().enumerate() {
            let co = T::of(precond(s).1);
            for v in &mut seed.data_mut()[i * per..(i + 1) * per] {
                *v = *v * co;
            }
        }
        let seeds = BTreeMap::from([("out".to_string(), seed)]);
        self.graphs.get_mut(&key).unwrap().backward(&seeds, params)
    }
}

/// Packs equally sized grid functions into a `[B, C, r, r]` batch.
pub fn to_batch<T: Scalar>(items: &[GridFunction]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (c, r) = (first.channels(), first.resolution());
    if let Some(g) = items.iter().find(|g| g.channels() != c || g.resolution() != r) {
        return Err(Error::Contract(format!(
            "mixed batch: {}ch@{} next to {c}ch@{r}",
            g.channels(),
            g.resolution()
        )));
    }
    let data = items.iter().flat_map(|g| g.values().iter().map(|&v| T::of(v))).collect();
    Ok(Tensor::from_vec(&[items.len(), c, r, r], data))
}

pub fn from_batch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<GridFunction>> {
    let [b, c, r, _] = *t.shape() else {
        return Err(Error::Contract("expected a 4-d batch".into()));
    };
    let per = c * r * r;
    (0..b)
        .map(|i| GridFunction::new(c, r, t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Single-function denoising with a fresh graph.
pub fn denoise(m: &ModelState, x: &GridFunction, sigma: f64) -> Result<GridFunction> {
    m.check_resolution(x.resolution())?;
    let mut net = Network::<f32>::new(&m.spec);
    let out = net.denoise(&m.params, &to_batch(std::slice::from_ref(x))?, &[sigma])?;
    Ok(from_batch(&out)?.remove(0))
}

/// Casts a parameter store to another precision.
pub fn cast_params<A: Scalar, B: Scalar>(p: &ParamStore<A>) -> ParamStore<B> {
    p.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}
