use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Directional derivative comparison for one parameter or input.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub checks: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// NaN errors never pass.
    pub fn passed(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.rel_error <= tol)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn axpy(x: &Tensor<f64>, a: f64, v: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_vec(x.shape(), x.data().iter().zip(v.data()).map(|(p, q)| p + a * q).collect())
}

/// Compares reverse-mode gradients of `<P, output>` against central differences
/// along a random direction, for every parameter and every input.
pub fn grad_check(
    graph: &mut Graph<f64>,
    inputs: &BTreeMap<String, Tensor<f64>>,
    params: &ParamStore<f64>,
    output: &str,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = graph.forward(inputs, params)?;
    let proj = randn(&mut rng, out[output].shape());
    let seeds = BTreeMap::from([(output.to_string(), proj.clone())]);
    let grads = graph.backward(&seeds, params)?;

    let loss = |g: &mut Graph<f64>, i: &BTreeMap<String, Tensor<f64>>, p: &ParamStore<f64>| -> Result<f64> {
        Ok(dot(&g.forward(i, p)?[output], &proj))
    };

    let mut checks = Vec::new();
    let mut record = |name: String, analytic: f64, numeric: f64, scale: f64| {
        let floor = 1e-9 + 1e-7 * scale;
        let rel_error = if analytic.is_finite() && numeric.is_finite() {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
        } else {
            f64::NAN
        };
        checks.push(ParamCheck {
            name,
            analytic,
            numeric,
            rel_error,
        });
    };

    for (name, value) in params {
        let dir = randn(&mut rng, value.shape());
        let g = &grads.params[name];
        let analytic = dot(g, &dir);
        let mut p = params.clone();
        p.insert(name.clone(), axpy(value, step, &dir));
        let plus = loss(graph, inputs, &p)?;
        p.insert(name.clone(), axpy(value, -step, &dir));
        let minus = loss(graph, inputs, &p)?;
        let scale = g.sq_norm().sqrt() * dir.sq_norm().sqrt();
        record(format!("param/{name}"), analytic, (plus - minus) / (2.0 * step), scale);
    }
    for (name, value) in inputs {
        let Some(g) = grads.inputs.get(name) else { continue };
        let dir = randn(&mut rng, value.shape());
        let analytic = dot(g, &dir);
        let mut i = inputs.clone();
        i.insert(name.clone(), axpy(value, step, &dir));
        let plus = loss(graph, &i, params)?;
        i.insert(name.clone(), axpy(value, -step, &dir));
        let minus = loss(graph, &i, params)?;
        let scale = g.sq_norm().sqrt() * dir.sq_norm().sqrt();
        record(format!("input/{name}"), analytic, (plus - minus) / (2.0 * step), scale);
    }
    graph.forward(inputs, params)?;
    let max_rel_error = checks.iter().fold(0.0f64, |m, c| if c.rel_error.is_nan() { f64::NAN } else { m.max(c.rel_error) });
    Ok(GradCheckReport {
        label: String::new(),
        checks,
        max_rel_error,
    })
}

struct Case {
    graph: Graph<f64>,
    inputs: BTreeMap<String, Tensor<f64>>,
    params: ParamStore<f64>,
}

impl Case {
    fn new() -> Self {
        Self {
            graph: Graph::new(),
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    fn input(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
        self.inputs.insert(name.into(), randn(rng, shape));
        self.graph.input(name, shape)
    }

    fn param(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
        self.params.insert(name.into(), randn(rng, shape));
        self.graph.param(name, shape)
    }
}

fn build_case(op: &str, r: usize, rng: &mut ChaCha8Rng) -> Result<Option<Case>> {
    let (b, c) = (2, 4);
    let x4 = [b, c, r, r];
    let mut k = Case::new();
    let out = match op {
        "add" => {
            let x = k.input(rng, "x", &x4);
            let y = k.param(rng, "y", &x4);
            k.graph.add(x, y)?
        }
        "scale" => {
            let x = k.input(rng, "x", &x4);
            k.graph.scale(x, -1.7)?
        }
        "hadamard" => {
            let x = k.input(rng, "x", &x4);
            let y = k.param(rng, "y", &x4);
            k.graph.hadamard(x, y)?
        }
        "channel-mix" => {
            let x = k.input(rng, "x", &x4);
            let w = k.param(rng, "w", &[3, c]);
            k.graph.channel_mix(x, w)?
        }
        "conv2d-circular" => {
            let x = k.input(rng, "x", &x4);
            let w = k.param(rng, "w", &[3, c, 3, 3]);
            k.graph.conv2d(x, w)?
        }
        "rfft2" | "irfft2" => {
            let x = k.input(rng, "x", &x4);
            let f = k.graph.rfft2(x)?;
            let f = k.graph.scale(f, 2.0)?;
            k.graph.irfft2(f)?
        }
        "complex-pointwise-mul" => {
            let modes = (r + 1) / 2;
            let x = k.input(rng, "x", &x4);
            let f = k.graph.rfft2(x)?;
            let w = k.param(rng, "w", &[3, c, crate::spectral::mode_count(modes), 2]);
            let m = k.graph.complex_mul(f, w, modes)?;
            k.graph.irfft2(m)?
        }
        "silu" => {
            let x = k.input(rng, "x", &x4);
            k.graph.silu(x)?
        }
        "group-norm" => {
            let x = k.input(rng, "x", &x4);
            k.graph.group_norm(x, 2, 1e-5)?
        }
        "mean-reduce" => {
            let x = k.input(rng, "x", &x4);
            k.graph.mean(x)?
        }
        "broadcast-add" => {
            let x = k.input(rng, "x", &x4);
            let bias = k.param(rng, "bias", &[c]);
            let e = k.param(rng, "emb", &[b, c, 1, 1]);
            let y = k.graph.broadcast_add(x, bias)?;
            k.graph.broadcast_add(y, e)?
        }
        "affine" => {
            let x = k.input(rng, "x", &x4);
            let s = k.param(rng, "scale", &[c]);
            let t = k.param(rng, "shift", &[c]);
            k.graph.affine(x, s, t)?
        }
        "avg-pool2" => {
            if r % 2 != 0 {
                return Ok(None);
            }
            let x = k.input(rng, "x", &x4);
            k.graph.avg_pool2(x)?
        }
        "spectral-upsample2" => {
            let x = k.input(rng, "x", &x4);
            k.graph.spectral_upsample2(x)?
        }
        "concat-channels" => {
            let x = k.input(rng, "x", &x4);
            let y = k.param(rng, "y", &[b, 2, r, r]);
            k.graph.concat(x, y)?
        }
        other => unreachable!("no gradient case for {other}"),
    };
    k.graph.output("out", out);
    Ok(Some(k))
}

/// Operation names exercised by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "add",
    "scale",
    "hadamard",
    "channel-mix",
    "conv2d-circular",
    "rfft2",
    "irfft2",
    "complex-pointwise-mul",
    "silu",
    "group-norm",
    "mean-reduce",
    "broadcast-add",
    "affine",
    "avg-pool2",
    "spectral-upsample2",
    "concat-channels",
];

/// Gradient checks for every differentiable operation on small grids.
pub fn op_suite(resolutions: &[usize], seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for op in SUITE_OPS {
        for &r in resolutions {
            let Some(mut case) = build_case(op, r, &mut rng)? else { continue };
            let s = rng.random();
            let mut rep = grad_check(&mut case.graph, &case.inputs, &case.params, "out", 1e-5, s)?;
            rep.label = format!("{op} r={r}");
            reports.push(rep);
        }
    }
    Ok(reports)
}
