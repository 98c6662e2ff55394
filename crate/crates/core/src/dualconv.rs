//! The dual convolution: a fixed-size circular spatial convolution plus a
//! spectral convolution on the lowest Fourier modes.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::engine::kernels::{self, ConvDims, ModeMixDims};
use crate::engine::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::spectral::{half_width, min_resolution, mode_count};
use num_complex::Complex;

/// Weights `[out, in, k, k]` with odd `k`, applied verbatim at every resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    weights: Tensor<f64>,
}

impl SpatialKernel {
    pub fn new(weights: Tensor<f64>) -> Result<Self> {
        match *weights.shape() {
            [_, _, k, k2] if k == k2 && k % 2 == 1 => Ok(Self { weights }),
            _ => Err(Error::Config(format!("spatial kernel must be [out,in,k,k] with odd k, got {:?}", weights.shape()))),
        }
    }

    pub fn random(cout: usize, cin: usize, k: usize, rng: &mut impl RngCore) -> Result<Self> {
        Self::new(init_spatial(cout, cin, k, rng))
    }

    /// `out == in` kernel with a single center tap.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut w = Tensor::zeros(&[channels, channels, k, k]);
        for c in 0..channels {
            w.data_mut()[((c * channels + c) * k + k / 2) * k + k / 2] = 1.0;
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Complex weights on the half-plane modes `|m₁| < modes`, `0 ≤ m₂ < modes`,
/// stored as real pairs `[out, in, (2·modes−1)·modes, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralKernel {
    modes: usize,
    coeffs: Tensor<f64>,
}

impl SpectralKernel {
    pub fn new(modes: usize, coeffs: Tensor<f64>) -> Result<Self> {
        match *coeffs.shape() {
            [_, _, n, 2] if modes > 0 && n == mode_count(modes) => Ok(Self { modes, coeffs }),
            _ => Err(Error::Config(format!(
                "spectral kernel for {modes} modes must be [out,in,{},2], got {:?}",
                mode_count(modes.max(1)),
                coeffs.shape()
            ))),
        }
    }

    pub fn random(cout: usize, cin: usize, modes: usize, rng: &mut impl RngCore) -> Result<Self> {
        Self::new(modes, init_spectral(cout, cin, modes, rng))
    }

    /// Every coefficient set from `f(out, in, m₁, m₂)`.
    pub fn from_fn(cout: usize, cin: usize, modes: usize, f: impl Fn(usize, usize, i64, usize) -> Complex<f64>) -> Result<Self> {
        let nm = mode_count(modes);
        let mut w = Tensor::zeros(&[cout, cin, nm, 2]);
        for o in 0..cout {
            for i in 0..cin {
                for a in 0..2 * modes - 1 {
                    for m2 in 0..modes {
                        let z = f(o, i, a as i64 - (modes as i64 - 1), m2);
                        let at = ((o * cin + i) * nm + a * modes + m2) * 2;
                        w.data_mut()[at] = z.re;
                        w.data_mut()[at + 1] = z.im;
                    }
                }
            }
        }
        Self::new(modes, w)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn coeffs(&self) -> &Tensor<f64> {
        &self.coeffs
    }

    pub fn out_channels(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.coeffs.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualConvParams {
    pub spatial: SpatialKernel,
    pub spectral: SpectralKernel,
    pub bias: Vec<f64>,
}

impl DualConvParams {
    pub fn new(spatial: SpatialKernel, spectral: SpectralKernel, bias: Vec<f64>) -> Result<Self> {
        if spatial.in_channels() != spectral.in_channels()
            || spatial.out_channels() != spectral.out_channels()
            || bias.len() != spatial.out_channels()
        {
            return Err(Error::Config("dual convolution branches disagree on channel counts".into()));
        }
        Ok(Self { spatial, spectral, bias })
    }

    pub fn random(cout: usize, cin: usize, k: usize, modes: usize, rng: &mut impl RngCore) -> Result<Self> {
        let spatial = SpatialKernel::random(cout, cin, k, rng)?;
        let spectral = SpectralKernel::random(cout, cin, modes, rng)?;
        let bias = (0..cout).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(spatial, spectral, bias)
    }
}

/// Gaussian weights with variance `1/(in·k²)`.
pub fn init_spatial<T: Scalar>(cout: usize, cin: usize, k: usize, rng: &mut impl RngCore) -> Tensor<T> {
    let std = (1.0 / (cin * k * k) as f64).sqrt();
    Tensor::from_fn(&[cout, cin, k, k], |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Complex Gaussian weights with variance `1/(in·modes)`, split evenly between parts.
pub fn init_spectral<T: Scalar>(cout: usize, cin: usize, modes: usize, rng: &mut impl RngCore) -> Tensor<T> {
    let std = (0.5 / (cin * mode_count(modes)) as f64).sqrt();
    Tensor::from_fn(&[cout, cin, mode_count(modes), 2], |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

fn check_input(g: &GridFunction, cin: usize) -> Result<()> {
    if g.channels() != cin {
        return Err(Error::Contract(format!("kernel expects {cin} channels, input has {}", g.channels())));
    }
    Ok(())
}

/// Spectral convolution at the input's own resolution.
pub fn spectral_conv(g: &GridFunction, k: &SpectralKernel) -> Result<GridFunction> {
    check_input(g, k.in_channels())?;
    let r = g.resolution();
    if r < min_resolution(k.modes) {
        return Err(Error::ResolutionTooLow {
            resolution: r,
            modes: k.modes,
            required: min_resolution(k.modes),
        });
    }
    let (cin, cout) = (k.in_channels(), k.out_channels());
    let plane = r * half_width(r);
    let mut spec = vec![Complex::new(0.0, 0.0); cin * plane];
    kernels::rfft2_forward(g.values(), cin, r, &mut spec);
    let mut mixed = vec![Complex::new(0.0, 0.0); cout * plane];
    let d = ModeMixDims {
        batch: 1,
        cin,
        cout,
        r,
        modes: k.modes,
    };
    kernels::mode_mix_forward(d, &spec, k.coeffs.data(), &mut mixed);
    let mut out = vec![0.0; cout * r * r];
    kernels::irfft2_forward(&mixed, cout, r, &mut out);
    GridFunction::new(cout, r, out)
}

/// Circular cross-correlation with the same discrete weights at every resolution.
pub fn spatial_conv(g: &GridFunction, k: &SpatialKernel) -> Result<GridFunction> {
    check_input(g, k.in_channels())?;
    let r = g.resolution();
    let d = ConvDims {
        batch: 1,
        cin: k.in_channels(),
        cout: k.out_channels(),
        r,
        k: k.size(),
    };
    let mut out = vec![0.0; d.cout * r * r];
    kernels::conv_forward(d, g.values(), k.weights.data(), &mut out);
    GridFunction::new(d.cout, r, out)
}

pub fn dual_conv(g: &GridFunction, p: &DualConvParams) -> Result<GridFunction> {
    let a = spatial_conv(g, &p.spatial)?;
    let b = spectral_conv(g, &p.spectral)?;
    let r = g.resolution();
    let mut sum = a.add(&b)?.into_values();
    for (c, bias) in p.bias.iter().enumerate() {
        for v in &mut sum[c * r * r..(c + 1) * r * r] {
            *v += bias;
        }
    }
    GridFunction::new(p.bias.len(), r, sum)
}

/// Parameter names `{prefix}.spatial`, `{prefix}.spectral`, `{prefix}.bias` used by [`dual_conv_node`].
pub fn dual_conv_param_shapes(prefix: &str, cin: usize, cout: usize, k: usize, modes: Option<usize>) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![(format!("{prefix}.spatial"), vec![cout, cin, k, k])];
    if let Some(m) = modes {
        v.push((format!("{prefix}.spectral"), vec![cout, cin, mode_count(m), 2]));
    }
    v.push((format!("{prefix}.bias"), vec![cout]));
    v
}

/// Adds a dual convolution to a graph; `modes = None` keeps only the spatial branch.
pub fn dual_conv_node<T: Scalar>(
    graph: &mut Graph<T>,
    x: NodeId,
    prefix: &str,
    cout: usize,
    k: usize,
    modes: Option<usize>,
) -> Result<NodeId> {
    let cin = graph.shape(x)[1];
    let w = graph.param(format!("{prefix}.spatial"), &[cout, cin, k, k]);
    let mut y = graph.conv2d(x, w)?;
    if let Some(m) = modes {
        let wf = graph.param(format!("{prefix}.spectral"), &[cout, cin, mode_count(m), 2]);
        let f = graph.rfft2(x)?;
        let f = graph.complex_mul(f, wf, m)?;
        let s = graph.irfft2(f)?;
        y = graph.add(y, s)?;
    }
    let b = graph.param(format!("{prefix}.bias"), &[cout]);
    graph.broadcast_add(y, b)
}
