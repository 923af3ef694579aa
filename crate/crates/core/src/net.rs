//! Fully-connected denoiser `h_θ(x, t)` with hand-written reverse-mode and
//! forward-mode derivatives.
//!
//! The network sees `[c_in·x, emb(log σ_t)]` and predicts a residual that is
//! added to `x`:
//!
//! ```text
//! h(x, t) = x + c_out(σ_t) · F([c_in(σ_t)·x, emb(σ_t)])
//! c_in  = 1 / √(α_t² + σ_t²)
//! c_out = σ_t / √(α_t² + σ_t²)
//! ```
//!
//! `c_out` vanishes at `σ = 0`, so `h(x, 0) = x` for every parameter value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, SeedTree};
use crate::schedule::NoiseSchedule;

/// Lower clamp on σ before taking its logarithm for the embedding.
const EMBED_SIGMA_FLOOR: f64 = 1e-4;
const EMBED_FREQ_LO: f64 = 0.1;
const EMBED_FREQ_HI: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(dim: usize, hidden: Vec<usize>, embed_dim: usize, activation: Activation) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("network dimension must be positive"));
        }
        if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
            return Err(Error::config(format!("embedding width must be even and positive, got {embed_dim}")));
        }
        if hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be ≥ 1"));
        }
        Ok(Self {
            dim,
            hidden,
            embed_dim,
            activation,
        })
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.dim + self.embed_dim];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Location of one layer's weights (row-major `[fan_out][fan_in]`) and biases
/// inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

fn index_map(arch: &Architecture) -> Vec<LayerIndex> {
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let layer = LayerIndex {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            layer
        })
        .collect()
}

/// Gradient with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|g| !g.is_finite()) {
            Some(i) => Err(Error::non_finite(format!("gradient entry {i}"))),
            None => Ok(()),
        }
    }

    /// Sums per-element buffers in slice order.
    pub fn sum_ordered<'a>(len: usize, parts: impl IntoIterator<Item = &'a GradientBuffer>) -> Self {
        let mut acc = Self::zeros(len);
        for p in parts {
            acc.add_assign(p);
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    arch: Architecture,
    layers: Vec<LayerIndex>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Trace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    c_in: f64,
    c_out: f64,
    output: Vec<f64>,
}

impl DenoiserNet {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layers = index_map(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = SeedTree::new(seed).stream(&[tag::INIT]);
        for layer in &layers {
            let bound = (3.0 / layer.fan_in as f64).sqrt();
            for w in &mut params[layer.weight_offset..layer.bias_offset] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Self { arch, layers, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Malformed(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                arch.param_count()
            )));
        }
        let layers = index_map(&arch);
        Ok(Self { arch, layers, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerIndex] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn embed(&self, sigma: f64, out: &mut Vec<f64>) {
        let half = self.arch.embed_dim / 2;
        let ls = sigma.max(EMBED_SIGMA_FLOOR).ln();
        let ratio = if half > 1 {
            (EMBED_FREQ_HI / EMBED_FREQ_LO).ln() / (half - 1) as f64
        } else {
            0.0
        };
        for k in 0..half {
            let freq = EMBED_FREQ_LO * (ratio * k as f64).exp();
            out.push((freq * ls).sin());
        }
        for k in 0..half {
            let freq = EMBED_FREQ_LO * (ratio * k as f64).exp();
            out.push((freq * ls).cos());
        }
    }

    fn preconditioning(&self, sigma: f64, schedule: &NoiseSchedule) -> (f64, f64) {
        let alpha = schedule.alpha_of_sigma(sigma);
        let norm = (alpha * alpha + sigma * sigma).sqrt();
        (1.0 / norm, sigma / norm)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.dim {
            return Err(Error::Dimension {
                expected: self.arch.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("network input"));
        }
        Ok(())
    }

    fn affine(&self, layer: &LayerIndex, input: &[f64]) -> Vec<f64> {
        let w = &self.params[layer.weight_offset..layer.bias_offset];
        let b = &self.params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        w.chunks_exact(layer.fan_in)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    fn trace(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Trace> {
        self.check_input(x)?;
        let sigma = schedule.sigma(t)?;
        let (c_in, c_out) = self.preconditioning(sigma, schedule);
        let mut first = Vec::with_capacity(self.arch.dim + self.arch.embed_dim);
        first.extend(x.iter().map(|v| c_in * v));
        self.embed(sigma, &mut first);

        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth - 1);
        inputs.push(first);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = self.affine(layer, &inputs[i]);
            if i + 1 == depth {
                let output: Vec<f64> = x.iter().zip(&z).map(|(xi, fi)| xi + c_out * fi).collect();
                if output.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("network output (layer {i})")));
                }
                return Ok(Trace {
                    inputs,
                    pre,
                    c_in,
                    c_out,
                    output,
                });
            }
            let a: Vec<f64> = z.iter().map(|v| self.arch.activation.apply(*v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("activation of layer {i}")));
            }
            pre.push(z);
            inputs.push(a);
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(self.trace(x, t, schedule)?.output)
    }

    /// Adds `∇_θ ⟨upstream, h(x, t)⟩` into `grad` and returns `h(x, t)`.
    pub fn accumulate_backward(
        &self,
        x: &[f64],
        t: f64,
        schedule: &NoiseSchedule,
        upstream: &[f64],
        grad: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.arch.dim {
            return Err(Error::Dimension {
                expected: self.arch.dim,
                got: upstream.len(),
            });
        }
        let trace = self.trace(x, t, schedule)?;
        let mut delta: Vec<f64> = upstream.iter().map(|g| trace.c_out * g).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let g = &mut grad.0;
            for (o, d) in delta.iter().enumerate() {
                let row = layer.weight_offset + o * layer.fan_in;
                for (gw, a) in g[row..row + layer.fan_in].iter_mut().zip(input) {
                    *gw += d * a;
                }
                g[layer.bias_offset + o] += d;
            }
            if i == 0 {
                break;
            }
            let w = &self.params[layer.weight_offset..layer.bias_offset];
            let mut back = vec![0.0; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (b, wv) in back.iter_mut().zip(row) {
                    *b += d * wv;
                }
            }
            let act = self.arch.activation;
            for (b, z) in back.iter_mut().zip(&trace.pre[i - 1]) {
                *b *= act.derivative(*z);
            }
            if back.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("backward signal at layer {}", i - 1)));
            }
            delta = back;
        }
        Ok(trace.output)
    }

    /// `∇_θ ⟨upstream, h(x, t)⟩`.
    pub fn backward(&self, x: &[f64], t: f64, schedule: &NoiseSchedule, upstream: &[f64]) -> Result<GradientBuffer> {
        let mut grad = GradientBuffer::zeros(self.param_count());
        self.accumulate_backward(x, t, schedule, upstream, &mut grad)?;
        grad.check_finite()?;
        Ok(grad)
    }

    /// Directional derivative of `h(·, t)` at `x` along `dx`.
    pub fn forward_jvp_through_input(&self, x: &[f64], t: f64, schedule: &NoiseSchedule, dx: &[f64]) -> Result<Vec<f64>> {
        if dx.len() != self.arch.dim {
            return Err(Error::Dimension {
                expected: self.arch.dim,
                got: dx.len(),
            });
        }
        let trace = self.trace(x, t, schedule)?;
        let mut tangent = vec![0.0; self.arch.dim + self.arch.embed_dim];
        for (tv, d) in tangent.iter_mut().zip(dx) {
            *tv = trace.c_in * d;
        }
        let depth = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.weight_offset..layer.bias_offset];
            let mut next: Vec<f64> = w
                .chunks_exact(layer.fan_in)
                .map(|row| row.iter().zip(&tangent).map(|(a, b)| a * b).sum())
                .collect();
            if i + 1 < depth {
                for (n, z) in next.iter_mut().zip(&trace.pre[i]) {
                    *n *= self.arch.activation.derivative(*z);
                }
            }
            tangent = next;
        }
        Ok(dx.iter().zip(&tangent).map(|(d, f)| d + trace.c_out * f).collect())
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>], ts: &[f64], schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        if xs.len() != ts.len() {
            return Err(Error::Dimension {
                expected: xs.len(),
                got: ts.len(),
            });
        }
        xs.par_iter()
            .zip(ts.par_iter())
            .map(|(x, t)| self.forward(x, *t, schedule))
            .collect()
    }
}
