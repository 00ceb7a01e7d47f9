//! DCGAN-style generator and discriminator, Adam, and the generator EMA.

mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{no_grad, Tensor, TensorError};

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient for parameter {name}; step aborted")]
    NonFiniteGradient { name: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {name}: expected {expected} values, got {got}")]
    ParameterSize { name: String, expected: usize, got: usize },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const INIT_STD: f32 = 0.02;
pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [16, 32];

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

fn init_weight<R: Rng + ?Sized>(name: String, shape: &[usize], rng: &mut R) -> Param {
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Param {
        name,
        tensor: Tensor::parameter(data, shape).expect("shape matches data"),
    }
}

fn init_bias(name: String, len: usize) -> Param {
    Param {
        name,
        tensor: Tensor::parameter(vec![0.0; len], &[len]).expect("shape matches data"),
    }
}

/// Copies `values` into `params`, checking sizes first.
pub fn load_values(params: &[Param], values: &[Vec<f32>]) -> Result<()> {
    if params.len() != values.len() {
        return Err(NnError::Config(format!(
            "expected {} parameter buffers, got {}",
            params.len(),
            values.len()
        )));
    }
    for (p, v) in params.iter().zip(values) {
        if p.tensor.numel() != v.len() {
            return Err(NnError::ParameterSize {
                name: p.name.clone(),
                expected: p.tensor.numel(),
                got: v.len(),
            });
        }
    }
    params.iter().zip(values).for_each(|(p, v)| p.tensor.set_data(v));
    Ok(())
}

pub fn parameter_count(params: &[Param]) -> usize {
    params.iter().map(|p| p.tensor.numel()).sum()
}

fn check_resolution(resolution: usize) -> Result<usize> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(NnError::Config(format!(
            "resolution {resolution} not supported (use 16 or 32)"
        )));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            base_channels: 16,
            resolution: 16,
        }
    }
}

/// Dense projection to a `4C×4×4` map, then `[upsample, conv3×3,
/// leaky_relu]` blocks that halve the width (down to `C`) until the output
/// resolution, then a `conv3×3` to RGB and `tanh`.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    fc_w: Param,
    fc_b: Param,
    blocks: Vec<(Param, Param)>,
    out_w: Param,
    out_b: Param,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let n_blocks = check_resolution(config.resolution)?;
        if config.latent_dim == 0 || config.base_channels == 0 {
            return Err(NnError::Config("latent_dim and base_channels must be positive".into()));
        }
        let c = config.base_channels;
        let top = 4 * c;
        let fc_w = init_weight("g.fc.w".into(), &[config.latent_dim, top * 16], rng);
        let fc_b = init_bias("g.fc.b".into(), top * 16);
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut ch = top;
        for i in 0..n_blocks {
            let next = (ch / 2).max(c);
            let w = init_weight(format!("g.block{i}.w"), &[next, ch, 3, 3], rng);
            let b = init_bias(format!("g.block{i}.b"), next);
            blocks.push((w, b));
            ch = next;
        }
        let out_w = init_weight("g.out.w".into(), &[3, ch, 3, 3], rng);
        let out_b = init_bias("g.out.b".into(), 3);
        Ok(Self {
            config,
            fc_w,
            fc_b,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let batch = match *z.shape() {
            [b, d] if d == self.config.latent_dim => b,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "generator_forward",
                    lhs: z.shape().to_vec(),
                    rhs: vec![self.config.latent_dim],
                }
                .into())
            }
        };
        let top = 4 * self.config.base_channels;
        let mut h = z
            .matmul(&self.fc_w.tensor)?
            .add(&self.fc_b.tensor)?
            .reshape(&[batch, top, 4, 4])?
            .leaky_relu(LEAKY_SLOPE)?;
        for (w, b) in &self.blocks {
            h = h
                .upsample_nearest2x()?
                .conv2d(&w.tensor, Some(&b.tensor), 1, 1)?
                .leaky_relu(LEAKY_SLOPE)?;
        }
        Ok(h.conv2d(&self.out_w.tensor, Some(&self.out_b.tensor), 1, 1)?.tanh()?)
    }

    pub fn parameters(&self) -> Vec<Param> {
        let mut out = vec![self.fc_w.clone(), self.fc_b.clone()];
        for (w, b) in &self.blocks {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.out_w.clone());
        out.push(self.out_b.clone());
        out
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Self {
        let fresh = |p: &Param| Param {
            name: p.name.clone(),
            tensor: p.tensor.detach_requires_grad(),
        };
        Self {
            config: self.config,
            fc_w: fresh(&self.fc_w),
            fc_b: fresh(&self.fc_b),
            blocks: self.blocks.iter().map(|(w, b)| (fresh(w), fresh(b))).collect(),
            out_w: fresh(&self.out_w),
            out_b: fresh(&self.out_b),
        }
    }
}

/// Anything that maps images to one logit each and can produce its input
/// gradient as a differentiable graph (for R1).
pub trait Critic {
    /// `(batch, 1)` logits.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// `∂(Σ logits)/∂x`, built from ops that are differentiable with respect
    /// to the critic's parameters.
    fn input_gradient(&self, x: &Tensor) -> Result<Tensor>;

    fn parameters(&self) -> Vec<Param>;
}

/// `D(x) = ⟨w, vec(x)⟩ + b`. Small reference critic for tests and probes.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub weight: Param,
    pub bias: Param,
}

impl LinearCritic {
    pub fn new(weight: Vec<f32>, bias: f32) -> Self {
        let n = weight.len();
        Self {
            weight: Param {
                name: "lin.w".into(),
                tensor: Tensor::parameter(weight, &[n, 1]).expect("shape matches data"),
            },
            bias: Param {
                name: "lin.b".into(),
                tensor: Tensor::parameter(vec![bias], &[1]).expect("shape matches data"),
            },
        }
    }

    fn flatten(&self, x: &Tensor) -> Result<Tensor> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let n = self.weight.tensor.numel();
        if batch == 0 || x.numel() != batch * n {
            return Err(TensorError::ShapeMismatch {
                op: "linear_critic",
                lhs: x.shape().to_vec(),
                rhs: vec![n],
            }
            .into());
        }
        Ok(x.reshape(&[batch, n])?)
    }
}

impl Critic for LinearCritic {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.flatten(x)?.matmul(&self.weight.tensor)?.add(&self.bias.tensor)?)
    }

    fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.flatten(x)?.shape()[0];
        let ones = Tensor::full(&[batch, 1], 1.0);
        Ok(ones.matmul(&self.weight.tensor.transpose()?)?.reshape(x.shape())?)
    }

    fn parameters(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            resolution: 16,
        }
    }
}

/// Stride-2 `conv3×3` + `leaky_relu(0.2)` blocks (doubling the width from
/// `C`) down to `4×4`, then a dense layer to one logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    blocks: Vec<(Param, Param)>,
    fc_w: Param,
    fc_b: Param,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let n_blocks = check_resolution(config.resolution)?;
        if config.base_channels == 0 {
            return Err(NnError::Config("base_channels must be positive".into()));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut ch = 3;
        for i in 0..n_blocks {
            let next = config.base_channels << i;
            let w = init_weight(format!("d.block{i}.w"), &[next, ch, 3, 3], rng);
            let b = init_bias(format!("d.block{i}.b"), next);
            blocks.push((w, b));
            ch = next;
        }
        let fc_w = init_weight("d.fc.w".into(), &[ch * 16, 1], rng);
        let fc_b = init_bias("d.fc.b".into(), 1);
        Ok(Self {
            config,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let r = self.config.resolution;
        match *x.shape() {
            [b, 3, h, w] if h == r && w == r => Ok(b),
            _ => Err(TensorError::ShapeMismatch {
                op: "discriminator_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![3, r, r],
            }
            .into()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let mut h = x.clone();
        for (w, b) in &self.blocks {
            h = h.conv2d(&w.tensor, Some(&b.tensor), 2, 1)?.leaky_relu(LEAKY_SLOPE)?;
        }
        let flat = h.numel() / batch;
        Ok(h.reshape(&[batch, flat])?.matmul(&self.fc_w.tensor)?.add(&self.fc_b.tensor)?)
    }

    pub fn deep_clone(&self) -> Self {
        let fresh = |p: &Param| Param {
            name: p.name.clone(),
            tensor: p.tensor.detach_requires_grad(),
        };
        Self {
            config: self.config,
            blocks: self.blocks.iter().map(|(w, b)| (fresh(w), fresh(b))).collect(),
            fc_w: fresh(&self.fc_w),
            fc_b: fresh(&self.fc_b),
        }
    }
}

impl Critic for Discriminator {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    /// Backpropagates by hand: `Wfcᵀ`, then per block the leaky-ReLU slope
    /// mask (a constant from a gradient-free forward pass) and a transposed
    /// convolution with the block's weight.
    fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let x_const = x.detach();
        let (masks, sizes) = no_grad(|| -> Result<_> {
            let mut h = x_const;
            let mut masks = Vec::with_capacity(self.blocks.len());
            let mut sizes = Vec::with_capacity(self.blocks.len());
            for (w, b) in &self.blocks {
                sizes.push((h.shape()[2], h.shape()[3]));
                let pre = h.conv2d(&w.tensor, Some(&b.tensor), 2, 1)?;
                let slope: Vec<f32> = pre
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE })
                    .collect();
                masks.push(Tensor::from_vec(slope, pre.shape())?);
                h = pre.leaky_relu(LEAKY_SLOPE)?;
            }
            Ok((masks, sizes))
        })?;
        let last_shape = masks.last().expect("at least one block").shape().to_vec();
        let ones = Tensor::full(&[batch, 1], 1.0);
        let mut g = ones.matmul(&self.fc_w.tensor.transpose()?)?.reshape(&last_shape)?;
        for (((w, _), mask), &hw) in self.blocks.iter().zip(&masks).zip(&sizes).rev() {
            g = g.mul(mask)?.conv_transpose2d(&w.tensor, 2, 1, hw)?;
        }
        Ok(g)
    }

    fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for (w, b) in &self.blocks {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.fc_w.clone());
        out.push(self.fc_b.clone());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update using each parameter's accumulated
    /// gradient (missing gradients count as zero). If any gradient is
    /// non-finite nothing is modified.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        let grads: Vec<Option<Vec<f32>>> = params.iter().map(|p| p.tensor.grad()).collect();
        for (p, g) in params.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(NnError::NonFiniteGradient { name: p.name.clone() });
            }
        }
        if params.len() != self.m.len() {
            return Err(NnError::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - (beta1 as f64).powf(self.step as f64);
        let c2 = 1.0 - (beta2 as f64).powf(self.step as f64);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut values = p.tensor.to_vec();
            for j in 0..values.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] as f64 / c1;
                let v_hat = v[j] as f64 / c2;
                values[j] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
            p.tensor.set_data(&values);
        }
        Ok(())
    }
}

pub fn zero_grads(params: &[Param]) {
    params.iter().for_each(|p| p.tensor.zero_grad());
}

/// Exponential moving average of generator weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub values: Vec<Vec<f32>>,
    pub half_life_images: f64,
}

impl EmaShadow {
    pub fn new(params: &[Param], half_life_images: f64) -> Self {
        Self {
            values: params.iter().map(|p| p.tensor.to_vec()).collect(),
            half_life_images,
        }
    }

    pub fn decay(&self, batch_size: usize) -> f64 {
        if self.half_life_images <= 0.0 {
            return 0.0;
        }
        0.5f64.powf(batch_size as f64 / self.half_life_images)
    }

    /// `shadow ← decay·shadow + (1−decay)·current`, evaluated as
    /// `shadow + (1−decay)·(current − shadow)` so equal inputs stay exact.
    pub fn update(&mut self, params: &[Param], batch_size: usize) {
        let blend = (1.0 - self.decay(batch_size)) as f32;
        for (s, p) in self.values.iter_mut().zip(params) {
            let cur = p.tensor.data();
            for (a, &c) in s.iter_mut().zip(cur.iter()) {
                *a += blend * (c - *a);
            }
        }
    }

    /// Generator carrying the shadow weights.
    pub fn generator(&self, live: &Generator) -> Result<Generator> {
        let g = live.deep_clone();
        load_values(&g.parameters(), &self.values)?;
        Ok(g)
    }
}
