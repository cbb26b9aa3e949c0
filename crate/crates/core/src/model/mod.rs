//! A small fully convolutional encoder/decoder mapping `c x h x w` images to
//! two-class pixel logits.
//!
//! Layout for depth `D` and base width `F`:
//!
//! ```text
//! e0 = relu(conv(x))                              F channels, full size
//! e_l = relu(conv(avgpool(e_{l-1})))              F 2^l channels, size / 2^l
//! d_D = e_D
//! d_l = relu(conv(upsample(d_{l+1}))) + e_l       additive skip
//! logits = conv1x1(d_0)                           2 channels
//! ```
//!
//! Parameters are generic over [`Real`] so the same code runs in `f64` for
//! gradient verification and `f32` for training.

mod checkpoint;
pub mod conv;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC};
pub use conv::Conv2d;

use crate::aggregation::LogitMap;
use crate::rng;
use crate::{Error, Result};

/// Scalar type of network parameters and activations.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn zero() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn zero() -> Self {
                0.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    /// Wrap-around; makes the network exactly shift covariant.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    /// Inputs enter the first layer as `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            base_filters: 8,
            depth: 2,
            kernel_size: 3,
            padding: Padding::Zero,
            input_offset: 0.5,
            input_scale: 4.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::InvalidArgument(
                "channels and filters must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if !(self.input_offset.is_finite()
            && self.input_scale.is_finite()
            && self.input_scale != 0.0)
        {
            return Err(Error::InvalidArgument(
                "input offset and scale must be finite, scale non-zero".into(),
            ));
        }
        if self.depth > 8 {
            return Err(Error::InvalidArgument(format!(
                "depth {} too large",
                self.depth
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Channel counts of the `(in, out, kernel)` layers in declaration order:
    /// encoder, decoder (deepest first), head.
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let f = self.base_filters;
        let k = self.kernel_size;
        let mut shapes = vec![(self.in_channels, f, k)];
        for l in 1..=self.depth {
            shapes.push((f << (l - 1), f << l, k));
        }
        for l in (0..self.depth).rev() {
            shapes.push((f << (l + 1), f << l, k));
        }
        shapes.push((f, 2, 1));
        shapes
    }

    /// Half-width, in input pixels, of the region an output pixel depends on
    /// beyond its own pooling cell.
    pub fn receptive_radius(&self) -> usize {
        let r = self.kernel_size / 2;
        let mut enc = Vec::with_capacity(self.depth + 1);
        let mut reach = r;
        enc.push(reach);
        for l in 1..=self.depth {
            reach += r << l;
            enc.push(reach);
        }
        for l in (0..self.depth).rev() {
            reach += (1 << l) + (r << l);
            reach = reach.max(enc[l]);
        }
        reach
    }

    /// Overlap between inference tiles that makes stitched output identical
    /// to whole-image inference.
    pub fn tile_overlap(&self) -> usize {
        let m = self.size_multiple();
        self.receptive_radius().div_ceil(m) * m
    }
}

/// Network parameters (the model weights `theta`).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub layers: Vec<Conv2d<T>>,
}

/// Per-layer `(weight, bias)` gradients, matching [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        vec![T::zero(); l.weight.len()],
                        vec![T::zero(); l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, &v)| *a += v);
            b.iter_mut().zip(ob).for_each(|(a, &v)| *a += v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *v * f);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Activations kept by [`Network::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    height: usize,
    width: usize,
    /// Padded input of every layer, in layer order.
    padded: Vec<Vec<T>>,
    /// Post-ReLU encoder outputs per level.
    enc: Vec<Vec<T>>,
    /// Post-ReLU decoder conv outputs (before the skip add) per level.
    dec: Vec<Vec<T>>,
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    let zero = T::zero();
    for x in v {
        if !(*x > zero) {
            *x = zero;
        }
    }
}

fn relu_mask_in_place<T: Real>(grad: &mut [T], activation: &[T]) {
    let zero = T::zero();
    for (g, &a) in grad.iter_mut().zip(activation) {
        if !(a > zero) {
            *g = zero;
        }
    }
}

impl<T: Real> Network<T> {
    /// Seeded fan-in-scaled uniform initialisation: weights in `±sqrt(3 / fan_in)`,
    /// zero biases.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k))| {
                let mut layer = Conv2d::zeros(cin, cout, k);
                let bound = (3.0 / layer.fan_in() as f64).sqrt();
                let mut rng = rng::rng_from(rng::derive(config.seed, i as u64));
                for w in &mut layer.weight {
                    *w = T::from_f64(rng.gen_range(-bound..bound));
                }
                layer
            })
            .collect();
        Ok(Network {
            config: config.clone(),
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Conv2d {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernel: l.kernel,
                    weight: l.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Mutable access to every parameter, in declaration order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn check_input(&self, input: &[T], h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} must be a positive multiple of {m}"
            )));
        }
        let expected = self.config.in_channels * h * w;
        if input.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Logits `2 x h x w` for a channel-major `c x h x w` input.
    pub fn forward(&self, input: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        self.forward_impl(input, h, w, false).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        input: &[T],
        h: usize,
        w: usize,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.forward_impl(input, h, w, true)
    }

    fn forward_impl(
        &self,
        input: &[T],
        h: usize,
        w: usize,
        keep: bool,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(input, h, w)?;
        let depth = self.config.depth;
        let padding = self.config.padding;
        let mut cache = ForwardCache {
            height: h,
            width: w,
            padded: Vec::new(),
            enc: Vec::with_capacity(depth + 1),
            dec: vec![Vec::new(); depth],
        };
        let run =
            |layer: &Conv2d<T>, x: &[T], lh: usize, lw: usize, cache: &mut ForwardCache<T>| {
                let padded = layer.pad(x, lh, lw, padding);
                let out = layer.forward_padded(&padded, lh, lw);
                if keep {
                    cache.padded.push(padded);
                }
                out
            };

        let (offset, scale) = (
            T::from_f64(self.config.input_offset),
            T::from_f64(self.config.input_scale),
        );
        let input: Vec<T> = input.iter().map(|&x| (x - offset) * scale).collect();
        let mut e = run(&self.layers[0], &input, h, w, &mut cache);
        relu_in_place(&mut e);
        cache.enc.push(e);
        for l in 1..=depth {
            let (lh, lw) = (h >> l, w >> l);
            let prev = &cache.enc[l - 1];
            let pooled = conv::avg_pool(prev, self.layers[l - 1].out_ch, lh * 2, lw * 2);
            let mut e = run(&self.layers[l], &pooled, lh, lw, &mut cache);
            relu_in_place(&mut e);
            cache.enc.push(e);
        }
        let mut d = cache.enc[depth].clone();
        for (step, l) in (0..depth).rev().enumerate() {
            let layer = &self.layers[depth + 1 + step];
            let (lh, lw) = (h >> l, w >> l);
            let up = conv::upsample(&d, layer.in_ch, lh / 2, lw / 2);
            let mut z = run(layer, &up, lh, lw, &mut cache);
            relu_in_place(&mut z);
            d = z.iter().zip(&cache.enc[l]).map(|(&a, &b)| a + b).collect();
            if keep {
                cache.dec[l] = z;
            }
        }
        let head = self.layers.last().expect("head layer");
        let logits = run(head, &d, h, w, &mut cache);
        if !keep {
            cache.enc.clear();
        }
        Ok((logits, cache))
    }

    /// Parameter gradients of `sum(upstream * logits)`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<Gradients<T>> {
        let (h, w) = (cache.height, cache.width);
        if upstream.len() != 2 * h * w {
            return Err(Error::LengthMismatch {
                expected: 2 * h * w,
                actual: upstream.len(),
            });
        }
        if cache.padded.len() != self.layers.len() {
            return Err(Error::InvalidArgument("forward cache is incomplete".into()));
        }
        let depth = self.config.depth;
        let padding = self.config.padding;
        let mut grads = Gradients::zeros_like(self);
        let n_layers = self.layers.len();

        let back =
            |idx: usize, g: &[T], lh: usize, lw: usize, want: bool, grads: &mut Gradients<T>| {
                let layer = &self.layers[idx];
                let (dw, db) = &mut grads.layers[idx];
                layer
                    .backward_padded(&cache.padded[idx], g, lh, lw, dw, db, want)
                    .map(|dpad| layer.unpad_grad(&dpad, lh, lw, padding))
            };

        // head
        let mut g_d = back(n_layers - 1, upstream, h, w, true, &mut grads).expect("input grad");
        let mut g_enc: Vec<Vec<T>> = cache.enc.iter().map(|e| vec![T::zero(); e.len()]).collect();
        // decoder, shallowest first
        for l in 0..depth {
            let idx = depth + 1 + (depth - 1 - l);
            let (lh, lw) = (h >> l, w >> l);
            g_enc[l].iter_mut().zip(&g_d).for_each(|(a, &v)| *a += v);
            relu_mask_in_place(&mut g_d, &cache.dec[l]);
            let g_up = back(idx, &g_d, lh, lw, true, &mut grads).expect("input grad");
            g_d = conv::upsample_backward(&g_up, self.layers[idx].in_ch, lh / 2, lw / 2);
        }
        g_enc[depth]
            .iter_mut()
            .zip(&g_d)
            .for_each(|(a, &v)| *a += v);
        // encoder, deepest first
        for l in (0..=depth).rev() {
            let (lh, lw) = (h >> l, w >> l);
            let mut g = std::mem::take(&mut g_enc[l]);
            relu_mask_in_place(&mut g, &cache.enc[l]);
            let g_in = back(l, &g, lh, lw, l > 0, &mut grads);
            if let Some(g_pool) = g_in {
                let g_prev =
                    conv::avg_pool_backward(&g_pool, self.layers[l - 1].out_ch, lh * 2, lw * 2);
                g_enc[l - 1]
                    .iter_mut()
                    .zip(&g_prev)
                    .for_each(|(a, &v)| *a += v);
            }
        }
        Ok(grads)
    }

    /// Whole-image logits computed tile by tile. Tiles are `chunk` pixels
    /// square (clipped at the border) and read `tile_overlap()` extra pixels
    /// on each side, which makes the result identical to [`Self::forward`]
    /// under zero padding.
    pub fn forward_tiled(&self, input: &[T], h: usize, w: usize, chunk: usize) -> Result<Vec<T>> {
        self.check_input(input, h, w)?;
        let m = self.config.size_multiple();
        if chunk == 0 || !chunk.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "tile size {chunk} must be a positive multiple of {m}"
            )));
        }
        if self.config.padding != Padding::Zero {
            return Err(Error::InvalidArgument(
                "tiled inference requires zero padding".into(),
            ));
        }
        let c = self.config.in_channels;
        let overlap = self.config.tile_overlap();
        let mut logits = vec![T::zero(); 2 * h * w];
        for y0 in (0..h).step_by(chunk) {
            for x0 in (0..w).step_by(chunk) {
                let (y1, x1) = ((y0 + chunk).min(h), (x0 + chunk).min(w));
                let (ty0, tx0) = (y0.saturating_sub(overlap), x0.saturating_sub(overlap));
                let (ty1, tx1) = ((y1 + overlap).min(h), (x1 + overlap).min(w));
                let (th, tw) = (ty1 - ty0, tx1 - tx0);
                let mut tile = Vec::with_capacity(c * th * tw);
                for ch in 0..c {
                    for y in ty0..ty1 {
                        let row = (ch * h + y) * w;
                        tile.extend_from_slice(&input[row + tx0..row + tx1]);
                    }
                }
                let out = self.forward(&tile, th, tw)?;
                for k in 0..2 {
                    for y in y0..y1 {
                        let src = (k * th + y - ty0) * tw + (x0 - tx0);
                        let dst = (k * h + y) * w + x0;
                        logits[dst..dst + (x1 - x0)].copy_from_slice(&out[src..src + (x1 - x0)]);
                    }
                }
            }
        }
        Ok(logits)
    }
}

/// Converts network output to a [`LogitMap`].
pub fn to_logit_map<T: Real>(logits: &[T], h: usize, w: usize) -> Result<LogitMap> {
    LogitMap::new(h, w, logits.iter().map(|v| v.to_f64()).collect())
}

/// Casts an `f32` image to the network scalar type.
pub fn image_as<T: Real>(pixels: &[f32]) -> Vec<T> {
    pixels.iter().map(|&v| T::from_f64(v as f64)).collect()
}

/// Plain SGD with optional heavy-ball momentum and global gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStep {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global L2 bound on the gradient; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainStep {
    fn default() -> Self {
        TrainStep {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl TrainStep {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `v <- momentum v + g; p <- p - lr v` elementwise.
pub fn sgd_update<T: Real>(
    params: &mut [T],
    velocity: &mut [T],
    grads: &[T],
    learning_rate: f64,
    momentum: f64,
) {
    let (lr, mu) = (T::from_f64(learning_rate), T::from_f64(momentum));
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
}

/// Optimizer state owned by the training worker.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub step: TrainStep,
    velocity: Gradients<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(net: &Network<T>, step: TrainStep) -> Result<Self> {
        step.validate()?;
        Ok(Sgd {
            step,
            velocity: Gradients::zeros_like(net),
        })
    }

    /// Clips `grads` in place and updates `net`; returns the pre-clip norm.
    pub fn apply(&mut self, net: &mut Network<T>, grads: &mut Gradients<T>) -> f64 {
        let norm = if self.step.clip_norm > 0.0 {
            grads.clip_norm(self.step.clip_norm)
        } else {
            grads.norm()
        };
        for ((layer, (gw, gb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.velocity.layers.iter_mut())
        {
            sgd_update(
                &mut layer.weight,
                vw,
                gw,
                self.step.learning_rate,
                self.step.momentum,
            );
            sgd_update(
                &mut layer.bias,
                vb,
                gb,
                self.step.learning_rate,
                self.step.momentum,
            );
        }
        norm
    }
}
