//! Fixed-graph convolutional network written from scratch.
//!
//! Encoder: four 3×3 stride-2 convolutions with ReLU, then a linear
//! projection to the latent. Decoder: linear expansion with ReLU, then four
//! stages of nearest-neighbour resize to the mirrored encoder size and a
//! stride-1 3×3 convolution (ReLU on all but the last). Head: three ReLU
//! layers and a `scale·tanh` output. The perception variant feeds the head
//! with the latent and emits point features; the end-to-end variant feeds it
//! with the latent concatenated with the joint positions and emits joint
//! velocities.
//!
//! Everything is generic over [`Real`] so the same graph runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod adam;
mod augment;
mod io;
pub mod ops;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use nalgebra::DVector;
use rand::Rng;
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamConfig};
pub use augment::{augment, AugmentConfig};
pub use io::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::control::FeatureVector;
use crate::error::{Error, Result};
use crate::rng;
use crate::sim::ImageTensor;
use ops::{conv_backward, conv_forward, linear_backward, linear_forward, relu_backward_inplace, relu_inplace, resize_nearest, resize_nearest_backward, ConvShape};

/// Floating-point element type of a network instance.
pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// Strided GEMM, see `matrixmultiply::sgemm`.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m×k`, `k×n` and `m×n`
    /// matrices, the last one writable and not aliasing the others.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

pub const ENCODER_LAYERS: usize = 4;
pub const DECODER_LAYERS: usize = 4;
pub const HEAD_LAYERS: usize = 3;
pub const LATENT: usize = 64;

/// What the head emits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// `features` point coordinates scaled by `alpha`.
    Perception { features: usize, alpha: f64 },
    /// `joints` velocities scaled by `clamp`, from latent ⊕ q.
    EndToEnd { joints: usize, clamp: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub enc_channels: [usize; ENCODER_LAYERS],
    pub head_width: usize,
    pub variant: Variant,
}

impl Arch {
    pub fn perception(height: usize, width: usize, channels: usize, features: usize, alpha: f64) -> Self {
        Self {
            height,
            width,
            channels,
            enc_channels: [8, 16, 32, 64],
            head_width: 64,
            variant: Variant::Perception { features, alpha },
        }
    }

    pub fn end_to_end(height: usize, width: usize, channels: usize, joints: usize, clamp: f64) -> Self {
        Self {
            variant: Variant::EndToEnd { joints, clamp },
            ..Self::perception(height, width, channels, 0, 1.0)
        }
    }

    /// Spatial size at the encoder input and after each convolution.
    pub fn enc_sizes(&self) -> [(usize, usize); ENCODER_LAYERS + 1] {
        let mut out = [(self.height, self.width); ENCODER_LAYERS + 1];
        for i in 0..ENCODER_LAYERS {
            out[i + 1] = self.enc_conv(i).out_size();
        }
        out
    }

    fn enc_conv(&self, i: usize) -> ConvShape {
        let (h, w) = if i == 0 {
            (self.height, self.width)
        } else {
            self.enc_conv(i - 1).out_size()
        };
        ConvShape {
            h,
            w,
            cin: if i == 0 { self.channels } else { self.enc_channels[i - 1] },
            cout: self.enc_channels[i],
            k: 3,
            stride: 2,
        }
    }

    fn dec_conv(&self, j: usize) -> ConvShape {
        let sizes = self.enc_sizes();
        let (h, w) = sizes[ENCODER_LAYERS - 1 - j];
        let cin = self.enc_channels[ENCODER_LAYERS - 1 - j];
        let cout = if j + 1 == DECODER_LAYERS {
            self.channels
        } else {
            self.enc_channels[ENCODER_LAYERS - 2 - j]
        };
        ConvShape {
            h,
            w,
            cin,
            cout,
            k: 3,
            stride: 1,
        }
    }

    /// Length of the flattened last encoder map.
    pub fn flat_len(&self) -> usize {
        let (h, w) = self.enc_sizes()[ENCODER_LAYERS];
        h * w * self.enc_channels[ENCODER_LAYERS - 1]
    }

    pub fn head_input(&self) -> usize {
        match self.variant {
            Variant::Perception { .. } => LATENT,
            Variant::EndToEnd { joints, .. } => LATENT + joints,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.variant {
            Variant::Perception { features, .. } => features,
            Variant::EndToEnd { joints, .. } => joints,
        }
    }

    pub fn output_scale(&self) -> f64 {
        match self.variant {
            Variant::Perception { alpha, .. } => alpha,
            Variant::EndToEnd { clamp, .. } => clamp,
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Ordered `(name, shape, fan_in, relu_follows)` of every tensor.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>, usize, bool)> {
        let mut v = Vec::new();
        let conv = |v: &mut Vec<_>, name: String, s: ConvShape, relu: bool| {
            v.push((format!("{name}.kernel"), vec![s.k, s.k, s.cin, s.cout], s.patch_len(), relu));
            v.push((format!("{name}.bias"), vec![s.cout], s.patch_len(), relu));
        };
        for i in 0..ENCODER_LAYERS {
            conv(&mut v, format!("enc{i}"), self.enc_conv(i), true);
        }
        let flat = self.flat_len();
        let dense = |v: &mut Vec<_>, name: &str, i: usize, o: usize, relu: bool| {
            v.push((format!("{name}.weight"), vec![i, o], i, relu));
            v.push((format!("{name}.bias"), vec![o], i, relu));
        };
        dense(&mut v, "bottleneck", flat, LATENT, false);
        dense(&mut v, "expand", LATENT, flat, true);
        for j in 0..DECODER_LAYERS {
            conv(&mut v, format!("dec{j}"), self.dec_conv(j), j + 1 < DECODER_LAYERS);
        }
        let mut width = self.head_input();
        for l in 0..HEAD_LAYERS {
            dense(&mut v, &format!("head{l}"), width, self.head_width, true);
            width = self.head_width;
        }
        dense(&mut v, "out", width, self.outputs(), false);
        v
    }

    /// Hex SHA-256 of the variant and every tensor name and shape.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let kind = match self.variant {
            Variant::Perception { .. } => "perception",
            Variant::EndToEnd { .. } => "end_to_end",
        };
        h.update(kind.as_bytes());
        for (name, shape, _, _) in self.tensor_specs() {
            h.update(format!("|{name}:{shape:?}").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One-line text form stored in weight files.
    pub fn describe(&self) -> String {
        let c = self.enc_channels;
        let variant = match self.variant {
            Variant::Perception { features, alpha } => format!("perception {features} {alpha:?}"),
            Variant::EndToEnd { joints, clamp } => format!("end_to_end {joints} {clamp:?}"),
        };
        format!(
            "{} {} {} {} {} {} {} {} {}",
            self.height, self.width, self.channels, c[0], c[1], c[2], c[3], self.head_width, variant
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad architecture description '{text}'"));
        let t: Vec<&str> = text.split_whitespace().collect();
        if t.len() != 11 {
            return Err(bad());
        }
        let u = |i: usize| t[i].parse::<usize>().map_err(|_| bad());
        let count = u(9)?;
        let scale = t[10].parse::<f64>().map_err(|_| bad())?;
        let variant = match t[8] {
            "perception" => Variant::Perception {
                features: count,
                alpha: scale,
            },
            "end_to_end" => Variant::EndToEnd {
                joints: count,
                clamp: scale,
            },
            _ => return Err(bad()),
        };
        Ok(Self {
            height: u(0)?,
            width: u(1)?,
            channels: u(2)?,
            enc_channels: [u(3)?, u(4)?, u(5)?, u(6)?],
            head_width: u(7)?,
            variant,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered named tensors of one architecture. Also used as the gradient
/// buffer (same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub arch: Arch,
    pub tensors: Vec<Tensor<T>>,
}

// Tensor slots in `tensor_specs` order.
const fn enc_slot(i: usize) -> usize {
    2 * i
}
const BOTTLENECK: usize = 2 * ENCODER_LAYERS;
const EXPAND: usize = BOTTLENECK + 2;
const fn dec_slot(j: usize) -> usize {
    EXPAND + 2 + 2 * j
}
const fn head_slot(l: usize) -> usize {
    dec_slot(DECODER_LAYERS) + 2 * l
}
const OUT: usize = head_slot(HEAD_LAYERS);

impl<T: Real> ModelWeights<T> {
    pub fn zeros(arch: &Arch) -> Self {
        Self {
            arch: arch.clone(),
            tensors: arch
                .tensor_specs()
                .into_iter()
                .map(|(name, shape, _, _)| Tensor {
                    data: vec![T::zero(); shape.iter().product()],
                    name,
                    shape,
                })
                .collect(),
        }
    }

    /// Uniform fan-in initialisation: bound `√(6/fan_in)` before a ReLU,
    /// `√(3/fan_in)` otherwise; zero biases. Values are drawn in `f64`, so
    /// `f32` and `f64` instances of one seed agree.
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut w = Self::zeros(arch);
        for (idx, ((name, _, fan_in, relu), t)) in arch.tensor_specs().into_iter().zip(&mut w.tensors).enumerate() {
            if name.ends_with(".bias") {
                continue;
            }
            let bound = ((if relu { 6.0 } else { 3.0 }) / fan_in as f64).sqrt();
            let mut r = rng::stream(seed, rng::domain::INIT, idx as u64);
            for v in &mut t.data {
                *v = T::of(r.random_range(-bound..bound));
            }
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn data(&self, slot: usize) -> &[T] {
        &self.tensors[slot].data
    }

    fn pair_mut(&mut self, slot: usize) -> (&mut [T], &mut [T]) {
        let (a, b) = self.tensors.split_at_mut(slot + 1);
        (&mut a[slot].data, &mut b[0].data)
    }
}

/// Activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    patches: Vec<Vec<T>>,
    /// Post-ReLU output of each convolution.
    maps: Vec<Vec<T>>,
    pub latent: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Vec<T>,
    hidden: Vec<Vec<T>>,
    /// `tanh` of the output pre-activation.
    tanh: Vec<T>,
    pub output: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    input: Vec<T>,
    expanded: Vec<T>,
    patches: Vec<Vec<T>>,
    maps: Vec<Vec<T>>,
}

impl<T: Real> DecoderCache<T> {
    /// Last-layer output before clamping.
    pub fn raw_output(&self) -> &[T] {
        self.maps.last().expect("decoder has layers")
    }
}

/// Recorded forward pass of one image.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    pub encoder: EncoderCache<T>,
    pub head: Option<HeadCache<T>>,
    pub decoder: Option<DecoderCache<T>>,
}

impl<T: Real> Graph<T> {
    /// Hash of every ReLU on/off state; equal signatures mean the graph is
    /// locally linear between the two weight settings that produced them.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |vals: &[T]| {
            for v in vals {
                h ^= (*v > T::zero()) as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.encoder.maps.iter().for_each(|m| feed(m));
        if let Some(hd) = &self.head {
            hd.hidden.iter().for_each(|m| feed(m));
        }
        if let Some(d) = &self.decoder {
            feed(&d.expanded);
            d.maps[..DECODER_LAYERS - 1].iter().for_each(|m| feed(m));
        }
        h
    }
}

impl<T: Real> ModelWeights<T> {
    fn check_image(&self, image: &[T]) -> Result<()> {
        if image.len() != self.arch.image_len() {
            return Err(Error::ShapeMismatch(format!(
                "image has {} values, network expects {}x{}x{}",
                image.len(),
                self.arch.height,
                self.arch.width,
                self.arch.channels
            )));
        }
        Ok(())
    }

    pub fn encoder_forward(&self, image: &[T]) -> Result<EncoderCache<T>> {
        self.check_image(image)?;
        let mut patches = Vec::with_capacity(ENCODER_LAYERS);
        let mut maps: Vec<Vec<T>> = Vec::with_capacity(ENCODER_LAYERS);
        for i in 0..ENCODER_LAYERS {
            let x = if i == 0 { image } else { &maps[i - 1] };
            let (mut y, p) = conv_forward(x, &self.arch.enc_conv(i), self.data(enc_slot(i)), self.data(enc_slot(i) + 1));
            relu_inplace(&mut y);
            patches.push(p);
            maps.push(y);
        }
        let latent = linear_forward(&maps[ENCODER_LAYERS - 1], self.data(BOTTLENECK), self.data(BOTTLENECK + 1));
        Ok(EncoderCache { patches, maps, latent })
    }

    pub fn head_forward(&self, input: &[T]) -> Result<HeadCache<T>> {
        if input.len() != self.arch.head_input() {
            return Err(Error::ShapeMismatch(format!(
                "head input has {} values, expected {}",
                input.len(),
                self.arch.head_input()
            )));
        }
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(HEAD_LAYERS);
        for l in 0..HEAD_LAYERS {
            let x = if l == 0 { input } else { &hidden[l - 1] };
            let mut y = linear_forward(x, self.data(head_slot(l)), self.data(head_slot(l) + 1));
            relu_inplace(&mut y);
            hidden.push(y);
        }
        let pre = linear_forward(&hidden[HEAD_LAYERS - 1], self.data(OUT), self.data(OUT + 1));
        let scale = T::of(self.arch.output_scale());
        let tanh: Vec<T> = pre.iter().map(|v| v.tanh()).collect();
        let output = tanh.iter().map(|v| *v * scale).collect();
        Ok(HeadCache {
            input: input.to_vec(),
            hidden,
            tanh,
            output,
        })
    }

    pub fn decoder_forward(&self, latent: &[T]) -> Result<DecoderCache<T>> {
        if latent.len() != LATENT {
            return Err(Error::ShapeMismatch(format!("latent has {} values, expected {LATENT}", latent.len())));
        }
        let mut expanded = linear_forward(latent, self.data(EXPAND), self.data(EXPAND + 1));
        relu_inplace(&mut expanded);
        let sizes = self.arch.enc_sizes();
        let mut patches = Vec::with_capacity(DECODER_LAYERS);
        let mut maps: Vec<Vec<T>> = Vec::with_capacity(DECODER_LAYERS);
        for j in 0..DECODER_LAYERS {
            let s = self.arch.dec_conv(j);
            let (hi, wi) = sizes[ENCODER_LAYERS - j];
            let x = if j == 0 { &expanded } else { &maps[j - 1] };
            let up = resize_nearest(x, hi, wi, s.cin, s.h, s.w);
            let (mut y, p) = conv_forward(&up, &s, self.data(dec_slot(j)), self.data(dec_slot(j) + 1));
            if j + 1 < DECODER_LAYERS {
                relu_inplace(&mut y);
            }
            patches.push(p);
            maps.push(y);
        }
        Ok(DecoderCache {
            input: latent.to_vec(),
            expanded,
            patches,
            maps,
        })
    }

    /// Records a forward pass. `q` is required by (and only allowed for)
    /// the end-to-end variant.
    pub fn forward(&self, image: &[T], q: Option<&[T]>, with_head: bool, with_decoder: bool) -> Result<Graph<T>> {
        let encoder = self.encoder_forward(image)?;
        let head = if with_head {
            let input = match (self.arch.variant, q) {
                (Variant::Perception { .. }, None) => encoder.latent.clone(),
                (Variant::EndToEnd { .. }, Some(q)) => encoder.latent.iter().chain(q).copied().collect(),
                _ => return Err(Error::ShapeMismatch("joint input does not match the network variant".into())),
            };
            Some(self.head_forward(&input)?)
        } else {
            None
        };
        let decoder = if with_decoder {
            Some(self.decoder_forward(&encoder.latent)?)
        } else {
            None
        };
        Ok(Graph { encoder, head, decoder })
    }

    /// Reverse-mode pass for one recorded graph, given the loss gradient
    /// with respect to the head output and/or the raw (pre-clamp)
    /// reconstruction. Gradients are accumulated into `grads`.
    pub fn backward(&self, graph: &Graph<T>, d_output: Option<&[T]>, d_recon: Option<&[T]>, grads: &mut ModelWeights<T>) -> Result<()> {
        let mut d_latent = vec![T::zero(); LATENT];
        if let Some(d_out) = d_output {
            let cache = graph.head.as_ref().ok_or(Error::GraphNotRecorded("head"))?;
            let d_in = self.head_backward(cache, d_out, grads);
            for (a, b) in d_latent.iter_mut().zip(&d_in) {
                *a += *b;
            }
        }
        if let Some(d_rec) = d_recon {
            let cache = graph.decoder.as_ref().ok_or(Error::GraphNotRecorded("decoder"))?;
            let d = self.decoder_backward(cache, d_rec, grads);
            for (a, b) in d_latent.iter_mut().zip(&d) {
                *a += *b;
            }
        }
        self.encoder_backward(&graph.encoder, &d_latent, grads);
        Ok(())
    }

    /// Returns the gradient with respect to the head input.
    pub fn head_backward(&self, cache: &HeadCache<T>, d_out: &[T], grads: &mut ModelWeights<T>) -> Vec<T> {
        let scale = T::of(self.arch.output_scale());
        let d_pre: Vec<T> = d_out
            .iter()
            .zip(&cache.tanh)
            .map(|(g, t)| *g * scale * (T::one() - *t * *t))
            .collect();
        let (dw, db) = grads.pair_mut(OUT);
        let mut d = linear_backward(&d_pre, &cache.hidden[HEAD_LAYERS - 1], self.data(OUT), dw, db);
        for l in (0..HEAD_LAYERS).rev() {
            relu_backward_inplace(&mut d, &cache.hidden[l]);
            let x = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            let (dw, db) = grads.pair_mut(head_slot(l));
            d = linear_backward(&d, x, self.data(head_slot(l)), dw, db);
        }
        d
    }

    pub fn decoder_backward(&self, cache: &DecoderCache<T>, d_recon: &[T], grads: &mut ModelWeights<T>) -> Vec<T> {
        let sizes = self.arch.enc_sizes();
        let mut d = d_recon.to_vec();
        for j in (0..DECODER_LAYERS).rev() {
            if j + 1 < DECODER_LAYERS {
                relu_backward_inplace(&mut d, &cache.maps[j]);
            }
            let s = self.arch.dec_conv(j);
            let (dk, db) = grads.pair_mut(dec_slot(j));
            let d_up = conv_backward(&d, &cache.patches[j], &s, self.data(dec_slot(j)), dk, db, true).expect("dx requested");
            let (hi, wi) = sizes[ENCODER_LAYERS - j];
            d = resize_nearest_backward(&d_up, hi, wi, s.cin, s.h, s.w);
        }
        relu_backward_inplace(&mut d, &cache.expanded);
        let (dw, db) = grads.pair_mut(EXPAND);
        linear_backward(&d, &cache.input, self.data(EXPAND), dw, db)
    }

    pub fn encoder_backward(&self, cache: &EncoderCache<T>, d_latent: &[T], grads: &mut ModelWeights<T>) {
        let (dw, db) = grads.pair_mut(BOTTLENECK);
        let mut d = linear_backward(d_latent, &cache.maps[ENCODER_LAYERS - 1], self.data(BOTTLENECK), dw, db);
        for i in (0..ENCODER_LAYERS).rev() {
            relu_backward_inplace(&mut d, &cache.maps[i]);
            let (dk, db) = grads.pair_mut(enc_slot(i));
            match conv_backward(&d, &cache.patches[i], &self.arch.enc_conv(i), self.data(enc_slot(i)), dk, db, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

fn image_data<T: Real>(image: &ImageTensor) -> Vec<T> {
    image.data.iter().map(|v| T::of(*v as f64)).collect()
}

impl ModelWeights<f32> {
    /// Latent code of an image.
    pub fn encode(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self.encoder_forward(&image.data)?.latent)
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn decode(&self, latent: &[f32]) -> Result<ImageTensor> {
        let cache = self.decoder_forward(latent)?;
        let data = cache.raw_output().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ImageTensor::from_data(self.arch.height, self.arch.width, self.arch.channels, data)
    }

    pub fn head(&self, latent: &[f32]) -> Result<FeatureVector> {
        if !matches!(self.arch.variant, Variant::Perception { .. }) {
            return Err(Error::ShapeMismatch("head features need the perception variant".into()));
        }
        let out = self.head_forward(latent)?.output;
        FeatureVector::from_slice(&out.iter().map(|v| *v as f64).collect::<Vec<_>>())
    }

    /// `m(i) = h(ε(i))`.
    pub fn features(&self, image: &ImageTensor) -> Result<FeatureVector> {
        self.head(&self.encode(image)?)
    }

    pub fn e2e_forward(&self, image: &ImageTensor, q: &DVector<f64>) -> Result<DVector<f64>> {
        let Variant::EndToEnd { joints, .. } = self.arch.variant else {
            return Err(Error::ShapeMismatch("e2e_forward needs the end-to-end variant".into()));
        };
        if q.len() != joints {
            return Err(Error::ShapeMismatch(format!("q has {} entries, expected {joints}", q.len())));
        }
        let qf: Vec<f32> = q.iter().map(|v| *v as f32).collect();
        let g = self.forward(&image_data(image), Some(&qf), true, false)?;
        let out = g.head.expect("head requested").output;
        Ok(DVector::from_iterator(out.len(), out.iter().map(|v| *v as f64)))
    }
}

#[cfg(test)]
mod tests;
