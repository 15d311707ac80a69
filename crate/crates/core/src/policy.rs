//! Conditional-VAE action-chunking policy with a small convolutional image
//! encoder, trained with hand-written reverse-mode gradients.
//!
//! The network is generic over the float type so the same code runs in
//! 32-bit for training and 64-bit for finite-difference verification.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Write;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Image;
use crate::dataset::{sample_batch, ActionChunk, Observation, TrainingSample, ACTION_DIM};
use crate::error::{Error, Result};

pub trait Real: Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

fn cst<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

pub const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Chunk length.
    pub k: usize,
    pub z_dim: usize,
    /// Side of the square input images.
    pub image_size: u32,
    /// Output channels of the stride-2 3x3 convolutions.
    pub conv_channels: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// KL weight.
    pub eta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 20,
            z_dim: 32,
            image_size: 128,
            conv_channels: vec![16, 32, 64, 128],
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            eta: 10.0,
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 20_000,
            seed: 0,
            log_every: 100,
        }
    }
}

impl PolicyConfig {
    /// Small profile sized for single-core CPU experiments.
    pub fn desk() -> Self {
        PolicyConfig {
            image_size: 32,
            conv_channels: vec![8, 16, 16, 16],
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 128],
            learning_rate: 5e-3,
            batch_size: 32,
            steps: 2000,
            ..PolicyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.k > 0
            && self.z_dim > 0
            && self.image_size > 0
            && !self.conv_channels.is_empty()
            && self.conv_channels.iter().chain(&self.encoder_hidden).chain(&self.decoder_hidden).all(|&c| c > 0)
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.log_every > 0;
        if !positive || self.eta.is_nan() || self.eta < 0.0 {
            return Err(Error::Config(format!("invalid policy configuration {self:?}")));
        }
        let mut s = self.image_size;
        for _ in &self.conv_channels {
            if s < 2 || !s.is_multiple_of(2) {
                return Err(Error::Config(format!("image size {} does not halve {} times", self.image_size, self.conv_channels.len())));
            }
            s /= 2;
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.k * ACTION_DIM
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    /// Input side length.
    size: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    nin: usize,
    nout: usize,
}

#[derive(Clone, Debug)]
struct Arch {
    convs: Vec<Conv>,
    enc: Vec<Dense>,
    dec: Vec<Dense>,
    feat: usize,
    z: usize,
    chunk: usize,
    total: usize,
    layers: Vec<LayerEntry>,
}

impl Arch {
    fn new(cfg: &PolicyConfig) -> Arch {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let e = LayerEntry { name, shape, offset };
            offset += e.len();
            let o = e.offset;
            layers.push(e);
            o
        };
        let mut convs = Vec::new();
        let (mut cin, mut size) = (3, cfg.image_size as usize);
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            let w = push(format!("conv{i}.weight"), vec![cout, cin, 3, 3]);
            let b = push(format!("conv{i}.bias"), vec![cout]);
            convs.push(Conv { w, b, cin, cout, size });
            cin = cout;
            size /= 2;
        }
        let feat = 2 * cin;
        let chunk = cfg.chunk_len();
        let mut mlp = |prefix: &str, nin: usize, hidden: &[usize], nout: usize| {
            let mut out = Vec::new();
            let mut n = nin;
            for (i, &h) in hidden.iter().chain(std::iter::once(&nout)).enumerate() {
                let w = push(format!("{prefix}{i}.weight"), vec![h, n]);
                let b = push(format!("{prefix}{i}.bias"), vec![h]);
                out.push(Dense { w, b, nin: n, nout: h });
                n = h;
            }
            out
        };
        let enc = mlp("enc", chunk + ACTION_DIM, &cfg.encoder_hidden, 2 * cfg.z_dim);
        let dec = mlp("dec", feat + ACTION_DIM + cfg.z_dim, &cfg.decoder_hidden, chunk);
        Arch { convs, enc, dec, feat, z: cfg.z_dim, chunk, total: offset, layers }
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-dimension affine normalization of proprioception and actions, fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub proprio_mean: Vec<f64>,
    pub proprio_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

/// Lower bound on fitted standard deviations.
const STD_FLOOR: f64 = 1e-2;

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            proprio_mean: vec![0.0; ACTION_DIM],
            proprio_std: vec![1.0; ACTION_DIM],
            action_mean: vec![0.0; ACTION_DIM],
            action_std: vec![1.0; ACTION_DIM],
        }
    }

    pub fn fit(samples: &[TrainingSample]) -> Self {
        fn stats<'a>(rows: impl Iterator<Item = &'a [f64; ACTION_DIM]>) -> (Vec<f64>, Vec<f64>) {
            let mut n = 0.0;
            let mut sum = [0.0; ACTION_DIM];
            let mut sq = [0.0; ACTION_DIM];
            for r in rows {
                n += 1.0;
                for i in 0..ACTION_DIM {
                    sum[i] += r[i];
                    sq[i] += r[i] * r[i];
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1.0)).collect();
            let std = (0..ACTION_DIM).map(|i| (sq[i] / n.max(1.0) - mean[i] * mean[i]).max(0.0).sqrt().max(STD_FLOOR)).collect();
            (mean, std)
        }
        let (proprio_mean, proprio_std) = stats(samples.iter().map(|s| &s.observation.proprio));
        let (action_mean, action_std) = stats(samples.iter().flat_map(|s| s.target.iter()));
        Normalizer { proprio_mean, proprio_std, action_mean, action_std }
    }

    fn proprio<F: Real>(&self, p: &[f64; ACTION_DIM]) -> Vec<F> {
        (0..ACTION_DIM).map(|i| cst((p[i] - self.proprio_mean[i]) / self.proprio_std[i])).collect()
    }

    fn chunk<F: Real>(&self, c: &[[f64; ACTION_DIM]]) -> Vec<F> {
        c.iter().flat_map(|a| (0..ACTION_DIM).map(move |i| cst((a[i] - self.action_mean[i]) / self.action_std[i]))).collect()
    }

    fn denormalize<F: Real>(&self, out: &[F]) -> ActionChunk {
        out.chunks_exact(ACTION_DIM)
            .map(|a| {
                let mut r = [0.0; ACTION_DIM];
                for i in 0..ACTION_DIM {
                    r[i] = a[i].to_f64().expect("finite") * self.action_std[i] + self.action_mean[i];
                }
                r
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub layers: Vec<LayerEntry>,
    pub values: Vec<f32>,
    pub norm: Normalizer,
    pub trained: bool,
    /// Free-form metadata recorded in the parameter file header.
    pub tags: BTreeMap<String, String>,
}

impl PolicyParams {
    /// Seeded uniform fan-in initialization; biases start at zero.
    pub fn init(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut values = vec![0f32; arch.total];
        for e in &arch.layers {
            if e.name.ends_with(".weight") {
                let fan_in: usize = e.shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut values[e.offset..e.offset + e.len()] {
                    *v = rng.random_range(-bound..bound) as f32;
                }
            }
        }
        Ok(PolicyParams { config: config.clone(), layers: arch.layers, values, norm: Normalizer::identity(), trained: false, tags: BTreeMap::new() })
    }

    fn arch(&self) -> Result<Arch> {
        let arch = Arch::new(&self.config);
        if arch.total != self.values.len() || arch.layers != self.layers {
            return Err(Error::Shape(format!("parameter vector has {} values, layout needs {}", self.values.len(), arch.total)));
        }
        Ok(arch)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

// ---------------------------------------------------------------------------
// Forward and backward passes

fn image_input<F: Real>(img: &Image, size: u32) -> Result<Vec<F>> {
    if img.width != size || img.height != size {
        return Err(Error::Shape(format!("image is {}x{}, policy expects {size}x{size}", img.width, img.height)));
    }
    let n = (size * size) as usize;
    let mut out = vec![F::zero(); 3 * n];
    let scale = cst::<F>(1.0 / 255.0);
    let half = cst::<F>(0.5);
    for p in 0..n {
        for c in 0..3 {
            out[c * n + p] = F::from_u8(img.data[p * 3 + c]).expect("byte") * scale - half;
        }
    }
    Ok(out)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// Output indices `x` whose tap `2x + k - 1` lands inside an input row of length `s`.
fn valid_taps(k: usize, s: usize, o: usize) -> std::ops::Range<usize> {
    let lo = usize::from(k == 0);
    let hi = ((s + 2 - k) / 2).min(o);
    lo..hi
}

/// Patch matrix of a stride-2, pad-1, 3x3 convolution: row `ci*9 + ky*3 + kx`, column `y*o + x`.
fn im2col<F: Real>(c: &Conv, input: &[F]) -> Vec<F> {
    let (s, o) = (c.size, c.size / 2);
    let mut col = vec![F::zero(); c.cin * 9 * o * o];
    for ci in 0..c.cin {
        let inp = &input[ci * s * s..(ci + 1) * s * s];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * o * o..][..o * o];
                let xs = valid_taps(kx, s, o);
                for y in valid_taps(ky, s, o) {
                    let iy = 2 * y + ky - 1;
                    let src = &inp[iy * s + 2 * xs.start + kx - 1..(iy + 1) * s];
                    for (dst, &v) in row[y * o + xs.start..y * o + xs.end].iter_mut().zip(src.iter().step_by(2)) {
                        *dst = v;
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<F: Real>(c: &Conv, col: &[F]) -> Vec<F> {
    let (s, o) = (c.size, c.size / 2);
    let mut d_in = vec![F::zero(); c.cin * s * s];
    for ci in 0..c.cin {
        let dst_plane = &mut d_in[ci * s * s..(ci + 1) * s * s];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * o * o..][..o * o];
                let xs = valid_taps(kx, s, o);
                for y in valid_taps(ky, s, o) {
                    let iy = 2 * y + ky - 1;
                    let dst = &mut dst_plane[iy * s + 2 * xs.start + kx - 1..(iy + 1) * s];
                    for (d, &v) in dst.iter_mut().step_by(2).zip(&row[y * o + xs.start..y * o + xs.end]) {
                        *d += v;
                    }
                }
            }
        }
    }
    d_in
}

/// Stride-2, pad-1, 3x3 convolution followed by tanh.
fn conv_forward<F: Real>(c: &Conv, p: &[F], input: &[F]) -> Vec<F> {
    let n = (c.size / 2) * (c.size / 2);
    let kk = c.cin * 9;
    let col = im2col(c, input);
    let mut out = vec![F::zero(); c.cout * n];
    for co in 0..c.cout {
        let plane = &mut out[co * n..(co + 1) * n];
        plane.iter_mut().for_each(|v| *v = p[c.b + co]);
        for (k, &w) in p[c.w + co * kk..c.w + (co + 1) * kk].iter().enumerate() {
            for (ov, &x) in plane.iter_mut().zip(&col[k * n..(k + 1) * n]) {
                *ov += w * x;
            }
        }
        plane.iter_mut().for_each(|v| *v = v.tanh());
    }
    out
}

/// Backward of [`conv_forward`] given the gradient w.r.t. its (post-tanh)
/// output. Accumulates parameter gradients and returns the input gradient
/// when `need_input` is set.
fn conv_backward<F: Real>(c: &Conv, p: &[F], input: &[F], output: &[F], d_out: &[F], grad: &mut [F], need_input: bool) -> Vec<F> {
    let n = (c.size / 2) * (c.size / 2);
    let kk = c.cin * 9;
    let col = im2col(c, input);
    let d_pre: Vec<F> = output.iter().zip(d_out).map(|(&a, &d)| d * (F::one() - a * a)).collect();
    let mut d_col = if need_input { vec![F::zero(); kk * n] } else { Vec::new() };
    for co in 0..c.cout {
        let dp = &d_pre[co * n..(co + 1) * n];
        let mut db = F::zero();
        for &v in dp {
            db += v;
        }
        grad[c.b + co] += db;
        for k in 0..kk {
            grad[c.w + co * kk + k] += dot(dp, &col[k * n..(k + 1) * n]);
            if need_input {
                let w = p[c.w + co * kk + k];
                for (dc, &d) in d_col[k * n..(k + 1) * n].iter_mut().zip(dp) {
                    *dc += w * d;
                }
            }
        }
    }
    if need_input {
        col2im(c, &d_col)
    } else {
        Vec::new()
    }
}

struct ImageTrace<F> {
    /// Input then every conv output.
    acts: Vec<Vec<F>>,
}

fn image_forward<F: Real>(arch: &Arch, p: &[F], input: Vec<F>) -> (Vec<F>, ImageTrace<F>) {
    let mut acts = vec![input];
    for c in &arch.convs {
        let next = conv_forward(c, p, acts.last().expect("input"));
        acts.push(next);
    }
    let last = acts.last().expect("conv output");
    let c = arch.convs.last().expect("one conv");
    let n = (c.size / 2) * (c.size / 2);
    let inv = cst::<F>(1.0 / n as f64);
    let feat = (0..c.cout)
        .map(|ch| {
            let mut s = F::zero();
            for &v in &last[ch * n..(ch + 1) * n] {
                s += v;
            }
            s * inv
        })
        .collect();
    (feat, ImageTrace { acts })
}

fn image_backward<F: Real>(arch: &Arch, p: &[F], trace: &ImageTrace<F>, d_feat: &[F], grad: &mut [F]) {
    let c = arch.convs.last().expect("one conv");
    let n = (c.size / 2) * (c.size / 2);
    let inv = cst::<F>(1.0 / n as f64);
    let mut d: Vec<F> = (0..c.cout).flat_map(|ch| std::iter::repeat_n(d_feat[ch] * inv, n)).collect();
    for (i, conv) in arch.convs.iter().enumerate().rev() {
        d = conv_backward(conv, p, &trace.acts[i], &trace.acts[i + 1], &d, grad, i > 0);
    }
}

/// Dense stack: tanh on hidden layers, linear output. Returns all activations (input first).
fn mlp_forward<F: Real>(layers: &[Dense], p: &[F], x: Vec<F>) -> Vec<Vec<F>> {
    let mut acts = vec![x];
    for (li, l) in layers.iter().enumerate() {
        let a = acts.last().expect("input");
        let mut y = vec![F::zero(); l.nout];
        for (o, yo) in y.iter_mut().enumerate() {
            let s = p[l.b + o] + dot(&p[l.w + o * l.nin..l.w + (o + 1) * l.nin], a);
            *yo = if li + 1 < layers.len() { s.tanh() } else { s };
        }
        acts.push(y);
    }
    acts
}

fn mlp_backward<F: Real>(layers: &[Dense], p: &[F], acts: &[Vec<F>], d_out: &[F], grad: &mut [F]) -> Vec<F> {
    let mut d = d_out.to_vec();
    for (li, l) in layers.iter().enumerate().rev() {
        if li + 1 < layers.len() {
            for (dv, &a) in d.iter_mut().zip(&acts[li + 1]) {
                *dv *= F::one() - a * a;
            }
        }
        let a = &acts[li];
        let mut d_in = vec![F::zero(); l.nin];
        for (o, &dv) in d.iter().enumerate() {
            grad[l.b + o] += dv;
            let row = l.w + o * l.nin;
            for (g, &x) in grad[row..row + l.nin].iter_mut().zip(a) {
                *g += dv * x;
            }
            for (di, &w) in d_in.iter_mut().zip(&p[row..row + l.nin]) {
                *di += dv * w;
            }
        }
        d = d_in;
    }
    d
}

/// Encoder mean and clamped log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats<F> {
    pub mean: Vec<F>,
    pub log_var: Vec<F>,
}

fn split_latent<F: Real>(raw: &[F], z: usize) -> LatentStats<F> {
    let lim = cst::<F>(LOGVAR_LIMIT);
    LatentStats { mean: raw[..z].to_vec(), log_var: raw[z..].iter().map(|&v| v.max(-lim).min(lim)).collect() }
}

/// Inputs of one training example in network units.
pub struct NetInputs<F> {
    pub left: Vec<F>,
    pub right: Vec<F>,
    pub proprio: Vec<F>,
    pub target: Vec<F>,
}

impl<F: Real> NetInputs<F> {
    pub fn from_sample(params: &PolicyParams, s: &TrainingSample) -> Result<Self> {
        let size = params.config.image_size;
        if s.target.len() != params.config.k {
            return Err(Error::Shape(format!("chunk of {} actions, policy k = {}", s.target.len(), params.config.k)));
        }
        Ok(NetInputs {
            left: image_input(&s.observation.left, size)?,
            right: image_input(&s.observation.right, size)?,
            proprio: params.norm.proprio(&s.observation.proprio),
            target: params.norm.chunk(&s.target),
        })
    }
}

/// Per-example loss terms and gradient accumulation. `scale` multiplies
/// both terms (1 / batch size); returns the unscaled (mse, kl).
fn example_loss<F: Real>(arch: &Arch, p: &[F], x: &NetInputs<F>, eps: &[F], eta: F, scale: F, grad: Option<&mut [F]>) -> (F, F) {
    let z = arch.z;
    // encoder: q(z | chunk, proprio)
    let enc_in: Vec<F> = x.target.iter().chain(&x.proprio).copied().collect();
    let enc_acts = mlp_forward(&arch.enc, p, enc_in);
    let raw = enc_acts.last().expect("output");
    let lat = split_latent(raw, z);
    let half = cst::<F>(0.5);
    let std: Vec<F> = lat.log_var.iter().map(|&lv| (lv * half).exp()).collect();
    let zs: Vec<F> = (0..z).map(|i| lat.mean[i] + std[i] * eps[i]).collect();
    // decoder: images, proprio, z
    let (fl, tl) = image_forward(arch, p, x.left.clone());
    let (fr, tr) = image_forward(arch, p, x.right.clone());
    let dec_in: Vec<F> = fl.iter().chain(&fr).chain(&x.proprio).chain(&zs).copied().collect();
    let dec_acts = mlp_forward(&arch.dec, p, dec_in);
    let out = dec_acts.last().expect("output");
    let n = cst::<F>(arch.chunk as f64);
    let mut mse = F::zero();
    for (&o, &t) in out.iter().zip(&x.target) {
        mse += (o - t) * (o - t);
    }
    mse = mse / n;
    let mut kl = F::zero();
    for i in 0..z {
        kl += -half * (F::one() + lat.log_var[i] - lat.mean[i] * lat.mean[i] - lat.log_var[i].exp());
    }
    let Some(grad) = grad else { return (mse, kl) };

    let two = cst::<F>(2.0);
    let d_out: Vec<F> = out.iter().zip(&x.target).map(|(&o, &t)| two * (o - t) / n * scale).collect();
    let d_dec_in = mlp_backward(&arch.dec, p, &dec_acts, &d_out, grad);
    let c = arch.feat / 2;
    image_backward(arch, p, &tl, &d_dec_in[..c], grad);
    image_backward(arch, p, &tr, &d_dec_in[c..2 * c], grad);
    let d_z = &d_dec_in[arch.feat + ACTION_DIM..];
    let lim = cst::<F>(LOGVAR_LIMIT);
    let mut d_raw = vec![F::zero(); 2 * z];
    for i in 0..z {
        d_raw[i] = d_z[i] + eta * scale * lat.mean[i];
        let raw_lv = raw[z + i];
        if raw_lv > -lim && raw_lv < lim {
            d_raw[z + i] = d_z[i] * eps[i] * half * std[i] + eta * scale * half * (lat.log_var[i].exp() - F::one());
        }
    }
    mlp_backward(&arch.enc, p, &enc_acts, &d_raw, grad);
    (mse, kl)
}

/// Batch loss `mean(MSE) + η·mean(KL)` and its gradient w.r.t. every parameter.
///
/// `eps` holds one standard-normal vector per example for the reparameterized latent.
pub fn loss<F: Real>(params: &PolicyParams, p: &[F], batch: &[&NetInputs<F>], eps: &[Vec<F>]) -> Result<LossValue<F>> {
    let arch = params.arch()?;
    if batch.is_empty() {
        return Err(Error::EmptySamples);
    }
    if p.len() != arch.total || eps.len() != batch.len() || eps.iter().any(|e| e.len() != arch.z) {
        return Err(Error::Shape("parameter, batch or noise size mismatch".into()));
    }
    let eta = cst::<F>(params.config.eta);
    let scale = cst::<F>(1.0 / batch.len() as f64);
    let mut grad = vec![F::zero(); arch.total];
    let (mut mse, mut kl) = (F::zero(), F::zero());
    for (x, e) in batch.iter().zip(eps) {
        let (m, k) = example_loss(&arch, p, x, e, eta, scale, Some(&mut grad));
        mse += m * scale;
        kl += k * scale;
    }
    Ok(LossValue { total: mse + eta * kl, mse, kl, grad })
}

#[derive(Clone, Debug)]
pub struct LossValue<F> {
    pub total: F,
    pub mse: F,
    pub kl: F,
    pub grad: Vec<F>,
}

/// Image features of a stereo pair (left then right).
pub fn image_encode<F: Real>(params: &PolicyParams, p: &[F], left: &Image, right: &Image) -> Result<Vec<F>> {
    let arch = params.arch()?;
    let size = params.config.image_size;
    let (fl, _) = image_forward(&arch, p, image_input(left, size)?);
    let (fr, _) = image_forward(&arch, p, image_input(right, size)?);
    Ok(fl.into_iter().chain(fr).collect())
}

/// Latent statistics of a (normalized) chunk and proprioception.
pub fn encode<F: Real>(params: &PolicyParams, p: &[F], chunk: &[F], proprio: &[F]) -> Result<LatentStats<F>> {
    let arch = params.arch()?;
    if chunk.len() != arch.chunk || proprio.len() != ACTION_DIM {
        return Err(Error::Shape(format!("encoder input {} + {}, expected {} + {ACTION_DIM}", chunk.len(), proprio.len(), arch.chunk)));
    }
    let acts = mlp_forward(&arch.enc, p, chunk.iter().chain(proprio).copied().collect());
    Ok(split_latent(acts.last().expect("output"), arch.z))
}

/// Raw (normalized) chunk prediction from image features, proprioception and a latent.
pub fn decode<F: Real>(params: &PolicyParams, p: &[F], features: &[F], proprio: &[F], z: &[F]) -> Result<Vec<F>> {
    let arch = params.arch()?;
    if features.len() != arch.feat || proprio.len() != ACTION_DIM || z.len() != arch.z {
        return Err(Error::Shape("decoder input size mismatch".into()));
    }
    let x = features.iter().chain(proprio).chain(z).copied().collect();
    Ok(mlp_forward(&arch.dec, p, x).pop().expect("output"))
}

/// Gradient of `Σ c·mean(encode)` w.r.t. the parameters, for verification.
pub fn encode_mean_grad<F: Real>(params: &PolicyParams, p: &[F], chunk: &[F], proprio: &[F], c: &[F]) -> Result<Vec<F>> {
    let arch = params.arch()?;
    let acts = mlp_forward(&arch.enc, p, chunk.iter().chain(proprio).copied().collect());
    let mut d = vec![F::zero(); 2 * arch.z];
    d[..arch.z].copy_from_slice(c);
    let mut grad = vec![F::zero(); arch.total];
    mlp_backward(&arch.enc, p, &acts, &d, &mut grad);
    Ok(grad)
}

/// Gradient of `Σ c·decode(image_encode(left, right), proprio, z)` w.r.t. the parameters.
pub fn decode_grad<F: Real>(params: &PolicyParams, p: &[F], left: &Image, right: &Image, proprio: &[F], z: &[F], c: &[F]) -> Result<Vec<F>> {
    let arch = params.arch()?;
    let size = params.config.image_size;
    let (fl, tl) = image_forward(&arch, p, image_input(left, size)?);
    let (fr, tr) = image_forward(&arch, p, image_input(right, size)?);
    let x = fl.iter().chain(&fr).chain(proprio).chain(z).copied().collect();
    let acts = mlp_forward(&arch.dec, p, x);
    let mut grad = vec![F::zero(); arch.total];
    let d_in = mlp_backward(&arch.dec, p, &acts, c, &mut grad);
    let h = arch.feat / 2;
    image_backward(&arch, p, &tl, &d_in[..h], &mut grad);
    image_backward(&arch, p, &tr, &d_in[h..2 * h], &mut grad);
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a policy from scratch; deterministic in `config.seed`.
pub fn train(config: &PolicyConfig, samples: &[TrainingSample]) -> Result<(PolicyParams, Vec<LossRecord>)> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut params = PolicyParams::init(config)?;
    params.norm = Normalizer::fit(samples);
    let inputs: Vec<NetInputs<f32>> = samples.iter().map(|s| NetInputs::from_sample(&params, s)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut adam = Adam::new(params.values.len());
    let mut curve = Vec::new();
    let z = config.z_dim;
    for step in 1..=config.steps {
        let batch = sample_batch(&inputs, config.batch_size, &mut rng)?;
        let eps: Vec<Vec<f32>> = (0..batch.len()).map(|_| (0..z).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let lv = loss(&params, &params.values, &batch, &eps)?;
        let grad_norm = lv.grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        if !lv.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, loss: lv.total as f64, grad_norm });
        }
        adam.update(&mut params.values, &lv.grad, config.learning_rate as f32);
        if step % config.log_every == 0 || step == config.steps {
            let rec = LossRecord { step, total: lv.total as f64, mse: lv.mse as f64, kl: lv.kl as f64 };
            log::info!("step {step}: loss {:.5} (mse {:.5}, kl {:.5})", rec.total, rec.mse, rec.kl);
            curve.push(rec);
        }
    }
    params.trained = true;
    Ok((params, curve))
}

/// Chunk prediction at the prior mean (z = 0), in action units.
pub fn infer(params: &PolicyParams, observation: &Observation) -> Result<ActionChunk> {
    if !params.trained {
        return Err(Error::Untrained);
    }
    let p = &params.values;
    let features = image_encode(params, p, &observation.left, &observation.right)?;
    let proprio: Vec<f32> = params.norm.proprio(&observation.proprio);
    let out = decode(params, p, &features, &proprio, &vec![0f32; params.config.z_dim])?;
    Ok(params.norm.denormalize(&out))
}

/// Mean squared error (normalized units) of zero-latent predictions over `samples`.
pub fn reconstruction_mse(params: &PolicyParams, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut total = 0.0;
    for s in samples {
        let pred = infer(params, &s.observation)?;
        let a: Vec<f64> = params.norm.chunk(&pred);
        let b: Vec<f64> = params.norm.chunk(&s.target);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Temporal aggregation

/// A chunk predicted at control step `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingChunk {
    pub start: usize,
    pub actions: ActionChunk,
}

/// Default decay of the aggregation weights per step of chunk age.
pub const AGGREGATION_DECAY: f64 = 0.1;

/// Weighted average over every pending chunk covering step `t`, weight
/// `exp(-m·age)` where age is `t - start`.
pub fn temporal_aggregate(pending: &[PendingChunk], t: usize, m: f64) -> Result<[f64; ACTION_DIM]> {
    let mut acc = [0.0; ACTION_DIM];
    let mut wsum = 0.0;
    for c in pending {
        if c.start > t || t - c.start >= c.actions.len() {
            continue;
        }
        let age = (t - c.start) as f64;
        let w = (-m * age).exp();
        for (a, v) in acc.iter_mut().zip(&c.actions[t - c.start]) {
            *a += w * v;
        }
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::NoCoveringChunk(t));
    }
    Ok(acc.map(|a| a / wsum))
}

// ---------------------------------------------------------------------------
// Files

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    format: String,
    trained: bool,
    config: PolicyConfig,
    norm: Normalizer,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    layers: Vec<LayerEntry>,
}

const PARAM_FORMAT: &str = "ofa-policy-1";

/// Structured-text layout header, a NUL byte, then little-endian `f32` values.
pub fn save_params(path: &Path, params: &PolicyParams) -> Result<()> {
    let header = ParamHeader {
        format: PARAM_FORMAT.into(),
        trained: params.trained,
        config: params.config.clone(),
        norm: params.norm.clone(),
        tags: params.tags.clone(),
        layers: params.layers.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut bytes = text.into_bytes();
    bytes.push(0);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nul = bytes.iter().position(|&b| b == 0).ok_or_else(|| Error::format(path, bytes.len() as u64, "missing header terminator"))?;
    let text = std::str::from_utf8(&bytes[..nul]).map_err(|e| Error::format(path, e.valid_up_to() as u64, "header is not UTF-8"))?;
    let header: ParamHeader = toml::from_str(text).map_err(|e| Error::format(path, e.span().map_or(0, |s| s.start) as u64, e.message()))?;
    if header.format != PARAM_FORMAT {
        return Err(Error::format(path, 0, format!("unsupported format `{}`", header.format)));
    }
    let blob = &bytes[nul + 1..];
    let arch = Arch::new(&header.config);
    if header.layers != arch.layers {
        return Err(Error::format(path, 0, "layer layout does not match the configuration"));
    }
    if blob.len() != arch.total * 4 {
        return Err(Error::format(path, (nul + 1) as u64, format!("blob has {} bytes, layout needs {}", blob.len(), arch.total * 4)));
    }
    let mut values = Vec::with_capacity(arch.total);
    for (i, c) in blob.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(path, (nul + 1 + 4 * i) as u64, "non-finite parameter"));
        }
        values.push(v);
    }
    Ok(PolicyParams { config: header.config, layers: header.layers, values, norm: header.norm, trained: header.trained, tags: header.tags })
}

/// Loss curve as CSV with columns step, total, mse, kl.
pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,total,mse,kl").expect("write to memory");
    for r in curve {
        writeln!(out, "{},{},{},{}", r.step, r.total, r.mse, r.kl).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            k: 3,
            z_dim: 2,
            image_size: 8,
            conv_channels: vec![2, 3],
            encoder_hidden: vec![5],
            decoder_hidden: vec![6],
            eta: 10.0,
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 10,
            seed: 7,
            log_every: 5,
        }
    }

    fn random_image(rng: &mut impl Rng, size: u32) -> Image {
        let mut img = Image::new(size, size);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        img
    }

    fn random_sample(rng: &mut impl Rng, cfg: &PolicyConfig) -> TrainingSample {
        let mut proprio = [0.0; ACTION_DIM];
        proprio.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        TrainingSample {
            observation: Observation { left: random_image(rng, cfg.image_size), right: random_image(rng, cfg.image_size), proprio },
            target: (0..cfg.k)
                .map(|_| {
                    let mut a = [0.0; ACTION_DIM];
                    a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                    a
                })
                .collect(),
        }
    }

    #[test]
    fn convolution_matches_direct_padded_sum() {
        for size in [2usize, 4, 6, 8] {
            let c = Conv { w: 0, b: 2 * 3 * 9, cin: 3, cout: 2, size };
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let p: Vec<f64> = (0..c.b + 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let input: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv_forward(&c, &p, &input);
            let o = size / 2;
            let at = |ci: usize, y: i64, x: i64| {
                if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                    0.0
                } else {
                    input[ci * size * size + y as usize * size + x as usize]
                }
            };
            for co in 0..2 {
                for y in 0..o {
                    for x in 0..o {
                        let mut acc = p[c.b + co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let w = p[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                    acc += w * at(ci, 2 * y as i64 + ky as i64 - 1, 2 * x as i64 + kx as i64 - 1);
                                }
                            }
                        }
                        assert!((got[(co * o + y) * o + x] - acc.tanh()).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn layout_sizes() {
        let cfg = tiny();
        let p = PolicyParams::init(&cfg).unwrap();
        let conv = (2 * 3 * 9 + 2) + (3 * 2 * 9 + 3);
        let enc = (5 * (36 + 12) + 5) + (4 * 5 + 4);
        let dec = (6 * (6 + 12 + 2) + 6) + (36 * 6 + 36);
        assert_eq!(p.values.len(), conv + enc + dec);
        let mut bad = cfg.clone();
        bad.image_size = 6;
        bad.conv_channels = vec![2, 2];
        assert!(matches!(PolicyParams::init(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn image_features_are_deterministic_and_ordered() {
        let cfg = tiny();
        let p = PolicyParams::init(&cfg).unwrap();
        let zero = Image::new(8, 8);
        let a = image_encode(&p, &p.values, &zero, &zero).unwrap();
        assert_eq!(a, image_encode(&p, &p.values, &zero, &zero).unwrap());
        assert_eq!(a.len(), 2 * 3);
        assert!(a.iter().all(|v| v.is_finite()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, r) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
        assert_ne!(image_encode(&p, &p.values, &l, &r).unwrap(), image_encode(&p, &p.values, &r, &l).unwrap());
        assert!(matches!(image_encode(&p, &p.values, &Image::new(4, 4), &zero), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_outputs_stay_finite_and_clamped() {
        let cfg = tiny();
        let p = PolicyParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let chunk: Vec<f32> = (0..36).map(|_| rng.random_range(-10.0..10.0)).collect();
            let prop: Vec<f32> = (0..12).map(|_| rng.random_range(-10.0..10.0)).collect();
            let s = encode(&p, &p.values, &chunk, &prop).unwrap();
            assert_eq!(s, encode(&p, &p.values, &chunk, &prop).unwrap());
            assert!(s.mean.iter().chain(&s.log_var).all(|v| v.is_finite()));
            assert!(s.log_var.iter().all(|v| v.abs() <= 10.0));
        }
        assert!(matches!(encode(&p, &p.values, &[0.0f32; 3], &[0.0; 12]), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_vanishes_at_the_prior_and_loss_is_zero_for_a_perfect_decoder() {
        let mut cfg = tiny();
        cfg.eta = 0.0;
        let mut p = PolicyParams::init(&cfg).unwrap();
        // zero the decoder output layer: prediction is exactly zero
        for e in p.layers.iter().filter(|e| e.name.starts_with("dec1.")) {
            p.values[e.offset..e.offset + e.len()].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = random_sample(&mut rng, &cfg);
        s.target = vec![[0.0; ACTION_DIM]; cfg.k];
        let x = NetInputs::from_sample(&p, &s).unwrap();
        let eps = vec![vec![0.3f64, -0.2]];
        let pv = p.as_f64();
        let lv = loss(&p, &pv, &[&x], &eps).unwrap();
        assert_eq!(lv.mse, 0.0);
        assert_eq!(lv.total, 0.0);
        // zero encoder output layer: mean 0, log-variance 0, so KL is 0
        for e in p.layers.iter().filter(|e| e.name.starts_with("enc1.")) {
            p.values[e.offset..e.offset + e.len()].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = NetInputs::from_sample(&p, &s).unwrap();
        let lv = loss(&p, &p.as_f64(), &[&x], &eps).unwrap();
        assert_eq!(lv.kl, 0.0);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let cfg = tiny();
        let p = PolicyParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<TrainingSample> = (0..3).map(|_| random_sample(&mut rng, &cfg)).collect();
        let eps: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let pv = p.as_f64();
        let xs = |order: &[usize]| order.iter().map(|&i| NetInputs::from_sample(&p, &s[i]).unwrap()).collect::<Vec<_>>();
        let es = |order: &[usize]| order.iter().map(|&i| eps[i].clone()).collect::<Vec<_>>();
        let (xa, xb) = (xs(&[0, 1, 2]), xs(&[2, 0, 1]));
        let a = loss(&p, &pv, &xa.iter().collect::<Vec<_>>(), &es(&[0, 1, 2])).unwrap();
        let b = loss(&p, &pv, &xb.iter().collect::<Vec<_>>(), &es(&[2, 0, 1])).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic_and_logs_the_curve() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<TrainingSample> = (0..4).map(|_| random_sample(&mut rng, &cfg)).collect();
        let (a, ca) = train(&cfg, &s).unwrap();
        let (b, cb) = train(&cfg, &s).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(ca, cb);
        assert_eq!(ca.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10]);
        assert!(matches!(train(&cfg, &[]), Err(Error::EmptySamples)));
    }

    #[test]
    fn untrained_params_refuse_inference() {
        let cfg = tiny();
        let p = PolicyParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sample(&mut rng, &cfg);
        assert!(matches!(infer(&p, &s.observation), Err(Error::Untrained)));
    }

    #[test]
    fn params_round_trip_through_a_file() {
        let cfg = tiny();
        let mut p = PolicyParams::init(&cfg).unwrap();
        p.trained = true;
        p.tags.insert("method".into(), "ofa".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn aggregation_weights() {
        let c = |start: usize, v: f64| PendingChunk { start, actions: vec![[v; ACTION_DIM]; 4] };
        // single chunk returns its own action
        assert_eq!(temporal_aggregate(&[c(0, 2.0)], 1, 0.1).unwrap(), [2.0; ACTION_DIM]);
        assert_eq!(temporal_aggregate(&[c(0, 2.0), c(1, 2.0)], 2, 0.1).unwrap()[0], 2.0);
        // two chunks: ages 2 and 0
        let got = temporal_aggregate(&[c(0, 1.0), c(2, 3.0)], 2, 0.1).unwrap()[5];
        let (w0, w1) = ((-0.2f64).exp(), 1.0);
        assert!((got - (w0 * 1.0 + w1 * 3.0) / (w0 + w1)).abs() < 1e-15);
        assert!(matches!(temporal_aggregate(&[c(0, 1.0)], 4, 0.1), Err(Error::NoCoveringChunk(4))));
    }
}
