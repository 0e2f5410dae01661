//! Desk-scale probabilistic pixel classifier.
//!
//! The encoder maps every pixel's feature vector through an affine layer and
//! `tanh` to a `C`-dimensional latent, then averages latents over
//! `s x s` patches. The decoder is a linear softmax that reads both the
//! pixel latent and the pooled latent of the pixel's patch, so the pooled
//! grid is the representation used for novelty while per-pixel boundaries
//! stay resolvable.
//!
//! Parameters live in one flat vector:
//! `[enc_w (C x D) | enc_b (C) | dec_w (2C x K) | dec_b (K)]`.
//! Dropout removes whole weight rows: encoder rows are latent units,
//! decoder rows are decoder inputs. Kept rows are scaled by `1 / (1 - p)`.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::terrain::{FeatureImage, Footprint, LabelImage};
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub dropout_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a relative loss improvement of `convergence_tol`
    /// before training stops.
    pub patience: usize,
    pub convergence_tol: f64,
    pub ensemble_size: usize,
    pub mc_samples: usize,
    pub patch_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 16,
            dropout_prob: 0.5,
            learning_rate: 0.01,
            batch_size: 8,
            max_epochs: 200,
            patience: 5,
            convergence_tol: 1e-4,
            ensemble_size: 4,
            mc_samples: 20,
            patch_factor: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if self.latent_dim == 0 || self.batch_size == 0 || self.patch_factor == 0 {
            return Err(Error::Config(
                "latent_dim, batch_size and patch_factor must be positive".into(),
            ));
        }
        if self.ensemble_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("ensemble_size and mc_samples must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Weight decay `(1 - p) / (2N)` for a training set of `n` images.
    pub fn weight_decay(&self, n: usize) -> f64 {
        (1.0 - self.dropout_prob) / (2.0 * n.max(1) as f64)
    }

    fn canonical(&self) -> String {
        format!(
            "latent_dim={};dropout_prob={};learning_rate={};batch_size={};max_epochs={};patience={};convergence_tol={};ensemble_size={};mc_samples={};patch_factor={}",
            self.latent_dim,
            self.dropout_prob,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.convergence_tol,
            self.ensemble_size,
            self.mc_samples,
            self.patch_factor
        )
    }

    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Per-pixel class probabilities, pixel-major (`pixel * classes + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ProbTensor {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self) -> Vec<u8> {
        (0..self.pixels())
            .map(|i| argmax(self.pixel(i)) as u8)
            .collect()
    }

    pub fn same_shape(&self, other: &ProbTensor) -> bool {
        self.classes == other.classes && self.rows == other.rows && self.cols == other.cols
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(rows / s) x (cols / s)` grid of patch latents, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: FeatureImage,
    pub labels: LabelImage,
    pub footprint: Footprint,
}

pub type TrainingSet = Vec<TrainingSample>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub patch_factor: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    c: usize,
    k: usize,
    enc_b: usize,
    dec_w: usize,
    dec_b: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, c: usize, k: usize) -> Self {
        let enc_b = c * d;
        let dec_w = enc_b + c;
        let dec_b = dec_w + 2 * c * k;
        Layout {
            d,
            c,
            k,
            enc_b,
            dec_w,
            dec_b,
            len: dec_b + k,
        }
    }

    /// Whether parameter `i` is a weight (decayed) rather than a bias.
    fn is_weight(&self, i: usize) -> bool {
        i < self.enc_b || (i >= self.dec_w && i < self.dec_b)
    }
}

/// Row multipliers: `0` for dropped rows, `1 / (1 - p)` for kept ones.
#[derive(Debug, Clone)]
struct DropoutMask {
    enc: Vec<f64>,
    dec: Vec<f64>,
}

impl DropoutMask {
    fn sample(c: usize, p: f64, rng: &mut ChaCha8Rng) -> Self {
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let enc = draw(c);
        let dec = draw(2 * c);
        DropoutMask { enc, dec }
    }
}

/// Intermediate activations for one image.
struct Forward {
    hidden: Vec<f64>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

impl ModelParams {
    /// Randomly initialised parameters; used as the fixed pre-mission checkpoint.
    pub fn init(feature_dim: usize, classes: usize, cfg: &ModelConfig, seed: u64) -> Self {
        let l = Layout::new(feature_dim, cfg.latent_dim, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("valid std");
        let dec = Normal::new(0.0, (1.0 / (2 * cfg.latent_dim) as f64).sqrt()).expect("valid std");
        let mut theta = vec![0.0; l.len];
        for v in &mut theta[..l.enc_b] {
            *v = enc.sample(&mut rng);
        }
        for v in &mut theta[l.dec_w..l.dec_b] {
            *v = dec.sample(&mut rng);
        }
        ModelParams {
            feature_dim,
            latent_dim: cfg.latent_dim,
            classes,
            patch_factor: cfg.patch_factor,
            theta,
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.feature_dim, self.latent_dim, self.classes)
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Sets every decoder weight and bias to zero.
    pub fn zero_decoder(&mut self) {
        let l = self.layout();
        for v in &mut self.theta[l.dec_w..] {
            *v = 0.0;
        }
    }

    pub fn squared_weight_norm(&self) -> f64 {
        let l = self.layout();
        self.theta
            .iter()
            .enumerate()
            .filter(|(i, _)| l.is_weight(*i))
            .map(|(_, v)| v * v)
            .sum()
    }

    fn check_image(&self, z: &FeatureImage) -> Result<()> {
        if z.dim != self.feature_dim {
            return Err(Error::Shape(format!(
                "image has {} feature channels, model expects {}",
                z.dim, self.feature_dim
            )));
        }
        let s = self.patch_factor;
        if z.rows == 0 || z.cols == 0 || z.rows % s != 0 || z.cols % s != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by patch factor {s}",
                z.rows, z.cols
            )));
        }
        Ok(())
    }

    fn shape_compatible(&self, other: &ModelParams) -> bool {
        self.feature_dim == other.feature_dim
            && self.latent_dim == other.latent_dim
            && self.classes == other.classes
            && self.patch_factor == other.patch_factor
            && self.theta.len() == other.theta.len()
    }

    fn patch_of(&self, z: &FeatureImage, px: usize) -> usize {
        let s = self.patch_factor;
        let (r, c) = (px / z.cols, px % z.cols);
        (r / s) * (z.cols / s) + c / s
    }

    fn encode_pixels(&self, z: &FeatureImage, mask: Option<&DropoutMask>) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let (d, c) = (l.d, l.c);
        let s = self.patch_factor;
        let w = &self.theta[..l.enc_b];
        let b = &self.theta[l.enc_b..l.dec_w];
        let n = z.pixels();
        let mut hidden = vec![0.0; n * c];
        for px in 0..n {
            let f = z.pixel(px);
            let h = &mut hidden[px * c..(px + 1) * c];
            for u in 0..c {
                let scale = mask.map_or(1.0, |m| m.enc[u]);
                if scale == 0.0 {
                    continue;
                }
                let row = &w[u * d..(u + 1) * d];
                let mut a = b[u];
                for j in 0..d {
                    a += row[j] * f[j];
                }
                h[u] = (scale * a).tanh();
            }
        }
        let patches = (z.rows / s) * (z.cols / s);
        let mut pooled = vec![0.0; patches * c];
        for px in 0..n {
            let p = self.patch_of(z, px);
            for u in 0..c {
                pooled[p * c + u] += hidden[px * c + u];
            }
        }
        let inv = 1.0 / (s * s) as f64;
        for v in &mut pooled {
            *v *= inv;
        }
        (hidden, pooled)
    }

    fn forward(&self, z: &FeatureImage, mask: Option<&DropoutMask>) -> Forward {
        let l = self.layout();
        let (c, k) = (l.c, l.k);
        let (hidden, pooled) = self.encode_pixels(z, mask);
        let dw = &self.theta[l.dec_w..l.dec_b];
        let db = &self.theta[l.dec_b..];
        let n = z.pixels();
        let mut probs = vec![0.0; n * k];
        let mut logits = vec![0.0; k];
        for px in 0..n {
            let h = &hidden[px * c..(px + 1) * c];
            let p = self.patch_of(z, px);
            let g = &pooled[p * c..(p + 1) * c];
            logits.copy_from_slice(db);
            for u in 0..2 * c {
                let x = if u < c { h[u] } else { g[u - c] };
                let scale = mask.map_or(1.0, |m| m.dec[u]);
                if scale == 0.0 || x == 0.0 {
                    continue;
                }
                let row = &dw[u * k..(u + 1) * k];
                let sx = scale * x;
                for j in 0..k {
                    logits[j] += row[j] * sx;
                }
            }
            softmax_into(&logits, &mut probs[px * k..(px + 1) * k]);
        }
        Forward {
            hidden,
            pooled,
            probs,
        }
    }

    /// Summed pixel negative log-likelihood of one image, and optionally its
    /// gradient (accumulated, scaled by `weight`) into `grad`.
    fn image_nll(
        &self,
        sample: &TrainingSample,
        mask: Option<&DropoutMask>,
        grad: Option<(&mut [f64], f64, bool)>,
    ) -> f64 {
        let l = self.layout();
        let (d, c, k) = (l.d, l.c, l.k);
        let z = &sample.features;
        let fw = self.forward(z, mask);
        let n = z.pixels();
        let mut nll = 0.0;
        for px in 0..n {
            let y = sample.labels.data[px] as usize;
            nll -= fw.probs[px * k + y].max(1e-300).ln();
        }
        let Some((grad, weight, train_encoder)) = grad else {
            return nll;
        };
        let s = self.patch_factor;
        let dw = &self.theta[l.dec_w..l.dec_b];
        let dec_scale = |u: usize| mask.map_or(1.0, |m| m.dec[u]);
        let patches = fw.pooled.len() / c;
        let mut d_hidden = vec![0.0; n * c];
        let mut d_pooled = vec![0.0; patches * c];
        let mut dz = vec![0.0; k];
        for px in 0..n {
            let y = sample.labels.data[px] as usize;
            for j in 0..k {
                dz[j] = weight * (fw.probs[px * k + j] - if j == y { 1.0 } else { 0.0 });
            }
            let p = self.patch_of(z, px);
            for j in 0..k {
                grad[l.dec_b + j] += dz[j];
            }
            for u in 0..2 * c {
                let sc = dec_scale(u);
                if sc == 0.0 {
                    continue;
                }
                let x = if u < c { fw.hidden[px * c + u] } else { fw.pooled[p * c + u - c] };
                let row = &dw[u * k..(u + 1) * k];
                let grow = &mut grad[l.dec_w + u * k..l.dec_w + (u + 1) * k];
                let mut back = 0.0;
                for j in 0..k {
                    grow[j] += sc * x * dz[j];
                    back += row[j] * dz[j];
                }
                if train_encoder {
                    if u < c {
                        d_hidden[px * c + u] += sc * back;
                    } else {
                        d_pooled[p * c + u - c] += sc * back;
                    }
                }
            }
        }
        if !train_encoder {
            return nll;
        }
        let inv = 1.0 / (s * s) as f64;
        for px in 0..n {
            let p = self.patch_of(z, px);
            let f = z.pixel(px);
            for u in 0..c {
                let sc = mask.map_or(1.0, |m| m.enc[u]);
                if sc == 0.0 {
                    continue;
                }
                let h = fw.hidden[px * c + u];
                let dh = d_hidden[px * c + u] + d_pooled[p * c + u] * inv;
                // h = tanh(sc * (w.f + b))
                let da = dh * (1.0 - h * h) * sc;
                if da == 0.0 {
                    continue;
                }
                let grow = &mut grad[u * d..(u + 1) * d];
                for j in 0..d {
                    grow[j] += da * f[j];
                }
                grad[l.enc_b + u] += da;
            }
        }
        nll
    }

    /// Training objective: mean summed-pixel NLL over `data` plus
    /// `lambda * ||W||^2`, without dropout.
    pub fn loss(&self, data: &[TrainingSample], lambda: f64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for s in data {
            self.check_image(&s.features)?;
        }
        let nll: f64 = par::map(data, |s| self.image_nll(s, None, None)).iter().sum();
        Ok(nll / data.len() as f64 + lambda * self.squared_weight_norm())
    }

    /// Analytic gradient of [`ModelParams::loss`] with respect to `theta`.
    pub fn loss_gradient(&self, data: &[TrainingSample], lambda: f64) -> Result<Vec<f64>> {
        let refs: Vec<&TrainingSample> = data.iter().collect();
        Ok(self.gradient_impl(&refs, lambda, None, true)?.0)
    }

    /// Gradient of the (optionally dropout-masked) objective over `data`,
    /// together with the summed NLL of the batch.
    fn gradient_impl(
        &self,
        data: &[&TrainingSample],
        lambda: f64,
        masks: Option<&[DropoutMask]>,
        train_encoder: bool,
    ) -> Result<(Vec<f64>, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let l = self.layout();
        let weight = 1.0 / data.len() as f64;
        let mut grad = vec![0.0; l.len];
        let mut nll = 0.0;
        for (i, s) in data.iter().enumerate() {
            let mask = masks.map(|m| &m[i]);
            nll += self.image_nll(s, mask, Some((&mut grad, weight, train_encoder)));
        }
        for (i, g) in grad.iter_mut().enumerate() {
            if l.is_weight(i) && (train_encoder || i >= l.dec_w) {
                *g += 2.0 * lambda * self.theta[i];
            }
        }
        if !train_encoder {
            for g in &mut grad[..l.dec_w] {
                *g = 0.0;
            }
        }
        Ok((grad, nll))
    }

    /// One full-batch plain gradient step with step size `lr`. With
    /// `freeze_encoder`, only decoder parameters move.
    pub fn gradient_step(
        &mut self,
        data: &[TrainingSample],
        lambda: f64,
        lr: f64,
        freeze_encoder: bool,
    ) -> Result<()> {
        let refs: Vec<&TrainingSample> = data.iter().collect();
        let (g, _) = self.gradient_impl(&refs, lambda, None, !freeze_encoder)?;
        for (t, gi) in self.theta.iter_mut().zip(g) {
            *t -= lr * gi;
        }
        Ok(())
    }

    /// Deterministic softmax prediction.
    pub fn predict(&self, z: &FeatureImage) -> Result<ProbTensor> {
        self.check_image(z)?;
        let fw = self.forward(z, None);
        Ok(ProbTensor {
            classes: self.classes,
            rows: z.rows,
            cols: z.cols,
            data: fw.probs,
        })
    }

    /// Patch latents after the encoder.
    pub fn encode(&self, z: &FeatureImage) -> Result<LatentGrid> {
        self.check_image(z)?;
        let (_, pooled) = self.encode_pixels(z, None);
        let s = self.patch_factor;
        Ok(LatentGrid {
            rows: z.rows / s,
            cols: z.cols / s,
            dim: self.latent_dim,
            data: pooled,
        })
    }

    pub fn write_checkpoint<W: Write>(&self, cfg: &ModelConfig, mut w: W) -> Result<()> {
        write!(
            w,
            "IPPAL-CHECKPOINT 1\nfeature_dim {}\nlatent_dim {}\nclasses {}\npatch_factor {}\nparams {}\nconfig_hash {}\nend\n",
            self.feature_dim,
            self.latent_dim,
            self.classes,
            self.patch_factor,
            self.theta.len(),
            cfg.hash_hex()
        )?;
        let mut bytes = Vec::with_capacity(self.theta.len() * 8);
        for v in &self.theta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a checkpoint; returns the parameters and the stored config hash.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let marker = b"\nend\n";
        let split = buf
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::format("checkpoint", "missing header terminator"))?;
        let header = std::str::from_utf8(&buf[..split])
            .map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
        let body = &buf[split + marker.len()..];
        let mut lines = header.lines();
        if lines.next() != Some("IPPAL-CHECKPOINT 1") {
            return Err(Error::format("checkpoint", "unsupported version"));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::format("checkpoint", format!("bad header line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("checkpoint", format!("missing or bad {k}")))
        };
        let (d, c, k, s, n) = (
            num("feature_dim")?,
            num("latent_dim")?,
            num("classes")?,
            num("patch_factor")?,
            num("params")?,
        );
        if Layout::new(d, c, k).len != n {
            return Err(Error::format("checkpoint", "parameter count disagrees with shapes"));
        }
        if body.len() != n * 8 {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} weight bytes, found {}", n * 8, body.len()),
            ));
        }
        let theta = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let hash = fields.get("config_hash").cloned().unwrap_or_default();
        Ok((
            ModelParams {
                feature_dim: d,
                latent_dim: c,
                classes: k,
                patch_factor: s,
                theta,
            },
            hash,
        ))
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains from `checkpoint` on `data` with shuffled mini-batches and Adam.
///
/// Dropout with the configured probability is active during training. Stops
/// once the epoch loss fails to improve by `convergence_tol` (relative) for
/// `patience` epochs, or after `max_epochs`. If the final deterministic loss
/// is worse than the checkpoint's, the checkpoint is returned.
pub fn train(
    checkpoint: &ModelParams,
    data: &[TrainingSample],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in data {
        checkpoint.check_image(&s.features)?;
        if s.labels.data.iter().any(|&y| y as usize >= checkpoint.classes) {
            return Err(Error::Shape("label id out of range".into()));
        }
    }
    let lambda = cfg.weight_decay(data.len());
    let start_loss = checkpoint.loss(data, lambda)?;
    let mut params = checkpoint.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(params.theta.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let p = cfg.dropout_prob;

    for _epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
            let masks: Option<Vec<DropoutMask>> = (p > 0.0).then(|| {
                batch
                    .iter()
                    .map(|_| DropoutMask::sample(params.latent_dim, p, &mut rng))
                    .collect()
            });
            let (grad, nll) = params.gradient_impl(&batch, lambda, masks.as_deref(), true)?;
            let batch_loss = nll / batch.len() as f64 + lambda * params.squared_weight_norm();
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(batch_loss));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            adam.step(&mut params.theta, &grad);
        }
        epoch_loss /= data.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(epoch_loss));
        }
        if best.is_finite() && (best - epoch_loss) / best.abs().max(1e-300) < cfg.convergence_tol {
            stalled += 1;
            if stalled >= cfg.patience {
                break;
            }
        } else {
            stalled = 0;
        }
        best = best.min(epoch_loss);
    }

    let end_loss = params.loss(data, lambda)?;
    if !end_loss.is_finite() {
        return Err(Error::Diverged(end_loss));
    }
    if end_loss > start_loss {
        return Ok(checkpoint.clone());
    }
    Ok(params)
}

/// Trains every ensemble member from its own checkpoint; member `i` uses
/// shuffle/dropout seed `seed + i`.
pub fn train_ensemble(
    checkpoints: &[ModelParams],
    data: &[TrainingSample],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Vec<ModelParams>> {
    par::map_range(checkpoints.len(), |i| {
        train(&checkpoints[i], data, cfg, seed.wrapping_add(i as u64))
    })
    .into_iter()
    .collect()
}

/// Stochastic forward passes with independently sampled dropout masks.
#[derive(Debug, Clone)]
pub struct McSamples {
    pub samples: Vec<ProbTensor>,
    /// Set when `p = 0` and more than one sample was requested; every
    /// sample then equals the deterministic prediction.
    pub degenerate: bool,
}

pub fn predict_mc_dropout(
    params: &ModelParams,
    z: &FeatureImage,
    samples: usize,
    dropout_prob: f64,
    seed: u64,
) -> Result<McSamples> {
    if samples == 0 {
        return Err(Error::Empty("MC dropout sample count"));
    }
    params.check_image(z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = (0..samples)
        .map(|_| {
            let mask = (dropout_prob > 0.0)
                .then(|| DropoutMask::sample(params.latent_dim, dropout_prob, &mut rng));
            ProbTensor {
                classes: params.classes,
                rows: z.rows,
                cols: z.cols,
                data: params.forward(z, mask.as_ref()).probs,
            }
        })
        .collect();
    Ok(McSamples {
        samples: out,
        degenerate: dropout_prob == 0.0 && samples > 1,
    })
}

pub fn predict_ensemble(members: &[ModelParams], z: &FeatureImage) -> Result<Vec<ProbTensor>> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    if members.iter().any(|m| !m.shape_compatible(first)) {
        return Err(Error::Shape("ensemble members have different shapes".into()));
    }
    members.iter().map(|m| m.predict(z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureImage {
            rows,
            cols,
            dim,
            data: (0..rows * cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn cfg(s: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            patch_factor: s,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn softmax_rows_normalised() {
        let m = ModelParams::init(3, 4, &cfg(4), 1);
        let p = m.predict(&image(8, 8, 3, 2)).unwrap();
        for i in 0..p.pixels() {
            assert!((p.pixel(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_decoder_is_uniform() {
        let mut m = ModelParams::init(3, 5, &cfg(4), 1);
        m.zero_decoder();
        let p = m.predict(&image(8, 8, 3, 2)).unwrap();
        assert!(p.data.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let m = ModelParams::init(3, 4, &cfg(8), 1);
        assert!(matches!(m.predict(&image(12, 16, 3, 0)), Err(Error::Shape(_))));
        assert!(matches!(m.predict(&image(16, 16, 2, 0)), Err(Error::Shape(_))));
        assert!(matches!(m.encode(&image(12, 16, 3, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_shapes_and_invariance() {
        let m = ModelParams::init(3, 4, &cfg(8), 1);
        let z = image(16, 16, 3, 5);
        let g = m.encode(&z).unwrap();
        assert_eq!((g.rows, g.cols, g.dim), (2, 2, 4));
        assert_eq!(g, m.encode(&z.clone()).unwrap());

        let constant = FeatureImage {
            rows: 16,
            cols: 16,
            dim: 3,
            data: [0.3, -0.2, 0.9].repeat(256),
        };
        let g = m.encode(&constant).unwrap();
        for i in 1..g.len() {
            assert_eq!(g.vector(i), g.vector(0));
        }
    }

    #[test]
    fn mc_dropout_limits() {
        let m = ModelParams::init(3, 4, &cfg(4), 7);
        let z = image(8, 8, 3, 8);
        let det = m.predict(&z).unwrap();
        let s = predict_mc_dropout(&m, &z, 3, 0.0, 1).unwrap();
        assert!(s.degenerate);
        assert!(s.samples.iter().all(|t| *t == det));

        let a = predict_mc_dropout(&m, &z, 2, 0.5, 11).unwrap();
        let b = predict_mc_dropout(&m, &z, 2, 0.5, 11).unwrap();
        assert!(!a.degenerate);
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples[0], a.samples[1]);
    }

    #[test]
    fn ensemble_predictions() {
        let m = ModelParams::init(3, 4, &cfg(4), 7);
        let z = image(8, 8, 3, 8);
        assert_eq!(predict_ensemble(&[m.clone()], &z).unwrap(), vec![m.predict(&z).unwrap()]);
        let out = predict_ensemble(&[m.clone(), m.clone(), m.clone()], &z).unwrap();
        assert!(out.windows(2).all(|w| w[0] == w[1]));
        assert!(predict_ensemble(&[], &z).is_err());
        let other = ModelParams::init(3, 5, &cfg(4), 7);
        assert!(matches!(predict_ensemble(&[m, other], &z), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = cfg(4);
        let m = ModelParams::init(3, 4, &c, 9);
        let mut bytes = Vec::new();
        m.write_checkpoint(&c, &mut bytes).unwrap();
        let (back, hash) = ModelParams::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(hash, c.hash_hex());
        let mut again = Vec::new();
        back.write_checkpoint(&c, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(ModelParams::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn weight_decay_rule() {
        let c = ModelConfig::default();
        assert_eq!(c.weight_decay(10), 0.025);
        assert_eq!(c.weight_decay(1), 0.25);
    }

    #[test]
    fn empty_training_set_rejected() {
        let c = cfg(4);
        let m = ModelParams::init(3, 4, &c, 9);
        assert!(matches!(train(&m, &[], &c, 0), Err(Error::Empty(_))));
    }
}
