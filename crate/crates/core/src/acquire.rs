//! Per-pixel acquisition scores: BALD mutual information, predictive
//! entropy and kNN latent novelty against a database of training latents.

use crate::model::{LatentGrid, ModelParams, ProbTensor, TrainingSample};
use crate::{Error, Result};

/// Clamp window for round-off negatives in mutual information.
const MI_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: ProbTensor,
    pub members: Vec<ProbTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    MutualInformation,
    Entropy,
    Novelty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreImage {
    pub kind: ScoreKind,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Set when the values are a prior fill rather than computed scores
    /// (novelty against an empty database).
    pub prior_fill: bool,
}

impl ScoreImage {
    pub fn filled(kind: ScoreKind, rows: usize, cols: usize, value: f64) -> Self {
        ScoreImage {
            kind,
            rows,
            cols,
            data: vec![value; rows * cols],
            prior_fill: true,
        }
    }
}

/// Element-wise mean of member predictions.
pub fn posterior_mean(members: Vec<ProbTensor>) -> Result<PosteriorPrediction> {
    let first = members.first().ok_or(Error::Empty("posterior members"))?;
    if members.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Shape("posterior members differ in shape".into()));
    }
    let t = members.len() as f64;
    let mut mean = first.clone();
    for v in mean.data.iter_mut() {
        *v = 0.0;
    }
    for m in &members {
        for (acc, &v) in mean.data.iter_mut().zip(&m.data) {
            *acc += v;
        }
    }
    for v in mean.data.iter_mut() {
        *v /= t;
    }
    Ok(PosteriorPrediction { mean, members })
}

/// Shannon entropy (natural log) of one distribution, with `0 ln 0 = 0`.
pub fn shannon(q: &[f64]) -> f64 {
    -q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `H(mean) - mean_i H(member_i)` per pixel.
pub fn mutual_information(post: &PosteriorPrediction) -> ScoreImage {
    let mean = &post.mean;
    let t = post.members.len() as f64;
    let data = (0..mean.pixels())
        .map(|i| {
            let h_mean = shannon(mean.pixel(i));
            let h_members: f64 = post.members.iter().map(|m| shannon(m.pixel(i))).sum::<f64>() / t;
            let mi = h_mean - h_members;
            if (-MI_CLAMP..0.0).contains(&mi) {
                0.0
            } else {
                mi
            }
        })
        .collect();
    ScoreImage {
        kind: ScoreKind::MutualInformation,
        rows: mean.rows,
        cols: mean.cols,
        data,
        prior_fill: false,
    }
}

pub fn entropy(pred: &ProbTensor) -> ScoreImage {
    ScoreImage {
        kind: ScoreKind::Entropy,
        rows: pred.rows,
        cols: pred.cols,
        data: (0..pred.pixels()).map(|i| shannon(pred.pixel(i))).collect(),
        prior_fill: false,
    }
}

/// Exhaustive-scan cosine kNN store of patch latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDatabase {
    dim: usize,
    k: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl LatentDatabase {
    pub fn new(dim: usize, k: usize) -> Self {
        LatentDatabase {
            dim,
            k: k.max(1),
            vectors: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn insert(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "latent of length {} in a {}-dim database",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite latent".into()));
        }
        self.vectors.extend_from_slice(v);
        self.norms.push(norm(v));
        Ok(())
    }

    /// Cosine distance `1 - cos` to entry `i`; zero-norm vectors are at distance 1.
    fn cosine_distance(&self, q: &[f64], q_norm: f64, i: usize) -> (f64, f64) {
        let n = self.norms[i];
        if q_norm == 0.0 || n == 0.0 {
            return (1.0, 1.0);
        }
        let cos = (dot(q, self.vector(i)) / (q_norm * n)).clamp(-1.0, 1.0);
        (1.0 - cos, 1.0 - cos.abs())
    }

    /// Indices of the `k` nearest entries by cosine distance, ties broken by
    /// insertion index. Uses every entry when fewer than `k` exist.
    pub fn nearest(&self, q: &[f64]) -> Vec<usize> {
        let q_norm = norm(q);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (self.cosine_distance(q, q_norm, i).0, i))
            .collect();
        let k = self.k.min(scored.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored.into_iter().map(|(_, i)| i).collect()
    }

    /// Mean `1 - |cos|` over the nearest neighbours of `q`.
    pub fn novelty_of(&self, q: &[f64]) -> f64 {
        let q_norm = norm(q);
        let nn = self.nearest(q);
        let sum: f64 = nn.iter().map(|&i| self.cosine_distance(q, q_norm, i).1).sum();
        (sum / nn.len() as f64).clamp(0.0, 1.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Patch novelty upsampled by nearest neighbour to `patch_factor`-times
/// the latent grid. An empty database yields the prior value 1.
pub fn novelty(db: &LatentDatabase, latents: &LatentGrid, patch_factor: usize) -> Result<ScoreImage> {
    if latents.dim != db.dim {
        return Err(Error::Shape(format!(
            "latent dim {} vs database dim {}",
            latents.dim, db.dim
        )));
    }
    let rows = latents.rows * patch_factor;
    let cols = latents.cols * patch_factor;
    if db.is_empty() {
        return Ok(ScoreImage::filled(ScoreKind::Novelty, rows, cols, 1.0));
    }
    let patch_scores: Vec<f64> = (0..latents.len()).map(|i| db.novelty_of(latents.vector(i))).collect();
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = patch_scores[(r / patch_factor) * latents.cols + c / patch_factor];
        }
    }
    Ok(ScoreImage {
        kind: ScoreKind::Novelty,
        rows,
        cols,
        data,
        prior_fill: false,
    })
}

pub fn db_insert_image(db: &mut LatentDatabase, latents: &LatentGrid) -> Result<()> {
    for i in 0..latents.len() {
        db.insert(latents.vector(i))?;
    }
    Ok(())
}

/// Database of every training image's patch latents, in training-set order.
pub fn rebuild_db(params: &ModelParams, training_set: &[TrainingSample], k: usize) -> Result<LatentDatabase> {
    let mut db = LatentDatabase::new(params.latent_dim, k);
    for s in training_set {
        db_insert_image(&mut db, &params.encode(&s.features)?)?;
    }
    Ok(db)
}
