//! Synthetic semantic terrains and the nadir camera model.
//!
//! Terrains are a Voronoi partition of jittered seed points, one per
//! `cluster_scale`-sized block, with a class assigned to every seed. Each
//! cell carries a feature vector drawn around its class prototype. Map cells
//! and image pixels share one ground sample distance, so a footprint is an
//! exact rectangle of cells.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pgm::Pgm;
use crate::plan::Waypoint;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub width_m: f64,
    pub height_m: f64,
    pub cell_size_m: f64,
    pub classes: usize,
    pub feature_dim: usize,
    /// Side length, in cells, of the block that holds one Voronoi seed.
    pub cluster_scale: usize,
    /// Standard deviation of the isotropic feature noise.
    pub feature_noise: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            width_m: 64.0,
            height_m: 64.0,
            cell_size_m: 1.0,
            classes: 4,
            feature_dim: 8,
            cluster_scale: 16,
            feature_noise: 0.8,
        }
    }
}

impl TerrainConfig {
    /// Returns `(cols, rows)` = (W, L) in cells.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if !(self.cell_size_m > 0.0) {
            return Err(Error::Config("cell_size_m must be positive".into()));
        }
        let cells = |extent: f64, name: &str| -> Result<usize> {
            let n = extent / self.cell_size_m;
            if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{name} {extent} is not an integer multiple of cell_size_m {}",
                    self.cell_size_m
                )));
            }
            Ok(n.round() as usize)
        };
        Ok((cells(self.width_m, "width_m")?, cells(self.height_m, "height_m")?))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if self.classes < 3 || self.classes > 255 {
            return Err(Error::Config(format!(
                "classes must be in [3, 255], got {}",
                self.classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.cluster_scale == 0 {
            return Err(Error::Config("cluster_scale must be positive".into()));
        }
        if !(self.feature_noise >= 0.0) || !self.feature_noise.is_finite() {
            return Err(Error::Config("feature_noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Ground-truth class raster plus per-cell feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTerrain {
    pub cell_size_m: f64,
    pub classes: usize,
    pub feature_dim: usize,
    /// W, number of columns.
    pub cols: usize,
    /// L, number of rows.
    pub rows: usize,
    /// Row-major class ids.
    pub labels: Vec<u8>,
    /// Row-major, `feature_dim` values per cell.
    pub features: Vec<f64>,
    /// `classes x feature_dim` class prototype vectors.
    pub prototypes: Vec<f64>,
}

impl SemanticTerrain {
    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.cell_size_m
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.cell_size_m
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.cols + col]
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.feature_dim;
        &self.features[i..i + self.feature_dim]
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn full_footprint(&self) -> Footprint {
        Footprint {
            row0: 0,
            col0: 0,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Writes `<stem>.pgm` (one byte per cell) and `<stem>.txt` (header with
    /// class count, cell size, feature noise, seed and prototypes).
    pub fn export(&self, stem: &Path, noise: f64, seed: u64) -> Result<()> {
        let pgm = Pgm {
            width: self.cols,
            height: self.rows,
            maxval: 255,
            data: self.labels.iter().map(|&l| l as u16).collect(),
        };
        fs::write(stem.with_extension("pgm"), pgm.to_bytes())?;
        let mut header = format!(
            "classes {}\ncell_size_m {}\nfeature_dim {}\nfeature_noise {}\nseed {}\n",
            self.classes, self.cell_size_m, self.feature_dim, noise, seed
        );
        for k in 0..self.classes {
            let row: Vec<String> = self.prototype(k).iter().map(|v| v.to_string()).collect();
            header.push_str(&format!("prototype {}\n", row.join(" ")));
        }
        fs::write(stem.with_extension("txt"), header)?;
        Ok(())
    }

    /// Loads a label raster and its sidecar header. Features are rebuilt from
    /// the prototypes and the recorded noise level and seed.
    pub fn import(stem: &Path) -> Result<Self> {
        let pgm = Pgm::parse(&fs::read(stem.with_extension("pgm"))?)?;
        let text = fs::read_to_string(stem.with_extension("txt"))?;
        let mut classes = None;
        let mut cell_size = None;
        let mut dim = None;
        let mut noise = 0.0;
        let mut seed = 0u64;
        let mut prototypes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = || Error::format("terrain header", format!("line {}: {line:?}", n + 1));
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let rest: Vec<&str> = it.collect();
            let one = || rest.first().copied().ok_or_else(bad);
            match key {
                "classes" => classes = Some(one()?.parse::<usize>().map_err(|_| bad())?),
                "cell_size_m" => cell_size = Some(one()?.parse::<f64>().map_err(|_| bad())?),
                "feature_dim" => dim = Some(one()?.parse::<usize>().map_err(|_| bad())?),
                "feature_noise" => noise = one()?.parse().map_err(|_| bad())?,
                "seed" => seed = one()?.parse().map_err(|_| bad())?,
                "prototype" => {
                    for v in rest {
                        prototypes.push(v.parse::<f64>().map_err(|_| bad())?);
                    }
                }
                _ => return Err(bad()),
            }
        }
        let missing = |k: &str| Error::format("terrain header", format!("missing {k}"));
        let classes = classes.ok_or_else(|| missing("classes"))?;
        let cell_size_m = cell_size.ok_or_else(|| missing("cell_size_m"))?;
        let feature_dim = dim.ok_or_else(|| missing("feature_dim"))?;
        if prototypes.len() != classes * feature_dim {
            return Err(Error::format("terrain header", "prototype count mismatch"));
        }
        let labels: Vec<u8> = pgm.data.iter().map(|&v| v as u8).collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::format("terrain raster", format!("label {bad} >= {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let features = sample_features(&labels, &prototypes, feature_dim, noise, &mut rng)?;
        Ok(SemanticTerrain {
            cell_size_m,
            classes,
            feature_dim,
            cols: pgm.width,
            rows: pgm.height,
            labels,
            features,
            prototypes,
        })
    }
}

fn sample_features(
    labels: &[u8],
    prototypes: &[f64],
    dim: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, noise.max(0.0))
        .map_err(|e| Error::Config(format!("feature noise: {e}")))?;
    let mut features = Vec::with_capacity(labels.len() * dim);
    for &l in labels {
        let proto = &prototypes[l as usize * dim..(l as usize + 1) * dim];
        for &p in proto {
            let eps = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            features.push(p + eps);
        }
    }
    Ok(features)
}

/// Deterministically generates a terrain from `seed`.
pub fn generate_terrain(seed: u64, config: &TerrainConfig) -> Result<SemanticTerrain> {
    generate(seed, config, None)
}

/// New layout and feature noise from `seed`, with the class prototypes of
/// `reference`: a second area of the same world, for held-out evaluation.
pub fn generate_terrain_like(reference: &SemanticTerrain, seed: u64, config: &TerrainConfig) -> Result<SemanticTerrain> {
    if reference.classes != config.classes || reference.feature_dim != config.feature_dim {
        return Err(Error::Config("reference terrain has a different class or feature count".into()));
    }
    generate(seed, config, Some(&reference.prototypes))
}

fn generate(seed: u64, config: &TerrainConfig, shared: Option<&[f64]>) -> Result<SemanticTerrain> {
    config.validate()?;
    let (cols, rows) = config.dims()?;
    let k = config.classes;
    let dim = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let drawn: Vec<f64> = (0..k * dim).map(|_| std_normal.sample(&mut rng)).collect();
    let prototypes = shared.map_or(drawn, <[f64]>::to_vec);

    // One jittered seed per block. Jitter stays within the inner half of the
    // block, which keeps neighbouring seeds at least half a block apart.
    let s = config.cluster_scale as f64;
    let blocks_x = cols.div_ceil(config.cluster_scale);
    let blocks_y = rows.div_ceil(config.cluster_scale);
    let mut seeds = Vec::with_capacity(blocks_x * blocks_y);
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let x0 = bx as f64 * s;
            let y0 = by as f64 * s;
            let bw = (cols as f64 - x0).min(s);
            let bh = (rows as f64 - y0).min(s);
            let x = x0 + bw / 2.0 + rng.random_range(-0.25..0.25) * bw;
            let y = y0 + bh / 2.0 + rng.random_range(-0.25..0.25) * bh;
            seeds.push((x, y));
        }
    }

    // Every class owns at least one seed; the rest follow a 1/(k+1) profile so
    // that high class ids are rare and spatially localised.
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.shuffle(&mut rng);
    let weights: Vec<f64> = (0..k).map(|c| 1.0 / (c as f64 + 1.0)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let mut seed_class = vec![0u8; seeds.len()];
    for (rank, &idx) in order.iter().enumerate() {
        seed_class[idx] = if rank < k { rank as u8 } else { pick.sample(&mut rng) as u8 };
    }

    let mut labels = vec![0u8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut best = (f64::INFINITY, 0usize);
            for (i, &(sx, sy)) in seeds.iter().enumerate() {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels[r * cols + c] = seed_class[best.1];
        }
    }

    let features = sample_features(&labels, &prototypes, dim, config.feature_noise, &mut rng)?;
    Ok(SemanticTerrain {
        cell_size_m: config.cell_size_m,
        classes: k,
        feature_dim: dim,
        cols,
        rows,
        labels,
        features,
        prototypes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fov_w: usize,
    pub fov_h: usize,
    pub altitude_m: f64,
    /// Metres per pixel; equal to the terrain cell size.
    pub gsd_m: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fov_w: 16,
            fov_h: 16,
            altitude_m: 10.0,
            gsd_m: 1.0,
        }
    }
}

impl CameraModel {
    pub fn validate_for(&self, terrain: &SemanticTerrain) -> Result<()> {
        if self.fov_w == 0 || self.fov_h == 0 {
            return Err(Error::Config("camera fov must be positive".into()));
        }
        if (self.gsd_m - terrain.cell_size_m).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "camera gsd {} differs from terrain cell size {}",
                self.gsd_m, terrain.cell_size_m
            )));
        }
        if self.fov_w > terrain.cols || self.fov_h > terrain.rows {
            return Err(Error::Config("camera footprint larger than terrain".into()));
        }
        Ok(())
    }

    pub fn footprint_area(&self) -> usize {
        self.fov_w * self.fov_h
    }

    /// Ground extent of the smaller footprint side, in metres.
    pub fn fov_ground_m(&self) -> f64 {
        self.fov_w.min(self.fov_h) as f64 * self.gsd_m
    }
}

/// Axis-aligned region of positions whose footprint stays inside the terrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlyableRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub altitude_m: f64,
}

const REGION_TOL: f64 = 1e-9;

impl FlyableRegion {
    pub fn new(terrain: &SemanticTerrain, cam: &CameraModel) -> Self {
        let half_w = cam.fov_w as f64 * cam.gsd_m / 2.0;
        let half_h = cam.fov_h as f64 * cam.gsd_m / 2.0;
        FlyableRegion {
            x_min: half_w,
            x_max: terrain.width_m() - half_w,
            y_min: half_h,
            y_max: terrain.height_m() - half_h,
            altitude_m: cam.altitude_m,
        }
    }

    pub fn contains(&self, p: &Waypoint) -> bool {
        p.x >= self.x_min - REGION_TOL
            && p.x <= self.x_max + REGION_TOL
            && p.y >= self.y_min - REGION_TOL
            && p.y <= self.y_max + REGION_TOL
    }

    pub fn clip(&self, p: Waypoint) -> Waypoint {
        Waypoint::new(
            p.x.clamp(self.x_min, self.x_max),
            p.y.clamp(self.y_min, self.y_max),
            self.altitude_m,
        )
    }

    pub fn top_left(&self) -> Waypoint {
        Waypoint::new(self.x_min, self.y_min, self.altitude_m)
    }

    pub fn center(&self) -> Waypoint {
        Waypoint::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            self.altitude_m,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Cell-index rectangle on the terrain lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Footprint {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Footprint {
    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }

    /// Number of cells shared with `other`.
    pub fn overlap(&self, other: &Footprint) -> usize {
        let r0 = self.row0.max(other.row0);
        let r1 = (self.row0 + self.rows).min(other.row0 + other.rows);
        let c0 = self.col0.max(other.col0);
        let c1 = (self.col0 + self.cols).min(other.col0 + other.cols);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }

    pub fn check_inside(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.row0 + self.rows > rows || self.col0 + self.cols > cols {
            return Err(Error::OutOfBounds(format!(
                "{self:?} does not fit a {rows}x{cols} lattice"
            )));
        }
        Ok(())
    }
}

/// Footprint of a nadir image taken at `position`.
pub fn footprint_at(terrain: &SemanticTerrain, cam: &CameraModel, position: &Waypoint) -> Result<Footprint> {
    let region = FlyableRegion::new(terrain, cam);
    if !region.contains(position) || !position.x.is_finite() || !position.y.is_finite() {
        return Err(Error::OutOfBounds(format!(
            "position ({}, {}) outside flyable region x[{}, {}] y[{}, {}]",
            position.x, position.y, region.x_min, region.x_max, region.y_min, region.y_max
        )));
    }
    let col0 = (position.x / cam.gsd_m - cam.fov_w as f64 / 2.0).round().max(0.0) as usize;
    let row0 = (position.y / cam.gsd_m - cam.fov_h as f64 / 2.0).round().max(0.0) as usize;
    let fp = Footprint {
        row0: row0.min(terrain.rows - cam.fov_h),
        col0: col0.min(terrain.cols - cam.fov_w),
        rows: cam.fov_h,
        cols: cam.fov_w,
    };
    fp.check_inside(terrain.rows, terrain.cols)?;
    Ok(fp)
}

/// `dim x rows x cols` feature crop, stored pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

/// Copies the features and labels under `footprint`.
pub fn crop_image(terrain: &SemanticTerrain, footprint: &Footprint) -> Result<(FeatureImage, LabelImage)> {
    footprint.check_inside(terrain.rows, terrain.cols)?;
    let d = terrain.feature_dim;
    let mut features = Vec::with_capacity(footprint.area() * d);
    let mut labels = Vec::with_capacity(footprint.area());
    for r in footprint.row0..footprint.row0 + footprint.rows {
        let start = r * terrain.cols + footprint.col0;
        features.extend_from_slice(&terrain.features[start * d..(start + footprint.cols) * d]);
        labels.extend_from_slice(&terrain.labels[start..start + footprint.cols]);
    }
    Ok((
        FeatureImage {
            rows: footprint.rows,
            cols: footprint.cols,
            dim: d,
            data: features,
        },
        LabelImage {
            rows: footprint.rows,
            cols: footprint.cols,
            data: labels,
        },
    ))
}
