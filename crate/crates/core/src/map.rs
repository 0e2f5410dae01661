//! Multi-layer probabilistic terrain map.
//!
//! Each of the `K` semantic layers is an independent binary occupancy grid
//! updated in log-odds form. Uncertainty and novelty layers keep running
//! means over all hits of a cell. Hit counts track every mapped image,
//! train counts only images that entered the training set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ProbTensor;
use crate::pgm::Pgm;
use crate::terrain::{FeatureImage, Footprint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Symmetric bound applied to every log-odds value.
    pub log_odds_clamp: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { log_odds_clamp: 10.0 }
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// One projected measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub footprint: Footprint,
    pub probs: ProbTensor,
    pub uncertainty: Vec<f64>,
    pub novelty: Vec<f64>,
    pub is_training_sample: bool,
}

/// Stored image for replaying observations under a retrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub footprint: Footprint,
    pub features: FeatureImage,
    pub is_training_sample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerMap {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    /// Cell-major log-odds, `cell * classes + k`.
    pub log_odds: Vec<f64>,
    pub mu_u: Vec<f64>,
    pub mu_r: Vec<f64>,
    pub hits: Vec<u32>,
    pub train_counts: Vec<u32>,
    pub prior_log_odds: f64,
    pub prior_u: f64,
    pub prior_r: f64,
    pub clamp: f64,
}

impl MultiLayerMap {
    /// Pristine map: uniform `1/K` semantic prior, maximal uncertainty
    /// (`ln K`) and novelty (`1`) priors.
    pub fn new(rows: usize, cols: usize, classes: usize, cfg: &MapConfig) -> Self {
        let l0 = logit(1.0 / classes as f64);
        let n = rows * cols;
        let prior_u = (classes as f64).ln();
        MultiLayerMap {
            rows,
            cols,
            classes,
            log_odds: vec![l0; n * classes],
            mu_u: vec![prior_u; n],
            mu_r: vec![1.0; n],
            hits: vec![0; n],
            train_counts: vec![0; n],
            prior_log_odds: l0,
            prior_u,
            prior_r: 1.0,
            clamp: cfg.log_odds_clamp,
        }
    }

    /// Fresh map with the same geometry and priors.
    pub fn pristine(&self) -> Self {
        MultiLayerMap::new(
            self.rows,
            self.cols,
            self.classes,
            &MapConfig {
                log_odds_clamp: self.clamp,
            },
        )
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn fuse(&mut self, obs: &Observation) -> Result<()> {
        let fp = obs.footprint;
        fp.check_inside(self.rows, self.cols)?;
        let n = fp.area();
        let k = self.classes;
        if obs.probs.rows != fp.rows
            || obs.probs.cols != fp.cols
            || obs.probs.classes != k
            || obs.uncertainty.len() != n
            || obs.novelty.len() != n
        {
            return Err(Error::Shape("observation does not match its footprint".into()));
        }
        for r in 0..fp.rows {
            for c in 0..fp.cols {
                let px = r * fp.cols + c;
                let cell = self.cell(fp.row0 + r, fp.col0 + c);
                self.hits[cell] += 1;
                let h = self.hits[cell] as f64;
                let p = obs.probs.pixel(px);
                for (i, &pi) in p.iter().enumerate() {
                    let l = &mut self.log_odds[cell * k + i];
                    *l = (logit(pi) + *l - self.prior_log_odds).clamp(-self.clamp, self.clamp);
                }
                self.mu_u[cell] += (obs.uncertainty[px] - self.mu_u[cell]) / h;
                self.mu_r[cell] += (obs.novelty[px] - self.mu_r[cell]) / h;
                if obs.is_training_sample {
                    self.train_counts[cell] += 1;
                }
            }
        }
        Ok(())
    }

    /// Per-layer sigmoid beliefs renormalised to a distribution over classes.
    pub fn semantic_posterior(&self, row: usize, col: usize) -> Vec<f64> {
        let cell = self.cell(row, col);
        let k = self.classes;
        let mut p: Vec<f64> = self.log_odds[cell * k..(cell + 1) * k]
            .iter()
            .map(|&l| sigmoid(l))
            .collect();
        let s: f64 = p.iter().sum();
        for v in &mut p {
            *v /= s;
        }
        p
    }

    /// Observed cells with at least one unobserved 4-neighbour, row-major.
    pub fn frontier_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.hits[self.cell(r, c)] == 0 {
                    continue;
                }
                let unseen = |rr: usize, cc: usize| self.hits[self.cell(rr, cc)] == 0;
                let frontier = (r > 0 && unseen(r - 1, c))
                    || (r + 1 < self.rows && unseen(r + 1, c))
                    || (c > 0 && unseen(r, c - 1))
                    || (c + 1 < self.cols && unseen(r, c + 1));
                if frontier {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// L1 sums of the uncertainty means, novelty means and train counts.
    pub fn region_sums(&self, fp: &Footprint) -> Result<(f64, f64, f64)> {
        fp.check_inside(self.rows, self.cols)?;
        let (mut u, mut r, mut t) = (0.0, 0.0, 0.0);
        for row in fp.row0..fp.row0 + fp.rows {
            for col in fp.col0..fp.col0 + fp.cols {
                let cell = self.cell(row, col);
                u += self.mu_u[cell];
                r += self.mu_r[cell];
                t += self.train_counts[cell] as f64;
            }
        }
        Ok((u, r, t))
    }

    fn layers(&self) -> Vec<(String, Vec<f64>)> {
        let n = self.rows * self.cols;
        let k = self.classes;
        let mut out = Vec::with_capacity(k + 4);
        for i in 0..k {
            out.push((
                format!("logodds_{i}"),
                (0..n).map(|c| self.log_odds[c * k + i]).collect(),
            ));
        }
        out.push(("uncertainty".into(), self.mu_u.clone()));
        out.push(("novelty".into(), self.mu_r.clone()));
        out.push(("hits".into(), self.hits.iter().map(|&v| v as f64).collect()));
        out.push((
            "train_counts".into(),
            self.train_counts.iter().map(|&v| v as f64).collect(),
        ));
        out
    }

    /// Raw snapshot: text header, then every layer as little-endian f64.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let layers = self.layers();
        let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
        write!(
            w,
            "IPPAL-MAP 1\nrows {}\ncols {}\nclasses {}\nclamp {}\nlayers {}\nend\n",
            self.rows,
            self.cols,
            self.classes,
            self.clamp,
            names.join(" ")
        )?;
        for (_, data) in &layers {
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_snapshot(buf: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let split = buf
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::format("map snapshot", "missing header terminator"))?;
        let header = std::str::from_utf8(&buf[..split])
            .map_err(|_| Error::format("map snapshot", "header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("IPPAL-MAP 1") {
            return Err(Error::format("map snapshot", "unsupported version"));
        }
        let mut rows = None;
        let mut cols = None;
        let mut classes = None;
        let mut clamp = 10.0;
        let mut names: Vec<String> = Vec::new();
        for line in lines {
            let (key, val) = line
                .split_once(' ')
                .ok_or_else(|| Error::format("map snapshot", format!("bad header line {line:?}")))?;
            let bad = || Error::format("map snapshot", format!("bad value for {key}"));
            match key {
                "rows" => rows = Some(val.parse::<usize>().map_err(|_| bad())?),
                "cols" => cols = Some(val.parse::<usize>().map_err(|_| bad())?),
                "classes" => classes = Some(val.parse::<usize>().map_err(|_| bad())?),
                "clamp" => clamp = val.parse().map_err(|_| bad())?,
                "layers" => names = val.split_whitespace().map(String::from).collect(),
                _ => return Err(Error::format("map snapshot", format!("unknown key {key}"))),
            }
        }
        let missing = |k: &str| Error::format("map snapshot", format!("missing {k}"));
        let rows = rows.ok_or_else(|| missing("rows"))?;
        let cols = cols.ok_or_else(|| missing("cols"))?;
        let classes = classes.ok_or_else(|| missing("classes"))?;
        if classes == 0 {
            return Err(Error::format("map snapshot", "zero classes"));
        }
        let mut map = MultiLayerMap::new(rows, cols, classes, &MapConfig { log_odds_clamp: clamp });
        let expected: Vec<String> = map.layers().into_iter().map(|(n, _)| n).collect();
        if names != expected {
            return Err(Error::format("map snapshot", "layer list does not match geometry"));
        }
        let n = rows * cols;
        let mut body = &buf[split + marker.len()..];
        for (li, name) in names.iter().enumerate() {
            if body.len() < n * 8 {
                return Err(Error::format(format!("map layer {name}"), "truncated data"));
            }
            let values: Vec<f64> = body[..n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("map layer {name}"), "non-finite value"));
            }
            body = &body[n * 8..];
            if li < classes {
                for (c, v) in values.iter().enumerate() {
                    map.log_odds[c * classes + li] = *v;
                }
            } else {
                match name.as_str() {
                    "uncertainty" => map.mu_u = values,
                    "novelty" => map.mu_r = values,
                    "hits" => map.hits = values.iter().map(|&v| v as u32).collect(),
                    _ => map.train_counts = values.iter().map(|&v| v as u32).collect(),
                }
            }
        }
        if !body.is_empty() {
            return Err(Error::format("map snapshot", "trailing bytes"));
        }
        Ok(map)
    }

    /// Writes one 16-bit PGM per layer plus `<stem>_manifest.txt` recording
    /// each layer's affine quantisation (`value = offset + scale * q`).
    /// Returns the written paths.
    pub fn export_pgm_layers(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut manifest = format!(
            "rows {}\ncols {}\nclasses {}\n",
            self.rows, self.cols, self.classes
        );
        for (name, values) in self.layers() {
            let q = quantize(&values);
            let file = format!("{stem}_{name}.pgm");
            let pgm = Pgm {
                width: self.cols,
                height: self.rows,
                maxval: u16::MAX,
                data: q.samples,
            };
            let path = dir.join(&file);
            fs::write(&path, pgm.to_bytes())?;
            written.push(path);
            manifest.push_str(&format!(
                "layer {name} file {file} offset {} scale {}\n",
                q.offset, q.scale
            ));
        }
        let path = dir.join(format!("{stem}_manifest.txt"));
        fs::write(&path, manifest)?;
        written.push(path);
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub offset: f64,
    pub scale: f64,
    pub samples: Vec<u16>,
}

/// Affine 16-bit quantisation over the value range.
pub fn quantize(values: &[f64]) -> Quantized {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (offset, scale) = if values.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, (hi - lo) / u16::MAX as f64)
    } else {
        (lo, 1.0)
    };
    let samples = values
        .iter()
        .map(|&v| ((v - offset) / scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    Quantized {
        offset,
        scale,
        samples,
    }
}

pub fn dequantize(q: &Quantized) -> Vec<f64> {
    q.samples.iter().map(|&s| q.offset + q.scale * s as f64).collect()
}

/// Rebuilds a map from `template`'s priors by replaying `history` in order
/// through `observe` (the retrained model's observation of a stored image).
pub fn recompute_priors<F>(template: &MultiLayerMap, history: &[HistoryEntry], mut observe: F) -> Result<MultiLayerMap>
where
    F: FnMut(&HistoryEntry) -> Result<Observation>,
{
    let mut map = template.pristine();
    for entry in history {
        let mut obs = observe(entry)?;
        if obs.footprint != entry.footprint {
            return Err(Error::Shape("replayed observation moved footprint".into()));
        }
        obs.is_training_sample = entry.is_training_sample;
        map.fuse(&obs)?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obs(fp: Footprint, k: usize, p: &[f64], u: f64, r: f64, train: bool) -> Observation {
        let n = fp.area();
        Observation {
            footprint: fp,
            probs: ProbTensor {
                classes: k,
                rows: fp.rows,
                cols: fp.cols,
                data: p.repeat(n),
            },
            uncertainty: vec![u; n],
            novelty: vec![r; n],
            is_training_sample: train,
        }
    }

    fn cell_fp(r: usize, c: usize) -> Footprint {
        Footprint { row0: r, col0: c, rows: 1, cols: 1 }
    }

    #[test]
    fn prior_measurement_is_identity() {
        let mut m = MultiLayerMap::new(4, 4, 4, &MapConfig::default());
        let before = m.log_odds.clone();
        m.fuse(&obs(cell_fp(1, 1), 4, &[0.25; 4], 0.1, 0.1, false)).unwrap();
        for (a, b) in before.iter().zip(&m.log_odds) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_measurements_hand_value() {
        let mut m = MultiLayerMap::new(2, 2, 4, &MapConfig::default());
        let o = obs(cell_fp(0, 0), 4, &[0.6, 0.2, 0.1, 0.1], 0.0, 0.0, false);
        m.fuse(&o).unwrap();
        assert_abs_diff_eq!(sigmoid(m.log_odds[0]), 0.6, epsilon = 1e-12);
        m.fuse(&o).unwrap();
        assert_abs_diff_eq!(m.log_odds[0], 1.9095425048844386, epsilon = 1e-9);
        assert_abs_diff_eq!(sigmoid(m.log_odds[0]), 0.8709677419354839, epsilon = 1e-9);
    }

    #[test]
    fn running_means() {
        let mut m = MultiLayerMap::new(2, 2, 3, &MapConfig::default());
        for u in [0.2, 0.4, 0.6] {
            m.fuse(&obs(cell_fp(1, 0), 3, &[1.0 / 3.0; 3], u, 1.0 - u, true)).unwrap();
        }
        let cell = m.cell(1, 0);
        assert_abs_diff_eq!(m.mu_u[cell], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mu_r[cell], 0.6, epsilon = 1e-12);
        assert_eq!((m.hits[cell], m.train_counts[cell]), (3, 3));
        // untouched cells keep priors
        assert_eq!(m.mu_u[0], 3f64.ln());
        assert_eq!(m.mu_r[0], 1.0);
    }

    #[test]
    fn posterior_and_clamp() {
        let mut m = MultiLayerMap::new(3, 3, 4, &MapConfig::default());
        let p = m.semantic_posterior(0, 0);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        m.fuse(&obs(cell_fp(0, 0), 4, &[0.97, 0.01, 0.01, 0.01], 0.0, 0.0, false)).unwrap();
        let p = m.semantic_posterior(0, 0);
        assert_eq!(crate::model::argmax(&p), 0);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        for _ in 0..50 {
            m.fuse(&obs(cell_fp(0, 0), 4, &[1.0, 0.0, 0.0, 0.0], 0.0, 0.0, false)).unwrap();
        }
        assert!(m.log_odds.iter().all(|l| l.abs() <= 10.0));
        assert_eq!(m.log_odds[0], 10.0);
        assert_eq!(m.log_odds[1], -10.0);
    }

    #[test]
    fn frontier_examples() {
        let mut m = MultiLayerMap::new(10, 10, 3, &MapConfig::default());
        assert!(m.frontier_cells().is_empty());
        let fp = Footprint { row0: 3, col0: 2, rows: 4, cols: 5 };
        m.fuse(&obs(fp, 3, &[1.0 / 3.0; 3], 0.0, 0.0, false)).unwrap();
        let expected: Vec<(usize, usize)> = (3..7)
            .flat_map(|r| (2..7).map(move |c| (r, c)))
            .filter(|&(r, c)| r == 3 || r == 6 || c == 2 || c == 6)
            .collect();
        assert_eq!(m.frontier_cells(), expected);
        let all = Footprint { row0: 0, col0: 0, rows: 10, cols: 10 };
        m.fuse(&obs(all, 3, &[1.0 / 3.0; 3], 0.0, 0.0, false)).unwrap();
        assert!(m.frontier_cells().is_empty());
    }

    #[test]
    fn region_sums_examples() {
        let m = MultiLayerMap::new(16, 16, 4, &MapConfig::default());
        let fp = Footprint { row0: 0, col0: 0, rows: 8, cols: 8 };
        let (u, r, t) = m.region_sums(&fp).unwrap();
        assert_abs_diff_eq!(u, 64.0 * 4f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(u, 88.722839111672999, epsilon = 1e-9);
        assert_eq!((r, t), (64.0, 0.0));
        let right = Footprint { col0: 8, ..fp };
        let both = Footprint { cols: 16, ..fp };
        let (u2, _, _) = m.region_sums(&right).unwrap();
        assert_abs_diff_eq!(m.region_sums(&both).unwrap().0, u + u2, epsilon = 1e-9);
        assert!(m.region_sums(&Footprint { row0: 10, ..fp }).is_err());
    }

    #[test]
    fn fuse_rejects_bad_observations() {
        let mut m = MultiLayerMap::new(4, 4, 3, &MapConfig::default());
        let o = obs(Footprint { row0: 2, col0: 2, rows: 3, cols: 3 }, 3, &[1.0 / 3.0; 3], 0.0, 0.0, false);
        assert!(matches!(m.fuse(&o), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn snapshot_roundtrip_and_corruption() {
        let mut m = MultiLayerMap::new(5, 6, 3, &MapConfig::default());
        m.fuse(&obs(Footprint { row0: 1, col0: 1, rows: 2, cols: 3 }, 3, &[0.5, 0.3, 0.2], 0.4, 0.7, true))
            .unwrap();
        let mut bytes = Vec::new();
        m.write_snapshot(&mut bytes).unwrap();
        assert_eq!(MultiLayerMap::read_snapshot(&bytes).unwrap(), m);
        let cut = &bytes[..bytes.len() - 8 * 30 - 4];
        let err = MultiLayerMap::read_snapshot(cut).unwrap_err().to_string();
        assert!(err.contains("hits"), "{err}");
    }

    #[test]
    fn quantization_within_one_lsb() {
        let values: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.37).sin() * 7.0).collect();
        let q = quantize(&values);
        for (a, b) in values.iter().zip(dequantize(&q)) {
            assert!((a - b).abs() <= q.scale, "{a} {b}");
        }
        let flat = quantize(&[2.5; 4]);
        assert_eq!(dequantize(&flat), vec![2.5; 4]);
    }
}
