//! (mu/mu_w, lambda) CMA-ES with rank-one and rank-mu covariance updates
//! and cumulative step-size adaptation, used to refine greedy paths in the
//! continuous workspace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{lattice::path_objective, path_cost, MapView, Path, PlannerConfig, Waypoint};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesOptions {
    pub sigma0: f64,
    pub lambda: usize,
    pub seed: u64,
}

/// Maximising CMA-ES state.
#[derive(Debug, Clone)]
pub struct Cmaes {
    n: usize,
    lambda: usize,
    weights: Vec<f64>,
    mueff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    pc: DVector<f64>,
    ps: DVector<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    generation: usize,
    rng: ChaCha8Rng,
}

impl Cmaes {
    pub fn new(mean: &[f64], opts: &CmaesOptions) -> Self {
        let n = mean.len();
        let lambda = opts.lambda.max(2);
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Cmaes {
            n,
            lambda,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
            mean: DVector::from_column_slice(mean),
            sigma: opts.sigma0,
            cov: DMatrix::identity(n, n),
            pc: DVector::zeros(n),
            ps: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Draws `lambda` candidates from `N(mean, sigma^2 C)`.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.n, |_, _| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng)
                });
                let y = &self.basis * z.component_mul(&self.scales);
                (&self.mean + y * self.sigma).as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the distribution from candidates and their fitness (higher is better).
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
        let old = self.mean.clone();
        let steps: Vec<DVector<f64>> = order
            .iter()
            .take(self.weights.len())
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w += y * *w;
        }
        self.mean = &old + &y_w * self.sigma;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d))
            * self.basis.transpose();
        self.ps = &self.ps * (1.0 - self.cs) + inv_sqrt * &y_w * (self.cs * (2.0 - self.cs) * self.mueff).sqrt();
        self.generation += 1;
        let ps_norm = self.ps.norm();
        let denom = (1.0 - (1.0 - self.cs).powi(2 * self.generation as i32)).sqrt();
        let hsig = ps_norm / denom / self.chi_n < 1.4 + 2.0 / (self.n as f64 + 1.0);
        let h = if hsig { 1.0 } else { 0.0 };
        self.pc = &self.pc * (1.0 - self.cc) + &y_w * (h * (self.cc * (2.0 - self.cc) * self.mueff).sqrt());

        let mut rank_mu = DMatrix::zeros(self.n, self.n);
        for (w, y) in self.weights.iter().zip(&steps) {
            rank_mu += y * y.transpose() * *w;
        }
        let rank_one = &self.pc * self.pc.transpose() + &self.cov * ((1.0 - h) * self.cc * (2.0 - self.cc));
        self.cov = &self.cov * (1.0 - self.c1 - self.cmu) + rank_one * self.c1 + rank_mu * self.cmu;
        // enforce symmetry against round-off
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        self.sigma *= ((self.cs / self.damps) * (ps_norm / self.chi_n - 1.0)).exp();

        let eig = SymmetricEigen::new(self.cov.clone());
        self.basis = eig.eigenvectors;
        self.scales = eig.eigenvalues.map(|v| v.max(1e-20).sqrt());
    }
}

fn to_path(view: &MapView, x: &[f64]) -> Path {
    x.chunks_exact(2)
        .map(|c| view.region.clip(Waypoint::new(c[0], c[1], view.region.altitude_m)))
        .collect()
}

/// Refines `init` with CMA-ES over the 2P waypoint coordinates, maximising
/// [`path_objective`]. Candidates are clipped to the flyable region; those
/// whose flight time exceeds `remaining_budget` score negative infinity.
/// `init` is evaluated in generation 0, and the best path ever evaluated is
/// returned, so the result never scores below `init`.
pub fn refine_path(
    view: &MapView,
    pose: &Waypoint,
    init: &[Waypoint],
    remaining_budget: f64,
    cfg: &PlannerConfig,
    seed: u64,
) -> Path {
    if init.is_empty() || cfg.cmaes_generations == 0 {
        return init.to_vec();
    }
    let evaluate = |path: &Path| -> f64 {
        let mut full = Vec::with_capacity(path.len() + 1);
        full.push(*pose);
        full.extend_from_slice(path);
        if path_cost(&view.km, &full) > remaining_budget {
            f64::NEG_INFINITY
        } else {
            path_objective(view, pose, path)
        }
    };
    let x0: Vec<f64> = init.iter().flat_map(|w| [w.x, w.y]).collect();
    let dims = x0.len();
    let extent = (view.rows as f64).min(view.cols as f64) * view.cam.gsd_m;
    let opts = CmaesOptions {
        sigma0: cfg.cmaes_sigma0_frac * extent,
        lambda: 4 + (3.0 * (dims as f64).ln()).floor() as usize,
        seed,
    };
    let mut es = Cmaes::new(&x0, &opts);
    let mut best_path = init.to_vec();
    let mut best_value = evaluate(&best_path);
    for gen in 0..cfg.cmaes_generations {
        let mut candidates = es.ask();
        if gen == 0 {
            candidates[0] = x0.clone();
        }
        let paths: Vec<Path> = candidates.iter().map(|x| to_path(view, x)).collect();
        let values = par::map(&paths, evaluate);
        for (p, &v) in paths.iter().zip(&values) {
            if v > best_value {
                best_value = v;
                best_path = p.clone();
            }
        }
        // rank on the clipped coordinates so the mean stays near the region
        let clipped: Vec<Vec<f64>> = paths
            .iter()
            .map(|p| p.iter().flat_map(|w| [w.x, w.y]).collect())
            .collect();
        es.tell(&clipped, &values);
    }
    best_path
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_sphere() {
        let mut es = Cmaes::new(&[3.0, -2.0, 1.5], &CmaesOptions { sigma0: 1.0, lambda: 10, seed: 3 });
        for _ in 0..150 {
            let xs = es.ask();
            let f: Vec<f64> = xs.iter().map(|x| -x.iter().map(|v| v * v).sum::<f64>()).collect();
            es.tell(&xs, &f);
        }
        assert!(es.mean().iter().all(|v| v.abs() < 1e-3), "{:?}", es.mean());
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let mut es = Cmaes::new(&[1.0, 1.0], &CmaesOptions { sigma0: 0.5, lambda: 6, seed: 42 });
            for _ in 0..10 {
                let xs = es.ask();
                let f: Vec<f64> = xs.iter().map(|x| -(x[0] - 2.0).abs() - x[1].abs()).collect();
                es.tell(&xs, &f);
            }
            es.mean().to_vec()
        };
        assert_eq!(run(), run());
    }
}
