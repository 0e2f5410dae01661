//! Path planners and baselines over map snapshots.
//!
//! All map-based objectives share one shape: summed acquisition score under
//! a footprint divided by the smoothed training count there, and, for the
//! multi-step planners, by the flight time to reach it. The score layer is
//! either the uncertainty or the novelty map, selected by [`ScoreLayer`].

mod baselines;
mod cmaes;
mod frontier;
mod lattice;
mod local;
mod mcts;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::map::MultiLayerMap;
use crate::terrain::{CameraModel, FlyableRegion, Footprint};
use crate::{Error, Result};

pub use baselines::{
    coverage_pattern, plan_coverage, plan_random_global, plan_random_local, sample_global_step,
    Orientation,
};
pub use cmaes::{refine_path, Cmaes, CmaesOptions};
pub use frontier::{frontier_candidates, plan_frontier};
pub use lattice::{lattice_points, path_objective, plan_greedy_lattice};
pub use local::{plan_local, Edge};
pub use mcts::{action_set, plan_mcts, Action};

/// Measurement position in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Waypoint { x, y, z }
    }

    pub fn distance(&self, other: &Waypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

impl fmt::Display for Waypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.3})", self.x, self.y, self.z)
    }
}

pub type Path = Vec<Waypoint>;

/// Trapezoidal velocity profile with symmetric acceleration limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicModel {
    pub v_max: f64,
    pub accel: f64,
}

impl Default for KinematicModel {
    fn default() -> Self {
        KinematicModel {
            v_max: 2.0,
            accel: 2.0,
        }
    }
}

impl KinematicModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.accel > 0.0) {
            return Err(Error::Config("v_max and accel must be positive".into()));
        }
        Ok(())
    }

    /// Flight time for a straight segment of length `d`.
    pub fn time_for_distance(&self, d: f64) -> f64 {
        let (v, a) = (self.v_max, self.accel);
        if d <= 0.0 {
            0.0
        } else if d >= v * v / a {
            d / v + v / a
        } else {
            2.0 * (d / a).sqrt()
        }
    }

    /// Longest distance reachable within `t` seconds.
    pub fn distance_for_time(&self, t: f64) -> f64 {
        let (v, a) = (self.v_max, self.accel);
        if t <= 0.0 {
            0.0
        } else if t >= 2.0 * v / a {
            v * (t - v / a)
        } else {
            a * t * t / 4.0
        }
    }
}

pub fn flight_time(km: &KinematicModel, p: &Waypoint, q: &Waypoint) -> f64 {
    km.time_for_distance(p.distance(q))
}

pub fn path_cost(km: &KinematicModel, path: &[Waypoint]) -> f64 {
    path.windows(2).map(|w| flight_time(km, &w[0], &w[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Local,
    Frontier,
    Optimisation,
    Sampling,
    Coverage,
    RandomLocal,
    RandomGlobal,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 7] = [
        PlannerKind::Local,
        PlannerKind::Frontier,
        PlannerKind::Optimisation,
        PlannerKind::Sampling,
        PlannerKind::Coverage,
        PlannerKind::RandomLocal,
        PlannerKind::RandomGlobal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::Local => "local",
            PlannerKind::Frontier => "frontier",
            PlannerKind::Optimisation => "optimisation",
            PlannerKind::Sampling => "sampling",
            PlannerKind::Coverage => "coverage",
            PlannerKind::RandomLocal => "random_local",
            PlannerKind::RandomGlobal => "random_global",
        }
    }

    pub fn uses_map(&self) -> bool {
        matches!(
            self,
            PlannerKind::Frontier | PlannerKind::Optimisation | PlannerKind::Sampling
        )
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Planner hyperparameters. Lengths given as `*_frac` are multiples of the
/// footprint's ground extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    /// Path length P for the optimisation and sampling planners.
    pub horizon: usize,
    pub mcts_simulations: usize,
    pub ucb_c: f64,
    pub mcts_headings: usize,
    pub mcts_step_fracs: Vec<f64>,
    pub cmaes_generations: usize,
    /// Initial step size as a fraction of the smaller terrain extent.
    pub cmaes_sigma0_frac: f64,
    /// Lattice spacing for greedy initialisation.
    pub lattice_spacing_frac: f64,
    pub frontier_spacing_frac: f64,
    pub local_step_frac: f64,
    pub random_min_radius_frac: f64,
    pub random_max_radius_frac: f64,
    pub coverage_spacing_fracs: Vec<f64>,
    /// Shortest hop length credited in cost-normalised objectives; shorter
    /// hops are charged the flight time of this distance.
    pub min_hop_frac: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            kind: PlannerKind::Frontier,
            horizon: 4,
            mcts_simulations: 300,
            ucb_c: std::f64::consts::SQRT_2,
            mcts_headings: 8,
            mcts_step_fracs: vec![0.5, 1.0],
            cmaes_generations: 30,
            cmaes_sigma0_frac: 0.1,
            lattice_spacing_frac: 1.0,
            frontier_spacing_frac: 0.5,
            local_step_frac: 0.5,
            random_min_radius_frac: 0.5,
            random_max_radius_frac: 4.0,
            coverage_spacing_fracs: vec![1.0, 1.5],
            min_hop_frac: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon as f64),
            ("mcts_simulations", self.mcts_simulations as f64),
            ("ucb_c", self.ucb_c),
            ("mcts_headings", self.mcts_headings as f64),
            ("cmaes_sigma0_frac", self.cmaes_sigma0_frac),
            ("lattice_spacing_frac", self.lattice_spacing_frac),
            ("frontier_spacing_frac", self.frontier_spacing_frac),
            ("local_step_frac", self.local_step_frac),
            ("random_min_radius_frac", self.random_min_radius_frac),
            ("random_max_radius_frac", self.random_max_radius_frac),
            ("min_hop_frac", self.min_hop_frac),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cmaes_sigma0_frac > 1.0 {
            return Err(Error::Config("cmaes_sigma0_frac must not exceed 1".into()));
        }
        if self.random_max_radius_frac < self.random_min_radius_frac {
            return Err(Error::Config("random radius range is empty".into()));
        }
        if self.mcts_step_fracs.is_empty() || self.mcts_step_fracs.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mcts_step_fracs must be non-empty and positive".into()));
        }
        if self.coverage_spacing_fracs.is_empty() || self.coverage_spacing_fracs.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("coverage_spacing_fracs must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Which mapped acquisition layer the objectives read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreLayer {
    Uncertainty,
    Novelty,
}

/// Planner decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanStep {
    Move(Waypoint),
    /// No feasible action; the agent stays put.
    Hold,
}

impl PlanStep {
    pub fn waypoint(&self) -> Option<Waypoint> {
        match self {
            PlanStep::Move(w) => Some(*w),
            PlanStep::Hold => None,
        }
    }
}

/// Read-only planning view of a map: summed-area tables for O(1) footprint
/// sums plus the geometry needed to place footprints.
#[derive(Debug, Clone)]
pub struct MapView {
    pub rows: usize,
    pub cols: usize,
    pub cam: CameraModel,
    pub region: FlyableRegion,
    pub km: KinematicModel,
    score_sat: Vec<f64>,
    tc_sat: Vec<f64>,
    /// Smoothing added to train-count sums: the footprint cell count.
    pub epsilon: f64,
    /// Lower bound on the flight time used as an objective denominator.
    pub min_cost: f64,
}

fn summed_area(rows: usize, cols: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    let w = cols + 1;
    let mut sat = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut row_sum = 0.0;
        for c in 0..cols {
            row_sum += value(r * cols + c);
            sat[(r + 1) * w + c + 1] = sat[r * w + c + 1] + row_sum;
        }
    }
    sat
}

impl MapView {
    pub fn new(
        map: &MultiLayerMap,
        layer: ScoreLayer,
        cam: &CameraModel,
        region: FlyableRegion,
        km: &KinematicModel,
        min_hop_m: f64,
    ) -> Self {
        let scores = match layer {
            ScoreLayer::Uncertainty => &map.mu_u,
            ScoreLayer::Novelty => &map.mu_r,
        };
        MapView {
            rows: map.rows,
            cols: map.cols,
            cam: *cam,
            region,
            km: *km,
            score_sat: summed_area(map.rows, map.cols, |i| scores[i]),
            tc_sat: summed_area(map.rows, map.cols, |i| map.train_counts[i] as f64),
            epsilon: cam.footprint_area() as f64,
            min_cost: km.time_for_distance(min_hop_m),
        }
    }

    fn rect(sat: &[f64], cols: usize, fp: &Footprint) -> f64 {
        let w = cols + 1;
        let (r0, c0, r1, c1) = (fp.row0, fp.col0, fp.row0 + fp.rows, fp.col0 + fp.cols);
        sat[r1 * w + c1] - sat[r0 * w + c1] - sat[r1 * w + c0] + sat[r0 * w + c0]
    }

    pub fn score_sum(&self, fp: &Footprint) -> f64 {
        Self::rect(&self.score_sat, self.cols, fp)
    }

    pub fn train_count_sum(&self, fp: &Footprint) -> f64 {
        Self::rect(&self.tc_sat, self.cols, fp)
    }

    /// Footprint of a position, clipped into the flyable region.
    pub fn footprint(&self, p: &Waypoint) -> Footprint {
        let p = self.region.clip(*p);
        let col0 = (p.x / self.cam.gsd_m - self.cam.fov_w as f64 / 2.0).round().max(0.0) as usize;
        let row0 = (p.y / self.cam.gsd_m - self.cam.fov_h as f64 / 2.0).round().max(0.0) as usize;
        Footprint {
            row0: row0.min(self.rows - self.cam.fov_h),
            col0: col0.min(self.cols - self.cam.fov_w),
            rows: self.cam.fov_h,
            cols: self.cam.fov_w,
        }
    }

    /// Train count under `fp` after forward-simulating one extra training
    /// image at each of `planned`.
    pub fn simulated_train_count(&self, fp: &Footprint, planned: &[Footprint]) -> f64 {
        self.train_count_sum(fp) + planned.iter().map(|p| fp.overlap(p) as f64).sum::<f64>()
    }

    /// Cost used in objective denominators.
    pub fn objective_cost(&self, from: &Waypoint, to: &Waypoint) -> f64 {
        flight_time(&self.km, from, to).max(self.min_cost)
    }

    /// One-step gain of measuring at `to` coming from `from`.
    pub fn step_reward(&self, from: &Waypoint, to: &Waypoint, planned: &[Footprint]) -> f64 {
        let fp = self.footprint(to);
        self.score_sum(&fp) / (self.objective_cost(from, to) * (self.simulated_train_count(&fp, planned) + self.epsilon))
    }
}

/// Ties within this relative tolerance are resolved by the documented
/// secondary keys instead of by float noise.
pub(crate) fn nearly_equal(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flight_time_examples() {
        let km = KinematicModel::default();
        let o = Waypoint::new(0.0, 0.0, 10.0);
        assert_eq!(flight_time(&km, &o, &o), 0.0);
        assert_abs_diff_eq!(flight_time(&km, &o, &Waypoint::new(10.0, 0.0, 10.0)), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(flight_time(&km, &o, &Waypoint::new(0.0, 1.0, 10.0)), 2f64.sqrt(), epsilon = 1e-12);
        // profile switch at d = v^2 / a is continuous
        assert_abs_diff_eq!(km.time_for_distance(2.0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(km.time_for_distance(2.0 - 1e-9), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn distance_for_time_inverts() {
        let km = KinematicModel { v_max: 3.0, accel: 1.5 };
        for d in [0.1, 1.0, 5.9, 6.0, 6.1, 40.0] {
            assert_abs_diff_eq!(km.distance_for_time(km.time_for_distance(d)), d, epsilon = 1e-9);
        }
    }

    #[test]
    fn path_cost_examples() {
        let km = KinematicModel::default();
        let p = |x: f64| Waypoint::new(x, 0.0, 10.0);
        assert_eq!(path_cost(&km, &[p(0.0)]), 0.0);
        let path = vec![p(0.0), p(5.0), p(10.0), p(15.0)];
        assert_abs_diff_eq!(path_cost(&km, &path), 3.0 * flight_time(&km, &p(0.0), &p(5.0)), epsilon = 1e-12);
        let mut rev = path.clone();
        rev.reverse();
        assert_abs_diff_eq!(path_cost(&km, &rev), path_cost(&km, &path), epsilon = 1e-12);
        let a = path_cost(&km, &path[..2]);
        let b = path_cost(&km, &path[1..]);
        assert_abs_diff_eq!(a + b, path_cost(&km, &path), epsilon = 1e-12);
    }
}
