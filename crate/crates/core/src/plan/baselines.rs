//! Map-agnostic baselines: lawnmower coverage and random walks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::local::Edge;
use super::{flight_time, KinematicModel, MapView, Path, PlanStep, PlannerConfig, Waypoint};
use crate::terrain::FlyableRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Sweeps along x, rows stacked along y.
    Horizontal,
    /// Sweeps along y, columns stacked along x.
    Vertical,
}

/// Grid over `[lo, hi]` at `spacing`, with `hi` appended when the last
/// step falls short of it.
fn axis(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let n = ((hi - lo) / spacing + 1e-9).floor() as usize;
    let mut v: Vec<f64> = (0..=n).map(|i| lo + i as f64 * spacing).collect();
    if hi - v[n] > 1e-9 {
        v.push(hi);
    }
    v
}

/// Boustrophedon waypoints over the region starting at its top-left
/// corner. Sweep lines and the measurement points along them are both
/// `spacing` metres apart.
pub fn coverage_pattern(region: &FlyableRegion, spacing: f64, orientation: Orientation) -> Path {
    let xs = axis(region.x_min, region.x_max, spacing);
    let ys = axis(region.y_min, region.y_max, spacing);
    let (outer, inner) = match orientation {
        Orientation::Horizontal => (&ys, &xs),
        Orientation::Vertical => (&xs, &ys),
    };
    let mut path = Vec::with_capacity(outer.len() * inner.len());
    for (i, &o) in outer.iter().enumerate() {
        let sweep: Box<dyn Iterator<Item = &f64>> = if i % 2 == 0 {
            Box::new(inner.iter())
        } else {
            Box::new(inner.iter().rev())
        };
        for &t in sweep {
            let (x, y) = match orientation {
                Orientation::Horizontal => (t, o),
                Orientation::Vertical => (o, t),
            };
            path.push(Waypoint::new(x, y, region.altitude_m));
        }
    }
    path
}

/// Coverage path for mission `mission`: orientation alternates every
/// mission and the spacing cycles through `cfg.coverage_spacing_fracs`
/// every two missions. Waypoints coinciding with `start` at the head of the
/// pattern are dropped, and the rest is truncated to the longest prefix
/// whose flight time from `start` fits in `budget`.
pub fn plan_coverage(
    region: &FlyableRegion,
    fov_ground_m: f64,
    km: &KinematicModel,
    start: &Waypoint,
    budget: f64,
    mission: usize,
    cfg: &PlannerConfig,
) -> Path {
    let orientation = if mission % 2 == 0 {
        Orientation::Horizontal
    } else {
        Orientation::Vertical
    };
    let fracs = &cfg.coverage_spacing_fracs;
    let spacing = fracs[(mission / 2) % fracs.len()] * fov_ground_m;
    let pattern = coverage_pattern(region, spacing, orientation);
    let mut out = Vec::new();
    let mut prev = *start;
    let mut spent = 0.0;
    for p in pattern {
        if out.is_empty() && p.distance(start) <= 1e-9 {
            continue;
        }
        let cost = flight_time(km, &prev, &p);
        if spent + cost > budget {
            break;
        }
        spent += cost;
        out.push(p);
        prev = p;
    }
    out
}

/// Step of `cfg.local_step_frac` footprint extents towards a uniformly
/// chosen image edge. Edges whose step is clipped to nothing are skipped.
pub fn plan_random_local(view: &MapView, pose: &Waypoint, cfg: &PlannerConfig, seed: u64) -> PlanStep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Edge::ALL;
    edges.shuffle(&mut rng);
    let step = cfg.local_step_frac * view.cam.fov_ground_m();
    for e in edges {
        let (dx, dy) = e.direction();
        let q = view.region.clip(Waypoint::new(pose.x + step * dx, pose.y + step * dy, pose.z));
        if q.distance(pose) > 1e-9 {
            return PlanStep::Move(q);
        }
    }
    PlanStep::Hold
}

/// Uniform heading in `[0, 2pi)` and uniform radius in `[r_min, r_max]`,
/// returned as `(heading, radius)`.
pub fn sample_global_step(rng: &mut impl Rng, r_min: f64, r_max: f64) -> (f64, f64) {
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = if r_max > r_min {
        rng.random_range(r_min..=r_max)
    } else {
        r_max
    };
    (heading, radius)
}

/// Global random walk step. The radius range is capped by the distance
/// still affordable within `remaining_budget`; the target is clipped to the
/// flyable region, resampling when clipping leaves no displacement.
pub fn plan_random_global(
    view: &MapView,
    pose: &Waypoint,
    remaining_budget: f64,
    cfg: &PlannerConfig,
    seed: u64,
) -> PlanStep {
    let fov = view.cam.fov_ground_m();
    let reach = view.km.distance_for_time(remaining_budget) * (1.0 - 1e-9);
    let r_max = (cfg.random_max_radius_frac * fov).min(reach);
    let r_min = (cfg.random_min_radius_frac * fov).min(r_max);
    if r_max <= 1e-9 {
        return PlanStep::Hold;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..32 {
        let (heading, radius) = sample_global_step(&mut rng, r_min, r_max);
        let q = view.region.clip(Waypoint::new(
            pose.x + radius * heading.cos(),
            pose.y + radius * heading.sin(),
            pose.z,
        ));
        if q.distance(pose) > 1e-9 && flight_time(&view.km, pose, &q) <= remaining_budget {
            return PlanStep::Move(q);
        }
    }
    PlanStep::Hold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region() -> FlyableRegion {
        FlyableRegion {
            x_min: 8.0,
            x_max: 56.0,
            y_min: 8.0,
            y_max: 56.0,
            altitude_m: 10.0,
        }
    }

    #[test]
    fn pattern_visits_every_row_once() {
        let path = coverage_pattern(&region(), 16.0, Orientation::Horizontal);
        let mut rows: Vec<f64> = path.iter().map(|p| p.y).collect();
        rows.dedup();
        assert_eq!(rows, vec![8.0, 24.0, 40.0, 56.0]);
        assert_eq!(path.len(), 16);
        assert_eq!(path[0], Waypoint::new(8.0, 8.0, 10.0));
        assert_eq!(path[4], Waypoint::new(56.0, 24.0, 10.0));
    }

    #[test]
    fn orientation_alternates() {
        let cfg = PlannerConfig::default();
        let km = KinematicModel::default();
        let start = Waypoint::new(8.0, 8.0, 10.0);
        let m0 = plan_coverage(&region(), 16.0, &km, &start, f64::INFINITY, 0, &cfg);
        let m1 = plan_coverage(&region(), 16.0, &km, &start, f64::INFINITY, 1, &cfg);
        assert_eq!(m0[0].y, 8.0);
        assert!(m0[0].x > 8.0);
        assert_eq!(m1[0].x, 8.0);
        assert!(m1[0].y > 8.0);
    }
}
