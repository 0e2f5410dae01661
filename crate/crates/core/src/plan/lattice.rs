use super::{flight_time, nearly_equal, MapView, Path, PlannerConfig, Waypoint};
use crate::terrain::Footprint;

/// Flyable region gridded at `spacing` metres, row-major from the top-left.
pub fn lattice_points(view: &MapView, spacing: f64) -> Vec<Waypoint> {
    let r = &view.region;
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let n = ((hi - lo) / spacing + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * spacing).collect()
    };
    let xs = axis(r.x_min, r.x_max);
    let ys = axis(r.y_min, r.y_max);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| Waypoint::new(x, y, r.altitude_m)))
        .collect()
}

/// Path information: per-step score over cost times smoothed, forward
/// simulated training count, summed along the path starting at `pose`.
pub fn path_objective(view: &MapView, pose: &Waypoint, path: &[Waypoint]) -> f64 {
    let mut planned: Vec<Footprint> = Vec::with_capacity(path.len());
    let mut prev = *pose;
    let mut total = 0.0;
    for p in path {
        total += view.step_reward(&prev, p, &planned);
        planned.push(view.footprint(p));
        prev = *p;
    }
    total
}

/// Greedy path of up to `cfg.horizon` lattice points. Each step maximises
/// the one-step reward given the training counts simulated for the steps
/// already chosen; candidates that would overrun `remaining_budget` are
/// skipped. Returns `None` when no lattice point is affordable.
pub fn plan_greedy_lattice(
    view: &MapView,
    pose: &Waypoint,
    remaining_budget: f64,
    cfg: &PlannerConfig,
) -> Option<Path> {
    let lattice = lattice_points(view, cfg.lattice_spacing_frac * view.cam.fov_ground_m());
    let mut path = Vec::with_capacity(cfg.horizon);
    let mut planned: Vec<Footprint> = Vec::with_capacity(cfg.horizon);
    let mut prev = *pose;
    let mut spent = 0.0;
    for _ in 0..cfg.horizon {
        let mut best: Option<(f64, usize, f64)> = None;
        for (i, cand) in lattice.iter().enumerate() {
            if cand.distance(&prev) <= 1e-9 {
                continue;
            }
            let cost = flight_time(&view.km, &prev, cand);
            if spent + cost > remaining_budget {
                continue;
            }
            let value = view.step_reward(&prev, cand, &planned);
            let better = match best {
                None => true,
                Some((bv, _, _)) => !nearly_equal(value, bv) && value > bv,
            };
            if better {
                best = Some((value, i, cost));
            }
        }
        let Some((_, i, cost)) = best else { break };
        let chosen = lattice[i];
        planned.push(view.footprint(&chosen));
        path.push(chosen);
        spent += cost;
        prev = chosen;
    }
    (!path.is_empty()).then_some(path)
}
