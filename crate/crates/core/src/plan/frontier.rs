use super::{baselines, flight_time, nearly_equal, MapView, PlanStep, PlannerConfig, Waypoint};
use crate::map::MultiLayerMap;

/// Frontier cells thinned to a minimum spacing (in cells), each lifted to a
/// flyable waypoint above the cell centre. Returns `(cell index, waypoint)`.
pub fn frontier_candidates(map: &MultiLayerMap, view: &MapView, spacing_cells: f64) -> Vec<(usize, Waypoint)> {
    let mut kept: Vec<(usize, usize)> = Vec::new();
    let min_sq = spacing_cells * spacing_cells;
    for (r, c) in map.frontier_cells() {
        let far = kept.iter().all(|&(kr, kc)| {
            let dr = r as f64 - kr as f64;
            let dc = c as f64 - kc as f64;
            dr * dr + dc * dc >= min_sq
        });
        if far {
            kept.push((r, c));
        }
    }
    let gsd = view.cam.gsd_m;
    kept.into_iter()
        .map(|(r, c)| {
            let p = Waypoint::new((c as f64 + 0.5) * gsd, (r as f64 + 0.5) * gsd, view.region.altitude_m);
            (r * map.cols + c, view.region.clip(p))
        })
        .collect()
}

/// Next-best frontier position by score per smoothed training count.
/// Ties go to the nearer candidate, then the lower cell index. Without an
/// affordable candidate the planner takes a global random step.
pub fn plan_frontier(
    map: &MultiLayerMap,
    view: &MapView,
    pose: &Waypoint,
    remaining_budget: f64,
    cfg: &PlannerConfig,
    seed: u64,
) -> PlanStep {
    let spacing = cfg.frontier_spacing_frac * view.cam.fov_w.min(view.cam.fov_h) as f64;
    let mut best: Option<(f64, f64, usize, Waypoint)> = None;
    for (cell, p) in frontier_candidates(map, view, spacing) {
        let d = p.distance(pose);
        if d <= 1e-9 || flight_time(&view.km, pose, &p) > remaining_budget {
            continue;
        }
        let fp = view.footprint(&p);
        let value = view.score_sum(&fp) / (view.train_count_sum(&fp) + view.epsilon);
        let better = match best {
            None => true,
            Some((bv, bd, bc, _)) => {
                if nearly_equal(value, bv) {
                    d < bd || (d == bd && cell < bc)
                } else {
                    value > bv
                }
            }
        };
        if better {
            best = Some((value, d, cell, p));
        }
    }
    match best {
        Some((_, _, _, p)) => PlanStep::Move(p),
        None => baselines::plan_random_global(view, pose, remaining_budget, cfg, seed),
    }
}
