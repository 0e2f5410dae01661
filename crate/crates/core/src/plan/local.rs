use std::cmp::Ordering;

use super::{nearly_equal, MapView, PlanStep, PlannerConfig, Waypoint};
use crate::acquire::ScoreImage;
use crate::terrain::Footprint;

/// Image edges in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    North,
    East,
    South,
    West,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::North, Edge::East, Edge::South, Edge::West];

    /// Unit ground direction; north is towards row 0.
    pub fn direction(&self) -> (f64, f64) {
        match self {
            Edge::North => (0.0, -1.0),
            Edge::East => (1.0, 0.0),
            Edge::South => (0.0, 1.0),
            Edge::West => (-1.0, 0.0),
        }
    }

    /// Band of `width` rows/cols along this edge, in image coordinates.
    fn band(&self, rows: usize, cols: usize, width: usize) -> Footprint {
        match self {
            Edge::North => Footprint { row0: 0, col0: 0, rows: width, cols },
            Edge::South => Footprint { row0: rows - width, col0: 0, rows: width, cols },
            Edge::West => Footprint { row0: 0, col0: 0, rows, cols: width },
            Edge::East => Footprint { row0: 0, col0: cols - width, rows, cols: width },
        }
    }
}

/// Steps towards the image edge band with the highest acquisition score
/// per (smoothed) training count. Falls through to the next-best edge when
/// the chosen step is fully clipped away at the region boundary.
pub fn plan_local(view: &MapView, score: &ScoreImage, pose: &Waypoint, cfg: &PlannerConfig) -> PlanStep {
    let fp = view.footprint(pose);
    let (rows, cols) = (fp.rows, fp.cols);
    debug_assert_eq!((score.rows, score.cols), (rows, cols));
    let width = (rows.min(cols) / 4).max(1);
    let mut ranked: Vec<(Edge, f64)> = Edge::ALL
        .iter()
        .map(|&e| {
            let band = e.band(rows, cols, width);
            let mut s = 0.0;
            for r in band.row0..band.row0 + band.rows {
                for c in band.col0..band.col0 + band.cols {
                    s += score.data[r * cols + c];
                }
            }
            let on_map = Footprint {
                row0: fp.row0 + band.row0,
                col0: fp.col0 + band.col0,
                ..band
            };
            (e, s / (view.train_count_sum(&on_map) + view.epsilon))
        })
        .collect();
    // stable sort keeps N, E, S, W order among ties
    ranked.sort_by(|a, b| {
        if nearly_equal(a.1, b.1) {
            Ordering::Equal
        } else {
            b.1.total_cmp(&a.1)
        }
    });
    let step = cfg.local_step_frac * view.cam.fov_ground_m();
    for (edge, _) in ranked {
        let (dx, dy) = edge.direction();
        let target = view
            .region
            .clip(Waypoint::new(pose.x + step * dx, pose.y + step * dy, pose.z));
        if target.distance(pose) > 1e-9 {
            return PlanStep::Move(target);
        }
    }
    PlanStep::Hold
}
