use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flight_time, nearly_equal, MapView, PlanStep, PlannerConfig, Waypoint};
use crate::terrain::Footprint;

/// Straight move of `step_m` metres along `heading` (radians, measured from
/// the +x axis towards +y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub heading: f64,
    pub step_m: f64,
}

impl Action {
    pub fn apply(&self, p: &Waypoint) -> Waypoint {
        Waypoint::new(
            p.x + self.step_m * self.heading.cos(),
            p.y + self.step_m * self.heading.sin(),
            p.z,
        )
    }
}

/// Headings-major action list: `cfg.mcts_headings` equally spaced headings,
/// each combined with every step length in `cfg.mcts_step_fracs`.
pub fn action_set(cfg: &PlannerConfig, fov_ground_m: f64) -> Vec<Action> {
    let n = cfg.mcts_headings;
    (0..n)
        .flat_map(|h| {
            let heading = std::f64::consts::TAU * h as f64 / n as f64;
            cfg.mcts_step_fracs.iter().map(move |&f| Action {
                heading,
                step_m: f * fov_ground_m,
            })
        })
        .collect()
}

struct Node {
    pos: Waypoint,
    /// Footprints measured along the path from the root, root excluded.
    planned: Vec<Footprint>,
    budget: f64,
    depth: usize,
    untried: Vec<usize>,
    children: Vec<(usize, usize)>,
    visits: u64,
    total: f64,
}

struct Tree<'a> {
    view: &'a MapView,
    actions: &'a [Action],
    horizon: usize,
    nodes: Vec<Node>,
}

impl Tree<'_> {
    /// Feasible successors: inside the flyable region and affordable.
    fn feasible(&self, pos: &Waypoint, budget: f64, depth: usize) -> Vec<usize> {
        if depth >= self.horizon {
            return Vec::new();
        }
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, a)| {
                let q = a.apply(pos);
                self.view.region.contains(&q) && flight_time(&self.view.km, pos, &q) <= budget
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn transition(&self, pos: &Waypoint, planned: &[Footprint], action: usize) -> (Waypoint, f64, f64) {
        let q = self.actions[action].apply(pos);
        let reward = self.view.step_reward(pos, &q, planned);
        (q, reward, flight_time(&self.view.km, pos, &q))
    }

    fn expand(&mut self, parent: usize, action: usize) -> (usize, f64) {
        let p = &self.nodes[parent];
        let (q, reward, cost) = self.transition(&p.pos, &p.planned, action);
        let mut planned = p.planned.clone();
        planned.push(self.view.footprint(&q));
        let budget = p.budget - cost;
        let depth = p.depth + 1;
        let untried = self.feasible(&q, budget, depth);
        self.nodes.push(Node {
            pos: q,
            planned,
            budget,
            depth,
            untried,
            children: Vec::new(),
            visits: 0,
            total: 0.0,
        });
        let child = self.nodes.len() - 1;
        self.nodes[parent].children.push((action, child));
        (child, reward)
    }

    fn edge_reward(&self, parent: usize, child: usize) -> f64 {
        let p = &self.nodes[parent];
        self.view.step_reward(&p.pos, &self.nodes[child].pos, &p.planned)
    }

    fn ucb_child(&self, node: usize, c: f64, scale: f64) -> usize {
        let n = &self.nodes[node];
        let log_n = (n.visits.max(1) as f64).ln();
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &(_, child) in &n.children {
            let ch = &self.nodes[child];
            let mean = ch.total / ch.visits as f64 / scale;
            let u = mean + c * (log_n / ch.visits as f64).sqrt();
            if u > best.0 {
                best = (u, child);
            }
        }
        best.1
    }

    fn rollout(&self, node: usize, rng: &mut ChaCha8Rng) -> f64 {
        let n = &self.nodes[node];
        let mut pos = n.pos;
        let mut planned = n.planned.clone();
        let mut budget = n.budget;
        let mut depth = n.depth;
        let mut total = 0.0;
        loop {
            let options = self.feasible(&pos, budget, depth);
            if options.is_empty() {
                return total;
            }
            let a = options[rng.random_range(0..options.len())];
            let (q, reward, cost) = self.transition(&pos, &planned, a);
            total += reward;
            planned.push(self.view.footprint(&q));
            budget -= cost;
            depth += 1;
            pos = q;
        }
    }
}

/// Monte-Carlo tree search over the discrete action set. Each simulation
/// selects by UCB1 on returns normalised by the largest return seen so far,
/// expands the next untried action in index order, rolls out uniformly at
/// random to the horizon, and backs up the summed path reward. Returns the
/// root child with the highest mean return; ties go to the lower action
/// index. Holds when no root action is feasible.
pub fn plan_mcts(
    view: &MapView,
    pose: &Waypoint,
    remaining_budget: f64,
    cfg: &PlannerConfig,
    seed: u64,
) -> PlanStep {
    let actions = action_set(cfg, view.cam.fov_ground_m());
    let mut tree = Tree {
        view,
        actions: &actions,
        horizon: cfg.horizon,
        nodes: Vec::new(),
    };
    let untried = tree.feasible(pose, remaining_budget, 0);
    if untried.is_empty() {
        return PlanStep::Hold;
    }
    if untried.len() == 1 {
        return PlanStep::Move(actions[untried[0]].apply(pose));
    }
    tree.nodes.push(Node {
        pos: *pose,
        planned: Vec::new(),
        budget: remaining_budget,
        depth: 0,
        untried,
        children: Vec::new(),
        visits: 0,
        total: 0.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = 0.0f64;
    let mut trail = Vec::with_capacity(cfg.horizon + 1);
    for _ in 0..cfg.mcts_simulations {
        trail.clear();
        let mut node = 0;
        let mut ret = 0.0;
        trail.push(node);
        loop {
            if !tree.nodes[node].untried.is_empty() {
                let action = tree.nodes[node].untried.remove(0);
                let (child, reward) = tree.expand(node, action);
                ret += reward;
                trail.push(child);
                ret += tree.rollout(child, &mut rng);
                break;
            }
            if tree.nodes[node].children.is_empty() {
                break;
            }
            let child = tree.ucb_child(node, cfg.ucb_c, if scale > 0.0 { scale } else { 1.0 });
            ret += tree.edge_reward(node, child);
            trail.push(child);
            node = child;
        }
        scale = scale.max(ret);
        for &n in &trail {
            tree.nodes[n].visits += 1;
            tree.nodes[n].total += ret;
        }
    }
    let root = &tree.nodes[0];
    let mut best: Option<(f64, usize, usize)> = None;
    for &(action, child) in &root.children {
        let ch = &tree.nodes[child];
        let mean = ch.total / ch.visits as f64;
        let better = match best {
            None => true,
            Some((bm, ba, _)) => {
                if nearly_equal(mean, bm) {
                    action < ba
                } else {
                    mean > bm
                }
            }
        };
        if better {
            best = Some((mean, action, child));
        }
    }
    match best {
        Some((_, _, child)) => PlanStep::Move(tree.nodes[child].pos),
        None => PlanStep::Hold,
    }
}
