//! Multi-mission active-learning campaigns.
//!
//! A mission flies the agent from its start pose until the planner runs out
//! of affordable moves. Every measurement position yields a training image
//! labelled by the ground-truth oracle; the image is also mapped. Between
//! missions the model is retrained from the fixed initial checkpoint on all
//! images collected so far, the latent database is rebuilt, and the map
//! priors are recomputed with the retrained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::{self, LatentDatabase, ScoreImage, ScoreKind};
use crate::map::{recompute_priors, HistoryEntry, MapConfig, MultiLayerMap, Observation};
use crate::metrics::{Evaluation, Summary};
use crate::model::{self, ModelConfig, ModelParams, ProbTensor, TrainingSample};
use crate::plan::{
    self, flight_time, KinematicModel, MapView, Path, PlanStep, PlannerConfig, PlannerKind, ScoreLayer,
    Waypoint,
};
use crate::terrain::{
    crop_image, footprint_at, generate_terrain, generate_terrain_like, CameraModel, FeatureImage, FlyableRegion, Footprint,
    SemanticTerrain, TerrainConfig,
};
use crate::{par, Error, Result};

/// Acquisition objective driving the planners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mutual information under MC dropout.
    BayesMcDropout,
    /// Mutual information across an ensemble.
    BayesEnsemble,
    /// Predictive entropy of a single deterministic model.
    Entropy,
    /// kNN latent novelty.
    Novelty,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::BayesMcDropout,
        Objective::BayesEnsemble,
        Objective::Entropy,
        Objective::Novelty,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::BayesMcDropout => "bayes_mc_dropout",
            Objective::BayesEnsemble => "bayes_ensemble",
            Objective::Entropy => "entropy",
            Objective::Novelty => "novelty",
        }
    }

    pub fn score_layer(&self) -> ScoreLayer {
        match self {
            Objective::Novelty => ScoreLayer::Novelty,
            _ => ScoreLayer::Uncertainty,
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the held-out evaluation crops come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestRegime {
    /// A second terrain from the same generator configuration and class
    /// appearance (prototypes), with its own layout and feature noise.
    HeldOutTerrain,
    /// Random footprints of the mission terrain itself.
    SameTerrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub terrain: TerrainConfig,
    pub camera: CameraModel,
    pub model: ModelConfig,
    pub map: MapConfig,
    pub planner: PlannerConfig,
    pub kinematics: KinematicModel,
    pub objective: Objective,
    pub missions: usize,
    /// Flight-time budget per mission, in seconds.
    pub budget_s: f64,
    pub informed_priors: bool,
    pub stream_mapping: bool,
    pub test_regime: TestRegime,
    pub test_footprints: usize,
    pub knn_k: usize,
    /// Start position `[x, y]` in metres; the flyable region's top-left
    /// corner when absent.
    pub start: Option<[f64; 2]>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            terrain: TerrainConfig::default(),
            camera: CameraModel::default(),
            model: ModelConfig::default(),
            map: MapConfig::default(),
            planner: PlannerConfig::default(),
            kinematics: KinematicModel::default(),
            objective: Objective::BayesEnsemble,
            missions: 10,
            budget_s: 120.0,
            informed_priors: true,
            stream_mapping: false,
            test_regime: TestRegime::HeldOutTerrain,
            test_footprints: 500,
            knn_k: 10,
            start: None,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        self.model.validate()?;
        self.planner.validate()?;
        self.kinematics.validate()?;
        if !(self.map.log_odds_clamp > 0.0) {
            return Err(Error::Config("map.log_odds_clamp must be positive".into()));
        }
        let (cols, rows) = self.terrain.dims()?;
        let cam = &self.camera;
        if cam.fov_w == 0 || cam.fov_h == 0 || cam.fov_w > cols || cam.fov_h > rows {
            return Err(Error::Config(format!(
                "camera fov_w x fov_h {}x{} does not fit the {cols}x{rows} terrain",
                cam.fov_w, cam.fov_h
            )));
        }
        if (cam.gsd_m - self.terrain.cell_size_m).abs() > 1e-12 {
            return Err(Error::Config("camera.gsd_m must equal terrain.cell_size_m".into()));
        }
        let s = self.model.patch_factor;
        if cam.fov_w % s != 0 || cam.fov_h % s != 0 {
            return Err(Error::Config(format!(
                "model.patch_factor {s} must divide the camera fov {}x{}",
                cam.fov_w, cam.fov_h
            )));
        }
        if self.missions == 0 {
            return Err(Error::Config("missions must be at least 1".into()));
        }
        if !(self.budget_s >= 0.0) || !self.budget_s.is_finite() {
            return Err(Error::Config("budget_s must be finite and non-negative".into()));
        }
        if self.test_footprints == 0 {
            return Err(Error::Config("test_footprints must be at least 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.objective == Objective::BayesMcDropout && self.model.dropout_prob == 0.0 {
            return Err(Error::Config("bayes_mc_dropout needs model.dropout_prob > 0".into()));
        }
        if let Some([x, y]) = self.start {
            let half_w = cam.fov_w as f64 * cam.gsd_m / 2.0;
            let half_h = cam.fov_h as f64 * cam.gsd_m / 2.0;
            let inside = x >= half_w
                && x <= cols as f64 * cam.gsd_m - half_w
                && y >= half_h
                && y <= rows as f64 * cam.gsd_m - half_h;
            if !inside {
                return Err(Error::Config(format!("start [{x}, {y}] is outside the flyable region")));
            }
        }
        Ok(())
    }
}

/// Derives an independent stream seed from a base seed and two tags.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TERRAIN: u64 = 1;
const TAG_TEST_TERRAIN: u64 = 2;
const TAG_TEST_CROPS: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_TRAIN: u64 = 5;
const TAG_PLAN: u64 = 6;
const TAG_MC: u64 = 7;
const TAG_EVAL: u64 = 8;

/// Model used during a campaign.
#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Single(ModelParams),
    Ensemble(Vec<ModelParams>),
}

impl Learner {
    /// Model whose encoder supplies latents for novelty.
    pub fn primary(&self) -> &ModelParams {
        match self {
            Learner::Single(p) => p,
            Learner::Ensemble(m) => &m[0],
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub mission: usize,
    pub images_labeled: usize,
    pub miou: f64,
    pub acc: f64,
    pub f1: f64,
    pub ece: f64,
    pub class_iou: Vec<f64>,
    /// Flight time spent in the mission (simulated seconds).
    pub wallclock_s: f64,
}

impl MetricRow {
    pub fn header(classes: usize) -> Vec<String> {
        let mut h: Vec<String> = ["mission", "images_labeled", "miou", "acc", "f1", "ece"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..classes).map(|k| format!("class_iou_{k}")));
        h.push("wallclock_s".into());
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.mission.to_string(),
            self.images_labeled.to_string(),
            self.miou.to_string(),
            self.acc.to_string(),
            self.f1.to_string(),
            self.ece.to_string(),
        ];
        r.extend(self.class_iou.iter().map(|v| v.to_string()));
        r.push(self.wallclock_s.to_string());
        r
    }
}

/// One executed measurement position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub cost_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct MissionState {
    pub mission: usize,
    pub remaining_budget: f64,
    pub pose: Waypoint,
    pub training_set: Vec<TrainingSample>,
    pub learner: Learner,
    pub db: LatentDatabase,
    pub map: MultiLayerMap,
    /// Every mapped image in order, for prior recomputation.
    pub history: Vec<HistoryEntry>,
    pub metrics: Vec<MetricRow>,
    /// Executed positions of the current mission.
    pub trace: Vec<TraceRow>,
    last_score: Option<ScoreImage>,
    images_this_mission: usize,
}

/// Everything needed to run the missions of one campaign.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub cfg: CampaignConfig,
    pub seed: u64,
    pub terrain: SemanticTerrain,
    pub region: FlyableRegion,
    pub test_set: Vec<TrainingSample>,
    pub checkpoint: Learner,
}

/// Rows, traces and final map of a finished campaign.
#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub rows: Vec<MetricRow>,
    pub traces: Vec<Vec<TraceRow>>,
    pub map: MultiLayerMap,
}

fn sample_footprints(terrain: &SemanticTerrain, cam: &CameraModel, n: usize, seed: u64) -> Vec<Footprint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Footprint {
            row0: rng.random_range(0..=terrain.rows - cam.fov_h),
            col0: rng.random_range(0..=terrain.cols - cam.fov_w),
            rows: cam.fov_h,
            cols: cam.fov_w,
        })
        .collect()
}

fn sample_at(terrain: &SemanticTerrain, fp: Footprint) -> Result<TrainingSample> {
    let (features, labels) = crop_image(terrain, &fp)?;
    Ok(TrainingSample {
        features,
        labels,
        footprint: fp,
    })
}

impl Campaign {
    pub fn new(cfg: CampaignConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let terrain = generate_terrain(derive_seed(seed, TAG_TERRAIN, 0), &cfg.terrain)?;
        cfg.camera.validate_for(&terrain)?;
        let region = FlyableRegion::new(&terrain, &cfg.camera);
        let test_terrain = match cfg.test_regime {
            TestRegime::HeldOutTerrain => {
                generate_terrain_like(&terrain, derive_seed(seed, TAG_TEST_TERRAIN, 0), &cfg.terrain)?
            }
            TestRegime::SameTerrain => terrain.clone(),
        };
        let test_set = sample_footprints(
            &test_terrain,
            &cfg.camera,
            cfg.test_footprints,
            derive_seed(seed, TAG_TEST_CROPS, 0),
        )
        .into_iter()
        .map(|fp| sample_at(&test_terrain, fp))
        .collect::<Result<Vec<_>>>()?;
        let (d, k) = (terrain.feature_dim, terrain.classes);
        let checkpoint = match cfg.objective {
            Objective::BayesEnsemble => Learner::Ensemble(
                (0..cfg.model.ensemble_size)
                    .map(|i| ModelParams::init(d, k, &cfg.model, derive_seed(seed, TAG_INIT, i as u64)))
                    .collect(),
            ),
            _ => Learner::Single(ModelParams::init(d, k, &cfg.model, derive_seed(seed, TAG_INIT, 0))),
        };
        Ok(Campaign {
            cfg,
            seed,
            terrain,
            region,
            test_set,
            checkpoint,
        })
    }

    pub fn start_pose(&self) -> Waypoint {
        match self.cfg.start {
            Some([x, y]) => Waypoint::new(x, y, self.region.altitude_m),
            None => self.region.top_left(),
        }
    }

    pub fn initial_state(&self) -> MissionState {
        let map = MultiLayerMap::new(self.terrain.rows, self.terrain.cols, self.terrain.classes, &self.cfg.map);
        MissionState {
            mission: 0,
            remaining_budget: self.cfg.budget_s,
            pose: self.start_pose(),
            training_set: Vec::new(),
            learner: self.checkpoint.clone(),
            db: LatentDatabase::new(self.cfg.model.latent_dim, self.cfg.knn_k),
            map,
            history: Vec::new(),
            metrics: Vec::new(),
            trace: Vec::new(),
            last_score: None,
            images_this_mission: 0,
        }
    }

    /// Semantic prediction, uncertainty and novelty of one image.
    pub fn observe(
        &self,
        learner: &Learner,
        db: &LatentDatabase,
        footprint: Footprint,
        z: &FeatureImage,
        is_training_sample: bool,
        seed: u64,
    ) -> Result<Observation> {
        let (probs, uncertainty) = match (self.cfg.objective, learner) {
            (Objective::BayesEnsemble, Learner::Ensemble(members)) => {
                let post = acquire::posterior_mean(model::predict_ensemble(members, z)?)?;
                let u = acquire::mutual_information(&post);
                (post.mean, u)
            }
            (Objective::BayesMcDropout, Learner::Single(p)) => {
                let mc = model::predict_mc_dropout(p, z, self.cfg.model.mc_samples, self.cfg.model.dropout_prob, seed)?;
                let post = acquire::posterior_mean(mc.samples)?;
                let u = acquire::mutual_information(&post);
                (post.mean, u)
            }
            (_, learner) => {
                let probs = learner.primary().predict(z)?;
                let u = acquire::entropy(&probs);
                (probs, u)
            }
        };
        let latents = learner.primary().encode(z)?;
        let novelty = acquire::novelty(db, &latents, self.cfg.model.patch_factor)?;
        Ok(Observation {
            footprint,
            probs,
            uncertainty: uncertainty.data,
            novelty: novelty.data,
            is_training_sample,
        })
    }

    fn score_image(&self, obs: &Observation) -> ScoreImage {
        let (kind, data) = match self.cfg.objective {
            Objective::Novelty => (ScoreKind::Novelty, obs.novelty.clone()),
            Objective::Entropy => (ScoreKind::Entropy, obs.uncertainty.clone()),
            _ => (ScoreKind::MutualInformation, obs.uncertainty.clone()),
        };
        ScoreImage {
            kind,
            rows: obs.footprint.rows,
            cols: obs.footprint.cols,
            data,
            prior_fill: false,
        }
    }

    fn mc_seed(&self, mission: usize, image: usize) -> u64 {
        derive_seed(self.seed, TAG_MC, ((mission as u64) << 32) | image as u64)
    }

    /// Maps the image at `pose`; training images also join the training
    /// set (labels from the ground-truth oracle) and the latent database.
    fn measure(&self, state: &mut MissionState, pose: &Waypoint, is_training_sample: bool) -> Result<()> {
        let fp = footprint_at(&self.terrain, &self.cfg.camera, pose)?;
        let sample = sample_at(&self.terrain, fp)?;
        let seed = self.mc_seed(state.mission, state.history.len());
        let obs = self.observe(&state.learner, &state.db, fp, &sample.features, is_training_sample, seed)?;
        state.map.fuse(&obs)?;
        state.history.push(HistoryEntry {
            footprint: fp,
            features: sample.features.clone(),
            is_training_sample,
        });
        if is_training_sample {
            state.last_score = Some(self.score_image(&obs));
            let latents = state.learner.primary().encode(&sample.features)?;
            acquire::db_insert_image(&mut state.db, &latents)?;
            state.training_set.push(sample);
            state.images_this_mission += 1;
        }
        Ok(())
    }

    /// Stream images every half footprint along the open segment `from -> to`.
    fn stream(&self, state: &mut MissionState, from: &Waypoint, to: &Waypoint) -> Result<()> {
        let d = from.distance(to);
        let step = self.cfg.camera.fov_ground_m() / 2.0;
        let mut s = step;
        while s < d - 1e-9 {
            let f = s / d;
            let p = Waypoint::new(from.x + f * (to.x - from.x), from.y + f * (to.y - from.y), from.z);
            self.measure(state, &p, false)?;
            s += step;
        }
        Ok(())
    }

    fn view(&self, map: &MultiLayerMap) -> MapView {
        MapView::new(
            map,
            self.cfg.objective.score_layer(),
            &self.cfg.camera,
            self.region,
            &self.cfg.kinematics,
            self.cfg.planner.min_hop_frac * self.cfg.camera.fov_ground_m(),
        )
    }

    fn next_step(&self, state: &MissionState, coverage: &mut std::vec::IntoIter<Waypoint>, step: usize) -> PlanStep {
        let cfg = &self.cfg.planner;
        let seed = derive_seed(self.seed, TAG_PLAN, ((state.mission as u64) << 32) | step as u64);
        let pose = &state.pose;
        let budget = state.remaining_budget;
        match cfg.kind {
            PlannerKind::Coverage => coverage.next().map_or(PlanStep::Hold, PlanStep::Move),
            PlannerKind::Local => match &state.last_score {
                Some(score) => plan::plan_local(&self.view(&state.map), score, pose, cfg),
                None => PlanStep::Hold,
            },
            PlannerKind::RandomLocal => plan::plan_random_local(&self.view(&state.map), pose, cfg, seed),
            PlannerKind::RandomGlobal => plan::plan_random_global(&self.view(&state.map), pose, budget, cfg, seed),
            PlannerKind::Frontier => plan::plan_frontier(&state.map, &self.view(&state.map), pose, budget, cfg, seed),
            PlannerKind::Optimisation => {
                let view = self.view(&state.map);
                match plan::plan_greedy_lattice(&view, pose, budget, cfg) {
                    Some(init) => {
                        let refined = plan::refine_path(&view, pose, &init, budget, cfg, seed);
                        PlanStep::Move(refined[0])
                    }
                    None => PlanStep::Hold,
                }
            }
            PlannerKind::Sampling => plan::plan_mcts(&self.view(&state.map), pose, budget, cfg, seed),
        }
    }

    fn push_trace(&self, state: &mut MissionState) {
        let t = state.trace.len();
        state.trace.push(TraceRow {
            t,
            x: state.pose.x,
            y: state.pose.y,
            z: state.pose.z,
            cost_so_far: self.cfg.budget_s - state.remaining_budget,
        });
    }

    /// Flies one mission from the start pose with a full budget.
    ///
    /// Planners that account for the budget must never propose an
    /// unaffordable step; doing so fails with [`Error::BudgetViolated`].
    /// For the others an unaffordable proposal ends the mission. Two
    /// consecutive holds also end it.
    pub fn run_mission(&self, state: &mut MissionState) -> Result<()> {
        let budget = self.cfg.budget_s;
        state.remaining_budget = budget;
        state.pose = self.start_pose();
        state.trace.clear();
        state.last_score = None;
        state.images_this_mission = 0;
        if budget <= 0.0 {
            return Ok(());
        }
        let pose = state.pose;
        self.measure(state, &pose, true)?;
        self.push_trace(state);

        let mut coverage = match self.cfg.planner.kind {
            PlannerKind::Coverage => plan::plan_coverage(
                &self.region,
                self.cfg.camera.fov_ground_m(),
                &self.cfg.kinematics,
                &state.pose,
                budget,
                state.mission,
                &self.cfg.planner,
            ),
            _ => Path::new(),
        }
        .into_iter();
        let budget_aware = !matches!(self.cfg.planner.kind, PlannerKind::Local | PlannerKind::RandomLocal);
        let mut holds = 0;
        let mut step = 0;
        loop {
            let decision = self.next_step(state, &mut coverage, step);
            step += 1;
            let target = match decision.waypoint() {
                Some(q) if q.distance(&state.pose) > 1e-9 => q,
                _ => {
                    holds += 1;
                    if holds >= 2 {
                        break;
                    }
                    continue;
                }
            };
            holds = 0;
            let cost = flight_time(&self.cfg.kinematics, &state.pose, &target);
            if cost > state.remaining_budget {
                if budget_aware {
                    return Err(Error::BudgetViolated {
                        spent: budget - state.remaining_budget + cost,
                        budget,
                    });
                }
                break;
            }
            if self.cfg.stream_mapping {
                let from = state.pose;
                self.stream(state, &from, &target)?;
            }
            state.remaining_budget -= cost;
            state.pose = target;
            if budget - state.remaining_budget > budget * (1.0 + 1e-12) {
                return Err(Error::BudgetViolated {
                    spent: budget - state.remaining_budget,
                    budget,
                });
            }
            self.measure(state, &target, true)?;
            self.push_trace(state);
        }
        Ok(())
    }

    /// Retrains from the checkpoint, rebuilds the database and map priors,
    /// evaluates, and appends a metric row.
    pub fn end_mission(&self, state: &mut MissionState) -> Result<MetricRow> {
        let seed = derive_seed(self.seed, TAG_TRAIN, state.mission as u64);
        if !state.training_set.is_empty() {
            state.learner = match &self.checkpoint {
                Learner::Single(p) => Learner::Single(model::train(p, &state.training_set, &self.cfg.model, seed)?),
                Learner::Ensemble(m) => {
                    Learner::Ensemble(model::train_ensemble(m, &state.training_set, &self.cfg.model, seed)?)
                }
            };
        }
        state.db = acquire::rebuild_db(state.learner.primary(), &state.training_set, self.cfg.knn_k)?;
        state.map = if self.cfg.informed_priors {
            let mission = state.mission + 1;
            let learner = &state.learner;
            let db = &state.db;
            let replay: Vec<(usize, &HistoryEntry)> = state.history.iter().enumerate().collect();
            let observed = par::map(&replay, |(i, e)| {
                self.observe(learner, db, e.footprint, &e.features, e.is_training_sample, self.mc_seed(mission, *i))
            });
            let mut it = observed.into_iter();
            recompute_priors(&state.map, &state.history, |_| it.next().expect("one observation per entry"))?
        } else {
            state.map.pristine()
        };
        let summary = self.evaluate(&state.learner, state.mission)?;
        let row = MetricRow {
            mission: state.mission,
            images_labeled: state.training_set.len(),
            miou: summary.miou,
            acc: summary.accuracy,
            f1: summary.f1,
            ece: summary.ece,
            class_iou: summary.class_iou,
            wallclock_s: self.cfg.budget_s - state.remaining_budget.max(0.0).min(self.cfg.budget_s),
        };
        state.metrics.push(row.clone());
        state.mission += 1;
        Ok(row)
    }

    /// Segmentation and calibration metrics on the held-out crops. Bayesian
    /// objectives are scored on their posterior mean.
    pub fn evaluate(&self, learner: &Learner, mission: usize) -> Result<Summary> {
        evaluate(
            learner,
            self.cfg.objective,
            &self.cfg.model,
            &self.test_set,
            self.terrain.classes,
            derive_seed(self.seed, TAG_EVAL, mission as u64),
        )
    }
}

/// Scores `learner` on `test_set`, in parallel over crops and reduced in
/// crop order.
pub fn evaluate(
    learner: &Learner,
    objective: Objective,
    cfg: &ModelConfig,
    test_set: &[TrainingSample],
    classes: usize,
    seed: u64,
) -> Result<Summary> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let indexed: Vec<(usize, &TrainingSample)> = test_set.iter().enumerate().collect();
    let parts = par::map(&indexed, |(i, s)| -> Result<Evaluation> {
        let probs: ProbTensor = match (objective, learner) {
            (_, Learner::Ensemble(m)) => acquire::posterior_mean(model::predict_ensemble(m, &s.features)?)?.mean,
            (Objective::BayesMcDropout, Learner::Single(p)) => {
                let mc = model::predict_mc_dropout(
                    p,
                    &s.features,
                    cfg.mc_samples,
                    cfg.dropout_prob,
                    derive_seed(seed, *i as u64, 0),
                )?;
                acquire::posterior_mean(mc.samples)?.mean
            }
            (_, Learner::Single(p)) => p.predict(&s.features)?,
        };
        let mut e = Evaluation::new(classes);
        e.add_image(&probs, &s.labels.data)?;
        Ok(e)
    });
    let mut total = Evaluation::new(classes);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total.summary())
}

/// Runs all missions of a campaign.
pub fn run_campaign(cfg: &CampaignConfig, seed: u64) -> Result<CampaignResult> {
    let campaign = Campaign::new(cfg.clone(), seed)?;
    let mut state = campaign.initial_state();
    let mut traces = Vec::with_capacity(cfg.missions);
    for _ in 0..cfg.missions {
        campaign.run_mission(&mut state)?;
        traces.push(state.trace.clone());
        campaign.end_mission(&mut state)?;
    }
    Ok(CampaignResult {
        rows: state.metrics,
        traces,
        map: state.map,
    })
}
