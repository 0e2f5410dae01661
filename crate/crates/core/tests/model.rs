use ippal::acquire::posterior_mean;
use ippal::model::{
    predict_ensemble, predict_mc_dropout, train, train_ensemble, ModelConfig, ModelParams, ProbTensor, TrainingSample,
};
use ippal::terrain::{crop_image, generate_terrain, FeatureImage, Footprint, LabelImage, SemanticTerrain, TerrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn terrain(seed: u64) -> SemanticTerrain {
    generate_terrain(seed, &TerrainConfig::default()).unwrap()
}

fn crops(t: &SemanticTerrain, n: usize, size: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let fp = Footprint {
                row0: rng.random_range(0..=t.rows - size),
                col0: rng.random_range(0..=t.cols - size),
                rows: size,
                cols: size,
            };
            let (features, labels) = crop_image(t, &fp).unwrap();
            TrainingSample {
                features,
                labels,
                footprint: fp,
            }
        })
        .collect()
}

fn accuracy(pred: &ProbTensor, truth: &LabelImage) -> f64 {
    let hits = pred.argmax().iter().zip(&truth.data).filter(|(a, b)| a == b).count();
    hits as f64 / truth.data.len() as f64
}

fn mean_accuracy(predict: impl Fn(&FeatureImage) -> ProbTensor, data: &[TrainingSample]) -> f64 {
    data.iter().map(|s| accuracy(&predict(&s.features), &s.labels)).sum::<f64>() / data.len() as f64
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        patch_factor: 2,
        ..Default::default()
    }
}

fn random_sample(rows: usize, cols: usize, dim: usize, classes: u8, rng: &mut ChaCha8Rng) -> TrainingSample {
    TrainingSample {
        features: FeatureImage {
            rows,
            cols,
            dim,
            data: (0..rows * cols * dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        },
        labels: LabelImage {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(0..classes)).collect(),
        },
        footprint: Footprint {
            row0: 0,
            col0: 0,
            rows,
            cols,
        },
    }
}

/// Largest relative deviation between the analytic gradient and central
/// finite differences.
fn gradient_error(params: &ModelParams, data: &[TrainingSample], lambda: f64) -> f64 {
    let g = params.loss_gradient(data, lambda).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.theta.len() {
        let mut up = params.clone();
        up.theta[i] += h;
        let mut down = params.clone();
        down.theta[i] -= h;
        let fd = (up.loss(data, lambda).unwrap() - down.loss(data, lambda).unwrap()) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<TrainingSample> = (0..3).map(|_| random_sample(4, 4, 5, 3, &mut rng)).collect();
    for seed in 0..3 {
        let params = ModelParams::init(5, 3, &small_cfg(), seed);
        let err = gradient_error(&params, &data, 0.05);
        assert!(err < 1e-6, "seed {seed}: relative error {err}");
    }
}

#[test]
fn frozen_encoder_steps_never_increase_loss() {
    let t = terrain(3);
    let data = crops(&t, 6, 16, 4);
    let cfg = ModelConfig::default();
    let lambda = cfg.weight_decay(data.len());
    let mut params = ModelParams::init(t.feature_dim, t.classes, &cfg, 5);
    let encoder_before: Vec<f64> = params.theta[..params.feature_dim * params.latent_dim].to_vec();
    let mut prev = params.loss(&data, lambda).unwrap();
    for step in 0..60 {
        params.gradient_step(&data, lambda, 1e-3, true).unwrap();
        let now = params.loss(&data, lambda).unwrap();
        assert!(now <= prev + 1e-12, "step {step}: {prev} -> {now}");
        prev = now;
    }
    assert_eq!(&params.theta[..encoder_before.len()], &encoder_before[..]);
}

#[test]
fn overfits_a_single_image() {
    let t = terrain(7);
    let data = crops(&t, 1, 16, 8);
    let cfg = ModelConfig {
        dropout_prob: 0.0,
        max_epochs: 2000,
        patience: 50,
        convergence_tol: 0.0,
        batch_size: 1,
        ..Default::default()
    };
    let init = ModelParams::init(t.feature_dim, t.classes, &cfg, 0);
    let model = train(&init, &data, &cfg, 1).unwrap();
    let acc = accuracy(&model.predict(&data[0].features).unwrap(), &data[0].labels);
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn single_class_training_set_is_learned() {
    let t = terrain(2);
    let mut data = crops(&t, 4, 16, 2);
    for s in &mut data {
        s.labels.data.iter_mut().for_each(|y| *y = 2);
    }
    let cfg = ModelConfig::default();
    let init = ModelParams::init(t.feature_dim, t.classes, &cfg, 3);
    let model = train(&init, &data, &cfg, 4).unwrap();
    let acc = mean_accuracy(|z| model.predict(z).unwrap(), &data);
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn training_is_deterministic_and_not_worse_than_checkpoint() {
    let t = terrain(11);
    let data = crops(&t, 10, 16, 12);
    let cfg = ModelConfig::default();
    let init = ModelParams::init(t.feature_dim, t.classes, &cfg, 13);
    let a = train(&init, &data, &cfg, 14).unwrap();
    let b = train(&init, &data, &cfg, 14).unwrap();
    assert_eq!(a, b);
    let lambda = cfg.weight_decay(data.len());
    assert!(a.loss(&data, lambda).unwrap() <= init.loss(&data, lambda).unwrap());
    let c = train(&init, &data, &cfg, 15).unwrap();
    assert_ne!(a, c);
}

#[test]
fn mc_dropout_samples_vary_only_with_dropout() {
    let t = terrain(4);
    let data = crops(&t, 1, 16, 5);
    let cfg = ModelConfig::default();
    let params = ModelParams::init(t.feature_dim, t.classes, &cfg, 6);
    let z = &data[0].features;

    let mc = predict_mc_dropout(&params, z, 8, 0.5, 1).unwrap();
    assert!(!mc.degenerate);
    for i in 1..mc.samples.len() {
        assert_ne!(mc.samples[0].data, mc.samples[i].data);
    }
    assert_eq!(mc.samples[3].data, predict_mc_dropout(&params, z, 8, 0.5, 1).unwrap().samples[3].data);

    let flat = predict_mc_dropout(&params, z, 5, 0.0, 1).unwrap();
    assert!(flat.degenerate);
    let det = params.predict(z).unwrap();
    assert!(flat.samples.iter().all(|s| s.data == det.data));
}

#[test]
fn ensemble_members_are_distinct() {
    let t = terrain(9);
    let data = crops(&t, 8, 16, 10);
    let cfg = ModelConfig::default();
    let inits: Vec<ModelParams> = (0..4).map(|i| ModelParams::init(t.feature_dim, t.classes, &cfg, 100 + i)).collect();
    let members = train_ensemble(&inits, &data, &cfg, 3).unwrap();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            assert_ne!(members[i].theta, members[j].theta, "members {i} and {j}");
        }
    }
    let preds = predict_ensemble(&members, &data[0].features).unwrap();
    assert_ne!(preds[0].data, preds[1].data);
}

#[test]
fn ensemble_mean_beats_weakest_member() {
    let cfg = ModelConfig::default();
    let mut wins = 0;
    for seed in 0..5 {
        let t = terrain(50 + seed);
        let train_set = crops(&t, 20, 16, 60 + seed);
        let test_set = crops(&t, 20, 16, 70 + seed);
        let inits: Vec<ModelParams> = (0..4)
            .map(|i| ModelParams::init(t.feature_dim, t.classes, &cfg, 80 + 10 * seed + i))
            .collect();
        let members = train_ensemble(&inits, &train_set, &cfg, seed).unwrap();
        let worst = members
            .iter()
            .map(|m| mean_accuracy(|z| m.predict(z).unwrap(), &test_set))
            .fold(f64::INFINITY, f64::min);
        let ensemble = mean_accuracy(
            |z| {
                posterior_mean(predict_ensemble(&members, z).unwrap())
                    .unwrap()
                    .mean
            },
            &test_set,
        );
        if ensemble >= worst {
            wins += 1;
        }
    }
    assert!(wins >= 4, "ensemble at least as good as its weakest member in {wins}/5 seeds");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_distributions(seed in 0u64..10_000, p in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(4, 6, 5, 4, &mut rng);
        let params = ModelParams::init(5, 4, &small_cfg(), seed);
        let mc = predict_mc_dropout(&params, &s.features, 3, p, seed).unwrap();
        for pred in mc.samples.iter().chain(std::iter::once(&params.predict(&s.features).unwrap())) {
            for i in 0..pred.pixels() {
                let px = pred.pixel(i);
                prop_assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_check_on_random_models(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<TrainingSample> = (0..2).map(|_| random_sample(4, 4, 3, 3, &mut rng)).collect();
        let params = ModelParams::init(3, 3, &small_cfg(), seed);
        prop_assert!(gradient_error(&params, &data, 0.1) < 1e-5);
    }
}
