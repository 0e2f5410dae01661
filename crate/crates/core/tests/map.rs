use approx::assert_abs_diff_eq;
use ippal::map::{recompute_priors, HistoryEntry, MapConfig, MultiLayerMap, Observation};
use ippal::model::ProbTensor;
use ippal::terrain::{FeatureImage, Footprint};
use proptest::prelude::*;

const K: usize = 4;

fn observation(fp: Footprint, p: &[f64], u: f64, r: f64, train: bool) -> Observation {
    let n = fp.area();
    Observation {
        footprint: fp,
        probs: ProbTensor {
            classes: K,
            rows: fp.rows,
            cols: fp.cols,
            data: p.repeat(n),
        },
        uncertainty: vec![u; n],
        novelty: vec![r; n],
        is_training_sample: train,
    }
}

fn footprint() -> impl Strategy<Value = Footprint> {
    (0usize..10, 0usize..10, 1usize..7, 1usize..7).prop_map(|(row0, col0, rows, cols)| Footprint {
        row0,
        col0,
        rows,
        cols,
    })
}

fn moderate() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, K).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| (x / s).clamp(0.1, 0.9)).collect()
    })
}

fn obs_strategy() -> impl Strategy<Value = Observation> {
    (footprint(), moderate(), 0.0f64..2.0, 0.0f64..1.0, any::<bool>())
        .prop_map(|(fp, p, u, r, t)| observation(fp, &p, u, r, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fusion_order_does_not_matter(obs in prop::collection::vec(obs_strategy(), 1..4), rot in 0usize..3) {
        let mut a = MultiLayerMap::new(16, 16, K, &MapConfig::default());
        let mut b = a.clone();
        for o in &obs {
            a.fuse(o).unwrap();
        }
        let n = obs.len();
        for i in 0..n {
            b.fuse(&obs[(n - 1 - i + rot) % n]).unwrap();
        }
        prop_assert_eq!(&a.hits, &b.hits);
        prop_assert_eq!(&a.train_counts, &b.train_counts);
        for (x, y) in a.log_odds.iter().zip(&b.log_odds).chain(a.mu_u.iter().zip(&b.mu_u)).chain(a.mu_r.iter().zip(&b.mu_r)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn score_layers_hold_batch_means(obs in prop::collection::vec(obs_strategy(), 1..8)) {
        let mut m = MultiLayerMap::new(16, 16, K, &MapConfig::default());
        for o in &obs {
            m.fuse(o).unwrap();
        }
        for r in 0..16 {
            for c in 0..16 {
                let covering: Vec<&Observation> = obs.iter().filter(|o| o.footprint.contains(r, c)).collect();
                let cell = m.cell(r, c);
                prop_assert_eq!(m.hits[cell] as usize, covering.len());
                let trained = covering.iter().filter(|o| o.is_training_sample).count();
                prop_assert_eq!(m.train_counts[cell] as usize, trained);
                if covering.is_empty() {
                    prop_assert_eq!(m.mu_u[cell], m.prior_u);
                    prop_assert_eq!(m.mu_r[cell], m.prior_r);
                } else {
                    let n = covering.len() as f64;
                    let mu: f64 = covering.iter().map(|o| o.uncertainty[0]).sum::<f64>() / n;
                    let mr: f64 = covering.iter().map(|o| o.novelty[0]).sum::<f64>() / n;
                    prop_assert!((m.mu_u[cell] - mu).abs() < 1e-12);
                    prop_assert!((m.mu_r[cell] - mr).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_odds_stay_clamped(obs in prop::collection::vec(footprint(), 1..30), hot in 0usize..K) {
        let mut m = MultiLayerMap::new(16, 16, K, &MapConfig::default());
        let mut p = vec![1e-12; K];
        p[hot] = 1.0 - 3e-12;
        for fp in obs {
            m.fuse(&observation(fp, &p, 0.0, 0.0, false)).unwrap();
        }
        prop_assert!(m.log_odds.iter().all(|l| l.abs() <= 10.0 && l.is_finite()));
        let post = m.semantic_posterior(5, 5);
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn hit_counts_are_conserved() {
    let mut m = MultiLayerMap::new(20, 20, K, &MapConfig::default());
    let fps = [(0, 0, 5, 5), (3, 3, 8, 4), (12, 10, 8, 10), (0, 0, 20, 20)];
    let mut area = 0;
    let mut train_area = 0;
    for (i, &(r, c, h, w)) in fps.iter().enumerate() {
        let fp = Footprint {
            row0: r,
            col0: c,
            rows: h,
            cols: w,
        };
        m.fuse(&observation(fp, &[0.25; K], 1.0, 1.0, i % 2 == 0)).unwrap();
        area += fp.area();
        if i % 2 == 0 {
            train_area += fp.area();
        }
    }
    assert_eq!(m.hits.iter().map(|&h| h as usize).sum::<usize>(), area);
    assert_eq!(m.train_counts.iter().map(|&h| h as usize).sum::<usize>(), train_area);
}

#[test]
fn replay_keeps_counts_and_uses_new_predictions() {
    let template = MultiLayerMap::new(12, 12, K, &MapConfig::default());
    let mut live = template.clone();
    let mut history = Vec::new();
    for (i, (r, c)) in [(0, 0), (2, 3), (6, 6), (1, 1)].into_iter().enumerate() {
        let fp = Footprint {
            row0: r,
            col0: c,
            rows: 5,
            cols: 5,
        };
        let train = i != 2;
        live.fuse(&observation(fp, &[0.7, 0.1, 0.1, 0.1], 0.5, 0.5, train)).unwrap();
        history.push(HistoryEntry {
            footprint: fp,
            features: FeatureImage {
                rows: 5,
                cols: 5,
                dim: 1,
                data: vec![0.0; 25],
            },
            is_training_sample: train,
        });
    }
    let replayed = recompute_priors(&live, &history, |e| {
        Ok(observation(e.footprint, &[0.1, 0.1, 0.7, 0.1], 0.2, 0.3, false))
    })
    .unwrap();
    assert_eq!(replayed.hits, live.hits);
    assert_eq!(replayed.train_counts, live.train_counts);
    let cell = replayed.cell(3, 3);
    assert_abs_diff_eq!(replayed.mu_u[cell], 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(replayed.mu_r[cell], 0.3, epsilon = 1e-12);
    let post = replayed.semantic_posterior(3, 3);
    assert!(post[2] > post[0]);

    let empty = recompute_priors(&live, &[], |_| unreachable!()).unwrap();
    assert_eq!(empty, template);
}

#[test]
fn mismatched_observation_is_rejected() {
    let mut m = MultiLayerMap::new(8, 8, K, &MapConfig::default());
    let fp = Footprint {
        row0: 6,
        col0: 6,
        rows: 4,
        cols: 4,
    };
    assert!(m.fuse(&observation(fp, &[0.25; K], 0.0, 0.0, false)).is_err());
    let mut o = observation(
        Footprint {
            row0: 0,
            col0: 0,
            rows: 2,
            cols: 2,
        },
        &[0.25; K],
        0.0,
        0.0,
        false,
    );
    o.uncertainty.pop();
    assert!(m.fuse(&o).is_err());
    assert_eq!(m, MultiLayerMap::new(8, 8, K, &MapConfig::default()));
}
