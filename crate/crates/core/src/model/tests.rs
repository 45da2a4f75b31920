use super::*;
use crate::obs_store::{
    build_schema, split, DataSource, FiberSpec, SourceSpec, SourceSplit, SplitPlan,
};
use rand::Rng;

fn fibers(dims: &[usize]) -> Vec<FiberSpec> {
    dims.iter()
        .enumerate()
        .map(|(id, &dim)| FiberSpec {
            id,
            label: format!("f{id}"),
            dim,
        })
        .collect()
}

/// Every cell of every source in a (n, n, n) layout filled with random values.
fn dense_toy(n: usize, seed_value: u64) -> Schema {
    let mut rng = seed::rng(seed_value, &[]);
    let layouts: [(SourceId, &str, &[usize]); 4] = [
        (1, "utb", &[0, 1, 2]),
        (2, "ut", &[0, 1]),
        (3, "ub", &[0, 2]),
        (4, "tb", &[1, 2]),
    ];
    let sources = layouts
        .iter()
        .map(|&(id, name, fs)| {
            let mut src = DataSource::new(SourceSpec::new(id, name, fs));
            let cells = n.pow(fs.len() as u32);
            for c in 0..cells {
                let mut idx = Vec::new();
                let mut rest = c;
                for _ in fs {
                    idx.push(rest % n);
                    rest /= n;
                }
                src.push(&idx, rng.random_range(-2.0..2.0)).unwrap();
            }
            src
        })
        .collect();
    build_schema(fibers(&[n, n, n]), sources).unwrap()
}

fn all_train(schema: &Schema) -> SplitPlan {
    SplitPlan {
        train_fraction: 0.5,
        seed: 0,
        per_source: schema
            .sources()
            .iter()
            .map(|s| {
                (
                    s.id(),
                    SourceSplit {
                        train: (0..s.len()).collect(),
                        test: (0..s.len()).collect(),
                    },
                )
            })
            .collect(),
    }
}

fn small_config(sources: &[SourceId], interactions: bool) -> ModelConfig {
    ModelConfig {
        rank: 2,
        use_interactions: interactions,
        head_hidden: vec![6, 4],
        init_sd: 0.8,
        head_lambda: 0.01,
        embedding_lambda: 0.02,
        seed: 3,
        ..ModelConfig::new(sources)
    }
}

#[test]
fn head_widths_follow_the_dimension_law() {
    let schema = dense_toy(2, 1);
    for (interactions, widths) in [(true, [14, 6, 6, 6]), (false, [6, 4, 4, 4])] {
        let cfg = ModelConfig {
            rank: 2,
            use_interactions: interactions,
            ..ModelConfig::new(&[1, 2, 3, 4])
        };
        let model = JointModel::new(&schema, cfg).unwrap();
        let got: Vec<usize> = model.heads().iter().map(|h| h.net.input_dim()).collect();
        assert_eq!(got, widths);
    }
    let cfg = ModelConfig::new(&[1]);
    let model = JointModel::new(&schema, cfg).unwrap();
    assert_eq!(model.heads()[0].net.input_dim(), 35);
}

#[test]
fn zero_model_predicts_zero() {
    let schema = dense_toy(2, 1);
    let mut model = JointModel::new(&schema, ModelConfig::new(&[1, 2])).unwrap();
    for t in model.factors_mut() {
        t.fill(0.0);
    }
    for h in model.heads_mut() {
        h.net = Mlp::zeros(h.net.input_dim(), &DEFAULT_HIDDEN).unwrap();
    }
    assert_eq!(model.predict(1, &[1, 0, 1]).unwrap(), 0.0);
    assert_eq!(model.predict(2, &[0, 1]).unwrap(), 0.0);
}

#[test]
fn without_interactions_the_head_sees_the_concatenation() {
    let schema = dense_toy(3, 2);
    let model = JointModel::new(&schema, small_config(&[1], false)).unwrap();
    let f = model.factors();
    let concat: Vec<f64> = [f[0].row(2), f[1].row(0), f[2].row(1)]
        .iter()
        .flat_map(|r| r.iter().copied())
        .collect();
    let direct = model.heads()[0].net.forward(&concat).unwrap().0;
    assert_eq!(model.predict(1, &[2, 0, 1]).unwrap(), direct);
}

#[test]
fn ntf_configuration_has_the_default_head_parameter_count() {
    let schema = dense_toy(2, 1);
    let cfg = ModelConfig {
        use_interactions: false,
        ..ModelConfig::new(&[1])
    };
    let model = JointModel::new(&schema, cfg).unwrap();
    let d = 15;
    let head = (64 * d + 64) + (64 * 32 + 32) + (32 * 16 + 16) + (16 * 8 + 8) + (8 + 1);
    assert_eq!(model.heads()[0].net.num_params(), head);
    assert_eq!(model.num_params(), head + 3 * 2 * 5);
}

#[test]
fn predict_rejects_unknown_sources_and_bad_indices() {
    let schema = dense_toy(2, 1);
    let model = JointModel::new(&schema, small_config(&[2], true)).unwrap();
    assert!(model.predict(1, &[0, 0, 0]).is_err());
    assert!(model.predict(2, &[0, 2]).is_err());
    assert!(model.predict(2, &[0]).is_err());
}

#[test]
fn squared_loss_of_a_single_cell() {
    let (loss, grad) = batch_loss(LossKind::Squared, ndarray::aview1(&[0.0]), &[2.0]);
    assert_eq!(loss, 4.0);
    assert_eq!(grad[0], -4.0);
}

#[test]
fn perfect_predictions_have_zero_loss() {
    let mut src = DataSource::new(SourceSpec::new(1, "ut", &[0, 1]));
    src.push(&[0, 0], 0.0).unwrap();
    src.push(&[1, 1], 0.0).unwrap();
    let schema = build_schema(fibers(&[2, 2]), vec![src]).unwrap();
    let cfg = ModelConfig {
        head_lambda: 0.0,
        embedding_lambda: 0.0,
        ..ModelConfig::new(&[1])
    };
    let mut model = JointModel::new(&schema, cfg).unwrap();
    for h in model.heads_mut() {
        h.net = Mlp::zeros(h.net.input_dim(), &DEFAULT_HIDDEN).unwrap();
    }
    let (loss, _) = multi_task_loss(&model, &schema, &[(1, &[0, 1])]).unwrap();
    assert_eq!(loss, 0.0);
}

fn loss_of(model: &JointModel, schema: &Schema, batches: &[(SourceId, &[usize])]) -> f64 {
    multi_task_loss(model, schema, batches).unwrap().0
}

/// Central differences against every analytic component, skipping
/// perturbations that straddle a rectifier kink.
fn check_all_params(model: &JointModel, schema: &Schema, batches: &[(SourceId, &[usize])]) {
    let (_, grads) = multi_task_loss(model, schema, batches).unwrap();
    let analytic = grads.flat(model);
    assert_eq!(analytic.len(), model.num_params());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.num_params() {
        let mut plus = model.clone();
        plus.set_param(i, model.param(i) + h);
        let mut minus = model.clone();
        minus.set_param(i, model.param(i) - h);
        let (lp, lm, l0) = (
            loss_of(&plus, schema, batches),
            loss_of(&minus, schema, batches),
            loss_of(model, schema, batches),
        );
        let fd = (lp - lm) / (2.0 * h);
        // one-sided slopes disagree at a kink
        let kink = ((lp - l0) / h - (l0 - lm) / h).abs() > 1e-3 * fd.abs().max(1.0);
        if kink {
            continue;
        }
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
    }
    assert!(worst < 1e-4);
}

#[test]
fn joint_gradients_match_finite_differences() {
    let schema = dense_toy(2, 7);
    for interactions in [true, false] {
        let model = JointModel::new(&schema, small_config(&[1, 2, 3, 4], interactions)).unwrap();
        check_all_params(
            &model,
            &schema,
            &[(1, &[0, 3, 5, 6]), (2, &[1, 2]), (3, &[0, 3]), (4, &[2])],
        );
    }
}

#[test]
fn embedding_gradient_through_a_pairwise_block() {
    // Single ut head: input [x, u, x⊙u]; d/dx of the block term is g_block ⊙ u.
    let schema = dense_toy(2, 9);
    let cfg = ModelConfig {
        embedding_lambda: 0.0,
        head_lambda: 0.0,
        ..small_config(&[2], true)
    };
    let model = JointModel::new(&schema, cfg).unwrap();
    let src = schema.source(2).unwrap();
    let obs = 3;
    let idx = src.index(obs).to_vec();
    let input = model.head_input(2, &idx).unwrap();
    let (z, cache) = model.heads()[0].net.forward(&input).unwrap();
    let dz = 2.0 * (z - src.value(obs));
    let (_, d_input) = model.heads()[0].net.backward(&cache, dz).unwrap();
    let r = 2;
    let u = model.factors()[1].row(idx[1]).to_vec();
    let expected_x: Vec<f64> = (0..r)
        .map(|e| d_input[e] + d_input[2 * r + e] * u[e])
        .collect();
    let (_, grads) = multi_task_loss(&model, &schema, &[(2, &[obs])]).unwrap();
    for e in 0..r {
        assert!((grads.factors[0][[idx[0], e]] - expected_x[e]).abs() < 1e-12);
    }
    check_all_params(&model, &schema, &[(2, &[obs])]);
}

#[test]
fn order_four_gradients_match_finite_differences() {
    let mut rng = seed::rng(21, &[]);
    let mut src = DataSource::new(SourceSpec::new(1, "utbh", &[0, 1, 2, 3]));
    for c in 0..16usize {
        src.push(
            &[c & 1, (c >> 1) & 1, (c >> 2) & 1, (c >> 3) & 1],
            rng.random_range(-1.0..1.0),
        )
        .unwrap();
    }
    let schema = build_schema(fibers(&[2, 2, 2, 2]), vec![src]).unwrap();
    let model = JointModel::new(&schema, small_config(&[1], true)).unwrap();
    assert_eq!(model.heads()[0].net.input_dim(), 30);
    check_all_params(&model, &schema, &[(1, &[0, 5, 9, 15])]);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut src = DataSource::new(SourceSpec {
        loss: LossKind::CrossEntropy,
        ..SourceSpec::new(1, "click", &[0, 1])
    });
    for (c, y) in [(0, 1.0), (1, 0.0), (2, 1.0), (3, 0.0)] {
        src.push(&[c & 1, c >> 1], y).unwrap();
    }
    let schema = build_schema(fibers(&[2, 2]), vec![src]).unwrap();
    let model = JointModel::new(&schema, small_config(&[1], true)).unwrap();
    let p = model.predict(1, &[0, 1]).unwrap();
    assert!(p > 0.0 && p < 1.0);
    check_all_params(&model, &schema, &[(1, &[0, 1, 2, 3])]);
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let schema = dense_toy(3, 4);
    let cfg = ModelConfig {
        epochs: 0,
        ..small_config(&[1, 2], true)
    };
    let mut model = JointModel::new(&schema, cfg.clone()).unwrap();
    let fresh = JointModel::new(&schema, cfg).unwrap();
    let plan = split(&schema, 0.5, 1).unwrap();
    let report = train(&mut model, &schema, &plan).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(model.factors(), fresh.factors());
    assert_eq!(model.heads(), fresh.heads());
}

#[test]
fn fits_a_rank_one_matrix_without_interactions() {
    let mut rng = seed::rng(5, &[]);
    let a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
    let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut src = DataSource::new(SourceSpec::new(1, "ut", &[0, 1]));
    for i in 0..10 {
        for j in 0..10 {
            src.push(&[i, j], a[i] * b[j]).unwrap();
        }
    }
    let schema = build_schema(fibers(&[10, 10]), vec![src]).unwrap();
    let cfg = ModelConfig {
        use_interactions: false,
        epochs: 500,
        batch_size: 10,
        head_lambda: 0.0,
        embedding_lambda: 0.0,
        adam: crate::nn::AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..ModelConfig::new(&[1])
    };
    let mut model = JointModel::new(&schema, cfg).unwrap();
    let plan = all_train(&schema);
    train(&mut model, &schema, &plan).unwrap();
    let rmse = evaluate(&model, &schema, &plan).unwrap()[&1].rmse;
    assert!(rmse < 0.05, "train rmse {rmse}");
}

#[test]
fn shared_rows_drive_every_source() {
    let schema = dense_toy(3, 6);
    let mut model = JointModel::new(&schema, small_config(&[1, 2], true)).unwrap();
    let before = (
        model.predict(1, &[1, 2, 0]).unwrap(),
        model.predict(2, &[1, 2]).unwrap(),
    );
    model.factors_mut()[0].row_mut(1).mapv_inplace(|v| v + 0.5);
    let after = (
        model.predict(1, &[1, 2, 0]).unwrap(),
        model.predict(2, &[1, 2]).unwrap(),
    );
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

#[test]
fn cold_start_reports_provenance() {
    // user 2 only rates tops; user 3 rates nothing
    let mut utb = DataSource::new(SourceSpec::new(1, "utb", &[0, 1, 2]));
    let mut ut = DataSource::new(SourceSpec::new(2, "ut", &[0, 1]));
    for u in 0..2 {
        for t in 0..2 {
            for b in 0..2 {
                utb.push(&[u, t, b], (u + t + b) as f64).unwrap();
            }
            ut.push(&[u, t], 1.0).unwrap();
        }
    }
    ut.push(&[2, 0], 2.0).unwrap();
    ut.push(&[2, 1], 2.0).unwrap();
    let schema = build_schema(fibers(&[4, 2, 2]), vec![utb, ut]).unwrap();
    let cfg = ModelConfig {
        epochs: 5,
        ..small_config(&[1, 2], true)
    };
    let mut model = JointModel::new(&schema, cfg).unwrap();
    let plan = all_train(&schema);
    train(&mut model, &schema, &plan).unwrap();

    let warm = cold_start_predict(&model, 1, &[2, 0, 1]).unwrap();
    assert!(warm.value.is_finite());
    assert!(warm.untrained.is_empty());
    assert_eq!(warm.entities[0].trained_by, vec![2]);
    assert_eq!(warm.entities[1].trained_by, vec![1, 2]);

    let cold = cold_start_predict(&model, 1, &[3, 0, 0]).unwrap();
    assert_eq!(cold.untrained, vec![(0, 3)]);
    assert!(cold.value.is_finite());

    let all_warm = cold_start_predict(&model, 1, &[0, 1, 1]).unwrap();
    assert!(all_warm.untrained.is_empty());
}

#[test]
fn empty_training_sources_are_dropped() {
    let schema = dense_toy(2, 3);
    let mut plan = all_train(&schema);
    plan.per_source.get_mut(&4).unwrap().train.clear();
    let cfg = ModelConfig {
        epochs: 2,
        ..small_config(&[1, 4], true)
    };
    let mut model = JointModel::new(&schema, cfg).unwrap();
    let tb_head = model.head(4).unwrap().net.clone();
    let report = train(&mut model, &schema, &plan).unwrap();
    assert_eq!(report.dropped_sources, vec![4]);
    assert_eq!(model.head(4).unwrap().net, tb_head);
}

#[test]
fn save_load_reproduces_predictions_bit_exactly() {
    let schema = dense_toy(3, 8);
    let cfg = ModelConfig {
        epochs: 3,
        clamp: Some((-1.0, 1.5)),
        ..small_config(&[1, 2, 3, 4], true)
    };
    let mut model = JointModel::new(&schema, cfg).unwrap();
    let plan = split(&schema, 0.5, 2).unwrap();
    train(&mut model, &schema, &plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = JointModel::load(&path).unwrap();
    assert_eq!(back, model);
    for src in schema.sources() {
        for (idx, _) in src.iter() {
            assert_eq!(
                back.predict(src.id(), idx).unwrap().to_bits(),
                model.predict(src.id(), idx).unwrap().to_bits()
            );
        }
    }
}

#[test]
fn load_rejects_inconsistent_files() {
    let schema = dense_toy(2, 8);
    let model = JointModel::new(&schema, small_config(&[1, 2], true)).unwrap();
    let json = model.to_json_string().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["config"]["rank"] = 3.into();
    assert!(JointModel::from_json_str(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["config"]["use_interactions"] = false.into();
    assert!(JointModel::from_json_str(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["version"] = 7.into();
    assert!(JointModel::from_json_str(&v.to_string()).is_err());
    assert!(JointModel::from_json_str("{").is_err());
}
