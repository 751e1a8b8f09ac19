use metagrad::maml::{
    adapt, evaluate, meta_gradient, meta_step, meta_train, population_task_losses, InnerConfig, OuterConfig, OuterRule,
    OuterState, TrainBundle,
};
use metagrad::metaopt::{init_xi, OptimizerSpec};
use metagrad::models::{build_model, Model, ModelSpec};
use metagrad::oracle::{deep_maml_grad, DeepPoint};
use metagrad::rng::{normal_tensor, stream, Stream};
use metagrad::tasks::{sample_data, sample_logistic_task, LabelMode, SampleOptions, TaskData, TaskDistribution};
use metagrad::verify::{meta_gradient_error, meta_loss_value, META_FD_STEP};
use metagrad::{Error, Tensor};

fn s11(v: f64) -> Tensor {
    Tensor::matrix(1, 1, vec![v]).unwrap()
}

fn deep(a: f64, b: f64) -> Model {
    build_model(&ModelSpec::deep1d(), 0)
        .unwrap()
        .with_flat_params(vec![s11(a), s11(b)])
        .unwrap()
}

fn shallow(c: f64) -> Model {
    build_model(&ModelSpec::shallow1d(), 0)
        .unwrap()
        .with_flat_params(vec![s11(c)])
        .unwrap()
}

fn scalars(m: &Model) -> Vec<f64> {
    m.flat_params().iter().map(|t| t.item().unwrap()).collect()
}

fn episode(seed: u64) -> TaskData {
    let task = sample_logistic_task(seed, 2);
    let opts = SampleOptions {
        labels: LabelMode::Hard,
        noiseless: false,
    };
    TaskData::Samples(sample_data(&task, 5, 15, seed, opts).unwrap())
}

fn sgd(beta: f64) -> OuterConfig {
    OuterConfig {
        beta,
        meta_batch: 1,
        iterations: 1,
        rule: OuterRule::Sgd,
        train_xi: true,
    }
}

#[test]
fn shallow_one_step_moves_toward_the_task() {
    let (alpha, c, theta) = (0.1, 0.4, -1.2);
    let (m, _, trace) = adapt(
        &shallow(c),
        None,
        &TaskData::Population { theta },
        &InnerConfig::new(alpha, 1),
    )
    .unwrap();
    assert!((scalars(&m)[0] - (c - alpha * (c - theta))).abs() < 1e-15);
    assert_eq!(trace.len(), 2);
}

#[test]
fn frozen_a_adaptation_reaches_the_task_optimum() {
    let alpha: f64 = 0.1;
    let mut r = stream(42, Stream::Eval, 0);
    for _ in 0..50 {
        let b0 = metagrad::rng::normal(&mut r);
        let theta = metagrad::rng::normal(&mut r);
        let m = deep(1.0 / alpha.sqrt(), b0).set_freeze(&[true, false]).unwrap();
        let (m, _, _) = adapt(&m, None, &TaskData::Population { theta }, &InnerConfig::new(alpha, 1)).unwrap();
        let p = scalars(&m);
        assert!((p[1] - alpha.sqrt() * theta).abs() < 1e-12);
        assert!((p[0] * p[1] - theta).abs() < 1e-12);
    }
}

#[test]
fn zero_steps_and_zero_gradients() {
    let m = shallow(0.5);
    let data = TaskData::Population { theta: 0.5 };
    assert!(matches!(
        adapt(&m, None, &data, &InnerConfig::new(0.1, 0)),
        Err(Error::Config(_))
    ));
    let (next, _, _) = adapt(&m, None, &data, &InnerConfig::new(0.1, 1)).unwrap();
    assert_eq!(scalars(&next), vec![0.5]);
}

#[test]
fn trace_has_one_entry_per_state() {
    let m = build_model(&ModelSpec::linnet(2, vec![4, 4], 1), 1).unwrap();
    let (_, _, trace) = adapt(&m, None, &episode(2), &InnerConfig::new(0.5, 4)).unwrap();
    assert_eq!(trace.len(), 5);
    assert_eq!(trace.support_loss.len(), 5);
    assert_eq!(trace.query_accuracy.len(), 5);
    assert!(trace.query_accuracy.iter().all(Option::is_some));
}

/// Sampled-task meta-loss of the shallow model is a parabola in `c` with
/// second derivative `(1 − α)²` under the ½-scaled squared loss.
#[test]
fn shallow_meta_loss_curvature() {
    let alpha = 0.1;
    let thetas = normal_tensor(&mut stream(7, Stream::Task, 0), &[10_000], 1.0);
    let cfg = InnerConfig::new(alpha, 1);
    let f = |c: f64| {
        let l = population_task_losses(&shallow(c), &thetas, &cfg).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let h = 0.5;
    let curvature = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
    let expected = (1.0 - alpha) * (1.0 - alpha);
    assert!((curvature / expected - 1.0).abs() < 0.05, "{curvature}");
    // The squared-loss convention without the ½ and the 2 of the
    // expectation quadruples it: 2 · 2 · 0.81.
    assert!((4.0 * curvature / 3.24 - 1.0).abs() < 0.05);
}

#[test]
fn deep_origin_is_a_stationary_maximum() {
    let alpha = 0.1;
    let thetas = normal_tensor(&mut stream(1, Stream::Task, 0), &[20_000], 1.0);
    let cfg = InnerConfig::new(alpha, 1);
    let data = [TaskData::PopulationBatch { thetas }];
    let mg = meta_gradient(&deep(0.0, 0.0), None, &data, &cfg).unwrap();
    for g in &mg.model_grads {
        assert_eq!(g.item().unwrap(), 0.0);
    }
    let h = 1e-3;
    let loss = |a: f64, b: f64| meta_loss_value(&deep(a, b), None, &data, &cfg).unwrap();
    let l0 = loss(0.0, 0.0);
    let haa = (loss(h, 0.0) - 2.0 * l0 + loss(-h, 0.0)) / (h * h);
    let hbb = (loss(0.0, h) - 2.0 * l0 + loss(0.0, -h)) / (h * h);
    // Half the closed-form objective's −4α, from the ½ loss scaling.
    assert!((2.0 * haa + 4.0 * alpha).abs() < 0.02, "{haa}");
    assert!((2.0 * hbb + 4.0 * alpha).abs() < 0.02, "{hbb}");
}

#[test]
fn engine_gradient_is_half_the_closed_form_gradient() {
    let alpha = 0.1;
    let nodes = metagrad::verify::gauss_hermite5();
    let thetas = Tensor::vector(nodes.iter().map(|n| n.0).collect());
    for (a, b) in [(1.0, 1.0), (0.3, -2.0), (-1.5, 0.7)] {
        let mut acc = [0.0; 2];
        for (k, &(_, w)) in nodes.iter().enumerate() {
            let data = [TaskData::Population {
                theta: thetas.data()[k],
            }];
            let mg = meta_gradient(&deep(a, b), None, &data, &InnerConfig::new(alpha, 1)).unwrap();
            acc[0] += w * mg.model_grads[0].item().unwrap();
            acc[1] += w * mg.model_grads[1].item().unwrap();
        }
        let (da, db) = deep_maml_grad(DeepPoint::new(a, b), alpha);
        assert!((2.0 * acc[0] - da).abs() < 1e-10, "{} vs {da}", 2.0 * acc[0]);
        assert!((2.0 * acc[1] - db).abs() < 1e-10);
    }
}

#[test]
fn first_order_drops_a_detectable_term() {
    let m = deep(1.0, 1.0);
    let data = [TaskData::Population { theta: 0.8 }];
    let full = InnerConfig::new(0.1, 1);
    let fo = InnerConfig {
        first_order: true,
        ..full.clone()
    };
    let err_full = meta_gradient_error(&m, None, &data, &full, META_FD_STEP).unwrap();
    let err_fo = meta_gradient_error(&m, None, &data, &fo, META_FD_STEP).unwrap();
    assert!(err_full < 1e-6, "{err_full}");
    assert!(err_fo > 1e-2, "{err_fo}");
}

#[test]
fn meta_gradients_match_differences_for_every_step_count() {
    let m = build_model(&ModelSpec::linnet(2, vec![2], 1), 3).unwrap();
    let tasks = [episode(1), episode(2)];
    for steps in [1, 3, 5] {
        let cfg = InnerConfig::new(0.5, steps);
        let err = meta_gradient_error(&m, None, &tasks, &cfg, META_FD_STEP).unwrap();
        assert!(err < 1e-4, "T={steps}: {err}");
    }
}

#[test]
fn shallow_meta_step_matches_closed_form() {
    let (alpha, beta, c, theta) = (0.1, 0.05, 0.7, -0.4);
    let data = [TaskData::Population { theta }];
    let mut state = OuterState::default();
    let (next, _, _) = meta_step(
        &shallow(c),
        None,
        &data,
        &InnerConfig::new(alpha, 1),
        &sgd(beta),
        &mut state,
        0,
    )
    .unwrap();
    let expected = c - beta * (1.0 - alpha) * (1.0 - alpha) * (c - theta);
    assert!((scalars(&next)[0] - expected).abs() < 1e-14);
}

#[test]
fn stationary_point_barely_moves() {
    let alpha: f64 = 0.1;
    let nodes = metagrad::verify::gauss_hermite5();
    let thetas = Tensor::vector(nodes.iter().map(|n| n.0).collect());
    let start = deep(1.0 / alpha.sqrt(), 0.0);
    // Weighted quadrature of the population: replicate nodes by weight.
    let weights: Vec<f64> = nodes.iter().map(|n| n.1).collect();
    let mut total = [0.0; 2];
    for (k, w) in weights.iter().enumerate() {
        let data = [TaskData::Population {
            theta: thetas.data()[k],
        }];
        let mut state = OuterState::default();
        let (next, _, _) = meta_step(
            &start,
            None,
            &data,
            &InnerConfig::new(alpha, 1),
            &sgd(0.01),
            &mut state,
            0,
        )
        .unwrap();
        let (p, q) = (scalars(&next), scalars(&start));
        total[0] += w * (p[0] - q[0]);
        total[1] += w * (p[1] - q[1]);
    }
    assert!(total[0].abs() < 1e-6 && total[1].abs() < 1e-6, "{total:?}");
}

#[test]
fn mc_gets_outer_but_not_inner_updates() {
    let model = build_model(&ModelSpec::logistic(2, 1), 0).unwrap();
    let opt = init_xi(&OptimizerSpec::mc(), &model).unwrap();
    let data = episode(4);
    let cfg = InnerConfig::new(0.9, 3);
    let (_, inner_xi, _) = adapt(&model, Some(&opt), &data, &cfg).unwrap();
    assert_eq!(inner_xi.unwrap(), opt);
    let mut state = OuterState::default();
    let (_, outer_xi, _) = meta_step(&model, Some(&opt), &[data], &cfg, &sgd(0.1), &mut state, 0).unwrap();
    assert_ne!(outer_xi.unwrap(), opt);
}

#[test]
fn frozen_head_still_shapes_adaptation() {
    let model = build_model(&ModelSpec::linnet(2, vec![4, 4], 1), 5).unwrap();
    let model = model.set_freeze(&[false, false, true]).unwrap();
    let mut other = model.clone();
    other.layers[2].weight = other.layers[2].weight.scale(-1.5);
    let data = episode(9);
    let cfg = InnerConfig::new(0.9, 1);
    let (_, _, t1) = adapt(&model, None, &data, &cfg).unwrap();
    let (_, _, t2) = adapt(&other, None, &data, &cfg).unwrap();
    assert_ne!(t1.params[1][0], t2.params[1][0]);
    assert!((t1.query_loss[1] - t2.query_loss[1]).abs() > 1e-6);
}

#[test]
fn diverging_tasks_are_reported() {
    let model = build_model(&ModelSpec::logistic(2, 1), 0).unwrap();
    let tasks = vec![episode(0)];
    let summary = evaluate(&model, None, &tasks, &InnerConfig::new(1e200, 2)).unwrap();
    assert_eq!(summary.diverged, 1);
    assert_eq!(summary.mean_accuracy, Some(0.0));
}

fn tiny_bundle() -> TrainBundle {
    TrainBundle {
        model: ModelSpec::linnet(2, vec![4], 1),
        optimizer: OptimizerSpec::identity(),
        tasks: TaskDistribution::logistic2d(LabelMode::Hard),
        inner: InnerConfig::new(0.9, 1),
        eval_inner: Some(InnerConfig::new(0.9, 5)),
        outer: OuterConfig {
            beta: 0.1,
            meta_batch: 4,
            iterations: 20,
            rule: OuterRule::Adam,
            train_xi: true,
        },
        eval_tasks: 20,
        eval_every: 10,
        batched_population: false,
        trajectory_every: 10,
    }
}

#[test]
fn meta_training_is_reproducible() {
    let b = tiny_bundle();
    let (r1, r2) = (meta_train(&b, 3).unwrap(), meta_train(&b, 3).unwrap());
    assert_eq!(r1.final_model, r2.final_model);
    assert_eq!(r1.final_eval, r2.final_eval);
    assert_ne!(meta_train(&b, 4).unwrap().final_model, r1.final_model);
}

#[test]
fn deep_training_reaches_a_minimum() {
    let alpha: f64 = 0.1;
    let bundle = TrainBundle {
        model: ModelSpec::deep1d(),
        optimizer: OptimizerSpec::identity(),
        tasks: TaskDistribution::regression_population(),
        inner: InnerConfig::new(alpha, 1),
        eval_inner: None,
        outer: OuterConfig {
            beta: 0.01,
            meta_batch: 64,
            iterations: 20_000,
            rule: OuterRule::SgdMomentum,
            train_xi: true,
        },
        eval_tasks: 100,
        eval_every: 0,
        batched_population: true,
        trajectory_every: 1000,
    };
    let r = meta_train(&bundle, 1).unwrap();
    let p = scalars(r.final_model.as_ref().unwrap());
    let m = 1.0 / alpha.sqrt();
    let dist = [(m, 0.0), (-m, 0.0), (0.0, m), (0.0, -m)]
        .iter()
        .map(|(a, b)| ((p[0] - a).powi(2) + (p[1] - b).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    assert!(dist < 0.05, "{p:?}");
    assert!(!r.trajectory.is_empty());
}
