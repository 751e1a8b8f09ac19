use metagrad::maml::{adapt, InnerConfig};
use metagrad::models::{build_model, Checkpoint, ModelKind, ModelSpec};
use metagrad::rng::{normal_tensor, stream, Stream};
use metagrad::tasks::{sample_data, sample_logistic_task, LabelMode, SampleOptions, TaskData};
use metagrad::{Error, Tensor};
use proptest::prelude::*;

fn s11(v: f64) -> Tensor {
    Tensor::matrix(1, 1, vec![v]).unwrap()
}

fn logistic_episode(seed: u64) -> TaskData {
    let task = sample_logistic_task(seed, 2);
    let opts = SampleOptions {
        labels: LabelMode::Hard,
        noiseless: false,
    };
    TaskData::Samples(sample_data(&task, 5, 15, seed, opts).unwrap())
}

#[test]
fn linnet_collapse_agrees_on_random_inputs() {
    let model = build_model(&ModelSpec::linnet(2, vec![8, 8, 8], 1), 3).unwrap();
    let collapsed = model.collapse_linear().unwrap();
    assert_eq!(collapsed.layers.len(), 1);
    assert!(collapsed.param_count() < model.param_count());
    let x = normal_tensor(&mut stream(11, Stream::Data, 0), &[100, 2], 1.0);
    let diff = model
        .predict(&x)
        .unwrap()
        .max_abs_diff(&collapsed.predict(&x).unwrap())
        .unwrap();
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn deep_minimum_collapses_to_zero_slope() {
    let mut model = build_model(&ModelSpec::deep1d(), 0).unwrap();
    model = model.with_flat_params(vec![s11(3.1623), s11(0.0)]).unwrap();
    let c = model.collapse_linear().unwrap();
    assert_eq!(c.spec.kind, ModelKind::Shallow1d);
    assert_eq!(c.effective_scalar().unwrap(), 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = build_model(&ModelSpec::linnet(2, vec![3, 2], 1), 9).unwrap();
    let ck = Checkpoint::new(model.clone(), None);
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back.model, model);
}

#[test]
fn frozen_layers_keep_their_bits() {
    let model = build_model(&ModelSpec::linnet(2, vec![4, 4], 1), 2).unwrap();
    let model = model.set_freeze(&[false, true, false]).unwrap();
    let (adapted, _, _) = adapt(&model, None, &logistic_episode(5), &InnerConfig::new(0.9, 5)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&adapted.layers[1].weight), bits(&model.layers[1].weight));
    assert_ne!(bits(&adapted.layers[0].weight), bits(&model.layers[0].weight));
    assert_ne!(bits(&adapted.layers[2].weight), bits(&model.layers[2].weight));
}

#[test]
fn all_frozen_adaptation_is_identity() {
    let model = build_model(&ModelSpec::linnet(2, vec![4], 1), 2).unwrap();
    let model = model.set_freeze(&[true, true]).unwrap();
    let (adapted, _, _) = adapt(&model, None, &logistic_episode(1), &InnerConfig::new(0.9, 3)).unwrap();
    assert_eq!(adapted.layers, model.layers);
}

#[test]
fn unfrozen_mask_matches_default() {
    let model = build_model(&ModelSpec::logistic(2, 1), 4).unwrap();
    let masked = model.set_freeze(&[false]).unwrap();
    let cfg = InnerConfig::new(0.9, 2);
    let data = logistic_episode(8);
    let (a, _, _) = adapt(&model, None, &data, &cfg).unwrap();
    let (b, _, _) = adapt(&masked, None, &data, &cfg).unwrap();
    assert_eq!(a.layers, b.layers);
}

#[test]
fn frozen_a_step_is_exact_through_the_engine() {
    let alpha: f64 = 0.1;
    let model = build_model(&ModelSpec::deep1d(), 0).unwrap();
    let model = model
        .with_flat_params(vec![s11(1.0 / alpha.sqrt()), s11(0.77)])
        .unwrap()
        .set_freeze(&[true, false])
        .unwrap();
    let theta = -1.4;
    let (adapted, _, _) = adapt(
        &model,
        None,
        &TaskData::Population { theta },
        &InnerConfig::new(alpha, 1),
    )
    .unwrap();
    let p = adapted.flat_params();
    let (a, b) = (p[0].item().unwrap(), p[1].item().unwrap());
    assert!((b - alpha.sqrt() * theta).abs() < 1e-12);
    assert!((a * b - theta).abs() < 1e-12);
}

#[test]
fn collapse_rejects_relu_networks() {
    let mlp = build_model(&ModelSpec::mlp(2, vec![4], 1), 0).unwrap();
    assert!(matches!(mlp.collapse_linear(), Err(Error::Contract(_))));
}

#[test]
fn build_is_deterministic_per_seed() {
    let spec = ModelSpec::linnet(2, vec![8, 8], 1);
    assert_eq!(build_model(&spec, 7).unwrap(), build_model(&spec, 7).unwrap());
    assert_ne!(build_model(&spec, 7).unwrap(), build_model(&spec, 8).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn collapse_preserves_outputs(
        seed in 0u64..10_000,
        widths in prop::collection::vec(1usize..7, 1..4),
        input in 1usize..4,
    ) {
        let model = build_model(&ModelSpec::linnet(input, widths, 1), seed).unwrap();
        let x = normal_tensor(&mut stream(seed, Stream::Data, 1), &[20, input], 1.0);
        let c = model.collapse_linear().unwrap();
        let diff = model.predict(&x).unwrap().max_abs_diff(&c.predict(&x).unwrap()).unwrap();
        prop_assert!(diff < 1e-10);
    }

    #[test]
    fn freeze_isolation(seed in 0u64..10_000, mask in prop::collection::vec(any::<bool>(), 3)) {
        let model = build_model(&ModelSpec::linnet(2, vec![3, 3], 1), seed).unwrap();
        let model = model.set_freeze(&mask).unwrap();
        let (adapted, _, _) = adapt(&model, None, &logistic_episode(seed), &InnerConfig::new(0.5, 2)).unwrap();
        for (i, frozen) in mask.iter().enumerate() {
            let same = adapted.layers[i] == model.layers[i];
            prop_assert_eq!(same, *frozen, "layer {}", i);
        }
    }
}
