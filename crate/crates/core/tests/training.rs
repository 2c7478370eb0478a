use robustcaps::capsules::predictions;
use robustcaps::data::{build_test_suites, Sample, TransformSpec, TRAIN_SPEC};
use robustcaps::layers::BlockSpec;
use robustcaps::model::{Model, ModelConfig};
use robustcaps::params::ParamStore;
use robustcaps::tensor::{grad_check, Array, Real, Tape};
use robustcaps::train::checkpoint::Checkpoint;
use robustcaps::train::{
    accuracy, cross_entropy, evaluate, predict, train, AdamWConfig, TrainConfig, TrainData,
};
use robustcaps::Error;

fn small() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        blocks: vec![BlockSpec { channels: 6, stride: 2 }],
        capsule_types: 3,
        capsule_dims: 4,
        conv_caps_layers: 2,
        ..ModelConfig::default()
    }
}

fn samples(n: usize, side: usize) -> Vec<Sample> {
    (0..n)
        .map(|k| Sample {
            image: Array::from_fn([1, side, side], |i| (((i + 3 * k) * 37) % 17) as f32 / 16.0),
            label: k % 4,
        })
        .collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        max_lr: 1e-2,
        eval_batch_size: 4,
        ..TrainConfig::default()
    }
}

fn scores<T: Real>(model: &Model, params: &ParamStore<T>, x: &Array<T>) -> Array<T> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = model.forward(&mut tape, &p, xv).unwrap();
    tape.value(out.scores).clone()
}

#[test]
fn single_sample_is_overfit_within_200_steps() {
    let config = ModelConfig {
        stem_channels: 8,
        blocks: vec![BlockSpec { channels: 8, stride: 2 }],
        capsule_types: 4,
        capsule_dims: 4,
        ..small()
    };
    let (model, mut params) = Model::new::<f32>(&config, 1, 10, 0).unwrap();
    let one = samples(1, 12);
    let data = TrainData {
        train: &one,
        transform: TransformSpec::IDENTITY,
        augment: false,
        suites: &[],
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        clip_norm: None,
        ..quick(200)
    };
    let run = train(&model, &mut params, &data, &cfg).unwrap();
    let losses = &run.step_losses;
    assert_eq!(losses.len(), 200);
    assert!(losses[199] < 0.01, "final loss {}", losses[199]);
    assert!(losses[..50].windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (model, mut params) = Model::new::<f32>(&small(), 1, 4, 1).unwrap();
    let before = params.clone();
    let train_set = samples(6, 10);
    let data = TrainData {
        train: &train_set,
        transform: TransformSpec::IDENTITY,
        augment: false,
        suites: &[],
    };
    let cfg = TrainConfig {
        max_lr: 0.0,
        ..quick(2)
    };
    let run = train(&model, &mut params, &data, &cfg).unwrap();
    assert_eq!(params.values(), before.values());
    // batches are reshuffled, so only the summation order differs
    let (a, b) = (run.history[0].train_loss, run.history[1].train_loss);
    assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}");
}

#[test]
fn runs_are_deterministic_in_double_precision() {
    let train_set = samples(5, 10);
    let suites = build_test_suites(&samples(4, 10), 3);
    let run = || {
        let (model, mut params) = Model::new::<f64>(&small(), 1, 4, 7).unwrap();
        let data = TrainData {
            train: &train_set,
            transform: TRAIN_SPEC,
            augment: true,
            suites: &suites,
        };
        let out = train(&model, &mut params, &data, &quick(2)).unwrap();
        (out.history, out.step_losses, params)
    };
    let (h1, l1, p1) = run();
    let (h2, l2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(l1, l2);
    assert_eq!(p1.values(), p2.values());
    assert_eq!(h1[1].suites.as_ref().map(Vec::len), Some(5));
}

#[test]
fn checkpoint_reload_reproduces_forward_exactly() {
    let (model, mut params) = Model::new::<f32>(&small(), 1, 4, 2).unwrap();
    let train_set = samples(4, 10);
    let data = TrainData {
        train: &train_set,
        transform: TRAIN_SPEC,
        augment: false,
        suites: &[],
    };
    let run = train(&model, &mut params, &data, &quick(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::capture(model.digest(), &params, Some(&run.optimizer), &run.history)
        .save(&path)
        .unwrap();

    let (fresh_model, mut fresh) = Model::new::<f32>(&small(), 1, 4, 99).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    loaded.restore(&mut fresh, &fresh_model.digest()).unwrap();
    let x = Array::from_fn([2, 1, 10, 10], |i| (i as f32 * 0.13).sin());
    assert_eq!(scores(&model, &params, &x).data(), scores(&fresh_model, &fresh, &x).data());
    assert_eq!(loaded.history, run.history);
    assert_eq!(loaded.optimizer(&fresh, AdamWConfig::default()), run.optimizer);

    let other = ModelConfig {
        capsule_dims: 5,
        ..small()
    };
    let (other_model, mut other_params) = Model::new::<f32>(&other, 1, 4, 0).unwrap();
    assert!(matches!(
        loaded.restore(&mut other_params, &other_model.digest()),
        Err(Error::DigestMismatch { .. })
    ));
}

#[test]
fn non_finite_gradient_aborts_with_the_step() {
    let (model, mut params) = Model::new::<f32>(&small(), 1, 4, 0).unwrap();
    let mut train_set = samples(6, 10);
    for s in &mut train_set {
        s.image.data_mut()[0] = f32::NAN;
    }
    let data = TrainData {
        train: &train_set,
        transform: TransformSpec::IDENTITY,
        augment: false,
        suites: &[],
    };
    let err = train(&model, &mut params, &data, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { step: 0 }), "{err}");
}

#[test]
fn both_ablations_complete_an_epoch() {
    let train_set = samples(4, 12);
    let suites = build_test_suites(&samples(2, 12), 0);
    for (no_precaps, no_projcaps) in [(true, false), (false, true)] {
        let config = ModelConfig {
            no_precaps,
            no_projcaps,
            ..small()
        };
        let (model, mut params) = Model::new::<f32>(&config, 1, 4, 0).unwrap();
        let data = TrainData {
            train: &train_set,
            transform: TRAIN_SPEC,
            augment: false,
            suites: &suites,
        };
        let run = train(&model, &mut params, &data, &quick(1)).unwrap();
        assert!(run.history[0].train_loss.is_finite());
        assert_eq!(run.history[0].suites.as_ref().unwrap().len(), 5);
    }
}

#[test]
fn zero_projection_predicts_class_zero_everywhere() {
    let (model, mut params) = Model::new::<f32>(&small(), 1, 4, 5).unwrap();
    for name in ["projcaps.weight", "projcaps.bias"] {
        let shape = params.get(params.find(name).unwrap()).shape().to_vec();
        params.assign(name, Array::zeros(shape)).unwrap();
    }
    let test = samples(10, 10);
    let suites = build_test_suites(&test, 1);
    let acc = evaluate(&model, &params, &suites, 4).unwrap();
    let zero_share = test.iter().filter(|s| s.label == 0).count() as f64 / test.len() as f64;
    assert_eq!(acc, vec![zero_share; 5]);
    assert_eq!(predict(&model, &params, &test, 3).unwrap(), vec![0; 10]);
}

#[test]
fn perfect_scores_give_full_accuracy() {
    let test = samples(8, 4);
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let scores = Array::from_fn([8, 4], |i| if i % 4 == labels[i / 4] { 1.0 } else { 0.0 });
    assert_eq!(accuracy(&predictions::<f64>(&scores), &test), 1.0);
}

#[test]
fn loss_gradient_through_a_tiny_model_matches_finite_differences() {
    let (model, params) = Model::new::<f64>(&small(), 1, 3, 4).unwrap();
    let x = Array::from_fn([2, 1, 6, 6], |i| ((i * 37) % 17) as f64 / 16.0);
    let labels = [2, 0];
    for name in ["precaps.stem.weight", "caps1.predictor.weight", "projcaps.weight"] {
        let id = params.find(name).unwrap();
        let report = grad_check(
            |t, v| {
                let p = params.bind(t).substitute(id, v);
                let xv = t.leaf(x.clone());
                let out = model.forward(t, &p, xv)?;
                cross_entropy(t, out.scores, &labels)
            },
            params.get(id),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}
