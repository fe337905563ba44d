//! Cross-module invariants checked on built models and random graphs.

use std::collections::BTreeMap;

use eseg::gradcheck::random_graph;
use eseg::graph::{count_flops, count_params, forward, infer_shapes, receptive_field};
use eseg::io::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use eseg::model::{build_model, zoo_names, ModelConfig, INPUT, LOGITS};
use eseg::tensor::BnMode;
use eseg::{Params, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zoo_configs_roundtrip_and_build() {
    for name in zoo_names() {
        let cfg = ModelConfig::zoo(name).unwrap();
        assert_eq!(ModelConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        let g = build_model(&cfg).unwrap();
        let out = infer_shapes(&g, cfg.input_shape(1, 512, 1024)).unwrap();
        let logits = out[g.output(LOGITS).unwrap().0];
        assert_eq!(logits, Shape::new(1, cfg.num_classes, 512, 1024), "{name}");
    }
}

#[test]
fn higher_levels_see_more_of_the_image() {
    let g = build_model(&ModelConfig::zoo("eseg-s").unwrap()).unwrap();
    let p5 = receptive_field(&g, g.mark("pyramid/P5").or_else(|_| g.mark("backbone/P5")).unwrap()).unwrap();
    let p9 = receptive_field(&g, g.mark("pyramid/P9").unwrap()).unwrap();
    assert!(p9.rf > p5.rf && p9.jump == 16 * p5.jump, "{p5:?} {p9:?}");
}

#[test]
fn costs_scale_with_input_area() {
    let cfg = ModelConfig::zoo("eseg-lite-s").unwrap();
    let g = build_model(&cfg).unwrap();
    let small = count_flops(&g, cfg.input_shape(1, 512, 1024)).unwrap();
    let big = count_flops(&g, cfg.input_shape(1, 1024, 2048)).unwrap();
    let ratio = big as f64 / small as f64;
    assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    assert!(count_flops(&g, cfg.input_shape(1, 500, 1024)).is_err());
    assert!(count_params(&g).unwrap() > 0);
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let cfg = ModelConfig::desk_toy(3);
    let g = build_model(&cfg).unwrap();
    let params = Params::<f32>::init(&g, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eseg");
    let ckpt = Checkpoint {
        state: TrainState {
            step: 3,
            lr: 0.01,
            ema_decay: 0.99,
            seed: 4,
        },
        model: Some(cfg.clone()),
        params: params.clone(),
        ema: None,
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back, ckpt);
    assert!(load_checkpoint::<f64>(&path).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 64, 64), |_| rng.random_range(-1.0..1.0));
    let ins = BTreeMap::from([(INPUT.to_string(), x)]);
    let g2 = build_model(&back.model.unwrap()).unwrap();
    let a = forward(&g, &params, &ins, BnMode::Infer).unwrap();
    let b = forward(&g2, &back.params, &ins, BnMode::Infer).unwrap();
    assert_eq!(a.output(&g, LOGITS).unwrap(), b.output(&g2, LOGITS).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_inference_agrees_with_execution(seed in 0u64..10_000) {
        let (g, _, shape, mode) = random_graph(seed, 20).unwrap();
        let params = Params::<f64>::init(&g, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let trace = forward(&g, &params, &BTreeMap::from([("x".to_string(), x)]), mode).unwrap();
        let shapes = infer_shapes(&g, shape).unwrap();
        for (i, s) in shapes.iter().enumerate() {
            prop_assert_eq!(trace.values[i].shape(), *s);
        }
    }

    #[test]
    fn forward_is_referentially_transparent(seed in 0u64..10_000) {
        let (g, out, shape, _) = random_graph(seed, 20).unwrap();
        let params = Params::<f64>::init(&g, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let ins = BTreeMap::from([("x".to_string(), x)]);
        let a = forward(&g, &params, &ins, BnMode::Infer).unwrap();
        let b = forward(&g, &params, &ins, BnMode::Infer).unwrap();
        prop_assert_eq!(a.value(out), b.value(out));
    }

    #[test]
    fn graph_json_roundtrip(seed in 0u64..10_000) {
        let (g, _, _, _) = random_graph(seed, 20).unwrap();
        prop_assert_eq!(eseg::Graph::from_json(&g.to_json().unwrap()).unwrap(), g);
    }
}
