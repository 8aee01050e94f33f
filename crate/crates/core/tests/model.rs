use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hssl::model::{load_state, save_state, Checkpoint, ModelConfig, OUTPUT_LAYER};
use hssl::{FeatureMapF32, FeatureMapF64, ModelStateF32, ModelStateF64};

fn random_input(batch: usize, size: usize, seed: u64) -> FeatureMapF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMapF32::from_vec(3, batch, size, size, (0..3 * batch * size * size).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn shapes_scale_with_input_size_and_width() {
    for (size, w) in [(32usize, 0.0625), (64, 0.125), (96, 0.25)] {
        let cfg = ModelConfig::scaled(size, w, 4, 2);
        let state = ModelStateF32::init(&cfg, 0).unwrap();
        let net = state.network().unwrap();
        let x = random_input(2, size, 1);
        let (pyr, _) = net.encode(&state.params, &x, false).unwrap();
        let widths = cfg.stage_widths();
        for (k, f) in [&pyr.f1, &pyr.f2, &pyr.f3, &pyr.f4].into_iter().enumerate() {
            assert_eq!(f.dims(), [widths[k], 2, size >> (k + 2), size >> (k + 2)], "stage {k} at S={size}");
        }
        let v = net.features(&state.params, &x).unwrap();
        assert_eq!((v.rows, v.cols), (2, (896.0 * w) as usize));
        let out = net.predict(&state.params, &x).unwrap();
        assert_eq!(out.dims(), [3, 2, size, size]);
    }
}

#[test]
fn rejects_sizes_not_divisible_by_32() {
    let state = ModelStateF32::init(&ModelConfig::micro(4, 2), 0).unwrap();
    let net = state.network().unwrap();
    assert!(net.predict(&state.params, &random_input(1, 48, 0)).is_err());
    assert!(ModelConfig::scaled(48, 0.25, 4, 2).validate().is_err());
}

#[test]
fn evaluation_forward_is_pure_and_input_sensitive() {
    let state = ModelStateF32::init(&ModelConfig::micro(4, 2), 3).unwrap();
    let net = state.network().unwrap();
    let x = random_input(2, 32, 4);
    let a = net.predict(&state.params, &x).unwrap();
    let b = net.predict(&state.params, &x).unwrap();
    assert_eq!(a, b);
    let doubled = FeatureMapF32::from_vec(3, 2, 32, 32, x.data.iter().map(|v| 2.0 * v).collect()).unwrap();
    let c = net.predict(&state.params, &doubled).unwrap();
    let diff: f32 = a.data.iter().zip(&c.data).map(|(p, q)| (p - q) * (p - q)).sum();
    assert!(diff > 0.0);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::micro(4, 2);
    assert_eq!(ModelStateF32::init(&cfg, 9).unwrap(), ModelStateF32::init(&cfg, 9).unwrap());
    assert_ne!(ModelStateF32::init(&cfg, 9).unwrap(), ModelStateF32::init(&cfg, 10).unwrap());
}

#[test]
fn double_precision_matches_single_precision() {
    let state = ModelStateF32::init(&ModelConfig::micro(4, 2), 0).unwrap();
    let wide: ModelStateF64 = state.cast();
    let x = random_input(2, 32, 5);
    let x64 = FeatureMapF64::from_vec(3, 2, 32, 32, x.data.iter().map(|&v| v as f64).collect()).unwrap();
    let a = state.network().unwrap().features(&state.params, &x).unwrap();
    let b = wide.network().unwrap().features(&wide.params, &x64).unwrap();
    for (p, q) in a.data.iter().zip(&b.data) {
        assert!((*p as f64 - q).abs() <= 1e-3 * q.abs().max(1.0), "{p} vs {q}");
    }
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let state = ModelStateF32::init(&ModelConfig::micro(4, 2), 0).unwrap();
    let ckpt = Checkpoint::new(state.clone(), 7, 3, "pretrain");
    let path = dir.path().join("a.ckpt");
    save_state(&path, &ckpt).unwrap();
    let back = load_state::<f32>(&path).unwrap();
    assert_eq!(back.state, state);
    assert_eq!((back.meta.seed, back.meta.epoch, back.meta.phase.as_str()), (7, 3, "pretrain"));
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());

    // wrong precision
    assert!(load_state::<f64>(&path).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_state::<f32>(&path).is_err());
    assert!(load_state::<f32>(dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn segmentation_head_replaces_only_the_output_layer() {
    let state = ModelStateF32::init(&ModelConfig::micro(4, 2), 0).unwrap();
    let seg = state.with_output_channels(2, 1).unwrap();
    assert_eq!(seg.config.out_channels, 2);
    let prefix = format!("{OUTPUT_LAYER}.");
    let mut head_tensors = 0;
    for id in seg.params.ids() {
        let name = &seg.params.spec(id).name;
        let src = state.params.layout().position(name).unwrap();
        if name.starts_with(&prefix) {
            head_tensors += 1;
        } else {
            assert_eq!(seg.params.get(id), state.params.get(src), "{name}");
        }
    }
    assert!(head_tensors > 0);
    let out = seg.network().unwrap().predict(&seg.params, &random_input(1, 32, 0)).unwrap();
    assert_eq!(out.dims(), [2, 1, 32, 32]);

    // a model with a different backbone cannot be transferred
    let other = ModelStateF32::init(&ModelConfig::scaled(32, 0.125, 4, 2), 0).unwrap();
    assert!(other.transfer_into(seg).is_err());
}
