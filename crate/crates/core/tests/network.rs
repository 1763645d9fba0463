use facevis::camera::{landmark_visibility, project_landmarks, ParamVector};
use facevis::dataset::{generate_synthetic_dataset, DatasetConfig, Sample};
use facevis::gradcheck::{check_network, tiny_network, TinyNetwork};
use facevis::loss::build_weights;
use facevis::model::{generate_synthetic_model, ShapeModel, SynthConfig};
use facevis::nn::tensor::avg_pool2;
use facevis::nn::train::{block_losses, image_batch, initial_params};
use facevis::nn::{
    load_checkpoint, save_checkpoint, train_toy, BackwardOptions, BlockConfig, BlockState,
    Checkpoint, ForwardMode, InputVariant, Network, NetworkOutput, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ShapeModel {
    generate_synthetic_model(&SynthConfig {
        seed: 4,
        vertices: 120,
        n_id: 3,
        n_exp: 2,
    })
    .unwrap()
}

fn small_config(model: &ShapeModel, n_blocks: usize) -> BlockConfig {
    let mut cfg = BlockConfig::new(n_blocks, model.param_dim());
    cfg.vis_size = 8;
    cfg.fc_sizes[0] = 24;
    cfg.dropout = 0.0;
    cfg
}

fn samples(model: &ShapeModel, count: usize, size: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic_dataset(
        model,
        &DatasetConfig {
            seed,
            count,
            image_size: size,
            ..Default::default()
        },
    )
    .unwrap()
}

fn run(net: &Network, model: &ShapeModel, data: &[Sample]) -> NetworkOutput {
    let refs: Vec<&Sample> = data.iter().collect();
    let images = image_batch(&refs).unwrap();
    let p0 = initial_params(model, data).unwrap();
    net.forward::<ChaCha8Rng>(model, &images, &p0, ForwardMode::Train(None))
        .unwrap()
}

#[test]
fn zero_final_layer_is_identity() {
    let m = small_model();
    let net = Network::new(small_config(&m, 3), &m, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
    let data = samples(&m, 3, 16, 0);
    let p0 = initial_params(&m, &data).unwrap();
    let out = run(&net, &m, &data);
    for block in &out.params {
        assert_eq!(block, &p0);
    }
}

#[test]
fn chained_blocks_reproduce_forward() {
    let m = small_model();
    let net = Network::new(small_config(&m, 3), &m, &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
    let data = samples(&m, 2, 16, 1);
    let refs: Vec<&Sample> = data.iter().collect();
    let images = image_batch(&refs).unwrap();
    let p0 = initial_params(&m, &data).unwrap();
    let out = net
        .forward::<ChaCha8Rng>(&m, &images, &p0, ForwardMode::Eval)
        .unwrap();
    let small = avg_pool2(&images);
    let mut state = BlockState {
        features: None,
        params: p0,
    };
    for b in 0..3 {
        let image = if b == 0 { &images } else { &small };
        state = net.visualization_block_forward(b, &m, image, &state).unwrap();
        assert_eq!(state.params, out.params[b]);
        let f = state.features.as_ref().unwrap();
        assert_eq!((f.h, f.w), (8, 8));
    }
}

#[test]
fn update_is_additive_in_the_output_scale() {
    let m = small_model();
    let mut net = Network::new(small_config(&m, 1), &m, &mut ChaCha8Rng::seed_from_u64(2), false).unwrap();
    let data = samples(&m, 2, 16, 2);
    let p0 = initial_params(&m, &data).unwrap();
    let base = run(&net, &m, &data);
    net.output_scale.iter_mut().for_each(|s| *s *= 2.0);
    let doubled = run(&net, &m, &data);
    for (s, p0s) in p0.iter().enumerate() {
        let d1 = base.params[0][s].diff(p0s).unwrap();
        let d2 = doubled.params[0][s].diff(p0s).unwrap();
        assert!(d1.iter().any(|v| *v != 0.0));
        for (a, b) in d1.iter().zip(&d2) {
            assert!((b - 2.0 * a).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
    net.output_scale.iter_mut().for_each(|s| *s = 0.0);
    assert_eq!(run(&net, &m, &data).params[0], p0);
}

#[test]
fn image_visualization_variant_has_fewer_channels() {
    let m = small_model();
    let build = |variant| {
        let mut cfg = small_config(&m, 2);
        cfg.variant = variant;
        Network::new(cfg, &m, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap()
    };
    let c_in = |n: &Network| n.blocks[1].convs[0].c_in;
    let (ifv, fv, iv) = (build(InputVariant::Ifv), build(InputVariant::Fv), build(InputVariant::Iv));
    assert!(c_in(&iv) < c_in(&ifv));
    assert!(c_in(&fv) < c_in(&ifv));
    assert_eq!(c_in(&iv), 2);
    assert_eq!(ifv.blocks[0].convs[0].c_in, 2);
    let data = samples(&m, 2, 16, 3);
    for net in [ifv, fv, iv] {
        assert_eq!(run(&net, &m, &data).params.len(), 2);
    }
}

#[test]
fn forward_is_deterministic() {
    let m = small_model();
    let mut cfg = small_config(&m, 2);
    let data = samples(&m, 3, 16, 4);
    let net = Network::new(cfg.clone(), &m, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();
    let a = run(&net, &m, &data);
    let b = run(&net, &m, &data);
    assert_eq!(a.params, b.params);
    assert_eq!(a.visualizations, b.visualizations);

    cfg.dropout = 0.3;
    let net = Network::new(cfg, &m, &mut ChaCha8Rng::seed_from_u64(5), false).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let images = image_batch(&refs).unwrap();
    let p0 = initial_params(&m, &data).unwrap();
    let with_seed = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.forward(&m, &images, &p0, ForwardMode::Train(Some(&mut rng)))
            .unwrap()
            .params
    };
    assert_eq!(with_seed(9), with_seed(9));
    assert_ne!(with_seed(9), with_seed(10));
}

#[test]
fn single_block_network() {
    let m = small_model();
    let net = Network::new(small_config(&m, 1), &m, &mut ChaCha8Rng::seed_from_u64(6), false).unwrap();
    let data = samples(&m, 2, 16, 6);
    let out = run(&net, &m, &data);
    assert_eq!(out.params.len(), 1);
    assert_eq!(out.visualizations.len(), 1);
    assert_eq!(out.visualizations[0][0].len(), 16 * 16);
}

fn tiny_gradients(tiny: &TinyNetwork, opts: BackwardOptions) -> (Vec<f64>, Vec<usize>) {
    let out = run(&tiny.network, &tiny.model, &tiny.samples);
    let refs: Vec<&Sample> = tiny.samples.iter().collect();
    let truth: Vec<ParamVector> = tiny.samples.iter().map(|s| s.params.clone()).collect();
    let w = build_weights(&tiny.model, &truth).unwrap();
    let (_, grads) = block_losses(&tiny.network, &tiny.model, &out.params, &refs, &w).unwrap();
    let g = tiny.network.backward(&tiny.model, &out.cache, &grads, opts).unwrap();
    (g, tiny.network.block_param_counts())
}

#[test]
fn detaching_the_parameter_path_changes_first_block_gradient() {
    let tiny = tiny_network(3).unwrap();
    let (full, counts) = tiny_gradients(&tiny, BackwardOptions::default());
    let (cut, _) = tiny_gradients(
        &tiny,
        BackwardOptions {
            detach_param_path: true,
            ..Default::default()
        },
    );
    let diff: f64 = full[..counts[0]].iter().zip(&cut).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
    assert_eq!(full[counts[0]..], cut[counts[0]..]);
}

#[test]
fn rasterizer_path_contributes_to_first_block() {
    let tiny = tiny_network(4).unwrap();
    let (full, counts) = tiny_gradients(&tiny, BackwardOptions::default());
    let (no_vis, _) = tiny_gradients(
        &tiny,
        BackwardOptions {
            through_visualization: false,
            ..Default::default()
        },
    );
    let diff: f64 = full[..counts[0]].iter().zip(&no_vis).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn block_gradients_add_and_scale_with_loss_weights() {
    let tiny = tiny_network(5).unwrap();
    let net = &tiny.network;
    let out = run(net, &tiny.model, &tiny.samples);
    let refs: Vec<&Sample> = tiny.samples.iter().collect();
    let truth: Vec<ParamVector> = tiny.samples.iter().map(|s| s.params.clone()).collect();
    let w = build_weights(&tiny.model, &truth).unwrap();
    let (_, grads) = block_losses(net, &tiny.model, &out.params, &refs, &w).unwrap();
    let only = |b: usize, factor: f64| {
        let g: Vec<Vec<Vec<f64>>> = grads
            .iter()
            .enumerate()
            .map(|(i, gb)| {
                gb.iter()
                    .map(|gs| gs.iter().map(|v| if i == b { v * factor } else { 0.0 }).collect())
                    .collect()
            })
            .collect();
        net.backward(&tiny.model, &out.cache, &g, BackwardOptions::default()).unwrap()
    };
    let full = net.backward(&tiny.model, &out.cache, &grads, BackwardOptions::default()).unwrap();
    let (g0, g1) = (only(0, 1.0), only(1, 1.0));
    let scale = full.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..full.len() {
        assert!((full[i] - g0[i] - g1[i]).abs() <= 1e-10 * scale);
    }
    let g1x3 = only(1, 3.0);
    for i in 0..full.len() {
        assert!((g1x3[i] - 3.0 * g1[i]).abs() <= 1e-10 * scale);
    }

    let mut heavier = net.clone();
    heavier.config.loss_schedule[1].weight *= 3.0;
    let (_, grads3) = block_losses(&heavier, &tiny.model, &out.params, &refs, &w).unwrap();
    for (a, b) in grads[1].iter().flatten().zip(grads3[1].iter().flatten()) {
        assert!((b - 3.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert_eq!(grads[0], grads3[0]);
}

#[test]
fn end_to_end_gradient_check() {
    let report = check_network(50, 1).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn checkpoint_round_trip() {
    let m = small_model();
    let net = Network::new(small_config(&m, 2), &m, &mut ChaCha8Rng::seed_from_u64(7), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_checkpoint(&path, &Checkpoint::new(net.clone(), None)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.network, net);
    let data = samples(&m, 2, 16, 7);
    assert_eq!(run(&back.network, &m, &data).params, run(&net, &m, &data).params);

    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, text).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn dataset_samples_are_consistent() {
    let m = small_model();
    let cfg = DatasetConfig {
        seed: 3,
        count: 10,
        image_size: 32,
        ..Default::default()
    };
    let data = generate_synthetic_dataset(&m, &cfg).unwrap();
    assert_eq!(data.len(), 10);
    for s in &data {
        assert_eq!(project_landmarks(&m, &s.params).unwrap().points, s.landmarks.points);
        assert_eq!(landmark_visibility(&m, &s.params).unwrap(), s.landmarks.visibility);
    }
    assert_eq!(data, generate_synthetic_dataset(&m, &cfg).unwrap());
}

#[test]
fn training_trajectory_is_reproducible() {
    let m = small_model();
    let data = samples(&m, 24, 16, 8);
    let (train, val) = data.split_at(16);
    let hyper = TrainConfig {
        epochs: 2,
        seed: 11,
        ..Default::default()
    };
    let mut cfg = small_config(&m, 2);
    cfg.dropout = 0.1;
    let a = train_toy(&m, train, val, cfg.clone(), &hyper).unwrap();
    let b = train_toy(&m, train, val, cfg, &hyper).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.network, b.network);
    assert!(a.history.iter().all(|h| h.val_nme.is_finite()));
}
