use facevis::bbox::BBox;
use facevis::camera::{project_landmarks, CameraMatrix, LandmarkSet, ParamVector};
use facevis::gradcheck::random_params;
use facevis::loss::{build_weights, landmark_loss, mape, nme, param_loss, LossWeights};
use facevis::model::{generate_synthetic_model, ShapeModel, ShapeParams, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ShapeModel {
    generate_synthetic_model(&SynthConfig {
        seed: 8,
        vertices: 150,
        n_id: 3,
        n_exp: 2,
    })
    .unwrap()
}

fn unit_stddev_model() -> ShapeModel {
    let mut parts = model().to_parts();
    parts.basis_stddev_id.iter_mut().for_each(|s| *s = 1.0);
    parts.basis_stddev_exp.iter_mut().for_each(|s| *s = 1.0);
    ShapeModel::new(parts).unwrap()
}

#[test]
fn ratio_from_direct_arithmetic() {
    let m = unit_stddev_model();
    let cams = [
        CameraMatrix::new([2.0, -2.0, 2.0, 4.0, -2.0, 2.0, 2.0, -4.0]),
        CameraMatrix::new([-2.0, 2.0, -2.0, -4.0, 2.0, -2.0, 2.0, 4.0]),
    ];
    let training: Vec<ParamVector> = cams
        .iter()
        .map(|c| ParamVector::new(*c, ShapeParams::zeros(m.n_id(), m.n_exp())))
        .collect();
    let w = build_weights(&m, &training).unwrap();
    assert!((w.ratio - 0.5).abs() <= 1e-15);
    for k in [0, 1, 2, 4, 5, 6] {
        assert!((w.weights[k] - 2.0).abs() <= 1e-15);
    }
    assert_eq!((w.weights[3], w.weights[7]), (1.0, 1.0));
    assert!(w.weights[8..].iter().all(|v| *v == 1.0));
}

#[test]
fn synthetic_weights_positive_and_errors() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let training: Vec<_> = (0..20).map(|_| random_params(&m, 64, &mut rng)).collect();
    let w = build_weights(&m, &training).unwrap();
    assert_eq!(w.weights.len(), m.param_dim());
    assert!(w.weights.iter().all(|v| v.is_finite() && *v > 0.0));
    for (j, sd) in m.basis_stddev().into_iter().enumerate() {
        assert!((w.weights[8 + j] - 1.0 / sd).abs() <= 1e-12);
    }
    assert!(build_weights(&m, &[]).is_err());
    let mut no_shift = training[0].clone();
    no_shift.camera.as_mut_array()[3] = 0.0;
    no_shift.camera.as_mut_array()[7] = 0.0;
    assert!(build_weights(&m, &[no_shift]).is_err());
}

#[test]
fn param_loss_trivial_cases() {
    let w = LossWeights::uniform(4);
    let (l, g) = param_loss(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &w).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
    let (l, g) = param_loss(&[0.0, 1.0, 0.0, 0.0], &[0.0; 4], &w).unwrap();
    assert_eq!(l, 1.0);
    assert_eq!(g, vec![0.0, 2.0, 0.0, 0.0]);
    assert!(param_loss(&[0.0; 3], &[0.0; 4], &w).is_err());
}

#[test]
fn param_loss_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 13;
    let w = LossWeights {
        weights: (0..n).map(|_| rng.gen_range(0.1..5.0)).collect(),
        ratio: 1.0,
    };
    let dp: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (_, g) = param_loss(&dp, &t, &w).unwrap();
    let h = 1e-4;
    for k in 0..n {
        let mut a = dp.clone();
        a[k] += h;
        let mut b = dp.clone();
        b[k] -= h;
        let fd = (param_loss(&a, &t, &w).unwrap().0 - param_loss(&b, &t, &w).unwrap().0) / (2.0 * h);
        assert!((g[k] - fd).abs() <= 1e-8);
    }
}

fn landmark_setup(seed: u64) -> (ShapeModel, ParamVector, Vec<f64>, LandmarkSet) {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(&m, 64, &mut rng);
    let dp: Vec<f64> = (0..m.param_dim())
        .map(|k| rng.gen_range(-0.05..0.05) * if k == 3 || k == 7 { 20.0 } else { 1.0 })
        .collect();
    let target = project_landmarks(&m, &random_params(&m, 64, &mut rng)).unwrap();
    (m, p, dp, target)
}

#[test]
fn landmark_loss_vanishes_at_target() {
    let (m, p, dp, _) = landmark_setup(2);
    let exact = project_landmarks(&m, &p.add(&dp).unwrap()).unwrap();
    let (l, g) = landmark_loss(&m, &p, &dp, &exact).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn landmark_loss_gradient_matches_differences() {
    for seed in 0..5 {
        let (m, p, dp, target) = landmark_setup(seed);
        let (_, g) = landmark_loss(&m, &p, &dp, &target).unwrap();
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..dp.len() {
            let h = 1e-5 * dp[k].abs().max(1.0);
            let mut a = dp.clone();
            a[k] += h;
            let mut b = dp.clone();
            b[k] -= h;
            let fd = (landmark_loss(&m, &p, &a, &target).unwrap().0
                - landmark_loss(&m, &p, &b, &target).unwrap().0)
                / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6 * scale);
            assert!(rel <= 1e-6, "seed {seed} k {k}: {} vs {fd}", g[k]);
        }
    }
}

#[test]
fn landmark_loss_is_a_sum_over_landmarks() {
    let (m, p, dp, target) = landmark_setup(3);
    let (full, _) = landmark_loss(&m, &p, &dp, &target).unwrap();
    let pred = project_landmarks(&m, &p.add(&dp).unwrap()).unwrap();
    let mut masked = target.clone();
    let i = 2;
    masked.points[i] = pred.points[i];
    let r2 = (pred.points[i][0] - target.points[i][0]).powi(2)
        + (pred.points[i][1] - target.points[i][1]).powi(2);
    let (partial, _) = landmark_loss(&m, &p, &dp, &masked).unwrap();
    assert!((full - partial - r2).abs() <= 1e-9 * full);
}

#[test]
fn metric_examples() {
    let truth = LandmarkSet::all_visible(vec![[10.0, 10.0], [20.0, 20.0]]);
    assert_eq!(nme(&truth, &truth, &BBox::new(0.0, 0.0, 100.0, 100.0)).unwrap(), 0.0);
    assert_eq!(mape(&truth, &truth).unwrap(), 0.0);

    let one = LandmarkSet::new(vec![[10.0, 10.0], [0.0, 0.0]], vec![true, false]).unwrap();
    let off = LandmarkSet::all_visible(vec![[15.0, 10.0], [50.0, 50.0]]);
    assert!((nme(&off, &one, &BBox::new(0.0, 0.0, 100.0, 100.0)).unwrap() - 5.0).abs() <= 1e-12);
    let off2 = LandmarkSet::all_visible(vec![[15.0, 10.0], [-80.0, 3.0]]);
    assert_eq!(
        nme(&off, &one, &BBox::new(0.0, 0.0, 100.0, 100.0)).unwrap(),
        nme(&off2, &one, &BBox::new(0.0, 0.0, 100.0, 100.0)).unwrap()
    );
    let single = LandmarkSet::all_visible(vec![[0.0, 0.0]]);
    let moved = LandmarkSet::all_visible(vec![[3.0, 4.0]]);
    assert_eq!(mape(&moved, &single).unwrap(), 5.0);

    let hidden = LandmarkSet::new(vec![[0.0, 0.0]], vec![false]).unwrap();
    assert!(mape(&moved, &hidden).is_err());
    assert!(nme(&moved, &hidden, &BBox::new(0.0, 0.0, 1.0, 1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_loss_nonnegative(
        e in prop::collection::vec(-5.0f64..5.0, 10),
        w in prop::collection::vec(0.01f64..10.0, 10),
    ) {
        let weights = LossWeights { weights: w, ratio: 1.0 };
        let (l, _) = param_loss(&e, &[0.0; 10], &weights).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, e.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nme_scale_invariant_and_mape_relation(
        pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0, -3.0f64..3.0), 1..20),
        w in 10.0f64..200.0,
        h in 10.0f64..200.0,
        s in 0.1f64..10.0,
    ) {
        let truth = LandmarkSet::all_visible(pts.iter().map(|p| [p.0, p.1]).collect());
        let est = LandmarkSet::all_visible(pts.iter().map(|p| [p.0 + p.2, p.1 + p.3]).collect());
        let bbox = BBox::new(-5.0, 3.0, w, h);
        let base = nme(&est, &truth, &bbox).unwrap();
        let scale = |l: &LandmarkSet| LandmarkSet::all_visible(l.points.iter().map(|p| [p[0] * s, p[1] * s]).collect());
        let scaled = nme(&scale(&est), &scale(&truth), &BBox::new(-5.0 * s, 3.0 * s, w * s, h * s)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        let m = mape(&est, &truth).unwrap();
        prop_assert!((m - base * (w * h).sqrt() / 100.0).abs() <= 1e-9 * m.max(1.0));
    }
}
