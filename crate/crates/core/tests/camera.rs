use facevis::camera::{
    landmark_visibility, project_all, project_landmarks, projection_jacobian, CameraMatrix,
    ParamVector,
};
use facevis::gradcheck::random_params;
use facevis::model::{generate_synthetic_model, ShapeModel, ShapeParams, SynthConfig};
use facevis::render::signed_frontability;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ShapeModel {
    generate_synthetic_model(&SynthConfig {
        seed: 5,
        vertices: 120,
        n_id: 3,
        n_exp: 2,
    })
    .unwrap()
}

fn random_vector(model: &ShapeModel, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..model.param_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    ParamVector::from_slice(model.n_id(), model.n_exp(), &v).unwrap()
}

#[test]
fn identity_camera_drops_z() {
    let m = model();
    let p = ParamVector::new(
        CameraMatrix::from_rows([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]),
        ShapeParams::zeros(m.n_id(), m.n_exp()),
    );
    let xy = project_all(&m, &p).unwrap();
    for q in 0..m.q() {
        assert_eq!(xy[(0, q)], m.mean_shape()[(0, q)]);
        assert_eq!(xy[(1, q)], m.mean_shape()[(1, q)]);
    }
}

#[test]
fn doubling_camera_doubles_projection() {
    let m = model();
    let p = random_vector(&m, 1);
    let mut p2 = p.clone();
    p2.camera = p.camera.scaled(2.0);
    let a = project_all(&m, &p).unwrap();
    let b = project_all(&m, &p2).unwrap();
    assert!((b - a * 2.0).abs().max() <= 1e-12);
}

#[test]
fn matches_per_vertex_oracle() {
    let m = model();
    for seed in 0..5 {
        let p = random_vector(&m, seed);
        let xy = project_all(&m, &p).unwrap();
        let c = p.camera.as_array();
        for q in 0..m.q() {
            let mut s = [0.0; 3];
            for (r, sr) in s.iter_mut().enumerate() {
                *sr = m.mean_shape()[(r, q)];
                for j in 0..m.n_shape() {
                    *sr += p.shape.get(j) * m.basis(j)[(r, q)];
                }
            }
            let x = c[0] * s[0] + c[1] * s[1] + c[2] * s[2] + c[3];
            let y = c[4] * s[0] + c[5] * s[1] + c[6] * s[2] + c[7];
            assert!((xy[(0, q)] - x).abs() <= 1e-12);
            assert!((xy[(1, q)] - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn landmarks_are_projected_landmark_vertices() {
    let m = model();
    let p = random_vector(&m, 2);
    let xy = project_all(&m, &p).unwrap();
    let lm = project_landmarks(&m, &p).unwrap();
    for (i, &b) in m.landmark_indices().iter().enumerate() {
        assert_eq!(lm.points[i], [xy[(0, b)], xy[(1, b)]]);
    }
}

#[test]
fn zero_camera_maps_everything_to_origin() {
    let m = model();
    let mut p = random_vector(&m, 3);
    p.camera = CameraMatrix::new([0.0; 8]);
    assert!(project_all(&m, &p).unwrap().iter().all(|v| *v == 0.0));
    assert!(landmark_visibility(&m, &p).is_err());
}

#[test]
fn jacobian_structure() {
    let m = model();
    let p = random_vector(&m, 4);
    let jac = projection_jacobian(&m, &p).unwrap();
    for i in 0..m.q() {
        assert_eq!(jac.dx(i)[7], 0.0);
        assert_eq!(jac.dy(i)[3], 0.0);
        assert_eq!(jac.dx(i)[3], 1.0);
        assert_eq!(jac.dy(i)[7], 1.0);
    }
    let mut zero_row = p.clone();
    for k in 0..3 {
        zero_row.camera.as_mut_array()[k] = 0.0;
    }
    let jac = projection_jacobian(&m, &zero_row).unwrap();
    for i in 0..m.q() {
        assert!(jac.dx(i)[8..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let m = model();
    let p = random_vector(&m, 6);
    let jac = projection_jacobian(&m, &p).unwrap();
    let h = 1e-5;
    for k in 0..m.param_dim() {
        let mut plus = p.clone();
        *plus.get_mut(k) += h;
        let mut minus = p.clone();
        *minus.get_mut(k) -= h;
        let d = (project_all(&m, &plus).unwrap() - project_all(&m, &minus).unwrap()) / (2.0 * h);
        for i in 0..m.q() {
            assert!((jac.dx(i)[k] - d[(0, i)]).abs() <= 1e-7);
            assert!((jac.dy(i)[k] - d[(1, i)]).abs() <= 1e-7);
        }
    }
}

#[test]
fn negating_first_row_flips_frontability() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_params(&m, 64, &mut rng);
    let mut flipped = p.camera;
    for k in 0..3 {
        flipped.as_mut_array()[k] = -flipped.as_array()[k];
    }
    let a = signed_frontability(&m, &p.camera).unwrap();
    let b = signed_frontability(&m, &flipped).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x + y).abs() <= 1e-12);
    }
    let before = landmark_visibility(&m, &p).unwrap();
    let after = landmark_visibility(&m, &ParamVector::new(flipped, p.shape.clone())).unwrap();
    for (i, &b) in m.landmark_indices().iter().enumerate() {
        if a[b] != 0.0 {
            assert_ne!(before[i], after[i]);
        }
    }
}

#[test]
fn frontal_pose_shows_front_landmarks() {
    let m = model();
    let p = ParamVector::new(
        CameraMatrix::frontal(10.0, 32.0, 32.0),
        ShapeParams::zeros(m.n_id(), m.n_exp()),
    );
    let vis = landmark_visibility(&m, &p).unwrap();
    for (i, &b) in m.landmark_indices().iter().enumerate() {
        assert_eq!(vis[i], m.mean_normals()[(2, b)] > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_in_camera(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        seed in 0u64..1000,
    ) {
        let m = model();
        let base = random_vector(&m, seed);
        let with = |c: &[f64]| {
            let mut p = base.clone();
            p.camera = CameraMatrix::new(c.try_into().unwrap());
            project_all(&m, &p).unwrap()
        };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        prop_assert!((with(&sum) - with(&a) - with(&b)).abs().max() <= 1e-10);
    }

    #[test]
    fn affine_in_shape(
        d in prop::collection::vec(-2.0f64..2.0, 5),
        t in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let m = model();
        let base = random_vector(&m, seed);
        let at = |s: f64| {
            let mut p = base.clone();
            for (j, dj) in d.iter().enumerate() {
                *p.shape.get_mut(j) += s * dj;
            }
            project_all(&m, &p).unwrap()
        };
        let (p0, p1, pt) = (at(0.0), at(1.0), at(t));
        prop_assert!((pt - (&p0 + (p1 - &p0) * t)).abs().max() <= 1e-9);
    }
}
