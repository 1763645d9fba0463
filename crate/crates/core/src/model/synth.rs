use nalgebra::{Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelParts, ShapeModel, DEFAULT_SIGMA_N_FRACTION};
use crate::error::{Error, Result};

/// Settings for [`generate_synthetic_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Minimum vertex count; the grid is rounded up.
    pub vertices: usize,
    pub n_id: usize,
    pub n_exp: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vertices: 500,
            n_id: 8,
            n_exp: 4,
        }
    }
}

// Ellipsoid half-axes (x right, y down, z toward the camera).
const HALF_WIDTH: f64 = 1.0;
const HALF_HEIGHT: f64 = 1.3;
const DEPTH: f64 = 0.9;
const LON_MAX: f64 = 75.0 * std::f64::consts::PI / 180.0;
const LAT_MAX: f64 = 65.0 * std::f64::consts::PI / 180.0;

const NOSE_HEIGHT: f64 = 0.35;
const NOSE_WIDTH: f64 = 0.18;
const NOSE_Y: f64 = 0.1;

const EYE_DEPTH: f64 = 0.08;
const EYE_WIDTH: f64 = 0.12;
const EYE_X: f64 = 0.38;
const EYE_Y: f64 = -0.25;

/// Largest per-vertex displacement of any basis, in model units.
const BASIS_PEAK: f64 = 0.1;

/// Landmark anchor points in the frontal (x, y) plane. The first five are
/// the five-point mask centres: left eye, right eye, nose tip (resolved to
/// the actual tip), left and right mouth corner.
const LANDMARK_ANCHORS: &[(f64, f64)] = &[
    (-EYE_X, EYE_Y),
    (EYE_X, EYE_Y),
    (f64::NAN, f64::NAN), // nose tip
    (-0.3, 0.55),
    (0.3, 0.55),
    (-0.6, -0.5),
    (-0.15, -0.5),
    (0.15, -0.5),
    (0.6, -0.5),
    (-0.55, -0.25),
    (-0.2, -0.25),
    (0.2, -0.25),
    (0.55, -0.25),
    (-0.15, 0.3),
    (0.0, 0.32),
    (0.15, 0.3),
    (0.0, 0.48),
    (0.0, 0.65),
    (0.0, 1.0),
    (-0.93, -0.3),
    (0.93, -0.3),
    (-0.9, 0.2),
    (0.9, 0.2),
    (-0.75, 0.65),
    (0.75, 0.65),
    (-0.45, 0.9),
    (0.45, 0.9),
];

fn grid_size(target: usize) -> (usize, usize) {
    let mut cols = (target as f64).sqrt().ceil() as usize;
    if cols.is_multiple_of(2) {
        cols += 1;
    }
    let rows = target.div_ceil(cols);
    (rows, cols)
}

/// Builds a deterministic face-like model: an ellipsoidal front patch with
/// a protruding nose and shallow eye sockets, smooth random bases and a
/// grid triangulation. The mean shape is mirror-symmetric in x.
pub fn generate_synthetic_model(cfg: &SynthConfig) -> Result<ShapeModel> {
    if cfg.vertices < 50 {
        return Err(Error::InvalidInput(format!(
            "vertex count {} is below the minimum of 50",
            cfg.vertices
        )));
    }
    if cfg.n_id == 0 || cfg.n_exp == 0 {
        return Err(Error::InvalidInput(
            "at least one identity and one expression basis are required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (rows, cols) = grid_size(cfg.vertices);
    let q = rows * cols;

    let mut mean = Matrix3xX::<f64>::zeros(q);
    for r in 0..rows {
        let lat = -LAT_MAX + 2.0 * LAT_MAX * r as f64 / (rows - 1) as f64;
        for c in 0..cols {
            let lon = -LON_MAX + 2.0 * LON_MAX * c as f64 / (cols - 1) as f64;
            let x = HALF_WIDTH * lon.sin() * lat.cos();
            let y = HALF_HEIGHT * lat.sin();
            let mut z = DEPTH * lon.cos() * lat.cos();
            z += NOSE_HEIGHT * (-(x * x + (y - NOSE_Y).powi(2)) / (2.0 * NOSE_WIDTH.powi(2))).exp();
            for ex in [-EYE_X, EYE_X] {
                z -= EYE_DEPTH
                    * (-((x - ex).powi(2) + (y - EYE_Y).powi(2)) / (2.0 * EYE_WIDTH.powi(2))).exp();
            }
            mean.set_column(r * cols + c, &Vector3::new(x, y, z));
        }
    }

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let i00 = r * cols + c;
            let i01 = i00 + 1;
            let i10 = i00 + cols;
            let i11 = i10 + 1;
            triangles.push([i00, i01, i11]);
            triangles.push([i00, i11, i10]);
        }
    }

    // Ties resolve to the lowest index; with an odd column count the tip
    // sits on the centre column.
    let nose_tip_index = mean
        .column_iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v.z > best.1 {
                (i, v.z)
            } else {
                best
            }
        })
        .0;

    let mut used = vec![false; q];
    used[nose_tip_index] = true;
    let mut landmark_indices = Vec::with_capacity(LANDMARK_ANCHORS.len());
    for &(ax, ay) in LANDMARK_ANCHORS {
        if ax.is_nan() {
            landmark_indices.push(nose_tip_index);
            continue;
        }
        let idx = nearest_unused(&mean, &used, ax, ay);
        used[idx] = true;
        landmark_indices.push(idx);
    }

    let inner: Vec<usize> = (0..q)
        .filter(|&i| mean[(0, i)].abs() < 0.6 && mean[(1, i)].abs() < 0.8)
        .collect();
    let identity_bases = (0..cfg.n_id)
        .map(|_| random_basis(&mut rng, &mean, None, 3, (0.3, 0.8)))
        .collect();
    let expression_bases = (0..cfg.n_exp)
        .map(|_| random_basis(&mut rng, &mean, Some(&inner), 2, (0.15, 0.35)))
        .collect();
    let basis_stddev_id = (0..cfg.n_id).map(|k| 1.0 / (1.0 + k as f64).sqrt()).collect();
    let basis_stddev_exp = (0..cfg.n_exp)
        .map(|k| 0.8 / (1.0 + k as f64).sqrt())
        .collect();

    let sigma_n = DEFAULT_SIGMA_N_FRACTION * super::bounding_sphere_radius(&mean);
    ShapeModel::new(ModelParts {
        mean_shape: mean,
        identity_bases,
        expression_bases,
        basis_stddev_id,
        basis_stddev_exp,
        triangles,
        landmark_indices,
        nose_tip_index,
        sigma_n: Some(sigma_n),
    })
}

fn nearest_unused(mean: &Matrix3xX<f64>, used: &[bool], x: f64, y: f64) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, v) in mean.column_iter().enumerate() {
        if used[i] {
            continue;
        }
        let d = (v.x - x).powi(2) + (v.y - y).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Sum of a few Gaussian bumps with random 3D amplitudes, rescaled so the
/// largest vertex displacement equals `BASIS_PEAK`.
fn random_basis(
    rng: &mut ChaCha8Rng,
    mean: &Matrix3xX<f64>,
    centres: Option<&[usize]>,
    bumps: usize,
    radius: (f64, f64),
) -> Matrix3xX<f64> {
    let q = mean.ncols();
    let mut basis = Matrix3xX::<f64>::zeros(q);
    for _ in 0..bumps {
        let centre = match centres {
            Some(pool) if !pool.is_empty() => pool[rng.gen_range(0..pool.len())],
            _ => rng.gen_range(0..q),
        };
        let c: Vector3<f64> = mean.column(centre).into();
        let amp = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let rho: f64 = rng.gen_range(radius.0..radius.1);
        for (i, v) in mean.column_iter().enumerate() {
            let w = (-(v - c).norm_squared() / (2.0 * rho * rho)).exp();
            let mut col = basis.column_mut(i);
            col += amp * w;
        }
    }
    let peak = basis.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if peak > 0.0 {
        basis *= BASIS_PEAK / peak;
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rounds_up_with_odd_columns() {
        for target in [50, 60, 100, 500, 1000] {
            let (r, c) = grid_size(target);
            assert!(r * c >= target);
            assert_eq!(c % 2, 1);
        }
    }

    #[test]
    fn preconditions() {
        let bad = [
            SynthConfig {
                vertices: 49,
                ..Default::default()
            },
            SynthConfig {
                n_id: 0,
                ..Default::default()
            },
            SynthConfig {
                n_exp: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(generate_synthetic_model(&cfg).is_err());
        }
    }

    #[test]
    fn landmarks_include_nose_tip_and_are_distinct() {
        let m = generate_synthetic_model(&SynthConfig::default()).unwrap();
        assert_eq!(m.landmark_indices()[2], m.nose_tip_index());
        let mut sorted = m.landmark_indices().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), m.n_landmarks());
    }

    #[test]
    fn small_model_keeps_all_landmarks_distinct() {
        let m = generate_synthetic_model(&SynthConfig {
            vertices: 50,
            ..Default::default()
        })
        .unwrap();
        assert!(m.n_landmarks() >= 5);
        m.validate().unwrap();
    }
}
