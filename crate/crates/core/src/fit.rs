//! Recovering model parameters from labelled 2D landmarks.
//!
//! The projection is linear in the camera matrix for a fixed shape, and the
//! landmark positions are linear in the shape coefficients for a fixed
//! camera. The fitter alternates an exact least-squares solve for the
//! camera with a damped Gauss-Newton step on the shape coefficients,
//! accepted by backtracking line search.

use nalgebra::{DMatrix, DVector, Matrix3xX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::camera::{project_landmarks, CameraMatrix, LandmarkSet, ParamVector};
use crate::error::{check_dim, Error, Result};
use crate::loss::nme;
use crate::model::{ShapeModel, ShapeParams};

/// Fewest visible landmarks a fit accepts; the camera alone has eight
/// unknowns, four per image axis.
pub const MIN_VISIBLE_LANDMARKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Stop once an iteration lowers the loss by less than this.
    pub tol: f64,
    pub max_iters: usize,
    /// Weight of the optional `sum_j (p_j / sd_j)^2` prior; 0 disables it.
    pub tikhonov: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 500,
            tikhonov: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: ParamVector,
    /// Reprojection NME (percent) over the visible landmarks.
    pub nme: f64,
    pub loss: f64,
    pub iterations: usize,
    /// Loss after every accepted update, starting at the initialization.
    pub history: Vec<f64>,
}

/// Frontal start: the mean shape's x-extent spans 90% of the box width and
/// its centroid sits at the box centre. Shape coefficients are zero.
pub fn initialize_params(bbox: &BBox, model: &ShapeModel) -> Result<ParamVector> {
    if !bbox.is_valid() {
        return Err(Error::InvalidInput(format!("degenerate bounding box {bbox:?}")));
    }
    let mean = model.mean_shape();
    let xs = mean.row(0);
    let extent = xs.max() - xs.min();
    if !(extent > 0.0) {
        return Err(Error::InvalidInput("mean shape has zero width".into()));
    }
    let scale = 0.9 * bbox.w / extent;
    let centroid = mean.column_mean();
    let [cx, cy] = bbox.center();
    Ok(ParamVector::new(
        CameraMatrix::frontal(scale, cx - scale * centroid.x, cy - scale * centroid.y),
        ShapeParams::zeros(model.n_id(), model.n_exp()),
    ))
}

/// Visible-landmark geometry for one fit.
struct Problem<'a> {
    model: &'a ShapeModel,
    /// Model vertex of each visible landmark.
    vertices: Vec<usize>,
    targets: Vec<[f64; 2]>,
    prior: Vec<f64>,
}

impl Problem<'_> {
    fn shape_at(&self, p: &ShapeParams) -> Result<Matrix3xX<f64>> {
        let full = self.model.compose_shape(p)?;
        Ok(Matrix3xX::from_fn(self.vertices.len(), |r, c| {
            full[(r, self.vertices[c])]
        }))
    }

    fn loss(&self, cam: &CameraMatrix, p: &ShapeParams) -> Result<f64> {
        let s = self.shape_at(p)?;
        let mut e = 0.0;
        for (col, t) in s.column_iter().zip(&self.targets) {
            let [x, y] = cam.project(&col.into());
            e += (x - t[0]).powi(2) + (y - t[1]).powi(2);
        }
        Ok(e + self.prior_term(p))
    }

    fn prior_term(&self, p: &ShapeParams) -> f64 {
        p.iter().zip(&self.prior).map(|(v, d)| d * v * v).sum()
    }

    /// Least-squares camera for a fixed shape: each image axis is an
    /// independent 4-unknown linear problem.
    fn solve_camera(&self, p: &ShapeParams) -> Result<CameraMatrix> {
        let s = self.shape_at(p)?;
        let n = self.vertices.len();
        let a = DMatrix::from_fn(n, 4, |i, j| if j < 3 { s[(j, i)] } else { 1.0 });
        let svd = a.svd(true, true);
        let mut m = [0.0; 8];
        for axis in 0..2 {
            let b = DVector::from_fn(n, |i, _| self.targets[i][axis]);
            let sol = svd
                .solve(&b, 1e-12)
                .map_err(|e| Error::InvalidInput(format!("camera solve failed: {e}")))?;
            m[4 * axis..4 * axis + 4].copy_from_slice(sol.as_slice());
        }
        Ok(CameraMatrix::new(m))
    }

    /// Damped Gauss-Newton direction on the shape coefficients and the
    /// directional derivative of the loss along it.
    fn shape_direction(&self, cam: &CameraMatrix, p: &ShapeParams) -> Result<(Vec<f64>, f64)> {
        let np = self.model.n_shape();
        let s = self.shape_at(p)?;
        let n = self.vertices.len();
        let (r1, r2) = (cam.row1(), cam.row2());
        let mut jac = DMatrix::<f64>::zeros(2 * n, np);
        let mut res = DVector::<f64>::zeros(2 * n);
        for (i, (&q, t)) in self.vertices.iter().zip(&self.targets).enumerate() {
            let [x, y] = cam.project(&s.column(i).into());
            res[2 * i] = x - t[0];
            res[2 * i + 1] = y - t[1];
            for j in 0..np {
                let b = self.model.basis(j).column(q);
                jac[(2 * i, j)] = r1.dot(&b);
                jac[(2 * i + 1, j)] = r2.dot(&b);
            }
        }
        let pv = DVector::from_iterator(np, p.iter());
        let prior = DVector::from_column_slice(&self.prior);
        let half_grad = jac.tr_mul(&res) + prior.component_mul(&pv);
        let mut h = jac.tr_mul(&jac);
        let damping = 1e-10 * (h.trace() / np as f64).max(1e-12);
        for j in 0..np {
            h[(j, j)] += self.prior[j] + damping;
        }
        let dir = h
            .svd(true, true)
            .solve(&(-&half_grad), 1e-14)
            .map_err(|e| Error::InvalidInput(format!("shape solve failed: {e}")))?;
        let slope = 2.0 * half_grad.dot(&dir);
        Ok((dir.as_slice().to_vec(), slope))
    }
}

/// Fits camera and shape to the visible landmarks of `target`.
pub fn fit_landmarks(
    model: &ShapeModel,
    target: &LandmarkSet,
    bbox: &BBox,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_dim("target landmarks", model.n_landmarks(), target.len())?;
    check_dim("target visibility", target.len(), target.visibility.len())?;
    let visible: Vec<usize> = (0..target.len()).filter(|&i| target.visibility[i]).collect();
    if visible.len() < MIN_VISIBLE_LANDMARKS {
        return Err(Error::IllPosed {
            visible: visible.len(),
            required: MIN_VISIBLE_LANDMARKS,
        });
    }
    if opts.tikhonov < 0.0 {
        return Err(Error::InvalidInput("tikhonov weight must be >= 0".into()));
    }
    let problem = Problem {
        model,
        vertices: visible.iter().map(|&i| model.landmark_indices()[i]).collect(),
        targets: visible.iter().map(|&i| target.points[i]).collect(),
        prior: model
            .basis_stddev()
            .iter()
            .map(|sd| opts.tikhonov / (sd * sd))
            .collect(),
    };

    let init = initialize_params(bbox, model)?;
    let mut cam = init.camera;
    let mut shape = init.shape;
    let mut loss = problem.loss(&cam, &shape)?;
    let mut history = vec![loss];
    let mut iterations = 0;
    for it in 1..=opts.max_iters {
        iterations = it;
        let start = loss;

        let cam_ls = problem.solve_camera(&shape)?;
        let l = problem.loss(&cam_ls, &shape)?;
        if !l.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        if l <= loss {
            cam = cam_ls;
            loss = l;
            history.push(loss);
        }

        let (dir, slope) = problem.shape_direction(&cam, &shape)?;
        if slope < 0.0 {
            let mut step = 1.0;
            for _ in 0..40 {
                let mut trial = shape.clone();
                for (j, d) in dir.iter().enumerate() {
                    *trial.get_mut(j) += step * d;
                }
                let l = problem.loss(&cam, &trial)?;
                if !l.is_finite() {
                    return Err(Error::Diverged { iteration: it });
                }
                if l <= loss + 1e-4 * step * slope {
                    shape = trial;
                    loss = l;
                    history.push(loss);
                    break;
                }
                step *= 0.5;
            }
        }

        if start - loss < opts.tol {
            break;
        }
    }

    let params = ParamVector::new(cam, shape);
    let estimate = project_landmarks(model, &params)?;
    let nme = nme(&estimate, target, bbox)?;
    Ok(FitResult {
        params,
        nme,
        loss,
        iterations,
        history,
    })
}

/// Box perturbation bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterAmplitude {
    /// Corner offset as a fraction of the box width/height (uniform in
    /// `[-offset, offset]`).
    pub offset: f64,
    /// Size multipliers are uniform in `[lo, hi]`.
    pub scale: (f64, f64),
}

impl Default for JitterAmplitude {
    fn default() -> Self {
        Self {
            offset: 0.1,
            scale: (0.9, 1.1),
        }
    }
}

/// Default number of variations per training face.
pub const DEFAULT_JITTER_COUNT: usize = 20;

pub fn jitter_bbox(bbox: &BBox, seed: u64, count: usize) -> Result<Vec<BBox>> {
    jitter_bbox_with(bbox, seed, count, &JitterAmplitude::default())
}

pub fn jitter_bbox_with(
    bbox: &BBox,
    seed: u64,
    count: usize,
    amp: &JitterAmplitude,
) -> Result<Vec<BBox>> {
    if count == 0 {
        return Err(Error::InvalidInput("jitter count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let dx = rng.gen_range(-amp.offset..=amp.offset) * bbox.w;
            let dy = rng.gen_range(-amp.offset..=amp.offset) * bbox.h;
            let sw = rng.gen_range(amp.scale.0..=amp.scale.1);
            let sh = rng.gen_range(amp.scale.0..=amp.scale.1);
            BBox::new(bbox.x + dx, bbox.y + dy, bbox.w * sw, bbox.h * sh)
        })
        .collect())
}
