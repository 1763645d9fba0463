//! Weak-perspective camera and the projection of model vertices.
//!
//! Parameter vectors always use the order `[m1..m8, p_id, p_exp]`, where
//! `m1..m4` is the first row of the 2x4 camera matrix and `m5..m8` the
//! second.

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{ShapeModel, ShapeParams};
use crate::render::frontability;

/// Number of camera entries at the front of a parameter vector.
pub const CAMERA_DIM: usize = 8;

/// The 2x4 weak-perspective matrix, stored row-major.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraMatrix {
    m: [f64; 8],
}

impl CameraMatrix {
    pub fn new(m: [f64; 8]) -> Self {
        Self { m }
    }

    pub fn from_rows(row1: [f64; 4], row2: [f64; 4]) -> Self {
        Self::new([
            row1[0], row1[1], row1[2], row1[3], row2[0], row2[1], row2[2], row2[3],
        ])
    }

    /// Scaled rotation `scale * R[0..2, :]` followed by translation.
    pub fn from_rotation(scale: f64, rotation: &Matrix3<f64>, tx: f64, ty: f64) -> Self {
        let r1 = rotation.row(0) * scale;
        let r2 = rotation.row(1) * scale;
        Self::from_rows([r1[0], r1[1], r1[2], tx], [r2[0], r2[1], r2[2], ty])
    }

    /// Axis-aligned frontal camera.
    pub fn frontal(scale: f64, tx: f64, ty: f64) -> Self {
        Self::from_rows([scale, 0.0, 0.0, tx], [0.0, scale, 0.0, ty])
    }

    pub fn as_array(&self) -> &[f64; 8] {
        &self.m
    }

    pub fn as_mut_array(&mut self) -> &mut [f64; 8] {
        &mut self.m
    }

    /// First scaled-rotation row `[m1, m2, m3]`.
    pub fn row1(&self) -> Vector3<f64> {
        Vector3::new(self.m[0], self.m[1], self.m[2])
    }

    /// Second scaled-rotation row `[m5, m6, m7]`.
    pub fn row2(&self) -> Vector3<f64> {
        Vector3::new(self.m[4], self.m[5], self.m[6])
    }

    pub fn tx(&self) -> f64 {
        self.m[3]
    }

    pub fn ty(&self) -> f64 {
        self.m[7]
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    /// Rows of equal norm and orthogonal, i.e. a scaled rotation.
    pub fn is_weak_perspective(&self) -> bool {
        let (a, b) = (self.row1(), self.row2());
        let (na, nb) = (a.norm(), b.norm());
        let scale = na.max(nb);
        scale > 0.0
            && (na - nb).abs() <= 1e-6 * scale
            && a.dot(&b).abs() <= 1e-6 * a.norm_squared().max(b.norm_squared())
    }

    /// Every entry multiplied by `factor`; maps projections into an image
    /// resampled by the same factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.m.map(|v| v * factor))
    }

    /// Projects one 3D point.
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.row1().dot(p) + self.m[3], self.row2().dot(p) + self.m[7]]
    }
}

/// Camera and shape parameters together.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub camera: CameraMatrix,
    #[serde(flatten)]
    pub shape: ShapeParams,
}

impl ParamVector {
    pub fn new(camera: CameraMatrix, shape: ShapeParams) -> Self {
        Self { camera, shape }
    }

    pub fn zeros(n_id: usize, n_exp: usize) -> Self {
        Self::new(CameraMatrix::default(), ShapeParams::zeros(n_id, n_exp))
    }

    pub fn dim(&self) -> usize {
        CAMERA_DIM + self.shape.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.camera.as_array());
        v.extend(self.shape.iter());
        v
    }

    pub fn from_slice(n_id: usize, n_exp: usize, values: &[f64]) -> Result<Self> {
        check_dim("parameter vector", CAMERA_DIM + n_id + n_exp, values.len())?;
        let mut m = [0.0; 8];
        m.copy_from_slice(&values[..CAMERA_DIM]);
        Ok(Self::new(
            CameraMatrix::new(m),
            ShapeParams::from_concat(n_id, &values[CAMERA_DIM..])?,
        ))
    }

    /// Component `k` in canonical order.
    pub fn get(&self, k: usize) -> f64 {
        if k < CAMERA_DIM {
            self.camera.m[k]
        } else {
            self.shape.get(k - CAMERA_DIM)
        }
    }

    pub fn get_mut(&mut self, k: usize) -> &mut f64 {
        if k < CAMERA_DIM {
            &mut self.camera.m[k]
        } else {
            self.shape.get_mut(k - CAMERA_DIM)
        }
    }

    /// Additive update `self + delta`.
    pub fn add(&self, delta: &[f64]) -> Result<Self> {
        check_dim("parameter update", self.dim(), delta.len())?;
        let mut out = self.clone();
        for (k, d) in delta.iter().enumerate() {
            *out.get_mut(k) += d;
        }
        Ok(out)
    }

    /// Componentwise `self - other`.
    pub fn diff(&self, other: &ParamVector) -> Result<Vec<f64>> {
        check_dim("parameter vector", self.dim(), other.dim())?;
        Ok(self
            .to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| a - b)
            .collect())
    }

    pub(crate) fn check_against(&self, model: &ShapeModel) -> Result<()> {
        check_dim("identity parameters", model.n_id(), self.shape.identity.len())?;
        check_dim("expression parameters", model.n_exp(), self.shape.expression.len())
    }
}

/// 2D landmark positions (pixels) with visibility flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, visibility: Vec<bool>) -> Result<Self> {
        check_dim("landmark visibility", points.len(), visibility.len())?;
        Ok(Self { points, visibility })
    }

    pub fn all_visible(points: Vec<[f64; 2]>) -> Self {
        let visibility = vec![true; points.len()];
        Self { points, visibility }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_visible(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }

    /// Translated copy.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            visibility: self.visibility.clone(),
        }
    }
}

/// Projects the columns of an already composed shape.
pub fn project_shape(camera: &CameraMatrix, shape: &Matrix3xX<f64>) -> Matrix2xX<f64> {
    let (r1, r2) = (camera.row1(), camera.row2());
    let mut out = Matrix2xX::zeros(shape.ncols());
    for (q, s) in shape.column_iter().enumerate() {
        out[(0, q)] = r1.dot(&s) + camera.tx();
        out[(1, q)] = r2.dot(&s) + camera.ty();
    }
    out
}

/// Projected position of every vertex.
pub fn project_all(model: &ShapeModel, params: &ParamVector) -> Result<Matrix2xX<f64>> {
    let shape = model.compose_shape(&params.shape)?;
    Ok(project_shape(&params.camera, &shape))
}

/// Projected landmarks. Visibility is left all-true; see
/// [`landmark_visibility`].
pub fn project_landmarks(model: &ShapeModel, params: &ParamVector) -> Result<LandmarkSet> {
    let shape = model.compose_shape(&params.shape)?;
    let points = model
        .landmark_indices()
        .iter()
        .map(|&b| {
            let s: Vector3<f64> = shape.column(b).into();
            params.camera.project(&s)
        })
        .collect();
    Ok(LandmarkSet::all_visible(points))
}

/// Projected landmarks with frontability-based visibility.
pub fn project_landmarks_with_visibility(
    model: &ShapeModel,
    params: &ParamVector,
) -> Result<LandmarkSet> {
    let mut set = project_landmarks(model, params)?;
    set.visibility = landmark_visibility(model, params)?;
    Ok(set)
}

/// A landmark is visible when its frontability is strictly positive.
pub fn landmark_visibility(model: &ShapeModel, params: &ParamVector) -> Result<Vec<bool>> {
    let g = frontability(model, &params.camera)?;
    Ok(model.landmark_indices().iter().map(|&b| g[b] > 0.0).collect())
}

/// Dense derivatives of projected coordinates with respect to the full
/// parameter vector, for a selection of vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionJacobian {
    dim: usize,
    vertices: Vec<usize>,
    // [vertex][x|y][param]
    data: Vec<f64>,
}

impl ProjectionJacobian {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Vertex indices, in row order.
    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    /// Gradient of the x coordinate of the `i`-th selected vertex.
    pub fn dx(&self, i: usize) -> &[f64] {
        let start = 2 * i * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Gradient of the y coordinate of the `i`-th selected vertex.
    pub fn dy(&self, i: usize) -> &[f64] {
        let start = (2 * i + 1) * self.dim;
        &self.data[start..start + self.dim]
    }
}

pub fn projection_jacobian(model: &ShapeModel, params: &ParamVector) -> Result<ProjectionJacobian> {
    let all: Vec<usize> = (0..model.q()).collect();
    projection_jacobian_at(model, params, &all)
}

/// Jacobian restricted to `vertices`.
pub fn projection_jacobian_at(
    model: &ShapeModel,
    params: &ParamVector,
    vertices: &[usize],
) -> Result<ProjectionJacobian> {
    let shape = model.compose_shape(&params.shape)?;
    if let Some(&bad) = vertices.iter().find(|&&v| v >= model.q()) {
        return Err(Error::InvalidInput(format!("vertex {bad} out of range")));
    }
    let dim = model.param_dim();
    let (r1, r2) = (params.camera.row1(), params.camera.row2());
    let mut data = vec![0.0; 2 * dim * vertices.len()];
    for (i, &q) in vertices.iter().enumerate() {
        let (gx, gy) = data[2 * i * dim..2 * (i + 1) * dim].split_at_mut(dim);
        let s = shape.column(q);
        gx[..3].copy_from_slice(s.as_slice());
        gx[3] = 1.0;
        gy[4..7].copy_from_slice(s.as_slice());
        gy[7] = 1.0;
        for (j, basis) in model.bases().enumerate() {
            let b = basis.column(q);
            gx[CAMERA_DIM + j] = r1.dot(&b);
            gy[CAMERA_DIM + j] = r2.dot(&b);
        }
    }
    Ok(ProjectionJacobian {
        dim,
        vertices: vertices.to_vec(),
        data,
    })
}

/// Vector-Jacobian product of the projection: given `dL/dx_q` and
/// `dL/dy_q` for every vertex, returns `dL/dtheta` over the full parameter
/// vector. `shape` must be the composed shape for `params`.
pub fn projection_vjp(
    model: &ShapeModel,
    params: &ParamVector,
    shape: &Matrix3xX<f64>,
    grad_xy: &Matrix2xX<f64>,
) -> Result<Vec<f64>> {
    check_dim("projection gradient", model.q(), grad_xy.ncols())?;
    check_dim("composed shape", model.q(), shape.ncols())?;
    let (r1, r2) = (params.camera.row1(), params.camera.row2());
    let mut out = vec![0.0; model.param_dim()];
    // Per-vertex model-space direction of the gradient: gx * m1 + gy * m2.
    let mut dir = Matrix3xX::<f64>::zeros(model.q());
    for q in 0..model.q() {
        let (gx, gy) = (grad_xy[(0, q)], grad_xy[(1, q)]);
        if gx == 0.0 && gy == 0.0 {
            continue;
        }
        let s = shape.column(q);
        for k in 0..3 {
            out[k] += gx * s[k];
            out[4 + k] += gy * s[k];
        }
        out[3] += gx;
        out[7] += gy;
        dir.set_column(q, &(r1 * gx + r2 * gy));
    }
    for (j, basis) in model.bases().enumerate() {
        out[CAMERA_DIM + j] = basis.dot(&dir);
    }
    Ok(out)
}
