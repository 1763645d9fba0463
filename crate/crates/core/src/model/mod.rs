//! Linear 3D morphable face model.
//!
//! A face is the mean shape plus a linear combination of identity and
//! expression bases. The model also carries the per-vertex data the
//! rasterizer needs: unit surface normals of the mean shape and a
//! standardized Gaussian mask centred on the nose tip.

mod io;
mod synth;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use io::{load_model, model_from_json, model_to_json, save_model, MODEL_FILE_VERSION};
pub use synth::{generate_synthetic_model, SynthConfig};

/// Fraction of the mean-shape bounding-sphere radius used as the default
/// mask falloff.
pub const DEFAULT_SIGMA_N_FRACTION: f64 = 0.3;

/// Shape coefficients: identity followed by expression.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
}

impl ShapeParams {
    pub fn new(identity: Vec<f64>, expression: Vec<f64>) -> Self {
        Self {
            identity,
            expression,
        }
    }

    pub fn zeros(n_id: usize, n_exp: usize) -> Self {
        Self::new(vec![0.0; n_id], vec![0.0; n_exp])
    }

    /// Splits a concatenated `[p_id, p_exp]` slice.
    pub fn from_concat(n_id: usize, values: &[f64]) -> Result<Self> {
        if values.len() < n_id {
            return Err(Error::DimensionMismatch {
                what: "shape parameter vector",
                expected: n_id,
                got: values.len(),
            });
        }
        Ok(Self::new(values[..n_id].to_vec(), values[n_id..].to_vec()))
    }

    pub fn len(&self) -> usize {
        self.identity.len() + self.expression.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated view `[p_id, p_exp]`.
    pub fn concat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.identity.iter().chain(self.expression.iter()).copied()
    }

    pub fn get(&self, j: usize) -> f64 {
        if j < self.identity.len() {
            self.identity[j]
        } else {
            self.expression[j - self.identity.len()]
        }
    }

    pub fn get_mut(&mut self, j: usize) -> &mut f64 {
        let n_id = self.identity.len();
        if j < n_id {
            &mut self.identity[j]
        } else {
            &mut self.expression[j - n_id]
        }
    }
}

/// Which per-vertex mask the rasterizer multiplies frontability by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Single Gaussian around the nose tip.
    #[default]
    Nose,
    /// Max of Gaussians around the eyes, nose tip and mouth corners.
    FivePoint,
    /// Constant one; frontability is splatted unweighted.
    Off,
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "nose" => Ok(MaskKind::Nose),
            "2" | "five-point" => Ok(MaskKind::FivePoint),
            "none" | "off" => Ok(MaskKind::Off),
            other => Err(Error::InvalidInput(format!(
                "unknown mask `{other}` (expected 1, 2 or none)"
            ))),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Nose => "1",
            MaskKind::FivePoint => "2",
            MaskKind::Off => "none",
        })
    }
}

/// The stored (non-derived) content of a model. Normals and masks are
/// recomputed from these by [`ShapeModel::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    pub mean_shape: Matrix3xX<f64>,
    pub identity_bases: Vec<Matrix3xX<f64>>,
    pub expression_bases: Vec<Matrix3xX<f64>>,
    pub basis_stddev_id: Vec<f64>,
    pub basis_stddev_exp: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub landmark_indices: Vec<usize>,
    pub nose_tip_index: usize,
    /// Mask falloff; `None` selects the default fraction of the
    /// bounding-sphere radius.
    pub sigma_n: Option<f64>,
}

/// An immutable, validated morphable model.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    mean_shape: Matrix3xX<f64>,
    identity_bases: Vec<Matrix3xX<f64>>,
    expression_bases: Vec<Matrix3xX<f64>>,
    basis_stddev_id: Vec<f64>,
    basis_stddev_exp: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    landmark_indices: Vec<usize>,
    nose_tip_index: usize,
    sigma_n: f64,
    mean_normals: Matrix3xX<f64>,
    mask: Vec<f64>,
    mask_five: Option<Vec<f64>>,
}

impl ShapeModel {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            mean_shape,
            identity_bases,
            expression_bases,
            basis_stddev_id,
            basis_stddev_exp,
            triangles,
            landmark_indices,
            nose_tip_index,
            sigma_n,
        } = parts;

        let q = mean_shape.ncols();
        if q == 0 {
            return Err(Error::Validation("mean shape has no vertices".into()));
        }
        if mean_shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("mean shape has non-finite entries".into()));
        }
        for (kind, bases) in [("identity", &identity_bases), ("expression", &expression_bases)] {
            for (k, b) in bases.iter().enumerate() {
                if b.ncols() != q {
                    return Err(Error::Validation(format!(
                        "{kind} basis {k} has {} vertices, expected {q}",
                        b.ncols()
                    )));
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "{kind} basis {k} has non-finite entries"
                    )));
                }
            }
        }
        for (kind, sd, n) in [
            ("identity", &basis_stddev_id, identity_bases.len()),
            ("expression", &basis_stddev_exp, expression_bases.len()),
        ] {
            if sd.len() != n {
                return Err(Error::Validation(format!(
                    "{kind} stddev count {} does not match basis count {n}",
                    sd.len()
                )));
            }
            if let Some(bad) = sd.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Validation(format!(
                    "{kind} stddev {bad} is not positive and finite"
                )));
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= q) {
                return Err(Error::Validation(format!(
                    "triangle {t} references vertex {bad} but Q = {q}"
                )));
            }
        }
        if landmark_indices.is_empty() {
            return Err(Error::Validation("no landmark indices".into()));
        }
        let mut seen = vec![false; q];
        for &b in &landmark_indices {
            if b >= q {
                return Err(Error::Validation(format!(
                    "landmark index {b} out of range (Q = {q})"
                )));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Validation(format!("landmark index {b} repeated")));
            }
        }
        if nose_tip_index >= q {
            return Err(Error::Validation(format!(
                "nose tip index {nose_tip_index} out of range (Q = {q})"
            )));
        }
        let sigma_n = match sigma_n {
            Some(s) if s.is_finite() && s > 0.0 => s,
            Some(s) => return Err(Error::Validation(format!("sigma_n = {s} must be positive"))),
            None => DEFAULT_SIGMA_N_FRACTION * bounding_sphere_radius(&mean_shape),
        };

        let mean_normals = compute_mean_normals(&mean_shape, &triangles)?;
        let mask = compute_mask(&mean_shape, nose_tip_index, sigma_n)?;
        let mask_five = match five_point_centers(&landmark_indices) {
            Some(c) => Some(compute_mask2(&mean_shape, &c, sigma_n)?),
            None => None,
        };

        Ok(Self {
            mean_shape,
            identity_bases,
            expression_bases,
            basis_stddev_id,
            basis_stddev_exp,
            triangles,
            landmark_indices,
            nose_tip_index,
            sigma_n,
            mean_normals,
            mask,
            mask_five,
        })
    }

    pub fn to_parts(&self) -> ModelParts {
        ModelParts {
            mean_shape: self.mean_shape.clone(),
            identity_bases: self.identity_bases.clone(),
            expression_bases: self.expression_bases.clone(),
            basis_stddev_id: self.basis_stddev_id.clone(),
            basis_stddev_exp: self.basis_stddev_exp.clone(),
            triangles: self.triangles.clone(),
            landmark_indices: self.landmark_indices.clone(),
            nose_tip_index: self.nose_tip_index,
            sigma_n: Some(self.sigma_n),
        }
    }

    /// Number of vertices.
    pub fn q(&self) -> usize {
        self.mean_shape.ncols()
    }

    pub fn n_id(&self) -> usize {
        self.identity_bases.len()
    }

    pub fn n_exp(&self) -> usize {
        self.expression_bases.len()
    }

    pub fn n_shape(&self) -> usize {
        self.n_id() + self.n_exp()
    }

    /// Full parameter dimension: eight camera entries plus shape.
    pub fn param_dim(&self) -> usize {
        8 + self.n_shape()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    pub fn mean_shape(&self) -> &Matrix3xX<f64> {
        &self.mean_shape
    }

    pub fn identity_bases(&self) -> &[Matrix3xX<f64>] {
        &self.identity_bases
    }

    pub fn expression_bases(&self) -> &[Matrix3xX<f64>] {
        &self.expression_bases
    }

    /// The `j`-th basis in `[identity, expression]` order.
    pub fn basis(&self, j: usize) -> &Matrix3xX<f64> {
        if j < self.n_id() {
            &self.identity_bases[j]
        } else {
            &self.expression_bases[j - self.n_id()]
        }
    }

    pub fn bases(&self) -> impl Iterator<Item = &Matrix3xX<f64>> {
        self.identity_bases.iter().chain(self.expression_bases.iter())
    }

    pub fn basis_stddev_id(&self) -> &[f64] {
        &self.basis_stddev_id
    }

    pub fn basis_stddev_exp(&self) -> &[f64] {
        &self.basis_stddev_exp
    }

    /// Stddevs in `[identity, expression]` order.
    pub fn basis_stddev(&self) -> Vec<f64> {
        self.basis_stddev_id
            .iter()
            .chain(self.basis_stddev_exp.iter())
            .copied()
            .collect()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn nose_tip_index(&self) -> usize {
        self.nose_tip_index
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn mean_normals(&self) -> &Matrix3xX<f64> {
        &self.mean_normals
    }

    /// The nose-tip mask.
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    /// Centres of the five-point mask: the first five landmarks, which by
    /// convention are left eye, right eye, nose tip, left and right mouth
    /// corner.
    pub fn five_point_centers(&self) -> Option<[usize; 5]> {
        five_point_centers(&self.landmark_indices)
    }

    pub fn mask_values(&self, kind: MaskKind) -> Result<Cow<'_, [f64]>> {
        match kind {
            MaskKind::Nose => Ok(Cow::Borrowed(&self.mask)),
            MaskKind::FivePoint => self.mask_five.as_deref().map(Cow::Borrowed).ok_or_else(|| {
                Error::InvalidInput("five-point mask needs at least five landmarks".into())
            }),
            MaskKind::Off => Ok(Cow::Owned(vec![1.0; self.q()])),
        }
    }

    /// `S0 + sum_k pI_k SI_k + sum_k pE_k SE_k`.
    pub fn compose_shape(&self, params: &ShapeParams) -> Result<Matrix3xX<f64>> {
        check_dim("identity parameters", self.n_id(), params.identity.len())?;
        check_dim("expression parameters", self.n_exp(), params.expression.len())?;
        let mut shape = self.mean_shape.clone();
        for (basis, coef) in self.bases().zip(params.iter()) {
            if coef != 0.0 {
                shape.zip_apply(basis, |s, b| *s += coef * b);
            }
        }
        Ok(shape)
    }

    /// Checks every structural invariant, including the derived normals
    /// and masks.
    pub fn validate(&self) -> Result<()> {
        ShapeModel::new(self.to_parts())?;
        for (q, n) in self.mean_normals.column_iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("normal {q} is not unit length")));
            }
        }
        let masks = std::iter::once(&self.mask).chain(self.mask_five.as_ref());
        for mask in masks {
            let (mean, std) = mean_std(mask);
            if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "mask not standardized: mean {mean:e}, std {std}"
                )));
            }
        }
        Ok(())
    }
}

fn five_point_centers(landmarks: &[usize]) -> Option<[usize; 5]> {
    landmarks.get(..5).map(|s| [s[0], s[1], s[2], s[3], s[4]])
}

/// Largest distance from the centroid to any vertex.
pub fn bounding_sphere_radius(points: &Matrix3xX<f64>) -> f64 {
    if points.ncols() == 0 {
        return 0.0;
    }
    let centroid = points.column_mean();
    points
        .column_iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max)
}

/// Area-weighted vertex normals. Each face contributes its unnormalized
/// normal `(v1 - v0) x (v2 - v0)`, so counter-clockwise faces seen from +z
/// point toward +z.
pub fn compute_mean_normals(
    points: &Matrix3xX<f64>,
    triangles: &[[usize; 3]],
) -> Result<Matrix3xX<f64>> {
    let q = points.ncols();
    let mut acc = Matrix3xX::<f64>::zeros(q);
    let mut touched = vec![false; q];
    // Scale-relative degeneracy threshold.
    let extent = bounding_sphere_radius(points).max(f64::MIN_POSITIVE);
    let area_eps = 1e-14 * extent * extent;
    for (t, &[i0, i1, i2]) in triangles.iter().enumerate() {
        if i0 >= q || i1 >= q || i2 >= q {
            return Err(Error::Validation(format!(
                "triangle {t} references a vertex outside 0..{q}"
            )));
        }
        let v0: Vector3<f64> = points.column(i0).into();
        let e1 = points.column(i1) - v0;
        let e2 = points.column(i2) - v0;
        let n = e1.cross(&e2);
        if n.norm() <= area_eps {
            return Err(Error::DegenerateTriangle(t));
        }
        for i in [i0, i1, i2] {
            let mut col = acc.column_mut(i);
            col += n;
            touched[i] = true;
        }
    }
    if let Some(q) = touched.iter().position(|t| !t) {
        return Err(Error::IsolatedVertex(q));
    }
    for (q, mut col) in acc.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            // Incident faces cancel exactly; no defined orientation.
            return Err(Error::Validation(format!("vertex {q} has a zero normal")));
        }
        col /= norm;
    }
    Ok(acc)
}

fn gaussian_falloff(points: &Matrix3xX<f64>, center: usize, sigma_n: f64) -> Vec<f64> {
    let c = points.column(center);
    let denom = 2.0 * sigma_n * sigma_n;
    points
        .column_iter()
        .map(|p| (-(p - c).norm_squared() / denom).exp())
        .collect()
}

fn check_sigma_n(sigma_n: f64) -> Result<()> {
    if sigma_n.is_finite() && sigma_n > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("sigma_n = {sigma_n} must be > 0")))
    }
}

/// Raw nose-tip Gaussian before standardization.
pub fn mask_raw(points: &Matrix3xX<f64>, nose_tip: usize, sigma_n: f64) -> Result<Vec<f64>> {
    check_sigma_n(sigma_n)?;
    if nose_tip >= points.ncols() {
        return Err(Error::InvalidInput(format!(
            "nose tip {nose_tip} out of range"
        )));
    }
    Ok(gaussian_falloff(points, nose_tip, sigma_n))
}

/// Raw five-centre mask (pointwise max) before standardization.
pub fn mask2_raw(points: &Matrix3xX<f64>, centers: &[usize; 5], sigma_n: f64) -> Result<Vec<f64>> {
    check_sigma_n(sigma_n)?;
    if let Some(&c) = centers.iter().find(|&&c| c >= points.ncols()) {
        return Err(Error::InvalidInput(format!("mask centre {c} out of range")));
    }
    let mut out = vec![f64::NEG_INFINITY; points.ncols()];
    for &c in centers {
        for (o, v) in out.iter_mut().zip(gaussian_falloff(points, c, sigma_n)) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Nose-tip mask, standardized to zero mean and unit standard deviation.
pub fn compute_mask(points: &Matrix3xX<f64>, nose_tip: usize, sigma_n: f64) -> Result<Vec<f64>> {
    standardize(&mask_raw(points, nose_tip, sigma_n)?)
}

/// Five-centre mask, standardized.
pub fn compute_mask2(
    points: &Matrix3xX<f64>,
    centers: &[usize; 5],
    sigma_n: f64,
) -> Result<Vec<f64>> {
    standardize(&mask2_raw(points, centers, sigma_n)?)
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let (mean, std) = mean_std(values);
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(std > 1e-12 * scale) {
        return Err(Error::ZeroVariance);
    }
    let centred: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();
    // One refinement pass removes the rounding left by the first.
    let (m2, s2) = mean_std(&centred);
    Ok(centred.into_iter().map(|v| (v - m2) / s2).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3xX;

    fn tiny_parts() -> ModelParts {
        // Square in the z = 0 plane split into two CCW triangles.
        let mean = Matrix3xX::from_column_slice(&[
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, //
            0.0, 1.0, 0.2, //
        ]);
        let basis = Matrix3xX::from_column_slice(&[
            0.1, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.3, 0.1, 0.1, 0.1,
        ]);
        ModelParts {
            mean_shape: mean,
            identity_bases: vec![basis.clone()],
            expression_bases: vec![basis * 2.0],
            basis_stddev_id: vec![1.0],
            basis_stddev_exp: vec![0.5],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            landmark_indices: vec![0, 2],
            nose_tip_index: 2,
            sigma_n: Some(0.7),
        }
    }

    #[test]
    fn zero_params_give_mean() {
        let m = ShapeModel::new(tiny_parts()).unwrap();
        let s = m.compose_shape(&ShapeParams::zeros(1, 1)).unwrap();
        assert_eq!(&s, m.mean_shape());
    }

    #[test]
    fn unit_identity_adds_single_basis() {
        let m = ShapeModel::new(tiny_parts()).unwrap();
        let s = m.compose_shape(&ShapeParams::new(vec![1.0], vec![0.0])).unwrap();
        assert_eq!(s, m.mean_shape() + &m.identity_bases()[0]);
    }

    #[test]
    fn compose_rejects_wrong_lengths() {
        let m = ShapeModel::new(tiny_parts()).unwrap();
        let err = m.compose_shape(&ShapeParams::zeros(2, 1)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn planar_triangle_normals_point_up() {
        let pts = Matrix3xX::from_column_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let n = compute_mean_normals(&pts, &[[0, 1, 2]]).unwrap();
        for col in n.column_iter() {
            assert_eq!(col.as_slice(), &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn isolated_vertex_is_reported() {
        let pts = Matrix3xX::from_column_slice(&[
            0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 5.0, 5.0, 5.0,
        ]);
        let err = compute_mean_normals(&pts, &[[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::IsolatedVertex(3)));
    }

    #[test]
    fn degenerate_triangle_is_rejected() {
        let pts = Matrix3xX::from_column_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let err = compute_mean_normals(&pts, &[[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateTriangle(0)));
    }

    #[test]
    fn coincident_points_give_zero_variance_mask() {
        let pts = Matrix3xX::from_element(6, 0.5);
        assert!(matches!(
            compute_mask(&pts, 0, 1.0).unwrap_err(),
            Error::ZeroVariance
        ));
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let m = ShapeModel::new(tiny_parts()).unwrap();
        for s in [0.0, -1.0, f64::NAN] {
            assert!(compute_mask(m.mean_shape(), 0, s).is_err());
        }
        let mut parts = tiny_parts();
        parts.sigma_n = Some(0.0);
        assert!(ShapeModel::new(parts).is_err());
    }

    #[test]
    fn five_point_collapse_equals_nose_mask() {
        let m = ShapeModel::new(tiny_parts()).unwrap();
        let nose = m.nose_tip_index();
        let a = compute_mask(m.mean_shape(), nose, 0.4).unwrap();
        let b = compute_mask2(m.mean_shape(), &[nose; 5], 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_catches_bad_indices() {
        let mut p = tiny_parts();
        p.triangles.push([0, 1, 9]);
        assert!(matches!(ShapeModel::new(p), Err(Error::Validation(_))));
        let mut p = tiny_parts();
        p.landmark_indices = vec![1, 1];
        assert!(matches!(ShapeModel::new(p), Err(Error::Validation(_))));
        let mut p = tiny_parts();
        p.nose_tip_index = 4;
        assert!(matches!(ShapeModel::new(p), Err(Error::Validation(_))));
    }

    #[test]
    fn mask_kind_parses_cli_spellings() {
        assert_eq!("1".parse::<MaskKind>().unwrap(), MaskKind::Nose);
        assert_eq!("2".parse::<MaskKind>().unwrap(), MaskKind::FivePoint);
        assert_eq!("none".parse::<MaskKind>().unwrap(), MaskKind::Off);
        assert!("3".parse::<MaskKind>().is_err());
    }
}
