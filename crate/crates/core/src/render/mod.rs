//! Differentiable frontability rasterizer.
//!
//! Every visible vertex splats `g(q) * a(q)` into the pixels around its
//! projection with a truncated Gaussian weight; each pixel holds the
//! weight-normalized average of its splats. `g` is the clamped alignment of
//! the mean-shape normal with the camera viewing axis and `a` the selected
//! per-vertex mask.
//!
//! Visibility is approximated without rendering triangles: vertices with
//! `g = 0` are pruned, and among vertices whose projections round to the
//! same pixel cell only the nearest one survives. The backward pass treats
//! that selection, and the set of pixels each vertex splats into, as fixed.

mod export;

use std::collections::HashMap;

use nalgebra::{Matrix2xX, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{
    project_shape, projection_jacobian, projection_vjp, CameraMatrix, ParamVector, CAMERA_DIM,
};
use crate::error::{check_dim, Error, Result};
use crate::model::{MaskKind, ShapeModel};

pub use export::{
    read_pgm, sidecar_path, to_gray8, write_image, write_pgm, write_png, ImageRange,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    /// Gaussian splat width in pixels.
    pub sigma: f64,
    /// Chebyshev radius, in pixels, of the square each vertex splats into.
    pub support_radius: usize,
    pub background_value: f64,
    pub mask: MaskKind,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            sigma: 1.0,
            support_radius: 2,
            background_value: 0.0,
            mask: MaskKind::Nose,
        }
    }
}

impl RasterConfig {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma = {} must be > 0", self.sigma)));
        }
        if self.support_radius == 0 {
            return Err(Error::InvalidInput("support_radius must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// `(m1 x m2) / (|m1| |m2|)`.
pub fn viewing_axis(camera: &CameraMatrix) -> Result<Vector3<f64>> {
    let (a, b) = (camera.row1(), camera.row2());
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0) {
        return Err(Error::ZeroNormRow(1));
    }
    if !(nb > 0.0) {
        return Err(Error::ZeroNormRow(2));
    }
    Ok(a.cross(&b) / (na * nb))
}

/// Unclamped frontability: the viewing axis dotted with each mean normal.
pub fn signed_frontability(model: &ShapeModel, camera: &CameraMatrix) -> Result<Vec<f64>> {
    let axis = viewing_axis(camera)?;
    Ok(model
        .mean_normals()
        .column_iter()
        .map(|n| axis.dot(&n))
        .collect())
}

/// Per-vertex frontability `g = max(0, axis . N0)`.
pub fn frontability(model: &ShapeModel, camera: &CameraMatrix) -> Result<Vec<f64>> {
    Ok(signed_frontability(model, camera)?
        .into_iter()
        .map(|h| h.max(0.0))
        .collect())
}

/// Gradient of `sum_q grad_g[q] * g(q)` with respect to the eight camera
/// entries. Clamped vertices contribute nothing.
pub fn frontability_vjp(
    model: &ShapeModel,
    camera: &CameraMatrix,
    grad_g: &[f64],
) -> Result<[f64; CAMERA_DIM]> {
    check_dim("frontability gradient", model.q(), grad_g.len())?;
    let axis = viewing_axis(camera)?;
    let (a, b) = (camera.row1(), camera.row2());
    let (na2, nb2) = (a.norm_squared(), b.norm_squared());
    let n = na2.sqrt() * nb2.sqrt();
    let mut normal_sum = Vector3::zeros();
    let mut h_sum = 0.0;
    for (q, normal) in model.mean_normals().column_iter().enumerate() {
        let gg = grad_g[q];
        if gg == 0.0 {
            continue;
        }
        let h = axis.dot(&normal);
        if h > 0.0 {
            normal_sum += normal * gg;
            h_sum += gg * h;
        }
    }
    let da = b.cross(&normal_sum) / n - a * (h_sum / na2);
    let db = normal_sum.cross(&a) / n - b * (h_sum / nb2);
    Ok([da.x, da.y, da.z, 0.0, db.x, db.y, db.z, 0.0])
}

/// Distance along the viewing direction; nearer vertices have smaller
/// depth. Uses the unit normal of the plane spanned by the camera rows, so
/// at the frontal pose depth is `-z`. Degenerate cameras give all zeros.
pub fn vertex_depths(camera: &CameraMatrix, shape: &Matrix3xX<f64>) -> Vec<f64> {
    let c = camera.row1().cross(&camera.row2());
    let norm = c.norm();
    if !(norm > 0.0) {
        return vec![0.0; shape.ncols()];
    }
    let axis = c / norm;
    shape.column_iter().map(|s| -axis.dot(&s)).collect()
}

/// Integer pixel cell of a projected point.
pub fn pixel_cell(x: f64, y: f64) -> (i64, i64) {
    (x.round() as i64, y.round() as i64)
}

/// Visible vertices: `g > 0` and nearest within their pixel cell. Ties in
/// depth go to the lower index.
pub fn select_visible(projected: &Matrix2xX<f64>, depth: &[f64], g: &[f64]) -> Vec<bool> {
    let q = projected.ncols();
    let mut winners: HashMap<(i64, i64), usize> = HashMap::new();
    for i in 0..q {
        if !(g[i] > 0.0) {
            continue;
        }
        let cell = pixel_cell(projected[(0, i)], projected[(1, i)]);
        winners
            .entry(cell)
            .and_modify(|w| {
                if depth[i] < depth[*w] {
                    *w = i;
                }
            })
            .or_insert(i);
    }
    let mut visible = vec![false; q];
    for i in winners.into_values() {
        visible[i] = true;
    }
    visible
}

/// One splat recorded at a pixel during the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub vertex: usize,
    pub weight: f64,
    pub frontability: f64,
}

/// Rendered image plus everything the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualizationOutput {
    width: usize,
    height: usize,
    /// Row-major, `image[v * width + u]`.
    image: Vec<f64>,
    contributors: Vec<Vec<Contribution>>,
    visible: Vec<bool>,
    projected: Matrix2xX<f64>,
}

impl VisualizationOutput {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image(&self) -> &[f64] {
        &self.image
    }

    pub fn into_image(self) -> Vec<f64> {
        self.image
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.image[v * self.width + u]
    }

    pub fn contributors(&self, u: usize, v: usize) -> &[Contribution] {
        &self.contributors[v * self.width + u]
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn projected(&self) -> &Matrix2xX<f64> {
        &self.projected
    }

    /// The discrete choices of this pass, for frozen re-evaluation.
    pub fn structure(&self) -> FrozenStructure {
        FrozenStructure {
            width: self.width,
            height: self.height,
            members: self
                .contributors
                .iter()
                .map(|c| c.iter().map(|c| c.vertex).collect())
                .collect(),
            visible: self.visible.clone(),
            cells: (0..self.projected.ncols())
                .map(|q| pixel_cell(self.projected[(0, q)], self.projected[(1, q)]))
                .collect(),
        }
    }
}

fn splat_weight(u: f64, v: f64, x: f64, y: f64, sigma: f64) -> f64 {
    (-((u - x).powi(2) + (v - y).powi(2)) / (2.0 * sigma * sigma)).exp()
}

/// Inclusive pixel range `[c - r, c + r]` clipped to `0..len`.
fn window(centre: i64, radius: usize, len: usize) -> Option<(usize, usize)> {
    let lo = centre.saturating_sub(radius as i64).max(0);
    let hi = centre.saturating_add(radius as i64).min(len as i64 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn check_finite_projection(projected: &Matrix2xX<f64>) -> Result<()> {
    match projected.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "projected coordinate of vertex {}",
            i / 2
        ))),
        None => Ok(()),
    }
}

/// Forward pass: renders the visualization image for `params`.
pub fn rasterize_forward(
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
) -> Result<VisualizationOutput> {
    cfg.validate()?;
    params.check_against(model)?;
    let shape = model.compose_shape(&params.shape)?;
    let projected = project_shape(&params.camera, &shape);
    check_finite_projection(&projected)?;
    let g = frontability(model, &params.camera)?;
    let depth = vertex_depths(&params.camera, &shape);
    let visible = select_visible(&projected, &depth, &g);
    let mask = model.mask_values(cfg.mask)?;

    let (w, h) = (cfg.width, cfg.height);
    let mut num = vec![0.0; w * h];
    let mut den = vec![0.0; w * h];
    let mut contributors: Vec<Vec<Contribution>> = vec![Vec::new(); w * h];
    for q in (0..model.q()).filter(|&q| visible[q]) {
        let (x, y) = (projected[(0, q)], projected[(1, q)]);
        let (cu, cv) = pixel_cell(x, y);
        let (Some((u0, u1)), Some((v0, v1))) = (
            window(cu, cfg.support_radius, w),
            window(cv, cfg.support_radius, h),
        ) else {
            continue;
        };
        let value = g[q] * mask[q];
        for v in v0..=v1 {
            for u in u0..=u1 {
                let wt = splat_weight(u as f64, v as f64, x, y, cfg.sigma);
                let idx = v * w + u;
                num[idx] += value * wt;
                den[idx] += wt;
                contributors[idx].push(Contribution {
                    vertex: q,
                    weight: wt,
                    frontability: g[q],
                });
            }
        }
    }
    let image = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { cfg.background_value })
        .collect();
    Ok(VisualizationOutput {
        width: w,
        height: h,
        image,
        contributors,
        visible,
        projected,
    })
}

fn check_record(
    output: &VisualizationOutput,
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
) -> Result<(Matrix3xX<f64>, Matrix2xX<f64>)> {
    cfg.validate()?;
    params.check_against(model)?;
    if output.width != cfg.width || output.height != cfg.height {
        return Err(Error::MismatchedRecord(format!(
            "record is {}x{}, config is {}x{}",
            output.width, output.height, cfg.width, cfg.height
        )));
    }
    if output.visible.len() != model.q() {
        return Err(Error::MismatchedRecord(format!(
            "record has {} vertices, model has {}",
            output.visible.len(),
            model.q()
        )));
    }
    let shape = model.compose_shape(&params.shape)?;
    let projected = project_shape(&params.camera, &shape);
    if projected != output.projected {
        return Err(Error::MismatchedRecord(
            "projected vertices differ from the forward pass".into(),
        ));
    }
    Ok((shape, projected))
}

/// Backward pass: `sum_{u,v} upstream(u,v) * dV(u,v)/dtheta` over the full
/// parameter vector, holding the forward pass's visibility and splat sets
/// fixed.
pub fn rasterize_backward(
    output: &VisualizationOutput,
    upstream: &[f64],
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
) -> Result<Vec<f64>> {
    let (shape, projected) = check_record(output, model, params, cfg)?;
    check_dim("upstream gradient", cfg.n_pixels(), upstream.len())?;
    let mask = model.mask_values(cfg.mask)?;
    let inv_var = 1.0 / (cfg.sigma * cfg.sigma);

    let mut grad_xy = Matrix2xX::<f64>::zeros(model.q());
    let mut grad_g = vec![0.0; model.q()];
    for (idx, contribs) in output.contributors.iter().enumerate() {
        let up = upstream[idx];
        if up == 0.0 || contribs.is_empty() {
            continue;
        }
        let den: f64 = contribs.iter().map(|c| c.weight).sum();
        if !(den > 0.0) {
            continue;
        }
        let value = output.image[idx];
        let (u, v) = ((idx % cfg.width) as f64, (idx / cfg.width) as f64);
        for c in contribs {
            let q = c.vertex;
            let a = mask[q];
            // dV/dw_q = (g a - V) / den; dw/dx = w (u - x) / sigma^2.
            let coef = up * (c.frontability * a - value) / den * c.weight * inv_var;
            grad_xy[(0, q)] += coef * (u - projected[(0, q)]);
            grad_xy[(1, q)] += coef * (v - projected[(1, q)]);
            grad_g[q] += up * a * c.weight / den;
        }
    }
    let mut grad = projection_vjp(model, params, &shape, &grad_xy)?;
    let g_part = frontability_vjp(model, &params.camera, &grad_g)?;
    for (g, d) in grad.iter_mut().zip(g_part) {
        *g += d;
    }
    Ok(grad)
}

/// Per-pixel derivative images `dV/dtheta_k`, with the same frozen
/// structure as [`rasterize_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct VisualizationGradients {
    dim: usize,
    n_pixels: usize,
    // [param][pixel]
    data: Vec<f64>,
}

impl VisualizationGradients {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `dV/dtheta_k` as a row-major image.
    pub fn image(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_pixels..(k + 1) * self.n_pixels]
    }

    /// Camera derivative images `dV/dm_1 .. dV/dm_8`.
    pub fn d_camera(&self) -> impl Iterator<Item = &[f64]> {
        (0..CAMERA_DIM).map(|k| self.image(k))
    }

    /// Shape derivative images in `[p_id, p_exp]` order.
    pub fn d_shape(&self) -> impl Iterator<Item = &[f64]> {
        (CAMERA_DIM..self.dim).map(|k| self.image(k))
    }

    /// `sum_{u,v} upstream(u,v) * dV(u,v)/dtheta`.
    pub fn contract(&self, upstream: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|k| self.image(k).iter().zip(upstream).map(|(d, u)| d * u).sum())
            .collect()
    }
}

/// Full Jacobian of the rendered image.
pub fn rasterize_jacobian(
    output: &VisualizationOutput,
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
) -> Result<VisualizationGradients> {
    let (_, projected) = check_record(output, model, params, cfg)?;
    let mask = model.mask_values(cfg.mask)?;
    let jac = projection_jacobian(model, params)?;
    let dim = model.param_dim();
    let n_pixels = cfg.n_pixels();
    let inv_var = 1.0 / (cfg.sigma * cfg.sigma);

    // dg_q/dm for every visible vertex, via one-hot frontability VJPs.
    let mut dg = vec![[0.0; CAMERA_DIM]; model.q()];
    let mut onehot = vec![0.0; model.q()];
    for q in (0..model.q()).filter(|&q| output.visible[q]) {
        onehot[q] = 1.0;
        dg[q] = frontability_vjp(model, &params.camera, &onehot)?;
        onehot[q] = 0.0;
    }

    let mut data = vec![0.0; dim * n_pixels];
    let mut pixel_grad = vec![0.0; dim];
    for (idx, contribs) in output.contributors.iter().enumerate() {
        let den: f64 = contribs.iter().map(|c| c.weight).sum();
        if contribs.is_empty() || !(den > 0.0) {
            continue;
        }
        let value = output.image[idx];
        let (u, v) = ((idx % cfg.width) as f64, (idx / cfg.width) as f64);
        pixel_grad.iter_mut().for_each(|g| *g = 0.0);
        for c in contribs {
            let q = c.vertex;
            let a = mask[q];
            let coef = (c.frontability * a - value) / den * c.weight * inv_var;
            let (cx, cy) = (coef * (u - projected[(0, q)]), coef * (v - projected[(1, q)]));
            for (k, g) in pixel_grad.iter_mut().enumerate() {
                *g += cx * jac.dx(q)[k] + cy * jac.dy(q)[k];
            }
            let cg = a * c.weight / den;
            for (g, d) in pixel_grad.iter_mut().zip(dg[q]) {
                *g += cg * d;
            }
        }
        for (k, g) in pixel_grad.iter().enumerate() {
            data[k * n_pixels + idx] = *g;
        }
    }
    Ok(VisualizationGradients {
        dim,
        n_pixels,
        data,
    })
}

/// The discrete part of a forward pass: which vertices survived the
/// visibility test, which cell each vertex fell in, and which vertices
/// splat into each pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenStructure {
    width: usize,
    height: usize,
    members: Vec<Vec<usize>>,
    visible: Vec<bool>,
    cells: Vec<(i64, i64)>,
}

impl FrozenStructure {
    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn cells(&self) -> &[(i64, i64)] {
        &self.cells
    }

    /// Cells of visible vertices only; invisible vertices may move freely.
    pub fn same_selection(&self, other: &FrozenStructure) -> bool {
        self.visible == other.visible
            && self
                .visible
                .iter()
                .zip(self.cells.iter().zip(&other.cells))
                .all(|(vis, (a, b))| !vis || a == b)
    }
}

/// Re-evaluates the image at `params` with the splat sets of `structure`
/// held fixed. Equals [`rasterize_forward`] whenever the structure is the
/// one `params` itself produces.
pub fn render_frozen(
    structure: &FrozenStructure,
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if structure.width != cfg.width || structure.height != cfg.height {
        return Err(Error::MismatchedRecord("frozen structure size differs".into()));
    }
    check_dim("frozen structure vertices", model.q(), structure.visible.len())?;
    let shape = model.compose_shape(&params.shape)?;
    let projected = project_shape(&params.camera, &shape);
    check_finite_projection(&projected)?;
    let g = frontability(model, &params.camera)?;
    let mask = model.mask_values(cfg.mask)?;
    Ok(structure
        .members
        .iter()
        .enumerate()
        .map(|(idx, members)| {
            let (u, v) = ((idx % cfg.width) as f64, (idx / cfg.width) as f64);
            let (mut num, mut den) = (0.0, 0.0);
            for &q in members {
                let wt = splat_weight(u, v, projected[(0, q)], projected[(1, q)], cfg.sigma);
                num += g[q] * mask[q] * wt;
                den += wt;
            }
            if den > 0.0 {
                num / den
            } else {
                cfg.background_value
            }
        })
        .collect())
}
