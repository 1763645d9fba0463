//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::camera::{project_landmarks, projection_jacobian_at, LandmarkSet, ParamVector};
use crate::error::{check_dim, Error, Result};
use crate::model::ShapeModel;

/// Diagonal weights of the parameter loss and the rotation/translation
/// ratio they were derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub weights: Vec<f64>,
    pub ratio: f64,
}

impl LossWeights {
    /// Identity weighting of dimension `dim`.
    pub fn uniform(dim: usize) -> Self {
        Self {
            weights: vec![1.0; dim],
            ratio: 1.0,
        }
    }
}

const ROTATION_SLOTS: [usize; 6] = [0, 1, 2, 4, 5, 6];
const TRANSLATION_SLOTS: [usize; 2] = [3, 7];

/// Shape weights are the inverse basis stddevs; rotation entries are
/// weighted `1/r` and translations `1`, where `r` is the ratio of mean
/// absolute scaled-rotation entry to mean absolute translation over the
/// training parameters.
pub fn build_weights(model: &ShapeModel, training: &[ParamVector]) -> Result<LossWeights> {
    if training.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let (mut rot, mut trans) = (0.0, 0.0);
    for p in training {
        let m = p.camera.as_array();
        rot += ROTATION_SLOTS.iter().map(|&k| m[k].abs()).sum::<f64>();
        trans += TRANSLATION_SLOTS.iter().map(|&k| m[k].abs()).sum::<f64>();
    }
    let n = training.len() as f64;
    let rot = rot / (6.0 * n);
    let trans = trans / (2.0 * n);
    if !(trans > 0.0) {
        return Err(Error::InvalidInput("mean translation magnitude is zero".into()));
    }
    let ratio = rot / trans;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "rotation/translation ratio {ratio} is not positive"
        )));
    }
    let mut weights = vec![1.0; 8];
    for k in ROTATION_SLOTS {
        weights[k] = 1.0 / ratio;
    }
    for sd in model.basis_stddev() {
        if !(sd > 0.0) {
            return Err(Error::InvalidInput("basis stddev must be positive".into()));
        }
        weights.push(1.0 / sd);
    }
    Ok(LossWeights { weights, ratio })
}

/// `e^T W e` with `e = dp - target`, and its gradient `2 W e`.
pub fn param_loss(dp: &[f64], target: &[f64], weights: &LossWeights) -> Result<(f64, Vec<f64>)> {
    check_dim("parameter update target", dp.len(), target.len())?;
    check_dim("loss weights", dp.len(), weights.weights.len())?;
    let mut loss = 0.0;
    let grad = dp
        .iter()
        .zip(target)
        .zip(&weights.weights)
        .map(|((d, t), w)| {
            let e = d - t;
            loss += w * e * e;
            2.0 * w * e
        })
        .collect();
    Ok((loss, grad))
}

/// Squared Euclidean distance between the landmarks of `params + dp` and
/// `target`, summed over all landmarks, with its gradient over `dp`.
pub fn landmark_loss(
    model: &ShapeModel,
    params: &ParamVector,
    dp: &[f64],
    target: &LandmarkSet,
) -> Result<(f64, Vec<f64>)> {
    check_dim("target landmarks", model.n_landmarks(), target.len())?;
    let updated = params.add(dp)?;
    let projected = project_landmarks(model, &updated)?;
    let jac = projection_jacobian_at(model, &updated, model.landmark_indices())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; updated.dim()];
    for (i, (p, t)) in projected.points.iter().zip(&target.points).enumerate() {
        let (rx, ry) = (p[0] - t[0], p[1] - t[1]);
        loss += rx * rx + ry * ry;
        for ((g, dx), dy) in grad.iter_mut().zip(jac.dx(i)).zip(jac.dy(i)) {
            *g += 2.0 * (rx * dx + ry * dy);
        }
    }
    Ok((loss, grad))
}

fn visible_errors<'a>(
    estimated: &'a LandmarkSet,
    truth: &'a LandmarkSet,
) -> Result<impl Iterator<Item = f64> + 'a> {
    check_dim("estimated landmarks", truth.len(), estimated.len())?;
    check_dim("truth visibility", truth.len(), truth.visibility.len())?;
    if truth.n_visible() == 0 {
        return Err(Error::InvalidInput("no visible landmarks".into()));
    }
    Ok(estimated
        .points
        .iter()
        .zip(&truth.points)
        .zip(&truth.visibility)
        .filter(|(_, v)| **v)
        .map(|((e, t), _)| ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt()))
}

/// Mean pixel error over the landmarks visible in `truth`.
pub fn mape(estimated: &LandmarkSet, truth: &LandmarkSet) -> Result<f64> {
    let n = truth.n_visible() as f64;
    Ok(visible_errors(estimated, truth)?.sum::<f64>() / n)
}

/// MAPE divided by the square root of the box area, in percent.
pub fn nme(estimated: &LandmarkSet, truth: &LandmarkSet, bbox: &BBox) -> Result<f64> {
    if !bbox.is_valid() {
        return Err(Error::InvalidInput(format!("degenerate bounding box {bbox:?}")));
    }
    Ok(100.0 * mape(estimated, truth)? / bbox.area().sqrt())
}
