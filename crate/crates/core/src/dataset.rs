//! Synthetic faces with known parameters.
//!
//! Each sample's "photograph" is the rasterizer's own rendering of the
//! ground-truth parameters, so a network trained on it faces a
//! self-consistent problem with exact labels.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::camera::{project_landmarks_with_visibility, CameraMatrix, LandmarkSet, ParamVector};
use crate::error::{Error, Result};
use crate::fit::MIN_VISIBLE_LANDMARKS;
use crate::model::{MaskKind, ShapeModel, ShapeParams};
use crate::render::{rasterize_forward, RasterConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Range of the face width as a fraction of the image side.
    pub face_fraction: (f64, f64),
    /// Largest offset of the face centre from the image centre, as a
    /// fraction of the image side.
    pub max_offset: f64,
    /// Shape coefficients are drawn from N(0, sd^2) and clipped to this
    /// many stddevs.
    pub shape_clip: f64,
    pub sigma: f64,
    pub support_radius: usize,
    pub mask: MaskKind,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            image_size: 64,
            max_yaw_deg: 90.0,
            max_pitch_deg: 20.0,
            max_roll_deg: 45.0,
            face_fraction: (0.45, 0.65),
            max_offset: 0.08,
            shape_clip: 2.5,
            sigma: 1.0,
            support_radius: 2,
            mask: MaskKind::Nose,
        }
    }
}

impl DatasetConfig {
    pub fn raster(&self) -> RasterConfig {
        RasterConfig {
            width: self.image_size,
            height: self.image_size,
            sigma: self.sigma,
            support_radius: self.support_radius,
            background_value: 0.0,
            mask: self.mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `image_size x image_size` rendering of `params`.
    pub image: Vec<f64>,
    pub image_size: usize,
    pub params: ParamVector,
    pub landmarks: LandmarkSet,
    /// Tight box around the visible projected vertices.
    pub bbox: BBox,
}

/// Random pose for one face: roll about the viewing axis, then yaw and
/// pitch out of plane.
pub fn random_rotation(rng: &mut impl Rng, cfg: &DatasetConfig) -> Rotation3<f64> {
    let deg = std::f64::consts::PI / 180.0;
    let sym = |rng: &mut dyn rand::RngCore, max: f64| {
        if max > 0.0 {
            rng.gen_range(-max..=max) * deg
        } else {
            0.0
        }
    };
    let yaw = sym(rng, cfg.max_yaw_deg);
    let pitch = sym(rng, cfg.max_pitch_deg);
    let roll = sym(rng, cfg.max_roll_deg);
    Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
}

fn sample_params(model: &ShapeModel, rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> ParamVector {
    let mut shape = ShapeParams::zeros(model.n_id(), model.n_exp());
    for (j, sd) in model.basis_stddev().into_iter().enumerate() {
        let v: f64 = Normal::new(0.0, sd).expect("positive stddev").sample(rng);
        *shape.get_mut(j) = v.clamp(-cfg.shape_clip * sd, cfg.shape_clip * sd);
    }
    let xs = model.mean_shape().row(0);
    let extent = xs.max() - xs.min();
    let size = cfg.image_size as f64;
    let frac = rng.gen_range(cfg.face_fraction.0..=cfg.face_fraction.1);
    let scale = frac * size / extent;
    let rot = random_rotation(rng, cfg);
    let centroid = model.mean_shape().column_mean();
    let off = cfg.max_offset * size;
    let cx = (size - 1.0) / 2.0 + rng.gen_range(-off..=off);
    let cy = (size - 1.0) / 2.0 + rng.gen_range(-off..=off);
    let mut camera = CameraMatrix::from_rotation(scale, rot.matrix(), 0.0, 0.0);
    let [px, py] = camera.project(&centroid);
    camera.as_mut_array()[3] = cx - px;
    camera.as_mut_array()[7] = cy - py;
    ParamVector::new(camera, shape)
}

/// Renders one sample for known parameters.
pub fn make_sample(model: &ShapeModel, params: ParamVector, raster: &RasterConfig) -> Result<Sample> {
    let out = rasterize_forward(model, &params, raster)?;
    let landmarks = project_landmarks_with_visibility(model, &params)?;
    let proj = out.projected();
    let bbox = BBox::enclosing(
        out.visible()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(q, _)| [proj[(0, q)], proj[(1, q)]]),
    )
    .filter(BBox::is_valid)
    .ok_or_else(|| Error::InvalidInput("no visible vertices".into()))?;
    Ok(Sample {
        image: out.into_image(),
        image_size: raster.width,
        params,
        landmarks,
        bbox,
    })
}

/// `count` faces, deterministic per seed. Draws with fewer than four
/// visible landmarks are redrawn.
pub fn generate_synthetic_dataset(model: &ShapeModel, cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    if cfg.image_size < 4 {
        return Err(Error::InvalidInput("image_size must be >= 4".into()));
    }
    let raster = cfg.raster();
    raster.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while out.len() < cfg.count {
        attempts += 1;
        if attempts > 100 * cfg.count.max(1) {
            return Err(Error::InvalidInput(
                "pose ranges leave too few visible landmarks".into(),
            ));
        }
        let params = sample_params(model, &mut rng, cfg);
        let sample = match make_sample(model, params, &raster) {
            Ok(s) => s,
            Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        };
        if sample.landmarks.n_visible() < MIN_VISIBLE_LANDMARKS {
            continue;
        }
        out.push(sample);
    }
    Ok(out)
}
