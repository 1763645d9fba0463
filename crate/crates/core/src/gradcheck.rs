//! Finite-difference verification of every analytic gradient.
//!
//! Each check compares an analytic derivative with a central difference
//! of step `STEP * max(1, |theta|)`. Discrete choices of the forward pass
//! (visibility winners, splat neighbourhoods, rectifier states) are held
//! at their base values; a probe that would change any of them, or cross
//! a frontability clamp, marks the configuration as degenerate and it is
//! redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{project_landmarks, projection_jacobian, CameraMatrix, ParamVector};
use crate::dataset::{generate_synthetic_dataset, random_rotation, DatasetConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{build_weights, landmark_loss};
use crate::model::{generate_synthetic_model, ShapeModel, ShapeParams, SynthConfig};
use crate::nn::train::{block_losses, image_batch, initial_params};
use crate::nn::{BackwardOptions, BlockConfig, ForwardMode, Network};
use crate::render::{rasterize_backward, rasterize_forward, render_frozen, signed_frontability, RasterConfig};

pub const RASTER_TOLERANCE: f64 = 1e-4;
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-4;
const NETWORK_STEP: f64 = 1e-6;
/// Errors are measured relative to the largest gradient entry times this
/// when an entry itself is tiny.
const FLOOR: f64 = 1e-4;
const MAX_REDRAWS: usize = 50;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

fn step_for(theta: f64, base: f64) -> f64 {
    base * theta.abs().max(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub category: String,
    pub tolerance: f64,
    pub trials: usize,
    /// Configurations drawn but rejected as degenerate.
    pub redrawn: usize,
    pub max_rel_error: f64,
    /// Trial and parameter (or weight) index of the worst entry.
    pub worst_trial: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradReport {
    fn new(category: &str, tolerance: f64) -> Self {
        Self {
            category: category.into(),
            tolerance,
            trials: 0,
            redrawn: 0,
            max_rel_error: 0.0,
            worst_trial: 0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64], indices: &[usize]) {
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = FLOOR * scale.max(f64::MIN_POSITIVE);
        for ((a, n), &k) in analytic.iter().zip(numeric).zip(indices) {
            let e = relative_error(*a, *n, floor);
            if e > self.max_rel_error || !e.is_finite() {
                self.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
                self.worst_trial = self.trials;
                self.worst_index = k;
                self.worst_analytic = *a;
                self.worst_numeric = *n;
            }
        }
        self.trials += 1;
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<16} {} max rel err {:.3e} (tol {:.0e}) over {} trials, worst: trial {} index {} analytic {:.6e} numeric {:.6e}",
            self.category,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.trials,
            self.worst_trial,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

/// Random pose and shape that keeps the face inside a `size x size` image.
pub fn random_params(model: &ShapeModel, size: usize, rng: &mut impl Rng) -> ParamVector {
    let cfg = DatasetConfig {
        max_yaw_deg: 60.0,
        max_pitch_deg: 25.0,
        max_roll_deg: 45.0,
        ..Default::default()
    };
    let rot = random_rotation(rng, &cfg);
    let xs = model.mean_shape().row(0);
    let scale = rng.gen_range(0.45..0.7) * size as f64 / (xs.max() - xs.min());
    let mut camera = CameraMatrix::from_rotation(scale, rot.matrix(), 0.0, 0.0);
    let [px, py] = camera.project(&model.mean_shape().column_mean());
    let c = (size as f64 - 1.0) / 2.0;
    camera.as_mut_array()[3] = c - px + rng.gen_range(-1.0..1.0);
    camera.as_mut_array()[7] = c - py + rng.gen_range(-1.0..1.0);
    let mut shape = ShapeParams::zeros(model.n_id(), model.n_exp());
    for (j, sd) in model.basis_stddev().into_iter().enumerate() {
        *shape.get_mut(j) = rng.gen_range(-1.5..1.5) * sd;
    }
    ParamVector::new(camera, shape)
}

fn perturbed(params: &ParamVector, k: usize, delta: f64) -> ParamVector {
    let mut p = params.clone();
    *p.get_mut(k) += delta;
    p
}

/// One rasterizer comparison. `None` when a probe flips the frontability
/// sign of a splatting vertex.
pub fn rasterizer_trial(
    model: &ShapeModel,
    params: &ParamVector,
    cfg: &RasterConfig,
    upstream: &[f64],
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let out = rasterize_forward(model, params, cfg)?;
    if !out.visible().iter().any(|v| *v) {
        return Ok(None);
    }
    let analytic = rasterize_backward(&out, upstream, model, params, cfg)?;
    let structure = out.structure();
    let objective = |p: &ParamVector| -> Result<f64> {
        let img = render_frozen(&structure, model, p, cfg)?;
        Ok(img.iter().zip(upstream).map(|(a, b)| a * b).sum())
    };
    let mut numeric = Vec::with_capacity(params.dim());
    for k in 0..params.dim() {
        let h = step_for(params.get(k), STEP);
        let (plus, minus) = (perturbed(params, k, h), perturbed(params, k, -h));
        for probe in [&plus, &minus] {
            if k < 8 {
                let s = signed_frontability(model, &probe.camera)?;
                if s.iter().zip(structure.visible()).any(|(h, v)| *v && *h <= 0.0) {
                    return Ok(None);
                }
            }
            if !rasterize_forward(model, probe, cfg)?.structure().same_selection(&structure) {
                return Ok(None);
            }
        }
        numeric.push((objective(&plus)? - objective(&minus)?) / (2.0 * h));
    }
    Ok(Some((analytic, numeric)))
}

fn check_model(seed: u64) -> Result<ShapeModel> {
    generate_synthetic_model(&SynthConfig {
        seed,
        vertices: 300,
        n_id: 5,
        n_exp: 3,
    })
}

/// `trials` non-degenerate random configurations at 32x32.
pub fn check_rasterizer(model: &ShapeModel, trials: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new("rasterizer", RASTER_TOLERANCE);
    let all: Vec<usize> = (0..model.param_dim()).collect();
    while report.trials < trials {
        let cfg = RasterConfig {
            sigma: rng.gen_range(0.6..1.5),
            support_radius: rng.gen_range(1..=3),
            mask: [crate::MaskKind::Nose, crate::MaskKind::FivePoint, crate::MaskKind::Off]
                [rng.gen_range(0..3)],
            ..RasterConfig::new(32, 32)
        };
        let params = random_params(model, 32, &mut rng);
        let upstream: Vec<f64> = (0..cfg.n_pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match rasterizer_trial(model, &params, &cfg, &upstream)? {
            Some((a, n)) => report.record(&a, &n, &all),
            None => {
                report.redrawn += 1;
                if report.redrawn > MAX_REDRAWS * trials.max(1) {
                    return Err(Error::InvalidInput("too many degenerate configurations".into()));
                }
            }
        }
    }
    Ok(report)
}

/// Landmark projection Jacobian against differences of projected
/// coordinates.
pub fn check_projection(model: &ShapeModel, trials: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new("projection", SMOOTH_TOLERANCE);
    let dim = model.param_dim();
    let n = model.n_landmarks();
    for _ in 0..trials {
        let params = random_params(model, 64, &mut rng);
        let jac = projection_jacobian(model, &params)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut index = Vec::new();
        let mut fd = vec![[0.0; 2]; n * dim];
        for k in 0..dim {
            let h = step_for(params.get(k), STEP);
            let a = project_landmarks(model, &perturbed(&params, k, h))?;
            let b = project_landmarks(model, &perturbed(&params, k, -h))?;
            for i in 0..n {
                fd[i * dim + k] = [
                    (a.points[i][0] - b.points[i][0]) / (2.0 * h),
                    (a.points[i][1] - b.points[i][1]) / (2.0 * h),
                ];
            }
        }
        for i in 0..n {
            let q = model.landmark_indices()[i];
            let row = jac.vertices().iter().position(|&v| v == q).ok_or_else(|| {
                Error::InvalidInput(format!("landmark vertex {q} missing from Jacobian"))
            })?;
            for k in 0..dim {
                analytic.extend([jac.dx(row)[k], jac.dy(row)[k]]);
                numeric.extend(fd[i * dim + k]);
                index.extend([k, k]);
            }
        }
        report.record(&analytic, &numeric, &index);
    }
    Ok(report)
}

/// Landmark loss gradient with respect to the update.
pub fn check_landmark_loss(model: &ShapeModel, trials: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new("landmark-loss", SMOOTH_TOLERANCE);
    let dim = model.param_dim();
    let all: Vec<usize> = (0..dim).collect();
    for _ in 0..trials {
        let params = random_params(model, 64, &mut rng);
        let truth = random_params(model, 64, &mut rng);
        let target = project_landmarks(model, &truth)?;
        let dp: Vec<f64> = (0..dim)
            .map(|k| rng.gen_range(-0.05..0.05) * params.get(k).abs().max(0.1))
            .collect();
        let (_, analytic) = landmark_loss(model, &params, &dp, &target)?;
        let numeric = (0..dim)
            .map(|k| {
                let h = step_for(params.get(k) + dp[k], STEP);
                let mut a = dp.clone();
                a[k] += h;
                let mut b = dp.clone();
                b[k] -= h;
                Ok((landmark_loss(model, &params, &a, &target)?.0
                    - landmark_loss(model, &params, &b, &target)?.0)
                    / (2.0 * h))
            })
            .collect::<Result<Vec<f64>>>()?;
        report.record(&analytic, &numeric, &all);
    }
    Ok(report)
}

/// Tiny two-block network on 8x8 images used by [`check_network`].
pub struct TinyNetwork {
    pub model: ShapeModel,
    pub network: Network,
    pub samples: Vec<Sample>,
}

pub fn tiny_network(seed: u64) -> Result<TinyNetwork> {
    let model = generate_synthetic_model(&SynthConfig {
        seed,
        vertices: 60,
        n_id: 3,
        n_exp: 2,
    })?;
    let mut cfg = BlockConfig::with_width(2, model.param_dim(), 4);
    cfg.vis_size = 4;
    cfg.fc_sizes[0] = 16;
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = Network::new(cfg, &model, &mut rng, false)?;
    let samples = generate_synthetic_dataset(
        &model,
        &DatasetConfig {
            seed,
            count: 2,
            image_size: 8,
            max_yaw_deg: 45.0,
            face_fraction: (0.6, 0.8),
            ..Default::default()
        },
    )?;
    Ok(TinyNetwork {
        model,
        network,
        samples,
    })
}

/// Sum of weighted block losses with frozen splat sets, plus the
/// activation pattern of the pass.
fn network_objective(
    tiny: &TinyNetwork,
    net: &Network,
    structures: Option<&[Vec<crate::render::FrozenStructure>]>,
) -> Result<(f64, Vec<u32>, crate::nn::NetworkOutput, crate::nn::train::BlockLossGrads)> {
    let refs: Vec<&Sample> = tiny.samples.iter().collect();
    let images = image_batch(&refs)?;
    let p0 = initial_params(&tiny.model, &tiny.samples)?;
    let mode = match structures {
        Some(s) => ForwardMode::Frozen(s),
        None => ForwardMode::<ChaCha8Rng>::Train(None),
    };
    let out = net.forward(&tiny.model, &images, &p0, mode)?;
    let truth: Vec<ParamVector> = tiny.samples.iter().map(|s| s.params.clone()).collect();
    let weights = build_weights(&tiny.model, &truth)?;
    let (losses, grads) = block_losses(net, &tiny.model, &out.params, &refs, &weights)?;
    let pattern = out.cache.activation_pattern();
    Ok((losses.iter().sum(), pattern, out, grads))
}

/// End-to-end weight gradient of the tiny network at `n_weights` sampled
/// weights.
pub fn check_network(n_weights: usize, seed: u64) -> Result<GradReport> {
    let tiny = tiny_network(seed)?;
    let (_, pattern, out, grads) = network_objective(&tiny, &tiny.network, None)?;
    let analytic_all =
        tiny.network
            .backward(&tiny.model, &out.cache, &grads, BackwardOptions::default())?;
    let structures = out.cache.structures()?;
    let base = tiny.network.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut report = GradReport::new("network", NETWORK_TOLERANCE);
    let (mut analytic, mut numeric, mut index) = (Vec::new(), Vec::new(), Vec::new());
    let mut net = tiny.network.clone();
    while index.len() < n_weights {
        let k = rng.gen_range(0..base.len());
        let h = step_for(base[k], NETWORK_STEP);
        let mut values = [0.0; 2];
        let mut smooth = true;
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut w = base.clone();
            w[k] += sign * h;
            net.set_flat_params(&w)?;
            let (loss, pat, _, _) = network_objective(&tiny, &net, Some(&structures))?;
            let (_, free_pat, free, _) = network_objective(&tiny, &net, None)?;
            let same_splats = free
                .cache
                .structures()?
                .iter()
                .flatten()
                .zip(structures.iter().flatten())
                .all(|(a, b)| a.visible() == b.visible());
            smooth &= pat == pattern && free_pat == pattern && same_splats;
            values[slot] = loss;
        }
        if !smooth {
            report.redrawn += 1;
            if report.redrawn > MAX_REDRAWS * n_weights.max(1) {
                return Err(Error::InvalidInput("too many weights sit on a kink".into()));
            }
            continue;
        }
        analytic.push(analytic_all[k]);
        numeric.push((values[0] - values[1]) / (2.0 * h));
        index.push(k);
    }
    report.record(&analytic, &numeric, &index);
    report.trials = index.len();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random configurations for the rasterizer and smooth-path checks.
    pub trials: usize,
    /// Sampled weights for the network check.
    pub network_weights: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            network_weights: 50,
        }
    }
}

/// Runs every category.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<GradReport>> {
    let model = check_model(opts.seed)?;
    Ok(vec![
        check_rasterizer(&model, opts.trials, opts.seed)?,
        check_projection(&model, opts.trials, opts.seed)?,
        check_landmark_loss(&model, opts.trials, opts.seed)?,
        check_network(opts.network_weights, opts.seed)?,
    ])
}

