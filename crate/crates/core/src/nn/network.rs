//! A chain of visualization blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout_mask, max_pool2, max_pool2_backward, relu, relu_backward, BatchNorm2d, BatchNormCache,
    Conv2d, Linear,
};
use super::tensor::{avg_pool2, Tensor};
use crate::camera::ParamVector;
use crate::error::{Error, Result};
use crate::model::{MaskKind, ShapeModel};
use crate::render::{rasterize_backward, rasterize_forward, render_frozen, FrozenStructure, RasterConfig};

/// Which tensors a block concatenates as its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    /// Image, previous features and visualization.
    #[default]
    Ifv,
    /// Previous features and visualization.
    Fv,
    /// Image and visualization.
    Iv,
}

impl std::str::FromStr for InputVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ifv" => Ok(Self::Ifv),
            "fv" => Ok(Self::Fv),
            "iv" => Ok(Self::Iv),
            _ => Err(Error::InvalidInput(format!(
                "unknown input variant {s:?} (expected ifv, fv or iv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Weighted squared error on the parameter vector.
    Param,
    /// Squared landmark reprojection error.
    Landmark,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockLoss {
    pub kind: LossKind,
    pub weight: f64,
}

/// Conv filter counts and kernel sizes per block at full width.
const FULL_FILTERS: [[(usize, usize); 2]; 5] = [
    [(12, 5), (16, 5)],
    [(20, 3), (24, 3)],
    [(28, 3), (32, 3)],
    [(36, 3), (40, 3)],
    [(40, 3), (40, 3)],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub n_blocks: usize,
    pub convs_per_block: usize,
    /// `(count, kernel)` for every conv of every block.
    pub filters: Vec<Vec<(usize, usize)>>,
    /// Hidden width and output width of the two fully connected layers.
    pub fc_sizes: [usize; 2],
    pub loss_schedule: Vec<BlockLoss>,
    pub variant: InputVariant,
    /// Side of the visualization and feature maps. Input images are twice
    /// this size.
    pub vis_size: usize,
    pub mask: MaskKind,
    pub sigma: f64,
    pub support_radius: usize,
    pub dropout: f64,
}

impl BlockConfig {
    /// Defaults for a model with `param_dim` parameters: filter counts a
    /// quarter of full width, a 200-unit hidden layer, parameter loss on
    /// the first half of the blocks and landmark loss on the rest, block
    /// weights `1..=n_blocks`.
    pub fn new(n_blocks: usize, param_dim: usize) -> Self {
        Self::with_width(n_blocks, param_dim, 4)
    }

    /// As [`BlockConfig::new`] with filter counts divided by `divisor`.
    pub fn with_width(n_blocks: usize, param_dim: usize, divisor: usize) -> Self {
        let divisor = divisor.max(1);
        let filters = (0..n_blocks)
            .map(|b| {
                FULL_FILTERS[b.min(FULL_FILTERS.len() - 1)]
                    .iter()
                    .map(|&(c, k)| (c.div_ceil(divisor), k))
                    .collect()
            })
            .collect();
        Self {
            n_blocks,
            convs_per_block: 2,
            filters,
            fc_sizes: [800 / divisor, param_dim],
            loss_schedule: default_schedule(n_blocks),
            variant: InputVariant::Ifv,
            vis_size: 32,
            mask: MaskKind::Nose,
            sigma: 1.0,
            support_radius: 2,
            dropout: 0.1,
        }
    }

    pub fn image_size(&self) -> usize {
        2 * self.vis_size
    }

    pub fn validate(&self, param_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be >= 1".into());
        }
        if self.convs_per_block == 0 {
            return bad("convs_per_block must be >= 1".into());
        }
        if self.filters.len() != self.n_blocks {
            return bad(format!(
                "filters lists {} blocks, n_blocks is {}",
                self.filters.len(),
                self.n_blocks
            ));
        }
        for (b, f) in self.filters.iter().enumerate() {
            if f.len() != self.convs_per_block {
                return bad(format!(
                    "filters[{b}] has {} convs, convs_per_block is {}",
                    f.len(),
                    self.convs_per_block
                ));
            }
            if let Some(&(c, k)) = f.iter().find(|(c, k)| *c == 0 || k % 2 == 0) {
                return bad(format!("filters[{b}] has invalid conv ({c}, {k}); need count > 0 and odd kernel"));
            }
        }
        if self.fc_sizes[0] == 0 {
            return bad("fc_sizes[0] must be positive".into());
        }
        if self.fc_sizes[1] != param_dim {
            return bad(format!(
                "fc_sizes[1] is {}, must equal the parameter dimension {param_dim}",
                self.fc_sizes[1]
            ));
        }
        if self.loss_schedule.len() != self.n_blocks {
            return bad(format!(
                "loss_schedule has {} entries, n_blocks is {}",
                self.loss_schedule.len(),
                self.n_blocks
            ));
        }
        if self.loss_schedule.iter().any(|l| !(l.weight >= 0.0 && l.weight.is_finite())) {
            return bad("loss_schedule weights must be finite and non-negative".into());
        }
        if self.vis_size < 2 {
            return bad("vis_size must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        self.raster(0).validate()
    }

    /// Rasterizer settings for block `b` (0-based).
    pub fn raster(&self, b: usize) -> RasterConfig {
        let size = if b == 0 { self.image_size() } else { self.vis_size };
        RasterConfig {
            width: size,
            height: size,
            sigma: self.sigma,
            support_radius: self.support_radius,
            background_value: 0.0,
            mask: self.mask,
        }
    }

    /// Ratio between block `b`'s pixel grid and the input image grid.
    pub fn frame_factor(&self, b: usize) -> f64 {
        if b == 0 {
            1.0
        } else {
            0.5
        }
    }
}

pub fn default_schedule(n_blocks: usize) -> Vec<BlockLoss> {
    (0..n_blocks)
        .map(|b| BlockLoss {
            kind: if b < n_blocks / 2 {
                LossKind::Param
            } else {
                LossKind::Landmark
            },
            weight: (b + 1) as f64,
        })
        .collect()
}

/// Maps parameters from the input-image pixel grid to a grid downsampled
/// by `factor`, with pixel centres of the pooled grid at the centres of the
/// pooled cells.
pub fn to_frame(params: &ParamVector, factor: f64) -> ParamVector {
    if factor == 1.0 {
        return params.clone();
    }
    let mut p = params.clone();
    let m = p.camera.as_mut_array();
    for v in m.iter_mut() {
        *v *= factor;
    }
    m[3] += (factor - 1.0) / 2.0;
    m[7] += (factor - 1.0) / 2.0;
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Channel counts of the concatenated input, in order image, features,
    /// visualization; absent parts are zero.
    pub input_split: [usize; 3],
}

impl Block {
    fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.extend([&c.weight, &c.bias, &n.gamma, &n.beta]);
        }
        out.extend([&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.c_out)
    }
}

/// Features and parameters handed from one block to the next, for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    /// Absent before the first block.
    pub features: Option<Tensor>,
    pub params: Vec<ParamVector>,
}

/// How a forward pass treats batch-norm, dropout and the rasterizer.
pub enum ForwardMode<'a, R: Rng> {
    /// Batch statistics; dropout drawn from the generator when given.
    Train(Option<&'a mut R>),
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics, no dropout, splat sets fixed per block and sample.
    Frozen(&'a [Vec<FrozenStructure>]),
}

impl<R: Rng> ForwardMode<'_, R> {
    fn batch_stats(&self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    frame_params: Vec<ParamVector>,
    renders: Vec<Option<crate::render::VisualizationOutput>>,
    conv_inputs: Vec<Tensor>,
    bn_caches: Vec<BatchNormCache>,
    relu_outs: Vec<Tensor>,
    pool: Option<([usize; 4], Vec<usize>)>,
    features: Tensor,
    hidden: Vec<f64>,
    dropout: Option<Vec<f64>>,
    fc2_input: Vec<f64>,
}

/// Everything the backward pass needs, plus the per-block outputs.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch_stats: bool,
    blocks: Vec<BlockCache>,
}

impl ForwardCache {
    /// Splat structures of every block and sample, for frozen re-evaluation.
    pub fn structures(&self) -> Result<Vec<Vec<FrozenStructure>>> {
        self.blocks
            .iter()
            .map(|b| {
                b.renders
                    .iter()
                    .map(|r| {
                        r.as_ref().map(|r| r.structure()).ok_or_else(|| {
                            Error::MismatchedRecord("cache holds no render records".into())
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// On/off state of every rectifier and the winner of every pooling
    /// window. Two passes with equal patterns share one linear piece.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for r in &b.relu_outs {
                out.extend(r.data.iter().map(|v| (*v > 0.0) as u32));
            }
            out.extend(b.hidden.iter().map(|v| (*v > 0.0) as u32));
            if let Some((_, arg)) = &b.pool {
                out.extend(arg.iter().map(|&i| i as u32));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// `params[b][s]`: estimate after block `b` for sample `s`.
    pub params: Vec<Vec<ParamVector>>,
    /// `visualizations[b][s]`: image block `b` rendered from its input
    /// parameters, row-major at the block's resolution.
    pub visualizations: Vec<Vec<Vec<f64>>>,
    pub cache: ForwardCache,
}

/// Which inter-block gradient paths the backward pass follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Cut every gradient into a block's input parameters.
    pub detach_param_path: bool,
    /// Follow the gradient through the rasterizer.
    pub through_visualization: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            detach_param_path: false,
            through_visualization: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: BlockConfig,
    pub n_id: usize,
    pub n_exp: usize,
    pub blocks: Vec<Block>,
    /// Per-parameter scale applied to the last layer's output.
    pub output_scale: Vec<f64>,
}

impl Network {
    /// Random conv and hidden weights; the last layer is zero when
    /// `zero_final` is set, so the untrained network returns its input.
    pub fn new(
        config: BlockConfig,
        model: &ShapeModel,
        rng: &mut impl Rng,
        zero_final: bool,
    ) -> Result<Self> {
        let dim = model.param_dim();
        config.validate(dim)?;
        let s = config.vis_size;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut prev_channels = 0;
        for b in 0..config.n_blocks {
            let input_split = match (b, config.variant) {
                (0, _) | (_, InputVariant::Iv) => [1, 0, 1],
                (_, InputVariant::Ifv) => [1, prev_channels, 1],
                (_, InputVariant::Fv) => [0, prev_channels, 1],
            };
            let mut c_in: usize = input_split.iter().sum();
            let mut convs = Vec::new();
            let mut norms = Vec::new();
            for &(c_out, k) in &config.filters[b] {
                convs.push(Conv2d::new(c_in, c_out, k, rng)?);
                norms.push(BatchNorm2d::new(c_out));
                c_in = c_out;
            }
            let fc1 = Linear::new(c_in * s * s, config.fc_sizes[0], rng);
            let fc2 = if zero_final {
                Linear::zeros(config.fc_sizes[0], dim)
            } else {
                let mut l = Linear::new(config.fc_sizes[0], dim, rng);
                l.weight.iter_mut().for_each(|w| *w *= 0.1);
                l
            };
            prev_channels = c_in;
            blocks.push(Block {
                convs,
                norms,
                fc1,
                fc2,
                input_split,
            });
        }
        Ok(Self {
            config,
            n_id: model.n_id(),
            n_exp: model.n_exp(),
            blocks,
            output_scale: vec![1.0; dim],
        })
    }

    pub fn param_dim(&self) -> usize {
        8 + self.n_id + self.n_exp
    }

    pub fn check_model(&self, model: &ShapeModel) -> Result<()> {
        if model.n_id() != self.n_id || model.n_exp() != self.n_exp {
            return Err(Error::DimensionMismatch {
                what: "model parameter dimension",
                expected: self.param_dim(),
                got: model.param_dim(),
            });
        }
        Ok(())
    }

    /// All weights in a fixed order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for p in b.params() {
                out.extend_from_slice(p);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.params())
            .map(|p| p.len())
            .sum()
    }

    /// Number of weights in each block, in [`Network::flat_params`] order.
    pub fn block_param_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.params().iter().map(|p| p.len()).sum())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.n_params();
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                what: "flat weights",
                expected: n,
                got: values.len(),
            });
        }
        let mut offset = 0;
        for b in &mut self.blocks {
            for p in b.params_mut() {
                let len = p.len();
                p.copy_from_slice(&values[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }

    /// Applies `f(weights, grads)` to every weight array with its slice of
    /// a flat gradient.
    pub fn for_each_param_mut(&mut self, grads: &[f64], mut f: impl FnMut(&mut [f64], &[f64])) {
        let mut offset = 0;
        for b in &mut self.blocks {
            for p in b.params_mut() {
                let len = p.len();
                f(p, &grads[offset..offset + len]);
                offset += len;
            }
        }
    }

    fn check_inputs(&self, model: &ShapeModel, images: &Tensor, p0: &[ParamVector]) -> Result<()> {
        self.check_model(model)?;
        let size = self.config.image_size();
        if images.c != 1 || images.h != size || images.w != size {
            return Err(Error::InvalidInput(format!(
                "images must be n x 1 x {size} x {size}, got {:?}",
                images.shape()
            )));
        }
        if images.n != p0.len() || p0.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "initial parameters per image",
                expected: images.n,
                got: p0.len(),
            });
        }
        for p in p0 {
            p.check_against(model)?;
        }
        Ok(())
    }

    fn block_forward<R: Rng>(
        &self,
        b: usize,
        model: &ShapeModel,
        image: &Tensor,
        state: &BlockState,
        mode: &mut ForwardMode<'_, R>,
    ) -> Result<(BlockState, BlockCache, Vec<Vec<f64>>)> {
        let block = &self.blocks[b];
        let cfg = &self.config;
        let raster = cfg.raster(b);
        let n = state.params.len();
        let factor = cfg.frame_factor(b);
        let frame_params: Vec<ParamVector> =
            state.params.iter().map(|p| to_frame(p, factor)).collect();

        let mut vis = Tensor::zeros(n, 1, raster.height, raster.width);
        let mut renders = Vec::with_capacity(n);
        for (s, p) in frame_params.iter().enumerate() {
            let img = match mode {
                ForwardMode::Frozen(structs) => {
                    renders.push(None);
                    render_frozen(&structs[b][s], model, p, &raster)?
                }
                _ => {
                    let out = rasterize_forward(model, p, &raster)?;
                    let img = out.image().to_vec();
                    renders.push(Some(out));
                    img
                }
            };
            vis.sample_mut(s).copy_from_slice(&img);
        }
        let visualizations = (0..n).map(|s| vis.sample(s).to_vec()).collect();

        let mut parts: Vec<&Tensor> = Vec::new();
        if block.input_split[0] > 0 {
            parts.push(image);
        }
        if block.input_split[1] > 0 {
            let f = state.features.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("block {} expects input features", b + 1))
            })?;
            parts.push(f);
        }
        parts.push(&vis);
        let mut x = Tensor::concat_channels(&parts)?;

        let mut conv_inputs = Vec::new();
        let mut bn_caches = Vec::new();
        let mut relu_outs = Vec::new();
        let mut pool = None;
        for (j, (conv, norm)) in block.convs.iter().zip(&block.norms).enumerate() {
            let z = conv.forward(&x)?;
            conv_inputs.push(x);
            let mut y = if mode.batch_stats() {
                let (y, cache) = norm.forward_train(&z)?;
                bn_caches.push(cache);
                y
            } else {
                norm.forward_eval(&z)?
            };
            relu(&mut y.data);
            if b == 0 && j == 0 {
                relu_outs.push(y.clone());
                let (pooled, arg) = max_pool2(&y);
                pool = Some((y.shape(), arg));
                y = pooled;
            } else {
                relu_outs.push(y.clone());
            }
            x = y;
        }
        let features = x;
        if features.h != cfg.vis_size || features.w != cfg.vis_size {
            return Err(Error::InvalidInput(format!(
                "block {} features are {}x{}, expected {}x{}",
                b + 1,
                features.h,
                features.w,
                cfg.vis_size,
                cfg.vis_size
            )));
        }

        let mut hidden = block.fc1.forward(&features.data)?;
        relu(&mut hidden);
        let dropout = match mode {
            ForwardMode::Train(Some(rng)) if cfg.dropout > 0.0 => {
                Some(dropout_mask(hidden.len(), cfg.dropout, &mut **rng))
            }
            _ => None,
        };
        let fc2_input: Vec<f64> = match &dropout {
            Some(m) => hidden.iter().zip(m).map(|(h, k)| h * k).collect(),
            None => hidden.clone(),
        };
        let z = block.fc2.forward(&fc2_input)?;
        let dim = self.param_dim();
        let params = state
            .params
            .iter()
            .zip(z.chunks_exact(dim))
            .map(|(p, zs)| {
                let delta: Vec<f64> = zs.iter().zip(&self.output_scale).map(|(a, s)| a * s).collect();
                p.add(&delta)
            })
            .collect::<Result<Vec<_>>>()?;
        let next = BlockState {
            features: Some(features.clone()),
            params,
        };
        let cache = BlockCache {
            frame_params,
            renders,
            conv_inputs,
            bn_caches,
            relu_outs,
            pool,
            features,
            hidden,
            dropout,
            fc2_input,
        };
        Ok((next, cache, visualizations))
    }

    /// One block applied to a batch. `image` must be at the block's
    /// resolution.
    pub fn visualization_block_forward(
        &self,
        b: usize,
        model: &ShapeModel,
        image: &Tensor,
        state: &BlockState,
    ) -> Result<BlockState> {
        if b >= self.blocks.len() {
            return Err(Error::InvalidInput(format!("no block {b}")));
        }
        self.check_model(model)?;
        let mut mode: ForwardMode<'_, rand_chacha::ChaCha8Rng> = ForwardMode::Eval;
        Ok(self.block_forward(b, model, image, state, &mut mode)?.0)
    }

    /// Runs all blocks on a batch of `2S x 2S` images.
    pub fn forward<R: Rng>(
        &self,
        model: &ShapeModel,
        images: &Tensor,
        p0: &[ParamVector],
        mut mode: ForwardMode<'_, R>,
    ) -> Result<NetworkOutput> {
        self.check_inputs(model, images, p0)?;
        if let ForwardMode::Frozen(s) = &mode {
            if s.len() != self.blocks.len() || s.iter().any(|b| b.len() != p0.len()) {
                return Err(Error::MismatchedRecord("frozen structures do not match the batch".into()));
            }
        }
        let small = avg_pool2(images);
        let mut state = BlockState {
            features: None,
            params: p0.to_vec(),
        };
        let mut params = Vec::new();
        let mut visualizations = Vec::new();
        let mut caches = Vec::new();
        for b in 0..self.blocks.len() {
            let image = if b == 0 { images } else { &small };
            let (next, cache, vis) = self.block_forward(b, model, image, &state, &mut mode)?;
            params.push(next.params.clone());
            visualizations.push(vis);
            caches.push(cache);
            state = next;
        }
        Ok(NetworkOutput {
            params,
            visualizations,
            cache: ForwardCache {
                batch_stats: mode.batch_stats(),
                blocks: caches,
            },
        })
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache, batch: usize) {
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            for (norm, c) in block.norms.iter_mut().zip(&bc.bn_caches) {
                let count = batch * c.xhat.plane_len();
                norm.update_running(c, count);
            }
        }
    }

    /// Gradient of `sum_b sum_s loss_b,s` over all weights, given
    /// `loss_grads[b][s]`, the derivative of block `b`'s loss for sample
    /// `s` with respect to that block's output parameters.
    pub fn backward(
        &self,
        model: &ShapeModel,
        cache: &ForwardCache,
        loss_grads: &[Vec<Vec<f64>>],
        opts: BackwardOptions,
    ) -> Result<Vec<f64>> {
        self.check_model(model)?;
        if !cache.batch_stats || cache.blocks.len() != self.blocks.len() {
            return Err(Error::MismatchedRecord(
                "backward needs the cache of a training forward pass of this network".into(),
            ));
        }
        if loss_grads.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch {
                what: "per-block loss gradients",
                expected: self.blocks.len(),
                got: loss_grads.len(),
            });
        }
        let dim = self.param_dim();
        let n = cache.blocks[0].frame_params.len();
        let mut g_params = vec![vec![0.0; dim]; n];
        let mut g_features: Option<Tensor> = None;
        let mut block_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.blocks.len()];

        for b in (0..self.blocks.len()).rev() {
            let block = &self.blocks[b];
            let bc = &cache.blocks[b];
            if loss_grads[b].len() != n {
                return Err(Error::DimensionMismatch {
                    what: "loss gradients per sample",
                    expected: n,
                    got: loss_grads[b].len(),
                });
            }
            for (gp, lg) in g_params.iter_mut().zip(&loss_grads[b]) {
                if lg.len() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "loss gradient",
                        expected: dim,
                        got: lg.len(),
                    });
                }
                for (a, c) in gp.iter_mut().zip(lg) {
                    *a += c;
                }
            }

            let dz: Vec<f64> = g_params
                .iter()
                .flat_map(|gp| gp.iter().zip(&self.output_scale).map(|(g, s)| g * s))
                .collect();
            let (mut dh, fc2_grads) = block.fc2.backward(&bc.fc2_input, &dz)?;
            if let Some(m) = &bc.dropout {
                dh.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            relu_backward(&bc.hidden, &mut dh);
            let (dfeat, fc1_grads) = block.fc1.backward(&bc.features.data, &dh)?;
            let mut dy = Tensor::from_vec(
                bc.features.n,
                bc.features.c,
                bc.features.h,
                bc.features.w,
                dfeat,
            )?;
            if let Some(gf) = g_features.take() {
                dy.data.iter_mut().zip(&gf.data).for_each(|(a, c)| *a += c);
            }

            let mut conv_grads = Vec::new();
            let mut norm_grads = Vec::new();
            for j in (0..block.convs.len()).rev() {
                if b == 0 && j == 0 {
                    if let Some((shape, arg)) = &bc.pool {
                        dy = max_pool2_backward(*shape, arg, &dy);
                    }
                }
                relu_backward(&bc.relu_outs[j].data, &mut dy.data);
                let (dz, ng) = block.norms[j].backward(&bc.bn_caches[j], &dy)?;
                let (dx, cg) = block.convs[j].backward(&bc.conv_inputs[j], &dz)?;
                conv_grads.push(cg);
                norm_grads.push(ng);
                dy = dx;
            }
            conv_grads.reverse();
            norm_grads.reverse();
            let mut flat = Vec::new();
            for (cg, ng) in conv_grads.into_iter().zip(norm_grads) {
                flat.push(cg.weight);
                flat.push(cg.bias);
                flat.push(ng.gamma);
                flat.push(ng.beta);
            }
            flat.extend([fc1_grads.weight, fc1_grads.bias, fc2_grads.weight, fc2_grads.bias]);
            block_grads[b] = flat;

            let mut sizes = vec![];
            for &c in &block.input_split {
                if c > 0 {
                    sizes.push(c);
                }
            }
            let mut parts = dy.split_channels(&sizes)?.into_iter();
            if block.input_split[0] > 0 {
                parts.next();
            }
            let g_prev_features = if block.input_split[1] > 0 { parts.next() } else { None };
            let g_vis = parts.next().expect("visualization channel");

            if b == 0 {
                break;
            }
            if opts.detach_param_path {
                g_params.iter_mut().for_each(|g| g.fill(0.0));
            } else if opts.through_visualization {
                let raster = self.config.raster(b);
                let factor = self.config.frame_factor(b);
                for (s, gp) in g_params.iter_mut().enumerate() {
                    let record = bc.renders[s].as_ref().ok_or_else(|| {
                        Error::MismatchedRecord("cache holds no render records".into())
                    })?;
                    let gv = rasterize_backward(
                        record,
                        g_vis.sample(s),
                        model,
                        &bc.frame_params[s],
                        &raster,
                    )?;
                    for (k, (a, c)) in gp.iter_mut().zip(gv).enumerate() {
                        *a += if k < 8 { factor * c } else { c };
                    }
                }
            }
            g_features = g_prev_features;
        }
        Ok(block_grads.into_iter().flatten().flatten().collect())
    }
}
