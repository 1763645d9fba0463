//! Toy training, evaluation and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{BackwardOptions, BlockConfig, ForwardMode, LossKind, Network};
use super::tensor::Tensor;
use crate::annotation::write_atomic;
use crate::camera::{project_landmarks, ParamVector};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fit::{initialize_params, jitter_bbox};
use crate::loss::{build_weights, landmark_loss, mape, nme, param_loss, LossWeights};
use crate::model::ShapeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Scale each output by the spread of the training updates it must
    /// produce.
    pub normalize_outputs: bool,
    pub detach_param_path: bool,
    pub through_visualization: bool,
    /// Zero-initialize the last fully connected layer of every block.
    pub zero_init_final: bool,
    /// Start each training sample from a freshly jittered box every epoch.
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.95,
            momentum: 0.99,
            weight_decay: 0.005,
            clip_norm: 10.0,
            normalize_outputs: true,
            detach_param_path: false,
            through_visualization: true,
            zero_init_final: true,
            jitter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    fn backward_options(&self) -> BackwardOptions {
        BackwardOptions {
            detach_param_path: self.detach_param_path,
            through_visualization: self.through_visualization,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// 1-based block index; 0 is the initialization.
    pub block: usize,
    pub train_loss: f64,
    pub train_nme: f64,
    pub val_nme: f64,
}

/// Mean landmark errors after each block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub init_nme: f64,
    pub init_mape: f64,
    pub nme: Vec<f64>,
    pub mape: Vec<f64>,
}

impl Evaluation {
    pub fn final_nme(&self) -> f64 {
        *self.nme.last().unwrap_or(&self.init_nme)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub network: Network,
    pub loss_weights: LossWeights,
    pub history: Vec<EpochMetrics>,
    pub final_train: Evaluation,
    pub final_val: Evaluation,
}

/// Initial estimates from each sample's box.
pub fn initial_params(model: &ShapeModel, samples: &[Sample]) -> Result<Vec<ParamVector>> {
    samples
        .iter()
        .map(|s| initialize_params(&s.bbox, model))
        .collect()
}

pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let size = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?
        .image_size;
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        if s.image_size != size || s.image.len() != size * size {
            return Err(Error::InvalidInput("images in a batch differ in size".into()));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::from_vec(samples.len(), 1, size, size, data)
}

/// Per-sample loss gradients for every block, indexed `[block][sample]`.
pub type BlockLossGrads = Vec<Vec<Vec<f64>>>;

/// Per-block losses summed over the batch, and `loss_grads[b][s]`, all
/// scaled by the block weight and `1 / batch`.
pub fn block_losses(
    net: &Network,
    model: &ShapeModel,
    outputs: &[Vec<ParamVector>],
    samples: &[&Sample],
    weights: &LossWeights,
) -> Result<(Vec<f64>, BlockLossGrads)> {
    let n = samples.len() as f64;
    let dim = net.param_dim();
    let zeros = vec![0.0; dim];
    let mut losses = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    for (params, spec) in outputs.iter().zip(&net.config.loss_schedule) {
        let mut total = 0.0;
        let mut g_block = Vec::with_capacity(samples.len());
        for (p, s) in params.iter().zip(samples) {
            let (l, mut g) = match spec.kind {
                LossKind::Param => param_loss(&p.to_vec(), &s.params.to_vec(), weights)?,
                LossKind::Landmark => landmark_loss(model, p, &zeros, &s.landmarks)?,
            };
            total += spec.weight * l / n;
            g.iter_mut().for_each(|v| *v *= spec.weight / n);
            g_block.push(g);
        }
        losses.push(total);
        grads.push(g_block);
    }
    Ok((losses, grads))
}

/// Per-block NME and MAPE over `samples` using running batch-norm
/// statistics.
pub fn evaluate(net: &Network, model: &ShapeModel, samples: &[Sample], batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let nb = net.blocks.len();
    let (mut init_nme, mut init_mape) = (0.0, 0.0);
    let mut nmes = vec![0.0; nb];
    let mut mapes = vec![0.0; nb];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = image_batch(&refs)?;
        let p0 = initial_params(model, chunk)?;
        let out = net.forward::<ChaCha8Rng>(model, &images, &p0, ForwardMode::Eval)?;
        for (i, s) in chunk.iter().enumerate() {
            let lm = project_landmarks(model, &p0[i])?;
            init_nme += nme(&lm, &s.landmarks, &s.bbox)?;
            init_mape += mape(&lm, &s.landmarks)?;
            for b in 0..nb {
                let lm = project_landmarks(model, &out.params[b][i])?;
                nmes[b] += nme(&lm, &s.landmarks, &s.bbox)?;
                mapes[b] += mape(&lm, &s.landmarks)?;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        init_nme: init_nme / n,
        init_mape: init_mape / n,
        nme: nmes.into_iter().map(|v| v / n).collect(),
        mape: mapes.into_iter().map(|v| v / n).collect(),
    })
}

fn output_scale(model: &ShapeModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let p0 = initial_params(model, samples)?;
    let dim = model.param_dim();
    let n = samples.len() as f64;
    let diffs: Vec<Vec<f64>> = samples
        .iter()
        .zip(&p0)
        .map(|(s, p)| s.params.diff(p))
        .collect::<Result<_>>()?;
    Ok((0..dim)
        .map(|k| {
            let mean = diffs.iter().map(|d| d[k]).sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect())
}

/// Trains a freshly initialized network on `train` and tracks per-block
/// NME on both sets after every epoch.
pub fn train_toy(
    model: &ShapeModel,
    train: &[Sample],
    val: &[Sample],
    config: BlockConfig,
    hyper: &TrainConfig,
) -> Result<TrainReport> {
    hyper.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = Network::new(config, model, &mut rng, hyper.zero_init_final)?;
    if hyper.normalize_outputs {
        net.output_scale = output_scale(model, train)?;
    }
    let truth: Vec<ParamVector> = train.iter().map(|s| s.params.clone()).collect();
    let weights = build_weights(model, &truth)?;
    let p0_all = initial_params(model, train)?;
    let mut velocity = vec![0.0; net.n_params()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = hyper.learning_rate;
    let mut history = Vec::new();
    let eval_batch = 32;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let nb = net.blocks.len();
        let mut epoch_loss = vec![0.0; nb];
        for (step, idx) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let images = image_batch(&batch)?;
            let p0: Vec<ParamVector> = if hyper.jitter {
                idx.iter()
                    .map(|&i| {
                        let b = jitter_bbox(&train[i].bbox, rng.gen(), 1)?[0];
                        initialize_params(&b, model)
                    })
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| p0_all[i].clone()).collect()
            };
            let out = net.forward(model, &images, &p0, ForwardMode::Train(Some(&mut rng)))?;
            let (losses, grads) = block_losses(&net, model, &out.params, &batch, &weights)?;
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {step}: per-block losses {losses:?}"
                )));
            }
            for (e, l) in epoch_loss.iter_mut().zip(&losses) {
                *e += l * batch.len() as f64;
            }
            let mut g = net.backward(model, &out.cache, &grads, hyper.backward_options())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "weight gradient at epoch {epoch}, batch {step}"
                )));
            }
            if hyper.clip_norm > 0.0 {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > hyper.clip_norm {
                    let k = hyper.clip_norm / norm;
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
            net.update_running_stats(&out.cache, batch.len());
            let (mu, wd) = (hyper.momentum, hyper.weight_decay);
            let mut offset = 0;
            net.for_each_param_mut(&g, |w, gw| {
                let v = &mut velocity[offset..offset + w.len()];
                for ((wi, gi), vi) in w.iter_mut().zip(gw).zip(v.iter_mut()) {
                    *vi = mu * *vi - lr * (gi + wd * *wi);
                    *wi += *vi;
                }
                offset += w.len();
            });
        }
        lr *= hyper.lr_decay;
        let tr = evaluate(&net, model, train, eval_batch)?;
        let va = evaluate(&net, model, val, eval_batch)?;
        let n = train.len() as f64;
        history.push(EpochMetrics {
            epoch,
            block: 0,
            train_loss: epoch_loss.iter().sum::<f64>() / n,
            train_nme: tr.init_nme,
            val_nme: va.init_nme,
        });
        for (b, loss) in epoch_loss.iter().enumerate().take(nb) {
            history.push(EpochMetrics {
                epoch,
                block: b + 1,
                train_loss: loss / n,
                train_nme: tr.nme[b],
                val_nme: va.nme[b],
            });
        }
    }
    let final_train = evaluate(&net, model, train, eval_batch)?;
    let final_val = evaluate(&net, model, val, eval_batch)?;
    Ok(TrainReport {
        network: net,
        loss_weights: weights,
        history,
        final_train,
        final_val,
    })
}

/// CSV with header `epoch,block,train_loss,train_nme,val_nme`. Block 0 rows
/// hold the initialization NME and the summed loss.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,block,train_loss,train_nme,val_nme\n");
    for m in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.block, m.train_loss, m.train_nme, m.val_nme
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    write_atomic(path, metrics_csv(history).as_bytes())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub network: Network,
    pub loss_weights: Option<LossWeights>,
}

impl Checkpoint {
    pub fn new(network: Network, loss_weights: Option<LossWeights>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            network,
            loss_weights,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, ckpt)?;
    buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        section: path.display().to_string(),
        message: e.to_string(),
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dim = ckpt.network.param_dim();
    ckpt.network.config.validate(dim)?;
    Ok(ckpt)
}
