//! Patch training: batched MSE regression with Adam, per-epoch validation,
//! and early stopping that restores the best-validation parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::LabeledPatch;
use crate::error::{Error, Result};
use crate::model::{LayerParams, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("TrainConfig", "learning rate must be positive"));
        }
        if self.patience < 1 {
            return Err(Error::invalid("TrainConfig", "patience must be at least 1"));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::invalid(
                "TrainConfig",
                "batch size and max epochs must be at least 1",
            ));
        }
        Ok(())
    }
}

/// First/second moment estimates per parameter tensor plus the step counter.
pub struct AdamState {
    m: Vec<LayerParams>,
    v: Vec<LayerParams>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[LayerParams]) -> AdamState {
        let zeros = |p: &LayerParams| LayerParams {
            weights: Tensor::zeros(p.weights.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        };
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

fn update_tensor(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    cfg: &TrainConfig,
    corr1: f32,
    corr2: f32,
) {
    let g = grad.data();
    let m = m.data_mut();
    let v = v.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(
    params: &mut [LayerParams],
    grads: &[LayerParams],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("adam_step", "parameter/gradient layer counts differ"));
    }
    for (idx, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.weights.shape() != g.weights.shape() || p.bias.shape() != g.bias.shape() {
            return Err(Error::invalid(
                "adam_step",
                format!("layer {idx} gradient shape does not match its parameters"),
            ));
        }
        if !g.weights.all_finite() || !g.bias.all_finite() {
            let (lo, hi) = g.weights.min_max();
            return Err(Error::NonFinite {
                context: format!(
                    "gradient for layer {idx} at step {} (weight range {lo}..{hi})",
                    state.t + 1
                ),
            });
        }
    }
    state.t += 1;
    let corr1 = 1.0 - (cfg.beta1 as f64).powi(state.t as i32) as f32;
    let corr2 = 1.0 - (cfg.beta2 as f64).powi(state.t as i32) as f32;
    for idx in 0..params.len() {
        update_tensor(
            &mut params[idx].weights,
            &grads[idx].weights,
            &mut state.m[idx].weights,
            &mut state.v[idx].weights,
            cfg,
            corr1,
            corr2,
        );
        update_tensor(
            &mut params[idx].bias,
            &grads[idx].bias,
            &mut state.m[idx].bias,
            &mut state.v[idx].bias,
            cfg,
            corr1,
            corr2,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Number of independent accumulation buckets for batch gradients. The
/// bucket split and the bucket reduction order are fixed, so results are
/// bitwise identical for any worker count.
const GRAD_BUCKETS: usize = 8;

fn zero_grads(params: &[LayerParams]) -> Vec<LayerParams> {
    params
        .iter()
        .map(|p| LayerParams {
            weights: Tensor::zeros(p.weights.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        })
        .collect()
}

fn add_grads(total: &mut [LayerParams], part: &[LayerParams]) {
    for (t, p) in total.iter_mut().zip(part) {
        for (a, b) in t.weights.data_mut().iter_mut().zip(p.weights.data()) {
            *a += b;
        }
        for (a, b) in t.bias.data_mut().iter_mut().zip(p.bias.data()) {
            *a += b;
        }
    }
}

/// Mean-squared-error gradients of a batch, averaged over `batch_len`.
/// Returns the summed squared error alongside.
fn batch_gradients(
    net: &Network,
    batch: &[&LabeledPatch],
) -> Result<(Vec<LayerParams>, f64)> {
    let batch_len = batch.len();
    let bucket_size = batch_len.div_ceil(GRAD_BUCKETS);
    let buckets: Vec<Result<(Vec<LayerParams>, f64)>> = batch
        .par_chunks(bucket_size)
        .map(|chunk| {
            let mut grads = zero_grads(&net.params);
            let mut sq_err = 0.0f64;
            for sample in chunk {
                let tape = net.forward_train(&sample.pixels)?;
                if tape.output.len() != 1 {
                    return Err(Error::invalid("train", "network does not emit a scalar"));
                }
                let pred = tape.output.data()[0];
                let diff = pred - sample.objectness;
                sq_err += (diff as f64) * (diff as f64);
                let grad_out =
                    Tensor::from_vec(&[1], vec![2.0 * diff / batch_len as f32])?;
                let (sample_grads, _) = net.backward(&tape, &grad_out)?;
                add_grads(&mut grads, &sample_grads);
            }
            Ok((grads, sq_err))
        })
        .collect();

    let mut total = zero_grads(&net.params);
    let mut sq_err = 0.0f64;
    for bucket in buckets {
        let (grads, err) = bucket?;
        add_grads(&mut total, &grads);
        sq_err += err;
    }
    Ok((total, sq_err))
}

/// Mean squared error of the network's scalar output over a patch set.
pub fn mean_mse(net: &Network, set: &[LabeledPatch]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("mean_mse", "empty patch set"));
    }
    let bucket_size = set.len().div_ceil(GRAD_BUCKETS);
    let sums: Vec<Result<f64>> = set
        .par_chunks(bucket_size)
        .map(|chunk| {
            let mut acc = 0.0f64;
            for sample in chunk {
                let pred = net.forward_patch(&sample.pixels)?;
                let diff = (pred - sample.objectness) as f64;
                acc += diff * diff;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / set.len() as f64)
}

/// Trains in place; `net.params` end up at the best-validation epoch. The
/// history holds one entry per epoch actually run.
pub fn train(
    net: &mut Network,
    train_set: &[LabeledPatch],
    val_set: &[LabeledPatch],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "training and validation sets must be nonempty"));
    }
    let mut state = AdamState::new(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<LayerParams>> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sq_err = 0.0f64;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledPatch> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let (grads, sq_err) = batch_gradients(net, &batch)?;
            train_sq_err += sq_err;
            adam_step(&mut net.params, &grads, &mut state, cfg).map_err(|e| match e {
                Error::NonFinite { context } => Error::Diverged {
                    epoch,
                    detail: context,
                },
                other => other,
            })?;
        }
        let train_mse = train_sq_err / train_set.len() as f64;
        let val_mse = mean_mse(net, val_set)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss is not finite (train {train_mse}, val {val_mse})"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_params = Some(net.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(p) = best_params {
        net.params = p;
    }
    Ok(history)
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_mse,val_mse\n");
    for h in history {
        text.push_str(&format!("{},{},{}\n", h.epoch, h.train_mse, h.val_mse));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
