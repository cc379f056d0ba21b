use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{kernel_backward, window_backward, PartialGrads};
use super::{clip_global_norm, mean_squared_error, step, OptimizerState, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::model::forward::run;
use crate::model::{KernelBank, ModelConfig, ModelParams, ParamGrads};
use crate::scalar::Scalar;

/// Windows per reduction chunk. Fixed so the summation order (and therefore
/// every bit of the gradient) does not depend on the worker count.
const CHUNK: usize = 16;

/// Windows run through the network together inside a chunk. Small stacks
/// keep every activation matrix in cache.
const STACK: usize = 4;

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches (dropout active).
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub patience_counter: usize,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Set when patience ran out before `max_epochs`.
    pub early_stopped: bool,
}

impl TrainReport {
    pub fn stopped_epoch(&self) -> usize {
        self.epochs.len()
    }
}

/// Mean squared error of the batch in train mode and its exact gradient.
/// Window `i` uses dropout seed `mix(dropout_seed, i)`.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    batch: &[Sample<'_, T>],
    dropout_seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(T, ParamGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient of an empty batch".into()));
    }
    let scale = T::two() / T::of_usize(batch.len());
    let chunk = |(c, windows): (usize, &[Sample<'_, T>])| -> Result<(T, PartialGrads<T>)> {
        if windows.iter().any(|s| s.y.len() != cfg.output_dim) {
            return Err(Error::shape("batch_gradient", "target length differs from output_dim"));
        }
        let mut acc = PartialGrads::zeros(cfg);
        let mut sq = T::zero();
        for (b, group) in windows.chunks(STACK).enumerate() {
            let first = c * CHUNK + b * STACK;
            let xs: Vec<&[T]> = group.iter().map(|s| s.x).collect();
            let seeds: Vec<u64> = (0..group.len()).map(|k| mix(dropout_seed, (first + k) as u64)).collect();
            let (pred, trace) = run(params, cfg, bank, &xs, Some(&seeds))?;
            let mut grad_out = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.iter().zip(group.iter().flat_map(|s| s.y)) {
                sq += (p - y) * (p - y);
                grad_out.push(scale * (p - y));
            }
            window_backward(&trace, params, cfg, bank, &grad_out, &mut acc)?;
        }
        Ok((sq, acc))
    };
    let parts: Vec<Result<(T, PartialGrads<T>)>> = match pool {
        Some(pool) => pool.install(|| batch.par_chunks(CHUNK).enumerate().map(chunk).collect()),
        None => batch.chunks(CHUNK).enumerate().map(chunk).collect(),
    };
    let mut total = PartialGrads::zeros(cfg);
    let mut sq = T::zero();
    for part in parts {
        let (s, g) = part?;
        sq += s;
        total.add_assign(&g);
    }
    kernel_backward(params, bank, &total.taps, &mut total.grads)?;
    let loss = sq / T::of_usize(batch.len());
    if !loss.is_finite() {
        return Err(Error::numeric("batch_gradient", "non-finite training loss"));
    }
    Ok((loss, total.grads))
}

/// Mini-batch training with early stopping on the validation loss. Returns the
/// parameters of the best epoch (not the last).
pub fn fit<T: Scalar>(
    train: &[Sample<'_, T>],
    val: &[Sample<'_, T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainReport)> {
    let init = ModelParams::init(model_cfg, train_cfg.seed)?;
    fit_from(init, train, val, model_cfg, train_cfg, on_epoch)
}

/// [`fit`] starting from given parameters.
pub fn fit_from<T: Scalar>(
    mut params: ModelParams<T>,
    train: &[Sample<'_, T>],
    val: &[Sample<'_, T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainReport)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    params.check_shapes(model_cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fit needs nonempty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let pool = if train_cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(train_cfg.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let legs = crate::sskernel::build_legs::<T>(model_cfg.n_state)?;
    let mut state = OptimizerState::new(train_cfg.optimizer, model_cfg);
    let mut lr = train_cfg.lr;
    let wd = T::of(train_cfg.weight_decay);
    let c_max = T::of(train_cfg.clip_norm);

    let mut best: Option<(ModelParams<T>, f64, usize)> = None;
    let mut counter = 0usize;
    let mut plateau = 0usize;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut early_stopped = false;

    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let epoch_seed = mix(train_cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<Sample<'_, T>> = idx.iter().map(|&i| train[i]).collect();
            let bank = KernelBank::build_with(legs.clone(), &params, model_cfg)?;
            let (loss, grads) =
                batch_gradient(&params, model_cfg, &bank, &batch, mix(epoch_seed, b as u64), pool.as_ref())?;
            loss_sum += loss.f64() * batch.len() as f64;
            let grads = clip_global_norm(grads, c_max)?;
            step(&mut params, &grads, &mut state, T::of(lr), wd)?;
        }
        let bank = KernelBank::build_with(legs.clone(), &params, model_cfg)?;
        let val_loss = mean_squared_error(&params, model_cfg, &bank, val)?.f64();
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_loss < b - train_cfg.tol,
        };
        let lr_used = lr;
        if improved {
            best = Some((params.clone(), val_loss, epoch));
            counter = 0;
            plateau = 0;
        } else {
            counter += 1;
            plateau += 1;
            if let Some(beta) = train_cfg.plateau_factor {
                if plateau >= train_cfg.plateau_window() {
                    lr *= beta;
                    plateau = 0;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr: lr_used,
            patience_counter: counter,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6} lr {:.2e}{}",
            record.train_loss,
            val_loss,
            lr_used,
            if improved { " *" } else { "" }
        );
        on_epoch(&record);
        records.push(record);
        if counter >= train_cfg.patience {
            early_stopped = epoch < train_cfg.max_epochs;
            break;
        }
    }
    let (best_params, best_val_loss, best_epoch) = best.expect("at least one epoch ran");
    Ok((best_params, TrainReport { epochs: records, best_epoch, best_val_loss, early_stopped }))
}
