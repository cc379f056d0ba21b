//! Objective, gradients, clipped weight-decayed updates, plateau decay and
//! early stopping.

mod backward;
mod fit;

pub use backward::{backward, backward_with};
pub use fit::{batch_gradient, fit, fit_from, EpochRecord, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_batch, KernelBank, ModelConfig, ModelParams, ParamGrads};
use crate::scalar::Scalar;

/// One standardized training pair, borrowed from the dataset.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    /// `L × F`, row-major
    pub x: &'a [T],
    /// length `O`
    pub y: &'a [T],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam moments with decoupled weight decay.
    #[default]
    Adamw,
    /// Plain step on `g̃ + λθ`.
    Sgdwd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tol: f64,
    /// Learning-rate multiplier on plateaus; `None` disables decay and is
    /// written as `"off"` so formats without a null keep it.
    #[serde(with = "plateau_serde")]
    pub plateau_factor: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Worker threads for per-batch gradients; `1` runs inline.
    pub threads: usize,
}

mod plateau_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Factor(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(f) => Repr::Factor(*f),
            None => Repr::Word("off".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            Some(Repr::Factor(f)) => Ok(Some(f)),
            Some(Repr::Word(w)) if w == "off" => Ok(None),
            None => Ok(None),
            Some(Repr::Word(w)) => Err(serde::de::Error::custom(format!("plateau_factor: expected a number or \"off\", found {w:?}"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            batch_size: 256,
            max_epochs: 60,
            patience: 20,
            tol: 1e-6,
            plateau_factor: Some(0.5),
            optimizer: OptimizerKind::Adamw,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.threads == 0 {
            return bad("batch_size, max_epochs, patience and threads must be positive");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        if let Some(b) = self.plateau_factor {
            if !(b > 0.0 && b < 1.0) {
                return bad("plateau_factor must lie strictly inside (0, 1)");
            }
        }
        Ok(())
    }

    /// Non-improving epochs before the learning rate is decayed.
    pub fn plateau_window(&self) -> usize {
        self.patience.div_ceil(2)
    }
}

/// Mean squared error over the batch in eval mode, plus `λ‖θ‖²` when the
/// optimizer is `sgdwd` (AdamW applies decay in the update instead).
pub fn loss<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[Sample<'_, T>],
    train: &TrainConfig,
) -> Result<T> {
    let bank = KernelBank::build(params, cfg)?;
    let mse = mean_squared_error(params, cfg, &bank, batch)?;
    Ok(match train.optimizer {
        OptimizerKind::Sgdwd => mse + T::of(train.weight_decay) * params.sum_squares(),
        OptimizerKind::Adamw => mse,
    })
}

/// `mean_i ‖f_θ(X_i) − y_i‖²` in eval mode.
pub fn mean_squared_error<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    batch: &[Sample<'_, T>],
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    let xs: Vec<&[T]> = batch.iter().map(|s| s.x).collect();
    let preds = forward_batch(params, cfg, bank, &xs)?;
    let mut total = T::zero();
    for (s, pred) in batch.iter().zip(&preds) {
        if pred.len() != s.y.len() {
            return Err(Error::shape("loss", format!("{} outputs vs {} targets", pred.len(), s.y.len())));
        }
        total += pred.iter().zip(s.y).map(|(&p, &y)| (p - y) * (p - y)).sum::<T>();
    }
    let out = total / T::of_usize(batch.len());
    if !out.is_finite() {
        return Err(Error::numeric("loss", "non-finite loss"));
    }
    Ok(out)
}

pub fn global_norm<T: Scalar>(grads: &ParamGrads<T>) -> T {
    grads.sum_squares().sqrt()
}

/// `g · min(1, c_max / ‖g‖)` over all tensors jointly.
pub fn clip_global_norm<T: Scalar>(mut grads: ParamGrads<T>, c_max: T) -> Result<ParamGrads<T>> {
    if !(c_max > T::zero()) {
        return Err(Error::InvalidArgument("clip threshold must be positive".into()));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("clip_global_norm", "non-finite gradient"));
    }
    let norm = global_norm(&grads);
    if norm > c_max {
        grads.scale(c_max / norm);
    }
    Ok(grads)
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub m: ParamGrads<T>,
    pub v: ParamGrads<T>,
    pub t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, cfg: &ModelConfig) -> Self {
        Self { kind, m: ParamGrads::zeros(cfg), v: ParamGrads::zeros(cfg), t: 0 }
    }
}

/// One parameter update with the (already clipped) gradient.
pub fn step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: T,
    weight_decay: T,
) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    state.t += 1;
    match state.kind {
        OptimizerKind::Sgdwd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (w, &gw) in p.iter_mut().zip(g) {
                    *w -= lr * (gw + weight_decay * *w);
                }
            }
        }
        OptimizerKind::Adamw => {
            let (b1, b2) = (T::of(BETA1), T::of(BETA2));
            let bc1 = T::one() - T::of(BETA1.powi(state.t.min(i32::MAX as u64) as i32));
            let bc2 = T::one() - T::of(BETA2.powi(state.t.min(i32::MAX as u64) as i32));
            let eps = T::of(ADAM_EPS);
            let decay = T::one() - lr * weight_decay;
            let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
            let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
            for ((p, g), (m, v)) in tensors.zip(moments) {
                for (((w, &gw), mw), vw) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *w *= decay;
                    *mw = b1 * *mw + (T::one() - b1) * gw;
                    *vw = b2 * *vw + (T::one() - b2) * gw * gw;
                    let mhat = *mw / bc1;
                    let vhat = *vw / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::numeric("step", "parameters became non-finite"));
    }
    Ok(())
}
