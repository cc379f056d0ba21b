//! The forecaster: configuration, parameter tensors, and the forward pass.
//!
//! Per layer the block is
//!
//! ```text
//! U  = depthwise_causal_conv(H, Σ_m taps_m)
//! Ĥ  = U ⊙ SE-gate(H)
//! Y  = LN(H + dropout(Ĥ))
//! Z  = GLU(Y)
//! H' = LN(Y + dropout(Z))
//! ```
//!
//! and the head reads the last time step of the final layer.

pub(crate) mod forward;
pub mod ops;

pub use forward::{forward, forward_batch, forward_with, ForwardTrace, LayerTrace, Mode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::sskernel::{
    build_legs, discretize, dt_schedule, impulse_response, mix_taps, DiscreteTransition, LegsOperator, SsmComponent,
    Taps,
};

/// How the squeeze vector of the SE gate is pooled over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squeeze {
    /// Running mean over rows `1..=t`, one gate per time step. Keeps every
    /// activation at time `t` independent of rows after `t`.
    #[default]
    Causal,
    /// One mean over the whole window, one gate for all time steps.
    Window,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// F
    pub n_features: usize,
    /// L
    pub window: usize,
    /// O (1 for a single target, F for all features)
    pub output_dim: usize,
    /// d
    pub width: usize,
    /// N
    pub n_state: usize,
    /// M
    pub n_components: usize,
    pub n_layers: usize,
    /// L_k
    pub kernel_len: usize,
    /// SE bottleneck is `ceil(d / r)` wide.
    pub se_reduction: usize,
    /// GLU hidden width is `ceil(α·d)`.
    pub glu_ratio: f64,
    pub dropout: f64,
    pub ln_epsilon: f64,
    pub squeeze: Squeeze,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_features: 13,
            window: 32,
            output_dim: 1,
            width: 128,
            n_state: 64,
            n_components: 4,
            n_layers: 4,
            kernel_len: 32,
            se_reduction: 4,
            glu_ratio: 1.0,
            dropout: 0.1,
            ln_epsilon: 1e-5,
            squeeze: Squeeze::Causal,
        }
    }
}

impl ModelConfig {
    pub fn se_hidden(&self) -> usize {
        self.width.div_ceil(self.se_reduction.max(1))
    }

    pub fn glu_hidden(&self) -> usize {
        (self.glu_ratio * self.width as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("window", self.window),
            ("output_dim", self.output_dim),
            ("width", self.width),
            ("n_state", self.n_state),
            ("n_components", self.n_components),
            ("n_layers", self.n_layers),
            ("kernel_len", self.kernel_len),
            ("se_reduction", self.se_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model config: {name} must be positive")));
            }
        }
        if self.output_dim != 1 && self.output_dim != self.n_features {
            return Err(Error::InvalidArgument(format!(
                "model config: output_dim must be 1 or n_features ({}), got {}",
                self.n_features, self.output_dim
            )));
        }
        if self.kernel_len > self.window {
            return Err(Error::InvalidArgument(format!(
                "model config: kernel_len {} exceeds window {}",
                self.kernel_len, self.window
            )));
        }
        if !(self.glu_ratio > 0.0) || !self.glu_ratio.is_finite() || self.glu_hidden() == 0 {
            return Err(Error::InvalidArgument("model config: glu_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("model config: dropout must lie in [0, 1)".into()));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidArgument("model config: ln_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form trainable-parameter count:
///
/// ```text
/// F·d                                   input map
/// + L_ℓ · ( M·(2·d·N + d + 1)           B, C, D, tau per component
///         + 2·d·⌈d/r⌉                   SE
///         + 4·d                         two LayerNorms
///         + 3·d·h )                     GLU, h = ⌈α·d⌉
/// + d·O + O                             head
/// ```
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.width;
    let per_component = 2 * d * cfg.n_state + d + 1;
    let per_layer =
        cfg.n_components * per_component + 2 * d * cfg.se_hidden() + 4 * d + 3 * d * cfg.glu_hidden();
    cfg.n_features * d + cfg.n_layers * per_layer + d * cfg.output_dim + cfg.output_dim
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub components: Vec<SsmComponent<T>>,
    /// d × ⌈d/r⌉
    pub se_w1: Mat<T>,
    /// ⌈d/r⌉ × d
    pub se_w2: Mat<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    /// d × h
    pub glu_wa: Mat<T>,
    /// d × h
    pub glu_wg: Mat<T>,
    /// h × d
    pub glu_wdown: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// F × d
    pub w_in: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    /// d × O
    pub w_head: Mat<T>,
    pub b_head: Vec<T>,
}

/// Gradients mirror the parameter layout exactly.
pub type ParamGrads<T> = ModelParams<T>;

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero tensors with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, r, h) = (cfg.width, cfg.se_hidden(), cfg.glu_hidden());
        let layer = LayerParams {
            components: vec![SsmComponent::zeros(d, cfg.n_state); cfg.n_components],
            se_w1: Mat::zeros(d, r),
            se_w2: Mat::zeros(r, d),
            ln1_gamma: vec![T::zero(); d],
            ln1_beta: vec![T::zero(); d],
            ln2_gamma: vec![T::zero(); d],
            ln2_beta: vec![T::zero(); d],
            glu_wa: Mat::zeros(d, h),
            glu_wg: Mat::zeros(d, h),
            glu_wdown: Mat::zeros(h, d),
        };
        Self {
            w_in: Mat::zeros(cfg.n_features, d),
            layers: vec![layer; cfg.n_layers],
            w_head: Mat::zeros(d, cfg.output_dim),
            b_head: vec![T::zero(); cfg.output_dim],
        }
    }

    /// Random initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let legs = build_legs::<T>(cfg.n_state)?;
        let (f, d, r, h) = (cfg.n_features, cfg.width, cfg.se_hidden(), cfg.glu_hidden());
        let dts = dt_schedule(cfg.n_components);
        let w_in = gaussian(f, d, 1.0 / (f as f64).sqrt(), &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                components: dts.iter().map(|&dt| SsmComponent::init(&legs, d, dt, &mut rng)).collect(),
                se_w1: gaussian(d, r, 1.0 / (d as f64).sqrt(), &mut rng),
                se_w2: gaussian(r, d, 1.0 / (r as f64).sqrt(), &mut rng),
                ln1_gamma: vec![T::one(); d],
                ln1_beta: vec![T::zero(); d],
                ln2_gamma: vec![T::one(); d],
                ln2_beta: vec![T::zero(); d],
                glu_wa: gaussian(d, h, 1.0 / (d as f64).sqrt(), &mut rng),
                glu_wg: gaussian(d, h, 1.0 / (d as f64).sqrt(), &mut rng),
                glu_wdown: gaussian(h, d, 1.0 / (h as f64).sqrt(), &mut rng),
            })
            .collect();
        let w_head = gaussian(d, cfg.output_dim, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self { w_in, layers, w_head, b_head: vec![T::zero(); cfg.output_dim] })
    }

    /// Every tensor in a fixed order with a stable name and shape.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        let mat = |m: &Mat<T>| vec![m.rows(), m.cols()];
        out.push(("w_in".into(), mat(&self.w_in), self.w_in.as_slice()));
        for (l, layer) in self.layers.iter().enumerate() {
            for (m, comp) in layer.components.iter().enumerate() {
                let p = format!("layers.{l}.components.{m}");
                let bc = vec![comp.channels, comp.n_state];
                out.push((format!("{p}.b"), bc.clone(), &comp.b));
                out.push((format!("{p}.c"), bc, &comp.c));
                out.push((format!("{p}.d_skip"), vec![comp.channels], &comp.d_skip));
                out.push((format!("{p}.tau_raw"), vec![], std::slice::from_ref(&comp.tau_raw)));
            }
            let p = format!("layers.{l}");
            out.push((format!("{p}.se_w1"), mat(&layer.se_w1), layer.se_w1.as_slice()));
            out.push((format!("{p}.se_w2"), mat(&layer.se_w2), layer.se_w2.as_slice()));
            out.push((format!("{p}.ln1_gamma"), vec![layer.ln1_gamma.len()], &layer.ln1_gamma));
            out.push((format!("{p}.ln1_beta"), vec![layer.ln1_beta.len()], &layer.ln1_beta));
            out.push((format!("{p}.ln2_gamma"), vec![layer.ln2_gamma.len()], &layer.ln2_gamma));
            out.push((format!("{p}.ln2_beta"), vec![layer.ln2_beta.len()], &layer.ln2_beta));
            out.push((format!("{p}.glu_wa"), mat(&layer.glu_wa), layer.glu_wa.as_slice()));
            out.push((format!("{p}.glu_wg"), mat(&layer.glu_wg), layer.glu_wg.as_slice()));
            out.push((format!("{p}.glu_wdown"), mat(&layer.glu_wdown), layer.glu_wdown.as_slice()));
        }
        out.push(("w_head".into(), mat(&self.w_head), self.w_head.as_slice()));
        out.push(("b_head".into(), vec![self.b_head.len()], &self.b_head));
        out
    }

    /// Mutable views in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.w_in.as_mut_slice()];
        for layer in &mut self.layers {
            for comp in &mut layer.components {
                out.push(&mut comp.b);
                out.push(&mut comp.c);
                out.push(&mut comp.d_skip);
                out.push(std::slice::from_mut(&mut comp.tau_raw));
            }
            out.push(layer.se_w1.as_mut_slice());
            out.push(layer.se_w2.as_mut_slice());
            out.push(&mut layer.ln1_gamma);
            out.push(&mut layer.ln1_beta);
            out.push(&mut layer.ln2_gamma);
            out.push(&mut layer.ln2_beta);
            out.push(layer.glu_wa.as_mut_slice());
            out.push(layer.glu_wg.as_mut_slice());
            out.push(layer.glu_wdown.as_mut_slice());
        }
        out.push(self.w_head.as_mut_slice());
        out.push(&mut self.b_head);
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.named_tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn sum_squares(&self) -> T {
        self.tensors().iter().flat_map(|t| t.iter()).map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let got = self.named_tensors();
        let expected = want.named_tensors();
        if got.len() != expected.len() {
            return Err(Error::shape(
                "ModelParams",
                format!("{} tensors, config implies {}", got.len(), expected.len()),
            ));
        }
        for ((name, shape, data), (_, wshape, wdata)) in got.iter().zip(&expected) {
            if shape != wshape || data.len() != wdata.len() {
                return Err(Error::shape("ModelParams", format!("{name}: {shape:?} vs {wshape:?}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv_m = |m: &Mat<T>| Mat::from_fn(m.rows(), m.cols(), |i, j| U::of(m[(i, j)].f64()));
        let conv_v = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ModelParams {
            w_in: conv_m(&self.w_in),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    components: l
                        .components
                        .iter()
                        .map(|c| SsmComponent {
                            channels: c.channels,
                            n_state: c.n_state,
                            b: conv_v(&c.b),
                            c: conv_v(&c.c),
                            d_skip: conv_v(&c.d_skip),
                            tau_raw: U::of(c.tau_raw.f64()),
                        })
                        .collect(),
                    se_w1: conv_m(&l.se_w1),
                    se_w2: conv_m(&l.se_w2),
                    ln1_gamma: conv_v(&l.ln1_gamma),
                    ln1_beta: conv_v(&l.ln1_beta),
                    ln2_gamma: conv_v(&l.ln2_gamma),
                    ln2_beta: conv_v(&l.ln2_beta),
                    glu_wa: conv_m(&l.glu_wa),
                    glu_wg: conv_m(&l.glu_wg),
                    glu_wdown: conv_m(&l.glu_wdown),
                })
                .collect(),
            w_head: conv_m(&self.w_head),
            b_head: conv_v(&self.b_head),
        }
    }
}

/// One layer's discretized transitions and taps.
#[derive(Clone, Debug)]
pub struct LayerKernels<T> {
    pub transitions: Vec<DiscreteTransition<T>>,
    pub component_taps: Vec<Taps<T>>,
    /// Mixture (sum over components), `d × L_k`.
    pub taps: Taps<T>,
}

/// Kernels for every layer, built from the current `(tau, B, C, D)`.
#[derive(Clone, Debug)]
pub struct KernelBank<T> {
    pub legs: LegsOperator<T>,
    pub layers: Vec<LayerKernels<T>>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn build(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Self> {
        let legs = build_legs::<T>(cfg.n_state)?;
        Self::build_with(legs, params, cfg)
    }

    pub fn build_with(legs: LegsOperator<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let mut transitions = Vec::with_capacity(layer.components.len());
            let mut component_taps = Vec::with_capacity(layer.components.len());
            for comp in &layer.components {
                let dt = comp.dt();
                if !(dt > T::zero() && dt.is_finite()) {
                    return Err(Error::numeric(
                        "kernel_bank",
                        format!("time step softplus({}) = {dt} is not positive and finite", comp.tau_raw),
                    ));
                }
                let t = discretize(&legs, dt)?;
                component_taps.push(impulse_response(comp, &t, cfg.kernel_len)?);
                transitions.push(t);
            }
            let taps = mix_taps(&component_taps)?;
            layers.push(LayerKernels { transitions, component_taps, taps });
        }
        Ok(Self { legs, layers })
    }
}
