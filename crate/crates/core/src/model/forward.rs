use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

use super::ops::{
    apply_gate, depthwise_causal_conv_segments, embed, glu_forward, layer_norm_rows, se_gate_segments, GluOut,
    LayerNormOut, SeGate,
};
use super::{KernelBank, ModelConfig, ModelParams};

/// Forward-pass mode. Train mode applies inverted dropout with masks drawn
/// from a ChaCha8 stream seeded by `seed`, so the same seed reproduces the
/// same masks regardless of the input values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Everything one layer's backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    /// `H^(ℓ−1)`
    pub input: Mat<T>,
    /// Conv output `U`
    pub conv: Mat<T>,
    pub se: SeGate<T>,
    /// Dropout scale per entry (`0` or `1/(1−p)`) after the SE branch.
    pub se_mask: Option<Mat<T>>,
    /// `Y = LN(H + dropout(U ⊙ g))`
    pub ln1: LayerNormOut<T>,
    pub glu: GluOut<T>,
    pub glu_mask: Option<Mat<T>>,
    /// `H^(ℓ) = LN(Y + dropout(Z))`
    pub ln2: LayerNormOut<T>,
}

/// Trace of one or more windows stacked along rows, `window` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub window: usize,
    pub x: Mat<T>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// `H^(L_ℓ)`
    pub fn final_hidden(&self) -> &Mat<T> {
        &self.layers.last().expect("at least one layer").ln2.out
    }

    pub fn n_windows(&self) -> usize {
        self.x.rows() / self.window
    }

    /// Every per-time-step activation, `(name, matrix)`. Used by causality
    /// probes; window-pooled SE tensors have a single row and are skipped.
    pub fn time_indexed(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        for (l, lt) in self.layers.iter().enumerate() {
            out.push((format!("{l}.input"), &lt.input));
            out.push((format!("{l}.conv"), &lt.conv));
            if lt.se.gate.rows() == lt.input.rows() {
                out.push((format!("{l}.se.squeeze"), &lt.se.squeeze));
                out.push((format!("{l}.se.pre"), &lt.se.pre));
                out.push((format!("{l}.se.gate"), &lt.se.gate));
            }
            out.push((format!("{l}.ln1.xhat"), &lt.ln1.xhat));
            out.push((format!("{l}.ln1.out"), &lt.ln1.out));
            out.push((format!("{l}.glu.a"), &lt.glu.a));
            out.push((format!("{l}.glu.g"), &lt.glu.g));
            out.push((format!("{l}.glu.out"), &lt.glu.out));
            out.push((format!("{l}.ln2.xhat"), &lt.ln2.xhat));
            out.push((format!("{l}.ln2.out"), &lt.ln2.out));
        }
        out
    }
}

/// Masks for stacked windows; block `w` of `rows / rngs.len()` rows draws
/// from `rngs[w]`.
/// An entry is dropped when its uniform 32-bit draw falls below `p · 2³²`.
fn stacked_mask<T: Scalar>(rows: usize, cols: usize, p: f64, rngs: &mut [ChaCha8Rng]) -> Mat<T> {
    let keep = T::of(1.0 / (1.0 - p));
    let threshold = (p * 4_294_967_296.0) as u32;
    let block = rows / rngs.len() * cols;
    let mut draws = vec![0u32; block];
    let mut mask = Mat::zeros(rows, cols);
    for (out, rng) in mask.as_mut_slice().chunks_mut(block).zip(rngs) {
        rng.fill(&mut draws[..]);
        for (m, &u) in out.iter_mut().zip(&draws) {
            *m = if u < threshold { T::zero() } else { keep };
        }
    }
    mask
}

fn residual<T: Scalar>(base: &Mat<T>, branch: &Mat<T>, mask: Option<&Mat<T>>) -> Mat<T> {
    let mut out = base.clone();
    match mask {
        Some(m) => {
            for ((o, &b), &k) in out.as_mut_slice().iter_mut().zip(branch.as_slice()).zip(m.as_slice()) {
                *o += b * k;
            }
        }
        None => {
            for (o, &b) in out.as_mut_slice().iter_mut().zip(branch.as_slice()) {
                *o += b;
            }
        }
    }
    out
}

/// Runs the network on one standardized window (`L × F`, row-major),
/// building kernels from the current parameters. Returns the `O` outputs and,
/// in train mode, the trace.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &[T],
    mode: Mode,
) -> Result<(Vec<T>, Option<ForwardTrace<T>>)> {
    let bank = KernelBank::build(params, cfg)?;
    forward_with(params, cfg, &bank, x, mode)
}

/// [`forward`] with prebuilt kernels.
pub fn forward_with<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    x: &[T],
    mode: Mode,
) -> Result<(Vec<T>, Option<ForwardTrace<T>>)> {
    let (out, trace) = run_one(params, cfg, bank, x, mode)?;
    Ok((out, matches!(mode, Mode::Train { .. }).then_some(trace)))
}

/// Eval-mode outputs for many windows, `O` values per window.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    xs: &[&[T]],
) -> Result<Vec<Vec<T>>> {
    const STACK: usize = 64;
    let mut out = Vec::with_capacity(xs.len());
    for group in xs.chunks(STACK) {
        let (y, _) = run(params, cfg, bank, group, None)?;
        out.extend(y.chunks(cfg.output_dim).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Like [`forward_with`] but always returns the trace.
pub(crate) fn run_one<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    x: &[T],
    mode: Mode,
) -> Result<(Vec<T>, ForwardTrace<T>)> {
    match mode {
        Mode::Eval => run(params, cfg, bank, &[x], None),
        Mode::Train { seed } => run(params, cfg, bank, &[x], Some(&[seed])),
    }
}

/// Runs windows stacked along rows. With `seeds` (one per window) dropout is
/// active and window `w` draws its masks from its own stream, so the result
/// for a window does not depend on what it is stacked with. Returns the
/// outputs, `O` per window, and the trace.
pub(crate) fn run<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    xs: &[&[T]],
    seeds: Option<&[u64]>,
) -> Result<(Vec<T>, ForwardTrace<T>)> {
    let (n, len, f) = (xs.len(), cfg.window, cfg.n_features);
    if n == 0 {
        return Err(Error::InvalidArgument("forward over no windows".into()));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != len * f) {
        return Err(Error::shape("forward", format!("window has {} values, expected {len}×{f}", x.len())));
    }
    if seeds.is_some_and(|s| s.len() != n) {
        return Err(Error::shape("forward", "one dropout seed per window"));
    }
    if bank.layers.len() != params.layers.len() || params.layers.len() != cfg.n_layers {
        return Err(Error::shape("forward", "layer count differs between config, params and kernels"));
    }
    let eps = T::of(cfg.ln_epsilon);
    let mut rngs: Option<Vec<ChaCha8Rng>> = match seeds {
        Some(s) if cfg.dropout > 0.0 => Some(s.iter().map(|&k| ChaCha8Rng::seed_from_u64(k)).collect()),
        _ => None,
    };
    let x = Mat::from_vec(n * len, f, xs.concat())?;
    let mut h = embed(&x, &params.w_in)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (lp, lk) in params.layers.iter().zip(&bank.layers) {
        let (rows, d) = (h.rows(), h.cols());
        let conv = depthwise_causal_conv_segments(&h, &lk.taps, len)?;
        let se = se_gate_segments(&h, &lp.se_w1, &lp.se_w2, cfg.squeeze, len)?;
        let gated = apply_gate(&conv, &se.gate)?;
        let se_mask = rngs.as_mut().map(|r| stacked_mask(rows, d, cfg.dropout, r));
        let ln1 = layer_norm_rows(&residual(&h, &gated, se_mask.as_ref()), &lp.ln1_gamma, &lp.ln1_beta, eps)?;
        let glu = glu_forward(&ln1.out, &lp.glu_wa, &lp.glu_wg, &lp.glu_wdown)?;
        let glu_mask = rngs.as_mut().map(|r| stacked_mask(rows, d, cfg.dropout, r));
        let ln2 = layer_norm_rows(&residual(&ln1.out, &glu.out, glu_mask.as_ref()), &lp.ln2_gamma, &lp.ln2_beta, eps)?;
        let next = ln2.out.clone();
        layers.push(LayerTrace { input: h, conv, se, se_mask, ln1, glu, glu_mask, ln2 });
        h = next;
    }
    let o = params.b_head.len();
    let mut out = vec![T::zero(); n * o];
    for (w, y) in out.chunks_mut(o).enumerate() {
        params.w_head.matvec_t_into(h.row((w + 1) * len - 1), y);
        for (v, &b) in y.iter_mut().zip(&params.b_head) {
            *v += b;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("forward", "non-finite output"));
    }
    Ok((out, ForwardTrace { window: len, x, layers }))
}
