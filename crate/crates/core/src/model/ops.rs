//! Per-block primitives. Activations are `L × d` row-major matrices (time
//! along rows). Each forward op has a matching `*_backward` that accumulates
//! into caller-owned gradient buffers.

use multiversion::multiversion;

use crate::error::{Error, Result};
use crate::linalg::{axpy, gemm_acc, gemm_nt_acc, gemm_tn_acc, Mat};
use crate::scalar::{gelu, gelu_grad, sigmoid, Scalar};
use crate::sskernel::Taps;

use super::Squeeze;

fn check(op: &'static str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

/// `H = X · W_in`
pub fn embed<T: Scalar>(x: &Mat<T>, w_in: &Mat<T>) -> Result<Mat<T>> {
    check("embed", x.cols() == w_in.rows(), || {
        format!("input has {} features, w_in has {} rows", x.cols(), w_in.rows())
    })?;
    let mut h = Mat::zeros(x.rows(), w_in.cols());
    gemm_acc(x.as_slice(), w_in.as_slice(), h.as_mut_slice(), x.rows(), x.cols(), w_in.cols());
    Ok(h)
}

pub fn embed_backward<T: Scalar>(x: &Mat<T>, grad_h: &Mat<T>, grad_w_in: &mut Mat<T>) {
    gemm_tn_acc(x.as_slice(), grad_h.as_slice(), grad_w_in.as_mut_slice(), x.rows(), x.cols(), grad_h.cols());
}

/// `U[t, c] = Σ_{τ < L_k, τ ≤ t} taps[c][τ] · H[t − τ, c]`
pub fn depthwise_causal_conv<T: Scalar>(h: &Mat<T>, taps: &Taps<T>) -> Result<Mat<T>> {
    depthwise_causal_conv_segments(h, taps, h.rows())
}

fn check_segments(op: &'static str, rows: usize, seg: usize) -> Result<()> {
    check(op, seg > 0 && rows % seg == 0, || format!("{rows} rows do not split into windows of {seg}"))
}

/// [`depthwise_causal_conv`] applied independently to consecutive blocks of
/// `seg` rows (stacked windows).
pub fn depthwise_causal_conv_segments<T: Scalar>(h: &Mat<T>, taps: &Taps<T>, seg: usize) -> Result<Mat<T>> {
    check("depthwise_causal_conv", taps.channels() == h.cols() && !taps.is_empty(), || {
        format!("{} channels vs taps for {} channels × {}", h.cols(), taps.channels(), taps.len())
    })?;
    check_segments("depthwise_causal_conv", h.rows(), seg)?;
    let (rows, d, l_k) = (h.rows(), h.cols(), taps.len());
    // lag-major copy so rows of taps and activations line up channel-wise
    let lagged = Mat::from_fn(l_k, d, |lag, c| taps.channel(c)[lag]);
    let mut u = Mat::zeros(rows, d);
    for start in (0..rows).step_by(seg) {
        // rows lag.. of the output take rows ..seg−lag of the input, both contiguous
        for lag in 0..l_k.min(seg) {
            let out = &mut u.as_mut_slice()[(start + lag) * d..(start + seg) * d];
            let src = &h.as_slice()[start * d..(start + seg - lag) * d];
            mul_add_rows(out, src, lagged.row(lag));
        }
    }
    Ok(u)
}

// The element-wise loops below are compiled a second time for AVX2 and
// selected at run time. Neither build fuses multiply-adds, so both give the
// same bits.

/// `out[r] += k ⊙ src[r]` for every `d`-wide row `r`.
#[multiversion(targets("x86_64+avx2+fma"))]
fn mul_add_rows<T: Scalar>(out: &mut [T], src: &[T], k: &[T]) {
    for (o, x) in out.chunks_exact_mut(k.len()).zip(src.chunks_exact(k.len())) {
        for ((o, &x), &k) in o.iter_mut().zip(x).zip(k) {
            *o += k * x;
        }
    }
}

/// `acc += Σ_r a[r] ⊙ b[r]` over `d`-wide rows.
#[multiversion(targets("x86_64+avx2+fma"))]
fn sum_row_products<T: Scalar>(acc: &mut [T], a: &[T], b: &[T]) {
    for (x, y) in a.chunks_exact(acc.len()).zip(b.chunks_exact(acc.len())) {
        for ((o, &x), &y) in acc.iter_mut().zip(x).zip(y) {
            *o += x * y;
        }
    }
}

/// Accumulates `∂/∂H` (correlation with the taps) and `∂/∂taps` (lagged
/// products) given `∂/∂U`.
pub fn depthwise_causal_conv_backward<T: Scalar>(
    h: &Mat<T>,
    taps: &Taps<T>,
    grad_u: &Mat<T>,
    grad_h: &mut Mat<T>,
    grad_taps: &mut Taps<T>,
) {
    depthwise_causal_conv_backward_segments(h, taps, grad_u, h.rows(), grad_h, grad_taps)
}

/// Backward of [`depthwise_causal_conv_segments`].
pub fn depthwise_causal_conv_backward_segments<T: Scalar>(
    h: &Mat<T>,
    taps: &Taps<T>,
    grad_u: &Mat<T>,
    seg: usize,
    grad_h: &mut Mat<T>,
    grad_taps: &mut Taps<T>,
) {
    let (rows, d, l_k) = (h.rows(), h.cols(), taps.len());
    assert!(seg > 0 && rows % seg == 0, "rows must split into whole windows");
    let lagged = Mat::from_fn(l_k, d, |lag, c| taps.channel(c)[lag]);
    let mut lagged_grad = Mat::<T>::zeros(l_k, d);
    for start in (0..rows).step_by(seg) {
        for lag in 0..l_k.min(seg) {
            let later = &grad_u.as_slice()[(start + lag) * d..(start + seg) * d];
            // ∂/∂H_τ += k_lag ⊙ ∂/∂U_{τ+lag}
            mul_add_rows(&mut grad_h.as_mut_slice()[start * d..(start + seg - lag) * d], later, lagged.row(lag));
            // ∂/∂k_lag += Σ_t ∂/∂U_t ⊙ H_{t−lag}
            sum_row_products(lagged_grad.row_mut(lag), later, &h.as_slice()[start * d..(start + seg - lag) * d]);
        }
    }
    for c in 0..d {
        for (lag, dst) in grad_taps.channel_mut(c).iter_mut().enumerate() {
            *dst += lagged_grad[(lag, c)];
        }
    }
}

/// Temporal mean of `h`: one row per time step (running mean) for
/// [`Squeeze::Causal`], a single row for [`Squeeze::Window`].
pub fn squeeze<T: Scalar>(h: &Mat<T>, mode: Squeeze) -> Mat<T> {
    squeeze_segments(h, mode, h.rows())
}

/// [`squeeze`] restarted every `seg` rows; window pooling yields one row per
/// block.
fn squeeze_segments<T: Scalar>(h: &Mat<T>, mode: Squeeze, seg: usize) -> Mat<T> {
    let (rows, d) = (h.rows(), h.cols());
    let mut acc = vec![T::zero(); d];
    match mode {
        Squeeze::Causal => {
            let mut s = Mat::zeros(rows, d);
            for t in 0..rows {
                let local = t % seg;
                if local == 0 {
                    acc.iter_mut().for_each(|a| *a = T::zero());
                }
                axpy(T::one(), h.row(t), &mut acc);
                let inv = T::one() / T::of_usize(local + 1);
                s.row_mut(t).iter_mut().zip(&acc).for_each(|(o, &a)| *o = a * inv);
            }
            s
        }
        Squeeze::Window => {
            let mut s = Mat::zeros(rows / seg, d);
            let inv = T::one() / T::of_usize(seg);
            for w in 0..rows / seg {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for t in w * seg..(w + 1) * seg {
                    axpy(T::one(), h.row(t), &mut acc);
                }
                s.row_mut(w).iter_mut().zip(&acc).for_each(|(o, &a)| *o = a * inv);
            }
            s
        }
    }
}

fn squeeze_backward<T: Scalar>(grad_s: &Mat<T>, mode: Squeeze, seg: usize, grad_h: &mut Mat<T>) {
    let (rows, d) = (grad_h.rows(), grad_h.cols());
    match mode {
        Squeeze::Causal => {
            // ∂/∂H_τ = Σ_{t ≥ τ} ∂/∂S_t / (t + 1) within each window
            let mut acc = vec![T::zero(); d];
            for t in (0..rows).rev() {
                let local = t % seg;
                if local == seg - 1 {
                    acc.iter_mut().for_each(|a| *a = T::zero());
                }
                axpy(T::one() / T::of_usize(local + 1), grad_s.row(t), &mut acc);
                axpy(T::one(), &acc, grad_h.row_mut(t));
            }
        }
        Squeeze::Window => {
            let inv = T::one() / T::of_usize(seg);
            for t in 0..rows {
                axpy(inv, grad_s.row(t / seg), grad_h.row_mut(t));
            }
        }
    }
}

/// Squeeze-excitation intermediates. `gate` has the same row count as
/// `squeeze` (L for causal, 1 for window pooling, per stacked window).
#[derive(Clone, Debug, PartialEq)]
pub struct SeGate<T> {
    /// Rows per window.
    pub seg: usize,
    pub squeeze: Mat<T>,
    /// `S · W₁`
    pub pre: Mat<T>,
    /// `φ(S · W₁)`
    pub hidden: Mat<T>,
    /// `σ(φ(S · W₁) · W₂)`
    pub gate: Mat<T>,
}

pub fn se_gate<T: Scalar>(h_prev: &Mat<T>, se_w1: &Mat<T>, se_w2: &Mat<T>, mode: Squeeze) -> Result<SeGate<T>> {
    se_gate_segments(h_prev, se_w1, se_w2, mode, h_prev.rows())
}

/// [`se_gate`] on stacked windows of `seg` rows each.
pub fn se_gate_segments<T: Scalar>(
    h_prev: &Mat<T>,
    se_w1: &Mat<T>,
    se_w2: &Mat<T>,
    mode: Squeeze,
    seg: usize,
) -> Result<SeGate<T>> {
    check_segments("se_gate", h_prev.rows(), seg)?;
    let d = h_prev.cols();
    check("se_gate", se_w1.rows() == d && se_w2.rows() == se_w1.cols() && se_w2.cols() == d, || {
        format!("width {d}, w1 {}x{}, w2 {}x{}", se_w1.rows(), se_w1.cols(), se_w2.rows(), se_w2.cols())
    })?;
    let s = squeeze_segments(h_prev, mode, seg);
    let (rows, r) = (s.rows(), se_w1.cols());
    let mut pre = Mat::zeros(rows, r);
    gemm_acc(s.as_slice(), se_w1.as_slice(), pre.as_mut_slice(), rows, d, r);
    let mut hidden = Mat::zeros(rows, r);
    map_gelu(pre.as_slice(), hidden.as_mut_slice());
    let mut gate = Mat::zeros(rows, d);
    gemm_acc(hidden.as_slice(), se_w2.as_slice(), gate.as_mut_slice(), rows, r, d);
    map_sigmoid(gate.as_mut_slice());
    Ok(SeGate { seg, squeeze: s, pre, hidden, gate })
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn map_gelu<T: Scalar>(src: &[T], dst: &mut [T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = gelu(x);
    }
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn map_sigmoid<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        *x = sigmoid(*x);
    }
}

/// `u ⊙ gate`. A gate with fewer rows than `u` holds one row per block of
/// `u.rows() / gate.rows()` consecutive rows and is broadcast over it.
pub fn apply_gate<T: Scalar>(u: &Mat<T>, gate: &Mat<T>) -> Result<Mat<T>> {
    check(
        "apply_gate",
        gate.cols() == u.cols() && gate.rows() > 0 && u.rows() % gate.rows() == 0,
        || format!("u {}x{}, gate {}x{}", u.rows(), u.cols(), gate.rows(), gate.cols()),
    )?;
    let per = u.rows() / gate.rows();
    let mut out = u.clone();
    for t in 0..u.rows() {
        out.row_mut(t).iter_mut().zip(gate.row(t / per)).for_each(|(o, &g)| *o *= g);
    }
    Ok(out)
}

/// Backward through `gated = u ⊙ gate(h_prev)`: accumulates into `grad_u`,
/// `grad_h_prev`, and the SE weight gradients.
#[allow(clippy::too_many_arguments)]
pub fn se_gate_backward<T: Scalar>(
    se: &SeGate<T>,
    u: &Mat<T>,
    se_w1: &Mat<T>,
    se_w2: &Mat<T>,
    mode: Squeeze,
    grad_gated: &Mat<T>,
    grad_u: &mut Mat<T>,
    grad_h_prev: &mut Mat<T>,
    grad_w1: &mut Mat<T>,
    grad_w2: &mut Mat<T>,
) {
    let (rows, d) = (u.rows(), u.cols());
    let g_rows = se.gate.rows();
    let r = se_w1.cols();
    let per = rows / g_rows;
    let mut grad_pre2 = Mat::<T>::zeros(g_rows, d);
    for t in 0..rows {
        let gi = t / per;
        let gate = se.gate.row(gi);
        for (((du, dg), (&g, &x)), &gg) in grad_u
            .row_mut(t)
            .iter_mut()
            .zip(grad_pre2.row_mut(gi).iter_mut())
            .zip(gate.iter().zip(u.row(t)))
            .zip(grad_gated.row(t))
        {
            *du += gg * g;
            *dg += gg * x;
        }
    }
    // through the sigmoid
    for (dg, &g) in grad_pre2.as_mut_slice().iter_mut().zip(se.gate.as_slice()) {
        *dg *= g * (T::one() - g);
    }
    gemm_tn_acc(se.hidden.as_slice(), grad_pre2.as_slice(), grad_w2.as_mut_slice(), g_rows, r, d);
    let mut grad_pre1 = Mat::<T>::zeros(g_rows, r);
    gemm_nt_acc(grad_pre2.as_slice(), se_w2.as_slice(), grad_pre1.as_mut_slice(), g_rows, r, d);
    scale_by_gelu_grad(grad_pre1.as_mut_slice(), se.pre.as_slice());
    gemm_tn_acc(se.squeeze.as_slice(), grad_pre1.as_slice(), grad_w1.as_mut_slice(), g_rows, d, r);
    let mut grad_s = Mat::<T>::zeros(g_rows, d);
    gemm_nt_acc(grad_pre1.as_slice(), se_w1.as_slice(), grad_s.as_mut_slice(), g_rows, d, r);
    squeeze_backward(&grad_s, mode, se.seg, grad_h_prev);
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn scale_by_gelu_grad<T: Scalar>(grad: &mut [T], pre: &[T]) {
    for (g, &a) in grad.iter_mut().zip(pre) {
        *g *= gelu_grad(a);
    }
}

/// `(z − mean(z)) / (std(z) + ε) ⊙ γ + β` on one row, population std.
pub fn layer_norm<T: Scalar>(z: &[T], gamma: &[T], beta: &[T], epsilon: T) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    let mut xhat = vec![T::zero(); z.len()];
    ln_row(z, gamma, beta, epsilon, &mut xhat, &mut out);
    out
}

#[inline(always)]
fn ln_row<T: Scalar>(z: &[T], gamma: &[T], beta: &[T], eps: T, xhat: &mut [T], out: &mut [T]) -> T {
    let n = T::of_usize(z.len());
    let mean = z.iter().copied().sum::<T>() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let sigma = var.sqrt();
    let inv = T::one() / (sigma + eps);
    for i in 0..z.len() {
        xhat[i] = (z[i] - mean) * inv;
        out[i] = xhat[i] * gamma[i] + beta[i];
    }
    sigma
}

/// Row-wise layer norm with the statistics the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormOut<T> {
    pub out: Mat<T>,
    pub xhat: Mat<T>,
    /// Population std of each input row (before adding ε).
    pub sigma: Vec<T>,
}

pub fn layer_norm_rows<T: Scalar>(z: &Mat<T>, gamma: &[T], beta: &[T], epsilon: T) -> Result<LayerNormOut<T>> {
    check("layer_norm", gamma.len() == z.cols() && beta.len() == z.cols(), || {
        format!("width {}, gamma {}, beta {}", z.cols(), gamma.len(), beta.len())
    })?;
    let mut out = Mat::zeros(z.rows(), z.cols());
    let mut xhat = Mat::zeros(z.rows(), z.cols());
    let mut sigma = vec![T::zero(); z.rows()];
    ln_rows(z.as_slice(), gamma, beta, epsilon, xhat.as_mut_slice(), out.as_mut_slice(), &mut sigma);
    Ok(LayerNormOut { out, xhat, sigma })
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn ln_rows<T: Scalar>(z: &[T], gamma: &[T], beta: &[T], eps: T, xhat: &mut [T], out: &mut [T], sigma: &mut [T]) {
    let d = gamma.len();
    for (((z, xs), os), s) in z.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)).zip(sigma) {
        *s = ln_row(z, gamma, beta, eps, xs, os);
    }
}

/// Backward through the row-wise layer norm, including the paths through the
/// mean and the std. Writes `∂/∂z` into `grad_z` (overwriting).
///
/// With `s = σ + ε` and `ĝ = g ⊙ γ`:
/// `∂z = (ĝ − mean(ĝ) − x̂ · mean(ĝ ⊙ x̂) · s/σ) / s`, and the last term is
/// dropped when `σ = 0`.
#[multiversion(targets("x86_64+avx2+fma"))]
pub fn layer_norm_backward<T: Scalar>(
    ln: &LayerNormOut<T>,
    gamma: &[T],
    epsilon: T,
    grad_out: &Mat<T>,
    grad_z: &mut Mat<T>,
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) {
    let d = grad_out.cols();
    let n = T::of_usize(d);
    let mut gh = vec![T::zero(); d];
    for t in 0..grad_out.rows() {
        let (g, xh) = (grad_out.row(t), ln.xhat.row(t));
        for i in 0..d {
            grad_gamma[i] += g[i] * xh[i];
            grad_beta[i] += g[i];
            gh[i] = g[i] * gamma[i];
        }
        let sigma = ln.sigma[t];
        let s = sigma + epsilon;
        let mean_g = gh.iter().copied().sum::<T>() / n;
        let coupling = if sigma > T::zero() {
            gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n * s / sigma
        } else {
            T::zero()
        };
        let inv = T::one() / s;
        for ((dz, &a), &x) in grad_z.row_mut(t).iter_mut().zip(&gh).zip(xh) {
            *dz = (a - mean_g - x * coupling) * inv;
        }
    }
}

/// GLU intermediates: `a = Y·W↑a`, `g = Y·W↑g`, `q = φ(a) ⊙ σ(g)`,
/// `out = q·W↓`.
#[derive(Clone, Debug, PartialEq)]
pub struct GluOut<T> {
    pub a: Mat<T>,
    pub g: Mat<T>,
    /// `φ(a)`
    pub act: Mat<T>,
    /// `σ(g)`
    pub gate: Mat<T>,
    pub q: Mat<T>,
    pub out: Mat<T>,
}

pub fn glu_forward<T: Scalar>(y: &Mat<T>, wa: &Mat<T>, wg: &Mat<T>, wdown: &Mat<T>) -> Result<GluOut<T>> {
    let (rows, d, h) = (y.rows(), y.cols(), wa.cols());
    check(
        "glu_mix",
        wa.rows() == d && wg.rows() == d && wg.cols() == h && wdown.rows() == h && wdown.cols() == d,
        || format!("width {d}, wa {}x{}, wg {}x{}, wdown {}x{}", wa.rows(), h, wg.rows(), wg.cols(), wdown.rows(), wdown.cols()),
    )?;
    let mut a = Mat::zeros(rows, h);
    let mut g = Mat::zeros(rows, h);
    gemm_acc(y.as_slice(), wa.as_slice(), a.as_mut_slice(), rows, d, h);
    gemm_acc(y.as_slice(), wg.as_slice(), g.as_mut_slice(), rows, d, h);
    let (mut act, mut gate, mut q) = (Mat::zeros(rows, h), Mat::zeros(rows, h), Mat::zeros(rows, h));
    glu_activate(a.as_slice(), g.as_slice(), act.as_mut_slice(), gate.as_mut_slice(), q.as_mut_slice());
    let mut out = Mat::zeros(rows, d);
    gemm_acc(q.as_slice(), wdown.as_slice(), out.as_mut_slice(), rows, h, d);
    Ok(GluOut { a, g, act, gate, q, out })
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn glu_activate<T: Scalar>(a: &[T], g: &[T], act: &mut [T], gate: &mut [T], q: &mut [T]) {
    for ((((&a, &g), act), gate), q) in a.iter().zip(g).zip(act).zip(gate).zip(q) {
        *act = gelu(a);
        *gate = sigmoid(g);
        *q = *act * *gate;
    }
}

#[multiversion(targets("x86_64+avx2+fma"))]
fn glu_activate_backward<T: Scalar>(glu: &GluOut<T>, grad_q: &[T], grad_a: &mut [T], grad_g: &mut [T]) {
    let (a, act, gate) = (glu.a.as_slice(), glu.act.as_slice(), glu.gate.as_slice());
    for (i, (da, dg)) in grad_a.iter_mut().zip(grad_g.iter_mut()).enumerate() {
        let (sg, dq) = (gate[i], grad_q[i]);
        *da = dq * sg * gelu_grad(a[i]);
        *dg = dq * act[i] * sg * (T::one() - sg);
    }
}

/// `Z = (φ(Y·W↑a) ⊙ σ(Y·W↑g))·W↓`
pub fn glu_mix<T: Scalar>(y: &Mat<T>, wa: &Mat<T>, wg: &Mat<T>, wdown: &Mat<T>) -> Result<Mat<T>> {
    Ok(glu_forward(y, wa, wg, wdown)?.out)
}

#[allow(clippy::too_many_arguments)]
pub fn glu_backward<T: Scalar>(
    y: &Mat<T>,
    glu: &GluOut<T>,
    wa: &Mat<T>,
    wg: &Mat<T>,
    wdown: &Mat<T>,
    grad_out: &Mat<T>,
    grad_y: &mut Mat<T>,
    grad_wa: &mut Mat<T>,
    grad_wg: &mut Mat<T>,
    grad_wdown: &mut Mat<T>,
) {
    let (rows, d, h) = (y.rows(), y.cols(), wa.cols());
    gemm_tn_acc(glu.q.as_slice(), grad_out.as_slice(), grad_wdown.as_mut_slice(), rows, h, d);
    let mut grad_q = Mat::<T>::zeros(rows, h);
    gemm_nt_acc(grad_out.as_slice(), wdown.as_slice(), grad_q.as_mut_slice(), rows, h, d);
    let mut grad_a = Mat::<T>::zeros(rows, h);
    let mut grad_g = Mat::<T>::zeros(rows, h);
    glu_activate_backward(glu, grad_q.as_slice(), grad_a.as_mut_slice(), grad_g.as_mut_slice());
    gemm_tn_acc(y.as_slice(), grad_a.as_slice(), grad_wa.as_mut_slice(), rows, d, h);
    gemm_tn_acc(y.as_slice(), grad_g.as_slice(), grad_wg.as_mut_slice(), rows, d, h);
    gemm_nt_acc(grad_a.as_slice(), wa.as_slice(), grad_y.as_mut_slice(), rows, d, h);
    gemm_nt_acc(grad_g.as_slice(), wg.as_slice(), grad_y.as_mut_slice(), rows, d, h);
}
