use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ops::{
    depthwise_causal_conv_backward_segments, embed_backward, glu_backward, layer_norm_backward, se_gate_backward,
};
use crate::model::{ForwardTrace, KernelBank, ModelConfig, ModelParams, ParamGrads};
use crate::scalar::Scalar;
use crate::sskernel::{discretize_derivative, impulse_response_backward, Taps};

/// Gradients for one or more windows before the kernel path is pulled back:
/// everything except the SSM components, plus `∂/∂taps` per layer.
#[derive(Clone, Debug)]
pub(crate) struct PartialGrads<T> {
    pub grads: ParamGrads<T>,
    pub taps: Vec<Taps<T>>,
}

impl<T: Scalar> PartialGrads<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            grads: ParamGrads::zeros(cfg),
            taps: (0..cfg.n_layers).map(|_| Taps::zeros(cfg.width, cfg.kernel_len)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.grads.add_assign(&other.grads);
        for (a, b) in self.taps.iter_mut().zip(&other.taps) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
    }
}

fn masked<T: Scalar>(g: &Mat<T>, mask: Option<&Mat<T>>) -> Mat<T> {
    match mask {
        Some(m) => {
            let mut out = g.clone();
            out.as_mut_slice().iter_mut().zip(m.as_slice()).for_each(|(o, &k)| *o *= k);
            out
        }
        None => g.clone(),
    }
}

/// Reverse pass for the windows stacked in `trace`, accumulating into `acc`.
/// `grad_out` holds `O` values per window. The SSM component gradients are
/// left untouched; the tap gradients are accumulated instead.
pub(crate) fn window_backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    grad_out: &[T],
    acc: &mut PartialGrads<T>,
) -> Result<()> {
    let o = cfg.output_dim;
    let seg = trace.window;
    if grad_out.len() != o * trace.n_windows() || trace.layers.len() != params.layers.len() {
        return Err(Error::shape("backward", "trace or output gradient does not match the model"));
    }
    let eps = T::of(cfg.ln_epsilon);
    let g = &mut acc.grads;

    // head
    let h_final = trace.final_hidden();
    let d = h_final.cols();
    let mut grad_h = Mat::zeros(h_final.rows(), d);
    for (w, go) in grad_out.chunks(o).enumerate() {
        let last = (w + 1) * seg - 1;
        for (i, &hv) in h_final.row(last).iter().enumerate() {
            for (k, &gk) in go.iter().enumerate() {
                g.w_head[(i, k)] += hv * gk;
            }
        }
        for (b, &gk) in g.b_head.iter_mut().zip(go) {
            *b += gk;
        }
        params.w_head.matvec_into(go, grad_h.row_mut(last));
    }

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut g.layers[l];
        let rows = lt.input.rows();

        // H^(ℓ) = LN2(Y + mask2 ⊙ Z)
        let mut grad_sum2 = Mat::zeros(rows, d);
        layer_norm_backward(&lt.ln2, &lp.ln2_gamma, eps, &grad_h, &mut grad_sum2, &mut gl.ln2_gamma, &mut gl.ln2_beta);
        let grad_z = masked(&grad_sum2, lt.glu_mask.as_ref());
        let mut grad_y = grad_sum2;
        glu_backward(
            &lt.ln1.out,
            &lt.glu,
            &lp.glu_wa,
            &lp.glu_wg,
            &lp.glu_wdown,
            &grad_z,
            &mut grad_y,
            &mut gl.glu_wa,
            &mut gl.glu_wg,
            &mut gl.glu_wdown,
        );

        // Y = LN1(H + mask1 ⊙ (U ⊙ gate))
        let mut grad_sum1 = Mat::zeros(rows, d);
        layer_norm_backward(&lt.ln1, &lp.ln1_gamma, eps, &grad_y, &mut grad_sum1, &mut gl.ln1_gamma, &mut gl.ln1_beta);
        let grad_gated = masked(&grad_sum1, lt.se_mask.as_ref());
        let mut grad_in = grad_sum1;
        let mut grad_u = Mat::zeros(rows, d);
        se_gate_backward(
            &lt.se,
            &lt.conv,
            &lp.se_w1,
            &lp.se_w2,
            cfg.squeeze,
            &grad_gated,
            &mut grad_u,
            &mut grad_in,
            &mut gl.se_w1,
            &mut gl.se_w2,
        );
        depthwise_causal_conv_backward_segments(
            &lt.input,
            &bank.layers[l].taps,
            &grad_u,
            seg,
            &mut grad_in,
            &mut acc.taps[l],
        );
        grad_h = grad_in;
    }
    embed_backward(&trace.x, &grad_h, &mut g.w_in);
    Ok(())
}

/// Pulls accumulated tap gradients back to `(B, C, D, tau_raw)` of every
/// component. Every component of a layer receives the same tap gradient
/// because the mixture is a plain sum.
pub(crate) fn kernel_backward<T: Scalar>(
    params: &ModelParams<T>,
    bank: &KernelBank<T>,
    tap_grads: &[Taps<T>],
    grads: &mut ParamGrads<T>,
) -> Result<()> {
    for (l, (lp, lk)) in params.layers.iter().zip(&bank.layers).enumerate() {
        for (m, (comp, trans)) in lp.components.iter().zip(&lk.transitions).enumerate() {
            let deriv = discretize_derivative(&bank.legs, trans.dt(), trans)?;
            let cg = impulse_response_backward(comp, trans, &deriv, &tap_grads[l])?;
            let dst = &mut grads.layers[l].components[m];
            for (a, &b) in dst.b.iter_mut().zip(&cg.b) {
                *a += b;
            }
            for (a, &b) in dst.c.iter_mut().zip(&cg.c) {
                *a += b;
            }
            for (a, &b) in dst.d_skip.iter_mut().zip(&cg.d_skip) {
                *a += b;
            }
            dst.tau_raw += cg.tau_raw;
        }
    }
    Ok(())
}

/// Exact gradient of `⟨grad_out, f_θ(X)⟩` for the windows that produced
/// `trace` (`O` entries of `grad_out` per window), through every block
/// including kernel construction.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    grad_out: &[T],
) -> Result<ParamGrads<T>> {
    let bank = KernelBank::build(params, cfg)?;
    backward_with(trace, params, cfg, &bank, grad_out)
}

/// [`backward`] with the kernels used by the forward call.
pub fn backward_with<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bank: &KernelBank<T>,
    grad_out: &[T],
) -> Result<ParamGrads<T>> {
    if trace.window != cfg.window || trace.x.cols() != cfg.n_features {
        return Err(Error::shape("backward", "trace was produced for a different window shape"));
    }
    let mut acc = PartialGrads::zeros(cfg);
    window_backward(trace, params, cfg, bank, grad_out, &mut acc)?;
    kernel_backward(params, bank, &acc.taps, &mut acc.grads)?;
    Ok(acc.grads)
}
