//! HiPPO-LegS state-space kernels.
//!
//! The continuous-time LegS operator is discretized with the bilinear (Tustin)
//! map, which sends the open left half-plane into the open unit disk, so every
//! discrete transition built here is Schur-stable for any positive step.
//! Each component turns its transition and per-channel `(B, C, D)` rows into a
//! finite impulse response; a layer's kernel is the plain sum of its
//! components' responses.
//!
//! Layouts: `B` and `C` are `d × N` row-major (one row per embedded channel),
//! taps are `d × L_k` row-major.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_acc, gemm_tn_acc, norm2, Mat};
use crate::scalar::{sigmoid, softplus, softplus_inv, Scalar};

/// Smallest and largest initial time step of a component mixture.
pub const DT_INIT_RANGE: (f64, f64) = (0.05, 2.0);

/// Standard deviation of the noise added to `B_ref` at initialization.
pub const B_INIT_NOISE: f64 = 0.01;

/// Continuous-time LegS operator `A_ct` and its reference input `B_ref`.
#[derive(Clone, Debug, PartialEq)]
pub struct LegsOperator<T> {
    n_state: usize,
    a_ct: Mat<T>,
    b_ref: Vec<T>,
}

impl<T: Scalar> LegsOperator<T> {
    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn a_ct(&self) -> &Mat<T> {
        &self.a_ct
    }

    pub fn b_ref(&self) -> &[T] {
        &self.b_ref
    }
}

/// Builds the `N × N` LegS matrix (lower triangular, diagonal `-(i+1)`) and
/// `B_ref[i] = sqrt(2i+1)`.
pub fn build_legs<T: Scalar>(n_state: usize) -> Result<LegsOperator<T>> {
    if n_state == 0 {
        return Err(Error::InvalidArgument("LegS state dimension must be positive".into()));
    }
    let a_ct = Mat::from_fn(n_state, n_state, |i, j| {
        if i > j {
            -T::of(((2 * i + 1) * (2 * j + 1)) as f64).sqrt()
        } else if i == j {
            -T::of_usize(i + 1)
        } else {
            T::zero()
        }
    });
    let b_ref = (0..n_state).map(|i| T::of((2 * i + 1) as f64).sqrt()).collect();
    Ok(LegsOperator { n_state, a_ct, b_ref })
}

/// A discrete transition `A(Δt)` together with the step it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTransition<T> {
    dt: T,
    a_disc: Mat<T>,
}

impl<T: Scalar> DiscreteTransition<T> {
    /// Wraps an arbitrary square matrix as a transition. Used by diagnostics
    /// that probe the kernel code with transitions not derived from LegS.
    pub fn from_matrix(dt: T, a_disc: Mat<T>) -> Result<Self> {
        if !a_disc.is_square() {
            return Err(Error::shape("DiscreteTransition", "transition must be square"));
        }
        Ok(Self { dt, a_disc })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.a_disc
    }

    pub fn n_state(&self) -> usize {
        self.a_disc.rows()
    }
}

fn check_dt<T: Scalar>(op: &'static str, dt: T) -> Result<()> {
    if dt > T::zero() && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: step must be positive and finite, got {dt}")))
    }
}

/// `A(Δt) = (I − Δt/2·A_ct)⁻¹ (I + Δt/2·A_ct)`, via a linear solve.
pub fn discretize<T: Scalar>(op: &LegsOperator<T>, dt: T) -> Result<DiscreteTransition<T>> {
    check_dt("discretize", dt)?;
    let n = op.n_state;
    let eye = Mat::identity(n);
    let half = dt * T::half();
    let lhs = eye.add_scaled(&op.a_ct, -half);
    let rhs = eye.add_scaled(&op.a_ct, half);
    let a_disc = lhs.solve(&rhs)?;
    Ok(DiscreteTransition { dt, a_disc })
}

/// `∂A(Δt)/∂Δt = ½ (I − Δt/2·A_ct)⁻¹ A_ct (I + A(Δt))`.
pub fn discretize_derivative<T: Scalar>(
    op: &LegsOperator<T>,
    dt: T,
    trans: &DiscreteTransition<T>,
) -> Result<Mat<T>> {
    check_dt("discretize_derivative", dt)?;
    if trans.n_state() != op.n_state {
        return Err(Error::shape("discretize_derivative", "transition and operator sizes differ"));
    }
    let n = op.n_state;
    let eye = Mat::identity(n);
    let lhs = eye.add_scaled(&op.a_ct, -dt * T::half());
    let rhs = op.a_ct.matmul(&eye.add_scaled(&trans.a_disc, T::one())).scaled(T::half());
    lhs.solve(&rhs)
}

/// One mixture component: per-channel input/output rows, skip term and the
/// raw (unconstrained) time-scale parameter. The step is `softplus(tau_raw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmComponent<T> {
    pub channels: usize,
    pub n_state: usize,
    /// `channels × n_state`
    pub b: Vec<T>,
    /// `channels × n_state`
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
    pub tau_raw: T,
}

impl<T: Scalar> SsmComponent<T> {
    pub fn zeros(channels: usize, n_state: usize) -> Self {
        Self {
            channels,
            n_state,
            b: vec![T::zero(); channels * n_state],
            c: vec![T::zero(); channels * n_state],
            d_skip: vec![T::zero(); channels],
            tau_raw: T::zero(),
        }
    }

    /// `B` near `B_ref` (plus small Gaussian noise), `C ~ N(0, 1/N)`,
    /// zero skip, and `tau_raw` chosen so that the step equals `dt`.
    pub fn init<R: Rng + ?Sized>(op: &LegsOperator<T>, channels: usize, dt: f64, rng: &mut R) -> Self {
        let n = op.n_state;
        let noise = Normal::new(0.0, B_INIT_NOISE).expect("valid std");
        let c_dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
        let mut b = Vec::with_capacity(channels * n);
        for _ in 0..channels {
            for &r in op.b_ref() {
                b.push(r + T::of(noise.sample(rng)));
            }
        }
        let c = (0..channels * n).map(|_| T::of(c_dist.sample(rng))).collect();
        Self {
            channels,
            n_state: n,
            b,
            c,
            d_skip: vec![T::zero(); channels],
            tau_raw: softplus_inv(T::of(dt)),
        }
    }

    pub fn dt(&self) -> T {
        softplus(self.tau_raw)
    }

    pub fn b_row(&self, ch: usize) -> &[T] {
        &self.b[ch * self.n_state..(ch + 1) * self.n_state]
    }

    pub fn c_row(&self, ch: usize) -> &[T] {
        &self.c[ch * self.n_state..(ch + 1) * self.n_state]
    }

    fn check(&self, op: &'static str, n_state: usize) -> Result<()> {
        if self.n_state != n_state
            || self.b.len() != self.channels * n_state
            || self.c.len() != self.channels * n_state
            || self.d_skip.len() != self.channels
        {
            return Err(Error::shape(
                op,
                format!(
                    "component has d={} N={} (|b|={}, |c|={}, |D|={}) against a {n_state}-state transition",
                    self.channels,
                    self.n_state,
                    self.b.len(),
                    self.c.len(),
                    self.d_skip.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Log-spaced initial steps spanning [`DT_INIT_RANGE`].
pub fn dt_schedule(components: usize) -> Vec<f64> {
    let (lo, hi) = DT_INIT_RANGE;
    match components {
        0 => Vec::new(),
        1 => vec![(lo * hi).sqrt()],
        m => (0..m)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (m - 1) as f64).exp())
            .collect(),
    }
}

/// Per-channel FIR taps, `channels × len` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps<T> {
    channels: usize,
    len: usize,
    data: Vec<T>,
}

impl<T: Scalar> Taps<T> {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self { channels, len, data: vec![T::zero(); channels * len] }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * len || len == 0 {
            return Err(Error::shape("Taps::from_vec", format!("{} values for {channels}x{len} taps", data.len())));
        }
        Ok(Self { channels, len, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        &self.data[ch * self.len..(ch + 1) * self.len]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [T] {
        &mut self.data[ch * self.len..(ch + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Taps `k_c[0] = ⟨c_c, b_c⟩ + D_c`, `k_c[ℓ] = ⟨c_c, A^ℓ b_c⟩`, by propagating
/// the state `v_ℓ = A v_{ℓ−1}` rather than forming matrix powers.
pub fn impulse_response<T: Scalar>(
    comp: &SsmComponent<T>,
    trans: &DiscreteTransition<T>,
    l_k: usize,
) -> Result<Taps<T>> {
    if l_k == 0 {
        return Err(Error::InvalidArgument("kernel length must be positive".into()));
    }
    comp.check("impulse_response", trans.n_state())?;
    let (n, d) = (comp.n_state, comp.channels);
    // channels run side by side as the columns of n × d state matrices
    let ct = Mat::from_fn(n, d, |i, ch| comp.c_row(ch)[i]);
    let mut v = Mat::from_fn(n, d, |i, ch| comp.b_row(ch)[i]);
    let mut next = Mat::<T>::zeros(n, d);
    let mut lagged = Mat::<T>::zeros(l_k, d);
    lagged.row_mut(0).copy_from_slice(&comp.d_skip);
    for lag in 0..l_k {
        if lag > 0 {
            next.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(trans.a_disc.as_slice(), v.as_slice(), next.as_mut_slice(), n, n, d);
            std::mem::swap(&mut v, &mut next);
        }
        let out = lagged.row_mut(lag);
        for i in 0..n {
            for ((o, &c), &x) in out.iter_mut().zip(ct.row(i)).zip(v.row(i)) {
                *o += c * x;
            }
        }
    }
    let mut taps = Taps::zeros(d, l_k);
    for ch in 0..d {
        for (lag, t) in taps.channel_mut(ch).iter_mut().enumerate() {
            *t = lagged[(lag, ch)];
        }
    }
    Ok(taps)
}

/// Elementwise sum of component taps, accumulated in list order.
pub fn mix_taps<T: Scalar>(components: &[Taps<T>]) -> Result<Taps<T>> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidArgument("mix_taps needs at least one component".into()))?;
    let mut out = first.clone();
    for (m, k) in components.iter().enumerate().skip(1) {
        if (k.channels, k.len) != (first.channels, first.len) {
            return Err(Error::shape(
                "mix_taps",
                format!("component {m} is {}x{}, expected {}x{}", k.channels, k.len, first.channels, first.len),
            ));
        }
        for (o, &v) in out.data.iter_mut().zip(&k.data) {
            *o += v;
        }
    }
    Ok(out)
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Largest eigenvalue modulus, from a real Schur decomposition.
pub fn spectral_radius<T: Scalar>(a: &Mat<T>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::shape("spectral_radius", format!("{}x{} matrix", a.rows(), a.cols())));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let m = a.to_nalgebra();
    let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(Error::NonConvergence { iterations: SCHUR_MAX_ITER })?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Induced 2-norm (largest singular value).
pub fn induced_norm2<T: Scalar>(a: &Mat<T>) -> f64 {
    if a.rows() == 0 || a.cols() == 0 {
        return 0.0;
    }
    a.to_nalgebra().singular_values().iter().copied().fold(0.0, f64::max)
}

/// Geometric bound on the truncated tail `Σ_{ℓ≥L_k} |k_c[ℓ]|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TailBound {
    Bound { alpha: f64, per_channel: Vec<f64> },
    /// `‖A‖₂ ≥ 1`: the geometric bound says nothing.
    Inapplicable { alpha: f64 },
}

impl TailBound {
    pub fn alpha(&self) -> f64 {
        match self {
            TailBound::Bound { alpha, .. } | TailBound::Inapplicable { alpha } => *alpha,
        }
    }
}

/// Per channel `‖c_c‖·‖b_c‖·α^{L_k}/(1−α)` with `α = ‖A‖₂`, when `α < 1`.
pub fn tail_bound<T: Scalar>(comp: &SsmComponent<T>, trans: &DiscreteTransition<T>, l_k: usize) -> TailBound {
    let alpha = induced_norm2(&trans.a_disc);
    if !(alpha < 1.0) {
        return TailBound::Inapplicable { alpha };
    }
    let per_channel = (0..comp.channels)
        .map(|ch| {
            let scale = norm2(comp.c_row(ch)).f64() * norm2(comp.b_row(ch)).f64();
            scale * alpha.powi(l_k as i32) / (1.0 - alpha)
        })
        .collect();
    TailBound::Bound { alpha, per_channel }
}

/// Pulls the gradient of a loss with respect to a component's taps back to
/// `(B, C, D, tau_raw)`.
///
/// `deriv` is `∂A/∂Δt` from [`discretize_derivative`]. The step gradient is
/// accumulated forward along the tangent recurrence
/// `w_ℓ = A w_{ℓ−1} + (∂A/∂Δt) v_{ℓ−1}`; the `B` gradient uses the adjoint
/// recurrence `λ_ℓ = G_ℓ c + Aᵀ λ_{ℓ+1}`.
pub fn impulse_response_backward<T: Scalar>(
    comp: &SsmComponent<T>,
    trans: &DiscreteTransition<T>,
    deriv: &Mat<T>,
    tap_grad: &Taps<T>,
) -> Result<SsmComponent<T>> {
    comp.check("impulse_response_backward", trans.n_state())?;
    if tap_grad.channels != comp.channels {
        return Err(Error::shape("impulse_response_backward", "tap gradient channel count"));
    }
    let (n, d, l_k) = (comp.n_state, comp.channels, tap_grad.len);
    let a = trans.a_disc.as_slice();
    let p = deriv.as_slice();
    // channels run side by side as the columns of n × d state matrices
    let lagged = Mat::from_fn(l_k, d, |lag, ch| tap_grad.channel(ch)[lag]);
    let ct = Mat::from_fn(n, d, |i, ch| comp.c_row(ch)[i]);
    let mut v = Mat::from_fn(n, d, |i, ch| comp.b_row(ch)[i]);
    let mut w = Mat::<T>::zeros(n, d);
    let mut next = Mat::<T>::zeros(n, d);
    let mut grad_ct = Mat::<T>::zeros(n, d);
    let mut dt_grad = T::zero();
    let scaled_add = |dst: &mut Mat<T>, src: &Mat<T>, g: &[T]| {
        for i in 0..n {
            for ((o, &x), &gc) in dst.row_mut(i).iter_mut().zip(src.row(i)).zip(g) {
                *o += gc * x;
            }
        }
    };
    scaled_add(&mut grad_ct, &v, lagged.row(0));
    for lag in 1..l_k {
        // w ← A w + P v ; v ← A v (both use the previous v)
        next.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
        gemm_acc(a, w.as_slice(), next.as_mut_slice(), n, n, d);
        gemm_acc(p, v.as_slice(), next.as_mut_slice(), n, n, d);
        std::mem::swap(&mut w, &mut next);
        next.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
        gemm_acc(a, v.as_slice(), next.as_mut_slice(), n, n, d);
        std::mem::swap(&mut v, &mut next);
        let g = lagged.row(lag);
        scaled_add(&mut grad_ct, &v, g);
        for i in 0..n {
            for ((&c, &x), &gc) in ct.row(i).iter().zip(w.row(i)).zip(g) {
                dt_grad += gc * c * x;
            }
        }
    }

    // adjoint sweep for B: λ_ℓ = g_ℓ c + Aᵀ λ_{ℓ+1}
    let mut lam = Mat::<T>::zeros(n, d);
    scaled_add(&mut lam, &ct, lagged.row(l_k - 1));
    for lag in (0..l_k - 1).rev() {
        next.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
        gemm_tn_acc(a, lam.as_slice(), next.as_mut_slice(), n, n, d);
        scaled_add(&mut next, &ct, lagged.row(lag));
        std::mem::swap(&mut lam, &mut next);
    }

    let mut grad = SsmComponent::zeros(d, n);
    for ch in 0..d {
        grad.d_skip[ch] = lagged[(0, ch)];
        for i in 0..n {
            grad.b[ch * n + i] = lam[(i, ch)];
            grad.c[ch * n + i] = grad_ct[(i, ch)];
        }
    }
    grad.tau_raw = dt_grad * sigmoid(comp.tau_raw);
    Ok(grad)
}
