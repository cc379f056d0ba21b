//! Straight-line reference implementations on plain row-major `Vec<f64>`.
//! Nothing here calls into the library's numerics.

use ssmix::model::{ModelConfig, ModelParams};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// `(A_ct, B_ref)` of the LegS operator, `A` row-major `n × n`.
pub fn legs(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = if i > j {
                -(((2 * i + 1) * (2 * j + 1)) as f64).sqrt()
            } else if i == j {
                -((i + 1) as f64)
            } else {
                0.0
            };
        }
    }
    (a, (0..n).map(|i| ((2 * i + 1) as f64).sqrt()).collect())
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())).unwrap();
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for k in 0..n {
                    a[r * n + k] -= f * a[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `(I − dt/2·A)⁻¹ (I + dt/2·A)`
pub fn tustin(a: &[f64], n: usize, dt: f64) -> Vec<f64> {
    let mut lhs = vec![0.0; n * n];
    let mut rhs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            lhs[i * n + j] = e - 0.5 * dt * a[i * n + j];
            rhs[i * n + j] = e + 0.5 * dt * a[i * n + j];
        }
    }
    matmul(&inverse(&lhs, n), &rhs, n, n, n)
}

/// Taps `d × l_k`: `k_0 = c·b + D`, `k_ℓ = c·Aᶫ·b`.
pub fn taps(a_disc: &[f64], n: usize, b: &[f64], c: &[f64], d_skip: &[f64], l_k: usize) -> Vec<f64> {
    let d = d_skip.len();
    let mut out = vec![0.0; d * l_k];
    for ch in 0..d {
        let mut v = b[ch * n..(ch + 1) * n].to_vec();
        for lag in 0..l_k {
            if lag > 0 {
                v = matmul(a_disc, &v, n, n, 1);
            }
            let mut s: f64 = (0..n).map(|i| c[ch * n + i] * v[i]).sum();
            if lag == 0 {
                s += d_skip[ch];
            }
            out[ch * l_k + lag] = s;
        }
    }
    out
}

/// `U[t][c] = Σ_τ k_c[τ]·H[t−τ][c]`
pub fn conv(h: &[f64], taps: &[f64], l: usize, d: usize, l_k: usize) -> Vec<f64> {
    let mut u = vec![0.0; l * d];
    for t in 0..l {
        for c in 0..d {
            let mut s = 0.0;
            for tau in 0..l_k {
                if tau <= t {
                    s += taps[c * l_k + tau] * h[(t - tau) * d + c];
                }
            }
            u[t * d + c] = s;
        }
    }
    u
}

/// Gate rows: one per time step from running means when `causal`, else a
/// single row from the window mean.
pub fn se_gate(h: &[f64], w1: &[f64], w2: &[f64], l: usize, d: usize, r: usize, causal: bool) -> Vec<f64> {
    let rows = if causal { l } else { 1 };
    let mut gate = vec![0.0; rows * d];
    for g in 0..rows {
        let upto = if causal { g + 1 } else { l };
        let s: Vec<f64> = (0..d).map(|c| (0..upto).map(|t| h[t * d + c]).sum::<f64>() / upto as f64).collect();
        let hidden: Vec<f64> = (0..r).map(|j| gelu((0..d).map(|c| s[c] * w1[c * r + j]).sum())).collect();
        for c in 0..d {
            gate[g * d + c] = sigmoid((0..r).map(|j| hidden[j] * w2[j * d + c]).sum());
        }
    }
    gate
}

pub fn layer_norm(z: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    z.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) / (std + eps) * g + b).collect()
}

pub fn glu(y: &[f64], wa: &[f64], wg: &[f64], wd: &[f64], l: usize, d: usize, h: usize) -> Vec<f64> {
    let a = matmul(y, wa, l, d, h);
    let g = matmul(y, wg, l, d, h);
    let q: Vec<f64> = a.iter().zip(&g).map(|(&a, &g)| gelu(a) * sigmoid(g)).collect();
    matmul(&q, wd, l, h, d)
}

/// Eval-mode network output for one window `x` (`L × F`).
pub fn forward(p: &ModelParams<f64>, cfg: &ModelConfig, x: &[f64]) -> Vec<f64> {
    let (l, f, d, n) = (cfg.window, cfg.n_features, cfg.width, cfg.n_state);
    let (r, hw, l_k) = (cfg.se_hidden(), cfg.glu_hidden(), cfg.kernel_len);
    let causal = cfg.squeeze == ssmix::model::Squeeze::Causal;
    let (a_ct, _) = legs(n);
    let mut h = matmul(x, p.w_in.as_slice(), l, f, d);
    for layer in &p.layers {
        let mut k = vec![0.0; d * l_k];
        for comp in &layer.components {
            let ad = tustin(&a_ct, n, softplus(comp.tau_raw));
            for (acc, v) in k.iter_mut().zip(taps(&ad, n, &comp.b, &comp.c, &comp.d_skip, l_k)) {
                *acc += v;
            }
        }
        let u = conv(&h, &k, l, d, l_k);
        let gate = se_gate(&h, layer.se_w1.as_slice(), layer.se_w2.as_slice(), l, d, r, causal);
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            let grow = if causal { t } else { 0 };
            let z: Vec<f64> = (0..d).map(|c| h[t * d + c] + u[t * d + c] * gate[grow * d + c]).collect();
            y[t * d..(t + 1) * d].copy_from_slice(&layer_norm(&z, &layer.ln1_gamma, &layer.ln1_beta, cfg.ln_epsilon));
        }
        let zg = glu(&y, layer.glu_wa.as_slice(), layer.glu_wg.as_slice(), layer.glu_wdown.as_slice(), l, d, hw);
        for t in 0..l {
            let z: Vec<f64> = (0..d).map(|c| y[t * d + c] + zg[t * d + c]).collect();
            h[t * d..(t + 1) * d].copy_from_slice(&layer_norm(&z, &layer.ln2_gamma, &layer.ln2_beta, cfg.ln_epsilon));
        }
    }
    let o = cfg.output_dim;
    let last = &h[(l - 1) * d..l * d];
    (0..o).map(|j| p.b_head[j] + (0..d).map(|c| last[c] * p.w_head[(c, j)]).sum::<f64>()).collect()
}
