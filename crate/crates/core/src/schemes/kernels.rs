//! Closed-form exit kernels and their scores.
//!
//! These are the textbook forms on the unit domains. The [`Scheme`] methods
//! evaluate the same expressions on the tolerance-shrunk domain that the
//! discretized process actually exits.
//!
//! [`Scheme`]: super::Scheme

use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::special::{ln_gamma, normal_hazard, normal_sf, unit_sphere_area};

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Normalized Poisson kernel of the unit ball with respect to surface measure:
/// `(1 - |z|²) / (|S^{d-1}| |x - z|^d)`.
pub fn sphere_poisson_kernel(z: &[f64], x: &[f64]) -> Result<f64> {
    check_dim(z.len(), x.len())?;
    let d = z.len();
    let zz = norm_sq(z);
    if zz >= 1.0 {
        return Err(Error::Singular("z must lie inside the unit ball".into()));
    }
    let dist_sq: f64 = z.iter().zip(x).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((1.0 - zz) / (unit_sphere_area(d) * dist_sq.powf(d as f64 / 2.0)))
}

/// `∇_z log[(1 - |z|²) / |x - z|^d]`.
pub fn sphere_poisson_score(z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dim(z.len(), x.len())?;
    let mut out = vec![0.0; z.len()];
    ball_kernel_score(z, x, 1.0, &mut out)?;
    Ok(out)
}

/// Score of the Poisson kernel of the ball of radius `r` at the boundary point
/// `r·x`, with `x` a unit vector.
pub(crate) fn ball_kernel_score(z: &[f64], x: &[f64], r: f64, out: &mut [f64]) -> Result<()> {
    let d = z.len() as f64;
    let gap = r * r - norm_sq(z);
    if gap <= 0.0 {
        return Err(Error::Singular("z on or outside the sphere".into()));
    }
    let dist_sq: f64 = z.iter().zip(x).map(|(a, b)| (r * b - a).powi(2)).sum();
    if dist_sq == 0.0 {
        return Err(Error::Singular("z coincides with the exit point".into()));
    }
    for i in 0..z.len() {
        out[i] = -2.0 * z[i] / gap + d * (r * x[i] - z[i]) / dist_sq;
    }
    Ok(())
}

/// `Ber(x | z) = Π_i [x_i z_i + (1 - x_i)(1 - z_i)]`.
pub fn bernoulli_exit_likelihood(x: &[f64], z: &[f64]) -> Result<f64> {
    check_dim(x.len(), z.len())?;
    Ok(x.iter().zip(z).map(|(&xi, &zi)| ber1(xi, zi)).product())
}

#[inline]
pub(crate) fn ber1(x: f64, z: f64) -> f64 {
    x * z + (1.0 - x) * (1.0 - z)
}

/// Boolean bridge drift `(2x_i - 1) / Ber(x_i | z_i)`; zero where `absorbed`.
pub fn boolean_bridge_drift(z: &[f64], x: &[f64], absorbed: Option<&[bool]>) -> Result<Vec<f64>> {
    check_dim(z.len(), x.len())?;
    if let Some(mask) = absorbed {
        check_dim(z.len(), mask.len())?;
    }
    let mut out = vec![0.0; z.len()];
    for i in 0..z.len() {
        if absorbed.is_some_and(|m| m[i]) {
            continue;
        }
        let den = ber1(x[i], z[i]);
        if den <= 0.0 {
            return Err(Error::Singular(format!(
                "coordinate {i} sits at the endpoint opposite its target"
            )));
        }
        out[i] = (2.0 * x[i] - 1.0) / den;
    }
    Ok(out)
}

/// Brownian bridge drift `(x - z) / (T - t)` pinning the path at `x` at time `T`.
pub fn fixed_time_bridge_drift(z: &[f64], x: &[f64], t: f64, horizon: f64) -> Result<Vec<f64>> {
    check_dim(z.len(), x.len())?;
    if t >= horizon {
        return Err(Error::pre(format!("t={t} is not before T={horizon}")));
    }
    let rem = horizon - t;
    Ok(z.iter().zip(x).map(|(a, b)| (b - a) / rem).collect())
}

/// `∇_z log Σ_j Ber(e_j | z_slot)` for every `d`-slot of `z`.
pub fn categorical_omega_score(z: &[f64], d: usize, m: usize) -> Result<Vec<f64>> {
    check_dim(d * m, z.len())?;
    let mut out = vec![0.0; z.len()];
    for (slot, o) in z.chunks(d).zip(out.chunks_mut(d)) {
        slot_omega_score(slot, None, 1.0, o)?;
    }
    Ok(out)
}

/// Self-normalized form `Σ_j w_j ∇ log Ber(e_j | z)`, `w_j ∝ Ber(e_j | z)`.
///
/// With `absorbed` given, absorbed coordinates enter through their rounded
/// value and receive zero score. `jac` multiplies the result (chain rule for an
/// affine reparameterization of `z`).
pub(crate) fn slot_omega_score(
    z: &[f64],
    absorbed: Option<&[bool]>,
    jac: f64,
    out: &mut [f64],
) -> Result<()> {
    let d = z.len();
    let is_abs = |i: usize| absorbed.is_some_and(|m| m[i]);
    let val = |i: usize| {
        if is_abs(i) {
            z[i].round().clamp(0.0, 1.0)
        } else {
            z[i]
        }
    };
    // log Ber(e_j | z) = log z_j + Σ_{i≠j} log(1 - z_i)
    let mut log_one_minus = 0.0;
    let mut zero_factors = 0usize;
    for i in 0..d {
        let q = 1.0 - val(i);
        if q <= 0.0 {
            zero_factors += 1;
        } else {
            log_one_minus += q.ln();
        }
    }
    let mut logw = vec![f64::NEG_INFINITY; d];
    for j in 0..d {
        let zj = val(j);
        let q = 1.0 - zj;
        let rest_zero = zero_factors - usize::from(q <= 0.0);
        if zj <= 0.0 || rest_zero > 0 {
            continue;
        }
        let rest = if q <= 0.0 { log_one_minus } else { log_one_minus - q.ln() };
        logw[j] = zj.ln() + rest;
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Singular("Ber(Ω|z) vanishes on a slot".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for i in 0..d {
        if is_abs(i) {
            out[i] = 0.0;
            continue;
        }
        // ∂_i log Ber(e_j|z) = 1/z_i if i == j else -1/(1 - z_i)
        let zi = z[i];
        let hit = w[i] / total;
        out[i] = jac * (hit / zi - (1.0 - hit) / (1.0 - zi));
    }
    Ok(())
}

/// `P(τ ≤ t)` for a Brownian motion with scale `sigma` started `gap` below the
/// barrier: `2 (1 - Φ(gap / (σ √t)))`.
pub fn halfspace_passage_cdf(gap: f64, sigma: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t.is_infinite() {
        return 1.0;
    }
    2.0 * normal_sf(gap / (sigma * t.sqrt()))
}

/// Isotropic multivariate Cauchy density with location `center` and scale `s`:
/// `Γ((d+1)/2) / π^{(d+1)/2} · s / (s² + |u - c|²)^{(d+1)/2}`.
pub fn halfspace_exit_density(u: &[f64], center: &[f64], scale: f64) -> Result<f64> {
    check_dim(center.len(), u.len())?;
    if !(scale > 0.0) {
        return Err(Error::pre("Cauchy scale must be positive"));
    }
    let k = (u.len() as f64 + 1.0) / 2.0;
    let r2: f64 = u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    let log_norm = ln_gamma(k) - k * PI.ln();
    Ok((log_norm + scale.ln() - k * (scale * scale + r2).ln()).exp())
}

/// Cauchy scale of the exit location for a start `gap` below the barrier when
/// the horizontal and vertical diffusion scales are `sx` and `sy`.
pub fn halfspace_exit_scale(gap: f64, sx: f64, sy: f64) -> f64 {
    gap * sx / sy
}

/// `∂_y log P(τ ≤ T - t)`, the drift that conditions the vertical coordinate to
/// reach `ymax` before `T`.
pub fn halfspace_accelerated_drift(y: f64, t: f64, horizon: f64, ymax: f64, sigma: f64) -> Result<f64> {
    if t >= horizon {
        return Err(Error::pre(format!("t={t} is not before T={horizon}")));
    }
    Ok(accelerated_drift_unchecked(ymax - y, horizon - t, sigma))
}

pub(crate) fn accelerated_drift_unchecked(gap: f64, remaining: f64, sigma: f64) -> f64 {
    let scale = sigma * remaining.sqrt();
    normal_hazard(gap / scale) / scale
}
