//! Scalar special functions used by the kernels and the evaluation harness.

use std::f64::consts::{PI, SQRT_2};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / SQRT_2)
}

/// Upper tail `1 - Φ(u)` without cancellation for large `u`.
pub fn normal_sf(u: f64) -> f64 {
    0.5 * libm::erfc(u / SQRT_2)
}

/// Inverse Mills ratio `φ(u) / (1 - Φ(u))`.
///
/// Above `u = 6` the direct quotient loses digits to the tiny tail, so the
/// continued fraction for the Mills ratio is used instead.
pub fn normal_hazard(u: f64) -> f64 {
    if u < 6.0 {
        return normal_pdf(u) / normal_sf(u);
    }
    // R(u) = 1/(u + 1/(u + 2/(u + 3/(u + ...)))) evaluated bottom-up.
    let mut tail = u;
    for k in (1..=60).rev() {
        tail = u + k as f64 / tail;
    }
    tail
}

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 30.0 {
        let q = 0.25 * ax * ax;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum
    } else {
        // Asymptotic expansion; relative error far below 1e-12 at this range.
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..12 {
            let kf = k as f64;
            term *= (2.0 * kf - 1.0) * (2.0 * kf - 1.0) / (8.0 * kf * ax);
            sum += term;
        }
        ax.exp() / (2.0 * PI * ax).sqrt() * sum
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Surface area of the unit sphere `S^{d-1}` in `R^d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    2.0 * PI.powf(half) / ln_gamma(half).exp()
}

/// Inverse of the standard normal CDF by bisection refined with Newton steps.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile outside (0,1)");
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hazard_matches_direct_quotient_and_asymptote() {
        assert_relative_eq!(normal_hazard(0.0), normal_pdf(0.0) / 0.5, epsilon = 1e-15);
        // continued fraction and quotient agree where both are accurate
        let direct = normal_pdf(6.0) / normal_sf(6.0);
        let mut tail = 6.0;
        for k in (1..=60).rev() {
            tail = 6.0 + k as f64 / tail;
        }
        assert_relative_eq!(direct, tail, max_relative = 1e-10);
        let u = 40.0;
        assert_relative_eq!(normal_hazard(u), u + 1.0 / u, max_relative = 1e-3);
        assert!(normal_hazard(1e4).is_finite());
    }

    #[test]
    fn bessel_i0_reference_values() {
        assert_relative_eq!(bessel_i0(0.0), 1.0);
        assert_relative_eq!(bessel_i0(1.0), 1.266_065_877_752_008_2, max_relative = 1e-14);
        assert_relative_eq!(bessel_i0(5.0), 27.239_871_823_604_442, max_relative = 1e-13);
        assert_relative_eq!(bessel_i0(40.0), 1.489_477_479_341_99e16, max_relative = 1e-10);
        assert_relative_eq!(bessel_i0(29.9), 708_478_330_489.014_6, max_relative = 1e-12);
    }

    #[test]
    fn sphere_area_low_dims() {
        assert_relative_eq!(unit_sphere_area(2), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_area(3), 4.0 * PI, max_relative = 1e-14);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[0.01, 0.25, 0.5, 0.75, 0.975] {
            assert_relative_eq!(normal_cdf(normal_quantile(p)), p, max_relative = 1e-12);
        }
    }
}
