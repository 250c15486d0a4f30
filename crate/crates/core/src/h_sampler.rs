//! Approximate sampling from a target exit law `π*` by simulating the
//! h-transform with a Monte Carlo estimate of `∇ log h` at every step.
//!
//! `h_t(z) = E[π̂*(X) | Z_t = z]` with `X` drawn from the exit kernel, and its
//! gradient is estimated with the score-function identity
//! `∇ log h ≈ Σ_i π̂*(x_i) ∇ log q(x_i | z) / Σ_i π̂*(x_i)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::batch::SampleBatch;
use crate::error::{check_dim, Error, Result};
use crate::schemes::{ber1, halfspace_exit_scale, kernels, Scheme, SchemeKind};
use crate::sde::{self, DriftField, SimConfig, SimRng, StepContext};
use crate::special::bessel_i0;

type RatioFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A density ratio `π*(x) / q_Ω(x)` against the scheme's exit law from `z0`.
#[derive(Clone)]
pub struct DensityRatio {
    pub descriptor: String,
    eval: Arc<RatioFn>,
}

impl fmt::Debug for DensityRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensityRatio").field("descriptor", &self.descriptor).finish()
    }
}

const VALID_RATIOS: &str = "uniform | vmf:kappa=<k>,mu=<csv> | bernoulli:p=<csv>";

fn parse_csv(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

impl DensityRatio {
    pub fn new(descriptor: impl Into<String>, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            descriptor: descriptor.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn uniform() -> Self {
        Self::new("uniform", |_| 1.0)
    }

    /// von Mises–Fisher density against the uniform law on the circle or the
    /// 2-sphere.
    pub fn vmf(kappa: f64, mu: Vec<f64>) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::pre("vmf concentration must be nonnegative"));
        }
        let n = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::pre("vmf mean must be a unit vector"));
        }
        let log_norm = match mu.len() {
            2 => bessel_i0(kappa).ln(),
            // log(sinh κ / κ), written to survive large κ
            3 if kappa > 0.0 => kappa + (-(-2.0 * kappa).exp_m1()).ln() - (2.0 * kappa).ln(),
            3 => 0.0,
            _ => return Err(Error::pre("vmf ratio needs d = 2 or 3")),
        };
        let desc = format!(
            "vmf:kappa={kappa},mu={}",
            mu.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        );
        Ok(Self::new(desc, move |x| {
            let dot: f64 = x.iter().zip(&mu).map(|(a, b)| a * b).sum();
            (kappa * dot - log_norm).exp()
        }))
    }

    /// `Ber(x | p) / Ber(x | base)`.
    pub fn bernoulli(p: Vec<f64>, base: Vec<f64>) -> Result<Self> {
        check_dim(p.len(), base.len())?;
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || base.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::pre("bernoulli ratio needs p in [0,1] and base in (0,1)"));
        }
        let desc = format!(
            "bernoulli:p={}",
            p.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        );
        Ok(Self::new(desc, move |x| {
            x.iter()
                .zip(p.iter().zip(&base))
                .map(|(&xi, (&pi, &bi))| ber1(xi, pi) / ber1(xi, bi))
                .product()
        }))
    }

    /// Parses a ratio descriptor. The Bernoulli base is the scheme's `z0`.
    pub fn parse(desc: &str, scheme: &Scheme) -> Result<Self> {
        let bad = || Error::Descriptor {
            given: desc.to_string(),
            valid: VALID_RATIOS.into(),
        };
        let desc = desc.trim();
        if desc == "uniform" {
            return Ok(Self::uniform());
        }
        if let Some(rest) = desc.strip_prefix("vmf:") {
            let rest = rest.strip_prefix("kappa=").ok_or_else(bad)?;
            let (k, mu) = rest.split_once(",mu=").ok_or_else(bad)?;
            let kappa: f64 = k.trim().parse().map_err(|_| bad())?;
            let mu = parse_csv(mu).ok_or_else(bad)?;
            check_dim(scheme.dim(), mu.len())?;
            return Self::vmf(kappa, mu);
        }
        if let Some(rest) = desc.strip_prefix("bernoulli:p=") {
            let p = parse_csv(rest).ok_or_else(bad)?;
            check_dim(scheme.dim(), p.len())?;
            return Self::bernoulli(p, scheme.z0.clone());
        }
        Err(bad())
    }
}

fn check_supported(scheme: &Scheme) -> Result<()> {
    match scheme.kind {
        SchemeKind::Sphere { .. } | SchemeKind::Boolean { .. } => Ok(()),
        SchemeKind::HalfSpace { accel: None, .. } => Ok(()),
        _ => Err(Error::pre(format!(
            "h-transform sampling needs a sphere, Boolean or plain half-space scheme, got {scheme}"
        ))),
    }
}

fn gaussian(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Exit point on the unit circle of Brownian motion started at `w`, via the
/// disk automorphism `u ↦ (u + w) / (1 + w̄ u)` applied to a uniform `u`.
fn circle_exit(w: &[f64], rng: &mut SimRng) -> [f64; 2] {
    let a = rng.random::<f64>() * 2.0 * PI;
    let (ur, ui) = (a.cos(), a.sin());
    let (wr, wi) = (w[0], w[1]);
    let (nr, ni) = (ur + wr, ui + wi);
    // 1 + conj(w) u
    let (dr, di) = (1.0 + wr * ur + wi * ui, wr * ui - wi * ur);
    let den = dr * dr + di * di;
    let (xr, xi) = ((nr * dr + ni * di) / den, (ni * dr - nr * di) / den);
    let n = xr.hypot(xi);
    [xr / n, xi / n]
}

/// Exit point on the unit 2-sphere from `w`: inverse CDF of the cosine to the
/// direction of `w`, uniform azimuth.
fn sphere2_exit(w: &[f64], rng: &mut SimRng) -> [f64; 3] {
    let rho = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let u: f64 = rng.random();
    let phi = rng.random::<f64>() * 2.0 * PI;
    if rho < 1e-10 {
        let c = 2.0 * u - 1.0;
        let s = (1.0 - c * c).max(0.0).sqrt();
        return [s * phi.cos(), s * phi.sin(), c];
    }
    let a = 2.0 * rho * u / (1.0 - rho * rho) + 1.0 / (1.0 + rho);
    let c = ((1.0 + rho * rho - 1.0 / (a * a)) / (2.0 * rho)).clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt();
    let e3 = [w[0] / rho, w[1] / rho, w[2] / rho];
    // any unit vector orthogonal to e3
    let pick = if e3[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dp = pick[0] * e3[0] + pick[1] * e3[1] + pick[2] * e3[2];
    let mut e1 = [pick[0] - dp * e3[0], pick[1] - dp * e3[1], pick[2] - dp * e3[2]];
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|v| *v /= n1);
    let e2 = [
        e3[1] * e1[2] - e3[2] * e1[1],
        e3[2] * e1[0] - e3[0] * e1[2],
        e3[0] * e1[1] - e3[1] * e1[0],
    ];
    let (cp, sp) = (phi.cos(), phi.sin());
    std::array::from_fn(|i| c * e3[i] + s * (cp * e1[i] + sp * e2[i]))
}

fn uniform_sphere(rng: &mut SimRng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = gaussian(rng);
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            out.iter_mut().for_each(|v| *v /= n);
            return;
        }
    }
}

/// One particle from the exit kernel of the stopping set at `z`, together with
/// its importance weight relative to that kernel (1 for exact draws).
fn draw_particle(scheme: &Scheme, z: &[f64], rng: &mut SimRng, x: &mut [f64]) -> Result<f64> {
    match &scheme.kind {
        SchemeKind::Sphere { d } => {
            let r = 1.0 - scheme.hit_eps;
            let w: Vec<f64> = z.iter().map(|v| v / r).collect();
            match d {
                2 => x.copy_from_slice(&circle_exit(&w, rng)),
                3 => x.copy_from_slice(&sphere2_exit(&w, rng)),
                _ => {
                    uniform_sphere(rng, x);
                    // q / uniform on the unit sphere, for the rescaled start
                    let ww: f64 = w.iter().map(|v| v * v).sum();
                    let dist: f64 = w.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    return Ok((1.0 - ww) / dist.powf(*d as f64 / 2.0));
                }
            }
            Ok(1.0)
        }
        SchemeKind::Boolean { .. } => {
            let jac = 1.0 / (1.0 - 2.0 * scheme.hit_eps);
            let active = scheme.active(z);
            for i in 0..z.len() {
                x[i] = if active[i] {
                    let p = (z[i] - scheme.hit_eps) * jac;
                    f64::from(u8::from(rng.random::<f64>() < p))
                } else if z[i] >= 0.5 {
                    1.0
                } else {
                    0.0
                };
            }
            Ok(1.0)
        }
        SchemeKind::HalfSpace { d, ymax, sx, sy, .. } => {
            let gap = ymax - scheme.hit_eps - z[*d];
            let s = halfspace_exit_scale(gap.max(0.0), *sx, *sy);
            let g0 = gaussian(rng).abs().max(1e-300);
            for i in 0..*d {
                x[i] = z[i] + s * gaussian(rng) / g0;
            }
            x[*d] = *ymax;
            Ok(1.0)
        }
        _ => unreachable!(),
    }
}

/// Monte Carlo estimate of `h_t(z)` and `∇ log h_t(z)` from `m` kernel draws.
pub fn mc_h_score(
    scheme: &Scheme,
    ratio: &DensityRatio,
    z: &[f64],
    ctx: &StepContext<'_>,
    m: usize,
    rng: &mut SimRng,
) -> Result<(f64, Vec<f64>)> {
    check_supported(scheme)?;
    check_dim(scheme.dim(), z.len())?;
    if m == 0 {
        return Err(Error::pre("particle count must be at least 1"));
    }
    let d = z.len();
    let mut x = vec![0.0; d];
    let mut s = vec![0.0; d];
    let mut score = vec![0.0; d];
    let (mut wsum, mut isum) = (0.0, 0.0);
    for _ in 0..m {
        let iw = draw_particle(scheme, z, rng, &mut x)?;
        let w = iw * ratio.eval(&x);
        isum += iw;
        if w == 0.0 {
            continue;
        }
        scheme.bridge_score(z, &x, ctx, &mut s)?;
        wsum += w;
        score.iter_mut().zip(&s).for_each(|(a, b)| *a += w * b);
    }
    if !(wsum > 0.0) || !wsum.is_finite() {
        return Err(Error::Degenerate("all particle weights vanish".into()));
    }
    score.iter_mut().for_each(|v| *v /= wsum);
    Ok((wsum / isum, score))
}

/// Drift of the estimated h-transform: baseline plus `σ² S ∇ log ĥ`.
pub struct HTransformDrift<'a> {
    pub scheme: &'a Scheme,
    pub ratio: &'a DensityRatio,
    pub m: usize,
}

impl DriftField for HTransformDrift<'_> {
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, rng: &mut SimRng, out: &mut [f64]) {
        match mc_h_score(self.scheme, self.ratio, z, ctx, self.m, rng) {
            Ok((_, score)) => {
                let s2 = ctx.sigma * ctx.sigma;
                if self.scheme.baseline_drift(z, ctx, out).is_err() {
                    out.fill(f64::NAN);
                    return;
                }
                for (i, o) in out.iter_mut().enumerate() {
                    let c = self.scheme.noise_scale(i);
                    *o += s2 * c * c * score[i];
                }
            }
            Err(_) => out.fill(f64::NAN),
        }
    }
}

/// Simulates `n` runs of the estimated h-transform from the scheme's `z0`.
pub fn sample_h_transform(
    scheme: &Scheme,
    ratio: &DensityRatio,
    cfg: &SimConfig,
    m: usize,
    n: usize,
) -> Result<SampleBatch> {
    check_supported(scheme)?;
    if m == 0 {
        return Err(Error::pre("particle count must be at least 1"));
    }
    let drift = HTransformDrift { scheme, ratio, m };
    let mut cfg = cfg.clone();
    cfg.record = sde::Record::Ends;
    let trajs = sde::simulate_batch(scheme, &drift, &scheme.z0, &cfg, n)?;
    Ok(SampleBatch::from_trajectories(&trajs))
}

/// Exact `h(z) = Σ_x π̂(x) Ber(x | z')` and `∇ log h` for a Boolean scheme by
/// enumerating the cube (`d ≤ 16`), where `z'` is `z` rescaled to the
/// stopping faces and absorbed coordinates enter at their rounded value.
pub fn boolean_exact_h(scheme: &Scheme, ratio: &DensityRatio, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let SchemeKind::Boolean { d } = scheme.kind else {
        return Err(Error::pre("exact h needs a Boolean scheme"));
    };
    check_dim(d, z.len())?;
    if d > 16 {
        return Err(Error::pre("exact h enumerates at most 16 coordinates"));
    }
    let jac = 1.0 / (1.0 - 2.0 * scheme.hit_eps);
    let active = scheme.active(z);
    let zm: Vec<f64> = (0..d)
        .map(|i| {
            if active[i] {
                (z[i] - scheme.hit_eps) * jac
            } else if z[i] >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut h = 0.0;
    let mut grad = vec![0.0; d];
    let mut x = vec![0.0; d];
    for bits in 0u32..(1 << d) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = f64::from((bits >> i) & 1);
        }
        let r = ratio.eval(&x);
        let p = kernels::bernoulli_exit_likelihood(&x, &zm)?;
        h += r * p;
        for i in 0..d {
            if !active[i] {
                continue;
            }
            // ∂_i Ber(x|z') = (2x_i - 1) Π_{j≠i} ber1(x_j, z'_j)
            let rest: f64 = (0..d).filter(|&j| j != i).map(|j| ber1(x[j], zm[j])).product();
            grad[i] += r * (2.0 * x[i] - 1.0) * rest * jac;
        }
    }
    if !(h > 0.0) {
        return Err(Error::Degenerate("exact h vanishes".into()));
    }
    grad.iter_mut().for_each(|g| *g /= h);
    Ok((h, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::RngStream;

    fn ctx(cfg: &SimConfig) -> StepContext<'_> {
        StepContext {
            t: 0.0,
            step: 0,
            dt: 1e-3,
            sigma: 1.0,
            cfg,
        }
    }

    #[test]
    fn ratio_descriptors() {
        let s: Scheme = "sphere:d=2".parse().unwrap();
        let r = DensityRatio::parse("vmf:kappa=5,mu=1,0", &s).unwrap();
        assert!((r.eval(&[1.0, 0.0]) - (5.0f64.exp() / bessel_i0(5.0))).abs() < 1e-9);
        assert_eq!(DensityRatio::parse("uniform", &s).unwrap().eval(&[0.0, 1.0]), 1.0);
        assert!(matches!(DensityRatio::parse("gamma:a=1", &s), Err(Error::Descriptor { .. })));
        let b: Scheme = "boolean:d=2".parse().unwrap();
        let r = DensityRatio::parse("bernoulli:p=0.8,0.8", &b).unwrap();
        assert!((r.eval(&[1.0, 1.0]) - 0.64 / 0.25).abs() < 1e-12);
    }

    #[test]
    fn vmf_ratio_integrates_to_one_against_uniform() {
        for (kappa, d) in [(5.0, 2usize), (10.0, 3)] {
            let mu: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            let r = DensityRatio::vmf(kappa, mu).unwrap();
            let n = 200_000;
            let mean: f64 = if d == 2 {
                (0..n)
                    .map(|k| {
                        let a = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                        r.eval(&[a.cos(), a.sin()])
                    })
                    .sum::<f64>()
                    / n as f64
            } else {
                // uniform measure on the cosine
                (0..n)
                    .map(|k| {
                        let c = -1.0 + 2.0 * (k as f64 + 0.5) / n as f64;
                        r.eval(&[c, (1.0 - c * c).sqrt(), 0.0])
                    })
                    .sum::<f64>()
                    / n as f64
            };
            assert!((mean - 1.0).abs() < 1e-6, "{kappa} {d}: {mean}");
        }
    }

    #[test]
    fn exact_sphere_draws_match_the_kernel() {
        // mean exit point of BM from w equals w, for both exact samplers
        let mut rng = RngStream::new(11, 0).rng();
        let n = 200_000;
        let w2 = [0.5, -0.3];
        let mut m2 = [0.0; 2];
        for _ in 0..n {
            let x = circle_exit(&w2, &mut rng);
            m2[0] += x[0] / n as f64;
            m2[1] += x[1] / n as f64;
        }
        assert!((m2[0] - 0.5).abs() < 0.006 && (m2[1] + 0.3).abs() < 0.006, "{m2:?}");
        let w3 = [0.2, 0.4, -0.5];
        let mut m3 = [0.0; 3];
        for _ in 0..n {
            let x = sphere2_exit(&w3, &mut rng);
            assert!(((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - 1.0).abs() < 1e-12);
            for i in 0..3 {
                m3[i] += x[i] / n as f64;
            }
        }
        for i in 0..3 {
            assert!((m3[i] - w3[i]).abs() < 0.006, "{m3:?}");
        }
    }

    #[test]
    fn single_bit_example_is_exact() {
        let scheme: Scheme = "boolean:d=1,eps=1e-12".parse().unwrap();
        let ratio = DensityRatio::new("atom", |x| if x[0] == 1.0 { 2.0 } else { 0.0 });
        let (h, g) = boolean_exact_h(&scheme, &ratio, &[0.5]).unwrap();
        assert!((h - 1.0).abs() < 1e-9 && (g[0] - 2.0).abs() < 1e-9);
        let cfg = SimConfig::default();
        let mut rng = RngStream::new(2, 0).rng();
        let (hm, gm) = mc_h_score(&scheme, &ratio, &[0.5], &ctx(&cfg), 10_000, &mut rng).unwrap();
        // ĥ = 2·Binomial(m, 1/2)/m has standard error 1/√m
        assert!((hm - 1.0).abs() < 3.0 / 100.0, "{hm}");
        assert!((gm[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn single_particle_returns_its_own_score() {
        let scheme: Scheme = "boolean:d=2".parse().unwrap();
        let ratio = DensityRatio::uniform();
        let cfg = SimConfig::default();
        let z = [0.3, 0.6];
        let mut rng = RngStream::new(5, 1).rng();
        let (h, g) = mc_h_score(&scheme, &ratio, &z, &ctx(&cfg), 1, &mut rng).unwrap();
        assert_eq!(h, 1.0);
        let mut rng = RngStream::new(5, 1).rng();
        let mut x = [0.0; 2];
        draw_particle(&scheme, &z, &mut rng, &mut x).unwrap();
        let mut s = [0.0; 2];
        scheme.bridge_score(&z, &x, &ctx(&cfg), &mut s).unwrap();
        assert_eq!(g, s.to_vec());
    }

    #[test]
    fn uniform_ratio_gives_vanishing_score() {
        let cfg = SimConfig::default();
        for desc in ["boolean:d=3", "sphere:d=2", "sphere:d=3", "halfspace:d=1"] {
            let scheme: Scheme = desc.parse().unwrap();
            let mut z = scheme.z0.clone();
            z[0] = 0.2 + if desc.starts_with("boolean") { 0.2 } else { 0.0 };
            let mut rng = RngStream::new(8, 0).rng();
            let (_, g) = mc_h_score(&scheme, &DensityRatio::uniform(), &z, &ctx(&cfg), 10_000, &mut rng).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 0.05, "{desc}: {g:?}");
        }
    }

    #[test]
    fn zero_ratio_is_degenerate() {
        let scheme: Scheme = "boolean:d=1".parse().unwrap();
        let r = DensityRatio::new("zero", |_| 0.0);
        let cfg = SimConfig::default();
        let mut rng = RngStream::new(0, 0).rng();
        assert!(matches!(
            mc_h_score(&scheme, &r, &[0.5], &ctx(&cfg), 8, &mut rng),
            Err(Error::Degenerate(_))
        ));
        let c: Scheme = "categorical:d=2,m=1".parse().unwrap();
        assert!(sample_h_transform(&c, &DensityRatio::uniform(), &cfg, 8, 1).is_err());
    }
}
