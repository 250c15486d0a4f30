//! Comparing sample batches with each other and with analytic laws, hitting
//! time summaries, and the step-size convergence experiment.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::h_sampler::DensityRatio;
use crate::io::{fmt_f64, svg_bars};
use crate::schemes::{ber1, sphere_poisson_kernel, Scheme, SchemeKind};
use crate::sde::{self, DriftField, Record, SimConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Binning {
    /// Equal-angle bins of the circle, starting at angle 0.
    Angle { bins: usize },
    /// Equal-area bins of the 2-sphere: `lat` bands uniform in `z`, `lon`
    /// equal longitude sectors.
    Sphere2 { lat: usize, lon: usize },
    /// One bin per point of `{0,1}^d`.
    Support { d: usize },
    /// One bin per point of `C_{d,m}`.
    Categorical { d: usize, m: usize },
    /// Equal-width bins of `[lo, hi]`; values outside fall into the end bins.
    Interval { lo: f64, hi: f64, bins: usize },
}

impl Binning {
    pub fn n_bins(&self) -> usize {
        match *self {
            Binning::Angle { bins } | Binning::Interval { bins, .. } => bins,
            Binning::Sphere2 { lat, lon } => lat * lon,
            Binning::Support { d } => 1 << d,
            Binning::Categorical { d, m } => d.pow(m as u32),
        }
    }

    /// The natural binning of a scheme's exit set.
    pub fn for_scheme(scheme: &Scheme, bins: Option<usize>) -> Result<Self> {
        let b = match scheme.kind {
            SchemeKind::Sphere { d: 2 } => Binning::Angle { bins: bins.unwrap_or(36) },
            SchemeKind::Sphere { d: 3 } => match bins {
                Some(b) => Binning::Sphere2 { lat: b, lon: 2 * b },
                None => Binning::Sphere2 { lat: 16, lon: 32 },
            },
            SchemeKind::Boolean { d } => Binning::Support { d },
            SchemeKind::Categorical { d, m } => Binning::Categorical { d, m },
            _ => return Err(Error::pre(format!("no exit-set binning for {scheme}"))),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Binning::Angle { bins } => bins >= 1,
            Binning::Sphere2 { lat, lon } => lat >= 1 && lon >= 1,
            Binning::Support { d } => (1..=12).contains(&d),
            Binning::Categorical { d, m } => d >= 2 && m >= 1 && (d as f64).powi(m as i32) <= 1_048_576.0,
            Binning::Interval { lo, hi, bins } => bins >= 1 && hi > lo && lo.is_finite() && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::pre(format!("invalid binning {self:?}")))
        }
    }

    /// Bin index of a point of the exit set.
    pub fn index(&self, x: &[f64]) -> Result<usize> {
        let bad = || Error::Dimension {
            expected: self.point_dim(),
            got: x.len(),
        };
        match *self {
            Binning::Angle { bins } => {
                if x.len() != 2 {
                    return Err(bad());
                }
                let a = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
                Ok(((a / (2.0 * PI) * bins as f64) as usize).min(bins - 1))
            }
            Binning::Sphere2 { lat, lon } => {
                if x.len() != 3 {
                    return Err(bad());
                }
                let band = (((x[2].clamp(-1.0, 1.0) + 1.0) / 2.0 * lat as f64) as usize).min(lat - 1);
                let a = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
                let sector = ((a / (2.0 * PI) * lon as f64) as usize).min(lon - 1);
                Ok(band * lon + sector)
            }
            Binning::Support { d } => {
                if x.len() != d {
                    return Err(bad());
                }
                Ok(x.iter().enumerate().map(|(i, &v)| usize::from(v >= 0.5) << i).sum())
            }
            Binning::Categorical { d, m } => {
                if x.len() != d * m {
                    return Err(bad());
                }
                Ok(x.chunks(d)
                    .rev()
                    .fold(0, |acc, slot| acc * d + crate::schemes::argmax(slot)))
            }
            Binning::Interval { lo, hi, bins } => {
                if x.len() != 1 {
                    return Err(bad());
                }
                let f = ((x[0] - lo) / (hi - lo) * bins as f64).floor();
                Ok((f.max(0.0) as usize).min(bins - 1))
            }
        }
    }

    fn point_dim(&self) -> usize {
        match *self {
            Binning::Angle { .. } => 2,
            Binning::Sphere2 { .. } => 3,
            Binning::Support { d } => d,
            Binning::Categorical { d, m } => d * m,
            Binning::Interval { .. } => 1,
        }
    }

    /// Normalized measure of each bin under the uniform law (circle, sphere)
    /// or counting measure (discrete sets, interval lengths).
    pub fn bin_areas(&self) -> Vec<f64> {
        match *self {
            Binning::Angle { bins } => vec![1.0 / bins as f64; bins],
            Binning::Sphere2 { lat, lon } => (0..lat * lon)
                .map(|k| {
                    let band = k / lon;
                    let z0 = -1.0 + 2.0 * band as f64 / lat as f64;
                    let z1 = -1.0 + 2.0 * (band + 1) as f64 / lat as f64;
                    // normalized area of a z-band sector: Δz/2 · 1/lon
                    (z1 - z0) / 2.0 / lon as f64
                })
                .collect(),
            Binning::Interval { lo, hi, bins } => vec![(hi - lo) / bins as f64; bins],
            _ => vec![1.0; self.n_bins()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub binning: Binning,
    pub counts: Vec<f64>,
    pub total: f64,
}

impl Histogram {
    pub fn empty(binning: Binning) -> Result<Self> {
        binning.validate()?;
        Ok(Self {
            counts: vec![0.0; binning.n_bins()],
            binning,
            total: 0.0,
        })
    }

    pub fn from_points(binning: Binning, points: &[Vec<f64>]) -> Result<Self> {
        let mut h = Self::empty(binning)?;
        for p in points {
            let i = h.binning.index(p)?;
            h.counts[i] += 1.0;
            h.total += 1.0;
        }
        Ok(h)
    }

    pub fn from_values(binning: Binning, values: &[f64]) -> Result<Self> {
        let mut h = Self::empty(binning)?;
        for &v in values {
            let i = h.binning.index(&[v])?;
            h.counts[i] += 1.0;
            h.total += 1.0;
        }
        Ok(h)
    }

    /// Bin probabilities of an analytic law.
    pub fn from_law(binning: Binning, law: &AnalyticLaw) -> Result<Self> {
        binning.validate()?;
        let counts = law.bin_masses(&binning)?;
        let total = counts.iter().sum();
        Ok(Self { binning, counts, total })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        if self.total == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|c| c / self.total).collect()
    }

    /// Left bin edges plus the final right edge, for plotting.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        match self.binning {
            Binning::Interval { lo, hi, bins } => (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect(),
            Binning::Angle { bins } => (0..=bins).map(|k| 2.0 * PI * k as f64 / bins as f64).collect(),
            _ => (0..=n).map(|k| k as f64).collect(),
        }
    }
}

/// `½ Σ |a_i/N_a − b_i/N_b|`.
pub fn tv_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.binning != b.binning {
        return Err(Error::pre("histograms use different binnings"));
    }
    if a.total == 0.0 || b.total == 0.0 {
        return Err(Error::pre("histogram is empty"));
    }
    Ok(0.5 * a.probabilities().iter().zip(b.probabilities()).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::pre("sample is empty"));
    }
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::pre("sample contains NaN"));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(xs)?, sorted(ys)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(best)
}

/// Kolmogorov–Smirnov statistic of a sample against a continuous CDF.
pub fn ks_vs_cdf(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    let a = sorted(xs)?;
    let n = a.len() as f64;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < a.len() {
        let v = a[i];
        let lo = i as f64 / n;
        while i < a.len() && a[i] == v {
            i += 1;
        }
        let hi = i as f64 / n;
        let f = cdf(v);
        best = best.max((f - lo).abs()).max((hi - f).abs());
    }
    Ok(best)
}

/// 1-d Wasserstein-1 distance `∫ |F_x − F_y|` between empirical laws.
pub fn w1_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(xs)?, sorted(ys)?);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut area = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        area += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(area)
}

/// Closed-form exit laws available as histogram references.
#[derive(Clone, Debug)]
pub enum AnalyticLaw {
    /// Uniform law on the circle or 2-sphere, or on a discrete support.
    Uniform,
    /// Harmonic measure of the unit ball seen from `z`.
    Poisson { z: Vec<f64> },
    /// Density with respect to the uniform law (circle, sphere).
    Density(DensityRatio),
    /// Product Bernoulli law on the cube.
    Bernoulli { p: Vec<f64> },
    /// Independent slots with the given per-slot simplices (`d·m` values).
    Categorical { probs: Vec<f64> },
}

const VALID_LAWS: &str =
    "uniform | poisson:z=<csv> | vmf:kappa=<k>,mu=<csv> | bernoulli:p=<csv> | categorical:p=<csv>";

fn csv_vec(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

impl AnalyticLaw {
    pub fn parse(desc: &str, scheme: &Scheme) -> Result<Self> {
        let bad = || Error::Descriptor {
            given: desc.into(),
            valid: VALID_LAWS.into(),
        };
        let desc = desc.trim();
        if desc == "uniform" {
            return Ok(AnalyticLaw::Uniform);
        }
        if let Some(rest) = desc.strip_prefix("poisson:z=") {
            return Ok(AnalyticLaw::Poisson {
                z: csv_vec(rest).ok_or_else(bad)?,
            });
        }
        if desc.starts_with("vmf:") {
            return Ok(AnalyticLaw::Density(DensityRatio::parse(desc, scheme)?));
        }
        if let Some(rest) = desc.strip_prefix("bernoulli:p=") {
            return Ok(AnalyticLaw::Bernoulli {
                p: csv_vec(rest).ok_or_else(bad)?,
            });
        }
        if let Some(rest) = desc.strip_prefix("categorical:p=") {
            let mut probs = csv_vec(rest).ok_or_else(bad)?;
            if let SchemeKind::Categorical { d, m } = scheme.kind {
                if probs.len() == d && m > 1 {
                    probs = probs.repeat(m);
                }
            }
            return Ok(AnalyticLaw::Categorical { probs });
        }
        Err(bad())
    }

    /// Probability of each bin, by quadrature for continuous laws.
    pub fn bin_masses(&self, binning: &Binning) -> Result<Vec<f64>> {
        let n = binning.n_bins();
        let density = |x: &[f64]| -> Result<f64> {
            match self {
                AnalyticLaw::Uniform => Ok(1.0),
                AnalyticLaw::Poisson { z } => {
                    let d = z.len() as f64;
                    // kernel against the normalized surface measure
                    Ok(sphere_poisson_kernel(z, x)? * crate::special::unit_sphere_area(d as usize))
                }
                AnalyticLaw::Density(r) => Ok(r.eval(x)),
                _ => Err(Error::pre("a discrete law needs a discrete binning")),
            }
        };
        match *binning {
            Binning::Angle { bins } => {
                let sub = 256;
                let mut out = vec![0.0; bins];
                for (k, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for s in 0..sub {
                        let a = 2.0 * PI * (k as f64 + (s as f64 + 0.5) / sub as f64) / bins as f64;
                        acc += density(&[a.cos(), a.sin()])?;
                    }
                    *o = acc / (sub * bins) as f64;
                }
                Ok(out)
            }
            Binning::Sphere2 { lat, lon } => {
                let sub = 32;
                let mut out = vec![0.0; lat * lon];
                for (k, o) in out.iter_mut().enumerate() {
                    let (band, sector) = (k / lon, k % lon);
                    let mut acc = 0.0;
                    for si in 0..sub {
                        let z = -1.0 + 2.0 * (band as f64 + (si as f64 + 0.5) / sub as f64) / lat as f64;
                        let r = (1.0 - z * z).max(0.0).sqrt();
                        for sj in 0..sub {
                            let a = 2.0 * PI * (sector as f64 + (sj as f64 + 0.5) / sub as f64) / lon as f64;
                            acc += density(&[r * a.cos(), r * a.sin(), z])?;
                        }
                    }
                    *o = acc / (sub * sub) as f64 * binning.bin_areas()[k];
                }
                Ok(out)
            }
            Binning::Support { d } => {
                let p: Vec<f64> = match self {
                    AnalyticLaw::Uniform => vec![0.5; d],
                    AnalyticLaw::Bernoulli { p } => p.clone(),
                    _ => return Err(Error::pre("cube binning needs a uniform or Bernoulli law")),
                };
                if p.len() != d {
                    return Err(Error::Dimension { expected: d, got: p.len() });
                }
                Ok((0..n)
                    .map(|k| (0..d).map(|i| ber1(f64::from(((k >> i) & 1) as u8), p[i])).product())
                    .collect())
            }
            Binning::Categorical { d, m } => {
                let probs: Vec<f64> = match self {
                    AnalyticLaw::Uniform => vec![1.0 / d as f64; d * m],
                    AnalyticLaw::Categorical { probs } => probs.clone(),
                    _ => return Err(Error::pre("categorical binning needs a uniform or categorical law")),
                };
                if probs.len() != d * m {
                    return Err(Error::Dimension { expected: d * m, got: probs.len() });
                }
                Ok((0..n)
                    .map(|mut k| {
                        let mut p = 1.0;
                        for s in 0..m {
                            p *= probs[s * d + k % d];
                            k /= d;
                        }
                        p
                    })
                    .collect())
            }
            Binning::Interval { .. } => Err(Error::pre("analytic laws are defined on exit sets")),
        }
    }
}

/// Summary of a batch of hitting times.
#[derive(Clone, Debug)]
pub struct HitReport {
    pub histogram: Histogram,
    /// Mean over runs that hit.
    pub mean: f64,
    /// Quantiles counting truncated runs as `+∞`.
    pub median: f64,
    pub p95: f64,
    pub truncation_rate: f64,
    pub n: usize,
}

fn censored_quantile(sorted_hits: &[f64], total: usize, q: f64) -> f64 {
    let rank = ((q * total as f64).ceil() as usize).clamp(1, total);
    sorted_hits.get(rank - 1).copied().unwrap_or(f64::INFINITY)
}

/// Histogram of hitting times over `[0, max τ]` plus summary statistics.
pub fn hitting_time_report(batch: &SampleBatch, bins: usize) -> Result<HitReport> {
    let n = batch.len() + batch.truncated_count;
    if n == 0 {
        return Err(Error::pre("batch is empty"));
    }
    if !batch.is_empty() && !batch.has_taus() {
        return Err(Error::pre("batch carries no hitting times"));
    }
    let taus = if batch.is_empty() { Vec::new() } else { sorted(&batch.taus)? };
    let hi = taus.last().copied().unwrap_or(1.0);
    let binning = Binning::Interval {
        lo: 0.0,
        hi: if hi > 0.0 { hi } else { 1.0 },
        bins: bins.max(1),
    };
    let histogram = Histogram::from_values(binning, &taus)?;
    let mean = if taus.is_empty() {
        f64::NAN
    } else {
        taus.iter().sum::<f64>() / taus.len() as f64
    };
    Ok(HitReport {
        histogram,
        mean,
        median: censored_quantile(&taus, n, 0.5),
        p95: censored_quantile(&taus, n, 0.95),
        truncation_rate: batch.truncated_count as f64 / n as f64,
        n,
    })
}

impl HitReport {
    pub fn to_csv(&self) -> String {
        let bins = self.histogram.counts.len();
        let mut s = String::from("metric,value,n,bins,notes\n");
        for (name, v, note) in [
            ("tau_mean", self.mean, "over runs that hit"),
            ("tau_median", self.median, "truncated runs count as inf"),
            ("tau_p95", self.p95, "truncated runs count as inf"),
            ("truncation_rate", self.truncation_rate, ""),
        ] {
            writeln!(s, "{name},{},{},{bins},{note}", fmt_f64(v), self.n).unwrap();
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let title = format!(
            "hitting times: n={} median={:.4} p95={:.4} truncated={:.3}",
            self.n, self.median, self.p95, self.truncation_rate
        );
        svg_bars(&title, &self.histogram.edges(), &self.histogram.probabilities())
    }
}

/// One row of the report CSV.
pub fn report_row(metric: &str, value: f64, n: usize, bins: usize, notes: &str) -> String {
    format!("metric,value,n,bins,notes\n{metric},{},{n},{bins},{notes}\n", fmt_f64(value))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceLevel {
    pub delta: f64,
    pub sq_w1: f64,
    pub n: usize,
    pub nonhit_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Convergence {
    pub levels: Vec<ConvergenceLevel>,
    /// Least-squares slope of `log sq_w1` against `log Δ`.
    pub slope: f64,
}

impl Convergence {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,sq_w1,n\n");
        for l in &self.levels {
            writeln!(s, "{},{},{}", fmt_f64(l.delta), fmt_f64(l.sq_w1), l.n).unwrap();
        }
        s
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Settings of [`convergence_experiment`].
pub struct ConvergenceSetup<'a> {
    pub scheme: &'a Scheme,
    pub drift: &'a dyn DriftField,
    /// Maps an exit point to the real number compared across step sizes.
    pub projection: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    pub deltas: Vec<f64>,
    pub reference_delta: f64,
    pub n: usize,
    /// Truncation horizon shared by all levels.
    pub horizon: f64,
    pub seed: u64,
}

/// Squared W1 between projected exit laws at each step size and at the
/// reference step size, with the fitted log-log slope.
///
/// Every step size must be an integer multiple of the reference; each coarse
/// Gaussian increment is the normalized sum of the reference increments it
/// spans, so all levels are driven by the same Brownian paths.
pub fn convergence_experiment(setup: &ConvergenceSetup<'_>) -> Result<Convergence> {
    let r = setup.reference_delta;
    if setup.deltas.is_empty() || setup.n == 0 {
        return Err(Error::pre("need at least one step size and one run"));
    }
    if !(r > 0.0) || setup.deltas.iter().any(|&d| !(d > r)) {
        return Err(Error::pre("reference step must be positive and below every step size"));
    }
    let ratios: Vec<usize> = setup
        .deltas
        .iter()
        .map(|&d| {
            let k = (d / r).round();
            if (d / r - k).abs() > 1e-9 * k {
                Err(Error::pre(format!("step size {d} is not a multiple of the reference {r}")))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;
    let run = |delta: f64, substeps: usize| -> Result<(Vec<f64>, f64)> {
        let cfg = SimConfig {
            max_steps: (setup.horizon / delta).ceil() as usize,
            noise_substeps: substeps,
            record: Record::Ends,
            ..SimConfig::with_dt(delta, 1, setup.seed)
        };
        let trajs = sde::simulate_batch(setup.scheme, setup.drift, &setup.scheme.z0, &cfg, setup.n)?;
        let batch = SampleBatch::from_trajectories(&trajs);
        let rate = batch.truncation_rate();
        if rate > 0.25 {
            return Err(Error::config(format!(
                "non-hit rate {rate:.3} at step {delta} exceeds 0.25; increase the horizon"
            )));
        }
        Ok((batch.points.iter().map(|p| (setup.projection)(p)).collect(), rate))
    };
    let (reference, _) = run(r, 1)?;
    let mut levels = Vec::with_capacity(setup.deltas.len());
    for (&delta, &k) in setup.deltas.iter().zip(&ratios) {
        let (proj, rate) = run(delta, k)?;
        let w = w1_1d(&proj, &reference)?;
        levels.push(ConvergenceLevel {
            delta,
            sq_w1: w * w,
            n: proj.len(),
            nonhit_rate: rate,
        });
    }
    if levels.iter().any(|l| !(l.sq_w1 > 0.0)) {
        return Err(Error::Degenerate("zero error at some step size; slope undefined".into()));
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.delta.ln()).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.sq_w1.ln()).collect();
    let slope = if levels.len() >= 2 { ls_slope(&xs, &ys) } else { f64::NAN };
    Ok(Convergence { levels, slope })
}
