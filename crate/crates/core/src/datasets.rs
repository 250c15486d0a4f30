//! Toy target laws on each exit set, and lat/lon ingestion for sphere data.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::schemes::Rotation;
use crate::sde::SimRng;

/// One von Mises–Fisher component of a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfComponent {
    pub mean: Vec<f64>,
    pub kappa: f64,
    pub weight: f64,
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Angle offset from the mean direction on the circle (Best–Fisher).
fn vmf_circle_angle(kappa: f64, rng: &mut SimRng) -> f64 {
    if kappa < 1e-8 {
        return PI * (2.0 * rng.random::<f64>() - 1.0);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = 1.0 - rng.random::<f64>();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

/// Cosine to the mean direction on the 2-sphere, by inverting its CDF.
fn vmf_sphere_cosine(kappa: f64, rng: &mut SimRng) -> f64 {
    let u: f64 = rng.random();
    if kappa < 1e-8 {
        return 2.0 * u - 1.0;
    }
    (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

/// Exact draws from a mixture of von Mises–Fisher laws on the circle or 2-sphere.
pub fn vmf_mixture(d: usize, components: &[VmfComponent], n: usize, seed: u64) -> Result<SampleBatch> {
    if d != 2 && d != 3 {
        return Err(Error::pre(format!("vMF sampling supports d = 2 or 3, got {d}")));
    }
    if components.is_empty() {
        return Err(Error::pre("mixture needs at least one component"));
    }
    for c in components {
        if c.mean.len() != d {
            return Err(Error::Dimension { expected: d, got: c.mean.len() });
        }
        let norm = c.mean.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::pre(format!("component mean {:?} is not unit-norm", c.mean)));
        }
        if !(c.kappa >= 0.0) || !c.kappa.is_finite() {
            return Err(Error::pre(format!("concentration must be nonnegative, got {}", c.kappa)));
        }
        if !(c.weight > 0.0) {
            return Err(Error::pre("mixture weights must be positive"));
        }
    }
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::pre("mixture weights must sum to 1"));
    }
    let pole = [0.0, 0.0, 1.0];
    let rotations: Vec<Rotation> = components
        .iter()
        .map(|c| Rotation::between(&pole[..d], &c.mean))
        .collect();
    let mut rng = SimRng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick(&weights, rng.random());
        let c = &components[k];
        let p = if d == 2 {
            let a = c.mean[1].atan2(c.mean[0]) + vmf_circle_angle(c.kappa, &mut rng);
            vec![a.cos(), a.sin()]
        } else {
            let w = vmf_sphere_cosine(c.kappa, &mut rng);
            let phi = 2.0 * PI * rng.random::<f64>();
            let s = (1.0 - w * w).max(0.0).sqrt();
            rotations[k].apply(&[s * phi.cos(), s * phi.sin(), w])
        };
        points.push(normalized(&p));
    }
    Ok(SampleBatch::from_points(points))
}

/// Reads `lat,lon` rows in degrees and maps them to unit vectors.
pub fn parse_latlon_csv(text: &str) -> Result<SampleBatch> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == "lat,lon" => {}
        Some((i, _)) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected header `lat,lon`".into(),
            })
        }
        None => return Err(Error::Format("empty lat/lon file".into())),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let row = crate::batch::parse_row(line, i + 1)?;
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let [lat, lon] = row[..] else {
            return Err(bad(format!("expected 2 fields, got {}", row.len())));
        };
        if !(lat.abs() <= 90.0) {
            return Err(bad(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(lon.abs() <= 180.0) {
            return Err(bad(format!("longitude {lon} outside [-180, 180]")));
        }
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        let mut p = vec![la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()];
        // (90, 0) should give the exact pole, not cos(π/2) ≈ 6e-17
        for v in &mut p {
            if v.abs() < 1e-15 {
                *v = 0.0;
            }
        }
        points.push(normalized(&p));
    }
    Ok(SampleBatch::from_points(points))
}

pub fn ingest_latlon_csv(path: &Path) -> Result<SampleBatch> {
    parse_latlon_csv(&std::fs::read_to_string(path)?)
}

/// Independent Bernoulli coordinates.
pub fn bernoulli_product(p: &[f64], n: usize, seed: u64) -> Result<SampleBatch> {
    if p.is_empty() {
        return Err(Error::pre("need at least one coordinate"));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::pre(format!("probability {bad} outside [0, 1]")));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| p.iter().map(|&pi| f64::from(u8::from(rng.random::<f64>() < pi))).collect())
        .collect();
    Ok(SampleBatch::from_points(points))
}

/// Edge probabilities of a two-community block model, upper triangle in
/// row-major order. Nodes `0..n/2` form the first community.
pub fn sbm_edge_probabilities(n_nodes: usize, p_in: f64, p_out: f64) -> Result<Vec<f64>> {
    if n_nodes < 2 || n_nodes % 2 == 1 {
        return Err(Error::pre(format!("node count must be even and at least 2, got {n_nodes}")));
    }
    if n_nodes > 8 {
        return Err(Error::pre(format!("at most 8 nodes supported, got {n_nodes}")));
    }
    let half = n_nodes / 2;
    let mut p = Vec::with_capacity(n_nodes * (n_nodes - 1) / 2);
    for i in 0..n_nodes {
        for j in i + 1..n_nodes {
            p.push(if (i < half) == (j < half) { p_in } else { p_out });
        }
    }
    Ok(p)
}

/// Adjacency upper triangles of a two-community stochastic block model.
pub fn tiny_sbm(n_nodes: usize, p_in: f64, p_out: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    bernoulli_product(&sbm_edge_probabilities(n_nodes, p_in, p_out)?, n, seed)
}

/// Independent one-hot slots; `probs[s]` is the simplex of slot `s`.
pub fn categorical_product(probs: &[Vec<f64>], n: usize, seed: u64) -> Result<SampleBatch> {
    let d = probs.first().map_or(0, Vec::len);
    if d < 2 {
        return Err(Error::pre("each slot needs at least two categories"));
    }
    for p in probs {
        if p.len() != d {
            return Err(Error::Dimension { expected: d, got: p.len() });
        }
        if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::pre(format!("{p:?} is not a probability simplex")));
        }
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let mut row = vec![0.0; d * probs.len()];
            for (s, p) in probs.iter().enumerate() {
                row[s * d + pick(p, rng.random())] = 1.0;
            }
            row
        })
        .collect();
    Ok(SampleBatch::from_points(points))
}
