//! Processes conditioned on their exit point: direct bridge simulation with the
//! Doob h-transform drift, and pooled bridges obtained by transporting
//! unconditioned trajectories with the scheme's symmetry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{trajectories_from_csv, trajectories_to_csv};
use crate::schemes::{symmetry_transform, Scheme};
use crate::sde::{self, DriftField, RngStream, SimConfig, SimRng, StepContext, Trajectory};

/// The scheme's unconditioned drift.
pub struct BaselineDrift<'a>(pub &'a Scheme);

impl DriftField for BaselineDrift<'_> {
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, _rng: &mut SimRng, out: &mut [f64]) {
        if self.0.baseline_drift(z, ctx, out).is_err() {
            out.fill(f64::NAN);
        }
    }
}

/// Drift of the process conditioned to exit at `target`.
pub struct BridgeDrift<'a> {
    pub scheme: &'a Scheme,
    pub target: &'a [f64],
}

impl DriftField for BridgeDrift<'_> {
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, _rng: &mut SimRng, out: &mut [f64]) {
        if self.scheme.bridge_drift(z, self.target, ctx, out).is_err() {
            out.fill(f64::NAN);
        }
    }
}

/// Distance from the target within which a bridge exit is snapped onto it:
/// the larger of `2·hit_eps` and three single-step displacements.
pub fn snap_tolerance(scheme: &Scheme, cfg: &SimConfig) -> f64 {
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    let step = max(cfg.noise.values()) * max(cfg.dt.values()).sqrt();
    (2.0 * scheme.hit_eps).max(3.0 * step)
}

/// Simulates one bridge from the scheme's `z0` to `x`.
///
/// When the run hits within [`snap_tolerance`] of `x`, the stored exit is set
/// to `x` exactly. A run that reaches the truncation horizon is returned with
/// `hit = false`.
pub fn simulate_bridge(scheme: &Scheme, x: &[f64], cfg: &SimConfig, stream_id: u64) -> Result<Trajectory> {
    scheme.check_target(x)?;
    let drift = BridgeDrift { scheme, target: x };
    let mut cfg = cfg.clone();
    cfg.nonhit_policy = sde::NonHitPolicy::Discard;
    let mut traj = sde::simulate(scheme, &drift, &scheme.z0, &cfg, stream_id)?;
    if traj.hit {
        let exit = &mut traj.states[traj.hit_index];
        if scheme.target_distance(exit, x) <= snap_tolerance(scheme, &cfg) {
            exit.copy_from_slice(x);
        }
    }
    Ok(traj)
}

/// Stream id used for the `attempt`-th retry of stream `stream_id`.
pub fn retry_stream(stream_id: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        stream_id
    } else {
        RngStream::derive(stream_id, u64::from(attempt)) | (1u64 << 63)
    }
}

/// Simulates a bridge, resimulating on fresh substreams after truncation.
/// Returns the trajectory and the number of discarded attempts.
pub fn simulate_bridge_retrying(
    scheme: &Scheme,
    x: &[f64],
    cfg: &SimConfig,
    stream_id: u64,
    max_attempts: u32,
) -> Result<(Trajectory, u32)> {
    for attempt in 0..max_attempts.max(1) {
        let traj = simulate_bridge(scheme, x, cfg, retry_stream(stream_id, attempt))?;
        if traj.hit {
            return Ok((traj, attempt));
        }
    }
    Err(Error::config(format!(
        "bridge to {x:?} did not hit within the horizon after {max_attempts} attempts"
    )))
}

/// Pre-simulated unconditioned trajectories from the symmetric start.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgePool {
    pub scheme: Scheme,
    pub trajectories: Vec<Trajectory>,
    pub exit_points: Vec<Vec<f64>>,
    /// Fraction of simulated runs that were truncated and resimulated.
    pub attrition: f64,
    pub seed: u64,
}

/// Simulates until `n` hitting trajectories are collected.
pub fn build_pool(scheme: &Scheme, cfg: &SimConfig, n: usize) -> Result<BridgePool> {
    if n == 0 {
        return Err(Error::pre("pool size must be at least 1"));
    }
    if !scheme.has_symmetry() {
        return Err(Error::pre(format!("scheme {scheme} has no symmetry transform")));
    }
    if !scheme.is_symmetric_point(&scheme.z0) {
        return Err(Error::pre("pool requires the scheme's symmetric start point"));
    }
    let mut cfg = cfg.clone();
    cfg.nonhit_policy = sde::NonHitPolicy::Discard;
    let drift = BaselineDrift(scheme);
    let mut trajectories = Vec::with_capacity(n);
    let mut next_stream = 0u64;
    let mut attempted = 0usize;
    while trajectories.len() < n {
        let want = (n - trajectories.len()) as u64;
        let batch = sde::simulate_streams(scheme, &drift, &scheme.z0, &cfg, next_stream..next_stream + want)?;
        next_stream += want;
        attempted += batch.len();
        trajectories.extend(batch.into_iter().filter(|t| t.hit));
        let attrition = 1.0 - trajectories.len() as f64 / attempted as f64;
        if attrition > 0.5 {
            return Err(Error::config(format!(
                "pool attrition {attrition:.3} exceeds 0.5; increase max_steps"
            )));
        }
    }
    let exit_points = trajectories.iter().map(|t| t.exit().unwrap().to_vec()).collect();
    Ok(BridgePool {
        scheme: scheme.clone(),
        trajectories,
        exit_points,
        attrition: 1.0 - n as f64 / attempted as f64,
        seed: cfg.seed,
    })
}

impl BridgePool {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// A pooled trajectory chosen uniformly at random, transported to exit at `x`.
    pub fn draw(&self, x: &[f64], rng: &mut SimRng) -> Result<Trajectory> {
        if self.is_empty() {
            return Err(Error::pre("pool is empty"));
        }
        let idx = rng.random_range(0..self.len());
        symmetry_transform(&self.scheme, &self.trajectories[idx], &self.exit_points[idx], x)
    }

    pub fn to_csv(&self) -> String {
        let header = format!("pool scheme={} n={} seed={}", self.scheme, self.len(), self.seed);
        trajectories_to_csv(&self.trajectories, &[header])
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (comments, trajectories) = trajectories_from_csv(text)?;
        let header = comments
            .iter()
            .find(|c| c.starts_with("pool "))
            .ok_or_else(|| Error::Format("missing `# pool scheme=... n=... seed=...` header".into()))?;
        let field = |key: &str| {
            header
                .split_whitespace()
                .find_map(|w| w.strip_prefix(key))
                .ok_or_else(|| Error::Format(format!("pool header lacks `{key}`")))
        };
        let scheme: Scheme = field("scheme=")?.parse()?;
        let n: usize = field("n=")?
            .parse()
            .map_err(|_| Error::Format("bad pool count".into()))?;
        let seed: u64 = field("seed=")?
            .parse()
            .map_err(|_| Error::Format("bad pool seed".into()))?;
        if trajectories.len() != n {
            return Err(Error::Format(format!(
                "pool header says n={n} but file holds {} trajectories",
                trajectories.len()
            )));
        }
        if trajectories.iter().any(|t| !t.hit || t.dim() != scheme.dim()) {
            return Err(Error::Format("pool trajectories must all hit and match the scheme".into()));
        }
        let exit_points = trajectories.iter().map(|t| t.exit().unwrap().to_vec()).collect();
        Ok(Self {
            scheme,
            trajectories,
            exit_points,
            attrition: 0.0,
            seed,
        })
    }
}

/// Free-function form of [`BridgePool::draw`].
pub fn draw_bridge(pool: &BridgePool, x: &[f64], rng: &mut SimRng) -> Result<Trajectory> {
    pool.draw(x, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::Record;

    #[test]
    fn fixed_time_bridge_pins_terminal_state() {
        let scheme: Scheme = "fixedtime:d=1,T=1.0".parse().unwrap();
        let cfg = SimConfig::with_dt(1e-3, 10_000, 4);
        for id in 0..20 {
            let t = simulate_bridge(&scheme, &[0.0], &cfg, id).unwrap();
            assert!(t.hit);
            assert_eq!(t.final_state(), &[0.0]);
            assert!(t.states.iter().all(|s| s[0].is_finite()));
        }
    }

    #[test]
    fn boolean_bridges_reach_target() {
        let scheme: Scheme = "boolean:d=2".parse().unwrap();
        let cfg = SimConfig::with_dt(1e-3, 100_000, 9);
        let hits = (0..200)
            .filter(|&id| simulate_bridge(&scheme, &[1.0, 0.0], &cfg, id).unwrap().exit() == Some(&[1.0, 0.0][..]))
            .count();
        assert!(hits >= 196, "{hits}");
    }

    #[test]
    fn pool_is_deterministic_and_valid() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let mut cfg = SimConfig::with_dt(1e-3, 100_000, 3);
        cfg.record = Record::Every(20);
        let a = build_pool(&scheme, &cfg, 200).unwrap();
        let b = build_pool(&scheme, &cfg, 200).unwrap();
        assert_eq!(a, b);
        for x in &a.exit_points {
            assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-12);
        }
        assert!(build_pool(&scheme, &cfg, 0).is_err());
        let mut rng = RngStream::new(1, 2).rng();
        let target = [0.0, -1.0];
        let t = a.draw(&target, &mut rng).unwrap();
        assert_eq!(t.exit().unwrap(), &target);
        let back = BridgePool::from_csv(&a.to_csv()).unwrap();
        assert_eq!(back.trajectories.len(), a.len());
        assert_eq!(back.scheme, a.scheme);
    }

    #[test]
    fn pool_rejects_short_horizon() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let cfg = SimConfig::with_dt(1e-3, 5, 3);
        assert!(matches!(build_pool(&scheme, &cfg, 10), Err(Error::Config(_))));
    }

    #[test]
    fn pool_file_requires_header() {
        let scheme: Scheme = "boolean:d=1".parse().unwrap();
        let pool = build_pool(&scheme, &SimConfig::with_dt(1e-3, 100_000, 1), 3).unwrap();
        let text = pool.to_csv();
        let stripped: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(BridgePool::from_csv(&stripped), Err(Error::Format(_))));
    }
}
