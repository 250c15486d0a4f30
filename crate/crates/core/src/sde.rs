//! Euler–Maruyama simulation of absorbing Itô processes.
//!
//! A trajectory starts strictly inside the domain `V` and is integrated with
//!
//! ```text
//! Z_{k+1} = Z_k + mask(Z_k) ∘ ( clamp(b(Z_k, t_k) Δ_k) + √Δ_k σ_k s ∘ ξ_k )
//! ```
//!
//! where `mask` zeroes absorbed coordinates, `s` is the scheme's per-coordinate
//! diffusion scale and `ξ_k` is standard Gaussian noise drawn from a
//! per-trajectory ChaCha substream. Hit detection uses the post-step state;
//! the state that first satisfies the scheme's exit predicate is projected
//! onto `Ω` and the trajectory stops there.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::schemes::Scheme;

pub type SimRng = ChaCha8Rng;

/// Identifies one reproducible noise sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A stream family independent of this one, keyed by `tag`.
    pub fn derive(master_seed: u64, tag: u64) -> u64 {
        splitmix64(master_seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-step schedule for step sizes or noise scales.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// Linear interpolation from `start` at step 0 to `end` at the last step.
    LinearDecay { start: f64, end: f64 },
    /// `(value, until)` pieces: `value` applies while `step < until`; `last`
    /// applies afterwards.
    Piecewise { pieces: Vec<(f64, usize)>, last: f64 },
}

impl Schedule {
    pub fn value(&self, step: usize, max_steps: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::LinearDecay { start, end } => {
                if max_steps <= 1 {
                    *start
                } else {
                    let frac = (step.min(max_steps - 1)) as f64 / (max_steps - 1) as f64;
                    start + (end - start) * frac
                }
            }
            Schedule::Piecewise { pieces, last } => pieces
                .iter()
                .find(|(_, until)| step < *until)
                .map(|(v, _)| *v)
                .unwrap_or(*last),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Schedule::Constant(v) => Some(*v),
            _ => None,
        }
    }

    /// Every value the schedule takes.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Schedule::Constant(v) => vec![*v],
            Schedule::LinearDecay { start, end } => vec![*start, *end],
            Schedule::Piecewise { pieces, last } => {
                pieces.iter().map(|(v, _)| *v).chain([*last]).collect()
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(v) => write!(f, "{v}"),
            Schedule::LinearDecay { start, end } => write!(f, "linear:{start},{end}"),
            Schedule::Piecewise { pieces, last } => {
                f.write_str("piecewise:")?;
                for (v, until) in pieces {
                    write!(f, "{v}@{until},")?;
                }
                write!(f, "{last}")
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Accepts `0.001`, `const:0.001`, `linear:0.02,0.0001` and
    /// `piecewise:1.0@500,0.5@750,0.25`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Descriptor {
            given: s.to_string(),
            valid: "<v> | const:<v> | linear:<start>,<end> | piecewise:<v>@<step>,...,<v>".into(),
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("const:") {
            return Ok(Schedule::Constant(num(rest)?));
        }
        if let Some(rest) = s.strip_prefix("linear:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return Err(bad());
            }
            return Ok(Schedule::LinearDecay {
                start: num(parts[0])?,
                end: num(parts[1])?,
            });
        }
        if let Some(rest) = s.strip_prefix("piecewise:") {
            let parts: Vec<&str> = rest.split(',').collect();
            let (last, init) = parts.split_last().ok_or_else(bad)?;
            let mut pieces = Vec::with_capacity(init.len());
            let mut prev = 0usize;
            for p in init {
                let (v, until) = p.split_once('@').ok_or_else(bad)?;
                let until: usize = until.trim().parse().map_err(|_| bad())?;
                if until <= prev && !pieces.is_empty() {
                    return Err(bad());
                }
                prev = until;
                pieces.push((num(v)?, until));
            }
            return Ok(Schedule::Piecewise {
                pieces,
                last: num(last)?,
            });
        }
        Ok(Schedule::Constant(num(s)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonHitPolicy {
    /// Keep the truncated trajectory with `hit = false`.
    Discard,
    /// Force the projection at the last state and report `tau = T`.
    Project,
}

impl FromStr for NonHitPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "discard" => Ok(NonHitPolicy::Discard),
            "project" => Ok(NonHitPolicy::Project),
            other => Err(Error::Descriptor {
                given: other.into(),
                valid: "discard | project".into(),
            }),
        }
    }
}

/// Which states a trajectory keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Record {
    Full,
    /// Every `k`-th step plus the final state.
    Every(usize),
    /// Initial and final states only.
    Ends,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: Schedule,
    pub noise: Schedule,
    pub max_steps: usize,
    pub seed: u64,
    /// Cap on `|b_i Δ|` per coordinate and step.
    pub drift_clamp: f64,
    pub nonhit_policy: NonHitPolicy,
    pub record: Record,
    /// Each step's Gaussian increment is the normalized sum of this many
    /// standard normal draws. The law is unchanged; a grid `k` times coarser
    /// with `noise_substeps = k` consumes exactly the increments of the fine
    /// grid, which couples the two discretizations.
    pub noise_substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: Schedule::Constant(1e-3),
            noise: Schedule::Constant(1.0),
            max_steps: 100_000,
            seed: 0,
            drift_clamp: 0.5,
            nonhit_policy: NonHitPolicy::Discard,
            record: Record::Full,
            noise_substeps: 1,
        }
    }
}

impl SimConfig {
    pub fn with_dt(dt: f64, max_steps: usize, seed: u64) -> Self {
        Self {
            dt: Schedule::Constant(dt),
            max_steps,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if !(self.drift_clamp > 0.0) {
            return Err(Error::config("drift_clamp must be positive"));
        }
        if self.dt.values().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config("step sizes must be positive and finite"));
        }
        if self.noise.values().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("noise scales must be nonnegative and finite"));
        }
        if self.noise_substeps == 0 {
            return Err(Error::config("noise_substeps must be at least 1"));
        }
        if let Record::Every(0) = self.record {
            return Err(Error::config("record stride must be at least 1"));
        }
        Ok(())
    }

    pub fn dt_at(&self, step: usize) -> f64 {
        self.dt.value(step, self.max_steps)
    }

    pub fn sigma_at(&self, step: usize) -> f64 {
        self.noise.value(step, self.max_steps)
    }

    /// Truncation horizon: total time covered by `max_steps` steps.
    pub fn horizon(&self) -> f64 {
        match self.dt {
            Schedule::Constant(v) => v * self.max_steps as f64,
            _ => (0..self.max_steps).map(|k| self.dt_at(k)).sum(),
        }
    }

    /// `Σ_{j ≥ step} σ_j² Δ_j` over steps ending at or before `end_time`,
    /// starting from time `t`.
    pub fn remaining_variance(&self, step: usize, t: f64, end_time: f64) -> f64 {
        if let (Some(_), Some(sigma)) = (self.dt.constant_value(), self.noise.constant_value()) {
            return sigma * sigma * (end_time - t).max(0.0);
        }
        let mut acc = 0.0;
        let mut now = t;
        let mut k = step;
        while now < end_time * (1.0 - 1e-12) && k < self.max_steps {
            let dt = self.dt_at(k).min(end_time - now);
            let s = self.sigma_at(k);
            acc += s * s * dt;
            now += dt;
            k += 1;
        }
        acc
    }
}

/// Everything a drift evaluation may depend on besides the state.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub t: f64,
    pub step: usize,
    pub dt: f64,
    pub sigma: f64,
    pub cfg: &'a SimConfig,
}

/// A drift field `b_t(z)`. Implementations write one value per coordinate;
/// values on absorbed coordinates are ignored.
pub trait DriftField: Sync {
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, rng: &mut SimRng, out: &mut [f64]);
}

/// The undrifted baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDrift;

impl DriftField for ZeroDrift {
    fn drift(&self, _z: &[f64], _ctx: &StepContext<'_>, _rng: &mut SimRng, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Adapts a closure `(z, t, out)` into a drift field.
pub struct FnDrift<F>(pub F);

impl<F> DriftField for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, _rng: &mut SimRng, out: &mut [f64]) {
        (self.0)(z, ctx.t, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub stream_id: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Simulation step index of each stored state.
    pub steps: Vec<usize>,
    pub hit: bool,
    /// Index into `states` of the first stored state on `Ω`; valid iff `hit`.
    pub hit_index: usize,
    /// Hitting time; valid iff `hit`.
    pub tau: f64,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// The exit point, if the trajectory hit.
    pub fn exit(&self) -> Option<&[f64]> {
        self.hit.then(|| self.states[self.hit_index].as_slice())
    }

    pub fn tau(&self) -> Option<f64> {
        self.hit.then_some(self.tau)
    }

    /// State at the latest stored time `<= t`; the path is frozen after the hit.
    pub fn state_at(&self, t: f64) -> &[f64] {
        let idx = self.times.partition_point(|&s| s <= t);
        &self.states[idx.saturating_sub(1)]
    }
}

/// Gaussian increment for one step; see [`SimConfig::noise_substeps`].
fn fill_noise(rng: &mut SimRng, substeps: usize, out: &mut [f64]) {
    if substeps == 1 {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        return;
    }
    out.fill(0.0);
    for _ in 0..substeps {
        for v in out.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += g;
        }
    }
    let norm = 1.0 / (substeps as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= norm);
}

struct Workspace {
    drift: Vec<f64>,
    noise: Vec<f64>,
    active: Vec<bool>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            noise: vec![0.0; d],
            active: vec![true; d],
        }
    }
}

/// Advances `state` in place. `ws.active` must hold the current mask.
fn advance(
    scheme: &Scheme,
    drift: &dyn DriftField,
    state: &mut [f64],
    ctx: &StepContext<'_>,
    rng: &mut SimRng,
    ws: &mut Workspace,
) -> Result<()> {
    drift.drift(state, ctx, rng, &mut ws.drift);
    fill_noise(rng, ctx.cfg.noise_substeps, &mut ws.noise);
    let sqrt_dt = ctx.dt.sqrt();
    let clamp = ctx.cfg.drift_clamp;
    for i in 0..state.len() {
        if !ws.active[i] {
            continue;
        }
        let b = ws.drift[i];
        if !b.is_finite() {
            return Err(Error::Simulation {
                t: ctx.t,
                state: state.to_vec(),
                msg: format!("non-finite drift on coordinate {i}"),
            });
        }
        let disp = (b * ctx.dt).clamp(-clamp, clamp);
        state[i] += disp + sqrt_dt * ctx.sigma * scheme.noise_scale(i) * ws.noise[i];
    }
    Ok(())
}

/// One Euler–Maruyama step from `(state, t)` at step index `step_index`.
pub fn step(
    scheme: &Scheme,
    drift: &dyn DriftField,
    state: &[f64],
    t: f64,
    step_index: usize,
    cfg: &SimConfig,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    check_dim(scheme.dim(), state.len())?;
    let mut ws = Workspace::new(state.len());
    let status = scheme.on_domain(state, t)?;
    if status.whole {
        return Err(Error::pre("state already absorbed"));
    }
    for (a, absorbed) in ws.active.iter_mut().zip(&status.absorbed) {
        *a = !absorbed;
    }
    let dt = scheme.clip_dt(t, cfg.dt_at(step_index));
    let ctx = StepContext {
        t,
        step: step_index,
        dt,
        sigma: cfg.sigma_at(step_index),
        cfg,
    };
    let mut next = state.to_vec();
    advance(scheme, drift, &mut next, &ctx, rng, &mut ws)?;
    Ok(next)
}

/// Simulates one trajectory from `z0` until it hits `Ω` or `max_steps` run out.
pub fn simulate(
    scheme: &Scheme,
    drift: &dyn DriftField,
    z0: &[f64],
    cfg: &SimConfig,
    stream_id: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dim(scheme.dim(), z0.len())?;
    if scheme.is_hit(z0, 0.0)? {
        return Err(Error::pre("initial point must lie strictly inside the domain"));
    }
    let mut rng = RngStream::new(cfg.seed, stream_id).rng();
    let d = z0.len();
    let mut ws = Workspace::new(d);
    let mut state = z0.to_vec();
    let mut traj = Trajectory {
        stream_id,
        times: vec![0.0],
        states: vec![state.clone()],
        steps: vec![0],
        hit: false,
        hit_index: 0,
        tau: f64::NAN,
    };
    let mut t = 0.0;
    for k in 0..cfg.max_steps {
        scheme.active_mask(&state, t, &mut ws.active);
        let dt = scheme.clip_dt(t, cfg.dt_at(k));
        let ctx = StepContext {
            t,
            step: k,
            dt,
            sigma: cfg.sigma_at(k),
            cfg,
        };
        advance(scheme, drift, &mut state, &ctx, &mut rng, &mut ws)?;
        t = scheme.snap_time(t + dt);
        let n_done = k + 1;
        if scheme.is_hit(&state, t)? {
            let exit = scheme.project_exit(&state);
            traj.times.push(t);
            traj.states.push(exit);
            traj.steps.push(n_done);
            traj.hit = true;
            traj.hit_index = traj.states.len() - 1;
            traj.tau = t;
            return Ok(traj);
        }
        let keep = match cfg.record {
            Record::Full => true,
            Record::Every(stride) => n_done % stride == 0 && n_done < cfg.max_steps,
            Record::Ends => false,
        };
        if keep || n_done == cfg.max_steps {
            traj.times.push(t);
            traj.states.push(state.clone());
            traj.steps.push(n_done);
        }
    }
    if cfg.nonhit_policy == NonHitPolicy::Project {
        let last = traj.states.len() - 1;
        traj.states[last] = scheme.project_exit(&state);
        traj.hit = true;
        traj.hit_index = last;
        traj.tau = t;
    }
    Ok(traj)
}

/// Simulates `n` trajectories with stream ids `0..n`, in parallel. The output
/// does not depend on the number of worker threads.
pub fn simulate_batch(
    scheme: &Scheme,
    drift: &dyn DriftField,
    z0: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<Vec<Trajectory>> {
    simulate_streams(scheme, drift, z0, cfg, 0..n as u64)
}

pub fn simulate_streams(
    scheme: &Scheme,
    drift: &dyn DriftField,
    z0: &[f64],
    cfg: &SimConfig,
    streams: std::ops::Range<u64>,
) -> Result<Vec<Trajectory>> {
    if streams.is_empty() {
        return Err(Error::pre("batch size must be at least 1"));
    }
    let start = streams.start;
    streams
        .into_par_iter()
        .map(|id| {
            simulate(scheme, drift, z0, cfg, id).map_err(|e| Error::Batch {
                index: (id - start) as usize,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemes::Scheme;

    fn cfg(dt: f64, max_steps: usize) -> SimConfig {
        SimConfig::with_dt(dt, max_steps, 7)
    }

    #[test]
    fn zero_drift_zero_noise_is_fixed_point() {
        let scheme: Scheme = "sphere:d=3".parse().unwrap();
        let mut c = cfg(0.01, 10);
        c.noise = Schedule::Constant(0.0);
        let mut rng = RngStream::new(1, 0).rng();
        let z = [0.1, -0.2, 0.3];
        let next = step(&scheme, &ZeroDrift, &z, 0.0, 0, &c, &mut rng).unwrap();
        assert_eq!(next, z.to_vec());
        let traj = simulate(&scheme, &ZeroDrift, &z, &c, 0).unwrap();
        assert!(traj.states.iter().all(|s| s == &z.to_vec()));
        assert!(!traj.hit);
    }

    #[test]
    fn absorbed_boolean_coordinate_is_frozen() {
        let scheme: Scheme = "boolean:d=2".parse().unwrap();
        let c = cfg(0.01, 10);
        let mut rng = RngStream::new(3, 0).rng();
        let next = step(&scheme, &ZeroDrift, &[0.0, 0.5], 0.0, 0, &c, &mut rng).unwrap();
        assert_eq!(next[0].to_bits(), 0.0f64.to_bits());
        assert_ne!(next[1], 0.5);
    }

    #[test]
    fn drift_displacement_is_clamped() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let mut c = cfg(0.01, 10);
        c.noise = Schedule::Constant(0.0);
        let big = FnDrift(|_z: &[f64], _t: f64, out: &mut [f64]| {
            out[0] = 1e6;
            out[1] = 0.0;
        });
        let mut rng = RngStream::new(0, 0).rng();
        let next = step(&scheme, &big, &[0.0, 0.0], 0.0, 0, &c, &mut rng).unwrap();
        assert_eq!(next, vec![0.5, 0.0]);
    }

    #[test]
    fn non_finite_drift_reports_time_and_state() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let bad = FnDrift(|_z: &[f64], _t: f64, out: &mut [f64]| out.fill(f64::NAN));
        let err = simulate(&scheme, &bad, &[0.0, 0.0], &cfg(0.01, 10), 0).unwrap_err();
        match err {
            Error::Simulation { t, state, .. } => {
                assert_eq!(t, 0.0);
                assert_eq!(state, vec![0.0, 0.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fixed_time_hits_exactly_at_horizon() {
        let scheme: Scheme = "fixedtime:d=2,T=1.0".parse().unwrap();
        let traj = simulate(&scheme, &ZeroDrift, &[0.0, 0.0], &cfg(0.01, 1000), 0).unwrap();
        assert_eq!(traj.states.len(), 101);
        assert!(traj.hit);
        assert_eq!(traj.tau, 1.0);
        assert_eq!(traj.hit_index, 100);
    }

    #[test]
    fn initial_point_on_domain_is_rejected() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let err = simulate(&scheme, &ZeroDrift, &[1.0, 0.0], &cfg(0.01, 10), 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn batch_is_deterministic_and_thread_independent() {
        let scheme: Scheme = "boolean:d=3".parse().unwrap();
        let z0 = scheme.default_z0();
        let c = cfg(1e-3, 100_000);
        let a = simulate_batch(&scheme, &ZeroDrift, &z0, &c, 3).unwrap();
        let b = simulate_batch(&scheme, &ZeroDrift, &z0, &c, 3).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_batch(&scheme, &ZeroDrift, &z0, &c, 3).unwrap());
        assert_eq!(a, single);
        assert!(simulate_batch(&scheme, &ZeroDrift, &z0, &c, 0).is_err());
    }

    #[test]
    fn hit_index_is_first_state_on_domain() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let trajs = simulate_batch(&scheme, &ZeroDrift, &[0.0, 0.0], &cfg(1e-3, 100_000), 20)
            .unwrap();
        for traj in trajs {
            assert!(traj.hit);
            assert_eq!(traj.hit_index, traj.states.len() - 1);
            for s in &traj.states[..traj.hit_index] {
                assert!(!scheme.is_hit(s, 0.0).unwrap());
            }
            assert!((traj.final_state().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn project_policy_marks_truncated_runs_hit() {
        let scheme: Scheme = "sphere:d=2".parse().unwrap();
        let mut c = cfg(1e-4, 5);
        c.nonhit_policy = NonHitPolicy::Project;
        let traj = simulate(&scheme, &ZeroDrift, &[0.0, 0.0], &c, 0).unwrap();
        assert!(traj.hit);
        assert!((traj.tau - 5e-4).abs() < 1e-15);
        let r: f64 = traj.final_state().iter().map(|v| v * v).sum();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedules_parse_and_evaluate() {
        let s: Schedule = "piecewise:1.0@500,0.5@750,0.25".parse().unwrap();
        assert_eq!(s.value(0, 1000), 1.0);
        assert_eq!(s.value(500, 1000), 0.5);
        assert_eq!(s.value(999, 1000), 0.25);
        let l: Schedule = "linear:0.02,0.0001".parse().unwrap();
        assert_eq!(l.value(0, 100), 0.02);
        assert!((l.value(99, 100) - 0.0001).abs() < 1e-15);
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert!("linear:1".parse::<Schedule>().is_err());
    }

    #[test]
    fn coupled_noise_preserves_fine_increments() {
        // four fine draws summed equal one coarse draw scaled by 2
        let mut fine = RngStream::new(5, 9).rng();
        let mut acc = [0.0; 2];
        for _ in 0..4 {
            let mut buf = [0.0; 2];
            fill_noise(&mut fine, 1, &mut buf);
            acc[0] += buf[0];
            acc[1] += buf[1];
        }
        let mut coarse = RngStream::new(5, 9).rng();
        let mut buf = [0.0; 2];
        fill_noise(&mut coarse, 4, &mut buf);
        assert!((buf[0] * 2.0 - acc[0]).abs() < 1e-12);
        assert!((buf[1] * 2.0 - acc[1]).abs() < 1e-12);
    }
}
