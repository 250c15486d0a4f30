//! Hitting schemes: the domain `V`, exit set `Ω`, and everything a simulation or
//! a bridge needs to know about them.
//!
//! Exit tests use a tolerance `hit_eps`: the discretized process stops on the
//! shrunk domain (`|z| ≥ 1 - eps`, `min(z, 1 - z) ≤ eps`, `y ≥ ymax - eps`).
//! Bridge scores are evaluated for that shrunk domain, so a bridge is pinned
//! to the face of the stopping set that projects onto its target.

pub mod kernels;
mod symmetry;

use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::sde::StepContext;

pub use kernels::*;
pub use symmetry::{symmetry_transform, Rotation};

const VALID_SCHEMES: &str = "sphere:d=<n> | boolean:d=<n> | categorical:d=<n>,m=<n> | \
fixedtime:d=<n>,T=<t> | halfspace:d=<n>,ymax=<y>,sx=<s>,sy=<s>[,T=<t>]; optional ,eps=<v>";

#[derive(Clone, Debug, PartialEq)]
pub enum SchemeKind {
    /// Unit ball in `R^d`, exit on the sphere.
    Sphere { d: usize },
    /// Unit cube `[0,1]^d` with coordinate-wise absorption at `{0,1}`.
    Boolean { d: usize },
    /// `m` slots of `d` coordinates each; exits on one-hot slots.
    Categorical { d: usize, m: usize },
    /// Brownian motion in `R^d` stopped at the deterministic time `horizon`.
    FixedTime { d: usize, horizon: f64 },
    /// State `(x_1..x_d, y)`; exits when the vertical coordinate reaches `ymax`.
    /// With `accel = Some(T)` a baseline drift conditions the passage to
    /// happen before `T`.
    HalfSpace {
        d: usize,
        ymax: f64,
        sx: f64,
        sy: f64,
        accel: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub hit_eps: f64,
    pub z0: Vec<f64>,
}

/// Result of the on-domain test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainStatus {
    /// The state as a whole has reached `Ω`.
    pub whole: bool,
    /// Per-coordinate absorption (coordinate-wise schemes; all `false` otherwise).
    pub absorbed: Vec<bool>,
}

impl SchemeKind {
    fn default_eps(&self) -> f64 {
        match self {
            SchemeKind::Sphere { .. } => 0.01,
            SchemeKind::Boolean { .. } => 0.05,
            SchemeKind::Categorical { .. } => 0.01,
            SchemeKind::FixedTime { .. } => 0.05,
            SchemeKind::HalfSpace { .. } => 0.01,
        }
    }
}

impl Scheme {
    pub fn new(kind: SchemeKind) -> Result<Self> {
        let eps = kind.default_eps();
        Self::with_eps(kind, eps)
    }

    pub fn with_eps(kind: SchemeKind, hit_eps: f64) -> Result<Self> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        match kind {
            SchemeKind::Sphere { d } => {
                if d == 0 {
                    return bad("sphere needs d >= 1");
                }
                if !(hit_eps > 0.0 && hit_eps < 1.0) {
                    return bad("sphere hit_eps must lie in (0, 1)");
                }
            }
            SchemeKind::Boolean { d } => {
                if d == 0 {
                    return bad("boolean needs d >= 1");
                }
                if !(hit_eps > 0.0 && hit_eps < 0.5) {
                    return bad("boolean hit_eps must lie in (0, 0.5)");
                }
            }
            SchemeKind::Categorical { d, m } => {
                if d < 2 || m == 0 {
                    return bad("categorical needs d >= 2 and m >= 1");
                }
                if !(hit_eps > 0.0 && hit_eps < 0.5) {
                    return bad("categorical hit_eps must lie in (0, 0.5)");
                }
            }
            SchemeKind::FixedTime { d, horizon } => {
                if d == 0 || !(horizon > 0.0) || !horizon.is_finite() {
                    return bad("fixedtime needs d >= 1 and T > 0");
                }
                if !(hit_eps > 0.0) {
                    return bad("fixedtime hit_eps must be positive");
                }
            }
            SchemeKind::HalfSpace {
                ymax,
                sx,
                sy,
                accel,
                ..
            } => {
                if !(sx > 0.0 && sy > 0.0) {
                    return bad("halfspace needs sx > 0 and sy > 0");
                }
                if !(hit_eps > 0.0) || !(ymax > hit_eps) {
                    return bad("halfspace needs 0 < eps < ymax (the default start has y = 0)");
                }
                if accel.is_some_and(|t| !(t > 0.0)) {
                    return bad("halfspace acceleration horizon T must be positive");
                }
            }
        }
        let z0 = match &kind {
            SchemeKind::Sphere { d } | SchemeKind::FixedTime { d, .. } => vec![0.0; *d],
            SchemeKind::Boolean { d } => vec![0.5; *d],
            SchemeKind::Categorical { d, m } => vec![0.5; d * m],
            SchemeKind::HalfSpace { d, .. } => vec![0.0; d + 1],
        };
        Ok(Self { kind, hit_eps, z0 })
    }

    /// Replaces the initial point; it must be strictly inside the domain.
    pub fn with_z0(mut self, z0: Vec<f64>) -> Result<Self> {
        check_dim(self.dim(), z0.len())?;
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::pre("z0 must be finite"));
        }
        let interior = match &self.kind {
            SchemeKind::Sphere { .. } => z0.iter().map(|v| v * v).sum::<f64>().sqrt() < 1.0 - self.hit_eps,
            SchemeKind::Boolean { .. } | SchemeKind::Categorical { .. } => {
                z0.iter().all(|&v| v > 0.0 && v < 1.0) && !self.on_domain(&z0, 0.0)?.whole
            }
            SchemeKind::FixedTime { .. } => true,
            SchemeKind::HalfSpace { ymax, .. } => z0[z0.len() - 1] < ymax - self.hit_eps,
        };
        if !interior {
            return Err(Error::pre("z0 must lie strictly inside the domain"));
        }
        self.z0 = z0;
        Ok(self)
    }

    pub fn default_z0(&self) -> Vec<f64> {
        self.z0.clone()
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        match self.kind {
            SchemeKind::Sphere { d } | SchemeKind::Boolean { d } | SchemeKind::FixedTime { d, .. } => d,
            SchemeKind::Categorical { d, m } => d * m,
            SchemeKind::HalfSpace { d, .. } => d + 1,
        }
    }

    pub fn is_coordinatewise(&self) -> bool {
        matches!(self.kind, SchemeKind::Boolean { .. } | SchemeKind::Categorical { .. })
    }

    pub fn fixed_horizon(&self) -> Option<f64> {
        match self.kind {
            SchemeKind::FixedTime { horizon, .. } => Some(horizon),
            _ => None,
        }
    }

    #[inline]
    fn coord_hit(&self, v: f64) -> bool {
        v.min(1.0 - v) <= self.hit_eps
    }

    fn slot_finished(&self, slot: &[f64]) -> bool {
        let max = slot.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max >= 1.0 - self.hit_eps || slot.iter().all(|&v| self.coord_hit(v))
    }

    /// The on-domain predicate. `t` matters only for the fixed-time scheme.
    pub fn on_domain(&self, state: &[f64], t: f64) -> Result<DomainStatus> {
        check_dim(self.dim(), state.len())?;
        let mut absorbed = vec![false; state.len()];
        let whole = match &self.kind {
            SchemeKind::Sphere { .. } => {
                state.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1.0 - self.hit_eps
            }
            SchemeKind::Boolean { .. } => {
                for (a, &v) in absorbed.iter_mut().zip(state) {
                    *a = self.coord_hit(v);
                }
                absorbed.iter().all(|&a| a)
            }
            SchemeKind::Categorical { d, .. } => {
                let mut all = true;
                for (slot, abs) in state.chunks(*d).zip(absorbed.chunks_mut(*d)) {
                    for (a, &v) in abs.iter_mut().zip(slot) {
                        *a = self.coord_hit(v);
                    }
                    all &= self.slot_finished(slot);
                }
                all
            }
            SchemeKind::FixedTime { horizon, .. } => t >= *horizon,
            SchemeKind::HalfSpace { ymax, .. } => state[state.len() - 1] >= ymax - self.hit_eps,
        };
        Ok(DomainStatus { whole, absorbed })
    }

    pub fn is_hit(&self, state: &[f64], t: f64) -> Result<bool> {
        Ok(self.on_domain(state, t)?.whole)
    }

    /// Writes `true` for coordinates that still move.
    pub fn active_mask(&self, state: &[f64], _t: f64, out: &mut [bool]) {
        match &self.kind {
            SchemeKind::Boolean { .. } => {
                for (o, &v) in out.iter_mut().zip(state) {
                    *o = !self.coord_hit(v);
                }
            }
            SchemeKind::Categorical { d, .. } => {
                for (slot, o) in state.chunks(*d).zip(out.chunks_mut(*d)) {
                    let done = self.slot_finished(slot);
                    for (oi, &v) in o.iter_mut().zip(slot) {
                        *oi = !done && !self.coord_hit(v);
                    }
                }
            }
            _ => out.fill(true),
        }
    }

    pub fn active(&self, state: &[f64]) -> Vec<bool> {
        let mut out = vec![true; state.len()];
        self.active_mask(state, 0.0, &mut out);
        out
    }

    /// Projection onto `Ω`; requires the on-domain test to pass.
    pub fn project(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        if !self.is_hit(state, t)? {
            return Err(Error::pre("cannot project a state that is not on the domain"));
        }
        Ok(self.project_exit(state))
    }

    /// Projection onto `Ω` without the on-domain check.
    pub fn project_exit(&self, state: &[f64]) -> Vec<f64> {
        match &self.kind {
            SchemeKind::Sphere { .. } => {
                let n = state.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    let mut e = vec![0.0; state.len()];
                    e[0] = 1.0;
                    e
                } else {
                    state.iter().map(|v| v / n).collect()
                }
            }
            SchemeKind::Boolean { .. } => state.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
            SchemeKind::Categorical { d, .. } => {
                let mut out = vec![0.0; state.len()];
                for (slot, o) in state.chunks(*d).zip(out.chunks_mut(*d)) {
                    o[argmax(slot)] = 1.0;
                }
                out
            }
            SchemeKind::FixedTime { .. } => state.to_vec(),
            SchemeKind::HalfSpace { ymax, .. } => {
                let mut out = state.to_vec();
                *out.last_mut().unwrap() = *ymax;
                out
            }
        }
    }

    /// Checks that `x` lies exactly on `Ω`.
    pub fn check_target(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        let ok = match &self.kind {
            SchemeKind::Sphere { .. } => (x.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9,
            SchemeKind::Boolean { .. } => x.iter().all(|&v| v == 0.0 || v == 1.0),
            SchemeKind::Categorical { d, .. } => x.chunks(*d).all(|s| {
                s.iter().all(|&v| v == 0.0 || v == 1.0) && s.iter().sum::<f64>() == 1.0
            }),
            SchemeKind::FixedTime { .. } => x.iter().all(|v| v.is_finite()),
            SchemeKind::HalfSpace { ymax, .. } => {
                x.iter().all(|v| v.is_finite()) && x[x.len() - 1] == *ymax
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::pre(format!("target {x:?} is not on the exit set")))
        }
    }

    /// Distance used by bridge snapping and termination checks.
    pub fn target_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.kind {
            SchemeKind::Sphere { .. } => {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                dot.clamp(-1.0, 1.0).acos()
            }
            _ => a
                .iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Per-coordinate diffusion scale multiplying the noise schedule.
    pub fn noise_scale(&self, i: usize) -> f64 {
        match self.kind {
            SchemeKind::HalfSpace { d, sx, sy, .. } => {
                if i < d {
                    sx
                } else {
                    sy
                }
            }
            _ => 1.0,
        }
    }

    /// Step size actually taken from time `t`.
    pub fn clip_dt(&self, t: f64, dt: f64) -> f64 {
        match self.kind {
            SchemeKind::FixedTime { horizon, .. } => dt.min(horizon - t),
            _ => dt,
        }
    }

    /// Rounds accumulated time onto the fixed horizon.
    pub fn snap_time(&self, t: f64) -> f64 {
        match self.kind {
            SchemeKind::FixedTime { horizon, .. } if (t - horizon).abs() <= 1e-9 * horizon => horizon,
            _ => t,
        }
    }

    fn margin_jac(&self) -> f64 {
        1.0 / (1.0 - 2.0 * self.hit_eps)
    }

    /// Coordinates of the cube rescaled so that the stopping faces sit at 0 and 1.
    fn cube_margin(&self, z: &[f64]) -> Vec<f64> {
        let jac = self.margin_jac();
        z.iter().map(|&v| (v - self.hit_eps) * jac).collect()
    }

    /// `∇ log Ber(Ω | z)` per slot on the stopping set, zero on frozen
    /// coordinates. Only meaningful for the categorical scheme.
    pub fn omega_score(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let SchemeKind::Categorical { d, .. } = self.kind else {
            out.fill(0.0);
            return Ok(());
        };
        let zm = self.cube_margin(z);
        let active = self.active(z);
        let absorbed: Vec<bool> = active.iter().map(|a| !a).collect();
        for ((slot, abs), o) in zm.chunks(d).zip(absorbed.chunks(d)).zip(out.chunks_mut(d)) {
            if abs.iter().all(|&a| a) {
                o.fill(0.0);
                continue;
            }
            slot_omega_score(slot, Some(abs), self.margin_jac(), o)?;
        }
        Ok(())
    }

    /// The unconditioned drift: zero except for the categorical scheme
    /// (`σ² ∇ log Ber(Ω | z)`) and the accelerated half-space.
    pub fn baseline_drift(&self, z: &[f64], ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        match self.kind {
            SchemeKind::Categorical { .. } => {
                self.omega_score(z, out)?;
                let s2 = ctx.sigma * ctx.sigma;
                out.iter_mut().for_each(|v| *v *= s2);
            }
            SchemeKind::HalfSpace {
                ymax,
                sy,
                accel: Some(horizon),
                ..
            } => {
                out.fill(0.0);
                let y = z[z.len() - 1];
                let sig = ctx.sigma * sy;
                if sig > 0.0 {
                    let gap = (ymax - self.hit_eps - y).max(0.0);
                    let rem = (horizon - ctx.t).max(1e-12);
                    *out.last_mut().unwrap() = sig * sig * accelerated_drift_unchecked(gap, rem, sig);
                }
            }
            _ => out.fill(0.0),
        }
        Ok(())
    }

    /// `∇_z log q(x | z)` for the exit kernel of the stopping set, with
    /// `x` a point of `Ω`. Zero on frozen coordinates.
    pub fn bridge_score(&self, z: &[f64], x: &[f64], ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            SchemeKind::Sphere { .. } => ball_kernel_score(z, x, 1.0 - self.hit_eps, out),
            SchemeKind::Boolean { .. } | SchemeKind::Categorical { .. } => {
                let jac = self.margin_jac();
                let active = self.active(z);
                for i in 0..z.len() {
                    if !active[i] {
                        out[i] = 0.0;
                        continue;
                    }
                    let zm = (z[i] - self.hit_eps) * jac;
                    let den = ber1(x[i], zm);
                    if den <= 0.0 {
                        return Err(Error::Singular(format!("coordinate {i} cannot reach its target")));
                    }
                    out[i] = jac * (2.0 * x[i] - 1.0) / den;
                }
                Ok(())
            }
            SchemeKind::FixedTime { horizon, .. } => {
                if ctx.t >= *horizon {
                    return Err(Error::pre("bridge evaluated at or after the horizon"));
                }
                let var = ctx.cfg.remaining_variance(ctx.step, ctx.t, *horizon);
                if !(var > 0.0) {
                    return Err(Error::Singular("no noise left before the horizon".into()));
                }
                for i in 0..z.len() {
                    out[i] = (x[i] - z[i]) / var;
                }
                Ok(())
            }
            SchemeKind::HalfSpace {
                d,
                ymax,
                sx,
                sy,
                accel,
            } => {
                if accel.is_some() {
                    return Err(Error::pre("bridges are not defined for the accelerated half-space"));
                }
                let d = *d;
                let gap = ymax - self.hit_eps - z[d];
                if gap <= 0.0 {
                    return Err(Error::Singular("state above the exit plane".into()));
                }
                let s = halfspace_exit_scale(gap, *sx, *sy);
                let k = (d as f64 + 1.0) / 2.0;
                let r2: f64 = (0..d).map(|i| (x[i] - z[i]).powi(2)).sum();
                let den = s * s + r2;
                for i in 0..d {
                    out[i] = 2.0 * k * (x[i] - z[i]) / den;
                }
                let dlog_ds = 1.0 / s - 2.0 * k * s / den;
                out[d] = -dlog_ds * sx / sy;
                Ok(())
            }
        }
    }

    /// Conditioned drift `b(z | x) = b(z) + σ² S ∇ log q(x | z)` with `S` the
    /// squared per-coordinate diffusion scale. For the categorical scheme the
    /// conditioned process coincides with the Boolean bridge, so the baseline
    /// term is not added.
    pub fn bridge_drift(&self, z: &[f64], x: &[f64], ctx: &StepContext<'_>, out: &mut [f64]) -> Result<()> {
        self.bridge_score(z, x, ctx, out)?;
        let s2 = ctx.sigma * ctx.sigma;
        for (i, v) in out.iter_mut().enumerate() {
            let c = self.noise_scale(i);
            *v *= s2 * c * c;
        }
        if !matches!(self.kind, SchemeKind::Categorical { .. }) {
            let mut base = vec![0.0; z.len()];
            self.baseline_drift(z, ctx, &mut base)?;
            out.iter_mut().zip(&base).for_each(|(o, b)| *o += b);
        }
        Ok(())
    }

    /// Start point shared by pooled trajectories, when the scheme has one.
    pub fn has_symmetry(&self) -> bool {
        matches!(
            self.kind,
            SchemeKind::Sphere { .. } | SchemeKind::Boolean { .. } | SchemeKind::Categorical { .. }
        )
    }

    pub fn is_symmetric_point(&self, z: &[f64]) -> bool {
        match &self.kind {
            SchemeKind::Sphere { .. } => z.iter().all(|&v| v == 0.0),
            SchemeKind::Boolean { .. } => z.iter().all(|&v| v == 0.5),
            SchemeKind::Categorical { d, .. } => z.chunks(*d).all(|s| s.iter().all(|&v| v == s[0])),
            _ => false,
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SchemeKind::Sphere { d } => write!(f, "sphere:d={d}")?,
            SchemeKind::Boolean { d } => write!(f, "boolean:d={d}")?,
            SchemeKind::Categorical { d, m } => write!(f, "categorical:d={d},m={m}")?,
            SchemeKind::FixedTime { d, horizon } => write!(f, "fixedtime:d={d},T={horizon:?}")?,
            SchemeKind::HalfSpace {
                d,
                ymax,
                sx,
                sy,
                accel,
            } => {
                write!(f, "halfspace:d={d},ymax={ymax:?},sx={sx:?},sy={sy:?}")?;
                if let Some(t) = accel {
                    write!(f, ",T={t:?}")?;
                }
            }
        }
        if self.hit_eps != self.kind.default_eps() {
            write!(f, ",eps={}", self.hit_eps)?;
        }
        Ok(())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Descriptor {
            given: s.to_string(),
            valid: VALID_SCHEMES.into(),
        };
        let (name, rest) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            keys.push((k.trim(), v.trim()));
        }
        let allowed: &[&str] = match name {
            "sphere" | "boolean" => &["d", "eps"],
            "categorical" => &["d", "m", "eps"],
            "fixedtime" => &["d", "T", "eps"],
            "halfspace" => &["d", "ymax", "sx", "sy", "T", "eps"],
            _ => return Err(bad()),
        };
        if keys.iter().any(|(k, _)| !allowed.contains(k)) {
            return Err(bad());
        }
        let get = |key: &str| keys.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let int = |key: &str| -> Result<usize> { get(key).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let real = |key: &str, default: Option<f64>| -> Result<f64> {
            match get(key) {
                Some(v) => v.parse().map_err(|_| bad()),
                None => default.ok_or_else(bad),
            }
        };
        let kind = match name {
            "sphere" => SchemeKind::Sphere { d: int("d")? },
            "boolean" => SchemeKind::Boolean { d: int("d")? },
            "categorical" => SchemeKind::Categorical {
                d: int("d")?,
                m: int("m")?,
            },
            "fixedtime" => SchemeKind::FixedTime {
                d: int("d")?,
                horizon: real("T", None)?,
            },
            _ => SchemeKind::HalfSpace {
                d: get("d").map_or(Ok(1), |_| int("d"))?,
                ymax: real("ymax", Some(1.0))?,
                sx: real("sx", Some(1.0))?,
                sy: real("sy", Some(1.0))?,
                accel: get("T").map(|_| real("T", None)).transpose()?,
            },
        };
        match get("eps") {
            Some(_) => Scheme::with_eps(kind, real("eps", None)?),
            None => Scheme::new(kind),
        }
    }
}
