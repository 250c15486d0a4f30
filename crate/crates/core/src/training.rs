//! Fitting the drift network to data with bridge-augmented snapshot score
//! matching, and sampling from the fitted process.
//!
//! Each datum `x` is paired with a bridge `Z | Z_τ = x`; uniformly chosen
//! states `Z_t` of the bridge give regression items with target
//! `b_t(Z_t | x) - b_t(Z_t)`, the residual of the conditioned drift over the
//! scheme's baseline.

use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use crate::batch::SampleBatch;
use crate::bridges::{build_pool, retry_stream, simulate_bridge};
use crate::error::{Error, Result};
use crate::net::{adam_step, AdamState, LossItem, Mlp};
use crate::schemes::{Scheme, SchemeKind};
use crate::sde::{self, DriftField, Record, RngStream, SimConfig, SimRng, StepContext, Trajectory};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub snapshots_per_item: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Integration settings for bridges and for sampling the fitted model.
    pub sim: SimConfig,
    pub use_pool: bool,
    pub pool_size: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Number of linear layers.
    pub layers: usize,
    pub output_bound: Option<f64>,
    /// Defaults to the fixed horizon, or to the truncation horizon.
    pub time_scale: Option<f64>,
    /// Bridge attempts per datum before giving up.
    pub max_bridge_attempts: u32,
    /// Weight each bridge's snapshots by its duration so the batch loss
    /// estimates the time integral rather than a per-trajectory average.
    pub time_weighted: bool,
}

impl TrainConfig {
    pub fn new(scheme: Scheme) -> Self {
        let (lr, output_bound) = match scheme.kind {
            SchemeKind::Sphere { .. } => (0.05, None),
            SchemeKind::Categorical { .. } => (1e-4, Some(5.0)),
            _ => (1e-3, None),
        };
        let batch_size = 64;
        Self {
            scheme,
            epochs: 50,
            batch_size,
            snapshots_per_item: 6,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sim: SimConfig::with_dt(1e-3, 100_000, 0),
            use_pool: false,
            pool_size: 10 * batch_size,
            seed: 0,
            hidden: 100,
            layers: 3,
            output_bound,
            time_scale: None,
            max_bridge_attempts: 8,
            time_weighted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.snapshots_per_item == 0 {
            return Err(Error::config("epochs, batch_size and snapshots_per_item must be positive"));
        }
        if self.hidden == 0 || self.layers == 0 || self.pool_size == 0 {
            return Err(Error::config("hidden, layers and pool_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if matches!(self.scheme.kind, SchemeKind::Categorical { .. }) && self.output_bound.is_none() {
            return Err(Error::config("categorical models need an output bound"));
        }
        if self.use_pool && !self.scheme.has_symmetry() {
            return Err(Error::config(format!("scheme {} cannot use a bridge pool", self.scheme)));
        }
        if matches!(self.scheme.kind, SchemeKind::HalfSpace { accel: Some(_), .. }) {
            return Err(Error::config("training needs bridges, which the accelerated half-space lacks"));
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        self.scheme.fixed_horizon().unwrap_or_else(|| self.sim.horizon())
    }

    /// Reads a flat `key=value` file; `#` starts a comment. `scheme` is
    /// required and fixes the scheme-dependent defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let scheme_line = pairs
            .iter()
            .find(|(_, k, _)| k == "scheme")
            .ok_or_else(|| Error::config("training config lacks `scheme`"))?;
        let mut cfg = Self::new(scheme_line.2.parse()?);
        for (line, k, v) in &pairs {
            if k != "scheme" {
                cfg.set(k, v).map_err(|e| match e {
                    Error::Config(msg) => Error::Parse { line: *line, msg },
                    other => other,
                })?;
            }
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Sets one option by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "scheme" => {
                let sim = self.sim.clone();
                let seed = self.seed;
                *self = Self::new(value.parse()?);
                self.sim = sim;
                self.seed = seed;
            }
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "snapshots_per_item" => self.snapshots_per_item = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "dt" => self.sim.dt = value.parse()?,
            "noise" => self.sim.noise = value.parse()?,
            "max_steps" => self.sim.max_steps = p(key, value)?,
            "drift_clamp" => self.sim.drift_clamp = p(key, value)?,
            "use_pool" => self.use_pool = p(key, value)?,
            "pool_size" => self.pool_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "output_bound" => {
                self.output_bound = if value == "none" { None } else { Some(p(key, value)?) }
            }
            "time_scale" => self.time_scale = Some(p(key, value)?),
            "max_bridge_attempts" => self.max_bridge_attempts = p(key, value)?,
            "time_weighted" => self.time_weighted = p(key, value)?,
            _ => return Err(Error::config(format!("unknown training option `{key}`"))),
        }
        Ok(())
    }
}

/// Regression items from `k` uniformly chosen pre-hit states of `bridge`.
///
/// Steps are drawn without replacement when the bridge has at least `k`
/// pre-hit states, with replacement otherwise.
pub fn snapshot_loss_items(
    scheme: &Scheme,
    cfg: &SimConfig,
    bridge: &Trajectory,
    x: &[f64],
    k: usize,
    rng: &mut SimRng,
) -> Result<Vec<LossItem>> {
    let exit = bridge.exit().ok_or_else(|| Error::pre("bridge did not hit"))?;
    if exit.len() != x.len() || exit.iter().zip(x).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::pre("bridge does not exit at the target"));
    }
    let n = bridge.hit_index;
    if n == 0 {
        return Err(Error::pre("bridge has no pre-hit states"));
    }
    let picks: Vec<usize> = if k <= n {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    let d = x.len();
    let mut base = vec![0.0; d];
    picks
        .into_iter()
        .map(|i| {
            let z = &bridge.states[i];
            let step = bridge.steps[i];
            let ctx = StepContext {
                t: bridge.times[i],
                step,
                dt: cfg.dt_at(step),
                sigma: cfg.sigma_at(step),
                cfg,
            };
            let mut target = vec![0.0; d];
            scheme.bridge_drift(z, x, &ctx, &mut target)?;
            scheme.baseline_drift(z, &ctx, &mut base)?;
            target.iter_mut().zip(&base).for_each(|(t, b)| *t -= b);
            Ok(LossItem {
                state: z.clone(),
                t: ctx.t,
                target,
                mask: scheme.active(z),
                weight: 1.0,
            })
        })
        .collect()
}

/// Drift of the fitted process: baseline plus network output.
pub struct ModelDrift<'a> {
    pub net: &'a Mlp,
    pub scheme: &'a Scheme,
}

impl DriftField for ModelDrift<'_> {
    fn drift(&self, z: &[f64], ctx: &StepContext<'_>, _rng: &mut SimRng, out: &mut [f64]) {
        if self.scheme.baseline_drift(z, ctx, out).is_err() {
            out.fill(f64::NAN);
            return;
        }
        let mut f = vec![0.0; out.len()];
        self.net.forward_into(z, ctx.t, &mut f);
        out.iter_mut().zip(&f).for_each(|(o, v)| *o += v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub bridge_attrition: f64,
    pub wall_ms: u128,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,bridge_attrition,wall_ms\n");
    for e in log {
        s.push_str(&format!("{},{:.16e},{:.6},{}\n", e.epoch, e.mean_loss, e.bridge_attrition, e.wall_ms));
    }
    s
}

const TAG_BRIDGE: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_POOL: u64 = 3;
const TAG_INIT: u64 = 4;

/// Fits a drift network to `data` (points on the scheme's exit set).
pub fn train(data: &SampleBatch, cfg: &TrainConfig) -> Result<(Mlp, Vec<EpochLog>)> {
    train_with(data, cfg, |_| {})
}

/// [`train`] with a callback run after every epoch.
pub fn train_with(
    data: &SampleBatch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Mlp, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::pre("training data is empty"));
    }
    data.check_on(&cfg.scheme)?;
    let scheme = &cfg.scheme;
    let d = scheme.dim();
    let mut net = Mlp::with_hidden(d, cfg.hidden, cfg.layers, cfg.output_bound, RngStream::derive(cfg.seed, TAG_INIT))?;
    net.time_scale = cfg.time_scale.unwrap_or_else(|| cfg.horizon());
    net.scheme = scheme.to_string();
    let mut adam = AdamState::new(net.n_params(), cfg.lr);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.adam_eps;

    let mut sim = cfg.sim.clone();
    sim.nonhit_policy = sde::NonHitPolicy::Discard;
    sim.record = Record::Full;
    let n = data.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let epoch_seed = RngStream::derive(cfg.seed, (epoch as u64) << 8);
        let mut bridge_sim = sim.clone();
        bridge_sim.seed = RngStream::derive(epoch_seed, TAG_BRIDGE);
        let pool = if cfg.use_pool {
            let mut pool_sim = sim.clone();
            pool_sim.seed = RngStream::derive(epoch_seed, TAG_POOL);
            Some(build_pool(scheme, &pool_sim, cfg.pool_size)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut RngStream::new(epoch_seed, TAG_SHUFFLE).rng());

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let (mut attempts, mut discarded) = (0u64, 0u64);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(Vec<LossItem>, u32)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let stream = (b * cfg.batch_size + j) as u64;
                    let x = &data.points[idx];
                    let mut rng = RngStream::new(RngStream::derive(epoch_seed, TAG_BRIDGE + 16), stream).rng();
                    let (bridge, failed) = match &pool {
                        Some(pool) => (pool.draw(x, &mut rng)?, 0),
                        None => {
                            let mut found = None;
                            for attempt in 0..cfg.max_bridge_attempts.max(1) {
                                let t = simulate_bridge(scheme, x, &bridge_sim, retry_stream(stream, attempt))?;
                                if t.exit() == Some(x.as_slice()) {
                                    found = Some((t, attempt));
                                    break;
                                }
                            }
                            found.ok_or_else(|| {
                                Error::config(format!(
                                    "bridge to datum {idx} missed its target {} times; increase max_steps or reduce dt",
                                    cfg.max_bridge_attempts
                                ))
                            })?
                        }
                    };
                    let mut items = snapshot_loss_items(scheme, &bridge_sim, &bridge, x, cfg.snapshots_per_item, &mut rng)?;
                    if cfg.time_weighted {
                        let n = bridge.hit_index as f64;
                        for it in &mut items {
                            let i = bridge.times.partition_point(|&s| s < it.t);
                            it.weight = n * bridge_sim.dt_at(bridge.steps[i]);
                        }
                    }
                    Ok((items, failed))
                })
                .collect();
            let mut items = Vec::with_capacity(chunk.len() * cfg.snapshots_per_item);
            for r in results {
                let (its, failed) = r?;
                attempts += 1 + u64::from(failed);
                discarded += u64::from(failed);
                items.extend(its);
            }
            if cfg.time_weighted {
                let mean = items.iter().map(|it| it.weight).sum::<f64>() / items.len() as f64;
                items.iter_mut().for_each(|it| it.weight /= mean);
            }
            let (loss, grad) = net.backward(&items)?;
            adam_step(&mut net.params, &mut adam, &grad)?;
            loss_sum += loss;
            batches += 1;
        }
        let attrition = match &pool {
            Some(p) => p.attrition,
            None => discarded as f64 / attempts.max(1) as f64,
        };
        if attrition > 0.5 {
            return Err(Error::config(format!(
                "bridge attrition {attrition:.3} in epoch {epoch} exceeds 0.5; increase max_steps"
            )));
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Simulation {
                t: f64::NAN,
                state: vec![],
                msg: format!("training diverged in epoch {epoch}"),
            });
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            bridge_attrition: attrition,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((net, log))
}

/// Simulates `n` runs of the fitted process from the scheme's `z0`.
pub fn sample_model(net: &Mlp, scheme: &Scheme, cfg: &SimConfig, n: usize) -> Result<SampleBatch> {
    if net.scheme != scheme.to_string() {
        return Err(Error::config(format!(
            "model was trained for `{}`, not `{scheme}`",
            net.scheme
        )));
    }
    if net.input_dim() != scheme.dim() + 1 {
        return Err(Error::Dimension {
            expected: scheme.dim() + 1,
            got: net.input_dim(),
        });
    }
    net.forward(&scheme.z0, 0.0)?;
    let mut cfg = cfg.clone();
    cfg.record = Record::Ends;
    let drift = ModelDrift { net, scheme };
    let trajs = sde::simulate_batch(scheme, &drift, &scheme.z0, &cfg, n)?;
    Ok(SampleBatch::from_trajectories(&trajs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h_sampler::{boolean_exact_h, DensityRatio};
    use crate::schemes::bernoulli_exit_likelihood;

    fn fake_bridge(states: Vec<Vec<f64>>) -> Trajectory {
        let n = states.len();
        Trajectory {
            stream_id: 0,
            times: (0..n).map(|k| k as f64 * 1e-3).collect(),
            steps: (0..n).collect(),
            states,
            hit: true,
            hit_index: n - 1,
            tau: (n - 1) as f64 * 1e-3,
        }
    }

    #[test]
    fn categorical_target_example() {
        let scheme: Scheme = "categorical:d=2,m=1,eps=1e-12".parse().unwrap();
        let bridge = fake_bridge(vec![vec![0.5, 0.5], vec![1.0, 0.0]]);
        let cfg = SimConfig::default();
        let mut rng = RngStream::new(0, 0).rng();
        let items = snapshot_loss_items(&scheme, &cfg, &bridge, &[1.0, 0.0], 1, &mut rng).unwrap();
        assert!((items[0].target[0] - 2.0).abs() < 1e-9 && (items[0].target[1] + 2.0).abs() < 1e-9);
        assert_eq!(items[0].mask, vec![true, true]);
    }

    #[test]
    fn snapshot_sampling_and_masks() {
        let scheme: Scheme = "boolean:d=2".parse().unwrap();
        let bridge = fake_bridge(vec![vec![0.5, 0.5], vec![0.01, 0.6], vec![0.0, 1.0]]);
        let cfg = SimConfig::default();
        let mut rng = RngStream::new(1, 0).rng();
        let items = snapshot_loss_items(&scheme, &cfg, &bridge, &[0.0, 1.0], 10, &mut rng).unwrap();
        assert_eq!(items.len(), 10);
        for it in &items {
            if it.state[0] == 0.01 {
                assert_eq!(it.mask, vec![false, true]);
                assert_eq!(it.target[0], 0.0);
            }
        }
        let mut unhit = bridge.clone();
        unhit.hit = false;
        assert!(snapshot_loss_items(&scheme, &cfg, &unhit, &[0.0, 1.0], 1, &mut rng).is_err());
        assert!(snapshot_loss_items(&scheme, &cfg, &bridge, &[1.0, 1.0], 1, &mut rng).is_err());
    }

    #[test]
    fn config_file_parsing() {
        let cfg = TrainConfig::from_kv("# comment\nscheme=boolean:d=4\nepochs=3 # trailing\nlr=0.01\ndt=linear:0.002,0.001\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.scheme.to_string(), "boolean:d=4");
        let cat = TrainConfig::from_kv("scheme=categorical:d=3,m=1").unwrap();
        assert_eq!(cat.output_bound, Some(5.0));
        assert_eq!(cat.lr, 1e-4);
        assert!(matches!(
            TrainConfig::from_kv("scheme=boolean:d=2\nbogus=1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(TrainConfig::from_kv("epochs=2").is_err());
        let mut cat = cat;
        cat.output_bound = None;
        assert!(cat.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_sampling_checks_scheme() {
        let scheme: Scheme = "boolean:d=2".parse().unwrap();
        let mut cfg = TrainConfig::new(scheme.clone());
        cfg.epochs = 2;
        cfg.hidden = 16;
        cfg.batch_size = 8;
        let data = SampleBatch::from_points(vec![vec![1.0, 0.0]; 20]);
        let (a, log) = train(&data, &cfg).unwrap();
        let (b, _) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|e| e.mean_loss >= 0.0));
        let other: Scheme = "boolean:d=3".parse().unwrap();
        assert!(sample_model(&a, &other, &cfg.sim, 4).is_err());
        let s = sample_model(&a, &scheme, &cfg.sim, 16).unwrap();
        assert_eq!(s.len() + s.truncated_count, 16);
        let pooled = TrainConfig { use_pool: true, pool_size: 32, ..cfg.clone() };
        assert!(train(&data, &pooled).is_ok());
        let bad = SampleBatch::from_points(vec![vec![0.5, 1.0]]);
        assert!(train(&bad, &cfg).is_err());
    }

    #[test]
    fn untrained_categorical_model_exits_on_one_hots() {
        let scheme: Scheme = "categorical:d=3,m=2".parse().unwrap();
        let mut net = Mlp::with_hidden(6, 8, 3, Some(5.0), 0).unwrap();
        net.scheme = scheme.to_string();
        let s = sample_model(&net, &scheme, &SimConfig::with_dt(1e-3, 100_000, 2), 200).unwrap();
        assert_eq!(s.len(), 200);
        s.check_on(&scheme).unwrap();
    }

    /// Expected snapshot loss over the exit posterior, given the state.
    fn expected_loss(scheme: &Scheme, s: &[f64], z: &[f64], atoms: &[Vec<f64>], cfg: &SimConfig) -> f64 {
        let ctx = StepContext { t: 0.0, step: 0, dt: 1e-3, sigma: 1.0, cfg };
        let jac = 1.0 / (1.0 - 2.0 * scheme.hit_eps);
        let zm: Vec<f64> = z.iter().map(|v| (v - scheme.hit_eps) * jac).collect();
        let z0m: Vec<f64> = scheme.z0.iter().map(|v| (v - scheme.hit_eps) * jac).collect();
        let mut weights: Vec<f64> = atoms
            .iter()
            .map(|x| {
                let r = 0.5 / bernoulli_exit_likelihood(x, &z0m).unwrap();
                r * bernoulli_exit_likelihood(x, &zm).unwrap()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        atoms
            .iter()
            .zip(&weights)
            .map(|(x, w)| {
                let mut b = vec![0.0; z.len()];
                scheme.bridge_drift(z, x, &ctx, &mut b).unwrap();
                w * 0.5 * b.iter().zip(s).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn conditional_mean_drift_minimizes_expected_loss() {
        let scheme: Scheme = "boolean:d=3".parse().unwrap();
        let atoms = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let z0m = {
            let jac = 1.0 / (1.0 - 2.0 * scheme.hit_eps);
            scheme.z0.iter().map(|v| (v - scheme.hit_eps) * jac).collect::<Vec<_>>()
        };
        let atoms_c = atoms.clone();
        let ratio = DensityRatio::new("two-atom", move |x| {
            if atoms_c.iter().any(|a| a == x) {
                0.5 / bernoulli_exit_likelihood(x, &z0m).unwrap()
            } else {
                0.0
            }
        });
        let cfg = SimConfig::default();
        let mut rng = RngStream::new(3, 3).rng();
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..0.9)).collect();
            let (_, opt) = boolean_exact_h(&scheme, &ratio, &z).unwrap();
            let base = expected_loss(&scheme, &opt, &z, &atoms, &cfg);
            let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let pert: Vec<f64> = opt.iter().zip(&dir).map(|(o, d)| o + 0.1 * d / n).collect();
            assert!(base <= expected_loss(&scheme, &pert, &z, &atoms, &cfg));
        }
    }
}
