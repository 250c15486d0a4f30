use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fhdm::bridges::{simulate_bridge, BaselineDrift, BridgePool};
use fhdm::eval::{
    convergence_experiment, hitting_time_report, ks_two_sample, report_row, tv_distance, w1_1d, AnalyticLaw,
    Binning, ConvergenceSetup, Histogram,
};
use fhdm::h_sampler::{sample_h_transform, DensityRatio};
use fhdm::io::{atomic_write, trajectories_from_csv, trajectories_to_csv};
use fhdm::net::Mlp;
use fhdm::sde::{NonHitPolicy, Record, RngStream, Schedule};
use fhdm::training::{log_to_csv, sample_model, train_with, TrainConfig};
use fhdm::{build_pool, simulate_batch, Error, Result, SampleBatch, Scheme, SchemeKind, SimConfig, Trajectory};

#[derive(Parser)]
#[command(name = "fhdm", version, about = "First hitting diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate unconditioned trajectories of a scheme.
    Simulate {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        n: usize,
        /// Start point as comma-separated values; defaults to the scheme's.
        #[arg(long)]
        z0: Option<String>,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate bridges conditioned to exit at a target point.
    Bridge {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        n: usize,
        /// Draw from a saved pool instead of integrating the bridge drift.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a pool of unconditioned trajectories for fast bridge sampling.
    Pool {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample through the Monte Carlo h-transform of a density ratio.
    Hsample {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        ratio: String,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a drift network to exit samples.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides a config entry; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample exits from a trained model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two sample files, or a sample file with an analytic law.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        a: PathBuf,
        #[arg(long, conflicts_with = "analytic")]
        b: Option<PathBuf>,
        #[arg(long)]
        analytic: Option<String>,
        /// Scheme of the samples; inferred from the points when omitted.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
        /// 1-d statistic for ks and w1: `x<k>`, `angle` or `tau`.
        #[arg(long, default_value = "x1")]
        project: String,
        /// Report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram and summary of hitting times.
    Hitreport {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Summary statistics as a report CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Squared-W1 error of the exit law against a fine step size.
    Converge {
        #[arg(long)]
        scheme: String,
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long = "ref")]
        reference: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        z0: Option<String>,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Projection of the exit point: `x<k>` or `angle`.
        #[arg(long, default_value = "angle")]
        project: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimArgs {
    /// Step size: a number or a schedule such as `linear:1e-3,1e-4`.
    #[arg(long, default_value = "1e-3")]
    dt: String,
    /// Noise scale, with the same syntax as `--dt`.
    #[arg(long, default_value = "1")]
    noise: String,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every k-th state instead of the whole path.
    #[arg(long)]
    every: Option<usize>,
    /// Treatment of runs that reach the horizon: `discard` or `project`.
    #[arg(long, default_value = "discard")]
    nonhit: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Tv,
    Ks,
    W1,
}

fn seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("FHDM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("FHDM_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let dt: Schedule = self.dt.parse()?;
        let cfg = SimConfig {
            dt,
            noise: self.noise.parse()?,
            max_steps: self.max_steps,
            seed: seed(self.seed)?,
            nonhit_policy: self.nonhit.parse::<NonHitPolicy>()?,
            record: match self.every {
                Some(0) => return Err(Error::config("--every must be at least 1")),
                Some(k) => Record::Every(k),
                None => Record::Full,
            },
            ..SimConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{s}` is not a comma-separated vector")))
        })
        .collect()
}

fn scheme_with_z0(desc: &str, z0: Option<&str>) -> Result<Scheme> {
    let scheme: Scheme = desc.parse()?;
    match z0 {
        Some(z) => scheme.with_z0(parse_vector(z)?),
        None => Ok(scheme),
    }
}

fn write_trajectories(path: &Path, trajs: &[Trajectory], header: String) -> Result<()> {
    atomic_write(path, trajectories_to_csv(trajs, &[header]).as_bytes())
}

/// Reads a sample file or a trajectory file; trajectories contribute their
/// exit points and hitting times.
fn load_samples(path: &Path) -> Result<SampleBatch> {
    let text = std::fs::read_to_string(path)?;
    let is_traj = text
        .lines()
        .find(|l| !l.starts_with('#') && !l.trim().is_empty())
        .is_some_and(|l| l.starts_with("traj_id"));
    if is_traj {
        let (_, trajs) = trajectories_from_csv(&text)?;
        Ok(SampleBatch::from_trajectories(&trajs))
    } else {
        SampleBatch::from_csv(&text)
    }
}

fn infer_scheme(b: &SampleBatch) -> Result<Scheme> {
    let d = b.dim().ok_or_else(|| Error::pre("sample file is empty"))?;
    if b.points.iter().flatten().all(|&v| v == 0.0 || v == 1.0) {
        return Scheme::new(SchemeKind::Boolean { d });
    }
    let on_sphere = b
        .points
        .iter()
        .all(|p| (p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    if on_sphere && (d == 2 || d == 3) {
        return Scheme::new(SchemeKind::Sphere { d });
    }
    Err(Error::pre("cannot infer the exit set of the samples; pass --scheme"))
}

fn projection(name: &str) -> Result<Box<dyn Fn(&[f64]) -> f64 + Sync>> {
    if name == "angle" {
        return Ok(Box::new(|x: &[f64]| x[1].atan2(x[0])));
    }
    let k: usize = name
        .strip_prefix('x')
        .and_then(|k| k.parse().ok())
        .filter(|&k| k >= 1)
        .ok_or_else(|| Error::config(format!("unknown projection `{name}`; use x<k>, angle or tau")))?;
    Ok(Box::new(move |x: &[f64]| x.get(k - 1).copied().unwrap_or(f64::NAN)))
}

fn project_batch(b: &SampleBatch, name: &str) -> Result<Vec<f64>> {
    if name == "tau" {
        if !b.has_taus() {
            return Err(Error::pre("samples carry no hitting times"));
        }
        return Ok(b.taus.clone());
    }
    let f = projection(name)?;
    let v: Vec<f64> = b.points.iter().map(|p| f(p)).collect();
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::pre(format!("projection `{name}` does not fit the sample dimension")));
    }
    Ok(v)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scheme, n, z0, sim, out } => {
            let scheme = scheme_with_z0(&scheme, z0.as_deref())?;
            let cfg = sim.config()?;
            let trajs = simulate_batch(&scheme, &BaselineDrift(&scheme), &scheme.z0, &cfg, n)?;
            write_trajectories(&out, &trajs, format!("simulate scheme={scheme} n={n} seed={}", cfg.seed))?;
        }
        Command::Bridge {
            scheme,
            target,
            n,
            pool,
            sim,
            out,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let x = parse_vector(&target)?;
            scheme.check_target(&x)?;
            let cfg = sim.config()?;
            if n == 0 {
                return Err(Error::pre("--n must be at least 1"));
            }
            let trajs = match pool {
                Some(path) => {
                    let pool = BridgePool::from_csv(&std::fs::read_to_string(&path)?)?;
                    if pool.scheme != scheme {
                        return Err(Error::config(format!("pool was built for `{}`, not `{scheme}`", pool.scheme)));
                    }
                    (0..n as u64)
                        .map(|i| pool.draw(&x, &mut RngStream::new(cfg.seed, i).rng()))
                        .collect::<Result<Vec<_>>>()?
                }
                None => (0..n as u64)
                    .map(|i| simulate_bridge(&scheme, &x, &cfg, i))
                    .collect::<Result<Vec<_>>>()?,
            };
            write_trajectories(
                &out,
                &trajs,
                format!("bridge scheme={scheme} target={target} n={n} seed={}", cfg.seed),
            )?;
        }
        Command::Pool { scheme, n, sim, out } => {
            let scheme: Scheme = scheme.parse()?;
            let pool = build_pool(&scheme, &sim.config()?, n)?;
            atomic_write(&out, pool.to_csv().as_bytes())?;
            eprintln!("pool attrition {:.4}", pool.attrition);
        }
        Command::Hsample {
            scheme,
            ratio,
            m,
            n,
            sim,
            out,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let ratio = DensityRatio::parse(&ratio, &scheme)?;
            let mut cfg = sim.config()?;
            cfg.record = Record::Ends;
            sample_h_transform(&scheme, &ratio, &cfg, m, n)?.write(&out)?;
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
            seed: seed_flag,
            log,
        } => {
            let mut cfg = TrainConfig::read(&config)?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if seed_flag.is_some() || std::env::var("FHDM_SEED").is_ok() {
                cfg.seed = seed(seed_flag)?;
            }
            let data = load_samples(&data)?;
            let (net, epochs) = train_with(&data, &cfg, |e| {
                eprintln!("epoch {} loss {:.6} attrition {:.4}", e.epoch, e.mean_loss, e.bridge_attrition)
            })?;
            net.save(&out)?;
            if let Some(path) = log {
                atomic_write(&path, log_to_csv(&epochs).as_bytes())?;
            }
        }
        Command::Sample { model, n, sim, out } => {
            let net = Mlp::load(&model)?;
            let scheme: Scheme = net.scheme.parse()?;
            sample_model(&net, &scheme, &sim.config()?, n)?.write(&out)?;
        }
        Command::Eval {
            metric,
            a,
            b,
            analytic,
            scheme,
            bins,
            project,
            out,
        } => {
            let sa = load_samples(&a)?;
            let (value, n, notes) = match metric {
                Metric::Tv => {
                    let scheme = match &scheme {
                        Some(s) => s.parse()?,
                        None => infer_scheme(&sa)?,
                    };
                    sa.check_on(&scheme)?;
                    let binning = Binning::for_scheme(&scheme, bins)?;
                    let ha = Histogram::from_points(binning.clone(), &sa.points)?;
                    let (hb, notes) = match (&b, &analytic) {
                        (Some(path), None) => {
                            let sb = load_samples(path)?;
                            sb.check_on(&scheme)?;
                            (Histogram::from_points(binning, &sb.points)?, path.display().to_string())
                        }
                        (None, Some(desc)) => {
                            let law = AnalyticLaw::parse(desc, &scheme)?;
                            (Histogram::from_law(binning, &law)?, desc.clone())
                        }
                        _ => return Err(Error::config("pass exactly one of --b and --analytic")),
                    };
                    (tv_distance(&ha, &hb)?, sa.len(), notes)
                }
                Metric::Ks | Metric::W1 => {
                    let path = match (&b, &analytic) {
                        (Some(p), None) => p,
                        (None, Some(_)) => {
                            return Err(Error::config("analytic references are supported for --metric tv only"))
                        }
                        _ => return Err(Error::config("pass exactly one of --b and --analytic")),
                    };
                    let xa = project_batch(&sa, &project)?;
                    let xb = project_batch(&load_samples(path)?, &project)?;
                    let v = match metric {
                        Metric::Ks => ks_two_sample(&xa, &xb)?,
                        _ => w1_1d(&xa, &xb)?,
                    };
                    (v, xa.len(), format!("{} on {project}", path.display()))
                }
            };
            println!("{value:?}");
            if let Some(path) = out {
                let name = match metric {
                    Metric::Tv => "tv",
                    Metric::Ks => "ks",
                    Metric::W1 => "w1",
                };
                let notes = notes.replace(',', ";");
                atomic_write(&path, report_row(name, value, n, bins.unwrap_or(0), &notes).as_bytes())?;
            }
        }
        Command::Hitreport { input, out, bins, csv } => {
            let report = hitting_time_report(&load_samples(&input)?, bins)?;
            atomic_write(&out, report.to_svg().as_bytes())?;
            if let Some(path) = csv {
                atomic_write(&path, report.to_csv().as_bytes())?;
            }
            println!(
                "n={} mean={:?} median={:?} p95={:?} truncation_rate={:?}",
                report.n, report.mean, report.median, report.p95, report.truncation_rate
            );
        }
        Command::Converge {
            scheme,
            deltas,
            reference,
            n,
            z0,
            horizon,
            seed: seed_flag,
            project,
            out,
        } => {
            let scheme = scheme_with_z0(&scheme, z0.as_deref())?;
            let proj = projection(&project)?;
            let drift = BaselineDrift(&scheme);
            let result = convergence_experiment(&ConvergenceSetup {
                scheme: &scheme,
                drift: &drift,
                projection: &*proj,
                deltas,
                reference_delta: reference,
                n,
                horizon,
                seed: seed(seed_flag)?,
            })?;
            atomic_write(&out, result.to_csv().as_bytes())?;
            println!("slope={:?}", result.slope);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
