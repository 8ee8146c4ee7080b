use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robust_mlmc::harness::{self, Method, Overrides, RunConfig, OUT_DIR_ENV};
use robust_mlmc::{Error, Result};

#[derive(Parser)]
#[command(name = "mlmc-opt", version, about = "Robust optimal control with multilevel Monte Carlo gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run NCG and/or Newton-CG and write the result bundle.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Gradient-norm tolerance, overriding preset and file.
        #[arg(long)]
        tau: Option<f64>,
        /// Skip writing plot data.
        #[arg(long)]
        no_plots: bool,
    },
    /// Estimate one gradient at a given RMSE.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Requested RMSE; defaults to the optimizer's `eps0`.
        #[arg(long)]
        eps: Option<f64>,
        /// Control as a grid-function CSV on the return level; zero if absent.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Measure per-level sample cost and fit the cost exponent.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Samples timed per level.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Rewrite plot data from an existing bundle.
    Plots {
        #[command(flatten)]
        common: Common,
        /// Directory holding `bundle.json`; defaults to the run directory
        /// implied by the other options.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Named preset, e.g. `problem1-desk`.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sample evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Base output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Allow presets on the paper's finest grids.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Ncg,
    Newton,
    Both,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ncg => Method::Ncg,
            MethodArg::Newton => Method::Newton,
            MethodArg::Both => Method::Both,
        }
    }
}

fn resolve(common: &Common, tau: Option<f64>, method: Option<MethodArg>) -> Result<RunConfig> {
    if let Some(n) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                key: "workers".into(),
                reason: e.to_string(),
            })?;
    }
    let flags = Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        tau,
        method: method.map(Method::from),
    };
    let cfg = harness::parse_config(common.preset.as_deref(), common.config.as_deref(), &flags)?;
    if let Some(p) = &cfg.preset {
        if harness::is_full_scale(p) && !common.full_scale {
            return Err(Error::Config {
                key: "preset".into(),
                reason: format!("`{p}` runs on the full 256x256 hierarchy; pass --full-scale or use `{p}-desk`"),
            });
        }
    }
    Ok(cfg)
}

fn fmt_counts(c: &[usize]) -> String {
    c.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
}

fn optimize(common: &Common, method: Option<MethodArg>, tau: Option<f64>, no_plots: bool) -> Result<()> {
    let cfg = resolve(common, tau, method)?;
    let dir = cfg.run_dir();
    let bundle = harness::run_experiment(&cfg)?;
    harness::write_bundle(&bundle, &dir)?;
    if !no_plots {
        harness::emit_plots(&bundle, &dir)?;
    }
    for run in &bundle.runs {
        println!(
            "{}: converged={} iterations={} |g|={:.3e} fresh |g|={:.3e} dof={:.3e} wall={:.2}s",
            run.method.name(),
            run.converged,
            run.iterations,
            run.gradient_norm,
            run.final_gradient.norm,
            run.dof_cost,
            run.wall_s
        );
        println!("  {:>5}  {:>9}  {:<40} {:>7} {:>8}", "k/i", "eps", "n_l", "rho", "t[s]");
        for r in &run.refreshes {
            println!(
                "  {:>5}  {:>9.3e}  {:<40} {:>7} {:>8.2}",
                r.k_or_i,
                r.epsilon,
                fmt_counts(&r.counts),
                r.rho.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                r.wall_s
            );
        }
        if !run.converged {
            eprintln!("warning: {} did not converge within k_max", run.method.name());
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn estimate(common: &Common, eps: Option<f64>, control: Option<&PathBuf>) -> Result<()> {
    let cfg = resolve(common, None, None)?;
    let h = cfg.problem.to_spec()?.hierarchy;
    let u = control
        .map(|p| -> Result<_> { h.read_csv(std::fs::File::open(p)?) })
        .transpose()?;
    let eps = eps.unwrap_or(cfg.optimizer.eps0);
    let (r, _) = harness::estimate_gradient(&cfg, u.as_ref(), eps)?;
    let dir = cfg.run_dir().join("estimate");
    harness::write_estimate(&r, &h, &dir, cfg.optimizer.timings)?;
    println!(
        "eps={eps:e} n=[{}] rho={} rmse={:.3e} |g|={:.4e} converged={}",
        fmt_counts(&r.counts),
        r.rho.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
        r.rmse,
        r.estimate.norm(),
        r.converged
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn calibrate(common: &Common, samples: usize) -> Result<()> {
    let cfg = resolve(common, None, None)?;
    let c = harness::calibrate(&cfg, samples)?;
    let dir = cfg.run_dir().join("calibrate");
    harness::write_calibration(&c, &dir)?;
    for t in &c.levels {
        println!("level {} m={:>4} {:.3e} s/sample", t.level, t.m, t.wall_per_sample);
    }
    match c.kappa {
        Some(k) => println!("kappa = {k:.3}"),
        None => println!("kappa: not enough levels to fit"),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn plots(common: &Common, bundle: Option<&PathBuf>) -> Result<()> {
    let dir = match bundle {
        Some(d) => d.clone(),
        None => resolve(common, None, None)?.run_dir(),
    };
    let b = harness::read_bundle(&dir)?;
    for f in harness::emit_plots(&b, &dir)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::Optimize {
            common,
            method,
            tau,
            no_plots,
        } => optimize(common, *method, *tau, *no_plots),
        Command::Estimate { common, eps, control } => estimate(common, *eps, control.as_ref()),
        Command::Calibrate { common, samples } => calibrate(common, *samples),
        Command::Plots { common, bundle } => plots(common, bundle.as_ref()),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
