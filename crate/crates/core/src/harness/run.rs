use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{GridFunction, GridHierarchy};
use crate::mlmc::{EstimateReport, Estimator, QoiKind, SeedSequence};
use crate::optim::{
    newton_optimize, ncg_optimize, write_refresh_csv, write_trace_csv, IterationRecord, MlmcModel, OptimizeResult,
    RefreshRow, VarianceRow,
};

use super::config::{Method, RunConfig};

/// Final gradient at the optimum, split into level contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSplit {
    pub epsilon: f64,
    pub counts: Vec<usize>,
    pub norm: f64,
    pub total: GridFunction,
    /// Level means transferred to the return level.
    pub contributions: Vec<GridFunction>,
    /// The `2 alpha u` term.
    pub deterministic: GridFunction,
}

/// One optimizer's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the fresh-sample gradient that accepted the result.
    pub gradient_norm: f64,
    pub dof_cost: f64,
    pub wall_s: f64,
    pub negative_curvature: bool,
    pub control: GridFunction,
    pub trace: Vec<IterationRecord>,
    pub refreshes: Vec<RefreshRow>,
    pub variances: Vec<VarianceRow>,
    /// Independent fresh gradient at `u*` with RMSE `q tau`.
    pub final_gradient: GradientSplit,
    pub mean_state: Option<GridFunction>,
    pub var_state: Option<GridFunction>,
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub config: RunConfig,
    pub runs: Vec<MethodResult>,
}

impl ResultBundle {
    pub fn hierarchy(&self) -> Result<GridHierarchy> {
        Ok(self.config.problem.to_spec()?.hierarchy)
    }
}

/// Seeds for the optimizer runs and post-processing, all derived from the
/// master seed.
struct Seeds {
    ncg: u64,
    newton: u64,
    post: u64,
}

fn seeds(master: u64) -> Seeds {
    let mut s = SeedSequence::new(master);
    Seeds {
        ncg: s.next_seed(),
        newton: s.next_seed(),
        post: s.next_seed(),
    }
}

fn split(r: &EstimateReport, eps: f64) -> GradientSplit {
    GradientSplit {
        epsilon: eps,
        counts: r.counts.clone(),
        norm: r.estimate.norm(),
        total: r.estimate.clone(),
        contributions: r.contributions.clone(),
        deterministic: r
            .deterministic
            .clone()
            .unwrap_or_else(|| r.estimate.scaled(0.0)),
    }
}

/// Runs the configured optimizer(s) and post-processing; nothing is written.
pub fn run_experiment(config: &RunConfig) -> Result<ResultBundle> {
    config.validate()?;
    let spec = config.problem.to_spec()?;
    let est = Estimator::new(spec, config.estimator.clone())?;
    let u0 = est.hierarchy().zeros(est.return_level());
    let s = seeds(config.seed);
    let mut runs = Vec::new();
    for &method in config.method.runs() {
        let seed = if method == Method::Newton { s.newton } else { s.ncg };
        let mut model = MlmcModel::new(&est, seed);
        let r: OptimizeResult = match method {
            Method::Newton => newton_optimize(&mut model, &config.optimizer, &u0)?,
            _ => ncg_optimize(&mut model, &config.optimizer, &u0)?,
        };
        let mut post = SeedSequence::new(s.post ^ (method as u64 + 1));
        let eps_g = config.optimizer.q * config.optimizer.tau;
        let g = est.gradient(&r.u, eps_g, &mut post)?;
        let (mean_state, var_state) = if config.post_eps > 0.0 {
            let m = est.run(QoiKind::State, &r.u, config.post_eps, &mut post)?.estimate;
            let sq = est.run(QoiKind::StateSquared, &r.u, config.post_eps, &mut post)?.estimate;
            let var = GridFunction::new(
                m.level,
                m.values.iter().zip(&sq.values).map(|(a, b)| b - a * a).collect(),
            );
            (Some(m), Some(var))
        } else {
            (None, None)
        };
        runs.push(MethodResult {
            method,
            converged: r.converged,
            iterations: r.iterations,
            gradient_norm: r.gradient_norm,
            dof_cost: r.dof_cost,
            wall_s: r.wall_s,
            negative_curvature: r.negative_curvature,
            control: r.u,
            trace: r.trace,
            refreshes: r.refreshes,
            variances: r.variances,
            final_gradient: split(&g, eps_g),
            mean_state,
            var_state,
        });
    }
    Ok(ResultBundle {
        config: config.clone(),
        runs,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `bundle.json`, the resolved config, and per-method tables, traces
/// and fields into `dir`.
pub fn write_bundle(bundle: &ResultBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let h = bundle.hierarchy()?;
    let mut w = create(dir, "bundle.json")?;
    serde_json::to_writer_pretty(&mut w, bundle)?;
    writeln!(w)?;
    w.flush()?;
    fs::write(dir.join("config.toml"), bundle.config.to_toml()?)?;
    let mut summary = csv::Writer::from_writer(create(dir, "summary.csv")?);
    summary.write_record([
        "method",
        "seed",
        "converged",
        "iterations",
        "gradient_norm",
        "final_fresh_norm",
        "dof_cost",
        "wall_s",
    ])?;
    for run in &bundle.runs {
        let m = run.method.name();
        summary.write_record([
            m.to_string(),
            bundle.config.seed.to_string(),
            run.converged.to_string(),
            run.iterations.to_string(),
            run.gradient_norm.to_string(),
            run.final_gradient.norm.to_string(),
            run.dof_cost.to_string(),
            run.wall_s.to_string(),
        ])?;
        write_trace_csv(&run.trace, create(dir, &format!("trace_{m}.csv"))?)?;
        write_refresh_csv(&run.refreshes, create(dir, &format!("tables_{m}.csv"))?)?;
        h.write_csv(&run.control, create(dir, &format!("control_{m}.csv"))?)?;
        if let (Some(mean), Some(var)) = (&run.mean_state, &run.var_state) {
            h.write_csv(mean, create(dir, &format!("mean_state_{m}.csv"))?)?;
            h.write_csv(var, create(dir, &format!("var_state_{m}.csv"))?)?;
        }
    }
    summary.flush()?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<ResultBundle> {
    let f = File::open(dir.join("bundle.json"))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Single gradient estimate at `u` (zero when `None`).
pub fn estimate_gradient(config: &RunConfig, u: Option<&GridFunction>, eps: f64) -> Result<(EstimateReport, Estimator)> {
    config.validate()?;
    let est = Estimator::new(config.problem.to_spec()?, config.estimator.clone())?;
    let zero = est.hierarchy().zeros(est.return_level());
    let mut seq = SeedSequence::new(seeds(config.seed).ncg);
    let r = est.gradient(u.unwrap_or(&zero), eps, &mut seq)?;
    Ok((r, est))
}

/// Writes a single estimate: summary row, gradient field, frozen samples.
pub fn write_estimate(report: &EstimateReport, h: &GridHierarchy, dir: &Path, timings: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let levels = report.counts.len();
    let mut w = csv::Writer::from_writer(create(dir, "estimate.csv")?);
    let mut header: Vec<String> = vec!["epsilon".into()];
    header.extend((0..levels).map(|l| format!("n{l}")));
    header.extend(
        ["rho", "rmse", "stochastic_error", "bias", "converged", "gradient_norm", "dof_cost", "wall_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    let mut row = vec![report.frozen.epsilon.to_string()];
    row.extend(report.counts.iter().map(|n| n.to_string()));
    row.extend([
        report.rho.map(|r| r.to_string()).unwrap_or_default(),
        report.rmse.to_string(),
        report.stochastic_error.to_string(),
        report.bias.to_string(),
        report.converged.to_string(),
        report.estimate.norm().to_string(),
        report.dof_cost.to_string(),
        if timings { report.wall_s.to_string() } else { "0".into() },
    ]);
    w.write_record(&row)?;
    w.flush()?;
    h.write_csv(&report.estimate, create(dir, "gradient.csv")?)?;
    fs::write(dir.join("frozen.txt"), report.frozen.to_text())?;
    let mut lv = csv::Writer::from_writer(create(dir, "levels.csv")?);
    lv.write_record(["level", "n", "mean_inf", "variance_inf", "wall_per_sample"])?;
    for s in &report.stats {
        lv.write_record([
            s.level.to_string(),
            s.n.to_string(),
            s.mean.inf_norm().to_string(),
            s.variance.inf_norm().to_string(),
            if timings { s.wall_per_sample.to_string() } else { "0".into() },
        ])?;
    }
    lv.flush()?;
    Ok(())
}

/// Per-level cost measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub levels: Vec<LevelTiming>,
    /// Fitted exponent of the single-solve time in the cells per axis.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelTiming {
    pub level: usize,
    pub m: usize,
    pub samples: usize,
    /// Seconds per single-level gradient sample.
    pub wall_per_sample: f64,
}

/// Times `samples` gradient samples on every level at `u = 0` and fits
/// `log2(t) = c + kappa log2(m)` over the levels.
pub fn calibrate(config: &RunConfig, samples: usize) -> Result<Calibration> {
    config.validate()?;
    let est = Estimator::new(config.problem.to_spec()?, config.estimator.clone())?;
    let h = *est.hierarchy();
    let seed = seeds(config.seed).post;
    let mut levels = Vec::new();
    for level in 0..=h.max_level {
        let u = h.zeros(level);
        let start = Instant::now();
        for j in 0..samples {
            let key = crate::field::SampleKey::new(seed, j as u64);
            est.sample_gradient_qoi(level, &u, [key; 3])?;
        }
        levels.push(LevelTiming {
            level,
            m: h.cells_per_axis(level),
            samples,
            wall_per_sample: start.elapsed().as_secs_f64() / samples.max(1) as f64,
        });
    }
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|t| t.wall_per_sample > 0.0)
        .map(|t| ((t.m as f64).log2(), t.wall_per_sample.log2()))
        .collect();
    let kappa = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(Calibration { levels, kappa })
}

pub fn write_calibration(c: &Calibration, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(create(dir, "calibrate.csv")?);
    w.write_record(["level", "m", "samples", "wall_per_sample"])?;
    for t in &c.levels {
        w.write_record([
            t.level.to_string(),
            t.m.to_string(),
            t.samples.to_string(),
            t.wall_per_sample.to_string(),
        ])?;
    }
    w.flush()?;
    let mut j = create(dir, "calibrate.json")?;
    serde_json::to_writer_pretty(&mut j, c)?;
    writeln!(j)?;
    j.flush()?;
    Ok(())
}
