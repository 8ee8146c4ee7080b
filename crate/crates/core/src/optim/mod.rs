//! Optimizers driven by sampled gradients: nonlinear CG with Dai-Yuan
//! updates and a parabola linesearch, and an inexact Newton method whose
//! inner CG only needs Hessian-vector products.
//!
//! Both keep the requested RMSE `eps` tied to the current gradient norm and
//! reuse a frozen sample set until the schedule asks for new samples. A
//! point is only accepted after a gradient on new samples confirms `|g| <= tau`.

mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use trace::{read_trace_csv, write_refresh_csv, write_trace_csv, IterationRecord, Phase, RefreshRow};

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;
use crate::mlmc::{EstimateReport, Estimator, FrozenSampleSet, SeedSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Gradient-norm tolerance.
    pub tau: f64,
    /// Allowed relative RMSE `eps / |g|`.
    pub q: f64,
    /// RMSE reduction factor.
    pub eta: f64,
    /// RMSE of the first gradient.
    pub eps0: f64,
    pub k_max: usize,
    /// First trial step of the linesearch.
    pub s_init: f64,
    /// Inner CG iteration cap per Newton step.
    pub cg_max_iter: usize,
    /// When false, NCG keeps its first sample set forever.
    pub refresh: bool,
    /// Record wall-clock times; zeros keep outputs byte-reproducible.
    pub timings: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            tau: 1e-4,
            q: 1.0,
            eta: 0.2,
            eps0: 1e-2,
            k_max: 200,
            s_init: 1.0,
            cg_max_iter: 200,
            refresh: true,
            timings: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid("tau", "must be positive"));
        }
        if !(self.q > 0.0) {
            return Err(invalid("q", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid("eta", "must lie in (0, 1)"));
        }
        if !(self.eps0 > 0.0) {
            return Err(invalid("eps0", "must be positive"));
        }
        if self.k_max == 0 {
            return Err(invalid("k_max", "must be at least 1"));
        }
        if !(self.s_init > 0.0 && self.s_init.is_finite()) {
            return Err(invalid("s_init", "must be positive"));
        }
        if self.cg_max_iter == 0 {
            return Err(invalid("cg_max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// A sampled gradient together with the samples that produced it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub gradient: GridFunction,
    /// Requested RMSE for new samples, expected RMSE for replays.
    pub epsilon: f64,
    pub counts: Vec<usize>,
    pub rho: Option<f64>,
    pub dof_cost: f64,
    pub wall_s: f64,
    pub samples: FrozenSampleSet,
    /// `|V_l|_inf` of the correction samples on each level.
    pub level_variance: Vec<f64>,
}

/// Gradient and Hessian oracles seen by the optimizers.
pub trait StochasticModel {
    /// Gradient on new samples at RMSE `eps`.
    fn fresh_gradient(&mut self, u: &GridFunction, eps: f64) -> Result<Evaluation>;
    /// Gradient on the samples `f`.
    fn replay_gradient(&mut self, f: &FrozenSampleSet, u: &GridFunction) -> Result<Evaluation>;
    /// `H(u) du` on the samples `f`, with its DOF cost.
    fn hessian_vector(&mut self, f: &FrozenSampleSet, u: &GridFunction, du: &GridFunction) -> Result<(GridFunction, f64)>;
}

/// The multilevel estimator as a [`StochasticModel`].
pub struct MlmcModel<'a> {
    pub estimator: &'a Estimator,
    pub seeds: SeedSequence,
}

impl<'a> MlmcModel<'a> {
    pub fn new(estimator: &'a Estimator, master_seed: u64) -> Self {
        MlmcModel {
            estimator,
            seeds: SeedSequence::new(master_seed),
        }
    }
}

fn evaluation(r: EstimateReport, epsilon: f64) -> Evaluation {
    Evaluation {
        gradient: r.estimate,
        epsilon,
        counts: r.counts,
        rho: r.rho,
        dof_cost: r.dof_cost,
        wall_s: r.wall_s,
        level_variance: r.stats.iter().map(|s| s.variance.inf_norm()).collect(),
        samples: r.frozen,
    }
}

impl StochasticModel for MlmcModel<'_> {
    fn fresh_gradient(&mut self, u: &GridFunction, eps: f64) -> Result<Evaluation> {
        let r = self.estimator.gradient(u, eps, &mut self.seeds)?;
        Ok(evaluation(r, eps))
    }

    fn replay_gradient(&mut self, f: &FrozenSampleSet, u: &GridFunction) -> Result<Evaluation> {
        let r = self.estimator.replay_gradient(f, u)?;
        let eps = r.rmse;
        Ok(evaluation(r, eps))
    }

    fn hessian_vector(&mut self, f: &FrozenSampleSet, u: &GridFunction, du: &GridFunction) -> Result<(GridFunction, f64)> {
        let r = self.estimator.replay_hessian_vector(f, u, du)?;
        Ok((r.estimate, r.dof_cost))
    }
}

/// Dai-Yuan coefficient `|g_new|^2 / (d_old, g_new - g_old)`; `None` asks
/// for a steepest-descent restart.
pub fn dy_beta(g_new: &GridFunction, g_old: &GridFunction, d_old: &GridFunction) -> Result<Option<f64>> {
    let num = g_new.inner_product(g_new)?;
    if num == 0.0 {
        return Ok(Some(0.0));
    }
    let den = d_old.inner_product(g_new)? - d_old.inner_product(g_old)?;
    if den.abs() < 1e-300 || !den.is_finite() {
        return Ok(None);
    }
    Ok(Some(num / den))
}

/// Step minimizing the parabola through `phi'(0)` and `phi'(s_prev)`.
pub fn parabola_step(dphi0: f64, dphi_prev: f64, s_prev: f64, iteration: usize) -> Result<f64> {
    if !(dphi0 < 0.0) {
        return Err(Error::NotDescent {
            iteration,
            slope: dphi0,
        });
    }
    if !(dphi_prev > dphi0) {
        return Ok(s_prev);
    }
    Ok(s_prev * dphi0 / (dphi0 - dphi_prev))
}

/// [`parabola_step`] from the gradients at `u` and `u + s_prev d`.
pub fn parabola_linesearch(
    g0: &GridFunction,
    g_trial: &GridFunction,
    d: &GridFunction,
    s_prev: f64,
    iteration: usize,
) -> Result<f64> {
    parabola_step(g0.inner_product(d)?, g_trial.inner_product(d)?, s_prev, iteration)
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub du: GridFunction,
    pub iterations: usize,
    /// `|r|` before the first and after every iteration.
    pub residuals: Vec<f64>,
    pub wall_s: Vec<f64>,
    pub converged: bool,
    pub negative_curvature: bool,
}

/// Conjugate gradients for `H du = rhs` in the return-level inner product.
/// Stops once `|r| <= tol`; stops early when `(p, Hp) <= 0`.
pub fn cg_solve<F>(mut apply: F, rhs: &GridFunction, tol: f64, max_iter: usize) -> Result<CgOutcome>
where
    F: FnMut(&GridFunction) -> Result<GridFunction>,
{
    let mut x = rhs.scaled(0.0);
    let mut r = rhs.clone();
    let mut p = rhs.clone();
    let mut rr = r.inner_product(&r)?;
    let mut out = CgOutcome {
        du: x.clone(),
        iterations: 0,
        residuals: vec![rr.sqrt()],
        wall_s: Vec::new(),
        converged: rr.sqrt() <= tol,
        negative_curvature: false,
    };
    while !out.converged && out.iterations < max_iter {
        let t = Instant::now();
        let hp = apply(&p)?;
        let php = p.inner_product(&hp)?;
        if !(php > 0.0) {
            out.negative_curvature = true;
            break;
        }
        let a = rr / php;
        x = x.axpy(a, &p)?;
        r = r.axpy(-a, &hp)?;
        let rr_new = r.inner_product(&r)?;
        p = r.axpy(rr_new / rr, &p)?;
        rr = rr_new;
        out.iterations += 1;
        out.residuals.push(rr.sqrt());
        out.wall_s.push(t.elapsed().as_secs_f64());
        out.converged = rr.sqrt() <= tol;
    }
    out.du = x;
    Ok(out)
}

/// Result of an optimizer run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub u: GridFunction,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the fresh-sample check that accepted `u`, or of the last
    /// gradient when the run did not converge.
    pub gradient_norm: f64,
    pub trace: Vec<IterationRecord>,
    pub refreshes: Vec<RefreshRow>,
    /// Total solver-DOF cost of every gradient, trial and Hessian evaluation.
    pub dof_cost: f64,
    pub wall_s: f64,
    pub samples: FrozenSampleSet,
    pub negative_curvature: bool,
    /// Per-level sample variances at every recorded gradient.
    pub variances: Vec<VarianceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub k_or_i: usize,
    pub phase: Phase,
    pub variances: Vec<f64>,
}

struct Log {
    timings: bool,
    trace: Vec<IterationRecord>,
    refreshes: Vec<RefreshRow>,
    variances: Vec<VarianceRow>,
    cost: f64,
}

impl Log {
    fn new(timings: bool) -> Self {
        Log {
            timings,
            trace: Vec::new(),
            refreshes: Vec::new(),
            variances: Vec::new(),
            cost: 0.0,
        }
    }

    fn time(&self, t: f64) -> f64 {
        if self.timings {
            t
        } else {
            0.0
        }
    }

    fn record(&mut self, k: usize, phase: Phase, ev: &Evaluation, epsilon: f64, refreshed: bool) {
        self.trace.push(IterationRecord {
            k_or_i: k,
            phase,
            norm: ev.gradient.norm(),
            epsilon,
            refreshed,
            counts: ev.counts.clone(),
            wall_s: self.time(ev.wall_s),
        });
        self.variances.push(VarianceRow {
            k_or_i: k,
            phase,
            variances: ev.level_variance.clone(),
        });
        if refreshed && phase != Phase::Check {
            self.refreshes.push(RefreshRow {
                k_or_i: k,
                phase,
                epsilon,
                counts: ev.counts.clone(),
                rho: ev.rho,
                wall_s: self.time(ev.wall_s),
                dof_cost: ev.dof_cost,
            });
        }
    }
}

/// Observer called with each NCG iterate and its gradient.
pub type Observer<'o, M> = dyn FnMut(&mut M, usize, &GridFunction, &Evaluation) -> Result<()> + 'o;

/// Nonlinear CG with Dai-Yuan directions, a parabola linesearch on the
/// frozen samples and the RMSE refresh schedule.
pub fn ncg_optimize<M: StochasticModel>(model: &mut M, config: &OptimizerConfig, u0: &GridFunction) -> Result<OptimizeResult> {
    ncg_observed(model, config, u0, &mut |_, _, _, _| Ok(()))
}

/// [`ncg_optimize`] calling `observe` at every iterate.
pub fn ncg_observed<M: StochasticModel>(
    model: &mut M,
    config: &OptimizerConfig,
    u0: &GridFunction,
    observe: &mut Observer<'_, M>,
) -> Result<OptimizeResult> {
    config.validate()?;
    let start = Instant::now();
    let (tau, q, eta) = (config.tau, config.q, config.eta);
    let mut log = Log::new(config.timings);
    let mut u = u0.clone();
    let mut eps = config.eps0;
    let mut ev = model.fresh_gradient(&u, eps)?;
    log.cost += ev.dof_cost;
    log.record(0, Phase::Ncg, &ev, eps, true);
    observe(model, 0, &u, &ev)?;
    let mut samples = ev.samples.clone();
    let mut prev: Option<(GridFunction, GridFunction)> = None;
    let mut s_prev = config.s_init;
    let mut best = (ev.gradient.norm(), u.clone());

    for k in 0..config.k_max {
        let g = ev.gradient.clone();
        let gn = g.norm();
        if gn <= tau {
            let check = model.fresh_gradient(&u, eps)?;
            log.cost += check.dof_cost;
            log.record(k, Phase::Check, &check, eps, true);
            let cn = check.gradient.norm();
            if cn <= tau {
                return Ok(OptimizeResult {
                    u,
                    converged: true,
                    iterations: k,
                    gradient_norm: cn,
                    trace: log.trace,
                    refreshes: log.refreshes,
                    dof_cost: log.cost,
                    wall_s: if log.timings { start.elapsed().as_secs_f64() } else { 0.0 },
                    samples,
                    negative_curvature: false,
                    variances: log.variances,
                });
            }
        }

        let steepest = g.scaled(-1.0);
        let mut d = match &prev {
            Some((d_old, g_old)) => match dy_beta(&g, g_old, d_old)? {
                Some(beta) => steepest.axpy(beta, d_old)?,
                None => steepest.clone(),
            },
            None => steepest.clone(),
        };
        if !(g.inner_product(&d)? < 0.0) {
            d = steepest;
        }
        let trial = model.replay_gradient(&samples, &u.axpy(s_prev, &d)?)?;
        log.cost += trial.dof_cost;
        let s = parabola_linesearch(&g, &trial.gradient, &d, s_prev, k)?;
        if !s.is_finite() {
            return Err(invalid("linesearch", format!("non-finite step at iteration {k}")));
        }
        u = u.axpy(s, &d)?;
        s_prev = s;

        let refresh = config.refresh && (eps > (q * tau).max(q * gn) || eps < eta * eta * q * gn);
        if refresh {
            eps = (q * tau).max(eta * q * gn);
            ev = model.fresh_gradient(&u, eps)?;
            samples = ev.samples.clone();
        } else {
            ev = model.replay_gradient(&samples, &u)?;
            eps = ev.epsilon;
        }
        log.cost += ev.dof_cost;
        log.record(k + 1, Phase::Ncg, &ev, eps, refresh);
        observe(model, k + 1, &u, &ev)?;
        if ev.gradient.norm() < best.0 {
            best = (ev.gradient.norm(), u.clone());
        }
        prev = Some((d, g));
    }
    Ok(OptimizeResult {
        u: best.1,
        converged: false,
        iterations: config.k_max,
        gradient_norm: best.0,
        trace: log.trace,
        refreshes: log.refreshes,
        dof_cost: log.cost,
        wall_s: if log.timings { start.elapsed().as_secs_f64() } else { 0.0 },
        samples,
        negative_curvature: false,
        variances: log.variances,
    })
}

/// Inexact Newton: new samples at every outer step, inner CG on the frozen
/// Hessian to residual `eps / q`, then `eps <- max(q tau, eta eps)`.
pub fn newton_optimize<M: StochasticModel>(model: &mut M, config: &OptimizerConfig, u0: &GridFunction) -> Result<OptimizeResult> {
    config.validate()?;
    let start = Instant::now();
    let (tau, q, eta) = (config.tau, config.q, config.eta);
    let mut log = Log::new(config.timings);
    let mut u = u0.clone();
    let mut eps = config.eps0;
    let mut i = 0;
    let mut best: Option<(f64, GridFunction)> = None;
    let mut samples = None;
    let mut negative_curvature = false;

    for k in 0..config.k_max {
        let ev = model.fresh_gradient(&u, eps)?;
        log.cost += ev.dof_cost;
        log.record(i, Phase::Newton, &ev, eps, true);
        let f = ev.samples.clone();
        let g = ev.gradient.clone();
        let gn = g.norm();
        if best.as_ref().is_none_or(|b| gn < b.0) {
            best = Some((gn, u.clone()));
        }
        if gn <= tau {
            let check = model.fresh_gradient(&u, eps)?;
            log.cost += check.dof_cost;
            log.record(i, Phase::Check, &check, eps, true);
            let cn = check.gradient.norm();
            if cn <= tau {
                return Ok(OptimizeResult {
                    u,
                    converged: true,
                    iterations: k,
                    gradient_norm: cn,
                    trace: log.trace,
                    refreshes: log.refreshes,
                    dof_cost: log.cost,
                    wall_s: if log.timings { start.elapsed().as_secs_f64() } else { 0.0 },
                    samples: f,
                    negative_curvature,
                    variances: log.variances,
                });
            }
        }

        let mut hv_cost = 0.0;
        let cg = cg_solve(
            |v| {
                let (hv, c) = model.hessian_vector(&f, &u, v)?;
                hv_cost += c;
                Ok(hv)
            },
            &g.scaled(-1.0),
            eps / q,
            config.cg_max_iter,
        )?;
        log.cost += hv_cost;
        for (j, (&r, &t)) in cg.residuals.iter().skip(1).zip(&cg.wall_s).enumerate() {
            log.trace.push(IterationRecord {
                k_or_i: i + j + 1,
                phase: Phase::Cg,
                norm: r,
                epsilon: eps,
                refreshed: false,
                counts: ev.counts.clone(),
                wall_s: log.time(t),
            });
        }
        i += cg.iterations;
        samples = Some(f);
        if cg.negative_curvature {
            negative_curvature = true;
            if cg.iterations == 0 {
                break;
            }
        }
        u = u.axpy(1.0, &cg.du)?;
        eps = (q * tau).max(eta * eps);
    }
    let (gn, u_best) = best.expect("at least one outer step runs");
    Ok(OptimizeResult {
        u: u_best,
        converged: false,
        iterations: config.k_max,
        gradient_norm: gn,
        trace: log.trace,
        refreshes: log.refreshes,
        dof_cost: log.cost,
        wall_s: if log.timings { start.elapsed().as_secs_f64() } else { 0.0 },
        samples: samples.expect("at least one outer step runs"),
        negative_curvature,
        variances: log.variances,
    })
}

/// Frozen-sample and fresh-sample gradient norms along an NCG run that never
/// refreshes its samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub k: usize,
    pub frozen_norm: f64,
    pub fresh_norm: f64,
}

/// Runs NCG on the first sample set for `iterations` steps and evaluates a
/// fresh gradient at `eps0` after each one.
pub fn frozen_drift<M: StochasticModel>(
    model: &mut M,
    config: &OptimizerConfig,
    u0: &GridFunction,
    iterations: usize,
) -> Result<Vec<DriftPoint>> {
    let cfg = OptimizerConfig {
        refresh: false,
        k_max: iterations,
        tau: f64::MIN_POSITIVE,
        ..config.clone()
    };
    let eps = cfg.eps0;
    let mut points = Vec::new();
    ncg_observed(model, &cfg, u0, &mut |m, k, u, ev| {
        let fresh = m.fresh_gradient(u, eps)?;
        points.push(DriftPoint {
            k,
            frozen_norm: ev.gradient.norm(),
            fresh_norm: fresh.gradient.norm(),
        });
        Ok(())
    })?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlmc::{FrozenLevel, SamplerKind};

    fn gf(v: &[f64]) -> GridFunction {
        GridFunction::new(0, v.to_vec())
    }

    #[test]
    fn dy_beta_examples() {
        assert_eq!(dy_beta(&gf(&[2.0]), &gf(&[1.0]), &gf(&[-1.0])).unwrap(), Some(-4.0));
        assert_eq!(dy_beta(&gf(&[0.0]), &gf(&[1.0]), &gf(&[-1.0])).unwrap(), Some(0.0));
        assert_eq!(dy_beta(&gf(&[1.5]), &gf(&[1.5]), &gf(&[-1.0])).unwrap(), None);
    }

    #[test]
    fn parabola_is_exact_on_quadratics() {
        // phi(s) = (s - 3)^2
        assert_eq!(parabola_step(-6.0, -4.0, 1.0, 0).unwrap(), 3.0);
        assert_eq!(parabola_step(-6.0, -6.0, 0.5, 0).unwrap(), 0.5);
        assert!(matches!(parabola_step(0.5, 1.0, 1.0, 7), Err(Error::NotDescent { iteration: 7, .. })));
    }

    #[test]
    fn cg_identity_takes_one_step() {
        let rhs = gf(&[1.0, -2.0, 0.5]);
        let out = cg_solve(|v| Ok(v.clone()), &rhs, 1e-14, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.du, rhs);
    }

    #[test]
    fn cg_two_by_two() {
        // [[4, 1], [1, 3]] x = [1, 2] has x = [1/11, 7/11]
        let a = |v: &GridFunction| Ok(gf(&[4.0 * v.values[0] + v.values[1], v.values[0] + 3.0 * v.values[1]]));
        let out = cg_solve(a, &gf(&[1.0, 2.0]), 1e-14, 10).unwrap();
        assert!(out.iterations <= 2);
        assert!((out.du.values[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.du.values[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn cg_flags_negative_curvature() {
        let out = cg_solve(|v| Ok(v.scaled(-1.0)), &gf(&[1.0]), 1e-12, 5).unwrap();
        assert!(out.negative_curvature);
        assert_eq!(out.iterations, 0);
    }

    /// `J(u) = 0.5 (u, A u) - (b, u)` with diagonal `A`; every gradient is exact.
    struct Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
        fresh_calls: usize,
    }

    impl Quadratic {
        fn grad(&self, u: &GridFunction) -> GridFunction {
            gf(&u.values.iter().zip(&self.a).zip(&self.b).map(|((u, a), b)| a * u - b).collect::<Vec<_>>())
        }

        fn eval(&self, u: &GridFunction, eps: f64) -> Evaluation {
            Evaluation {
                gradient: self.grad(u),
                epsilon: eps,
                counts: vec![1],
                rho: None,
                dof_cost: 1.0,
                wall_s: 0.0,
                level_variance: vec![0.0],
                samples: FrozenSampleSet {
                    levels: vec![FrozenLevel {
                        level: 0,
                        base_seed: 0,
                        count: 1,
                    }],
                    epsilon: eps,
                    return_level: 0,
                    sampler: SamplerKind::Shifted,
                    stats: Vec::new(),
                },
            }
        }
    }

    impl StochasticModel for Quadratic {
        fn fresh_gradient(&mut self, u: &GridFunction, eps: f64) -> Result<Evaluation> {
            self.fresh_calls += 1;
            Ok(self.eval(u, eps))
        }
        fn replay_gradient(&mut self, f: &FrozenSampleSet, u: &GridFunction) -> Result<Evaluation> {
            Ok(self.eval(u, f.epsilon))
        }
        fn hessian_vector(&mut self, _: &FrozenSampleSet, _: &GridFunction, du: &GridFunction) -> Result<(GridFunction, f64)> {
            Ok((gf(&du.values.iter().zip(&self.a).map(|(d, a)| a * d).collect::<Vec<_>>()), 1.0))
        }
    }

    fn quadratic() -> Quadratic {
        Quadratic {
            a: vec![1.0, 2.0, 5.0, 10.0],
            b: vec![1.0, -1.0, 2.0, 0.5],
            fresh_calls: 0,
        }
    }

    #[test]
    fn ncg_solves_quadratic_in_n_steps() {
        let mut m = quadratic();
        let cfg = OptimizerConfig {
            tau: 1e-10,
            eps0: 1e-10,
            ..Default::default()
        };
        let r = ncg_optimize(&mut m, &cfg, &gf(&[0.0; 4])).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 5, "{}", r.iterations);
        for ((u, a), b) in r.u.values.iter().zip(&m.a).zip(&m.b) {
            assert!((u - b / a).abs() < 1e-9);
        }
    }

    #[test]
    fn newton_matches_ncg_on_quadratic() {
        let cfg = OptimizerConfig {
            tau: 1e-11,
            eps0: 1e-11,
            ..Default::default()
        };
        let mut m = quadratic();
        let n = newton_optimize(&mut m, &cfg, &gf(&[0.0; 4])).unwrap();
        assert!(n.converged);
        assert_eq!(n.iterations, 1);
        let mut m = quadratic();
        let c = ncg_optimize(&mut m, &cfg, &gf(&[0.0; 4])).unwrap();
        let cg: Vec<f64> = n.trace.iter().filter(|r| r.phase != Phase::Check).map(|r| r.norm).collect();
        let ncg: Vec<f64> = c.trace.iter().filter(|r| r.phase == Phase::Ncg).map(|r| r.norm).collect();
        for (a, b) in cg.iter().zip(&ncg).take(4) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn refresh_schedule_follows_gradient_norm() {
        let mut m = quadratic();
        let cfg = OptimizerConfig {
            tau: 1e-6,
            eps0: 1e-2,
            ..Default::default()
        };
        let r = ncg_optimize(&mut m, &cfg, &gf(&[0.0; 4])).unwrap();
        assert!(r.converged);
        let rows: Vec<&IterationRecord> = r.trace.iter().filter(|x| x.phase == Phase::Ncg).collect();
        for w in rows.windows(2) {
            let (a, b) = (w[0], w[1]);
            let fires = a.epsilon > (cfg.q * cfg.tau).max(cfg.q * a.norm) || a.epsilon < cfg.eta.powi(2) * cfg.q * a.norm;
            assert_eq!(b.refreshed, fires);
            if fires {
                assert_eq!(b.epsilon, (cfg.q * cfg.tau).max(cfg.eta * cfg.q * a.norm));
            }
        }
        assert!(r.trace.iter().any(|x| x.phase == Phase::Check));
    }

    #[test]
    fn failed_fresh_check_keeps_iterating() {
        struct Noisy(Quadratic, bool);
        impl StochasticModel for Noisy {
            fn fresh_gradient(&mut self, u: &GridFunction, eps: f64) -> Result<Evaluation> {
                let mut e = self.0.fresh_gradient(u, eps)?;
                if !self.1 && e.gradient.norm() <= 1e-8 {
                    self.1 = true;
                    e.gradient.values[0] += 1.0;
                }
                Ok(e)
            }
            fn replay_gradient(&mut self, f: &FrozenSampleSet, u: &GridFunction) -> Result<Evaluation> {
                self.0.replay_gradient(f, u)
            }
            fn hessian_vector(&mut self, f: &FrozenSampleSet, u: &GridFunction, du: &GridFunction) -> Result<(GridFunction, f64)> {
                self.0.hessian_vector(f, u, du)
            }
        }
        let cfg = OptimizerConfig {
            tau: 1e-8,
            eps0: 1e-8,
            refresh: false,
            ..Default::default()
        };
        let mut m = Noisy(quadratic(), false);
        let r = ncg_optimize(&mut m, &cfg, &gf(&[0.0; 4])).unwrap();
        assert!(r.converged);
        let checks: Vec<f64> = r.trace.iter().filter(|x| x.phase == Phase::Check).map(|x| x.norm).collect();
        assert!(checks.len() >= 2);
        assert!(checks[0] > cfg.tau);
        assert!(r.gradient_norm <= cfg.tau);
    }
}
