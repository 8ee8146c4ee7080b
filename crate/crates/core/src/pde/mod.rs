//! Finite-volume state, adjoint and linearized solves for one realization
//! of the conductivity.
//!
//! All discrete equations are written as `K y = h^d * rhs`, where `K` is the
//! symmetric stencil matrix from [`assemble`] and `h^d` the cell measure.
//! With the level inner product `(a, b) = a.b h^d` this makes the adjoint of
//! the control-to-state map reuse exactly the same solve.

mod operator;

pub use operator::{assemble, BandCholesky, DiscreteOperator, LinearSolver, PreparedOperator};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::CovarianceSpec;
use crate::grid::{dot, GridFunction, GridHierarchy};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 30;
const NEWTON_RTOL: f64 = 1e-10;

/// A deterministic function on the domain, evaluated at cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSpec {
    Constant { value: f64 },
    /// `value` on the box `[lo, hi]^d`, zero elsewhere.
    Box { lo: f64, hi: f64, value: f64 },
}

impl FieldSpec {
    pub fn eval(&self, x: [f64; 2], dim: usize) -> f64 {
        match *self {
            FieldSpec::Constant { value } => value,
            FieldSpec::Box { lo, hi, value } => {
                let inside = x[..dim].iter().all(|&c| c >= lo && c <= hi);
                if inside {
                    value
                } else {
                    0.0
                }
            }
        }
    }

    pub fn on_level(&self, h: &GridHierarchy, level: usize) -> GridFunction {
        h.sample_fn(level, |x| self.eval(x, h.dim))
    }
}

/// Reaction term `f(y)` of `-div(k grad y) + f(y) = beta u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reaction {
    #[default]
    None,
    /// `f(y) = coef * y`.
    Linear { coef: f64 },
    /// `f(y) = shift + exp(rate * y)`.
    ExpShift { shift: f64, rate: f64 },
}

impl Reaction {
    pub fn is_none(&self) -> bool {
        matches!(self, Reaction::None)
    }

    pub fn f(&self, y: f64) -> f64 {
        match *self {
            Reaction::None => 0.0,
            Reaction::Linear { coef } => coef * y,
            Reaction::ExpShift { shift, rate } => shift + (rate * y).exp(),
        }
    }

    pub fn df(&self, y: f64) -> f64 {
        match *self {
            Reaction::None => 0.0,
            Reaction::Linear { coef } => coef,
            Reaction::ExpShift { rate, .. } => rate * (rate * y).exp(),
        }
    }

    pub fn d2f(&self, y: f64) -> f64 {
        match *self {
            Reaction::None | Reaction::Linear { .. } => 0.0,
            Reaction::ExpShift { rate, .. } => rate * rate * (rate * y).exp(),
        }
    }

    /// Whether `f''` vanishes identically.
    pub fn is_affine(&self) -> bool {
        !matches!(self, Reaction::ExpShift { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub alpha: f64,
    pub gamma: f64,
    pub target: FieldSpec,
    pub control_mask: FieldSpec,
    #[serde(default)]
    pub reaction: Reaction,
    pub covariance: CovarianceSpec,
    pub hierarchy: GridHierarchy,
    #[serde(default)]
    pub solver: LinearSolver,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", format!("must be nonnegative, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", format!("must be nonnegative, got {}", self.gamma)));
        }
        self.hierarchy.validate()?;
        let c = &self.covariance;
        if c.sigma2 != 0.0 {
            c.validate()?;
        }
        if c.dim != self.hierarchy.dim {
            return Err(invalid("dim", "covariance and hierarchy dimensions differ"));
        }
        if let LinearSolver::Cg { rtol, max_iter } = self.solver {
            if !(rtol > 0.0) || max_iter == 0 {
                return Err(invalid("solver", "cg needs rtol > 0 and max_iter > 0"));
            }
        }
        Ok(())
    }

    pub fn target_on(&self, level: usize) -> GridFunction {
        self.target.on_level(&self.hierarchy, level)
    }

    pub fn mask_on(&self, level: usize) -> GridFunction {
        self.control_mask.on_level(&self.hierarchy, level)
    }

    /// Solves the (possibly nonlinear) state equation for conductivity `k`
    /// and control `u`, keeping the prepared Jacobian for later adjoint and
    /// linearized solves.
    pub fn realize(&self, k: &GridFunction, u: &GridFunction) -> Result<Realization> {
        let op = assemble(k, self.hierarchy.dim)?;
        let beta = self.mask_on(k.level);
        if self.reaction.is_none() {
            let prepared = PreparedOperator::new(op, self.solver)?;
            let state = solve_state(&prepared, &beta, u)?;
            return Ok(Realization {
                prepared,
                state,
                curvature: None,
            });
        }
        let (state, prepared) = newton(&op, &beta, u, &self.reaction, self.solver)?;
        let curvature = if self.reaction.is_affine() {
            None
        } else {
            Some(state.y.values.iter().map(|&y| self.reaction.d2f(y)).collect())
        };
        Ok(Realization {
            prepared,
            state,
            curvature,
        })
    }
}

/// State solution with solver metadata.
#[derive(Debug, Clone)]
pub struct StateSolution {
    pub y: GridFunction,
    pub iterations: usize,
    /// Euclidean norm of the final discrete residual.
    pub residual: f64,
}

/// One realization at one level: state `y` and the operator
/// `K + h^d diag f'(y)` prepared for solves.
#[derive(Debug, Clone)]
pub struct Realization {
    pub prepared: PreparedOperator,
    pub state: StateSolution,
    curvature: Option<Vec<f64>>,
}

impl Realization {
    pub fn y(&self) -> &[f64] {
        &self.state.y.values
    }

    pub fn level(&self) -> usize {
        self.state.y.level
    }

    /// Solves `J p = h^d rhs`.
    pub fn adjoint(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let w = self.prepared.op.cell_weight();
        let scaled: Vec<f64> = rhs.iter().map(|r| w * r).collect();
        self.prepared.solve(&scaled)
    }

    /// `delta y` solving `J dy = h^d beta du`.
    pub fn linearized_state(&self, beta: &[f64], du: &[f64]) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = beta.iter().zip(du).map(|(b, d)| b * d).collect();
        self.adjoint(&rhs)
    }

    /// `delta p` for the second-order adjoint with right-hand side
    /// `2 dy + extra - f''(y) p dy`; `extra` carries the variance-penalty term.
    pub fn hessian_adjoint(&self, p: &[f64], dy: &[f64], extra: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut rhs: Vec<f64> = dy.iter().map(|d| 2.0 * d).collect();
        if let Some(e) = extra {
            for (r, v) in rhs.iter_mut().zip(e) {
                *r += v;
            }
        }
        if let Some(c) = &self.curvature {
            for i in 0..rhs.len() {
                rhs[i] -= c[i] * p[i] * dy[i];
            }
        }
        self.adjoint(&rhs)
    }
}

/// Solves `K y = h^d beta u`.
pub fn solve_state(a: &PreparedOperator, beta: &GridFunction, u: &GridFunction) -> Result<StateSolution> {
    if u.len() != a.op.n() || beta.len() != a.op.n() {
        return Err(Error::LevelMismatch {
            left: a.op.level,
            right: u.level,
        });
    }
    let w = a.op.cell_weight();
    let rhs: Vec<f64> = beta.values.iter().zip(&u.values).map(|(b, u)| w * b * u).collect();
    let y = a.solve(&rhs)?;
    let r = a.op.apply(&y);
    let residual = r
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(StateSolution {
        y: GridFunction::new(u.level, y),
        iterations: 1,
        residual,
    })
}

/// Solves `-div(k grad y) + f(y) = beta u` by damped Newton.
pub fn solve_state_nonlinear(spec: &ProblemSpec, k: &GridFunction, u: &GridFunction) -> Result<StateSolution> {
    if spec.reaction.is_none() {
        return Err(Error::NoReaction);
    }
    let op = assemble(k, spec.hierarchy.dim)?;
    let beta = spec.mask_on(k.level);
    Ok(newton(&op, &beta, u, &spec.reaction, spec.solver)?.0)
}

/// Solves `J p = h^d rhs` with `J` the prepared (linear or Jacobian) operator.
pub fn solve_adjoint(a: &PreparedOperator, rhs: &GridFunction) -> Result<GridFunction> {
    let w = a.op.cell_weight();
    let scaled: Vec<f64> = rhs.values.iter().map(|r| w * r).collect();
    Ok(GridFunction::new(rhs.level, a.solve(&scaled)?))
}

/// Single-realization Hessian pieces `(dy, dp)` for direction `du`, given the
/// adjoint `p` of `r`. `extra` is added to the `dp` right-hand side.
pub fn hessian_pieces(
    spec: &ProblemSpec,
    r: &Realization,
    p: &[f64],
    du: &GridFunction,
    extra: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let beta = spec.mask_on(du.level);
    let dy = r.linearized_state(&beta.values, &du.values)?;
    let dp = r.hessian_adjoint(p, &dy, extra)?;
    Ok((dy, dp))
}

fn newton(
    op: &DiscreteOperator,
    beta: &GridFunction,
    u: &GridFunction,
    reaction: &Reaction,
    solver: LinearSolver,
) -> Result<(StateSolution, PreparedOperator)> {
    let n = op.n();
    let w = op.cell_weight();
    let bu: Vec<f64> = beta.values.iter().zip(&u.values).map(|(b, u)| w * b * u).collect();
    let residual = |y: &[f64]| -> Vec<f64> {
        let mut r = op.apply(y);
        for i in 0..n {
            r[i] += w * reaction.f(y[i]) - bu[i];
        }
        r
    };
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let mut y = vec![0.0; n];
    let f0: Vec<f64> = y.iter().map(|&v| w * reaction.f(v)).collect();
    let tol = NEWTON_RTOL * norm(&bu).max(norm(&f0)).max(f64::MIN_POSITIVE);
    let mut r = residual(&y);
    let mut rn = norm(&r);
    let mut history = vec![rn];
    let jacobian = |y: &[f64]| -> Result<PreparedOperator> {
        let extra: Vec<f64> = y.iter().map(|&v| w * reaction.df(v)).collect();
        PreparedOperator::new(op.with_diagonal(&extra), solver)
    };
    let mut iterations = 0;
    while rn > tol {
        if iterations == NEWTON_MAX_ITER {
            return Err(Error::NewtonDiverged { iterations, history });
        }
        iterations += 1;
        let jac = jacobian(&y)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let step = jac.solve(&neg)?;
        let mut t = 1.0;
        let mut trial;
        let mut trial_r;
        let mut halvings = 0;
        loop {
            trial = y.iter().zip(&step).map(|(a, s)| a + t * s).collect::<Vec<_>>();
            trial_r = residual(&trial);
            let tn = norm(&trial_r);
            if (tn.is_finite() && tn < rn) || halvings == NEWTON_MAX_HALVINGS {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        y = trial;
        r = trial_r;
        rn = norm(&r);
        history.push(rn);
        if !rn.is_finite() {
            return Err(Error::NewtonDiverged { iterations, history });
        }
    }
    let prepared = jacobian(&y)?;
    Ok((
        StateSolution {
            y: GridFunction::new(u.level, y),
            iterations,
            residual: rn,
        },
        prepared,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec_1d(m0: usize, reaction: Reaction) -> ProblemSpec {
        ProblemSpec {
            alpha: 1e-3,
            gamma: 0.0,
            target: FieldSpec::Constant { value: 0.0 },
            control_mask: FieldSpec::Constant { value: 1.0 },
            reaction,
            covariance: CovarianceSpec {
                sigma2: 0.0,
                lambda: 0.3,
                dim: 1,
                n_kl: 1,
            },
            hierarchy: GridHierarchy::new(m0, 0, 1).unwrap(),
            solver: LinearSolver::Cholesky,
        }
    }

    #[test]
    fn two_cell_state() {
        let k = GridFunction::new(0, vec![1.0, 1.0]);
        let a = PreparedOperator::new(assemble(&k, 1).unwrap(), LinearSolver::Cholesky).unwrap();
        let beta = GridFunction::new(0, vec![1.0, 1.0]);
        let s = solve_state(&a, &beta, &GridFunction::new(0, vec![1.0, 1.0])).unwrap();
        for v in &s.y.values {
            assert!((v - 0.125).abs() < 1e-15);
        }
        let z = solve_state(&a, &beta, &GridFunction::new(0, vec![0.0, 0.0])).unwrap();
        assert_eq!(z.y.values, vec![0.0, 0.0]);
    }

    /// Discrete L2 error against `sin(pi x1) sin(pi x2)`.
    fn manufactured_error(m: usize) -> f64 {
        let h = GridHierarchy::new(m, 0, 2).unwrap();
        let exact = h.sample_fn(0, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        let u = exact.scaled(2.0 * PI * PI);
        let a = PreparedOperator::new(assemble(&h.constant(0, 1.0), 2).unwrap(), LinearSolver::Cholesky).unwrap();
        let y = solve_state(&a, &h.constant(0, 1.0), &u).unwrap().y;
        y.axpy(-1.0, &exact).unwrap().norm()
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        let errs: Vec<f64> = [8, 16, 32, 64].iter().map(|&m| manufactured_error(m)).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn linear_reaction_matches_shifted_direct_solve() {
        let spec = spec_1d(2, Reaction::Linear { coef: 1.0 });
        let k = GridFunction::new(0, vec![1.0, 1.0]);
        let u = GridFunction::new(0, vec![1.0, 1.0]);
        let y = solve_state_nonlinear(&spec, &k, &u).unwrap().y;
        // (A + h I) y = u / 2 with A = [[6,-2],[-2,6]], h = 1/2
        let expect = 0.5 / (6.0 - 2.0 + 0.5);
        for v in &y.values {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_reaction_gives_negative_state() {
        let mut spec = spec_1d(16, Reaction::ExpShift { shift: 20.0, rate: 5.0 });
        spec.hierarchy = GridHierarchy::new(8, 0, 2).unwrap();
        spec.covariance.dim = 2;
        let k = spec.hierarchy.constant(0, 1.0);
        let u = spec.hierarchy.zeros(0);
        let s = solve_state_nonlinear(&spec, &k, &u).unwrap();
        assert!(s.y.values.iter().all(|&v| v < 0.0));
        let scale = 21.0 / 64.0 * 8.0;
        assert!(s.residual <= 1e-10 * scale);
    }

    #[test]
    fn nonlinear_requires_reaction() {
        let spec = spec_1d(4, Reaction::None);
        let k = GridFunction::new(0, vec![1.0; 4]);
        assert!(matches!(
            solve_state_nonlinear(&spec, &k, &k),
            Err(Error::NoReaction)
        ));
    }

    #[test]
    fn adjoint_identity() {
        let h = GridHierarchy::new(6, 0, 2).unwrap();
        let k = h.sample_fn(0, |x| 1.0 + 0.5 * (5.0 * x[0] + 3.0 * x[1]).sin());
        let a = PreparedOperator::new(assemble(&k, 2).unwrap(), LinearSolver::Cholesky).unwrap();
        let beta = h.sample_fn(0, |x| 1.0 + x[0]);
        let u = h.sample_fn(0, |x| (7.0 * x[0]).cos() - x[1]);
        let r = h.sample_fn(0, |x| x[0] * x[1] - 0.3);
        let y = solve_state(&a, &beta, &u).unwrap().y;
        let p = solve_adjoint(&a, &r).unwrap();
        let bp = GridFunction::new(0, beta.values.iter().zip(&p.values).map(|(b, p)| b * p).collect());
        let lhs = y.inner_product(&r).unwrap();
        let rhs = u.inner_product(&bp).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs());
    }

    #[test]
    fn hessian_pieces_vanish_for_zero_direction() {
        let spec = spec_1d(8, Reaction::ExpShift { shift: 20.0, rate: 5.0 });
        let h = spec.hierarchy;
        let r = spec.realize(&h.constant(0, 1.0), &h.constant(0, 1.0)).unwrap();
        let p = r.adjoint(r.y()).unwrap();
        let (dy, dp) = hessian_pieces(&spec, &r, &p, &h.zeros(0), None).unwrap();
        assert!(dy.iter().chain(&dp).all(|&v| v == 0.0));
    }
}
