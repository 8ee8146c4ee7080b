use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;

/// Finite-volume matrix of `-div(k grad .)` with homogeneous Dirichlet data,
/// stored as its 3- or 5-point stencil.
///
/// Rows are scaled so that the discrete state equation reads
/// `K y = h^d (beta u - f(y))`, which keeps `K` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub level: usize,
    pub dim: usize,
    /// Cells per axis.
    pub m: usize,
    diag: Vec<f64>,
    // coupling between cell i and i + 1 (zero across row ends)
    east: Vec<f64>,
    // coupling between cell i and i + m
    north: Vec<f64>,
}

/// Assembles the diffusion operator for cell conductivities `k`.
pub fn assemble(k: &GridFunction, dim: usize) -> Result<DiscreteOperator> {
    if let Some((cell, &value)) = k
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::NonPositiveConductivity { cell, value });
    }
    let n = k.len();
    let m = match dim {
        1 => n,
        _ => (n as f64).sqrt().round() as usize,
    };
    if m.pow(dim as u32) != n {
        return Err(crate::error::invalid("k", "length is not a square grid"));
    }
    let h = 1.0 / m as f64;
    let scale = h.powi(dim as i32 - 2);
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b) * scale;
    let boundary = |a: f64| 2.0 * a * scale;

    let mut diag = vec![0.0; n];
    let mut east = vec![0.0; n];
    let mut north = vec![0.0; if dim == 2 { n } else { 0 }];
    let kv = &k.values;
    let rows = if dim == 2 { m } else { 1 };
    for j in 0..rows {
        for i in 0..m {
            let c = i + m * j;
            if i == 0 {
                diag[c] += boundary(kv[c]);
            }
            if i + 1 == m {
                diag[c] += boundary(kv[c]);
            } else {
                let t = harmonic(kv[c], kv[c + 1]);
                east[c] = -t;
                diag[c] += t;
                diag[c + 1] += t;
            }
            if dim == 2 {
                if j == 0 {
                    diag[c] += boundary(kv[c]);
                }
                if j + 1 == m {
                    diag[c] += boundary(kv[c]);
                } else {
                    let t = harmonic(kv[c], kv[c + m]);
                    north[c] = -t;
                    diag[c] += t;
                    diag[c + m] += t;
                }
            }
        }
    }
    Ok(DiscreteOperator {
        level: k.level,
        dim,
        m,
        diag,
        east,
        north,
    })
}

impl DiscreteOperator {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Cell measure `h^d`.
    pub fn cell_weight(&self) -> f64 {
        (1.0 / self.m as f64).powi(self.dim as i32)
    }

    pub fn bandwidth(&self) -> usize {
        if self.dim == 2 {
            self.m
        } else {
            1
        }
    }

    /// Entry `(i, j)` for `j <= i`.
    fn lower(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if i == j + 1 {
            self.east[j]
        } else if self.dim == 2 && i == j + self.m {
            self.north[j]
        } else {
            0.0
        }
    }

    /// Returns `K + diag(extra)`.
    pub fn with_diagonal(&self, extra: &[f64]) -> DiscreteOperator {
        let mut out = self.clone();
        for (d, e) in out.diag.iter_mut().zip(extra) {
            *d += e;
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y: Vec<f64> = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for i in 0..n.saturating_sub(1) {
            let e = self.east[i];
            y[i] += e * x[i + 1];
            y[i + 1] += e * x[i];
        }
        if self.dim == 2 {
            for i in 0..n - self.m {
                let e = self.north[i];
                y[i] += e * x[i + self.m];
                y[i + self.m] += e * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.lower(i, j);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        a
    }

    pub fn cholesky(&self) -> Result<BandCholesky> {
        BandCholesky::factor(self)
    }
}

/// Cholesky factor `L` of a banded SPD matrix, stored row-wise inside the
/// band.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    b: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &DiscreteOperator) -> Result<Self> {
        let n = a.n();
        let b = a.bandwidth();
        let w = b + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(b));
                let mut s = a.lower(i, j);
                let ri = &l[i * w..];
                let rj = &l[j * w..];
                for k in k0..j {
                    s -= ri[k + b - i] * rj[k + b - j];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Factorization { row: i, pivot: s });
                    }
                    l[i * w + b] = s.sqrt();
                } else {
                    l[i * w + j + b - i] = s / l[j * w + b];
                }
            }
        }
        Ok(BandCholesky { n, b, l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, b, w) = (self.n, self.b, self.b + 1);
        let mut x = rhs.to_vec();
        for i in 0..n {
            let row = &self.l[i * w..(i + 1) * w];
            let mut s = x[i];
            for k in i.saturating_sub(b)..i {
                s -= row[k + b - i] * x[k];
            }
            x[i] = s / row[b];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n.min(i + b + 1) {
                s -= self.l[k * w + i + b - k] * x[k];
            }
            x[i] = s / self.l[i * w + b];
        }
        x
    }
}

/// Linear solver used for every state, adjoint and linearized solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinearSolver {
    #[default]
    Cholesky,
    /// Jacobi-preconditioned CG to the given relative residual.
    Cg { rtol: f64, max_iter: usize },
}

/// An operator prepared for repeated solves.
#[derive(Debug, Clone)]
pub struct PreparedOperator {
    pub op: DiscreteOperator,
    chol: Option<BandCholesky>,
    solver: LinearSolver,
}

impl PreparedOperator {
    pub fn new(op: DiscreteOperator, solver: LinearSolver) -> Result<Self> {
        let chol = match solver {
            LinearSolver::Cholesky => Some(op.cholesky()?),
            LinearSolver::Cg { .. } => None,
        };
        Ok(PreparedOperator { op, chol, solver })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match (&self.chol, self.solver) {
            (Some(c), _) => Ok(c.solve(rhs)),
            (None, LinearSolver::Cg { rtol, max_iter }) => pcg(&self.op, rhs, rtol, max_iter),
            (None, LinearSolver::Cholesky) => unreachable!("factor is built on construction"),
        }
    }
}

fn pcg(a: &DiscreteOperator, b: &[f64], rtol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let dot = crate::grid::dot;
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&a.diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = a.apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= rtol * bnorm {
            return Ok(x);
        }
        if it + 1 == max_iter {
            return Err(Error::SolverStalled {
                iterations: max_iter,
                residual: rnorm / bnorm,
            });
        }
        for i in 0..n {
            z[i] = r[i] / a.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverStalled {
        iterations: max_iter,
        residual: f64::NAN,
    })
}
