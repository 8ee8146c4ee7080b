//! Lognormal random conductivity fields from a truncated Karhunen–Loève
//! expansion of an exponentially correlated Gaussian field on `[0,1]^d`.
//!
//! The 1D kernel `sigma2 * exp(-|x - y| / lambda)` has closed-form
//! eigenpairs
//!
//! ```text
//! theta = 2 c sigma2 / (w^2 + c^2),   f(x) ∝ w cos(w x) + c sin(w x),   c = 1 / lambda,
//! ```
//!
//! where `w` is the n-th positive root of `(w^2 - c^2) sin w - 2 c w cos w`,
//! which lies in `((n-1) pi, n pi)`. The 2D kernel uses the l1 distance and
//! therefore factorizes; its eigenpairs are products of 1D ones.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridHierarchy};

const ROOT_RTOL: f64 = 1e-12;
const MAX_POOL: usize = 1 << 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sigma2: f64,
    pub lambda: f64,
    pub dim: usize,
    pub n_kl: usize,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(invalid("sigma2", format!("must be positive, got {}", self.sigma2)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be positive, got {}", self.lambda)));
        }
        if !(1..=2).contains(&self.dim) {
            return Err(invalid("dim", format!("must be 1 or 2, got {}", self.dim)));
        }
        if self.n_kl == 0 {
            return Err(invalid("n_kl", "must be at least 1"));
        }
        Ok(())
    }
}

/// One eigenpair of the 1D exponential kernel on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair1d {
    pub eigenvalue: f64,
    /// Frequency `w` of the eigenfunction.
    pub frequency: f64,
    /// Inverse L2 norm of `w cos(w x) + c sin(w x)`.
    scale: f64,
    decay: f64,
}

impl Eigenpair1d {
    /// Unit-norm eigenfunction evaluated at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let w = self.frequency;
        self.scale * (w * (w * x).cos() + self.decay * (w * x).sin())
    }
}

/// Analytic eigenpairs of `sigma2 * exp(-|x - y| / lambda)` on `[0, 1]`,
/// sorted by decreasing eigenvalue.
pub fn solve_1d_eigenpairs(sigma2: f64, lambda: f64, count: usize) -> Result<Vec<Eigenpair1d>> {
    if !(sigma2 > 0.0) {
        return Err(invalid("sigma2", "must be positive"));
    }
    if !(lambda > 0.0) {
        return Err(invalid("lambda", "must be positive"));
    }
    if count == 0 {
        return Err(invalid("count", "must be at least 1"));
    }
    let c = 1.0 / lambda;
    let g = |w: f64| (w * w - c * c) * w.sin() - 2.0 * c * w * w.cos();
    (1..=count)
        .map(|n| {
            let lo = if n == 1 { 1e-9 } else { (n - 1) as f64 * PI };
            let hi = n as f64 * PI;
            let w = bisect(g, lo, hi).ok_or(Error::RootBracket { index: n, lo, hi })?;
            let norm2 = 0.5 * (w * w + c * c)
                + (w * w - c * c) * (2.0 * w).sin() / (4.0 * w)
                + c * w.sin().powi(2);
            Ok(Eigenpair1d {
                eigenvalue: 2.0 * c * sigma2 / (w * w + c * c),
                frequency: w,
                scale: 1.0 / norm2.sqrt(),
                decay: c,
            })
        })
        .collect()
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= ROOT_RTOL * mid.abs() {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Truncated KL basis: `n_kl` eigenvalues in decreasing order, each tied to a
/// pair of 1D factor indices (`(i, 0)` in 1D).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlBasis {
    pub spec: CovarianceSpec,
    pub eigenvalues: Vec<f64>,
    pub terms: Vec<(usize, usize)>,
    /// Unit-variance 1D eigenpairs referenced by `terms`.
    pub factors: Vec<Eigenpair1d>,
}

/// Builds the basis, growing the 1D pool until the top-`n_kl` products are
/// certified (2D).
pub fn build_basis(spec: CovarianceSpec) -> Result<KlBasis> {
    build_basis_with_pool(spec, None)
}

/// Like [`build_basis`] with an explicit 1D pool size; fails if that pool is
/// too small to certify the truncation.
pub fn build_basis_with_pool(spec: CovarianceSpec, pool: Option<usize>) -> Result<KlBasis> {
    spec.validate()?;
    let n = spec.n_kl;
    if spec.dim == 1 {
        let factors = solve_1d_eigenpairs(1.0, spec.lambda, n)?;
        return Ok(KlBasis {
            spec,
            eigenvalues: factors.iter().map(|e| spec.sigma2 * e.eigenvalue).collect(),
            terms: (0..n).map(|i| (i, 0)).collect(),
            factors,
        });
    }
    let mut p = pool.unwrap_or(((n as f64).sqrt().ceil() as usize) + 8);
    loop {
        // one extra pair bounds every product that involves an index >= p
        let pairs = solve_1d_eigenpairs(1.0, spec.lambda, p + 1)?;
        let t: Vec<f64> = pairs.iter().map(|e| e.eigenvalue).collect();
        let outside = t[0] * t[p];
        let mut products: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..p {
            for j in 0..p {
                let v = t[i] * t[j];
                if v > outside {
                    products.push((v, i, j));
                }
            }
        }
        if products.len() >= n {
            products.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            products.truncate(n);
            let used = products.iter().map(|&(_, i, j)| i.max(j)).max().unwrap_or(0) + 1;
            let mut factors = pairs;
            factors.truncate(used);
            return Ok(KlBasis {
                spec,
                eigenvalues: products.iter().map(|&(v, _, _)| spec.sigma2 * v).collect(),
                terms: products.iter().map(|&(_, i, j)| (i, j)).collect(),
                factors,
            });
        }
        if pool.is_some() || p >= MAX_POOL {
            return Err(Error::InsufficientPool { pool: p, n_kl: n });
        }
        p *= 2;
    }
}

impl KlBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Fraction of the total field variance `sigma2 * |D|` retained.
    pub fn captured_variance(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.spec.sigma2
    }

    /// Value of the `n`-th eigenfunction at `x`.
    pub fn eigenfunction(&self, n: usize, x: [f64; 2]) -> f64 {
        let (i, j) = self.terms[n];
        let fi = self.factors[i].eval(x[0]);
        if self.spec.dim == 1 {
            fi
        } else {
            fi * self.factors[j].eval(x[1])
        }
    }

    /// Truncated series `sum sqrt(theta_n) xi_n f_n(x)` at an arbitrary point.
    pub fn evaluate(&self, xi: &[f64], x: [f64; 2]) -> f64 {
        self.eigenvalues
            .iter()
            .zip(xi)
            .enumerate()
            .map(|(n, (t, s))| t.sqrt() * s * self.eigenfunction(n, x))
            .sum()
    }

    /// Pointwise covariance of the truncated series.
    pub fn covariance(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        (0..self.len())
            .map(|n| self.eigenvalues[n] * self.eigenfunction(n, x) * self.eigenfunction(n, y))
            .sum()
    }
}

/// Identifies one realization: sample `index` of the ordered set seeded by
/// `base_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub base_seed: u64,
    pub index: u64,
}

impl SampleKey {
    pub fn new(base_seed: u64, index: u64) -> Self {
        SampleKey { base_seed, index }
    }

    /// The `n` iid standard normals driving this realization. Each index
    /// selects its own ChaCha stream, so any sample can be regenerated in
    /// isolation.
    pub fn standard_normals(&self, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.index);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Evaluates KL realizations on every level of a hierarchy, caching the 1D
/// eigenfunction values at cell centers.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    basis: KlBasis,
    hierarchy: GridHierarchy,
    // tables[level][a * m + i] = factor a at the i-th center
    tables: Vec<Vec<f64>>,
    used_factors: usize,
}

impl FieldSampler {
    pub fn new(basis: KlBasis, hierarchy: GridHierarchy) -> Result<Self> {
        if basis.spec.dim != hierarchy.dim {
            return Err(invalid("dim", "covariance and hierarchy dimensions differ"));
        }
        let used_factors = basis
            .terms
            .iter()
            .map(|&(i, j)| i.max(j))
            .max()
            .unwrap_or(0)
            + 1;
        let tables = (0..=hierarchy.max_level)
            .map(|l| {
                let m = hierarchy.cells_per_axis(l);
                let h = 1.0 / m as f64;
                let mut t = vec![0.0; used_factors * m];
                for a in 0..used_factors {
                    for i in 0..m {
                        t[a * m + i] = basis.factors[a].eval((i as f64 + 0.5) * h);
                    }
                }
                t
            })
            .collect();
        Ok(FieldSampler {
            basis,
            hierarchy,
            tables,
            used_factors,
        })
    }

    pub fn basis(&self) -> &KlBasis {
        &self.basis
    }

    pub fn hierarchy(&self) -> &GridHierarchy {
        &self.hierarchy
    }

    /// Gaussian field `z` for `key` at the cell centers of `level`.
    pub fn sample_gaussian(&self, key: SampleKey, level: usize) -> Result<GridFunction> {
        self.hierarchy.check_level(level)?;
        let xi = key.standard_normals(self.basis.len());
        Ok(self.gaussian_from_normals(&xi, level))
    }

    pub(crate) fn gaussian_from_normals(&self, xi: &[f64], level: usize) -> GridFunction {
        let m = self.hierarchy.cells_per_axis(level);
        let table = &self.tables[level];
        let coeffs = self
            .basis
            .eigenvalues
            .iter()
            .zip(xi)
            .map(|(t, s)| t.sqrt() * s);
        if self.hierarchy.dim == 1 {
            let mut z = vec![0.0; m];
            for (c, &(a, _)) in coeffs.zip(&self.basis.terms) {
                let row = &table[a * m..(a + 1) * m];
                for (zi, f) in z.iter_mut().zip(row) {
                    *zi += c * f;
                }
            }
            return GridFunction::new(level, z);
        }
        // z(x1_i, x2_j) = sum_a F_a(x1_i) * T_a(x2_j),  T_a = sum_{n: a_n = a} c_n F_{b_n}
        let p = self.used_factors;
        let mut t = vec![0.0; p * m];
        for (c, &(a, b)) in coeffs.zip(&self.basis.terms) {
            let src = &table[b * m..(b + 1) * m];
            let dst = &mut t[a * m..(a + 1) * m];
            for (d, f) in dst.iter_mut().zip(src) {
                *d += c * f;
            }
        }
        let mut z = vec![0.0; m * m];
        for a in 0..p {
            let fa = &table[a * m..(a + 1) * m];
            let ta = &t[a * m..(a + 1) * m];
            for (j, &tj) in ta.iter().enumerate() {
                if tj == 0.0 {
                    continue;
                }
                let row = &mut z[j * m..(j + 1) * m];
                for (zi, f) in row.iter_mut().zip(fa) {
                    *zi += f * tj;
                }
            }
        }
        GridFunction::new(level, z)
    }

    /// Lognormal conductivity `k = exp(z)` for `key` on `level`.
    pub fn conductivity(&self, key: SampleKey, level: usize) -> Result<GridFunction> {
        Ok(lognormal_field(&self.sample_gaussian(key, level)?))
    }
}

/// Conductivity source for a problem: a lognormal KL field, or the
/// deterministic `k = 1` when the field variance is zero.
#[derive(Debug, Clone)]
pub enum RandomField {
    Deterministic(GridHierarchy),
    Lognormal(FieldSampler),
}

impl RandomField {
    pub fn new(spec: CovarianceSpec, hierarchy: GridHierarchy) -> Result<Self> {
        if spec.sigma2 == 0.0 {
            return Ok(RandomField::Deterministic(hierarchy));
        }
        FieldSampler::new(build_basis(spec)?, hierarchy).map(RandomField::Lognormal)
    }

    pub fn hierarchy(&self) -> &GridHierarchy {
        match self {
            RandomField::Deterministic(h) => h,
            RandomField::Lognormal(s) => s.hierarchy(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, RandomField::Deterministic(_))
    }

    pub fn conductivity(&self, key: SampleKey, level: usize) -> Result<GridFunction> {
        match self {
            RandomField::Deterministic(h) => {
                h.check_level(level)?;
                Ok(h.constant(level, 1.0))
            }
            RandomField::Lognormal(s) => s.conductivity(key, level),
        }
    }
}

/// Pointwise exponential.
pub fn lognormal_field(z: &GridFunction) -> GridFunction {
    GridFunction::new(z.level, z.values.iter().map(|v| v.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_descend_and_scale_with_sigma2() {
        let one = solve_1d_eigenpairs(1.0, 0.3, 30).unwrap();
        let two = solve_1d_eigenpairs(2.0, 0.3, 30).unwrap();
        for w in one.windows(2) {
            assert!(w[0].eigenvalue > w[1].eigenvalue);
        }
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a.eigenvalue, b.eigenvalue);
        }
    }

    #[test]
    fn eigenfunctions_have_unit_norm() {
        // composite Simpson with 4000 panels
        let pairs = solve_1d_eigenpairs(1.0, 0.3, 12).unwrap();
        let n = 4000;
        for e in &pairs {
            let h = 1.0 / n as f64;
            let mut s = e.eval(0.0).powi(2) + e.eval(1.0).powi(2);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                s += w * e.eval(k as f64 * h).powi(2);
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-8, "norm {}", s * h / 3.0);
        }
    }

    #[test]
    fn trace_is_approached_from_below() {
        let pairs = solve_1d_eigenpairs(1.0, 0.3, 4000).unwrap();
        let mut partial = 0.0;
        let mut last = 0.0;
        for (k, e) in pairs.iter().enumerate() {
            partial += e.eigenvalue;
            assert!(partial <= 1.0 + 1e-12);
            if k % 1000 == 999 {
                assert!(partial > last);
                last = partial;
            }
        }
        // the tail behaves like sum 2c / (n pi)^2
        assert!(1.0 - partial < 2e-4, "partial sum {partial}");
    }

    #[test]
    fn single_term_basis() {
        let spec = CovarianceSpec {
            sigma2: 0.7,
            lambda: 0.5,
            dim: 1,
            n_kl: 1,
        };
        let b = build_basis(spec).unwrap();
        let top = solve_1d_eigenpairs(0.7, 0.5, 1).unwrap()[0];
        assert_eq!(b.len(), 1);
        assert!((b.eigenvalues[0] - top.eigenvalue).abs() < 1e-15);
    }

    #[test]
    fn small_2d_basis_matches_enumeration() {
        let spec = CovarianceSpec {
            sigma2: 1.0,
            lambda: 0.3,
            dim: 2,
            n_kl: 4,
        };
        let b = build_basis(spec).unwrap();
        let t: Vec<f64> = solve_1d_eigenpairs(1.0, 0.3, 10)
            .unwrap()
            .iter()
            .map(|e| e.eigenvalue)
            .collect();
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                all.push((t[i] * t[j], i, j));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        for k in 0..4 {
            assert!((b.eigenvalues[k] - all[k].0).abs() < 1e-14);
            assert_eq!(b.terms[k], (all[k].1, all[k].2));
        }
        // symmetric pair (0,1)/(1,0) is ordered lexicographically
        assert_eq!(b.terms[1], (0, 1));
        assert_eq!(b.terms[2], (1, 0));
    }

    #[test]
    fn explicit_pool_too_small_is_rejected() {
        let spec = CovarianceSpec {
            sigma2: 1.0,
            lambda: 0.3,
            dim: 2,
            n_kl: 100,
        };
        assert!(matches!(
            build_basis_with_pool(spec, Some(5)),
            Err(Error::InsufficientPool { .. })
        ));
    }

    #[test]
    fn normals_depend_only_on_key() {
        let a = SampleKey::new(7, 3).standard_normals(16);
        let b = SampleKey::new(7, 3).standard_normals(16);
        let c = SampleKey::new(7, 4).standard_normals(16);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn lognormal_is_positive_exponential() {
        let z = GridFunction::new(0, vec![0.0, 2f64.ln(), -700.0]);
        let k = lognormal_field(&z);
        assert_eq!(k.values[0], 1.0);
        assert!((k.values[1] - 2.0).abs() < 1e-15);
        assert!(k.values[2] > 0.0);
    }
}
