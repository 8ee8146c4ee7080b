use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;

/// Number of lag covariances kept per level.
pub const LAGS: usize = 2;

/// Per-level sample moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub n: usize,
    pub mean: GridFunction,
    /// Unbiased sample variance per point.
    pub variance: GridFunction,
    /// Circular lag-1 and lag-2 sample covariances per point.
    pub lag_cov: [GridFunction; LAGS],
    /// Model cost of one correction sample.
    pub cost: f64,
    /// Measured seconds per correction sample (diagnostic).
    pub wall_per_sample: f64,
}

impl LevelStats {
    /// Moments of an ordered set of samples, all of equal length.
    pub fn from_samples(level: usize, samples: &[Vec<f64>], cost: f64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        let len = samples[0].len();
        // moments of the data shifted by the first sample, exact for constant data
        let origin = &samples[0];
        let nf = n as f64;
        let mut shift = vec![0.0; len];
        for s in samples {
            for i in 0..len {
                shift[i] += s[i] - origin[i];
            }
        }
        shift.iter_mut().for_each(|m| *m /= nf);
        let centred = |s: &[f64], i: usize| s[i] - origin[i] - shift[i];
        let mut var = vec![0.0; len];
        let mut lags = [vec![0.0; len], vec![0.0; len]];
        for j in 0..n {
            let a = &samples[j];
            for (i, v) in var.iter_mut().enumerate() {
                *v += centred(a, i).powi(2);
            }
            for (k, lag) in lags.iter_mut().enumerate() {
                let b = &samples[(j + k + 1) % n];
                for (i, c) in lag.iter_mut().enumerate() {
                    *c += centred(a, i) * centred(b, i);
                }
            }
        }
        let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s).collect();
        var.iter_mut().for_each(|v| *v /= nf - 1.0);
        for lag in lags.iter_mut() {
            lag.iter_mut().for_each(|v| *v /= nf);
        }
        let [l1, l2] = lags;
        Ok(LevelStats {
            level,
            n,
            mean: GridFunction::new(level, mean),
            variance: GridFunction::new(level, var),
            lag_cov: [GridFunction::new(level, l1), GridFunction::new(level, l2)],
            cost,
            wall_per_sample: 0.0,
        })
    }

    /// Builds stats directly from moments.
    pub fn from_moments(
        level: usize,
        n: usize,
        mean: GridFunction,
        variance: GridFunction,
        lag_cov: [GridFunction; LAGS],
        cost: f64,
    ) -> Self {
        LevelStats {
            level,
            n,
            mean,
            variance,
            lag_cov,
            cost,
            wall_per_sample: 0.0,
        }
    }
}

/// `max(floor * V, V + 2 * (c1 + c2))` per point.
pub fn corrected_variance(stats: &LevelStats, floor: f64) -> Result<GridFunction> {
    if stats.n < 2 {
        return Err(Error::TooFewSamples(stats.n));
    }
    let v = &stats.variance.values;
    let [c1, c2] = [&stats.lag_cov[0].values, &stats.lag_cov[1].values];
    let values = (0..v.len())
        .map(|i| (floor * v[i]).max(v[i] + 2.0 * (c1[i] + c2[i])))
        .collect();
    Ok(GridFunction::new(stats.level, values))
}

/// Optimal sample counts per level for variance fields given on a common
/// grid: each point gets the Lagrange-optimal counts for a stochastic error
/// of `theta * eps^2`, then each level takes its maximum over points. Counts
/// never drop below `taken`.
pub fn allocate_samples(
    variances: &[GridFunction],
    costs: &[f64],
    taken: &[usize],
    eps: f64,
    theta: f64,
) -> Result<Vec<usize>> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(invalid("theta_split", "must lie in (0, 1]"));
    }
    if variances.len() != costs.len() || taken.len() != costs.len() {
        return Err(invalid("allocation", "variance, cost and count lists differ in length"));
    }
    if let Some(l) = costs.iter().position(|c| !(*c > 0.0)) {
        return Err(Error::ZeroCost(l));
    }
    let points = variances.first().map_or(0, |v| v.len());
    let budget = theta * eps * eps;
    let mut n: Vec<usize> = taken.to_vec();
    for x in 0..points {
        let s: f64 = variances
            .iter()
            .zip(costs)
            .map(|(v, c)| (v.values[x].max(0.0) * c).sqrt())
            .sum();
        for (l, (v, c)) in variances.iter().zip(costs).enumerate() {
            let want = ((v.values[x].max(0.0) / c).sqrt() * s / budget).ceil();
            let want = if want.is_finite() { want.min(1e15) as usize } else { usize::MAX / 4 };
            n[l] = n[l].max(want);
        }
    }
    Ok(n)
}

/// Weak-error rate fitted to the correction-mean norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoFit {
    pub rho: f64,
    /// Bias bound at the finest level; infinite when the fit shows no decay.
    pub bias: f64,
}

impl RhoFit {
    pub fn decaying(&self) -> bool {
        self.rho > 0.0
    }
}

/// Bias bound `|E[Y_L]|_inf / (2^rho - 1)`.
pub fn bias_bound(rho: f64, mean_norm: f64) -> f64 {
    if rho > 0.0 {
        mean_norm / (rho.exp2() - 1.0)
    } else {
        f64::INFINITY
    }
}

/// Least-squares slope of `log2 |E[Y_l]|_inf` against `l`; `norms` holds
/// `(l, |E[Y_l]|_inf)` for `l >= 1`. Needs at least two levels.
pub fn estimate_rho_bias(norms: &[(usize, f64)]) -> Option<RhoFit> {
    if norms.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .map(|&(l, v)| (l as f64, v.max(f64::MIN_POSITIVE).log2()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let rho = -sxy / sxx;
    let last = norms[norms.len() - 1].1;
    Some(RhoFit {
        rho,
        bias: bias_bound(rho, last),
    })
}

/// Standard biased sample variance `1/n sum (x - mean)^2`.
pub fn biased_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Shifted single-set estimator `1/(2n) sum (x_j - x_{j-1})^2`, circular.
pub fn v_hat_1(x: &[f64]) -> f64 {
    let n = x.len();
    (0..n).map(|j| (x[j] - x[(j + n - 1) % n]).powi(2)).sum::<f64>() / (2.0 * n as f64)
}

/// Two-set estimator `1/(2n) sum (x_j - x'_j)^2`.
pub fn v_hat_two_set(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * x.len() as f64)
}

/// Gradient of `v_hat_1` with respect to the sample vector under the
/// `1/n`-weighted inner product: `2 x_j - x_{j+1} - x_{j-1}`.
pub fn v_hat_1_gradient(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|j| 2.0 * x[j] - x[(j + 1) % n] - x[(j + n - 1) % n])
        .collect()
}

fn level_norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Mean over states and pointwise biased variance, integrated.
fn ensemble_moments(ys: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = ys.len() as f64;
    let len = ys[0].len();
    let mut mean = vec![0.0; len];
    for y in ys {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v / n;
        }
    }
    let mut var = 0.0;
    for y in ys {
        var += level_norm2(&y.iter().zip(&mean).map(|(a, b)| a - b).collect::<Vec<_>>());
    }
    (mean, var / n)
}

/// Robust cost `E|y - y_D|^2 + gamma |std y|^2 + alpha |u|^2` under the
/// empirical measure of `ys`.
pub fn robust_cost(ys: &[Vec<f64>], target: &[f64], u: &[f64], alpha: f64, gamma: f64) -> f64 {
    let tracking = ys
        .iter()
        .map(|y| level_norm2(&y.iter().zip(target).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .sum::<f64>()
        / ys.len() as f64;
    let (_, var) = ensemble_moments(ys);
    tracking + gamma * var + alpha * level_norm2(u)
}

/// Average cost `|E y - y_D|^2 + gamma' |std y|^2 + alpha |u|^2` under the
/// empirical measure of `ys`.
pub fn average_cost(ys: &[Vec<f64>], target: &[f64], u: &[f64], alpha: f64, gamma_prime: f64) -> f64 {
    let (mean, var) = ensemble_moments(ys);
    let miss: Vec<f64> = mean.iter().zip(target).map(|(a, b)| a - b).collect();
    level_norm2(&miss) + gamma_prime * var + alpha * level_norm2(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_stats(v: f64, c1: f64, c2: f64) -> LevelStats {
        let g = |x| GridFunction::new(0, vec![x]);
        LevelStats::from_moments(0, 10, g(0.0), g(v), [g(c1), g(c2)], 1.0)
    }

    #[test]
    fn corrected_variance_rules() {
        let c = |v, a, b| corrected_variance(&scalar_stats(v, a, b), 0.5).unwrap().values[0];
        assert_eq!(c(1.0, 0.0, 0.0), 1.0);
        assert_eq!(c(1.0, -0.2, -0.1), 0.5);
        assert!((c(1.0, 0.1, 0.0) - 1.2).abs() < 1e-15);
        let mut s = scalar_stats(1.0, 0.0, 0.0);
        s.n = 1;
        assert!(matches!(corrected_variance(&s, 0.5), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn allocation_examples() {
        let g = |x| GridFunction::new(0, vec![x]);
        let n = allocate_samples(&[g(1.0)], &[1.0], &[0], 2f64.sqrt(), 0.5).unwrap();
        assert_eq!(n, vec![1]);
        let n = allocate_samples(&[g(1.0), g(0.25)], &[1.0, 4.0], &[0, 0], 1.0, 0.5).unwrap();
        assert_eq!(n, vec![4, 1]);
        let achieved = 1.0 / 4.0 + 0.25 / 1.0;
        assert_eq!(achieved, 0.5);
        let n = allocate_samples(&[g(1.0), g(0.0)], &[1.0, 4.0], &[20, 20], 1.0, 0.5).unwrap();
        assert_eq!(n[1], 20);
        assert!(matches!(
            allocate_samples(&[g(1.0)], &[0.0], &[0], 1.0, 0.5),
            Err(Error::ZeroCost(0))
        ));
    }

    #[test]
    fn allocation_takes_pointwise_maximum() {
        let v0 = GridFunction::new(0, vec![1.0, 0.01]);
        let v1 = GridFunction::new(0, vec![0.01, 1.0]);
        let n = allocate_samples(&[v0.clone(), v1.clone()], &[1.0, 1.0], &[0, 0], 1.0, 0.5).unwrap();
        for x in 0..2 {
            let err = v0.values[x] / n[0] as f64 + v1.values[x] / n[1] as f64;
            assert!(err <= 0.5);
        }
    }

    #[test]
    fn rho_fit_examples() {
        let f = estimate_rho_bias(&[(1, 0.4), (2, 0.1)]).unwrap();
        assert!((f.rho - 2.0).abs() < 1e-14);
        assert!((f.bias - 0.1 / 3.0).abs() < 1e-15);
        assert_eq!(bias_bound(1.0, 0.1), 0.1);
        assert!(estimate_rho_bias(&[(1, 0.4)]).is_none());
        let flat = estimate_rho_bias(&[(1, 0.1), (2, 0.2)]).unwrap();
        assert!(!flat.decaying());
        assert!(flat.bias.is_infinite());
    }

    #[test]
    fn lag_covariances_from_samples() {
        // alternating samples: lag-1 covariance -1, lag-2 covariance +1
        let samples: Vec<Vec<f64>> = (0..6).map(|j| vec![if j % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let s = LevelStats::from_samples(0, &samples, 1.0).unwrap();
        assert_eq!(s.mean.values[0], 0.0);
        assert!((s.variance.values[0] - 6.0 / 5.0).abs() < 1e-15);
        assert_eq!(s.lag_cov[0].values[0], -1.0);
        assert_eq!(s.lag_cov[1].values[0], 1.0);
    }

    #[test]
    fn shifted_estimator_gradient_two_samples() {
        let x = [1.0, 3.0];
        assert_eq!(v_hat_1_gradient(&x), vec![-4.0, 4.0]);
        // finite difference of v_hat_1 under the 1/n-weighted inner product
        let h = 1e-6;
        for j in 0..2 {
            let mut p = x;
            let mut m = x;
            p[j] += h;
            m[j] -= h;
            let fd = (v_hat_1(&p) - v_hat_1(&m)) / (2.0 * h);
            assert!((fd * 2.0 - v_hat_1_gradient(&x)[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn estimators_agree_on_constant_data() {
        let x = [2.0; 7];
        assert_eq!(v_hat_1(&x), 0.0);
        assert_eq!(biased_variance(&x), 0.0);
        assert_eq!(v_hat_two_set(&x, &x), 0.0);
    }
}
