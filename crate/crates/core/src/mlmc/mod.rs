//! Multilevel Monte Carlo estimation of field-valued quantities: reduced
//! gradients, Hessian-vector products and state moments.
//!
//! Each level `l` owns an ordered sample set driven by one base seed. A
//! correction sample is `Q_l(w_j) - P Q_{l-1}(w_j)`, with both terms computed
//! from the same realization. With the default shifted sampler, the
//! variance-penalty part of sample `j` uses the circular neighbours `j - 1`
//! and `j + 1`, so consecutive samples share state solves.

mod frozen;
mod stats;

use std::rc::Rc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use frozen::{FrozenLevel, FrozenSampleSet, SamplerKind, SeedSequence};
pub use stats::{
    allocate_samples, average_cost, bias_bound, biased_variance, corrected_variance, estimate_rho_bias,
    robust_cost, v_hat_1, v_hat_1_gradient, v_hat_two_set, LevelStats, RhoFit, LAGS,
};

use crate::error::{invalid, Result};
use crate::field::{RandomField, SampleKey};
use crate::grid::{GridFunction, GridHierarchy};
use crate::pde::{ProblemSpec, Realization};

/// Bit marking the partner key of a two-set sample.
pub const PARTNER_BIT: u64 = 1 << 63;

/// How the total error is tested against `eps^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingRule {
    /// `|sum_l V_l / n_l|_inf + bias^2 <= eps^2`.
    #[default]
    InfNorm,
    /// The stochastic term is replaced by its budget `theta * eps^2`.
    Budget,
}

/// Number of warm-up samples taken on a newly opened level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WarmUp {
    /// Same count on every level.
    Flat(usize),
    /// `floor + 2^(top - level)`, reaching `floor + 1` from level `top` on.
    Geometric { floor: usize, top: u32 },
}

impl Default for WarmUp {
    /// 140, 76, 44, 28, 20, 16 on levels 0 to 5.
    fn default() -> Self {
        WarmUp::Geometric { floor: 12, top: 7 }
    }
}

impl WarmUp {
    pub fn count(self, level: usize) -> usize {
        match self {
            WarmUp::Flat(n) => n,
            WarmUp::Geometric { floor, top } => {
                let e = (top as usize).saturating_sub(level).min(40);
                floor + (1usize << e)
            }
        }
    }

    fn minimum(self) -> usize {
        match self {
            WarmUp::Flat(n) => n,
            WarmUp::Geometric { floor, .. } => floor + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Warm-up samples on a newly opened level.
    pub n_init: WarmUp,
    /// Fraction of `eps^2` given to the stochastic error.
    pub theta_split: f64,
    /// Floor factor in the correlated-variance correction.
    pub variance_floor: f64,
    pub sampler: SamplerKind,
    pub stopping: StoppingRule,
    /// Cost exponent of one sample in the cells per axis.
    pub kappa: f64,
    /// Weak-error rate assumed when only one correction level exists.
    pub rho_prior: f64,
    /// Allocate/top-up passes per level before moving on.
    pub max_allocation_rounds: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            n_init: WarmUp::default(),
            theta_split: 0.5,
            variance_floor: 0.5,
            sampler: SamplerKind::Shifted,
            stopping: StoppingRule::InfNorm,
            kappa: 2.26,
            rho_prior: 2.0,
            max_allocation_rounds: 8,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init.minimum() < 2 {
            return Err(invalid("n_init", "at least 2 warm-up samples are needed"));
        }
        if !(self.theta_split > 0.0 && self.theta_split <= 1.0) {
            return Err(invalid("theta_split", "must lie in (0, 1]"));
        }
        if !(self.variance_floor >= 0.0 && self.variance_floor <= 1.0) {
            return Err(invalid("variance_floor", "must lie in [0, 1]"));
        }
        if !(self.kappa > 0.0) {
            return Err(invalid("kappa", "must be positive"));
        }
        if !(self.rho_prior > 0.0) {
            return Err(invalid("rho_prior", "must be positive"));
        }
        if self.max_allocation_rounds == 0 {
            return Err(invalid("max_allocation_rounds", "must be at least 1"));
        }
        Ok(())
    }
}

/// Field-valued quantities the estimator can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QoiKind {
    Gradient,
    State,
    StateSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Gradient,
    Hessian,
    State,
    StateSquared,
    Cost,
}

impl From<QoiKind> for Kind {
    fn from(q: QoiKind) -> Self {
        match q {
            QoiKind::Gradient => Kind::Gradient,
            QoiKind::State => Kind::State,
            QoiKind::StateSquared => Kind::StateSquared,
        }
    }
}

struct Query<'a> {
    kind: Kind,
    /// Control restricted to every level.
    u: &'a [GridFunction],
    du: Option<&'a [GridFunction]>,
}

/// Result of one estimator run or replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Estimate on the return level, including any deterministic term.
    pub estimate: GridFunction,
    /// Level means transferred to the return level.
    pub contributions: Vec<GridFunction>,
    /// Deterministic part added once (`2 alpha u` or `2 alpha du`).
    pub deterministic: Option<GridFunction>,
    pub counts: Vec<usize>,
    /// `|sum_l V_l / n_l|_inf` with corrected variances.
    pub stochastic_error: f64,
    pub bias: f64,
    /// `sqrt(stochastic_error + bias^2)`.
    pub rmse: f64,
    pub rho: Option<f64>,
    pub converged: bool,
    pub frozen: FrozenSampleSet,
    #[serde(skip)]
    pub stats: Vec<LevelStats>,
    /// Correction samples evaluated, weighted by `m_l^d + m_{l-1}^d`.
    pub dof_cost: f64,
    pub wall_s: f64,
}

struct Node {
    real: Realization,
    dy: Option<Vec<f64>>,
}

/// Evaluates correction samples for one problem.
pub struct Estimator {
    spec: ProblemSpec,
    field: RandomField,
    config: EstimatorConfig,
    targets: Vec<GridFunction>,
    masks: Vec<GridFunction>,
}

impl Estimator {
    pub fn new(spec: ProblemSpec, config: EstimatorConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let field = RandomField::new(spec.covariance, spec.hierarchy)?;
        let levels = 0..=spec.hierarchy.max_level;
        let targets = levels.clone().map(|l| spec.target_on(l)).collect();
        let masks = levels.map(|l| spec.mask_on(l)).collect();
        Ok(Estimator {
            spec,
            field,
            config,
            targets,
            masks,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn hierarchy(&self) -> &GridHierarchy {
        &self.spec.hierarchy
    }

    pub fn field(&self) -> &RandomField {
        &self.field
    }

    pub fn return_level(&self) -> usize {
        self.spec.hierarchy.max_level
    }

    /// Model cost of one correction sample at `level`.
    pub fn level_cost(&self, level: usize) -> f64 {
        let h = &self.spec.hierarchy;
        let k = self.config.kappa;
        let fine = (h.cells_per_axis(level) as f64).powf(k);
        if level == 0 {
            fine
        } else {
            fine + (h.cells_per_axis(level - 1) as f64).powf(k)
        }
    }

    fn level_dofs(&self, level: usize) -> f64 {
        let h = &self.spec.hierarchy;
        let coarse = if level == 0 { 0 } else { h.len(level - 1) };
        (h.len(level) + coarse) as f64
    }

    fn controls(&self, u: &GridFunction) -> Result<Vec<GridFunction>> {
        let h = &self.spec.hierarchy;
        if u.level != h.max_level || u.len() != h.len(h.max_level) {
            return Err(invalid("u", "control must live on the return level"));
        }
        let mut out = vec![u.clone()];
        for _ in 0..h.max_level {
            let next = h.restrict(out.last().expect("nonempty"))?;
            out.push(next);
        }
        out.reverse();
        Ok(out)
    }

    fn uses_neighbours(&self, kind: Kind) -> bool {
        self.spec.gamma > 0.0 && matches!(kind, Kind::Gradient | Kind::Hessian | Kind::Cost)
    }

    fn node(&self, level: usize, key: SampleKey, q: &Query) -> Result<Node> {
        let k = self.field.conductivity(key, level)?;
        let real = self.spec.realize(&k, &q.u[level])?;
        let dy = match (q.kind, q.du) {
            (Kind::Hessian, Some(du)) => Some(real.linearized_state(&self.masks[level].values, &du[level].values)?),
            _ => None,
        };
        Ok(Node { real, dy })
    }

    /// `gamma * (2 v - v_next - v_prev)`.
    fn neighbour_term(&self, cur: &[f64], prev: &[f64], next: &[f64]) -> Vec<f64> {
        let g = self.spec.gamma;
        (0..cur.len())
            .map(|i| g * (2.0 * cur[i] - next[i] - prev[i]))
            .collect()
    }

    fn adjoint(&self, level: usize, cur: &Node, nb: Option<(&Node, &Node)>) -> Result<Vec<f64>> {
        let y = cur.real.y();
        let yd = &self.targets[level].values;
        let mut rhs: Vec<f64> = y.iter().zip(yd).map(|(a, b)| 2.0 * (a - b)).collect();
        if let Some((p, n)) = nb {
            let t = self.neighbour_term(y, p.real.y(), n.real.y());
            rhs.iter_mut().zip(t).for_each(|(r, t)| *r += t);
        }
        cur.real.adjoint(&rhs)
    }

    /// Quantity of interest for the centre node given its neighbours.
    fn centre(&self, level: usize, q: &Query, cur: &Node, nb: Option<(&Node, &Node)>) -> Result<Vec<f64>> {
        let beta = &self.masks[level].values;
        let times_beta = |v: Vec<f64>| -> Vec<f64> { v.iter().zip(beta).map(|(a, b)| a * b).collect() };
        match q.kind {
            Kind::Gradient => Ok(times_beta(self.adjoint(level, cur, nb)?)),
            Kind::Hessian => {
                let p = if self.spec.reaction.is_affine() {
                    Vec::new()
                } else {
                    self.adjoint(level, cur, nb)?
                };
                let dy = cur.dy.as_ref().expect("hessian nodes carry dy");
                let extra = nb.map(|(pn, nn)| {
                    self.neighbour_term(dy, pn.dy.as_ref().expect("dy"), nn.dy.as_ref().expect("dy"))
                });
                Ok(times_beta(cur.real.hessian_adjoint(&p, dy, extra.as_deref())?))
            }
            Kind::State => Ok(cur.real.y().to_vec()),
            Kind::StateSquared => Ok(cur.real.y().iter().map(|v| v * v).collect()),
            Kind::Cost => {
                let y = cur.real.y();
                let yd = &self.targets[level].values;
                let n = y.len() as f64;
                let mut c = y.iter().zip(yd).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
                if let Some((p, _)) = nb {
                    let d = y.iter().zip(p.real.y()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
                    c += 0.5 * self.spec.gamma * d;
                }
                Ok(vec![c])
            }
        }
    }

    /// Level-`level` quantities for sample indices `idx` (ascending) of a set
    /// of size `n`, reusing neighbour nodes along consecutive indices.
    fn level_values(&self, level: usize, seed: u64, n: usize, idx: &[usize], q: &Query) -> Result<Vec<Vec<f64>>> {
        let chain = self.uses_neighbours(q.kind);
        let two_set = self.config.sampler == SamplerKind::TwoSet;
        let key = |j: u64| SampleKey::new(seed, j);
        let mut cache: Vec<(u64, Rc<Node>)> = Vec::with_capacity(4);
        let get = |j: u64, cache: &mut Vec<(u64, Rc<Node>)>| -> Result<Rc<Node>> {
            if let Some((_, node)) = cache.iter().find(|(k, _)| *k == j) {
                return Ok(node.clone());
            }
            let node = Rc::new(self.node(level, key(j), q)?);
            if cache.len() == 4 {
                cache.remove(0);
            }
            cache.push((j, node.clone()));
            Ok(node)
        };
        let mut out = Vec::with_capacity(idx.len());
        for &j in idx {
            let cur = get(j as u64, &mut cache)?;
            let value = if !chain {
                self.centre(level, q, &cur, None)?
            } else if two_set {
                let partner = Rc::new(self.node(level, key(j as u64 | PARTNER_BIT), q)?);
                self.centre(level, q, &cur, Some((&partner, &partner)))?
            } else {
                let prev = get(((j + n - 1) % n) as u64, &mut cache)?;
                let next = get(((j + 1) % n) as u64, &mut cache)?;
                self.centre(level, q, &cur, Some((&prev, &next)))?
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Correction samples `Y_l` at the given indices of a level-`level` set
    /// of size `n`.
    fn corrections(&self, level: usize, seed: u64, n: usize, idx: &[usize], q: &Query) -> Result<Vec<Vec<f64>>> {
        if idx.is_empty() {
            return Ok(Vec::new());
        }
        let threads = rayon::current_num_threads().max(1);
        let chunk = if threads == 1 {
            idx.len()
        } else {
            idx.len().div_ceil(4 * threads).max(8)
        };
        let parts: Vec<Vec<Vec<f64>>> = idx
            .par_chunks(chunk)
            .map(|part| -> Result<Vec<Vec<f64>>> {
                let fine = self.level_values(level, seed, n, part, q)?;
                if level == 0 {
                    return Ok(fine);
                }
                let coarse = self.level_values(level - 1, seed, n, part, q)?;
                fine.into_iter()
                    .zip(coarse)
                    .map(|(f, c)| {
                        if q.kind == Kind::Cost {
                            return Ok(vec![f[0] - c[0]]);
                        }
                        let up = self.spec.hierarchy.prolong(&GridFunction::new(level - 1, c))?;
                        Ok(f.iter().zip(&up.values).map(|(a, b)| a - b).collect())
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn level_stats(&self, level: usize, samples: &[Vec<f64>]) -> Result<LevelStats> {
        LevelStats::from_samples(level, samples, self.level_cost(level))
    }

    fn to_return_level(&self, v: &GridFunction) -> Result<GridFunction> {
        self.spec.hierarchy.transfer(v, self.return_level())
    }

    /// Corrected variances on the return level.
    fn corrected_on_return(&self, stats: &[LevelStats]) -> Result<Vec<GridFunction>> {
        stats
            .iter()
            .map(|s| self.to_return_level(&corrected_variance(s, self.config.variance_floor)?))
            .collect()
    }

    fn stochastic_term(&self, corrected: &[GridFunction], counts: &[usize]) -> f64 {
        let len = corrected[0].len();
        (0..len)
            .map(|x| {
                corrected
                    .iter()
                    .zip(counts)
                    .map(|(v, &n)| v.values[x] / n as f64)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Bias bound and fitted rate at finest level `stats.len() - 1`; `None`
    /// means no estimate is available yet.
    fn bias(&self, stats: &[LevelStats]) -> Option<(f64, Option<f64>)> {
        let finest = stats.len() - 1;
        if self.return_level() == 0 {
            return Some((0.0, None));
        }
        let norms: Vec<(usize, f64)> = stats[1..].iter().map(|s| (s.level, s.mean.inf_norm())).collect();
        match norms.len() {
            0 => None,
            1 if self.return_level() == 1 => {
                let rho = self.config.rho_prior;
                Some((bias_bound(rho, norms[0].1), Some(rho)))
            }
            1 => None,
            _ => {
                let fit = estimate_rho_bias(&norms)?;
                debug_assert_eq!(norms.last().map(|n| n.0), Some(finest));
                Some((fit.bias, Some(fit.rho)))
            }
        }
    }

    fn total_ok(&self, stochastic: f64, bias: f64, eps: f64) -> bool {
        let s = match self.config.stopping {
            StoppingRule::InfNorm => stochastic,
            StoppingRule::Budget => self.config.theta_split * eps * eps,
        };
        s + bias * bias <= eps * eps
    }

    /// Algorithm-1 estimate of the reduced gradient at `u` with fresh samples.
    pub fn gradient(&self, u: &GridFunction, eps: f64, seeds: &mut SeedSequence) -> Result<EstimateReport> {
        self.run(QoiKind::Gradient, u, eps, seeds)
    }

    /// Adaptive multilevel estimate of `kind` at control `u` to RMSE `eps`.
    pub fn run(&self, kind: QoiKind, u: &GridFunction, eps: f64, seeds: &mut SeedSequence) -> Result<EstimateReport> {
        if !(eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        let start = Instant::now();
        let controls = self.controls(u)?;
        let q = Query {
            kind: kind.into(),
            u: &controls,
            du: None,
        };
        let chain = self.uses_neighbours(q.kind) && self.config.sampler == SamplerKind::Shifted;
        let lbar = self.return_level();
        let mut seeds_used: Vec<u64> = Vec::new();
        let mut samples: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut walls: Vec<f64> = Vec::new();
        let mut dof_cost = 0.0;
        let mut converged = false;
        let mut last = (f64::INFINITY, f64::INFINITY, None);
        for level in 0..=lbar {
            let seed = seeds.next_seed();
            let t = Instant::now();
            let n0 = self.config.n_init.count(level);
            let idx: Vec<usize> = (0..n0).collect();
            samples.push(self.corrections(level, seed, n0, &idx, &q)?);
            walls.push(t.elapsed().as_secs_f64());
            dof_cost += n0 as f64 * self.level_dofs(level);
            seeds_used.push(seed);

            for _ in 0..self.config.max_allocation_rounds {
                let stats: Vec<LevelStats> = samples
                    .iter()
                    .enumerate()
                    .map(|(l, s)| self.level_stats(l, s))
                    .collect::<Result<_>>()?;
                let corrected = self.corrected_on_return(&stats)?;
                let costs: Vec<f64> = (0..=level).map(|l| self.level_cost(l)).collect();
                let taken: Vec<usize> = samples.iter().map(Vec::len).collect();
                let want = allocate_samples(&corrected, &costs, &taken, eps, self.config.theta_split)?;
                if want == taken {
                    break;
                }
                for l in 0..=level {
                    let (old, new) = (taken[l], want[l]);
                    if new == old {
                        continue;
                    }
                    let t = Instant::now();
                    let mut idx: Vec<usize> = Vec::new();
                    if chain {
                        // the wrap neighbours of the first and last old samples change
                        idx.push(0);
                        if old > 1 {
                            idx.push(old - 1);
                        }
                    }
                    idx.extend(old..new);
                    let vals = self.corrections(l, seeds_used[l], new, &idx, &q)?;
                    dof_cost += idx.len() as f64 * self.level_dofs(l);
                    let set = &mut samples[l];
                    let mut it = idx.iter().zip(vals);
                    for (&j, v) in it.by_ref() {
                        if j < old {
                            set[j] = v;
                        } else {
                            set.push(v);
                        }
                    }
                    walls[l] += t.elapsed().as_secs_f64();
                }
            }

            let stats: Vec<LevelStats> = samples
                .iter()
                .enumerate()
                .map(|(l, s)| self.level_stats(l, s))
                .collect::<Result<_>>()?;
            let corrected = self.corrected_on_return(&stats)?;
            let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
            let stochastic = self.stochastic_term(&corrected, &counts);
            if let Some((bias, rho)) = self.bias(&stats) {
                last = (stochastic, bias, rho);
                if self.total_ok(stochastic, bias, eps) {
                    converged = true;
                    break;
                }
            } else {
                last = (stochastic, f64::INFINITY, None);
            }
        }
        let (stochastic, bias, rho) = last;
        let mut stats: Vec<LevelStats> = samples
            .iter()
            .enumerate()
            .map(|(l, s)| self.level_stats(l, s))
            .collect::<Result<_>>()?;
        for (s, (w, set)) in stats.iter_mut().zip(walls.iter().zip(&samples)) {
            s.wall_per_sample = w / set.len() as f64;
        }
        let frozen = FrozenSampleSet {
            levels: seeds_used
                .iter()
                .zip(&samples)
                .enumerate()
                .map(|(level, (&base_seed, s))| FrozenLevel {
                    level,
                    base_seed,
                    count: s.len(),
                })
                .collect(),
            epsilon: eps,
            return_level: lbar,
            sampler: self.config.sampler,
            stats: stats.clone(),
        };
        self.assemble_report(q.kind, u, None, stats, frozen, stochastic, bias, rho, converged, dof_cost, start)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_report(
        &self,
        kind: Kind,
        u: &GridFunction,
        du: Option<&GridFunction>,
        stats: Vec<LevelStats>,
        frozen: FrozenSampleSet,
        stochastic: f64,
        bias: f64,
        rho: Option<f64>,
        converged: bool,
        dof_cost: f64,
        start: Instant,
    ) -> Result<EstimateReport> {
        let contributions: Vec<GridFunction> = stats
            .iter()
            .map(|s| self.to_return_level(&s.mean))
            .collect::<Result<_>>()?;
        let mut estimate = self.spec.hierarchy.zeros(self.return_level());
        for c in &contributions {
            estimate.add_assign(c)?;
        }
        let deterministic = match kind {
            Kind::Gradient => Some(u.scaled(2.0 * self.spec.alpha)),
            Kind::Hessian => du.map(|d| d.scaled(2.0 * self.spec.alpha)),
            _ => None,
        };
        if let Some(d) = &deterministic {
            estimate.add_assign(d)?;
        }
        Ok(EstimateReport {
            estimate,
            contributions,
            deterministic,
            counts: frozen.counts(),
            stochastic_error: stochastic,
            bias,
            rmse: (stochastic + bias * bias).sqrt(),
            rho,
            converged,
            frozen,
            stats,
            dof_cost,
            wall_s: start.elapsed().as_secs_f64(),
        })
    }

    fn replay(&self, f: &FrozenSampleSet, kind: Kind, u: &GridFunction, du: Option<&GridFunction>) -> Result<EstimateReport> {
        f.validate()?;
        if f.return_level != self.return_level() {
            return Err(invalid("frozen set", "return level does not match the hierarchy"));
        }
        let start = Instant::now();
        let controls = self.controls(u)?;
        let dcontrols = du.map(|d| self.controls(d)).transpose()?;
        let q = Query {
            kind,
            u: &controls,
            du: dcontrols.as_deref(),
        };
        let mut stats = Vec::with_capacity(f.levels.len());
        let mut dof_cost = 0.0;
        for lv in &f.levels {
            let t = Instant::now();
            let idx: Vec<usize> = (0..lv.count).collect();
            let s = self.corrections(lv.level, lv.base_seed, lv.count, &idx, &q)?;
            dof_cost += lv.count as f64 * self.level_dofs(lv.level);
            let mut st = self.level_stats(lv.level, &s)?;
            st.wall_per_sample = t.elapsed().as_secs_f64() / lv.count as f64;
            stats.push(st);
        }
        let corrected = self.corrected_on_return(&stats)?;
        let stochastic = self.stochastic_term(&corrected, &f.counts());
        let (bias, rho) = self.bias(&stats).unwrap_or((f64::INFINITY, None));
        let converged = self.total_ok(stochastic, bias, f.epsilon);
        let mut frozen = f.clone();
        frozen.stats = stats.clone();
        self.assemble_report(kind, u, du, stats, frozen, stochastic, bias, rho, converged, dof_cost, start)
    }

    /// Gradient recomputed on the frozen samples `f`; `rmse` is the expected
    /// error at the fixed counts.
    pub fn replay_gradient(&self, f: &FrozenSampleSet, u: &GridFunction) -> Result<EstimateReport> {
        self.replay(f, Kind::Gradient, u, None)
    }

    /// Hessian-vector product `H(u) du` on the frozen samples `f`.
    pub fn replay_hessian_vector(&self, f: &FrozenSampleSet, u: &GridFunction, du: &GridFunction) -> Result<EstimateReport> {
        self.replay(f, Kind::Hessian, u, Some(du))
    }

    /// Sampled cost whose exact gradient is [`replay_gradient`](Self::replay_gradient).
    pub fn evaluate_cost(&self, f: &FrozenSampleSet, u: &GridFunction) -> Result<f64> {
        f.validate()?;
        let controls = self.controls(u)?;
        let q = Query {
            kind: Kind::Cost,
            u: &controls,
            du: None,
        };
        let mut total = self.spec.alpha * u.inner_product(u)?;
        for lv in &f.levels {
            let idx: Vec<usize> = (0..lv.count).collect();
            let s = self.corrections(lv.level, lv.base_seed, lv.count, &idx, &q)?;
            total += s.iter().map(|v| v[0]).sum::<f64>() / lv.count as f64;
        }
        Ok(total)
    }

    /// States of the realizations `0..count` of one frozen level at
    /// `level`, for control `u` on the return level.
    pub fn ensemble_states(&self, level: usize, base_seed: u64, count: usize, u: &GridFunction) -> Result<Vec<Vec<f64>>> {
        let controls = self.controls(u)?;
        (0..count)
            .map(|j| {
                let k = self.field.conductivity(SampleKey::new(base_seed, j as u64), level)?;
                Ok(self.spec.realize(&k, &controls[level])?.state.y.values)
            })
            .collect()
    }

    fn single_query(&self, level: usize, u_level: &GridFunction) -> Result<Vec<GridFunction>> {
        let h = &self.spec.hierarchy;
        h.check_level(level)?;
        if u_level.level != level {
            return Err(invalid("u", "control must live on the sampled level"));
        }
        let mut us: Vec<GridFunction> = (0..=h.max_level).map(|l| h.zeros(l)).collect();
        us[level] = u_level.clone();
        Ok(us)
    }

    /// One gradient sample `beta p_j` at `level` for control `u_level` on
    /// that level, from the keys `[prev, cur, next]` of an ordered set.
    pub fn sample_gradient_qoi(&self, level: usize, u_level: &GridFunction, keys: [SampleKey; 3]) -> Result<GridFunction> {
        let us = self.single_query(level, u_level)?;
        let q = Query {
            kind: Kind::Gradient,
            u: &us,
            du: None,
        };
        let nodes = keys
            .iter()
            .map(|&k| self.node(level, k, &q))
            .collect::<Result<Vec<_>>>()?;
        let nb = self.uses_neighbours(q.kind).then_some((&nodes[0], &nodes[2]));
        Ok(GridFunction::new(level, self.centre(level, &q, &nodes[1], nb)?))
    }

    /// Two-set gradient sample: the variance term pairs `key` with the
    /// independent partner `paired`.
    pub fn sample_gradient_qoi_twoset(
        &self,
        level: usize,
        u_level: &GridFunction,
        key: SampleKey,
        paired: SampleKey,
    ) -> Result<GridFunction> {
        let us = self.single_query(level, u_level)?;
        let q = Query {
            kind: Kind::Gradient,
            u: &us,
            du: None,
        };
        let cur = self.node(level, key, &q)?;
        let partner = self.node(level, paired, &q)?;
        let nb = self.uses_neighbours(q.kind).then_some((&partner, &partner));
        Ok(GridFunction::new(level, self.centre(level, &q, &cur, nb)?))
    }

    /// Correction sample `Q_l - P Q_{l-1}` for control `u` on the return
    /// level and chain keys `[prev, cur, next]`.
    pub fn sample_correction(&self, level: usize, u: &GridFunction, keys: [SampleKey; 3]) -> Result<GridFunction> {
        let controls = self.controls(u)?;
        let fine = self.sample_gradient_qoi(level, &controls[level], keys)?;
        if level == 0 {
            return Ok(fine);
        }
        let coarse = self.sample_gradient_qoi(level - 1, &controls[level - 1], keys)?;
        fine.axpy(-1.0, &self.spec.hierarchy.prolong(&coarse)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CovarianceSpec;
    use crate::pde::{FieldSpec, LinearSolver, Reaction};

    fn spec(sigma2: f64, gamma: f64, max_level: usize) -> ProblemSpec {
        ProblemSpec {
            alpha: 1e-4,
            gamma,
            target: FieldSpec::Box {
                lo: 0.25,
                hi: 0.75,
                value: 1.0,
            },
            control_mask: FieldSpec::Constant { value: 1.0 },
            reaction: Reaction::None,
            covariance: CovarianceSpec {
                sigma2,
                lambda: 0.3,
                dim: 2,
                n_kl: 20,
            },
            hierarchy: GridHierarchy::new(4, max_level, 2).unwrap(),
            solver: LinearSolver::Cholesky,
        }
    }

    #[test]
    fn default_warm_up_schedule() {
        let w = WarmUp::default();
        let counts: Vec<usize> = (0..6).map(|l| w.count(l)).collect();
        assert_eq!(counts, vec![140, 76, 44, 28, 20, 16]);
        assert_eq!(w.count(12), 13);
        assert_eq!(WarmUp::Flat(20).count(3), 20);
    }

    #[test]
    fn gamma_zero_ignores_neighbours() {
        let e = Estimator::new(spec(0.3, 0.0, 1), EstimatorConfig::default()).unwrap();
        let u = e.hierarchy().constant(1, 0.5);
        let k = |j| SampleKey::new(9, j);
        let a = e.sample_gradient_qoi(1, &u, [k(0), k(1), k(2)]).unwrap();
        let b = e.sample_gradient_qoi(1, &u, [k(7), k(1), k(8)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_field_has_zero_variance() {
        let e = Estimator::new(spec(0.0, 1.0, 2), EstimatorConfig::default()).unwrap();
        let u = e.hierarchy().constant(2, 1.0);
        let mut seeds = SeedSequence::new(1);
        let r = e.gradient(&u, 1e-3, &mut seeds).unwrap();
        assert_eq!(r.stochastic_error, 0.0);
        for s in &r.stats {
            assert!(s.variance.values.iter().all(|&v| v == 0.0));
        }
        for (l, &n) in r.counts.iter().enumerate() {
            assert_eq!(n, WarmUp::default().count(l));
        }
    }

    #[test]
    fn telescoping_with_deterministic_field() {
        let e = Estimator::new(spec(0.0, 1.0, 2), EstimatorConfig::default()).unwrap();
        let h = *e.hierarchy();
        let u = h.sample_fn(2, |x| x[0] - x[1]);
        let mut seeds = SeedSequence::new(3);
        let r = e.gradient(&u, 1e-8, &mut seeds).unwrap();
        let finest = r.frozen.finest_level();
        let controls = e.controls(&u).unwrap();
        let key = SampleKey::new(0, 0);
        let g = e.sample_gradient_qoi(finest, &controls[finest], [key; 3]).unwrap();
        let expect = h.transfer(&g, 2).unwrap().axpy(2.0 * e.spec().alpha, &u).unwrap();
        for (a, b) in r.estimate.values.iter().zip(&expect.values) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn replay_reproduces_run() {
        let e = Estimator::new(spec(0.3, 1.0, 1), EstimatorConfig::default()).unwrap();
        let u = e.hierarchy().constant(1, 2.0);
        let mut seeds = SeedSequence::new(5);
        let r = e.gradient(&u, 5e-3, &mut seeds).unwrap();
        let a = e.replay_gradient(&r.frozen, &u).unwrap();
        let b = e.replay_gradient(&r.frozen, &u).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.estimate, r.estimate);
    }

    #[test]
    fn plain_monte_carlo_on_single_level() {
        let e = Estimator::new(spec(0.3, 1.0, 0), EstimatorConfig::default()).unwrap();
        let u = e.hierarchy().constant(0, 1.0);
        let mut seeds = SeedSequence::new(8);
        let r = e.gradient(&u, 2e-3, &mut seeds).unwrap();
        assert_eq!(r.counts.len(), 1);
        assert!(r.converged);
        assert_eq!(r.bias, 0.0);
        assert!(r.stochastic_error <= 0.5 * 4e-6 * (1.0 + 1e-12));
    }

    #[test]
    fn zero_control_cost_is_target_norm() {
        let mut s = spec(0.3, 1.0, 1);
        s.alpha = 0.0;
        let e = Estimator::new(s, EstimatorConfig::default()).unwrap();
        let u = e.hierarchy().zeros(1);
        let mut seeds = SeedSequence::new(2);
        let r = e.gradient(&u, 1e-2, &mut seeds).unwrap();
        let j = e.evaluate_cost(&r.frozen, &u).unwrap();
        let yd = e.spec().target_on(1);
        let expect = yd.inner_product(&yd).unwrap();
        // level-0 and level-1 target norms differ; telescoping leaves the finest one
        let finest = r.frozen.finest_level();
        let yd_f = e.spec().target_on(finest);
        assert!((j - yd_f.inner_product(&yd_f).unwrap()).abs() < 1e-14);
        assert!(expect > 0.0);
    }
}
