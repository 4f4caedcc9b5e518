//! Entropic optimal transport for balanced final-level code assignment.
//!
//! The solver works on dual potentials `f`, `g` in the log domain, so the
//! plan `pi_dk = exp(f_d + g_k - C_dk / eps)` never needs the kernel
//! `exp(-C / eps)` itself and cannot overflow for finite costs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::Codebook;

/// Default stopping threshold on the maximum marginal violation.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Solver and rounding settings shared by training and final assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornSettings {
    pub enabled: bool,
    pub epsilon: f64,
    pub iters: usize,
    /// Per-code capacity for hard rounding; `None` means `ceil(n / K)`.
    pub capacity: Option<usize>,
    /// Divide costs by their maximum before applying epsilon.
    pub normalize_cost: bool,
    /// Balance every level instead of only the last one.
    pub all_levels: bool,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 0.01,
            iters: 50,
            capacity: None,
            normalize_cost: true,
            all_levels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    /// Row-major `n x k` cost matrix.
    pub cost: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub tolerance: f64,
}

impl TransportProblem {
    /// Uniform marginals with the default tolerance.
    pub fn uniform(cost: Vec<f64>, n: usize, k: usize, epsilon: f64, max_iters: usize) -> Self {
        Self {
            cost,
            n,
            k,
            epsilon,
            max_iters,
            row_marginals: vec![1.0 / n as f64; n],
            col_marginals: vec![1.0 / k as f64; k],
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("transport problem has an empty side".into()));
        }
        if self.cost.len() != self.n * self.k {
            return Err(Error::Config(format!(
                "cost has {} entries, expected {}x{}",
                self.cost.len(),
                self.n,
                self.k
            )));
        }
        if self.row_marginals.len() != self.n || self.col_marginals.len() != self.k {
            return Err(Error::Config("marginal lengths do not match cost".into()));
        }
        for (name, m) in [("row", &self.row_marginals), ("column", &self.col_marginals)] {
            if m.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("{name} marginals must be finite and >= 0")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} marginals sum to {s}, not 1")));
            }
        }
        if self.cost.iter().any(|c| c.is_nan() || *c < 0.0) {
            return Err(Error::Config("cost entries must be >= 0".into()));
        }
        for d in 0..self.n {
            if self.cost[d * self.k..(d + 1) * self.k]
                .iter()
                .all(|c| c.is_infinite())
            {
                return Err(Error::Config(format!("cost row {d} is entirely infinite")));
            }
        }
        for k in 0..self.k {
            if (0..self.n).all(|d| self.cost[d * self.k + k].is_infinite()) {
                return Err(Error::Config(format!("cost column {k} is entirely infinite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub n: usize,
    pub k: usize,
    /// Row-major plan entries.
    pub plan: Vec<f64>,
    /// Row potentials, log scale.
    pub f: Vec<f64>,
    /// Column potentials, log scale.
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub row_err: f64,
    pub col_err: f64,
    pub iters_run: usize,
    /// L1 marginal violation after each iteration.
    pub violation_history: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, d: usize, k: usize) -> f64 {
        self.plan[d * self.k + k]
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.plan[d * self.k..(d + 1) * self.k]
    }

    pub fn max_violation(&self) -> f64 {
        self.row_err.max(self.col_err)
    }

    /// Per-row argmax of the plan, ties to the smaller column. Ranks on
    /// `g_k - C_dk / eps`, which orders the row exactly as `pi` does but
    /// stays informative where `pi` underflows.
    pub fn argmax_rows(&self, cost: &[f64]) -> Vec<usize> {
        (0..self.n)
            .map(|d| {
                let mut best = 0;
                let mut best_s = f64::NEG_INFINITY;
                for k in 0..self.k {
                    let s = self.g[k] - cost[d * self.k + k] / self.epsilon;
                    if s > best_s {
                        best_s = s;
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Alternating row/column scaling toward the marginals. One iteration is a
/// row update followed by a column update, after which the column marginals
/// hold exactly and the row violation is measured.
pub fn sinkhorn_plan(problem: &TransportProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let (n, k) = (problem.n, problem.k);
    let neg_c: Vec<f64> = problem.cost.iter().map(|c| -c / problem.epsilon).collect();
    let log_a: Vec<f64> = problem.row_marginals.iter().map(|&x| ln_or_neg_inf(x)).collect();
    let log_b: Vec<f64> = problem.col_marginals.iter().map(|&x| ln_or_neg_inf(x)).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut history = Vec::with_capacity(problem.max_iters);
    let mut iters_run = 0;
    let mut row_err = f64::INFINITY;
    let mut col_max = vec![f64::NEG_INFINITY; k];
    let mut col_sum = vec![0.0; k];

    for _ in 0..problem.max_iters {
        for d in 0..n {
            let row = &neg_c[d * k..(d + 1) * k];
            let lse = log_sum_exp(row.iter().zip(&g).map(|(c, gk)| c + gk));
            f[d] = if log_a[d] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_a[d] - lse
            };
        }

        col_max.fill(f64::NEG_INFINITY);
        for d in 0..n {
            let row = &neg_c[d * k..(d + 1) * k];
            for (m, c) in col_max.iter_mut().zip(row) {
                *m = m.max(f[d] + c);
            }
        }
        col_sum.fill(0.0);
        for d in 0..n {
            let row = &neg_c[d * k..(d + 1) * k];
            for j in 0..k {
                if col_max[j] > f64::NEG_INFINITY {
                    col_sum[j] += (f[d] + row[j] - col_max[j]).exp();
                }
            }
        }
        for j in 0..k {
            let lse = col_max[j] + col_sum[j].ln();
            g[j] = if log_b[j] == f64::NEG_INFINITY || lse == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_b[j] - lse
            };
        }

        let mut l1 = 0.0;
        row_err = 0.0;
        for d in 0..n {
            let row = &neg_c[d * k..(d + 1) * k];
            let mass: f64 = row
                .iter()
                .zip(&g)
                .map(|(c, gk)| (f[d] + c + gk).exp())
                .sum();
            let e = (mass - problem.row_marginals[d]).abs();
            l1 += e;
            row_err = row_err.max(e);
        }
        history.push(l1);
        iters_run += 1;
        if row_err < problem.tolerance {
            break;
        }
    }

    let mut plan = vec![0.0; n * k];
    for d in 0..n {
        for j in 0..k {
            plan[d * k + j] = (f[d] + neg_c[d * k + j] + g[j]).exp();
        }
    }
    let mut col_err: f64 = 0.0;
    for j in 0..k {
        let s: f64 = (0..n).map(|d| plan[d * k + j]).sum();
        col_err = col_err.max((s - problem.col_marginals[j]).abs());
    }
    if iters_run == 0 {
        row_err = (0..n)
            .map(|d| (plan[d * k..(d + 1) * k].iter().sum::<f64>() - problem.row_marginals[d]).abs())
            .fold(0.0, f64::max);
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::Infeasible("sinkhorn produced non-finite plan entries".into()));
    }
    Ok(TransportPlan {
        n,
        k,
        plan,
        f,
        g,
        epsilon: problem.epsilon,
        row_err,
        col_err,
        iters_run,
        violation_history: history,
    })
}

/// Summary of how many items landed on each code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub relative_std: f64,
    pub min: usize,
    pub max: usize,
    pub p5: usize,
    pub p95: usize,
}

impl UniformityReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of codes whose count lies in `[lo, hi]`.
    pub fn fraction_within(&self, lo: usize, hi: usize) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        let inside = self.counts.iter().filter(|&&c| c >= lo && c <= hi).count();
        inside as f64 / self.counts.len() as f64
    }
}

/// Count statistics of `indices` over `k` codes. Percentiles use the
/// nearest-rank rule on the sorted counts.
pub fn uniformity_stats(indices: &[usize], k: usize) -> UniformityReport {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let mean = if k == 0 { 0.0 } else { indices.len() as f64 / k as f64 };
    let var = if k == 0 {
        0.0
    } else {
        counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / k as f64
    };
    let std = var.sqrt();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let rank = |p: f64| -> usize {
        if sorted.is_empty() {
            return 0;
        }
        let r = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[r - 1]
    };
    UniformityReport {
        mean,
        std,
        relative_std: if mean > 0.0 { std / mean } else { 0.0 },
        min: sorted.first().copied().unwrap_or(0),
        max: sorted.last().copied().unwrap_or(0),
        p5: rank(0.05),
        p95: rank(0.95),
        counts,
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major squared-distance cost between residuals and centroids.
pub fn residual_cost(residuals: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<f64> {
    let mut cost = Vec::with_capacity(residuals.len() * centroids.len());
    for r in residuals {
        cost.extend(centroids.iter().map(|v| sq_dist(r, v)));
    }
    cost
}

/// Divide costs by their largest finite entry.
pub fn scale_by_max(cost: &mut [f64]) {
    let hi = cost
        .iter()
        .filter(|c| c.is_finite())
        .fold(0.0f64, |m, &c| m.max(c));
    if hi > 0.0 {
        cost.iter_mut().for_each(|c| *c /= hi);
    }
}

#[derive(Debug, Clone)]
pub struct UniformAssignment {
    /// Capacity-respecting hard assignment.
    pub indices: Vec<usize>,
    pub report: UniformityReport,
    /// Per-row plan argmax before capacity rounding.
    pub soft_indices: Vec<usize>,
    pub soft_report: UniformityReport,
    pub capacity: usize,
    pub plan: TransportPlan,
}

/// Confidence-ordered greedy rounding of a plan under per-column capacity.
///
/// Rows are visited by descending `max_k log pi_dk - log a_d`; each takes its
/// highest-plan column that still has room.
pub fn round_with_capacity(plan: &TransportPlan, cost: &[f64], capacity: usize) -> Result<Vec<usize>> {
    let (n, k) = (plan.n, plan.k);
    if n > k.saturating_mul(capacity) {
        return Err(Error::Infeasible(format!(
            "{n} items cannot fit {k} codes of capacity {capacity}"
        )));
    }
    // confidence: log share of the row's plan mass on its best column
    let score = |d: usize, j: usize| plan.g[j] - cost[d * k + j] / plan.epsilon;
    let mut conf: Vec<(usize, f64)> = (0..n)
        .map(|d| {
            let scores: Vec<f64> = (0..k).map(|j| score(d, j)).collect();
            let lse = log_sum_exp(scores.iter().copied());
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (d, best - lse)
        })
        .collect();
    conf.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut load = vec![0usize; k];
    let mut out = vec![usize::MAX; n];
    for &(d, _) in &conf {
        let mut best = None;
        let mut best_s = f64::NEG_INFINITY;
        for j in 0..k {
            if load[j] >= capacity {
                continue;
            }
            let s = score(d, j);
            if best.is_none() || s > best_s {
                best = Some(j);
                best_s = s;
            }
        }
        let j = best.expect("capacity check guarantees a free column");
        load[j] += 1;
        out[d] = j;
    }
    Ok(out)
}

/// Balance residuals over the centroids of `cb`: solve the uniform transport
/// problem on squared distances, then round with per-code capacity.
pub fn uniform_assign(
    residuals: &[Vec<f64>],
    cb: &Codebook,
    settings: &SinkhornSettings,
) -> Result<UniformAssignment> {
    let n = residuals.len();
    let k = cb.centroids.len();
    if n == 0 {
        return Err(Error::Config("uniform_assign needs at least one residual".into()));
    }
    let capacity = settings.capacity.unwrap_or(n.div_ceil(k));
    if n > k.saturating_mul(capacity) {
        return Err(Error::Infeasible(format!(
            "{n} items cannot fit {k} codes of capacity {capacity}"
        )));
    }
    let mut cost = residual_cost(residuals, &cb.centroids);
    if settings.normalize_cost {
        scale_by_max(&mut cost);
    }
    let problem = TransportProblem::uniform(cost, n, k, settings.epsilon, settings.iters);
    let plan = sinkhorn_plan(&problem)?;
    let indices = round_with_capacity(&plan, &problem.cost, capacity)?;
    let soft_indices = plan.argmax_rows(&problem.cost);
    Ok(UniformAssignment {
        report: uniformity_stats(&indices, k),
        soft_report: uniformity_stats(&soft_indices, k),
        indices,
        soft_indices,
        capacity,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    fn cb(centroids: Vec<Vec<f64>>) -> Codebook {
        Codebook {
            level: 1,
            centroids,
        }
    }

    #[test]
    fn constant_cost_gives_product_measure() {
        let (n, k) = (5, 3);
        let mut p = TransportProblem::uniform(vec![0.7; n * k], n, k, 0.01, 50);
        p.row_marginals = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        p.col_marginals = vec![0.5, 0.3, 0.2];
        let plan = sinkhorn_plan(&p).unwrap();
        for d in 0..n {
            for j in 0..k {
                let want = p.row_marginals[d] * p.col_marginals[j];
                assert!((plan.get(d, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separated_two_by_two_is_diagonal() {
        let m = 1.0;
        let p = TransportProblem::uniform(vec![0.0, m, m, 0.0], 2, 2, 0.01, 50);
        let plan = sinkhorn_plan(&p).unwrap();
        assert!((plan.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((plan.get(1, 1) - 0.5).abs() < 1e-6);
        assert!(plan.get(0, 1) < 1e-6 && plan.get(1, 0) < 1e-6);
    }

    fn gaussian_cost(n: usize, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init);
        let mut draw = |m: usize| -> Vec<Vec<f64>> {
            (0..m)
                .map(|_| (0..16).map(|_| crate::rng::normal(&mut rng)).collect())
                .collect()
        };
        let res = draw(n);
        let cents = draw(k);
        let mut cost = residual_cost(&res, &cents);
        scale_by_max(&mut cost);
        cost
    }

    #[test]
    fn random_small_problem_converges() {
        let (n, k) = (64, 16);
        let plan = sinkhorn_plan(&TransportProblem::uniform(gaussian_cost(n, k, 0), n, k, 0.01, 50)).unwrap();
        assert!(plan.row_err < 1e-4 && plan.col_err < 1e-4);
        assert!(plan.plan.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn l1_violation_never_increases() {
        for seed in 0..5 {
            let p = TransportProblem::uniform(gaussian_cost(40, 8, seed), 40, 8, 0.005, 60);
            let plan = sinkhorn_plan(&p).unwrap();
            for w in plan.violation_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", plan.violation_history);
            }
        }
    }

    #[test]
    fn huge_costs_stay_finite() {
        let cost = vec![1e6, 0.0, 3e8, 5.0, 1e300, 2.0];
        let plan = sinkhorn_plan(&TransportProblem::uniform(cost, 3, 2, 1e-3, 50)).unwrap();
        assert!(plan.plan.iter().all(|p| p.is_finite()));
        assert!(plan.f.iter().chain(&plan.g).all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_bad_problems() {
        let ok = TransportProblem::uniform(vec![0.0; 4], 2, 2, 0.01, 10);
        let mut p = ok.clone();
        p.epsilon = 0.0;
        assert!(sinkhorn_plan(&p).is_err());
        p = ok.clone();
        p.cost = vec![f64::INFINITY, f64::INFINITY, 0.0, 0.0];
        assert!(sinkhorn_plan(&p).is_err());
        p = ok.clone();
        p.row_marginals = vec![0.4, 0.4];
        assert!(sinkhorn_plan(&p).is_err());
    }

    #[test]
    fn partially_infinite_row_is_allowed() {
        let cost = vec![f64::INFINITY, 0.0, 0.0, 1.0];
        let plan = sinkhorn_plan(&TransportProblem::uniform(cost, 2, 2, 0.1, 200)).unwrap();
        assert_eq!(plan.get(0, 0), 0.0);
        assert!(plan.plan.iter().all(|p| p.is_finite()));
        assert!(plan.get(0, 1) > 0.45 && plan.get(1, 0) > 0.45);
    }

    #[test]
    fn uniformity_basic_cases() {
        let idx: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let r = uniformity_stats(&idx, 4);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.relative_std, 0.0);
        assert_eq!(r.total(), 8);

        let r = uniformity_stats(&[2; 9], 4);
        assert_eq!((r.min, r.max), (0, 9));
        assert_eq!(r.total(), 9);
    }

    #[test]
    fn no_contention_matches_argmin() {
        let cents: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 10.0, 0.0]).collect();
        let res: Vec<Vec<f64>> = [2, 0, 3, 1].iter().map(|&i| vec![i as f64 * 10.0 + 0.1, 0.2]).collect();
        let a = uniform_assign(&res, &cb(cents), &SinkhornSettings::default()).unwrap();
        assert_eq!(a.indices, vec![2, 0, 3, 1]);
        assert!(a.report.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn capacity_forces_weakest_preferences_off() {
        let cents = vec![vec![0.0, 0.0], vec![4.0, 0.0]];
        // all nearest centroid 0; tools 1 and 3 lean toward centroid 1 most
        let res = vec![vec![0.1, 0.0], vec![1.6, 0.0], vec![-0.5, 0.0], vec![1.2, 0.3]];
        let a = uniform_assign(&res, &cb(cents.clone()), &SinkhornSettings::default()).unwrap();
        assert_eq!(a.capacity, 2);
        assert_eq!(a.indices, vec![0, 1, 0, 1]);

        // brute force over all capacity-respecting assignments
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..16 {
            let asg: Vec<usize> = (0..4).map(|d| ((mask >> d) & 1) as usize).collect();
            if asg.iter().filter(|&&x| x == 1).count() != 2 {
                continue;
            }
            let c: f64 = asg.iter().enumerate().map(|(d, &j)| sq_dist(&res[d], &cents[j])).sum();
            if c < best.0 {
                best = (c, asg);
            }
        }
        assert_eq!(a.indices, best.1);
    }

    #[test]
    fn infeasible_capacity_rejected() {
        let cents = vec![vec![0.0], vec![1.0]];
        let res = vec![vec![0.0]; 5];
        let s = SinkhornSettings {
            capacity: Some(2),
            ..Default::default()
        };
        assert!(matches!(uniform_assign(&res, &cb(cents), &s), Err(Error::Infeasible(_))));
    }
}
