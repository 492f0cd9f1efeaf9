//! Amplitude optimization per contact configuration, scoring, ranking and
//! relaxation sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationError, CoverageReport, ThresholdSpec, SPILL_GRID_SPACING};
use crate::lead::ContactConfiguration;
use crate::Issue;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("target set is empty for configuration {0}")]
    EmptyTarget(String),
    #[error("invalid optimization spec: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Spec(Vec<Issue>),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error("{0}")]
    Evaluation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Linear,
    Nonlinear,
}

/// Which threshold constraint coverage is reported against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintCoverageThreshold {
    #[default]
    Constraint,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub target: f64,
    pub constraint: f64,
    pub spill: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            target: 1.0,
            constraint: 1.0,
            spill: 0.0,
        }
    }
}

pub fn default_gamma_grid() -> Vec<f64> {
    (0..10).map(|k| 10.0 * k as f64).collect()
}

fn default_cap() -> f64 {
    8.0
}
fn default_true() -> bool {
    true
}
fn default_spill_spacing() -> f64 {
    SPILL_GRID_SPACING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationSpec {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub thresholds: ThresholdSpec,
    /// Percentage of constraint points allowed above threshold.
    #[serde(default)]
    pub gamma: f64,
    /// mA
    #[serde(default = "default_cap")]
    pub lambda_cap: f64,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
    #[serde(default)]
    pub constraint_coverage_threshold: ConstraintCoverageThreshold,
    /// Evaluate spill for every result. When off, spill is reported as 0
    /// and a nonzero spill weight is rejected.
    #[serde(default = "default_true")]
    pub compute_spill: bool,
    /// mm
    #[serde(default = "default_spill_spacing")]
    pub spill_spacing: f64,
}

impl Default for OptimizationSpec {
    fn default() -> Self {
        Self {
            scheme: Scheme::Linear,
            thresholds: ThresholdSpec::default(),
            gamma: 0.0,
            lambda_cap: default_cap(),
            weights: Weights::default(),
            gamma_grid: default_gamma_grid(),
            constraint_coverage_threshold: ConstraintCoverageThreshold::Constraint,
            compute_spill: true,
            spill_spacing: SPILL_GRID_SPACING,
        }
    }
}

impl OptimizationSpec {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        let gamma_ok = |g: f64| (0.0..=100.0).contains(&g);
        if !gamma_ok(self.gamma) {
            out.push(Issue::new("gamma", format!("must lie in [0, 100], got {}", self.gamma)));
        }
        if !finite_pos(self.lambda_cap) {
            out.push(Issue::new("lambda_cap", format!("must be > 0, got {}", self.lambda_cap)));
        }
        for (name, w) in [
            ("weights.target", self.weights.target),
            ("weights.constraint", self.weights.constraint),
            ("weights.spill", self.weights.spill),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                out.push(Issue::new(name, format!("must be >= 0, got {w}")));
            }
        }
        if !self.compute_spill && self.weights.spill != 0.0 {
            out.push(Issue::new("weights.spill", "nonzero spill weight requires compute_spill"));
        }
        if !finite_pos(self.spill_spacing) {
            out.push(Issue::new("spill_spacing", format!("must be > 0, got {}", self.spill_spacing)));
        }
        if self.gamma_grid.is_empty() {
            out.push(Issue::new("gamma_grid", "must not be empty"));
        }
        for (i, g) in self.gamma_grid.iter().enumerate() {
            if !gamma_ok(*g) {
                out.push(Issue::new(format!("gamma_grid[{i}]"), format!("must lie in [0, 100], got {g}")));
            }
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("thresholds.e_th_t", t.e_th_t),
            ("thresholds.e_th_c", t.e_th_c),
            ("thresholds.pulse_width", t.pulse_width),
            ("thresholds.reference_pulse_width", t.reference_pulse_width),
        ] {
            if !finite_pos(v) {
                out.push(Issue::new(name, format!("must be > 0, got {v}")));
            }
        }
        if !(t.chronaxie >= 0.0 && t.chronaxie.is_finite()) {
            out.push(Issue::new("thresholds.chronaxie", format!("must be >= 0, got {}", t.chronaxie)));
        }
        out
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(OptimizeError::Spec(issues))
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }
}

/// Number `m` of constraint points allowed above threshold.
pub fn allowed_violations(n: usize, gamma: f64) -> usize {
    // multiply first so integral products such as 90·10 stay exact
    ((gamma * n as f64) / 100.0).floor().max(0.0) as usize
}

/// Largest amplitude keeping all but `m` constraint points at or below
/// `threshold`, capped at `cap`.
pub fn quantile_bound(constraint: &[f64], threshold: f64, gamma: f64, cap: f64) -> f64 {
    let m = allowed_violations(constraint.len(), gamma);
    if m >= constraint.len() {
        return cap;
    }
    let mut sorted = constraint.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let e = sorted[m];
    if e <= 0.0 {
        cap
    } else {
        cap.min(threshold / e)
    }
}

/// Linear scheme: the largest admissible amplitude.
pub fn optimize_linear(target: &[f64], constraint: &[f64], spec: &OptimizationSpec) -> Result<f64, OptimizeError> {
    if target.is_empty() {
        return Err(OptimizeError::EmptyTarget(String::new()));
    }
    let (_, e_c) = spec.thresholds.adjusted()?;
    Ok(quantile_bound(constraint, e_c, spec.gamma, spec.lambda_cap))
}

/// Piecewise target cost: quadratic below threshold, linear above.
pub fn cost_nonlinear(lambda: f64, target: &[f64], e_th_t: f64) -> f64 {
    target
        .iter()
        .map(|&e| {
            let d = lambda * e - e_th_t;
            if d <= 0.0 {
                d * d
            } else {
                d
            }
        })
        .sum()
}

/// Exact minimizer of the convex piecewise cost over `[0, upper]`.
pub fn minimize_cost(target: &[f64], e_th_t: f64, upper: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = target
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| (e_th_t / e, e))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    // points at index >= k are below threshold on the k-th segment
    let mut s2 = vec![0.0; n + 1];
    let mut s1 = vec![0.0; n + 1];
    for k in (0..n).rev() {
        s2[k] = s2[k + 1] + pts[k].1 * pts[k].1;
        s1[k] = s1[k + 1] + pts[k].1;
    }
    let mut over = 0.0;
    let mut lo = 0.0f64;
    for k in 0..=n {
        let hi = if k < n { pts[k].0.min(upper) } else { upper };
        let g_hi = 2.0 * hi * s2[k] - 2.0 * e_th_t * s1[k] + over;
        if g_hi >= 0.0 {
            let root = if s2[k] > 0.0 {
                (2.0 * e_th_t * s1[k] - over) / (2.0 * s2[k])
            } else {
                lo
            };
            return root.clamp(lo, hi);
        }
        if hi >= upper {
            return upper;
        }
        lo = hi;
        over += pts[k].1;
    }
    upper
}

/// Nonlinear scheme: `(λ_opt, cost)` over `[0, min(cap, quantile bound)]`.
pub fn optimize_nonlinear(
    target: &[f64],
    constraint: &[f64],
    spec: &OptimizationSpec,
) -> Result<(f64, f64), OptimizeError> {
    if target.is_empty() {
        return Err(OptimizeError::EmptyTarget(String::new()));
    }
    let (e_t, e_c) = spec.thresholds.adjusted()?;
    let upper = quantile_bound(constraint, e_c, spec.gamma, spec.lambda_cap);
    let lambda = minimize_cost(target, e_t, upper);
    Ok((lambda, cost_nonlinear(lambda, target, e_t)))
}

pub fn score_values(p_t: f64, p_c: f64, p_s: f64, w: &Weights) -> f64 {
    w.target * p_t - w.constraint * p_c - w.spill * p_s
}

pub fn score(coverage: &CoverageReport, weights: &Weights) -> f64 {
    score_values(coverage.p_act_t, coverage.p_act_c, coverage.p_act_s, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationResult {
    pub config: ContactConfiguration,
    /// mA
    pub lambda_opt: f64,
    /// Upper end of the admissible amplitude interval, mA.
    pub lambda_bound: f64,
    /// Objective value: target sum `Σ λE_i` (linear) or the piecewise cost.
    pub cost: f64,
    pub coverage: CoverageReport,
    pub score: f64,
    pub feasible: bool,
}

/// Supplies per-configuration optimization inputs and coverage evaluation.
pub trait CaseModel: Sync {
    fn configurations(&self) -> &[ContactConfiguration];

    /// Unit norms (V/m per mA) of the target and constraint optimization
    /// units of configuration `idx`.
    fn unit_norms(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>), OptimizeError>;

    fn coverage(&self, idx: usize, lambda: f64, spec: &OptimizationSpec) -> Result<CoverageReport, OptimizeError>;
}

pub fn optimize_configuration(
    model: &dyn CaseModel,
    idx: usize,
    spec: &OptimizationSpec,
) -> Result<ConfigurationResult, OptimizeError> {
    let config = &model.configurations()[idx];
    let (target, constraint) = model.unit_norms(idx)?;
    if target.is_empty() {
        return Err(OptimizeError::EmptyTarget(config.canonical_label()));
    }
    let (e_t, e_c) = spec.thresholds.adjusted()?;
    let bound = quantile_bound(&constraint, e_c, spec.gamma, spec.lambda_cap);
    let (lambda, cost) = match spec.scheme {
        Scheme::Linear => (bound, bound * target.iter().sum::<f64>()),
        Scheme::Nonlinear => {
            let l = minimize_cost(&target, e_t, bound);
            (l, cost_nonlinear(l, &target, e_t))
        }
    };
    let coverage = model.coverage(idx, lambda, spec)?;
    Ok(ConfigurationResult {
        config: config.clone(),
        lambda_opt: lambda,
        lambda_bound: bound,
        cost,
        score: score(&coverage, &spec.weights),
        coverage,
        feasible: lambda > 0.0 && lambda.is_finite(),
    })
}

/// Total order used for ranking; `Less` sorts first.
pub fn rank_cmp(a: &ConfigurationResult, b: &ConfigurationResult) -> Ordering {
    b.feasible
        .cmp(&a.feasible)
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.config.len().cmp(&b.config.len()))
        .then_with(|| a.lambda_opt.total_cmp(&b.lambda_opt))
        .then_with(|| a.config.canonical_cmp(&b.config))
}

pub fn rank_configurations(mut results: Vec<ConfigurationResult>) -> Vec<ConfigurationResult> {
    results.sort_by(rank_cmp);
    results
}

/// Optimize and rank every configuration of the model.
pub fn optimize_all(model: &dyn CaseModel, spec: &OptimizationSpec) -> Result<Vec<ConfigurationResult>, OptimizeError> {
    spec.validate()?;
    let idx: Vec<usize> = (0..model.configurations().len()).collect();
    let results = crate::par::map_collect(&idx, |&i| optimize_configuration(model, i, spec))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_configurations(results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub gamma: f64,
    pub ranked: Vec<ConfigurationResult>,
}

impl SweepEntry {
    pub fn top(&self) -> &ConfigurationResult {
        &self.ranked[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Per contact label: number of grid values whose top configuration
    /// uses the contact.
    pub contact_counts: BTreeMap<String, usize>,
}

pub fn relaxation_sweep(model: &dyn CaseModel, spec: &OptimizationSpec) -> Result<SweepResult, OptimizeError> {
    spec.validate()?;
    let mut counts: BTreeMap<String, usize> = model
        .configurations()
        .iter()
        .flat_map(|c| c.labels.iter().cloned())
        .map(|l| (l, 0))
        .collect();
    let mut entries = Vec::with_capacity(spec.gamma_grid.len());
    for &gamma in &spec.gamma_grid {
        let ranked = optimize_all(model, &spec.with_gamma(gamma))?;
        if let Some(top) = ranked.first() {
            for l in &top.config.labels {
                *counts.entry(l.clone()).or_default() += 1;
            }
        }
        entries.push(SweepEntry { gamma, ranked });
    }
    Ok(SweepResult {
        entries,
        contact_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{activated_mask, coverage_pointwise, CoveragePair};
    use crate::anatomy::ActivationMode;
    use crate::lead::{builtin_lead, enumerate_configurations};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec() -> OptimizationSpec {
        OptimizationSpec::default()
    }

    #[test]
    fn violations() {
        assert_eq!(allowed_violations(3, 0.0), 0);
        assert_eq!(allowed_violations(3, 34.0), 1);
        assert_eq!(allowed_violations(10, 90.0), 9);
        assert_eq!(allowed_violations(0, 50.0), 0);
        assert_eq!(allowed_violations(7, 100.0), 7);
    }

    #[test]
    fn linear_examples() {
        let c = [50.0, 100.0, 200.0];
        assert_relative_eq!(optimize_linear(&[1.0], &c, &spec()).unwrap(), 0.5);
        assert_relative_eq!(optimize_linear(&[1.0], &c, &spec().with_gamma(34.0)).unwrap(), 1.0);
        assert_eq!(optimize_linear(&[1.0], &[], &spec()).unwrap(), 8.0);
        assert_eq!(optimize_linear(&[1.0], &c, &spec().with_gamma(100.0)).unwrap(), 8.0);
        assert!(matches!(optimize_linear(&[], &c, &spec()), Err(OptimizeError::EmptyTarget(_))));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost_nonlinear(2.0, &[100.0, 100.0], 200.0), 0.0);
        assert_eq!(cost_nonlinear(1.0, &[100.0], 200.0), 10000.0);
        assert_relative_eq!(cost_nonlinear(1.99, &[100.0, 200.0], 200.0), 199.0, max_relative = 1e-12);
    }

    #[test]
    fn nonlinear_examples() {
        let (l, c) = optimize_nonlinear(&[100.0, 200.0], &[], &spec()).unwrap();
        assert!((l - 1.99).abs() < 1e-9 && (c - 199.0).abs() < 1e-6, "{l} {c}");
        let (l, c) = optimize_nonlinear(&[80.0], &[], &spec()).unwrap();
        assert_eq!((l, c), (2.5, 0.0));
        // a 0.5 mA constraint bound below the unconstrained 2.0 mA optimum
        let (l, _) = optimize_nonlinear(&[100.0], &[200.0], &spec()).unwrap();
        assert_eq!(l, 0.5);
        assert!(optimize_nonlinear(&[], &[], &spec()).is_err());
        assert_eq!(optimize_nonlinear(&[0.0, 0.0], &[], &spec()).unwrap().0, 0.0);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_values(90.0, 20.0, 30.0, &Weights::default()), 70.0);
        assert_eq!(score_values(0.0, 0.0, 0.0, &Weights::default()), 0.0);
        let zero = Weights {
            target: 0.0,
            constraint: 0.0,
            spill: 0.0,
        };
        assert_eq!(score_values(55.0, 3.0, 12.0, &zero), 0.0);
    }

    #[test]
    fn spec_issues_carry_paths() {
        let bad = OptimizationSpec {
            gamma: 150.0,
            lambda_cap: 0.0,
            gamma_grid: vec![0.0, -1.0],
            ..spec()
        };
        let paths: Vec<String> = bad.issues().into_iter().map(|i| i.path).collect();
        assert_eq!(paths, vec!["gamma", "lambda_cap", "gamma_grid[1]"]);
        assert!(spec().issues().is_empty());
    }

    /// Configurations of a real lead with synthetic per-configuration norms.
    struct Table {
        configs: Vec<ContactConfiguration>,
        target: Vec<Vec<f64>>,
        constraint: Vec<Vec<f64>>,
    }

    impl CaseModel for Table {
        fn configurations(&self) -> &[ContactConfiguration] {
            &self.configs
        }

        fn unit_norms(&self, idx: usize) -> Result<(Vec<f64>, Vec<f64>), OptimizeError> {
            Ok((self.target[idx].clone(), self.constraint[idx].clone()))
        }

        fn coverage(&self, idx: usize, lambda: f64, spec: &OptimizationSpec) -> Result<CoverageReport, OptimizeError> {
            let (e_t, e_c) = spec.thresholds.adjusted()?;
            let scale = |v: &[f64]| v.iter().map(|e| e * lambda).collect::<Vec<_>>();
            let p_t = coverage_pointwise(&activated_mask(&scale(&self.target[idx]), e_t))?;
            let p_c = if self.constraint[idx].is_empty() {
                None
            } else {
                Some(coverage_pointwise(&activated_mask(&scale(&self.constraint[idx]), e_c))?)
            };
            Ok(CoverageReport {
                config: self.configs[idx].clone(),
                lambda,
                mode: ActivationMode::PointWise,
                p_act_t: p_t,
                p_act_c: p_c.unwrap_or(0.0),
                p_act_s: 0.0,
                point_wise: CoveragePair {
                    target: p_t,
                    constraint: p_c,
                },
                trajectory_wise: None,
                threshold_t: e_t,
                threshold_c: e_c,
                categories: Vec::new(),
            })
        }
    }

    fn table(target: Vec<Vec<f64>>, constraint: Vec<Vec<f64>>) -> Table {
        let lead = builtin_lead("abbott_infinity_directional").unwrap();
        let configs = enumerate_configurations(&lead).unwrap()[..target.len()].to_vec();
        Table {
            configs,
            target,
            constraint,
        }
    }

    fn result(score: f64, n: usize, lambda: f64, feasible: bool) -> ConfigurationResult {
        let lead = builtin_lead("abbott_infinity_directional").unwrap();
        let config = enumerate_configurations(&lead)
            .unwrap()
            .into_iter()
            .find(|c| c.len() == n)
            .unwrap();
        let t = table(vec![vec![1.0]], vec![vec![]]);
        let mut coverage = t.coverage(0, lambda, &spec()).unwrap();
        coverage.config = config.clone();
        ConfigurationResult {
            config,
            lambda_opt: lambda,
            lambda_bound: lambda,
            cost: 0.0,
            coverage,
            score,
            feasible,
        }
    }

    #[test]
    fn ranking_rules() {
        let ranked = rank_configurations(vec![
            result(50.0, 1, 1.0, true),
            result(70.0, 3, 1.0, true),
            result(70.0, 1, 1.0, true),
            result(99.0, 1, 0.0, false),
        ]);
        let got: Vec<(f64, usize)> = ranked.iter().map(|r| (r.score, r.config.len())).collect();
        assert_eq!(got, vec![(70.0, 1), (70.0, 3), (50.0, 1), (99.0, 1)]);
        let one = rank_configurations(vec![result(1.0, 2, 1.0, true)]);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn sweep_without_constraints_is_flat() {
        let t = table(vec![vec![30.0, 10.0], vec![40.0, 5.0], vec![1.0, 2.0]], vec![vec![], vec![], vec![]]);
        let sweep = relaxation_sweep(&t, &spec()).unwrap();
        let top = sweep.entries[0].top().config.clone();
        assert!(sweep.entries.iter().all(|e| e.top().config == top));
        for (label, count) in &sweep.contact_counts {
            let expected = if top.labels.contains(label) { 10 } else { 0 };
            assert_eq!(*count, expected, "{label}");
        }
    }

    #[test]
    fn top_score_can_fall_as_gamma_grows() {
        // raising the bound lets more constraint points through while the
        // target stays out of reach, so the best score drops
        let t = table(vec![vec![0.1]], vec![vec![1.0, 2.0, 3.0, 4.0]]);
        let s = OptimizationSpec {
            lambda_cap: 100.0,
            gamma_grid: vec![0.0, 50.0],
            ..spec()
        };
        let sweep = relaxation_sweep(&t, &s).unwrap();
        assert_eq!(sweep.entries[0].top().score, -25.0);
        assert_eq!(sweep.entries[1].top().score, -75.0);
    }

    fn brute_linear(constraint: &[f64], e_c: f64, gamma: f64, cap: f64) -> f64 {
        let m = allowed_violations(constraint.len(), gamma);
        let steps = (cap / 1e-4).round() as usize;
        let mut best = 0.0;
        for k in 0..=steps {
            let l = k as f64 * 1e-4;
            if constraint.iter().filter(|&&e| l * e > e_c).count() <= m {
                best = l;
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_matches_grid_search(
            constraint in prop::collection::vec(1.0f64..500.0, 0..200),
            gamma in 0.0f64..100.0,
        ) {
            let s = spec().with_gamma(gamma);
            let got = optimize_linear(&[1.0], &constraint, &s).unwrap();
            let oracle = brute_linear(&constraint, 100.0, gamma, 8.0);
            prop_assert!((got - oracle).abs() <= 1e-3, "{} vs {}", got, oracle);
        }

        #[test]
        fn nonlinear_matches_grid_and_respects_bound(
            target in prop::collection::vec(0.0f64..400.0, 1..40),
            constraint in prop::collection::vec(1.0f64..500.0, 0..40),
            gamma in 0.0f64..100.0,
        ) {
            let s = spec().with_gamma(gamma);
            let (l, c) = optimize_nonlinear(&target, &constraint, &s).unwrap();
            let bound = optimize_linear(&target, &constraint, &s).unwrap();
            prop_assert!(l <= bound && l >= 0.0);
            let steps = (bound / 1e-4).ceil() as usize;
            let grid_min = (0..=steps)
                .map(|k| cost_nonlinear((k as f64 * 1e-4).min(bound), &target, 200.0))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(c <= grid_min + 1e-9 * grid_min.max(1.0));
        }

        #[test]
        fn cost_is_convex(
            target in prop::collection::vec(0.0f64..400.0, 1..40),
            l1 in 0.0f64..8.0, l2 in 0.0f64..8.0, t in 0.0f64..1.0,
        ) {
            let f = |l: f64| cost_nonlinear(l, &target, 200.0);
            let mid = f(t * l1 + (1.0 - t) * l2);
            let chord = t * f(l1) + (1.0 - t) * f(l2);
            prop_assert!(mid <= chord + 1e-9 * chord.max(1.0));
        }

        #[test]
        fn lambda_is_monotone_in_gamma(
            target in prop::collection::vec(1.0f64..400.0, 1..20),
            constraint in prop::collection::vec(1.0f64..500.0, 1..60),
            scheme in prop_oneof![Just(Scheme::Linear), Just(Scheme::Nonlinear)],
        ) {
            let t = table(vec![target], vec![constraint]);
            let s = OptimizationSpec { scheme, ..spec() };
            let sweep = relaxation_sweep(&t, &s).unwrap();
            let lambdas: Vec<f64> = sweep.entries.iter().map(|e| e.top().lambda_opt).collect();
            prop_assert!(lambdas.windows(2).all(|w| w[0] <= w[1]), "{:?}", lambdas);
        }

        #[test]
        fn ranking_ignores_uniform_weight_scaling(
            rows in prop::collection::vec(
                (prop::collection::vec(1.0f64..300.0, 1..10), prop::collection::vec(1.0f64..300.0, 1..10)),
                2..8,
            ),
            k in 0.01f64..100.0,
            w in prop::array::uniform2(0.0f64..2.0),
        ) {
            let (target, constraint): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let t = table(target, constraint);
            let base = OptimizationSpec {
                weights: Weights { target: w[0], constraint: w[1], spill: 0.0 },
                gamma: 30.0,
                ..spec()
            };
            let scaled = OptimizationSpec {
                weights: Weights { target: w[0] * k, constraint: w[1] * k, spill: 0.0 },
                ..base.clone()
            };
            let a: Vec<_> = optimize_all(&t, &base).unwrap().into_iter().map(|r| r.config).collect();
            let b: Vec<_> = optimize_all(&t, &scaled).unwrap().into_iter().map(|r| r.config).collect();
            prop_assert_eq!(a, b);
        }
    }
}
