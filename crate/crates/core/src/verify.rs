//! The acceptance suite: twelve numbered criteria, each with its own oracle,
//! tolerance and time limit. Used by the `acceptance` test target and by the
//! `verify` subcommand.
//!
//! Oracles are chosen to be independent of the route being checked: closed
//! forms for the three-site box, termwise differentiation of the binomial
//! polynomial against flip sums, finite differences against flip
//! derivatives, and enumeration against the two Monte Carlo estimators.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annealed::{
    annealed_cost_env_mc, annealed_cost_exact, annealed_cost_path_mc, annealed_derivative_formula, flip_derivative,
    fd_derivative, EnumeratedCosts, DEFAULT_FD_STEP,
};
use crate::bounds::check_rate_bounds;
use crate::environment::{sample_environment, Environment, DEFAULT_ENUMERATION_GUARD};
use crate::error::Result;
use crate::lattice::{build_box, l1_norm, BoxGeometry};
use crate::lyapunov::{estimate_quenched_lyapunov, lyapunov_difference_profile, BoxRule, LyapunovConfig};
use crate::mc::{merge_tree, run, RunPlan};
use crate::quenched::{expected_range, flip_bound_table, russo_rhs, FlipSumMode};
use crate::rate::{rate_function, ExponentCache, RateSearchConfig};
use crate::rng::{stream_rng, stream_seed};
use crate::lyapunov::ExponentKind;
use crate::scalar::one_minus_inv_e;
use crate::solver::{solve_travel_field, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full budgets as stated in the criteria.
    Desk,
    /// Reduced Monte Carlo budgets for smoke runs; timing limits still apply.
    Quick,
}

impl std::str::FromStr for Profile {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "quick" => Ok(Profile::Quick),
            other => Err(crate::error::Error::Parse(format!("unknown profile `{other}` (desk or quick)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] C{:02} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Settings for one suite run.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub profile: Profile,
    pub workers: usize,
    /// Restrict to these criterion ids (all when empty).
    pub only: Vec<u32>,
}

impl SuiteConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            workers: 0,
            only: Vec::new(),
        }
    }

    fn budget(&self, desk: usize, quick: usize) -> usize {
        match self.profile {
            Profile::Desk => desk,
            Profile::Quick => quick,
        }
    }

    fn plan(&self, id: &str, replicates: usize, seed: u64) -> RunPlan {
        RunPlan::new(id, replicates, seed).with_workers(self.workers)
    }
}

type Check = fn(&SuiteConfig) -> Result<(bool, String)>;

const CRITERIA: [(u32, &str, Check); 12] = [
    (1, "closed-form quenched solves", c01_closed_forms),
    (2, "flip-sum identity for the mean quenched cost", c02_flip_sum),
    (3, "finite-box quenched lower bound", c03_quenched_lower),
    (4, "annealed derivative identity", c04_annealed_derivative),
    (5, "estimator triangle", c05_triangle),
    (6, "expected-range bounds", c06_expected_range),
    (7, "flip log-ratio versus return-weight bound", c07_flip_bound),
    (8, "monotone coupling", c08_coupling),
    (9, "Lyapunov sanity", c09_lyapunov),
    (10, "rate functions", c10_rate),
    (11, "determinism across worker counts", c11_determinism),
    (12, "performance floor", c12_performance),
];

/// Runs the selected criteria, calling `report` after each one.
pub fn run_suite(cfg: &SuiteConfig, mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    for (id, name, check) in CRITERIA {
        if !cfg.only.is_empty() && !cfg.only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match check(cfg) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let res = CriterionResult {
            id,
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        report(&res);
        out.push(res);
    }
    out
}

fn geo(d: usize, n: i64) -> Result<Arc<BoxGeometry>> {
    Ok(Arc::new(build_box(d, n)?))
}

fn solver() -> SolverConfig<f64> {
    SolverConfig::default()
}

fn within(limit: Duration, start: Instant) -> (bool, f64) {
    let t = start.elapsed();
    (t < limit, t.as_secs_f64())
}

/// Small exact configurations: (d, N, targets).
fn exact_grid() -> Vec<(usize, i64, Vec<Vec<i64>>)> {
    vec![
        (1, 1, vec![vec![1], vec![-1]]),
        (1, 2, vec![vec![1], vec![2], vec![-1], vec![-2]]),
        (2, 1, vec![vec![1, 0], vec![1, 1], vec![0, -1], vec![-1, 1]]),
    ]
}

const R_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn c01_closed_forms(_: &SuiteConfig) -> Result<(bool, String)> {
    let g = geo(1, 1)?;
    let e1 = (-1.0f64).exp();
    let cases = [(0u8, 2.0 / 3.0), (1u8, (e1 / 2.0) / (1.0 - e1 * e1 / 4.0))];
    let mut ok = true;
    let mut parts = Vec::new();
    for (omega, exact) in cases {
        let env = Environment::constant(&g, omega)?;
        let start = Instant::now();
        let field = solve_travel_field(&env, &[1], 0.0, &solver())?;
        let (fast, secs) = within(Duration::from_millis(1), start);
        let u0 = field.value_at(g.origin_index());
        let rel = ((u0 - exact) / exact).abs();
        ok &= rel <= 1e-10 && fast;
        parts.push(format!("omega={omega}: u(0)={u0:.12} rel.err {rel:.1e} in {:.0}us", secs * 1e6));
    }
    Ok((ok, parts.join("; ")))
}

fn c02_flip_sum(_: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for (d, n, ys) in exact_grid() {
        let g = geo(d, n)?;
        for y in ys {
            let costs = EnumeratedCosts::build(&g, &y, 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
            for r in [0.2, 0.5, 0.8] {
                let analytic = costs.mean_cost_derivative(r);
                let rhs = russo_rhs(&g, r, &y, &FlipSumMode::Exact { guard: DEFAULT_ENUMERATION_GUARD }, &solver())?;
                worst = worst.max(((rhs.value - analytic) / analytic).abs());
                cells += 1;
            }
        }
    }
    let (fast, secs) = within(Duration::from_secs(30), start);
    Ok((
        worst <= 1e-8 && fast,
        format!("{cells} cells, max rel.err {worst:.2e}, {secs:.1}s (limit 30s)"),
    ))
}

fn c03_quenched_lower(_: &SuiteConfig) -> Result<(bool, String)> {
    let c = one_minus_inv_e::<f64>();
    let mut worst = f64::INFINITY;
    let mut cells = 0;
    for (d, n, ys) in exact_grid() {
        let g = geo(d, n)?;
        for y in ys {
            let costs = EnumeratedCosts::build(&g, &y, 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
            let norm = l1_norm(&y) as f64;
            for (i, &p) in R_GRID.iter().enumerate() {
                for &q in &R_GRID[i + 1..] {
                    let margin = costs.mean_quenched_cost(p) - costs.mean_quenched_cost(q) - c * (q - p) * norm;
                    worst = worst.min(margin);
                    cells += 1;
                }
            }
        }
    }
    Ok((worst >= -1e-10, format!("{cells} cells, min margin {worst:.3e}")))
}

fn c04_annealed_derivative(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut worst_rel: f64 = 0.0;
    let mut cells = 0;
    for (d, n, ys) in exact_grid() {
        let g = geo(d, n)?;
        for y in ys {
            let costs = EnumeratedCosts::build(&g, &y, 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
            for r in R_GRID {
                let flip = flip_derivative(&g, r, &y, 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
                let fd = fd_derivative(&costs, r, DEFAULT_FD_STEP, false)?;
                worst_rel = worst_rel.max(((flip - fd) / flip).abs());
                cells += 1;
            }
        }
    }
    // path-MC local-time formula against the exact flip derivative
    let reps = cfg.budget(100_000, 10_000);
    let mut worst_z: f64 = 0.0;
    let mut mc_cells = 0;
    for (k, (d, n, y)) in [(1, 1, vec![1]), (1, 2, vec![2]), (2, 1, vec![1, 0])].into_iter().enumerate() {
        let g = geo(d, n)?;
        for (j, r) in R_GRID.into_iter().enumerate() {
            let exact = flip_derivative(&g, r, &y, 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
            let plan = cfg.plan("c04", reps, stream_seed(4_000, (k * 100 + j) as u64));
            let rep = annealed_derivative_formula(&g, r, &y, 0.0, &plan)?;
            let z = (rep.formula.unwrap_or(f64::NAN) - exact).abs() / rep.formula_se.unwrap_or(f64::NAN);
            worst_z = worst_z.max(z);
            mc_cells += 1;
        }
    }
    let (fast, secs) = within(Duration::from_secs(120), start);
    Ok((
        worst_rel <= 1e-6 && worst_z <= 3.0 && fast,
        format!(
            "flip vs FD: {cells} cells, max rel.err {worst_rel:.2e}; path formula ({reps} walks): {mc_cells} cells, max |z| {worst_z:.2}; {secs:.1}s (limit 120s)"
        ),
    ))
}

fn c05_triangle(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let g = geo(1, 2)?;
    let reps = cfg.budget(100_000, 10_000);
    let mut worst_z: f64 = 0.0;
    for (k, r) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let ex = annealed_cost_exact(&g, r, &[2], 0.0, DEFAULT_ENUMERATION_GUARD, &solver())?;
        let env = annealed_cost_env_mc(&g, r, &[2], 0.0, &cfg.plan("c05-env", reps, stream_seed(5_000, k as u64)), &solver())?;
        let path = annealed_cost_path_mc(&g, r, &[2], 0.0, &cfg.plan("c05-path", reps, stream_seed(5_100, k as u64)))?;
        let all = [&ex, &env, &path];
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
                worst_z = worst_z.max((a.value - b.value).abs() / se);
            }
        }
    }
    let (fast, secs) = within(Duration::from_secs(60), start);
    Ok((
        worst_z <= 3.0 && fast,
        format!("3 r values x 3 pairs at {reps} replicates, max |z| {worst_z:.2}; {secs:.1}s (limit 60s)"),
    ))
}

fn c06_expected_range(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let g = geo(2, 6)?;
    let y = [3, 0];
    let envs = cfg.budget(200, 40);
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [0.3, 0.6] {
        let plan = cfg.plan("c06", envs, 6_000);
        let stats = run(&plan, |seed| {
            let env = sample_environment(&g, r, seed)?;
            Ok(expected_range(&env, &y, 0.0, None, &solver())? / 3.0)
        })?;
        let upper = crate::bounds::annealed_log_constant(2, r);
        let se = stats.std_error();
        let cell_ok = stats.mean >= 1.0 - 3.0 * se && stats.mean <= upper + 3.0 * se;
        ok &= cell_ok;
        parts.push(format!("r={r}: {:.4} ± {:.4} in [1, {upper:.3}]", stats.mean, se));
    }
    let (fast, secs) = within(Duration::from_secs(300), start);
    Ok((ok && fast, format!("{}; {envs} envs; {secs:.1}s (limit 300s)", parts.join("; "))))
}

fn c07_flip_bound(_: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let small = geo(2, 5)?;
    let big = geo(2, 15)?;
    let y = vec![3i64, 0];
    let mut pairs = 0;
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for k in 0..10u64 {
        let seed = stream_seed(7_000, k);
        let env_big = sample_environment(&big, 0.5, seed)?;
        let env = env_big.restrict(&small)?;
        let mut candidates: Vec<Vec<i64>> = small.sites().filter(|s| *s != y).collect();
        candidates.shuffle(&mut stream_rng(seed ^ 0x5eed));
        candidates.truncate(12);
        let rows = flip_bound_table(&env, &y, &candidates, Some(&env_big), 0.0, &solver())?;
        for row in rows {
            pairs += 1;
            min_slack = min_slack.min(row.bound_rhs - row.log_ratio.abs());
            if !row.holds() {
                violations.push(format!("seed {seed} z {:?}", row.z_coords));
            }
        }
    }
    let (fast, secs) = within(Duration::from_secs(300), start);
    let detail = if violations.is_empty() {
        format!("{pairs} pairs, 0 violations, min slack {min_slack:.3e}; {secs:.1}s (limit 300s)")
    } else {
        format!("{pairs} pairs, violations at: {}", violations.join(", "))
    };
    Ok((violations.is_empty() && pairs >= 100 && fast, detail))
}

fn c08_coupling(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let g = geo(2, 4)?;
    let y = [2, 1];
    let trials = cfg.budget(1000, 200);
    let plan = cfg.plan("c08", trials, 8_000);
    // fraction of trials where every site obeys the ordering
    let stats = run(&plan, |seed| {
        let ep = sample_environment(&g, 0.3, seed)?;
        let eq = ep.couple(0.7)?;
        let fp = solve_travel_field(&ep, &y, 0.0, &solver())?;
        let fq = solve_travel_field(&eq, &y, 0.0, &solver())?;
        let ordered = (0..g.site_count()).all(|i| {
            let (a, b) = (fp.log_value_at(i), fq.log_value_at(i));
            a <= b + 1e-9 * (1.0 + b.abs())
        });
        Ok(if ordered { 1.0 } else { 0.0 })
    })?;
    Ok((
        stats.min == 1.0,
        format!("{} of {trials} coupled trials ordered at every site", (stats.mean * trials as f64).round()),
    ))
}

fn c09_lyapunov(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let start = Instant::now();
    let lc = LyapunovConfig {
        n_list: vec![2, 4, 8],
        box_rule: BoxRule::default(),
        replicates: cfg.budget(2000, 200),
        seed: 9_000,
        workers: cfg.workers,
        ..LyapunovConfig::default()
    };
    let p = estimate_quenched_lyapunov(2, 0.5, 0.0, &[1, 0], &lc)?;
    let mut ok = true;
    for w in p.entries.windows(2) {
        let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        ok &= w[1].value <= w[0].value + 3.0 * se;
    }
    let cap = 1.0 + 4f64.ln();
    ok &= p.extrapolated > 0.0 && p.extrapolated <= cap;
    let (fast, secs) = within(Duration::from_secs(600), start);
    let entries: Vec<String> = p
        .entries
        .iter()
        .map(|e| format!("n={} N={}: {:.4}±{:.4}", e.n, e.radius, e.value, e.std_error))
        .collect();
    Ok((
        ok && fast,
        format!(
            "{}; alpha={:.4} in (0, {cap:.4}]; {secs:.1}s (limit 600s)",
            entries.join(", "),
            p.extrapolated
        ),
    ))
}

fn c10_rate(_: &SuiteConfig) -> Result<(bool, String)> {
    let cache = ExponentCache::new();
    let rc = RateSearchConfig::default();
    let zero = rate_function(1, 0.5, &[0.0], ExponentKind::Quenched, &rc, &cache)?;
    let mut ok = zero.value == 0.0 && zero.supremizer == 0.0;
    let mut max_evals = 0;
    let mut max_width: f64 = 0.0;
    for r in [0.3, 0.6] {
        for kind in [ExponentKind::Quenched, ExponentKind::Annealed] {
            let v = rate_function(1, r, &[0.5], kind, &rc, &cache)?;
            max_evals = max_evals.max(v.evaluations);
            max_width = max_width.max(v.bracket.1 - v.bracket.0);
        }
    }
    ok &= max_evals <= 60 && max_width <= 1e-6;
    let rep = check_rate_bounds(1, 0.3, 0.6, &[vec![0.5]], &rc, &cache)?;
    let lower = rep
        .cells
        .iter()
        .find(|c| c.bound_id == crate::bounds::BoundId::RateLower)
        .map_or(f64::NEG_INFINITY, |c| c.margin);
    ok &= lower >= -1e-8;
    Ok((
        ok,
        format!("I(0)={}; max bracket width {max_width:.1e} in ≤{max_evals} evaluations; lower-bound margin {lower:.4e}", zero.value),
    ))
}

fn c11_determinism(_: &SuiteConfig) -> Result<(bool, String)> {
    let g = geo(2, 3)?;
    let y = vec![2i64, 1];
    let render = |workers: usize| -> Result<String> {
        let plan = |id: &str, n: usize| RunPlan::new(id, n, 11).with_workers(workers);
        let env = annealed_cost_env_mc(&g, 0.5, &y, 0.2, &plan("env", 300), &solver())?;
        let path = annealed_cost_path_mc(&g, 0.5, &y, 0.2, &plan("path", 3000))?;
        let der = annealed_derivative_formula(&g, 0.5, &y, 0.0, &plan("der", 3000))?;
        let flips = russo_rhs(&g, 0.5, &y, &FlipSumMode::MonteCarlo(plan("flips", 20)), &solver())?;
        let lc = LyapunovConfig {
            n_list: vec![1, 2],
            box_rule: BoxRule { slope: 1, offset: 2 },
            replicates: 40,
            seed: 11,
            workers,
            ..LyapunovConfig::default()
        };
        let ly = estimate_quenched_lyapunov(2, 0.5, 0.0, &[1, 0], &lc)?;
        let diff = lyapunov_difference_profile(2, 0.3, 0.6, 0.0, &[vec![0, 1]], &lc)?;
        let values: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let stats = run(&plan("stats", 500), |s| Ok(values[(s % 500) as usize]))?;
        let merged = merge_tree(&values);
        Ok(serde_json::to_string(&(env, path, der, flips, ly, diff, stats, merged)).expect("serialisable"))
    };
    let base = render(1)?;
    let mut ok = true;
    for w in [2, 3, 8] {
        ok &= render(w)? == base;
    }
    Ok((ok, format!("7 stochastic outputs bit-identical for 1, 2, 3 and 8 workers ({} bytes)", base.len())))
}

fn c12_performance(cfg: &SuiteConfig) -> Result<(bool, String)> {
    let g3 = geo(3, 15)?;
    let env = sample_environment(&g3, 0.5, 12_000)?;
    let start = Instant::now();
    let field = solve_travel_field(&env, &[5, 3, -2], 0.0, &SolverConfig::with_tol(1e-10))?;
    let (fast_solve, solve_secs) = within(Duration::from_secs(1), start);

    let g2 = geo(2, 20)?;
    let reps = cfg.budget(10_000, 500);
    let start = Instant::now();
    let est = annealed_cost_env_mc(&g2, 0.5, &[10, 0], 0.0, &cfg.plan("c12", reps, 12_001), &solver())?;
    let (fast_mc, mc_secs) = within(Duration::from_secs(300), start);
    Ok((
        fast_solve && fast_mc && field.residual() <= 1e-10,
        format!(
            "d=3 N=15 solve in {:.3}s ({} sweeps); ENV_MC d=2 N=20 with {reps} replicates in {mc_secs:.1}s (b={:.4}±{:.4})",
            solve_secs,
            field.iterations(),
            est.value,
            est.std_error
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_criteria_pass() {
        let cfg = SuiteConfig {
            profile: Profile::Quick,
            workers: 1,
            only: vec![1, 3, 10],
        };
        let res = run_suite(&cfg, |_| {});
        assert_eq!(res.len(), 3);
        for r in &res {
            assert!(r.passed, "{}", r.line());
        }
        assert!(res[0].line().starts_with("[PASS] C01"));
    }

    #[test]
    fn profile_parsing() {
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("full".parse::<Profile>().is_err());
    }
}
