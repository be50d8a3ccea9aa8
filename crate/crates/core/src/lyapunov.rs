//! Quenched and annealed Lyapunov exponents by normalised costs along a
//! direction: `(1/n) E_r[a_{N(n)}(0, nx, ω+λ)]` and `(1/n) b_{r,N(n)}(0, nx, λ)`
//! over a list of distances `n`, with the box radius chosen by a linear rule.
//!
//! The same replicate seeds are used for every `n`, every `r` and every `λ`.
//! Site uniforms are keyed by coordinates, so the environments for different
//! `n` are restrictions of one another and those for different `r` are
//! monotonically coupled.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annealed::{coupled_cost_difference, env_log_weights, log_mean_with_error, path_log_weights, EnumeratedCosts, EstimatorKind};
use crate::environment::{sample_environment, DEFAULT_ENUMERATION_GUARD};
use crate::error::{Error, Result};
use crate::lattice::{build_box, coordinate_gcd, l1_norm, linf_norm, scale_site, BoxGeometry};
use crate::mc::{merge_tree, run_replicates, RunPlan};
use crate::quenched::quenched_cost;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExponentKind {
    Quenched,
    Annealed,
}

impl ExponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExponentKind::Quenched => "QUENCHED",
            ExponentKind::Annealed => "ANNEALED",
        }
    }
}

impl fmt::Display for ExponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Box radius rule `N(n) = slope · n · ‖x‖_∞ + offset`, written `"2n+5"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxRule {
    pub slope: i64,
    pub offset: i64,
}

impl Default for BoxRule {
    fn default() -> Self {
        Self { slope: 2, offset: 5 }
    }
}

impl BoxRule {
    pub fn radius(&self, n: u64, x: &[i64]) -> i64 {
        self.slope * n as i64 * linf_norm(x) + self.offset
    }
}

impl fmt::Display for BoxRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}n+{}", self.slope, self.offset)
    }
}

impl FromStr for BoxRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("box rule `{s}` is not of the form An+B"));
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let (a, b) = compact.split_once('n').ok_or_else(bad)?;
        let slope = if a.is_empty() { 1 } else { a.parse().map_err(|_| bad())? };
        let offset = if b.is_empty() {
            0
        } else {
            b.strip_prefix('+').unwrap_or(b).parse().map_err(|_| bad())?
        };
        if slope < 1 || offset < 0 {
            return Err(Error::Invalid(format!("box rule {s} must have slope ≥ 1 and offset ≥ 0")));
        }
        Ok(Self { slope, offset })
    }
}

/// Settings shared by the exponent estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub n_list: Vec<u64>,
    pub box_rule: BoxRule,
    /// Annealed estimator; quenched exponents use exact solves per environment.
    pub estimator: EstimatorKind,
    pub replicates: usize,
    pub seed: u64,
    pub workers: usize,
    pub guard: usize,
    pub solver: SolverConfig<f64>,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            n_list: vec![2, 4, 8],
            box_rule: BoxRule::default(),
            estimator: EstimatorKind::EnvMc,
            replicates: 200,
            seed: 1,
            workers: 0,
            guard: DEFAULT_ENUMERATION_GUARD,
            solver: SolverConfig::default(),
        }
    }
}

impl LyapunovConfig {
    fn plan(&self, id: &str) -> RunPlan {
        RunPlan::new(id, self.replicates, self.seed).with_workers(self.workers)
    }

    fn validate(&self, x: &[i64]) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::Invalid("n_list must not be empty".into()));
        }
        if self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "n_list must be strictly increasing positive integers, got {:?}",
                self.n_list
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be at least 1".into()));
        }
        if l1_norm(x) != 0 && coordinate_gcd(x) != 1 {
            return Err(Error::Invalid(format!("direction {x:?} is not primitive (coordinate gcd ≠ 1)")));
        }
        for &n in &self.n_list {
            if self.box_rule.radius(n, x) < n as i64 * linf_norm(x) || self.box_rule.radius(n, x) < 1 {
                return Err(Error::Invalid(format!(
                    "box rule {} gives a box not containing {n}·x",
                    self.box_rule
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEntry {
    pub n: u64,
    pub radius: i64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovPoint {
    pub kind: ExponentKind,
    pub r: f64,
    pub lambda: f64,
    pub direction: Vec<i64>,
    pub estimator: Option<EstimatorKind>,
    pub entries: Vec<LyapunovEntry>,
    /// Running minimum of the normalised costs.
    pub extrapolated: f64,
    pub extrapolation_method: String,
    /// Intercept of a least-squares fit of value against 1/n (diagnostic only).
    pub fit_intercept: Option<f64>,
}

fn inverse_n_intercept(entries: &[LyapunovEntry]) -> Option<f64> {
    if entries.len() < 2 {
        return None;
    }
    let k = entries.len() as f64;
    let xs: Vec<f64> = entries.iter().map(|e| 1.0 / e.n as f64).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = entries.iter().map(|e| e.value).sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(entries).map(|(x, e)| (x - mx) * (e.value - my)).sum();
    Some(my - sxy / sxx * mx)
}

fn finish(
    kind: ExponentKind,
    r: f64,
    lambda: f64,
    x: &[i64],
    estimator: Option<EstimatorKind>,
    entries: Vec<LyapunovEntry>,
) -> LyapunovPoint {
    let extrapolated = entries.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    LyapunovPoint {
        kind,
        r,
        lambda,
        direction: x.to_vec(),
        estimator,
        fit_intercept: inverse_n_intercept(&entries),
        extrapolated,
        extrapolation_method: "running_min".into(),
        entries,
    }
}

fn zero_point(kind: ExponentKind, r: f64, lambda: f64, x: &[i64], cfg: &LyapunovConfig) -> LyapunovPoint {
    let entries = cfg
        .n_list
        .iter()
        .map(|&n| LyapunovEntry {
            n,
            radius: cfg.box_rule.radius(n, x),
            value: 0.0,
            std_error: 0.0,
        })
        .collect();
    let mut p = finish(kind, r, lambda, x, None, entries);
    p.extrapolated = 0.0;
    p
}

fn check_inputs(d: usize, r: f64, lambda: f64, x: &[i64]) -> Result<()> {
    if x.len() != d {
        return Err(Error::Invalid(format!("direction {x:?} does not have {d} coordinates")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("r must lie in [0, 1], got {r}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("shift lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn box_for(d: usize, n: u64, x: &[i64], cfg: &LyapunovConfig) -> Result<Arc<BoxGeometry>> {
    Ok(Arc::new(build_box(d, cfg.box_rule.radius(n, x))?))
}

/// Per-replicate quenched costs `a_N(0, nx, ω_r + λ)` for each `r` in `rs`.
fn quenched_costs(
    geometry: &Arc<BoxGeometry>,
    rs: &[f64],
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
    solver: &SolverConfig<f64>,
) -> Result<Vec<Vec<f64>>> {
    run_replicates(plan, |_, seed| {
        let env = sample_environment(geometry, rs[0], seed)?;
        rs.iter()
            .map(|&r| {
                let e = if r == rs[0] { env.clone() } else { env.couple(r)? };
                quenched_cost(&e, y, lambda, solver)
            })
            .collect()
    })
}

/// Quenched exponent `α_r(λ, x)` estimate.
pub fn estimate_quenched_lyapunov(
    d: usize,
    r: f64,
    lambda: f64,
    x: &[i64],
    cfg: &LyapunovConfig,
) -> Result<LyapunovPoint> {
    check_inputs(d, r, lambda, x)?;
    cfg.validate(x)?;
    if l1_norm(x) == 0 {
        return Ok(zero_point(ExponentKind::Quenched, r, lambda, x, cfg));
    }
    let mut entries = Vec::new();
    for &n in &cfg.n_list {
        let g = box_for(d, n, x, cfg)?;
        let y = scale_site(x, n as i64);
        let costs = quenched_costs(&g, &[r], &y, lambda, &cfg.plan("quenched-lyapunov"), &cfg.solver)?;
        let per: Vec<f64> = costs.iter().map(|c| c[0] / n as f64).collect();
        let stats = merge_tree(&per);
        entries.push(LyapunovEntry {
            n,
            radius: g.radius(),
            value: stats.mean,
            std_error: stats.std_error(),
        });
    }
    Ok(finish(ExponentKind::Quenched, r, lambda, x, None, entries))
}

/// Annealed cost values `b_{r,N}(0, y, λ)` for each `r` with standard errors,
/// plus coupled differences `b_{rs[0]} - b_{rs[k]}`.
struct AnnealedEval {
    values: Vec<(f64, f64)>,
    diffs: Vec<(f64, f64)>,
}

fn annealed_eval(
    geometry: &Arc<BoxGeometry>,
    rs: &[f64],
    y: &[i64],
    lambda: f64,
    cfg: &LyapunovConfig,
) -> Result<AnnealedEval> {
    let log_weights = match cfg.estimator {
        EstimatorKind::ExactEnum => {
            let costs = EnumeratedCosts::build(geometry, y, lambda, cfg.guard, &cfg.solver)?;
            let values: Vec<(f64, f64)> = rs.iter().map(|&r| (costs.annealed_cost(r), 0.0)).collect();
            let diffs = values.iter().map(|v| (values[0].0 - v.0, 0.0)).collect();
            return Ok(AnnealedEval { values, diffs });
        }
        EstimatorKind::EnvMc => env_log_weights(geometry, rs, y, lambda, &cfg.plan("annealed-lyapunov"), &cfg.solver)?,
        EstimatorKind::PathMc => path_log_weights(geometry, rs, y, lambda, &cfg.plan("annealed-lyapunov"))?.0,
    };
    let column = |k: usize| log_weights.iter().map(|w| w[k]).collect::<Vec<f64>>();
    let no_hits = || Error::NoHits {
        replicates: cfg.replicates,
    };
    let mut values = Vec::new();
    let mut diffs = Vec::new();
    let first = column(0);
    for k in 0..rs.len() {
        let col = column(k);
        values.push(log_mean_with_error(&col).map_err(|_| no_hits())?);
        diffs.push(coupled_cost_difference(&first, &col).map_err(|_| no_hits())?);
    }
    Ok(AnnealedEval { values, diffs })
}

/// Annealed exponent `β_r(λ, x)` estimate with the configured estimator.
pub fn estimate_annealed_lyapunov(
    d: usize,
    r: f64,
    lambda: f64,
    x: &[i64],
    cfg: &LyapunovConfig,
) -> Result<LyapunovPoint> {
    check_inputs(d, r, lambda, x)?;
    cfg.validate(x)?;
    if l1_norm(x) == 0 {
        let mut p = zero_point(ExponentKind::Annealed, r, lambda, x, cfg);
        p.estimator = Some(cfg.estimator);
        return Ok(p);
    }
    let mut entries = Vec::new();
    for &n in &cfg.n_list {
        let g = box_for(d, n, x, cfg)?;
        let y = scale_site(x, n as i64);
        let eval = annealed_eval(&g, &[r], &y, lambda, cfg)?;
        let (v, se) = eval.values[0];
        entries.push(LyapunovEntry {
            n,
            radius: g.radius(),
            value: v / n as f64,
            std_error: se / n as f64,
        });
    }
    Ok(finish(ExponentKind::Annealed, r, lambda, x, Some(cfg.estimator), entries))
}

/// Coupled differences of normalised costs for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub direction: Vec<i64>,
    pub n: u64,
    pub radius: i64,
    /// `(α̂_p - α̂_q) / ‖x‖₁`.
    pub quenched: f64,
    pub quenched_se: f64,
    /// `(β̂_p - β̂_q) / ‖x‖₁`.
    pub annealed: f64,
    pub annealed_se: f64,
}

/// Per-direction coupled differences at every `n`; the headline value for a
/// direction is its row at the largest `n`.
pub fn lyapunov_difference_profile(
    d: usize,
    p: f64,
    q: f64,
    lambda: f64,
    directions: &[Vec<i64>],
    cfg: &LyapunovConfig,
) -> Result<Vec<DifferenceRow>> {
    if !(0.0 < p && p <= q && q < 1.0) {
        return Err(Error::Invalid(format!("need 0 < p ≤ q < 1, got p = {p}, q = {q}")));
    }
    let mut rows = Vec::new();
    for x in directions {
        check_inputs(d, p, lambda, x)?;
        cfg.validate(x)?;
        let norm = l1_norm(x) as f64;
        for &n in &cfg.n_list {
            let radius = cfg.box_rule.radius(n, x);
            if norm == 0.0 {
                rows.push(DifferenceRow {
                    direction: x.clone(),
                    n,
                    radius,
                    quenched: 0.0,
                    quenched_se: 0.0,
                    annealed: 0.0,
                    annealed_se: 0.0,
                });
                continue;
            }
            let g = box_for(d, n, x, cfg)?;
            let y = scale_site(x, n as i64);
            let scale = n as f64 * norm;
            let costs = quenched_costs(&g, &[p, q], &y, lambda, &cfg.plan("difference-quenched"), &cfg.solver)?;
            let per: Vec<f64> = costs.iter().map(|c| (c[0] - c[1]) / scale).collect();
            let qs = merge_tree(&per);
            let an = annealed_eval(&g, &[p, q], &y, lambda, cfg)?;
            let (ad, ase) = an.diffs[1];
            rows.push(DifferenceRow {
                direction: x.clone(),
                n,
                radius,
                quenched: qs.mean,
                quenched_se: qs.std_error(),
                annealed: ad / scale,
                annealed_se: ase / scale,
            });
        }
    }
    Ok(rows)
}

/// The row at the largest `n` for each direction.
pub fn headline_rows(rows: &[DifferenceRow]) -> Vec<DifferenceRow> {
    let mut out: Vec<DifferenceRow> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|r| r.direction == row.direction) {
            Some(slot) if slot.n < row.n => *slot = row.clone(),
            Some(_) => {}
            None => out.push(row.clone()),
        }
    }
    out
}
