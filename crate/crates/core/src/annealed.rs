//! Annealed cost `b_{r,N}(0, y) = -ln E_r[e_N(0, y, ω + λ)]` and its
//! r-derivative by three independent routes: exhaustive enumeration of
//! environments, averaging exact solves over sampled environments, and
//! simulating free walks weighted by the local-time product
//! `φ(r, S) = Π_z (r + (1-r) e^{-ℓ_z(H(y))}) e^{-λ H(y)} 1{H(y) < T}`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{enumerate_environments, relevant_sites_excluding, sample_environment};
use crate::error::{Error, Result};
use crate::lattice::{l1_norm, BoxGeometry};
use crate::mc::{jackknife_ratio, merge_tree, pairwise_sum, run_replicates, RunPlan};
use crate::quenched::quenched_cost;
use crate::rng::stream_rng;
use crate::scalar::{log_sum_exp, Scalar};
use crate::solver::SolverConfig;

/// Blocks used by the jackknife standard error of ratio estimators.
pub const JACKKNIFE_BLOCKS: usize = 50;
/// Default central finite-difference step in r.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorKind {
    ExactEnum,
    EnvMc,
    PathMc,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::ExactEnum => "EXACT_ENUM",
            EstimatorKind::EnvMc => "ENV_MC",
            EstimatorKind::PathMc => "PATH_MC",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A travel-cost value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replicates: usize,
    pub estimator: EstimatorKind,
    pub r: f64,
    pub lambda: f64,
    pub target: Vec<i64>,
    pub dimension: usize,
    pub radius: i64,
    /// Path MC only: walks stopped by the step cap (counted as misses).
    pub capped: usize,
}

impl CostEstimate {
    fn new(kind: EstimatorKind, geometry: &BoxGeometry, r: f64, lambda: f64, y: &[i64]) -> Self {
        Self {
            value: 0.0,
            std_error: 0.0,
            replicates: 0,
            estimator: kind,
            r,
            lambda,
            target: y.to_vec(),
            dimension: geometry.dimension(),
            radius: geometry.radius(),
            capped: 0,
        }
    }
}

fn check_r(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("r must lie in [0, 1], got {r}")));
    }
    Ok(())
}

fn check_open_r(r: f64) -> Result<()> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Invalid(format!("derivatives need 0 < r < 1, got {r}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("shift lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn ln_weight(r: f64, zeros: usize, ones: usize) -> f64 {
    let part = |n: usize, p: f64| if n == 0 { 0.0 } else { n as f64 * p.ln() };
    part(zeros, r) + part(ones, 1.0 - r)
}

/// `ln e_N(0, y, ω + λ)` for every environment on the relevant sites.
///
/// The costs do not depend on r, so one enumeration serves every r.
#[derive(Debug, Clone)]
pub struct EnumeratedCosts<F> {
    geometry: Arc<BoxGeometry>,
    target: Vec<i64>,
    lambda: F,
    relevant: Vec<usize>,
    /// Indexed by mask: bit k set iff relevant site k has potential 1.
    log_e: Vec<F>,
}

impl<F: Scalar> EnumeratedCosts<F> {
    pub fn build(
        geometry: &Arc<BoxGeometry>,
        y: &[i64],
        lambda: F,
        guard: usize,
        cfg: &SolverConfig<F>,
    ) -> Result<Self> {
        check_lambda(lambda.as_f64())?;
        let relevant = relevant_sites_excluding(geometry, y)?;
        let mut log_e = Vec::with_capacity(1 << relevant.len().min(guard));
        for we in enumerate_environments::<F>(geometry, &relevant, F::lit(0.5), guard)? {
            log_e.push(-quenched_cost(&we.environment, y, lambda, cfg)?);
        }
        Ok(Self {
            geometry: Arc::clone(geometry),
            target: y.to_vec(),
            lambda,
            relevant,
            log_e,
        })
    }

    pub fn geometry(&self) -> &Arc<BoxGeometry> {
        &self.geometry
    }

    pub fn target(&self) -> &[i64] {
        &self.target
    }

    pub fn lambda(&self) -> F {
        self.lambda
    }

    pub fn relevant_sites(&self) -> &[usize] {
        &self.relevant
    }

    /// `ln e_N` per environment mask.
    pub fn log_e(&self) -> &[F] {
        &self.log_e
    }

    fn masks(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let m = self.relevant.len();
        (0..self.log_e.len()).map(move |mask| {
            let ones = (mask as u64).count_ones() as usize;
            (mask, m - ones, ones)
        })
    }

    /// `ln E_r[e_N]`.
    pub fn log_mean_e(&self, r: f64) -> f64 {
        let terms: Vec<f64> = self
            .masks()
            .map(|(mask, zeros, ones)| {
                let w = ln_weight(r, zeros, ones);
                if w == f64::NEG_INFINITY {
                    w
                } else {
                    self.log_e[mask].as_f64() + w
                }
            })
            .collect();
        log_sum_exp(terms.iter().copied())
    }

    /// Annealed cost `b_{r,N}(0, y, λ)`.
    pub fn annealed_cost(&self, r: f64) -> f64 {
        -self.log_mean_e(r)
    }

    /// Mean quenched cost `E_r[a_N(0, y, ω + λ)]`.
    pub fn mean_quenched_cost(&self, r: f64) -> f64 {
        let terms: Vec<f64> = self
            .masks()
            .map(|(mask, zeros, ones)| {
                let w = ln_weight(r, zeros, ones).exp();
                if w == 0.0 {
                    0.0
                } else {
                    -self.log_e[mask].as_f64() * w
                }
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// `-(d/dr) E_r[a_N]`, differentiating the binomial weights termwise.
    pub fn mean_cost_derivative(&self, r: f64) -> f64 {
        let terms: Vec<f64> = self
            .masks()
            .map(|(mask, zeros, ones)| {
                let w = ln_weight(r, zeros, ones).exp();
                let dw = w * (zeros as f64 / r - ones as f64 / (1.0 - r));
                self.log_e[mask].as_f64() * dw
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// `-(d/dr) b_{r,N}` by differentiating the polynomial `E_r[e_N]` termwise.
    pub fn annealed_derivative_polynomial(&self, r: f64) -> f64 {
        let shift = self.log_e.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let (mut num, mut den) = (Vec::new(), Vec::new());
        for (mask, zeros, ones) in self.masks() {
            let w = ln_weight(r, zeros, ones).exp();
            let e = (self.log_e[mask].as_f64() - shift).exp();
            num.push(e * w * (zeros as f64 / r - ones as f64 / (1.0 - r)));
            den.push(e * w);
        }
        pairwise_sum(&num) / pairwise_sum(&den)
    }
}

/// Exact annealed cost by enumerating all environments on the box minus `y`.
pub fn annealed_cost_exact(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    guard: usize,
    cfg: &SolverConfig<f64>,
) -> Result<CostEstimate> {
    check_r(r)?;
    let costs = EnumeratedCosts::build(geometry, y, lambda, guard, cfg)?;
    let mut est = CostEstimate::new(EstimatorKind::ExactEnum, geometry, r, lambda, y);
    est.value = costs.annealed_cost(r);
    est.replicates = costs.log_e().len();
    Ok(est)
}

/// `(-ln mean(exp(x)), std_error)` with the delta method, shifted for range.
pub fn log_mean_with_error(log_values: &[f64]) -> Result<(f64, f64)> {
    let shift = log_values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if shift == f64::NEG_INFINITY {
        return Err(Error::Underflow("every sampled weight is zero".into()));
    }
    let scaled: Vec<f64> = log_values.iter().map(|&v| (v - shift).exp()).collect();
    let stats = merge_tree(&scaled);
    Ok((-(shift + stats.mean.ln()), stats.std_error() / stats.mean))
}

/// Annealed cost by averaging exact quenched weights over sampled environments.
pub fn annealed_cost_env_mc(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
    cfg: &SolverConfig<f64>,
) -> Result<CostEstimate> {
    check_r(r)?;
    check_lambda(lambda)?;
    geometry.index_of(y)?;
    if plan.replicates < 2 {
        return Err(Error::Invalid("at least 2 replicates are required".into()));
    }
    let mut est = CostEstimate::new(EstimatorKind::EnvMc, geometry, r, lambda, y);
    est.replicates = plan.replicates;
    if l1_norm(y) == 0 {
        return Ok(est);
    }
    let log_e = run_replicates(plan, |_, seed| {
        let env = sample_environment(geometry, r, seed)?;
        Ok(-quenched_cost(&env, y, lambda, cfg)?)
    })?;
    let (value, se) = log_mean_with_error(&log_e)?;
    est.value = value;
    est.std_error = se;
    Ok(est)
}

/// One simulated walk from the origin until it hits `y`, leaves the box or
/// reaches the step cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    /// Site index → visits before `H(y)`; only recorded when `hit`.
    pub local_times: BTreeMap<usize, u32>,
    pub hit: bool,
    pub capped: bool,
    pub steps: u64,
}

/// Step cap `64 (2N+1)^2`.
pub fn default_step_cap(geometry: &BoxGeometry) -> u64 {
    64 * (geometry.side() as u64).pow(2)
}

/// Simulates one killed simple random walk on the box.
pub fn simulate_path<R: Rng>(geometry: &BoxGeometry, y_index: usize, cap: u64, rng: &mut R) -> PathSample {
    let deg = geometry.degree();
    let ghost = geometry.ghost();
    let mut visits: Vec<u32> = vec![0; geometry.site_count()];
    let mut touched = Vec::new();
    let mut idx = geometry.origin_index();
    let mut steps = 0u64;
    let (hit, capped) = loop {
        if idx == y_index {
            break (true, false);
        }
        if steps >= cap {
            break (false, true);
        }
        if visits[idx] == 0 {
            touched.push(idx);
        }
        visits[idx] += 1;
        steps += 1;
        let next = geometry.neighbor_indices(idx)[rng.random_range(0..deg)] as usize;
        if next == ghost {
            break (false, false);
        }
        idx = next;
    };
    let local_times = if hit {
        touched.into_iter().map(|i| (i, visits[i])).collect()
    } else {
        BTreeMap::new()
    };
    PathSample {
        local_times,
        hit,
        capped,
        steps,
    }
}

/// `ln φ(r, S)` and `Σ_z (1-e^{-ℓ_z}) / (r + e^{-ℓ_z}(1-r))` for a hitting walk.
pub fn path_weight(sample: &PathSample, r: f64, lambda: f64) -> (f64, f64) {
    let mut log_phi = -lambda * sample.steps as f64;
    let mut g = 0.0;
    for &l in sample.local_times.values() {
        let el = (-(l as f64)).exp();
        let denom = r + el * (1.0 - r);
        log_phi += denom.ln();
        g += (1.0 - el) / denom;
    }
    (log_phi, g)
}

/// `ln φ(r, S)` of each simulated walk for every `r` in `rs` (shared walks),
/// with `-inf` for misses, plus the number of capped walks.
pub fn path_log_weights(
    geometry: &Arc<BoxGeometry>,
    rs: &[f64],
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let yi = geometry.index_of(y)?;
    let cap = default_step_cap(geometry);
    let records = run_replicates(plan, |_, seed| {
        let mut rng = stream_rng(seed);
        let s = simulate_path(geometry, yi, cap, &mut rng);
        let weights: Vec<f64> = rs
            .iter()
            .map(|&r| if s.hit { path_weight(&s, r, lambda).0 } else { f64::NEG_INFINITY })
            .collect();
        Ok((weights, s.capped))
    })?;
    let capped = records.iter().filter(|t| t.1).count();
    Ok((records.into_iter().map(|t| t.0).collect(), capped))
}

/// `ln e_N(0, y, ω_r + λ)` per replicate for every `r` in `rs`, with the
/// environments for different `r` coupled through shared uniforms.
pub fn env_log_weights(
    geometry: &Arc<BoxGeometry>,
    rs: &[f64],
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
    cfg: &SolverConfig<f64>,
) -> Result<Vec<Vec<f64>>> {
    geometry.index_of(y)?;
    for &r in rs {
        check_r(r)?;
    }
    run_replicates(plan, |_, seed| {
        let env = sample_environment(geometry, rs[0], seed)?;
        rs.iter()
            .map(|&r| {
                let e = if r == rs[0] { env.clone() } else { env.couple(r)? };
                Ok(-quenched_cost(&e, y, lambda, cfg)?)
            })
            .collect()
    })
}

/// Difference `b_a - b_b` of two costs `-ln mean(exp(·))` estimated on the
/// same replicates, with a delta-method standard error.
pub fn coupled_cost_difference(log_a: &[f64], log_b: &[f64]) -> Result<(f64, f64)> {
    let (va, _) = log_mean_with_error(log_a)?;
    let (vb, _) = log_mean_with_error(log_b)?;
    let scaled = |xs: &[f64]| {
        let shift = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e: Vec<f64> = xs.iter().map(|&v| (v - shift).exp()).collect();
        let mean = merge_tree(&e).mean;
        e.into_iter().map(|v| v / mean).collect::<Vec<_>>()
    };
    // b_a - b_b = -ln m_a + ln m_b; linearised per replicate
    let za = scaled(log_a);
    let zb = scaled(log_b);
    let z: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| b - a).collect();
    Ok((va - vb, merge_tree(&z).std_error()))
}

/// Per-walk record used by the path estimators: `(ln φ, g, capped)`.
fn path_records(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
) -> Result<Vec<(f64, f64, bool)>> {
    let yi = geometry.index_of(y)?;
    let cap = default_step_cap(geometry);
    run_replicates(plan, |_, seed| {
        let mut rng = stream_rng(seed);
        let s = simulate_path(geometry, yi, cap, &mut rng);
        if !s.hit {
            return Ok((f64::NEG_INFINITY, 0.0, s.capped));
        }
        let (lp, g) = path_weight(&s, r, lambda);
        Ok((lp, g, false))
    })
}

/// Annealed cost from simulated free walks weighted by `φ(r, S)`.
pub fn annealed_cost_path_mc(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
) -> Result<CostEstimate> {
    check_r(r)?;
    check_lambda(lambda)?;
    geometry.index_of(y)?;
    if plan.replicates < 2 {
        return Err(Error::Invalid("at least 2 replicates are required".into()));
    }
    let mut est = CostEstimate::new(EstimatorKind::PathMc, geometry, r, lambda, y);
    est.replicates = plan.replicates;
    if l1_norm(y) == 0 {
        return Ok(est);
    }
    let records = path_records(geometry, r, y, lambda, plan)?;
    est.capped = records.iter().filter(|t| t.2).count();
    let log_phi: Vec<f64> = records.iter().map(|t| t.0).collect();
    let (value, se) = log_mean_with_error(&log_phi).map_err(|_| Error::NoHits {
        replicates: plan.replicates,
    })?;
    est.value = value;
    est.std_error = se;
    Ok(est)
}

/// The derivative `-(d/dr) b_{r,N}(0, y)` by up to three routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub r: f64,
    pub formula: Option<f64>,
    pub formula_se: Option<f64>,
    pub flip: Option<f64>,
    pub fd: Option<f64>,
    /// Largest absolute difference between any two present values.
    pub abs_disc: f64,
}

impl DerivativeReport {
    pub fn new(r: f64) -> Self {
        Self {
            r,
            formula: None,
            formula_se: None,
            flip: None,
            fd: None,
            abs_disc: 0.0,
        }
    }

    /// Recomputes `abs_disc` from the present values.
    pub fn finish(mut self) -> Self {
        let vals: Vec<f64> = [self.formula, self.flip, self.fd].into_iter().flatten().collect();
        self.abs_disc = vals
            .iter()
            .flat_map(|a| vals.iter().map(move |b| (a - b).abs()))
            .fold(0.0, f64::max);
        self
    }
}

/// Path-MC ratio estimator `E⁰[φ g] / E⁰[φ]` with a block-jackknife error.
pub fn annealed_derivative_formula(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    plan: &RunPlan,
) -> Result<DerivativeReport> {
    check_open_r(r)?;
    check_lambda(lambda)?;
    geometry.index_of(y)?;
    if plan.replicates < 2 {
        return Err(Error::Invalid("at least 2 replicates are required".into()));
    }
    let mut rep = DerivativeReport::new(r);
    if l1_norm(y) == 0 {
        rep.formula = Some(0.0);
        rep.formula_se = Some(0.0);
        return Ok(rep.finish());
    }
    let records = path_records(geometry, r, y, lambda, plan)?;
    let shift = records.iter().fold(f64::NEG_INFINITY, |m, t| m.max(t.0));
    if shift == f64::NEG_INFINITY {
        return Err(Error::NoHits {
            replicates: plan.replicates,
        });
    }
    let phi: Vec<f64> = records.iter().map(|t| (t.0 - shift).exp()).collect();
    let phig: Vec<f64> = records.iter().zip(&phi).map(|(t, p)| p * t.1).collect();
    let (value, se) = jackknife_ratio(&phig, &phi, JACKKNIFE_BLOCKS);
    rep.formula = Some(value);
    rep.formula_se = Some(se);
    Ok(rep.finish())
}

/// `Σ_z E_r[e_N(ω_z^0) - e_N(ω_z^1)] / E_r[e_N]` with explicit flipped solves.
pub fn flip_derivative(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    guard: usize,
    cfg: &SolverConfig<f64>,
) -> Result<f64> {
    check_open_r(r)?;
    check_lambda(lambda)?;
    if l1_norm(y) == 0 {
        geometry.index_of(y)?;
        return Ok(0.0);
    }
    let relevant = relevant_sites_excluding(geometry, y)?;
    let envs: Vec<_> = enumerate_environments::<f64>(geometry, &relevant, r, guard)?.collect();
    let mut log_e = Vec::with_capacity(envs.len());
    for we in &envs {
        log_e.push(-quenched_cost(&we.environment, y, lambda, cfg)?);
    }
    let shift = log_e.iter().fold(f64::NEG_INFINITY, |m: f64, &v| m.max(v));
    let mut num = Vec::with_capacity(envs.len());
    let mut den = Vec::with_capacity(envs.len());
    for (we, &le) in envs.iter().zip(&log_e) {
        let base = (le - shift).exp();
        let mut diff = 0.0;
        for &zi in &relevant {
            let other = we.environment.with_value_at(zi, 1 - we.environment.value_at(zi));
            let flipped = (-quenched_cost(&other, y, lambda, cfg)? - shift).exp();
            // e(ω_z^0) - e(ω_z^1)
            diff += if we.environment.value_at(zi) == 0 {
                base - flipped
            } else {
                flipped - base
            };
        }
        num.push(we.weight * diff);
        den.push(we.weight * base);
    }
    Ok(pairwise_sum(&num) / pairwise_sum(&den))
}

/// Central finite difference `-(b(r+h) - b(r-h)) / 2h`, optionally refined by
/// one Richardson step with `h/2`.
pub fn fd_derivative(costs: &EnumeratedCosts<f64>, r: f64, h: f64, richardson: bool) -> Result<f64> {
    if !(h > 0.0) || r - h < 0.0 || r + h > 1.0 {
        return Err(Error::Invalid(format!("finite-difference step {h} leaves [0, 1] at r = {r}")));
    }
    let central = |h: f64| -(costs.annealed_cost(r + h) - costs.annealed_cost(r - h)) / (2.0 * h);
    let d = central(h);
    Ok(if richardson { (4.0 * central(h / 2.0) - d) / 3.0 } else { d })
}

/// Flip and finite-difference derivatives on the exact enumeration.
pub fn exact_derivative_report(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    lambda: f64,
    guard: usize,
    cfg: &SolverConfig<f64>,
) -> Result<DerivativeReport> {
    let mut rep = DerivativeReport::new(r);
    rep.flip = Some(flip_derivative(geometry, r, y, lambda, guard, cfg)?);
    let costs = EnumeratedCosts::build(geometry, y, lambda, guard, cfg)?;
    rep.fd = Some(fd_derivative(&costs, r, DEFAULT_FD_STEP, false)?);
    Ok(rep.finish())
}
