//! Rate functions `I_r(x) = sup_{λ≥0} {α_r(λ, x) - λ}` (quenched) and
//! `J_r(x) = sup_{λ≥0} {β_r(λ, x) - λ}` (annealed) by golden-section search.
//!
//! The objective is concave in λ, so the bracket `[0, λ_hi]` is grown by
//! doubling until `g(λ_hi) < g(λ_hi / 2)` and then narrowed by golden
//! sections. Every evaluated point is checked for concavity against its
//! neighbours; a violation beyond the noise level is an error.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::annealed::EnumeratedCosts;
use crate::environment::DEFAULT_ENUMERATION_GUARD;
use crate::error::{Error, Result};
use crate::lattice::{build_box, coordinate_gcd, scale_site};
use crate::lyapunov::{estimate_annealed_lyapunov, estimate_quenched_lyapunov, ExponentKind, LyapunovConfig};
use crate::solver::SolverConfig;

/// Where exponent values come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExponentBackend {
    /// `(1/n) E_r[a_N(0, nv, ω+λ)]` or `(1/n) b_{r,N}(0, nv, λ)` by enumeration.
    Exact { n: u64, radius: i64, guard: usize },
    /// Monte Carlo Lyapunov estimates (running minimum over the n list).
    MonteCarlo(LyapunovConfig),
}

impl Default for ExponentBackend {
    fn default() -> Self {
        ExponentBackend::Exact {
            n: 2,
            radius: 4,
            guard: DEFAULT_ENUMERATION_GUARD,
        }
    }
}

impl ExponentBackend {
    fn schedule(&self) -> String {
        match self {
            ExponentBackend::Exact { n, radius, .. } => format!("exact:n={n}:N={radius}"),
            ExponentBackend::MonteCarlo(c) => format!(
                "mc:{}:{:?}:{}:{}:{}",
                c.box_rule, c.n_list, c.estimator, c.replicates, c.seed
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSearchConfig {
    pub backend: ExponentBackend,
    pub bracket_start: f64,
    pub bracket_cap: f64,
    pub tol: f64,
    pub max_evaluations: usize,
    pub solver: SolverConfig<f64>,
}

impl Default for RateSearchConfig {
    fn default() -> Self {
        Self {
            backend: ExponentBackend::default(),
            bracket_start: 2.0,
            bracket_cap: 64.0,
            tol: 1e-6,
            max_evaluations: 60,
            solver: SolverConfig::default(),
        }
    }
}

/// One exponent value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentValue {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    kind: ExponentKind,
    r: u64,
    lambda: u64,
    direction: Vec<i64>,
    schedule: String,
}

/// Exponent values keyed by (kind, r, λ, direction, schedule), shared across
/// searches. Inserts never overwrite an existing entry.
#[derive(Debug, Default)]
pub struct ExponentCache {
    map: RwLock<HashMap<CacheKey, ExponentValue>>,
    enumerations: RwLock<HashMap<(Vec<i64>, u64, i64, u64), Arc<EnumeratedCosts<f64>>>>,
}

impl ExponentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<ExponentValue> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    fn insert(&self, key: CacheKey, v: ExponentValue) -> ExponentValue {
        *self.map.write().expect("cache lock").entry(key).or_insert(v)
    }

    fn enumeration(
        &self,
        d: usize,
        v: &[i64],
        lambda: f64,
        n: u64,
        radius: i64,
        guard: usize,
        solver: &SolverConfig<f64>,
    ) -> Result<Arc<EnumeratedCosts<f64>>> {
        let key = (v.to_vec(), n, radius, lambda.to_bits());
        if let Some(c) = self.enumerations.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(c));
        }
        let g = Arc::new(build_box(d, radius)?);
        let costs = Arc::new(EnumeratedCosts::build(&g, &scale_site(v, n as i64), lambda, guard, solver)?);
        let mut map = self.enumerations.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(costs)))
    }
}

/// Exponent `α_r(λ, v)` or `β_r(λ, v)` for an integer direction, through the cache.
pub fn exponent(
    kind: ExponentKind,
    d: usize,
    r: f64,
    lambda: f64,
    v: &[i64],
    cfg: &RateSearchConfig,
    cache: &ExponentCache,
) -> Result<ExponentValue> {
    let key = CacheKey {
        kind,
        r: r.to_bits(),
        lambda: lambda.to_bits(),
        direction: v.to_vec(),
        schedule: cfg.backend.schedule(),
    };
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let value = match &cfg.backend {
        ExponentBackend::Exact { n, radius, guard } => {
            let costs = cache.enumeration(d, v, lambda, *n, *radius, *guard, &cfg.solver)?;
            let raw = match kind {
                ExponentKind::Quenched => costs.mean_quenched_cost(r),
                ExponentKind::Annealed => costs.annealed_cost(r),
            };
            ExponentValue {
                value: raw / *n as f64,
                std_error: 0.0,
            }
        }
        ExponentBackend::MonteCarlo(lc) => {
            let p = match kind {
                ExponentKind::Quenched => estimate_quenched_lyapunov(d, r, lambda, v, lc)?,
                ExponentKind::Annealed => estimate_annealed_lyapunov(d, r, lambda, v, lc)?,
            };
            let se = p
                .entries
                .iter()
                .find(|e| e.value == p.extrapolated)
                .map_or(0.0, |e| e.std_error);
            ExponentValue {
                value: p.extrapolated,
                std_error: se,
            }
        }
    };
    Ok(cache.insert(key, value))
}

/// Splits a real vector `x` into `t · v` with `v` a primitive integer
/// direction and `t > 0`. Fails when no small integer multiple of `x` is
/// (numerically) integral.
pub fn primitive_direction(x: &[f64]) -> Result<(Vec<i64>, f64)> {
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid(format!("x = {x:?} has non-finite coordinates")));
    }
    let smallest = x.iter().map(|c| c.abs()).filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
    if smallest == f64::INFINITY {
        return Ok((vec![0; x.len()], 0.0));
    }
    for k in 1..=1000 {
        let w: Vec<f64> = x.iter().map(|c| c / smallest * k as f64).collect();
        if w.iter().all(|c| (c - c.round()).abs() < 1e-9 * c.abs().max(1.0)) {
            let v: Vec<i64> = w.iter().map(|c| c.round() as i64).collect();
            let g = coordinate_gcd(&v);
            let v: Vec<i64> = v.iter().map(|c| c / g).collect();
            let t = x.iter().zip(&v).find(|(_, &vi)| vi != 0).map(|(c, &vi)| c / vi as f64).expect("nonzero");
            return Ok((v, t));
        }
    }
    Err(Error::Invalid(format!(
        "x = {x:?} is not a rational multiple of a small lattice direction"
    )))
}

/// One evaluated point `(λ, g(λ), std_error)` of the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub lambda: f64,
    pub g: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFunctionValue {
    pub kind: ExponentKind,
    pub r: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub std_error: f64,
    /// Maximiser λ*; equals the bracket cap when `at_bracket_max` is set.
    pub supremizer: f64,
    pub at_bracket_max: bool,
    pub bracket: (f64, f64),
    pub evaluations: usize,
    pub trajectory: Vec<SearchPoint>,
}

impl RateFunctionValue {
    /// `"AT_BRACKET_MAX"` or the numeric supremizer.
    pub fn supremizer_label(&self) -> String {
        if self.at_bracket_max {
            "AT_BRACKET_MAX".into()
        } else {
            self.supremizer.to_string()
        }
    }
}

fn check_concavity(points: &[SearchPoint]) -> Result<()> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    sorted.dedup_by(|a, b| a.lambda == b.lambda);
    for w in sorted.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        let t = (b.lambda - a.lambda) / (c.lambda - a.lambda);
        let chord = a.g + t * (c.g - a.g);
        let noise = 3.0 * (a.std_error.powi(2) + b.std_error.powi(2) + c.std_error.powi(2)).sqrt();
        let slack = noise + 1e-9 * (1.0 + chord.abs());
        if b.g < chord - slack {
            return Err(Error::NonConcave(a.lambda, b.lambda, c.lambda, a.g, b.g, c.g));
        }
    }
    Ok(())
}

/// `sup_{λ≥0} {exponent(λ, x) - λ}` for a real `x` in the open unit ℓ¹ ball.
pub fn rate_function(
    d: usize,
    r: f64,
    x: &[f64],
    kind: ExponentKind,
    cfg: &RateSearchConfig,
    cache: &ExponentCache,
) -> Result<RateFunctionValue> {
    if x.len() != d {
        return Err(Error::Invalid(format!("x = {x:?} does not have {d} coordinates")));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Invalid(format!("rate functions need 0 < r ≤ 1, got {r}")));
    }
    let l1: f64 = x.iter().map(|c| c.abs()).sum();
    if l1 >= 1.0 {
        return Err(Error::Invalid(format!(
            "x = {x:?} has ‖x‖₁ = {l1} ≥ 1; only the open unit ℓ¹ ball is supported"
        )));
    }
    let mut out = RateFunctionValue {
        kind,
        r,
        x: x.to_vec(),
        value: 0.0,
        std_error: 0.0,
        supremizer: 0.0,
        at_bracket_max: false,
        bracket: (0.0, 0.0),
        evaluations: 0,
        trajectory: Vec::new(),
    };
    if l1 == 0.0 {
        return Ok(out);
    }
    let (v, t) = primitive_direction(x)?;

    let mut points: Vec<SearchPoint> = Vec::new();
    let mut eval = |lambda: f64| -> Result<SearchPoint> {
        if let Some(p) = points.iter().find(|p| p.lambda == lambda) {
            return Ok(*p);
        }
        if points.len() >= cfg.max_evaluations {
            return Err(Error::Invalid(format!(
                "rate search exceeded its budget of {} exponent evaluations",
                cfg.max_evaluations
            )));
        }
        let e = exponent(kind, d, r, lambda, &v, cfg, cache)?;
        let p = SearchPoint {
            lambda,
            g: t * e.value - lambda,
            std_error: t * e.std_error,
        };
        points.push(p);
        check_concavity(&points)?;
        Ok(p)
    };

    // bracket growth
    eval(0.0)?;
    let mut hi = cfg.bracket_start;
    let mut at_cap = false;
    loop {
        let mid = eval(hi / 2.0)?;
        let top = eval(hi)?;
        if top.g < mid.g {
            break;
        }
        if hi >= cfg.bracket_cap {
            at_cap = true;
            break;
        }
        hi = (hi * 2.0).min(cfg.bracket_cap);
    }

    let (mut lo, mut hi_b) = (0.0, hi);
    if !at_cap {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi_b - inv_phi * (hi_b - lo);
        let mut b = lo + inv_phi * (hi_b - lo);
        let mut fa = eval(a)?.g;
        let mut fb = eval(b)?.g;
        while hi_b - lo > cfg.tol {
            if fa >= fb {
                hi_b = b;
                b = a;
                fb = fa;
                a = hi_b - inv_phi * (hi_b - lo);
                fa = eval(a)?.g;
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + inv_phi * (hi_b - lo);
                fb = eval(b)?.g;
            }
        }
    } else {
        lo = hi_b;
    }

    let best = points
        .iter()
        .copied()
        .max_by(|a, b| a.g.total_cmp(&b.g))
        .expect("at least one evaluation");
    out.value = best.g;
    out.std_error = best.std_error;
    out.supremizer = if at_cap { cfg.bracket_cap } else { best.lambda };
    out.at_bracket_max = at_cap;
    out.bracket = (lo, hi_b);
    out.evaluations = points.len();
    out.trajectory = points;
    Ok(out)
}
