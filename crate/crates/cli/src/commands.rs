use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use serde::Serialize;

use rwrp::annealed::{
    annealed_cost_env_mc, annealed_cost_exact, annealed_cost_path_mc, annealed_derivative_formula,
    exact_derivative_report, fd_derivative, CostEstimate, DerivativeReport, EnumeratedCosts, EstimatorKind,
    DEFAULT_FD_STEP,
};
use rwrp::bounds::{
    annealed_log_constant, check_annealed_bounds, check_quenched_bounds, check_rate_bounds, BoundCell, BoundsConfig,
    ExactCell, Verdict,
};
use rwrp::environment::binomial_weight;
use rwrp::lyapunov::{
    estimate_annealed_lyapunov, estimate_quenched_lyapunov, lyapunov_difference_profile, ExponentKind,
    LyapunovConfig, LyapunovPoint,
};
use rwrp::mc::{self, RunPlan};
use rwrp::quenched::{expected_range, flip_bound_table, return_weight_psi, russo_rhs, FlipSumMode};
use rwrp::rate::{rate_function, ExponentBackend, ExponentCache, RateSearchConfig};
use rwrp::scalar::one_minus_inv_e;
use rwrp::verify::{run_suite, SuiteConfig};
use rwrp::{build_box, l1_norm, sample_environment, BoxGeometry, Environment, Error, SolverConfigF64};

use crate::opts::{Command, Estimator, Kind, Resolved};
use crate::output::{coords, emit};
use crate::CliError;

type Out = Result<(), CliError>;

pub fn run(cfg: &Resolved) -> Out {
    match cfg.command {
        Command::Solve => solve(cfg),
        Command::Cost => cost(cfg),
        Command::Derivative => derivative(cfg),
        Command::Russo => flip_sum_check(cfg),
        Command::Lyapunov => lyapunov(cfg),
        Command::Bounds => bounds(cfg),
        Command::Rate => rate(cfg),
        Command::Oracle => oracle(cfg),
        Command::Verify => verify(cfg),
    }
}

fn geometry(cfg: &Resolved) -> Result<Arc<BoxGeometry>, CliError> {
    Ok(Arc::new(build_box(cfg.d, cfg.radius)?))
}

fn solver(cfg: &Resolved) -> SolverConfigF64 {
    SolverConfigF64::with_tol(cfg.tol)
}

fn plan(cfg: &Resolved, id: &str, index: usize) -> RunPlan {
    let plan = RunPlan::new(id, cfg.replicates, cfg.seed).with_workers(cfg.workers);
    match &cfg.checkpoint {
        Some(path) if cfg.r.len() == 1 => plan.with_checkpoint(path, cfg.checkpoint_every),
        Some(path) => plan.with_checkpoint(format!("{}.{index}", path.display()), cfg.checkpoint_every),
        None => plan,
    }
}

fn core_estimator(e: Estimator) -> EstimatorKind {
    match e {
        Estimator::Exact => EstimatorKind::ExactEnum,
        Estimator::EnvMc => EstimatorKind::EnvMc,
        Estimator::PathMc => EstimatorKind::PathMc,
    }
}

fn lyapunov_config(cfg: &Resolved) -> LyapunovConfig {
    LyapunovConfig {
        n_list: cfg.n_list.clone(),
        box_rule: cfg.rule,
        estimator: core_estimator(cfg.estimator),
        replicates: cfg.replicates,
        seed: cfg.seed,
        workers: cfg.workers,
        guard: cfg.guard,
        solver: solver(cfg),
    }
}

fn unsupported(what: &str) -> CliError {
    CliError::validation("invalid", what.to_string())
}

#[derive(Serialize)]
struct FieldRow {
    index: usize,
    site: String,
    omega: u8,
    log_u: f64,
    cost: f64,
}

#[derive(Serialize)]
struct FlipRow {
    z_coords: String,
    omega_z: u8,
    log_ratio: f64,
    psi: f64,
    hit_prob: f64,
    bound_rhs: f64,
}

#[derive(Serialize)]
struct SolveResult<T> {
    cost: f64,
    residual: f64,
    sweeps: usize,
    ones: usize,
    expected_range: Option<f64>,
    rows: T,
}

fn solve(cfg: &Resolved) -> Out {
    let env = match &cfg.env {
        Some(path) => {
            let f = File::open(path).map_err(|e| CliError::validation("io", format!("env: {}: {e}", path.display())))?;
            let env = Environment::read_from(BufReader::new(f))?;
            let g = env.geometry();
            if g.dimension() != cfg.d || g.radius() != cfg.radius {
                return Err(unsupported(&format!(
                    "env: file holds d = {} N = {}, config asks for d = {} N = {}",
                    g.dimension(),
                    g.radius(),
                    cfg.d,
                    cfg.radius
                )));
            }
            env
        }
        None => sample_environment(&geometry(cfg)?, cfg.r[0], cfg.seed)?,
    };
    let g = env.geometry().clone();
    let scfg = solver(cfg);
    let field = rwrp::solve_travel_field(&env, &cfg.y, cfg.lambda, &scfg)?;
    let range = match &cfg.sites {
        Some(s) => Some(expected_range(&env, &cfg.y, cfg.lambda, Some(s), &scfg)?),
        None => None,
    };
    let cost = field.cost_at_origin()?;
    if cfg.flip_table {
        let sites: Vec<Vec<i64>> = g.sites().filter(|s| *s != cfg.y).collect();
        let rows: Vec<FlipRow> = flip_bound_table(&env, &cfg.y, &sites, None, cfg.lambda, &scfg)?
            .into_iter()
            .map(|r| FlipRow {
                z_coords: coords(&r.z_coords),
                omega_z: r.omega_z,
                log_ratio: r.log_ratio,
                psi: r.psi,
                hit_prob: r.hit_prob,
                bound_rhs: r.bound_rhs,
            })
            .collect();
        let result = SolveResult {
            cost,
            residual: field.residual(),
            sweeps: field.iterations(),
            ones: env.count_ones(),
            expected_range: range,
            rows: &rows,
        };
        return emit(cfg, &result, &rows);
    }
    let mut rows = Vec::with_capacity(g.site_count());
    for i in 0..g.site_count() {
        rows.push(FieldRow {
            index: i,
            site: coords(&g.site_at(i)?),
            omega: env.value_at(i),
            log_u: field.log_value_at(i),
            cost: field.cost_at(i)?,
        });
    }
    let result = SolveResult {
        cost,
        residual: field.residual(),
        sweeps: field.iterations(),
        ones: env.count_ones(),
        expected_range: range,
        rows: &rows,
    };
    emit(cfg, &result, &rows)
}

#[derive(Serialize)]
struct CostRow {
    r: f64,
    lambda: f64,
    value: f64,
    std_error: f64,
    replicates: usize,
    estimator: &'static str,
}

fn cost(cfg: &Resolved) -> Out {
    let g = geometry(cfg)?;
    let scfg = solver(cfg);
    let mut out: Vec<CostEstimate> = Vec::new();
    for (i, &r) in cfg.r.iter().enumerate() {
        let est = match (cfg.kind, cfg.estimator) {
            (Kind::Annealed, Estimator::Exact) => annealed_cost_exact(&g, r, &cfg.y, cfg.lambda, cfg.guard, &scfg)?,
            (Kind::Annealed, Estimator::EnvMc) => {
                annealed_cost_env_mc(&g, r, &cfg.y, cfg.lambda, &plan(cfg, "cost", i), &scfg)?
            }
            (Kind::Annealed, Estimator::PathMc) => annealed_cost_path_mc(&g, r, &cfg.y, cfg.lambda, &plan(cfg, "cost", i))?,
            (Kind::Quenched, Estimator::Exact) => {
                let costs = EnumeratedCosts::build(&g, &cfg.y, cfg.lambda, cfg.guard, &scfg)?;
                quenched_estimate(cfg, &g, r, costs.mean_quenched_cost(r), 0.0, 1 << costs.relevant_sites().len(), EstimatorKind::ExactEnum)
            }
            (Kind::Quenched, Estimator::EnvMc) => {
                let stats = mc::run(&plan(cfg, "cost", i), |seed| {
                    let env = sample_environment(&g, r, seed)?;
                    rwrp::quenched::quenched_cost(&env, &cfg.y, cfg.lambda, &scfg)
                })?;
                quenched_estimate(cfg, &g, r, stats.mean, stats.std_error(), cfg.replicates, EstimatorKind::EnvMc)
            }
            (Kind::Quenched, Estimator::PathMc) => {
                return Err(unsupported("estimator: path-mc estimates annealed costs only"))
            }
            (Kind::Difference, _) => return Err(unsupported("kind: cost takes quenched or annealed")),
        };
        out.push(est);
    }
    let rows: Vec<CostRow> = out
        .iter()
        .map(|e| CostRow {
            r: e.r,
            lambda: e.lambda,
            value: e.value,
            std_error: e.std_error,
            replicates: e.replicates,
            estimator: e.estimator.as_str(),
        })
        .collect();
    emit(cfg, &out, &rows)
}

fn quenched_estimate(
    cfg: &Resolved,
    g: &BoxGeometry,
    r: f64,
    value: f64,
    std_error: f64,
    replicates: usize,
    estimator: EstimatorKind,
) -> CostEstimate {
    CostEstimate {
        value,
        std_error,
        replicates,
        estimator,
        r,
        lambda: cfg.lambda,
        target: cfg.y.clone(),
        dimension: g.dimension(),
        radius: g.radius(),
        capped: 0,
    }
}

fn derivative(cfg: &Resolved) -> Out {
    let g = geometry(cfg)?;
    let scfg = solver(cfg);
    let mut out: Vec<DerivativeReport> = Vec::new();
    for (i, &r) in cfg.r.iter().enumerate() {
        let rep = match cfg.estimator {
            Estimator::Exact => {
                let mut rep = exact_derivative_report(&g, r, &cfg.y, cfg.lambda, cfg.guard, &scfg)?;
                if cfg.richardson {
                    let costs = EnumeratedCosts::build(&g, &cfg.y, cfg.lambda, cfg.guard, &scfg)?;
                    rep.fd = Some(fd_derivative(&costs, r, DEFAULT_FD_STEP, true)?);
                }
                rep.finish()
            }
            Estimator::PathMc => {
                let mut rep = annealed_derivative_formula(&g, r, &cfg.y, cfg.lambda, &plan(cfg, "derivative", i))?;
                // add the exact routes when the box is small enough to enumerate
                match exact_derivative_report(&g, r, &cfg.y, cfg.lambda, cfg.guard, &scfg) {
                    Ok(ex) => {
                        rep.flip = ex.flip;
                        rep.fd = ex.fd;
                    }
                    Err(Error::GuardExceeded { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
                rep.finish()
            }
            Estimator::EnvMc => return Err(unsupported("estimator: derivative takes exact or path-mc")),
        };
        out.push(rep);
    }
    emit(cfg, &out, &out)
}

#[derive(Serialize)]
struct FlipSumRow {
    r: f64,
    value: f64,
    std_error: f64,
    analytic: Option<f64>,
    lower_bound: f64,
    upper_bound: f64,
    psi_max: f64,
    lower_verdict: Verdict,
    upper_verdict: Verdict,
}

/// Two-sided check of the expected flip sum `-(d/dr) E_r[a_N(0, y)]`:
/// `(1 - e^{-1}) ‖y‖₁ ≤ value ≤ 4 ψ_max C(r, d) ‖y‖₁`, with ψ_max taken over
/// the box at ω ≡ 0 (ψ is largest there).
fn flip_sum_check(cfg: &Resolved) -> Out {
    let g = geometry(cfg)?;
    let scfg = solver(cfg);
    let norm = l1_norm(&cfg.y) as f64;
    let zero = Environment::constant(&g, 0)?;
    let mut psi_max: f64 = 0.0;
    for z in g.sites() {
        psi_max = psi_max.max(return_weight_psi(&zero, &z, 0.0, &scfg)?);
    }
    let costs = match cfg.estimator {
        Estimator::Exact => Some(EnumeratedCosts::build(&g, &cfg.y, 0.0, cfg.guard, &scfg)?),
        Estimator::EnvMc => None,
        Estimator::PathMc => return Err(unsupported("estimator: the flip-sum check takes exact or env-mc")),
    };
    let mut rows = Vec::new();
    for (i, &r) in cfg.r.iter().enumerate() {
        let mode = match cfg.estimator {
            Estimator::Exact => FlipSumMode::Exact { guard: cfg.guard },
            _ => FlipSumMode::MonteCarlo(plan(cfg, "flip-sum", i)),
        };
        let est = russo_rhs(&g, r, &cfg.y, &mode, &scfg)?;
        let lower = one_minus_inv_e::<f64>() * norm;
        let upper = 4.0 * psi_max * annealed_log_constant(cfg.d, r) * norm;
        rows.push(FlipSumRow {
            r,
            value: est.value,
            std_error: est.std_error,
            analytic: costs.as_ref().map(|c| c.mean_cost_derivative(r)),
            lower_bound: lower,
            upper_bound: upper,
            psi_max,
            lower_verdict: Verdict::judge(est.value - lower, est.std_error, 1e-10),
            upper_verdict: Verdict::judge(upper - est.value, est.std_error, 1e-10),
        });
    }
    emit(cfg, &rows, &rows)
}

#[derive(Serialize)]
struct LyapunovRow {
    kind: &'static str,
    d: usize,
    r: f64,
    lambda: f64,
    x: String,
    n: u64,
    #[serde(rename = "N")]
    radius: i64,
    value: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct DifferenceCsvRow {
    p: f64,
    q: f64,
    x: String,
    n: u64,
    #[serde(rename = "N")]
    radius: i64,
    quenched: f64,
    quenched_se: f64,
    annealed: f64,
    annealed_se: f64,
}

fn lyapunov(cfg: &Resolved) -> Out {
    let lc = lyapunov_config(cfg);
    if cfg.kind == Kind::Difference {
        let rows = lyapunov_difference_profile(cfg.d, cfg.p, cfg.q, cfg.lambda, &cfg.direction, &lc)?;
        let csv: Vec<DifferenceCsvRow> = rows
            .iter()
            .map(|r| DifferenceCsvRow {
                p: cfg.p,
                q: cfg.q,
                x: coords(&r.direction),
                n: r.n,
                radius: r.radius,
                quenched: r.quenched,
                quenched_se: r.quenched_se,
                annealed: r.annealed,
                annealed_se: r.annealed_se,
            })
            .collect();
        return emit(cfg, &rows, &csv);
    }
    let mut points: Vec<LyapunovPoint> = Vec::new();
    for x in &cfg.direction {
        for &r in &cfg.r {
            points.push(match cfg.kind {
                Kind::Quenched => estimate_quenched_lyapunov(cfg.d, r, cfg.lambda, x, &lc)?,
                _ => estimate_annealed_lyapunov(cfg.d, r, cfg.lambda, x, &lc)?,
            });
        }
    }
    let rows: Vec<LyapunovRow> = points
        .iter()
        .flat_map(|p| {
            p.entries.iter().map(move |e| LyapunovRow {
                kind: p.kind.as_str(),
                d: cfg.d,
                r: p.r,
                lambda: p.lambda,
                x: coords(&p.direction),
                n: e.n,
                radius: e.radius,
                value: e.value,
                std_error: e.std_error,
            })
        })
        .collect();
    emit(cfg, &points, &rows)
}

#[derive(Serialize)]
struct BoundRow {
    bound_id: &'static str,
    p: f64,
    q: f64,
    x: String,
    measured: f64,
    bound: f64,
    margin: f64,
    stderr: f64,
    verdict: &'static str,
}

fn rate_config(cfg: &Resolved) -> Result<RateSearchConfig, CliError> {
    let backend = match cfg.estimator {
        Estimator::Exact => ExponentBackend::Exact {
            n: cfg.n_list[0],
            radius: cfg.radius,
            guard: cfg.guard,
        },
        _ => ExponentBackend::MonteCarlo(lyapunov_config(cfg)),
    };
    Ok(RateSearchConfig {
        backend,
        solver: solver(cfg),
        ..RateSearchConfig::default()
    })
}

fn bounds(cfg: &Resolved) -> Out {
    let mut lc = lyapunov_config(cfg);
    // Lyapunov-scale boxes are far beyond enumeration; exact applies to the
    // pre-limit and rate cells only
    if cfg.estimator == Estimator::Exact {
        lc.estimator = EstimatorKind::EnvMc;
    }
    let bc = BoundsConfig {
        lambda: cfg.lambda,
        directions: cfg.direction.clone(),
        lyapunov: lc,
        exact_cells: if cfg.exact {
            vec![ExactCell {
                radius: cfg.radius,
                y: cfg.y.clone(),
            }]
        } else {
            Vec::new()
        },
        guard: cfg.guard,
        solver: solver(cfg),
        ..BoundsConfig::default()
    };
    let mut cells: Vec<BoundCell> = Vec::new();
    cells.extend(check_quenched_bounds(cfg.d, cfg.p, cfg.q, &bc)?.cells);
    cells.extend(check_annealed_bounds(cfg.d, cfg.p, cfg.q, &bc)?.cells);
    if cfg.estimator == Estimator::Exact && cfg.d == 1 {
        let cache = ExponentCache::new();
        cells.extend(check_rate_bounds(cfg.d, cfg.p, cfg.q, &cfg.x, &rate_config(cfg)?, &cache)?.cells);
    }
    let rows: Vec<BoundRow> = cells
        .iter()
        .map(|c| BoundRow {
            bound_id: c.bound_id.as_str(),
            p: c.p,
            q: c.q,
            x: coords(&c.x),
            measured: c.measured,
            bound: c.bound,
            margin: c.margin,
            stderr: c.stderr,
            verdict: c.verdict.as_str(),
        })
        .collect();
    let failed = cells.iter().filter(|c| c.verdict == Verdict::Fail).count();
    emit(cfg, &cells, &rows)?;
    if failed > 0 {
        eprintln!("{failed} bound cell(s) failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct RateRow {
    kind: &'static str,
    r: f64,
    x: String,
    value: f64,
    std_error: f64,
    supremizer: String,
    evaluations: usize,
}

fn rate(cfg: &Resolved) -> Out {
    let kind = match cfg.kind {
        Kind::Quenched => ExponentKind::Quenched,
        Kind::Annealed => ExponentKind::Annealed,
        Kind::Difference => return Err(unsupported("kind: rate takes quenched or annealed")),
    };
    let rc = rate_config(cfg)?;
    let cache = ExponentCache::new();
    let mut values = Vec::new();
    for x in &cfg.x {
        for &r in &cfg.r {
            values.push(rate_function(cfg.d, r, x, kind, &rc, &cache)?);
        }
    }
    let rows: Vec<RateRow> = values
        .iter()
        .map(|v| RateRow {
            kind: v.kind.as_str(),
            r: v.r,
            x: coords(&v.x),
            value: v.value,
            std_error: v.std_error,
            supremizer: v.supremizer_label(),
            evaluations: v.evaluations,
        })
        .collect();
    emit(cfg, &values, &rows)
}

#[derive(Serialize)]
struct OracleEnv {
    mask: u64,
    omega: Vec<u8>,
    log_e: f64,
    e: f64,
    /// Probability of this configuration, one entry per requested r.
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct OracleSummary {
    r: f64,
    b: f64,
    mean_quenched_cost: f64,
    annealed_derivative: f64,
}

#[derive(Serialize)]
struct OracleResult {
    relevant_sites: Vec<Vec<i64>>,
    summary: Vec<OracleSummary>,
    environments: Vec<OracleEnv>,
}

#[derive(Serialize)]
struct OracleRow {
    mask: u64,
    omega: String,
    log_e: f64,
    e: f64,
}

fn oracle(cfg: &Resolved) -> Out {
    let g = geometry(cfg)?;
    let costs = EnumeratedCosts::build(&g, &cfg.y, cfg.lambda, cfg.guard, &solver(cfg))?;
    let relevant = costs.relevant_sites();
    let m = relevant.len();
    let environments: Vec<OracleEnv> = costs
        .log_e()
        .iter()
        .enumerate()
        .map(|(mask, &log_e)| {
            let omega: Vec<u8> = (0..m).map(|k| ((mask >> k) & 1) as u8).collect();
            let ones = omega.iter().filter(|&&v| v == 1).count();
            OracleEnv {
                mask: mask as u64,
                omega,
                log_e,
                e: log_e.exp(),
                weights: cfg.r.iter().map(|&r| binomial_weight(r, m - ones, ones)).collect(),
            }
        })
        .collect();
    let summary = cfg
        .r
        .iter()
        .map(|&r| OracleSummary {
            r,
            b: costs.annealed_cost(r),
            mean_quenched_cost: costs.mean_quenched_cost(r),
            annealed_derivative: costs.annealed_derivative_polynomial(r),
        })
        .collect();
    let rows: Vec<OracleRow> = environments
        .iter()
        .map(|e| OracleRow {
            mask: e.mask,
            omega: coords(&e.omega),
            log_e: e.log_e,
            e: e.e,
        })
        .collect();
    let result = OracleResult {
        relevant_sites: relevant.iter().map(|&i| g.site_at(i)).collect::<Result<_, _>>()?,
        summary,
        environments,
    };
    emit(cfg, &result, &rows)
}

fn verify(cfg: &Resolved) -> Out {
    let sc = SuiteConfig {
        profile: cfg.profile,
        workers: cfg.workers,
        only: cfg.only.clone(),
    };
    let results = run_suite(&sc, |r| println!("{}", r.line()));
    if cfg.out.is_some() {
        emit(cfg, &results, &results)?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("C{:02}", r.id)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::acceptance(format!("failed criteria: {}", failed.join(", "))))
    }
}
