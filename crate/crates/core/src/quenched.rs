//! Quenched quantities derived from killed-walk solves: hitting probabilities
//! under the path measure, expected range, the return weight ψ, single-site
//! flip log-ratios and the flip-sum derivative of the mean quenched cost.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environment::{enumerate_environments, relevant_sites_excluding, sample_environment, Environment};
use crate::error::{Error, Result};
use crate::lattice::BoxGeometry;
use crate::mc::{run, Estimate, RunPlan};
use crate::scalar::Scalar;
use crate::solver::{site_factors, solve_killed, solve_travel_field, travel_field_anchored, QuenchedField, SolverConfig};

fn is_origin(site: &[i64]) -> bool {
    site.iter().all(|&c| c == 0)
}

/// Restricted quenched cost `a_N(0, y, ω + λ)`; 0 for `y = 0` without solving.
pub fn quenched_cost<F: Scalar>(env: &Environment, y: &[i64], lambda: F, cfg: &SolverConfig<F>) -> Result<F> {
    env.geometry().index_of(y)?;
    if is_origin(y) {
        return Ok(F::zero());
    }
    solve_travel_field(env, y, lambda, cfg)?.cost_at_origin()
}

/// `ln w(start)` where `w` is 1 at `z`, 0 at `y`, killed outside the box.
fn log_hit_weight<F: Scalar>(
    geometry: &BoxGeometry,
    factors: &[F],
    y: usize,
    z: usize,
    start: usize,
    cfg: &SolverConfig<F>,
) -> Result<F> {
    let sol = solve_killed(geometry, factors, &[(z, F::one()), (y, F::zero())], Some(start), cfg)?;
    Ok(sol.log_value(start))
}

fn hit_from_field<F: Scalar>(
    field: &QuenchedField<F>,
    factors: &[F],
    z: usize,
    start: usize,
    cfg: &SolverConfig<F>,
) -> Result<F> {
    let y = field.target_index();
    if z == start {
        return Ok(F::one());
    }
    if z == y {
        return Ok(F::zero());
    }
    let log_den = field.log_value_at(start);
    if log_den == F::neg_infinity() {
        return Err(Error::Underflow(format!(
            "e_N at the start site {:?} is below the representable range",
            field.geometry().site_at(start)?
        )));
    }
    let log_w = log_hit_weight(field.geometry(), factors, y, z, start, cfg)?;
    let log_uz = field.log_value_at(z);
    if log_w == F::neg_infinity() || log_uz == F::neg_infinity() {
        return Ok(F::zero());
    }
    // the ratio is a probability; clamp rounding overshoot
    Ok((log_w + log_uz - log_den).exp().min(F::one()))
}

/// `P̃^{start,y}_{N,ω}(H(z) < H(y))` under the quenched path measure with shift λ.
pub fn hit_before_probability<F: Scalar>(
    env: &Environment,
    y: &[i64],
    z: &[i64],
    start: &[i64],
    lambda: F,
    cfg: &SolverConfig<F>,
) -> Result<F> {
    let g = env.geometry();
    let (yi, zi, si) = (g.index_of(y)?, g.index_of(z)?, g.index_of(start)?);
    if zi == si {
        return Ok(F::one());
    }
    if zi == yi || si == yi {
        return Ok(F::zero());
    }
    let field = travel_field_anchored(env, yi, lambda, Some(si), cfg)?;
    let factors = site_factors(env, lambda);
    hit_from_field(&field, &factors, zi, si, cfg)
}

/// Expected number of distinct sites visited before `H(y)` under the path
/// measure from 0, `Σ_z P̃(H(z) < H(y))`, summed over `sites` (all box sites
/// when `None`).
pub fn expected_range<F: Scalar>(
    env: &Environment,
    y: &[i64],
    lambda: F,
    sites: Option<&[Vec<i64>]>,
    cfg: &SolverConfig<F>,
) -> Result<F> {
    let g = env.geometry();
    let yi = g.index_of(y)?;
    let origin = g.origin_index();
    if yi == origin {
        return Ok(F::zero());
    }
    let indices: Vec<usize> = match sites {
        Some(list) => list.iter().map(|s| g.index_of(s)).collect::<Result<_>>()?,
        None => (0..g.site_count()).collect(),
    };
    let field = travel_field_anchored(env, yi, lambda, Some(origin), cfg)?;
    let factors = site_factors(env, lambda);
    let mut total = F::zero();
    for z in indices {
        total = total + hit_from_field(&field, &factors, z, origin, cfg)?;
    }
    Ok(total)
}

/// Box-restricted return weight
/// `ψ(z) = (1 - E^z[exp{-Σ_{k=1}^{H⁺(z)-1} (ω(S_k)+λ)}; H⁺(z) < T])^{-1}`.
pub fn return_weight_psi<F: Scalar>(env: &Environment, z: &[i64], lambda: F, cfg: &SolverConfig<F>) -> Result<F> {
    if !(lambda >= F::zero()) {
        return Err(Error::Invalid(format!("shift lambda must be nonnegative, got {lambda}")));
    }
    let g = env.geometry();
    let zi = g.index_of(z)?;
    let factors = site_factors(env, lambda);
    let sol = solve_killed(g, &factors, &[(zi, F::one())], None, cfg)?;
    let deg = g.degree();
    let mut back = F::zero();
    for &j in g.neighbor_indices(zi) {
        if (j as usize) < g.site_count() {
            back = back + sol.log_value(j as usize).exp();
        }
    }
    let ret = back / F::from_usize_lossy(deg);
    let gap = F::one() - ret;
    if gap <= cfg.tol {
        return Err(Error::NearRecurrence { site: z.to_vec() });
    }
    Ok(gap.recip())
}

/// Effect of flipping the potential at one site on `e_N(0, y, ·)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRatioReport<F> {
    pub site: Vec<i64>,
    /// `ln(e_N(0,y,ω_z) / e_N(0,y,ω))`.
    pub log_ratio: F,
    pub omega_at_z: u8,
}

/// Flip log-ratio using an already solved field for the unflipped environment.
pub fn flip_log_ratio_with<F: Scalar>(
    base: &QuenchedField<F>,
    env: &Environment,
    z: &[i64],
    cfg: &SolverConfig<F>,
) -> Result<FlipRatioReport<F>> {
    let g = env.geometry();
    let zi = g.index_of(z)?;
    if zi == base.target_index() {
        return Err(Error::Invalid(format!("flip site {z:?} coincides with the target")));
    }
    let omega = env.value_at(zi);
    let origin = g.origin_index();
    let log_ratio = if base.target_index() == origin {
        F::zero()
    } else {
        let flipped = env.with_value_at(zi, 1 - omega);
        let other = travel_field_anchored(&flipped, base.target_index(), base.shift(), Some(origin), cfg)?;
        let (a, b) = (other.cost_at_origin()?, base.cost_at_origin()?);
        b - a
    };
    Ok(FlipRatioReport {
        site: z.to_vec(),
        log_ratio,
        omega_at_z: omega,
    })
}

/// `ln(e_N(0,y,ω_z) / e_N(0,y,ω))` where `ω_z` flips the value at `z`.
pub fn flip_log_ratio<F: Scalar>(
    env: &Environment,
    y: &[i64],
    z: &[i64],
    lambda: F,
    cfg: &SolverConfig<F>,
) -> Result<FlipRatioReport<F>> {
    let base = solve_travel_field(env, y, lambda, cfg)?;
    flip_log_ratio_with(&base, env, z, cfg)
}

/// One row of the flip-bound table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipBoundRow {
    pub z_coords: Vec<i64>,
    pub omega_z: u8,
    pub log_ratio: f64,
    pub psi: f64,
    pub hit_prob: f64,
    /// `4 ψ P̃(H(z) < H(y))`.
    pub bound_rhs: f64,
}

impl FlipBoundRow {
    pub fn holds(&self) -> bool {
        self.log_ratio.abs() <= self.bound_rhs
    }
}

/// Flip log-ratio, ψ, hitting probability and the bound `4ψP̃` for each `z`.
///
/// ψ is computed on `psi_env` when given (typically a larger box whose
/// restriction is `env`), otherwise on `env` itself.
pub fn flip_bound_table<F: Scalar>(
    env: &Environment,
    y: &[i64],
    sites: &[Vec<i64>],
    psi_env: Option<&Environment>,
    lambda: F,
    cfg: &SolverConfig<F>,
) -> Result<Vec<FlipBoundRow>> {
    let g = env.geometry();
    let yi = g.index_of(y)?;
    let origin = g.origin_index();
    let base = travel_field_anchored(env, yi, lambda, Some(origin), cfg)?;
    let factors = site_factors(env, lambda);
    let psi_env = psi_env.unwrap_or(env);
    let mut rows = Vec::with_capacity(sites.len());
    for z in sites {
        let zi = g.index_of(z)?;
        if psi_env.value(z)? != env.value_at(zi) {
            return Err(Error::Invalid(format!(
                "enlarged environment disagrees with the box environment at {z:?}"
            )));
        }
        let flip = flip_log_ratio_with(&base, env, z, cfg)?;
        let psi = return_weight_psi(psi_env, z, lambda, cfg)?;
        let hit = hit_from_field(&base, &factors, zi, origin, cfg)?;
        rows.push(FlipBoundRow {
            z_coords: z.clone(),
            omega_z: flip.omega_at_z,
            log_ratio: flip.log_ratio.as_f64(),
            psi: psi.as_f64(),
            hit_prob: hit.as_f64(),
            bound_rhs: 4.0 * psi.as_f64() * hit.as_f64(),
        });
    }
    Ok(rows)
}

/// `Σ_z |ln(e_N(0,y,ω_z)/e_N(0,y,ω))|` over all box sites `z ≠ y`.
pub fn flip_sum<F: Scalar>(env: &Environment, y: &[i64], lambda: F, cfg: &SolverConfig<F>) -> Result<F> {
    let g = env.geometry();
    let yi = g.index_of(y)?;
    if yi == g.origin_index() {
        return Ok(F::zero());
    }
    let base = travel_field_anchored(env, yi, lambda, Some(g.origin_index()), cfg)?;
    let mut total = F::zero();
    for zi in (0..g.site_count()).filter(|&i| i != yi) {
        let z = g.site_at(zi)?;
        total = total + flip_log_ratio_with(&base, env, &z, cfg)?.log_ratio.abs();
    }
    Ok(total)
}

/// How the flip-sum expectation is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum FlipSumMode {
    /// Exhaustive enumeration over all sites except `y`, with a guard on the site count.
    Exact { guard: usize },
    /// Average over sampled environments.
    MonteCarlo(RunPlan),
}

/// `Σ_z E_r[1{ω(z)=1} ln Ẽ[e^{ℓ_z}] - 1{ω(z)=0} ln Ẽ[e^{-ℓ_z}]]`, i.e. the
/// expected flip sum, which equals `-(d/dr) E_r[a_N(0,y,ω)]`.
pub fn russo_rhs(
    geometry: &Arc<BoxGeometry>,
    r: f64,
    y: &[i64],
    mode: &FlipSumMode,
    cfg: &SolverConfig<f64>,
) -> Result<Estimate> {
    geometry.index_of(y)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("r must lie in [0, 1], got {r}")));
    }
    match mode {
        FlipSumMode::Exact { guard } => {
            let relevant = relevant_sites_excluding(geometry, y)?;
            let mut total = 0.0;
            for we in enumerate_environments::<f64>(geometry, &relevant, r, *guard)? {
                if we.weight == 0.0 {
                    continue;
                }
                total += we.weight * flip_sum(&we.environment, y, 0.0, cfg)?;
            }
            Ok(Estimate::exact(total))
        }
        FlipSumMode::MonteCarlo(plan) => {
            let stats = run(plan, |seed| {
                let env = sample_environment(geometry, r, seed)?;
                flip_sum(&env, y, 0.0, cfg)
            })?;
            Ok(Estimate::from_stats(&stats))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_box;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn geo(d: usize, n: i64) -> Arc<BoxGeometry> {
        Arc::new(build_box(d, n).unwrap())
    }

    fn cfg() -> SolverConfig<f64> {
        SolverConfig::default()
    }

    #[test]
    fn hit_probability_examples() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        let p = hit_before_probability(&env, &[1], &[-1], &[0], 0.0, &cfg()).unwrap();
        assert!((p - 0.25).abs() < 1e-12);
        assert_eq!(hit_before_probability(&env, &[1], &[0], &[0], 0.0, &cfg()).unwrap(), 1.0);
        assert_eq!(hit_before_probability(&env, &[1], &[1], &[0], 0.0, &cfg()).unwrap(), 0.0);
    }

    /// Hitting probability under the path measure by direct walk simulation:
    /// weight each killed walk by its Feynman–Kac factor and average the
    /// indicator of hitting z first.
    fn simulated_hit(env: &Environment, y: &[i64], z: &[i64], walks: usize, seed: u64) -> f64 {
        let g = env.geometry();
        let mut rng = stream_rng(seed);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..walks {
            let mut pos = vec![0i64; g.dimension()];
            let mut weight = 1.0;
            let mut seen_z = false;
            loop {
                if pos.as_slice() == y {
                    num += if seen_z { weight } else { 0.0 };
                    den += weight;
                    break;
                }
                if pos.as_slice() == z {
                    seen_z = true;
                }
                weight *= (-(env.value(&pos).unwrap() as f64)).exp();
                let k = rng.random_range(0..2 * g.dimension());
                pos[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                if !g.contains(&pos) {
                    break;
                }
            }
        }
        num / den
    }

    #[test]
    fn hit_probability_matches_walk_simulation() {
        let g = geo(2, 2);
        let env = sample_environment(&g, 0.5, 4).unwrap();
        let (y, z) = ([2, 0], [0, 1]);
        let exact = hit_before_probability(&env, &y, &z, &[0, 0], 0.0, &cfg()).unwrap();
        let sim = simulated_hit(&env, &y, &z, 400_000, 99);
        assert!((exact - sim).abs() < 0.01, "{exact} vs {sim}");
    }

    #[test]
    fn expected_range_examples() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        let er = expected_range(&env, &[1], 0.0, None, &cfg()).unwrap();
        assert!((er - 1.25).abs() < 1e-12);

        // large shift forces the direct one-step path
        let g = geo(2, 6);
        let env = sample_environment(&g, 0.5, 8).unwrap();
        let er = expected_range(&env, &[1, 0], 20.0, None, &cfg()).unwrap();
        assert!(er - 1.0 < 1e-6 && er >= 1.0);

        let subset = vec![vec![0, 0], vec![-1, 0]];
        let part = expected_range(&env, &[1, 0], 0.0, Some(&subset), &cfg()).unwrap();
        let whole = expected_range(&env, &[1, 0], 0.0, None, &cfg()).unwrap();
        assert!(part >= 1.0 && part < whole);
    }

    #[test]
    fn psi_examples() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        assert!((return_weight_psi(&env, &[0], 0.0, &cfg()).unwrap() - 2.0).abs() < 1e-12);
        // corner site returns less often
        let psi_edge = return_weight_psi(&env, &[1], 0.0, &cfg()).unwrap();
        assert!(psi_edge >= 1.0 && psi_edge < 2.0);
    }

    /// Escape probability of the 3-d walk from the origin, truncated at a
    /// sphere far away, by simulation.
    fn simulated_escape_3d(walks: usize, seed: u64) -> f64 {
        let mut rng = stream_rng(seed);
        let mut escaped = 0usize;
        for _ in 0..walks {
            let mut p = [0i64; 3];
            loop {
                let k = rng.random_range(0..6);
                p[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                if p == [0, 0, 0] {
                    break;
                }
                if p.iter().map(|c| c.abs()).max().unwrap() > 15 {
                    escaped += 1;
                    break;
                }
            }
        }
        escaped as f64 / walks as f64
    }

    #[test]
    fn psi_three_dimensions_below_escape_bound() {
        let esc = simulated_escape_3d(20_000, 5);
        // escape probability is known to be about 0.6595; the simulated value
        // uses a finite exit sphere and so slightly overestimates it
        assert!((esc - 0.6595).abs() < 0.03, "{esc}");
        let g = geo(3, 8);
        let env = Environment::constant(&g, 0).unwrap();
        let psi = return_weight_psi(&env, &[0, 0, 0], 0.0, &cfg()).unwrap();
        let bound = 1.0 / esc;
        assert!(psi <= bound + 0.1, "{psi} vs {bound}");
        assert!(psi > 1.0);
    }

    #[test]
    fn near_recurrence_is_flagged() {
        let g = geo(1, 2);
        let env = Environment::constant(&g, 0).unwrap();
        let loose = SolverConfig::with_tol(0.5);
        assert!(matches!(
            return_weight_psi(&env, &[0], 0.0, &loose),
            Err(Error::NearRecurrence { .. })
        ));
    }

    #[test]
    fn flip_ratio_example_and_signs() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        let rep = flip_log_ratio(&env, &[1], &[0], 0.0, &cfg()).unwrap();
        // e_N with ω(0)=1, ω(-1)=0: u(0) = c(u(-1)+1), u(-1) = u(0)/2, c = e^{-1}/2
        let c = (-1.0f64).exp() / 2.0;
        let flipped = c / (1.0 - c / 2.0);
        assert!((rep.log_ratio - (flipped / (2.0 / 3.0)).ln()).abs() < 1e-12);
        assert!((flipped - 0.202570).abs() < 1e-6);
        assert_eq!(rep.omega_at_z, 0);
        assert!(rep.log_ratio < 0.0);
        assert!(flip_log_ratio(&env, &[1], &[1], 0.0, &cfg()).is_err());

        let ones = Environment::constant(&g, 1).unwrap();
        let up = flip_log_ratio(&ones, &[1], &[-1], 0.0, &cfg()).unwrap();
        assert!(up.log_ratio > 0.0);
    }

    /// E_r[a_N] = Σ_ω a_N(ω) r^{zeros}(1-r)^{ones}; its r-derivative termwise.
    fn analytic_mean_cost_derivative(g: &Arc<BoxGeometry>, y: &[i64], r: f64) -> f64 {
        let relevant = relevant_sites_excluding(g, y).unwrap();
        let m = relevant.len();
        let mut d = 0.0;
        for we in enumerate_environments::<f64>(g, &relevant, r, 24).unwrap() {
            let a = quenched_cost(&we.environment, y, 0.0, &cfg()).unwrap();
            let zeros = we.zeros as f64;
            let ones = (m - we.zeros) as f64;
            d += a * we.weight * (zeros / r - ones / (1.0 - r));
        }
        d
    }

    #[test]
    fn flip_sum_matches_polynomial_derivative() {
        let g = geo(1, 1);
        let rhs = russo_rhs(&g, 0.5, &[1], &FlipSumMode::Exact { guard: 24 }, &cfg()).unwrap();
        let oracle = -analytic_mean_cost_derivative(&g, &[1], 0.5);
        assert!((rhs.value - oracle).abs() < 1e-10 * oracle);
        assert_eq!(rhs.std_error, 0.0);
        assert!(rhs.value >= (1.0 - (-1.0f64).exp()));
    }

    #[test]
    fn flip_sum_guard_and_mc() {
        let g = geo(2, 3);
        let err = russo_rhs(&g, 0.5, &[1, 0], &FlipSumMode::Exact { guard: 24 }, &cfg()).unwrap_err();
        assert!(err.to_string().contains("guard of 24"));

        let g = geo(1, 2);
        let exact = russo_rhs(&g, 0.4, &[2], &FlipSumMode::Exact { guard: 24 }, &cfg()).unwrap();
        let plan = RunPlan::new("flip-sum", 4000, 21);
        let mc = russo_rhs(&g, 0.4, &[2], &FlipSumMode::MonteCarlo(plan), &cfg()).unwrap();
        assert!((mc.value - exact.value).abs() < 4.0 * mc.std_error, "{mc:?} vs {exact:?}");
    }

    #[test]
    fn flip_table_rows() {
        let small = geo(2, 3);
        let big = geo(2, 9);
        let env_big = sample_environment(&big, 0.5, 12).unwrap();
        let env = env_big.restrict(&small).unwrap();
        let sites: Vec<Vec<i64>> = small.sites().filter(|s| s.as_slice() != [2, 0]).take(12).collect();
        let rows = flip_bound_table(&env, &[2, 0], &sites, Some(&env_big), 0.0, &cfg()).unwrap();
        assert_eq!(rows.len(), 12);
        for row in &rows {
            assert!(row.psi >= 1.0);
            assert!((0.0..=1.0).contains(&row.hit_prob));
            assert!(row.holds(), "{row:?}");
            if row.omega_z == 1 {
                assert!(row.log_ratio >= 0.0);
            } else {
                assert!(row.log_ratio <= 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn range_at_least_distance(seed in any::<u64>(), r in 0.05f64..0.95, yx in -3i64..=3, yy in -3i64..=3) {
            prop_assume!(yx != 0 || yy != 0);
            let g = geo(2, 3);
            let env = sample_environment(&g, r, seed).unwrap();
            let y = [yx, yy];
            let er = expected_range(&env, &y, 0.0, None, &cfg()).unwrap();
            prop_assert!(er >= crate::lattice::l1_norm(&y) as f64 - 1e-9);
            prop_assert!(er <= g.site_count() as f64);
        }

        #[test]
        fn coupled_costs_are_ordered(seed in any::<u64>(), p in 0.05f64..0.5, gap in 0.0f64..0.5) {
            let g = geo(2, 3);
            let ep = sample_environment(&g, p, seed).unwrap();
            let eq = ep.couple(p + gap).unwrap();
            let y = [3, -1];
            let ap = quenched_cost(&ep, &y, 0.0, &cfg()).unwrap();
            let aq = quenched_cost(&eq, &y, 0.0, &cfg()).unwrap();
            prop_assert!(ap >= aq - 1e-10);
            prop_assert!(aq > 0.0);
        }
    }
}
