//! Matrix-free Gauss–Seidel solver for killed-walk (Feynman–Kac) systems.
//!
//! Every quenched quantity in the crate reduces to the same linear problem on
//! the box: for non-absorbing sites
//!
//! ```text
//! u(x) = e^{-(ω(x)+λ)} (2d)^{-1} Σ_{x'~x} u(x')
//! ```
//!
//! with prescribed values on a set of absorbing sites and `u ≡ 0` outside the
//! box. The iteration matrix is strictly substochastic (boundary killing plus
//! at least one absorbing site), so forward sweeps in index order converge.
//!
//! The field is stored as `mantissa × exp(log_scale)`. Values far from the
//! absorbing set can fall below the `f64` range (costs of several hundred), so
//! whenever the mantissa at the anchor site (the walk's start) is zero or below
//! `≈ 1e-154` the whole field is multiplied up, keeping the largest mantissa
//! below `≈ 1e246`, and `log_scale` is adjusted. Mantissas below the smallest
//! normal number are flushed to zero, so the usable dynamic range between the
//! absorbing values and the anchor is about 1270 nats in `f64`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::lattice::BoxGeometry;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<F> {
    /// Max-norm relative residual at which a solve is accepted.
    pub tol: F,
    /// Over-relaxation factor in `(0, 2)`; 1 is plain Gauss–Seidel.
    pub relaxation: F,
    pub max_sweeps: usize,
}

impl<F: Scalar> Default for SolverConfig<F> {
    fn default() -> Self {
        Self {
            tol: F::default_tolerance(),
            relaxation: F::one(),
            max_sweeps: 1_000_000,
        }
    }
}

impl<F: Scalar> SolverConfig<F> {
    pub fn with_tol(tol: F) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > F::zero()) {
            return Err(Error::Invalid(format!("solver tolerance must be positive, got {}", self.tol)));
        }
        if !(self.relaxation > F::zero() && self.relaxation < F::lit(2.0)) {
            return Err(Error::Invalid(format!(
                "relaxation factor must lie in (0, 2), got {}",
                self.relaxation
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Invalid("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}

/// Raw solution of one killed system.
#[derive(Debug, Clone)]
pub(crate) struct KilledSolution<F> {
    pub mantissa: Vec<F>,
    pub log_scale: F,
    pub residual: F,
    pub sweeps: usize,
}

impl<F: Scalar> KilledSolution<F> {
    /// `ln u(i)`, `-inf` where the field is zero.
    #[inline]
    pub fn log_value(&self, i: usize) -> F {
        let m = self.mantissa[i];
        if m > F::zero() {
            m.ln() + self.log_scale
        } else {
            F::neg_infinity()
        }
    }
}

/// Per-site multipliers `e^{-(ω(x)+λ)} / (2d)`.
pub(crate) fn site_factors<F: Scalar>(env: &Environment, lambda: F) -> Vec<F> {
    let deg = F::from_usize_lossy(env.geometry().degree());
    let c0 = (-lambda).exp() / deg;
    let c1 = (-(lambda + F::one())).exp() / deg;
    env.values().iter().map(|&v| if v == 0 { c0 } else { c1 }).collect()
}

/// Solves the killed system with the given absorbing `(index, value)` pairs.
pub(crate) fn solve_killed<F: Scalar>(
    geometry: &BoxGeometry,
    factors: &[F],
    absorbing: &[(usize, F)],
    anchor: Option<usize>,
    cfg: &SolverConfig<F>,
) -> Result<KilledSolution<F>> {
    cfg.validate()?;
    let n = geometry.site_count();
    let deg = geometry.degree();
    debug_assert_eq!(factors.len(), n);
    let table = geometry.neighbor_table();

    let mut u = vec![F::zero(); n + 1];
    let mut fixed = vec![false; n];
    for &(i, v) in absorbing {
        u[i] = v;
        fixed[i] = true;
    }
    let mut log_scale = F::zero();
    let relax = cfg.relaxation;
    let plain = relax == F::one();
    let floor = F::residual_floor();
    let tiny = F::min_positive_value();
    let low = F::rescale_low();
    let cap = F::rescale_cap();

    let mut last = F::infinity();
    for sweep in 1..=cfg.max_sweeps {
        let mut max_rel = F::zero();
        for i in 0..n {
            if fixed[i] {
                continue;
            }
            let mut s = F::zero();
            for &j in &table[i * deg..(i + 1) * deg] {
                s = s + u[j as usize];
            }
            let old = u[i];
            let mut new = factors[i] * s;
            if !plain {
                new = old + relax * (new - old);
            }
            if new < tiny {
                new = F::zero();
            }
            let rel = (new - old).abs() / new.max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            u[i] = new;
        }

        if let Some(a) = anchor {
            let m = u[a];
            if m < low {
                let max_m = u.iter().fold(F::zero(), |acc, &v| acc.max(v));
                let mut scale = cap / max_m;
                if m > F::zero() {
                    scale = scale.min(m.recip());
                }
                if scale > F::one() {
                    for v in u.iter_mut() {
                        *v = *v * scale;
                    }
                    log_scale = log_scale - scale.ln();
                }
            }
        }

        last = max_rel;
        if max_rel <= cfg.tol {
            let residual = max_residual(table, deg, &u, &fixed, factors, floor, tiny);
            if residual <= cfg.tol {
                u.truncate(n);
                return Ok(KilledSolution {
                    mantissa: u,
                    log_scale,
                    residual,
                    sweeps: sweep,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_sweeps,
        residual: last.as_f64(),
    })
}

fn max_residual<F: Scalar>(
    table: &[u32],
    deg: usize,
    u: &[F],
    fixed: &[bool],
    factors: &[F],
    floor: F,
    tiny: F,
) -> F {
    let mut worst = F::zero();
    for i in 0..fixed.len() {
        if fixed[i] {
            continue;
        }
        let s: F = table[i * deg..(i + 1) * deg].iter().map(|&j| u[j as usize]).sum();
        let mut rhs = factors[i] * s;
        if rhs < tiny {
            rhs = F::zero();
        }
        let rel = (u[i] - rhs).abs() / u[i].max(floor);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Solved travel field `u(x) ≈ e_N(x, y, ω + λ)`.
#[derive(Debug, Clone)]
pub struct QuenchedField<F> {
    geometry: Arc<BoxGeometry>,
    target: Vec<i64>,
    target_index: usize,
    shift: F,
    mantissa: Vec<F>,
    log_scale: F,
    residual: F,
    iterations: usize,
}

/// Solves for `u = e_N(·, y, ω + λ)`: `u(y) = 1`, killed outside the box.
pub fn solve_travel_field<F: Scalar>(
    env: &Environment,
    y: &[i64],
    lambda: F,
    cfg: &SolverConfig<F>,
) -> Result<QuenchedField<F>> {
    let geometry = env.geometry();
    let target_index = geometry.index_of(y)?;
    let origin = geometry.origin_index();
    let anchor = (origin != target_index).then_some(origin);
    travel_field_anchored(env, target_index, lambda, anchor, cfg)
}

pub(crate) fn travel_field_anchored<F: Scalar>(
    env: &Environment,
    target_index: usize,
    lambda: F,
    anchor: Option<usize>,
    cfg: &SolverConfig<F>,
) -> Result<QuenchedField<F>> {
    if !(lambda >= F::zero()) {
        return Err(Error::Invalid(format!("shift lambda must be nonnegative, got {lambda}")));
    }
    let geometry = env.geometry();
    let factors = site_factors(env, lambda);
    let sol = solve_killed(geometry, &factors, &[(target_index, F::one())], anchor, cfg)?;
    Ok(QuenchedField {
        geometry: Arc::clone(geometry),
        target: geometry.site_at(target_index)?,
        target_index,
        shift: lambda,
        mantissa: sol.mantissa,
        log_scale: sol.log_scale,
        residual: sol.residual,
        iterations: sol.sweeps,
    })
}

impl<F: Scalar> QuenchedField<F> {
    pub fn geometry(&self) -> &Arc<BoxGeometry> {
        &self.geometry
    }

    pub fn target(&self) -> &[i64] {
        &self.target
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn shift(&self) -> F {
        self.shift
    }

    pub fn mantissa(&self) -> &[F] {
        &self.mantissa
    }

    pub fn log_scale(&self) -> F {
        self.log_scale
    }

    pub fn residual(&self) -> F {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `ln u(x)` at site index `i`; `-inf` if the value underflowed.
    pub fn log_value_at(&self, i: usize) -> F {
        if i == self.target_index {
            return F::zero();
        }
        let m = self.mantissa[i];
        if m > F::zero() {
            m.ln() + self.log_scale
        } else {
            F::neg_infinity()
        }
    }

    /// `u(x)` at site index `i` (may underflow to 0 even when `log_value_at` is finite).
    pub fn value_at(&self, i: usize) -> F {
        self.log_value_at(i).exp()
    }

    /// Restricted cost `a_N(x, y, ω + λ) = -ln u(x)`.
    pub fn cost(&self, x: &[i64]) -> Result<F> {
        let i = self.geometry.index_of(x)?;
        self.cost_at(i)
    }

    pub fn cost_at(&self, i: usize) -> Result<F> {
        let lv = self.log_value_at(i);
        if lv == F::neg_infinity() {
            return Err(Error::Underflow(format!(
                "e_N at site {:?} is below the representable range",
                self.geometry.site_at(i)?
            )));
        }
        Ok(-lv)
    }

    /// `a_N(0, y, ω + λ)`.
    pub fn cost_at_origin(&self) -> Result<F> {
        self.cost_at(self.geometry.origin_index())
    }

    /// Writes `index mantissa` lines followed by a `log_scale <value>` footer.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, m) in self.mantissa.iter().enumerate() {
            writeln!(w, "{i} {m}")?;
        }
        writeln!(w, "log_scale {}", self.log_scale)?;
        Ok(())
    }
}

/// Parsed field dump: mantissas in index order and the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump<F> {
    pub mantissa: Vec<F>,
    pub log_scale: F,
}

pub fn read_field_dump<F: Scalar + std::str::FromStr, R: BufRead>(reader: R) -> Result<FieldDump<F>> {
    let mut mantissa = Vec::new();
    let mut log_scale = None;
    for line in reader.lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::Parse(format!("bad dump line `{line}`")));
        };
        let value: F = b.parse().map_err(|_| Error::Parse(format!("bad number `{b}`")))?;
        if a == "log_scale" {
            log_scale = Some(value);
            continue;
        }
        let i: usize = a.parse().map_err(|_| Error::Parse(format!("bad index `{a}`")))?;
        if i != mantissa.len() {
            return Err(Error::Parse(format!("dump indices out of order at `{line}`")));
        }
        mantissa.push(value);
    }
    let log_scale = log_scale.ok_or_else(|| Error::Parse("missing log_scale footer".into()))?;
    Ok(FieldDump { mantissa, log_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::sample_environment;
    use crate::lattice::build_box;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn geo(d: usize, n: i64) -> Arc<BoxGeometry> {
        Arc::new(build_box(d, n).unwrap())
    }

    fn cfg() -> SolverConfig<f64> {
        SolverConfig::default()
    }

    /// Dense direct solve of the same system, used as an independent oracle.
    fn dense_oracle(env: &Environment, y: &[i64], lambda: f64) -> Vec<f64> {
        let g = env.geometry();
        let n = g.site_count();
        let yi = g.index_of(y).unwrap();
        let factors = site_factors(env, lambda);
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..n {
            a[(i, i)] = 1.0;
            if i == yi {
                b[i] = 1.0;
                continue;
            }
            for &j in g.neighbor_indices(i) {
                if (j as usize) < n {
                    a[(i, j as usize)] -= factors[i];
                }
            }
        }
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn closed_form_zero_potential() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        let f = solve_travel_field(&env, &[1], 0.0, &cfg()).unwrap();
        let u0 = f.value_at(g.origin_index());
        assert!((u0 - 2.0 / 3.0).abs() < 1e-12);
        assert!((f.cost(&[0]).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        assert!((f.cost(&[0]).unwrap() - 0.405465).abs() < 1e-6);
        assert_eq!(f.cost(&[1]).unwrap(), 0.0);
        assert!(f.residual() <= 1e-12);
    }

    #[test]
    fn closed_form_unit_potential() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 1).unwrap();
        let f = solve_travel_field(&env, &[1], 0.0, &cfg()).unwrap();
        let e1 = (-1.0f64).exp();
        let expected = (e1 / 2.0) / (1.0 - e1 * e1 / 4.0);
        let origin = g.origin_index();
        assert!((f.value_at(origin) - expected).abs() < 1e-12 * expected);
        assert!((f.value_at(origin) - 0.190381).abs() < 1e-6);
        assert!((f.cost(&[0]).unwrap() + expected.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_precision_closed_form() {
        let g = geo(1, 1);
        let env = Environment::constant(&g, 0).unwrap();
        let f = solve_travel_field(&env, &[1], 0.0f32, &SolverConfig::default()).unwrap();
        assert!((f.value_at(1) - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn matches_dense_oracle() {
        let g = geo(2, 3);
        for seed in 0..5 {
            let env = sample_environment(&g, 0.5, seed).unwrap();
            let y = [2, -1];
            for lambda in [0.0, 0.7] {
                let f = solve_travel_field(&env, &y, lambda, &cfg()).unwrap();
                let dense = dense_oracle(&env, &y, lambda);
                for (i, d) in dense.iter().enumerate() {
                    let u = f.value_at(i);
                    assert!((u - d).abs() <= 1e-10 * d.abs().max(1e-300), "site {i}: {u} vs {d}");
                }
            }
        }
    }

    #[test]
    fn over_relaxation_reaches_same_field() {
        let g = geo(2, 4);
        let env = sample_environment(&g, 0.8, 3).unwrap();
        let plain = solve_travel_field(&env, &[3, 0], 0.0, &cfg()).unwrap();
        let sor = SolverConfig {
            relaxation: 1.5,
            ..cfg()
        };
        let fast = solve_travel_field(&env, &[3, 0], 0.0, &sor).unwrap();
        let a = plain.cost_at_origin().unwrap();
        let b = fast.cost_at_origin().unwrap();
        assert!((a - b).abs() < 1e-9 * a);
        assert!(fast.iterations() < plain.iterations());
    }

    #[test]
    fn rejects_bad_input() {
        let g = geo(1, 2);
        let env = Environment::constant(&g, 0).unwrap();
        assert!(matches!(
            solve_travel_field(&env, &[3], 0.0, &cfg()),
            Err(Error::OutsideBox { .. })
        ));
        assert!(solve_travel_field(&env, &[1], -1.0, &cfg()).is_err());
        assert!(solve_travel_field(&env, &[1], 0.0, &SolverConfig::with_tol(0.0)).is_err());
        let capped = SolverConfig {
            max_sweeps: 2,
            ..cfg()
        };
        match solve_travel_field(&env, &[2], 0.0, &capped) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    /// d = 1 with constant per-step factor c = e^{-(ω+λ)}/2: between the
    /// killing point -N-1 and the target y the field solves
    /// u(x) = c (u(x-1) + u(x+1)), so u(x) = sinh(k (x+N+1)) / sinh(k (y+N+1))
    /// with cosh k = 1/(2c). The log-domain evaluation below never underflows.
    fn log_closed_form_1d(potential: f64, lambda: f64, n: i64, y: i64, x: i64) -> f64 {
        let c = (-(potential + lambda)).exp() / 2.0;
        let k = (1.0 / (2.0 * c)).acosh();
        let log_sinh = |t: f64| t + (-(2.0 * t)).exp_m1().abs().ln() - 2f64.ln();
        log_sinh(k * (x + n + 1) as f64) - log_sinh(k * (y + n + 1) as f64)
    }

    #[test]
    fn log_scale_keeps_deep_underflow_representable() {
        // ln u(0) ≈ -887, far below the f64 range
        let g = geo(1, 10);
        let env = Environment::constant(&g, 0).unwrap();
        let lambda = 88.0;
        let f = solve_travel_field(&env, &[10], lambda, &cfg()).unwrap();
        let exact = log_closed_form_1d(0.0, lambda, 10, 10, 0);
        assert!(exact < -800.0);
        let got = -f.cost_at_origin().unwrap();
        assert!(((got - exact) / exact).abs() < 1e-10, "{got} vs {exact}");
        assert!(f.log_scale() < -100.0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let g = geo(1, 12);
        let env = Environment::constant(&g, 1).unwrap();
        let f = solve_travel_field(&env, &[7], 0.3, &cfg()).unwrap();
        for x in [-12, -3, 0, 5] {
            let exact = -log_closed_form_1d(1.0, 0.3, 12, 7, x);
            let got = f.cost(&[x]).unwrap();
            assert!((got - exact).abs() < 1e-9 * exact, "x={x}: {got} vs {exact}");
        }
    }

    #[test]
    fn target_value_independence() {
        let g = geo(2, 3);
        let env = sample_environment(&g, 0.5, 17).unwrap();
        let y = [1, 2];
        let other = env.flip_site(&y, 1 - env.value(&y).unwrap()).unwrap();
        let a = solve_travel_field(&env, &y, 0.2, &cfg()).unwrap();
        let b = solve_travel_field(&other, &y, 0.2, &cfg()).unwrap();
        let bits = |f: &QuenchedField<f64>| f.mantissa().iter().map(|m| m.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.log_scale().to_bits(), b.log_scale().to_bits());
    }

    #[test]
    fn dump_round_trip() {
        let g = geo(2, 2);
        let env = sample_environment(&g, 0.5, 1).unwrap();
        let f = solve_travel_field(&env, &[1, 1], 0.0, &cfg()).unwrap();
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().last().unwrap().starts_with("log_scale "));
        let back: FieldDump<f64> = read_field_dump(buf.as_slice()).unwrap();
        assert_eq!(back.mantissa, f.mantissa());
        assert_eq!(back.log_scale, f.log_scale());
        assert!(read_field_dump::<f64, _>("0 1.0\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn field_is_a_probability_weight(seed in any::<u64>(), r in 0.0f64..1.0, lambda in 0.0f64..2.0) {
            let g = geo(2, 3);
            let env = sample_environment(&g, r, seed).unwrap();
            let f = solve_travel_field(&env, &[2, 1], lambda, &cfg()).unwrap();
            prop_assert!(f.residual() <= 1e-12);
            for i in 0..g.site_count() {
                let u = f.value_at(i);
                prop_assert!((0.0..=1.0).contains(&u));
            }
            prop_assert_eq!(f.value_at(f.target_index()), 1.0);
            prop_assert!(f.cost_at_origin().unwrap() > 0.0);
        }

        #[test]
        fn raising_one_site_never_increases_the_field(seed in any::<u64>(), site in 0usize..49) {
            let g = geo(2, 3);
            let env = sample_environment(&g, 0.5, seed).unwrap();
            let y = [0, 2];
            let low = env.with_value_at(site, 0);
            let high = env.with_value_at(site, 1);
            let fl = solve_travel_field(&low, &y, 0.0, &cfg()).unwrap();
            let fh = solve_travel_field(&high, &y, 0.0, &cfg()).unwrap();
            for i in 0..g.site_count() {
                let (a, b) = (fh.value_at(i), fl.value_at(i));
                prop_assert!(a <= b * (1.0 + 1e-10), "site {}: {} > {}", i, a, b);
            }
        }

        #[test]
        fn larger_box_only_adds_paths(seed in any::<u64>(), r in 0.1f64..0.9) {
            let small = geo(2, 2);
            let big = geo(2, 4);
            let env = sample_environment(&small, r, seed).unwrap();
            // annulus set to potential 1
            let mut values = vec![1u8; big.site_count()];
            for (i, site) in small.sites().enumerate() {
                values[big.index_of(&site).unwrap()] = env.value_at(i);
            }
            let env_big = Environment::from_values(&big, values).unwrap();
            let y = [2, 0];
            let es = solve_travel_field(&env, &y, 0.0, &cfg()).unwrap().cost_at_origin().unwrap();
            let eb = solve_travel_field(&env_big, &y, 0.0, &cfg()).unwrap().cost_at_origin().unwrap();
            prop_assert!(eb <= es + 1e-10);
        }
    }
}
