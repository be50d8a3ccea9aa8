//! Flags, the JSON config file and their resolution into one validated run
//! configuration. Precedence: flag, then config file, then
//! `RWRP_DEFAULT_WORKERS` (workers only), then built-in defaults.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rwrp::lyapunov::BoxRule;
use rwrp::verify::Profile;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "rwrp", version, about = "Travel costs, Lyapunov exponents and rate functions for the random walk in a Bernoulli potential")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Solve one quenched field on a sampled (or loaded) environment.
    Solve,
    /// Quenched or annealed travel cost from 0 to y with the chosen estimator.
    Cost,
    /// -(d/dr) of the annealed cost by the local-time formula, site flips and finite differences.
    Derivative,
    /// Expected flip sum against its lower and upper linear bounds.
    Russo,
    /// Quenched or annealed Lyapunov exponent, or coupled p/q differences.
    Lyapunov,
    /// Inequality checks with pass/fail verdicts.
    Bounds,
    /// Quenched or annealed rate function.
    Rate,
    /// Exhaustive enumeration: every environment with its e-value.
    Oracle,
    /// Run the acceptance suite.
    Verify,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Exact,
    EnvMc,
    PathMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Quenched,
    Annealed,
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

/// Comma-separated list, e.g. `0.2,0.5`. A bare number is accepted in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "OneOrMany<T>")]
pub struct List<T>(pub Vec<T>);

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> From<OneOrMany<T>> for List<T> {
    fn from(v: OneOrMany<T>) -> Self {
        match v {
            OneOrMany::One(x) => List(vec![x]),
            OneOrMany::Many(xs) => List(xs),
        }
    }
}

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse `{}` in `{s}`", p.trim())))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

/// Semicolon-separated vectors, e.g. `1,0;0,1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vectors<T>(pub Vec<Vec<T>>);

impl<T: FromStr> FromStr for Vectors<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(';')
            .map(|v| v.parse::<List<T>>().map(|l| l.0))
            .collect::<Result<_, _>>()
            .map(Vectors)
    }
}

/// Every flag is optional here; defaults are applied in [`resolve`].
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Opts {
    /// Lattice dimension [default: 1]
    #[arg(long, global = true)]
    pub d: Option<usize>,

    /// Box radius N in lattice units; the box is [-N, N]^d [default: 2, or 4 for `rate`]
    #[arg(long = "N", global = true)]
    #[serde(rename = "N")]
    pub radius: Option<i64>,

    /// Box radius rule for exponent estimates, N(n) = A·n·|x|_inf + B [default: 2n+5]
    #[arg(long, global = true)]
    pub box_rule: Option<String>,

    /// Bernoulli parameter P(omega = 0), comma-separated for a grid [default: 0.5]
    #[arg(long, global = true)]
    pub r: Option<List<f64>>,

    /// Lower parameter of a coupled pair [default: 0.3]
    #[arg(long, global = true)]
    pub p: Option<f64>,

    /// Upper parameter of a coupled pair [default: 0.6]
    #[arg(long, global = true)]
    pub q: Option<f64>,

    /// Potential shift lambda >= 0 added at every site (nats per step) [default: 0]
    #[arg(long, global = true)]
    pub lambda: Option<f64>,

    /// Target site y as comma-separated integer coordinates [default: e_1]
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub y: Option<List<i64>>,

    /// Lattice directions, `;`-separated, each comma-separated and primitive [default: e_1]
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub direction: Option<Vectors<i64>>,

    /// Real points x with |x|_1 < 1 for rate functions, `;`-separated [default: 0.5·e_1]
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x: Option<Vectors<f64>>,

    /// Scales n for exponent estimates, strictly increasing [default: 2,4,8]
    #[arg(long, global = true)]
    pub n_list: Option<List<u64>>,

    /// Estimator [default: exact]
    #[arg(long, global = true, value_enum)]
    pub estimator: Option<Estimator>,

    /// Exponent or cost kind [default: annealed for cost, quenched otherwise]
    #[arg(long, global = true, value_enum)]
    pub kind: Option<Kind>,

    /// Monte Carlo replicates (environments or walks) per estimate [default: 1000]
    #[arg(long, global = true)]
    pub replicates: Option<usize>,

    /// Master seed; replicate streams are derived from it [default: 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Solver tolerance on the relative max-norm residual [default: max(1e-12, 64·eps)]
    #[arg(long, global = true)]
    pub tol: Option<f64>,

    /// Worker threads, 0 = all cores; results do not depend on it [default: $RWRP_DEFAULT_WORKERS or 0]
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Enumeration guard: maximum number of relevant sites [default: 24]
    #[arg(long, global = true)]
    pub guard: Option<usize>,

    /// Refine finite differences with one Richardson step [default: off]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub richardson: Option<bool>,

    /// Add exact pre-limit cells at (N, y) to `bounds` [default: off]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub exact: Option<bool>,

    /// `solve`: emit the flip-bound table instead of the field [default: off]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub flip_table: Option<bool>,

    /// `solve`: sites for the expected range, `;`-separated [default: the whole box]
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub sites: Option<Vectors<i64>>,

    /// `solve`: read the environment from this file instead of sampling it
    #[arg(long, global = true)]
    pub env: Option<PathBuf>,

    /// Checkpoint file for Monte Carlo costs; an interrupted run resumes from it
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Replicates between checkpoint flushes [default: 1000]
    #[arg(long, global = true)]
    pub checkpoint_every: Option<usize>,

    /// `verify`: budget profile, desk or quick [default: desk]
    #[arg(long, global = true)]
    pub profile: Option<String>,

    /// `verify`: run only these criterion numbers [default: all]
    #[arg(long, global = true)]
    pub only: Option<List<u32>>,

    /// Output file [default: stdout]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Output format [default: json]
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// JSON config file with any of the fields above; flags override it
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// The fully resolved configuration, embedded in every output.
///
/// `workers`, `out` and `format` are left out: they do not change results.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub command: Command,
    pub d: usize,
    #[serde(rename = "N")]
    pub radius: i64,
    pub box_rule: String,
    pub r: Vec<f64>,
    pub p: f64,
    pub q: f64,
    pub lambda: f64,
    pub y: Vec<i64>,
    pub direction: Vec<Vec<i64>>,
    pub x: Vec<Vec<f64>>,
    pub n_list: Vec<u64>,
    pub estimator: Estimator,
    pub kind: Kind,
    pub replicates: usize,
    pub seed: u64,
    pub tol: f64,
    pub guard: usize,
    pub richardson: bool,
    pub exact: bool,
    pub flip_table: bool,
    pub sites: Option<Vec<Vec<i64>>>,
    pub env: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub profile: Profile,
    pub only: Vec<u32>,
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub rule: BoxRule,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub format: Format,
}

fn invalid(field: &str, msg: impl fmt::Display) -> CliError {
    CliError::validation("invalid", format!("{field}: {msg}"))
}

/// Overlays non-null flag values on the config file.
fn merge(flags: &Opts) -> Result<Opts, CliError> {
    let Some(path) = &flags.config else {
        return Ok(flags.clone());
    };
    let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
    let mut base: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
    let overlay = serde_json::to_value(flags).expect("options serialise");
    let (Some(base_map), Some(over)) = (base.as_object_mut(), overlay.as_object()) else {
        return Err(invalid("config", "top level must be a JSON object"));
    };
    for (k, v) in over {
        if !v.is_null() {
            base_map.insert(k.clone(), v.clone());
        }
    }
    let mut merged: Opts = serde_json::from_value(base).map_err(|e| invalid("config", e))?;
    merged.config = flags.config.clone();
    Ok(merged)
}

fn unit(d: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = scale;
    v
}

pub fn resolve(command: Command, flags: &Opts) -> Result<Resolved, CliError> {
    let o = merge(flags)?;
    let d = o.d.unwrap_or(1);
    if d == 0 {
        return Err(invalid("d", "dimension must be at least 1"));
    }
    let default_radius = if command == Command::Rate { 4 } else { 2 };
    let radius = o.radius.unwrap_or(default_radius);
    if radius < 1 {
        return Err(invalid("N", format!("box radius must be at least 1, got {radius}")));
    }
    let box_rule = o.box_rule.unwrap_or_else(|| BoxRule::default().to_string());
    let rule: BoxRule = box_rule.parse().map_err(|e| invalid("box_rule", e))?;
    let r = o.r.map_or_else(|| vec![0.5], |l| l.0);
    if r.is_empty() || r.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("r", format!("values must lie in [0, 1], got {r:?}")));
    }
    let e1: Vec<i64> = unit(d, 1.0).iter().map(|&c| c as i64).collect();
    let y = o.y.map_or_else(|| e1.clone(), |l| l.0);
    if y.len() != d {
        return Err(invalid("y", format!("{y:?} does not have {d} coordinates")));
    }
    let direction = o.direction.map_or_else(|| vec![e1.clone()], |v| v.0);
    if let Some(bad) = direction.iter().find(|v| v.len() != d) {
        return Err(invalid("direction", format!("{bad:?} does not have {d} coordinates")));
    }
    let x = o.x.map_or_else(|| vec![unit(d, 0.5)], |v| v.0);
    if let Some(bad) = x.iter().find(|v| v.len() != d) {
        return Err(invalid("x", format!("{bad:?} does not have {d} coordinates")));
    }
    let replicates = o.replicates.unwrap_or(1000);
    if replicates == 0 {
        return Err(invalid("replicates", "must be at least 1"));
    }
    let tol = o.tol.unwrap_or_else(|| rwrp::SolverConfigF64::default().tol);
    if !(tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {tol}")));
    }
    let lambda = o.lambda.unwrap_or(0.0);
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid("lambda", format!("must be finite and ≥ 0, got {lambda}")));
    }
    let workers = match o.workers {
        Some(w) => w,
        None => match std::env::var("RWRP_DEFAULT_WORKERS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| invalid("RWRP_DEFAULT_WORKERS", format!("`{s}` is not a worker count")))?,
            Err(_) => 0,
        },
    };
    let profile: Profile = o
        .profile
        .as_deref()
        .unwrap_or("desk")
        .parse()
        .map_err(|e| invalid("profile", e))?;
    let default_kind = if command == Command::Cost { Kind::Annealed } else { Kind::Quenched };
    Ok(Resolved {
        command,
        d,
        radius,
        box_rule: rule.to_string(),
        r,
        p: o.p.unwrap_or(0.3),
        q: o.q.unwrap_or(0.6),
        lambda,
        y,
        direction,
        x,
        n_list: o.n_list.map_or_else(|| vec![2, 4, 8], |l| l.0),
        estimator: o.estimator.unwrap_or(Estimator::Exact),
        kind: o.kind.unwrap_or(default_kind),
        replicates,
        seed: o.seed.unwrap_or(1),
        tol,
        guard: o.guard.unwrap_or(rwrp::DEFAULT_ENUMERATION_GUARD),
        richardson: o.richardson.unwrap_or(false),
        exact: o.exact.unwrap_or(false),
        flip_table: o.flip_table.unwrap_or(false),
        sites: o.sites.map(|v| v.0),
        env: o.env,
        checkpoint: o.checkpoint,
        checkpoint_every: o.checkpoint_every.unwrap_or(1000),
        profile,
        only: o.only.map_or_else(Vec::new, |l| l.0),
        workers,
        rule,
        out: o.out,
        format: o.format.unwrap_or(Format::Json),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse() {
        assert_eq!("1,-2".parse::<List<i64>>().unwrap().0, vec![1, -2]);
        assert_eq!("1,0;0,1".parse::<Vectors<i64>>().unwrap().0, vec![vec![1, 0], vec![0, 1]]);
        assert!("1,a".parse::<List<i64>>().is_err());
    }

    #[test]
    fn defaults_follow_dimension() {
        let opts = Opts {
            d: Some(2),
            ..Opts::default()
        };
        let r = resolve(Command::Cost, &opts).unwrap();
        assert_eq!(r.y, vec![1, 0]);
        assert_eq!(r.x, vec![vec![0.5, 0.0]]);
        assert_eq!(r.kind, Kind::Annealed);
        assert_eq!(resolve(Command::Rate, &opts).unwrap().radius, 4);
    }

    #[test]
    fn bad_field_is_named() {
        let opts = Opts {
            y: Some(List(vec![1, 2])),
            ..Opts::default()
        };
        let e = resolve(Command::Cost, &opts).unwrap_err();
        assert!(e.message.starts_with("y:"), "{}", e.message);
        assert_eq!(e.code, 1);
    }
}
