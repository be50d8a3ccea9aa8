//! Bernoulli potentials on a box: sampling, monotone coupling, single-site
//! flips, exhaustive enumeration and the ASCII environment file format.
//!
//! A site carries potential `0` with probability `r` and `1` with probability
//! `1 - r`. Sampled environments keep their per-site uniforms; the value at a
//! site is `1` iff its uniform is `>= r`, so re-thresholding the same uniforms
//! at a larger `r` gives a pointwise smaller potential.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::BoxGeometry;
use crate::rng::site_uniforms;
use crate::scalar::Scalar;

/// Default cap on the number of relevant sites for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_GUARD: usize = 24;

#[derive(Debug, Clone)]
pub struct Environment {
    geometry: Arc<BoxGeometry>,
    values: Vec<u8>,
    uniforms: Option<Vec<f64>>,
    parameter_r: Option<f64>,
    seed: Option<u64>,
}

/// Environments compare by box and potential values only.
impl PartialEq for Environment {
    fn eq(&self, other: &Self) -> bool {
        *self.geometry == *other.geometry && self.values == other.values
    }
}

fn check_r(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invalid(format!("Bernoulli parameter r = {r} outside [0, 1]")));
    }
    Ok(())
}

fn threshold(uniforms: &[f64], r: f64) -> Vec<u8> {
    uniforms.iter().map(|&u| u8::from(u >= r)).collect()
}

/// Samples an i.i.d. Bernoulli potential with `P(value = 0) = r`.
pub fn sample_environment(geometry: &Arc<BoxGeometry>, r: f64, seed: u64) -> Result<Environment> {
    check_r(r)?;
    let uniforms = site_uniforms(geometry, seed)?;
    Ok(Environment {
        geometry: Arc::clone(geometry),
        values: threshold(&uniforms, r),
        uniforms: Some(uniforms),
        parameter_r: Some(r),
        seed: Some(seed),
    })
}

impl Environment {
    /// An explicitly specified environment (no uniforms, no parameter).
    pub fn from_values(geometry: &Arc<BoxGeometry>, values: Vec<u8>) -> Result<Self> {
        if values.len() != geometry.site_count() {
            return Err(Error::Invalid(format!(
                "expected {} site values, got {}",
                geometry.site_count(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("potential value {bad} is not in {{0, 1}}")));
        }
        Ok(Self {
            geometry: Arc::clone(geometry),
            values,
            uniforms: None,
            parameter_r: None,
            seed: None,
        })
    }

    /// Constant potential `value` on every site.
    pub fn constant(geometry: &Arc<BoxGeometry>, value: u8) -> Result<Self> {
        Self::from_values(geometry, vec![value; geometry.site_count()])
    }

    pub fn geometry(&self) -> &Arc<BoxGeometry> {
        &self.geometry
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn value_at(&self, index: usize) -> u8 {
        self.values[index]
    }

    pub fn value(&self, site: &[i64]) -> Result<u8> {
        Ok(self.values[self.geometry.index_of(site)?])
    }

    pub fn uniforms(&self) -> Option<&[f64]> {
        self.uniforms.as_deref()
    }

    pub fn parameter_r(&self) -> Option<f64> {
        self.parameter_r
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Re-thresholds the stored uniforms at `r_new`.
    pub fn couple(&self, r_new: f64) -> Result<Environment> {
        check_r(r_new)?;
        let uniforms = self.uniforms.as_ref().ok_or(Error::MissingUniforms)?;
        Ok(Environment {
            geometry: Arc::clone(&self.geometry),
            values: threshold(uniforms, r_new),
            uniforms: Some(uniforms.clone()),
            parameter_r: Some(r_new),
            seed: self.seed,
        })
    }

    /// Copy with the value at `z` set to `v`; uniforms and parameter are dropped.
    pub fn flip_site(&self, z: &[i64], v: u8) -> Result<Environment> {
        let index = self.geometry.index_of(z)?;
        if v > 1 {
            return Err(Error::Invalid(format!("potential value {v} is not in {{0, 1}}")));
        }
        Ok(self.with_value_at(index, v))
    }

    pub(crate) fn with_value_at(&self, index: usize, v: u8) -> Environment {
        let mut values = self.values.clone();
        values[index] = v;
        Environment {
            geometry: Arc::clone(&self.geometry),
            values,
            uniforms: None,
            parameter_r: None,
            seed: None,
        }
    }

    /// Restriction to a smaller centred box (uniforms kept when present).
    pub fn restrict(&self, target: &Arc<BoxGeometry>) -> Result<Environment> {
        if target.dimension() != self.geometry.dimension() || target.radius() > self.geometry.radius() {
            return Err(Error::Invalid("restriction target must be a sub-box of the same dimension".into()));
        }
        let mut values = Vec::with_capacity(target.site_count());
        let mut uniforms = self.uniforms.as_ref().map(|_| Vec::with_capacity(target.site_count()));
        for site in target.sites() {
            let j = self.geometry.index_of(&site)?;
            values.push(self.values[j]);
            if let (Some(out), Some(src)) = (uniforms.as_mut(), self.uniforms.as_ref()) {
                out.push(src[j]);
            }
        }
        Ok(Environment {
            geometry: Arc::clone(target),
            values,
            uniforms,
            parameter_r: self.parameter_r,
            seed: self.seed,
        })
    }

    /// Writes the ASCII format: header `d N r seed`, then `index value` per site.
    ///
    /// `r` and `seed` are written as `-` for explicitly constructed environments.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let r = self.parameter_r.map_or_else(|| "-".to_string(), |r| format!("{r}"));
        let seed = self.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
        writeln!(w, "{} {} {} {}", self.geometry.dimension(), self.geometry.radius(), r, seed)?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{i} {v}")?;
        }
        Ok(())
    }

    /// Parses the ASCII format written by [`Environment::write_to`].
    ///
    /// When the header carries `r` and `seed` and the listed values match a
    /// fresh sample, the coupling uniforms are restored.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Environment> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty environment file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("header must be `d N r seed`, got `{header}`")));
        }
        let d: usize = fields[0].parse().map_err(|e| Error::Parse(format!("d: {e}")))?;
        let n: i64 = fields[1].parse().map_err(|e| Error::Parse(format!("N: {e}")))?;
        let r: Option<f64> = match fields[2] {
            "-" => None,
            s => Some(s.parse().map_err(|e| Error::Parse(format!("r: {e}")))?),
        };
        let seed: Option<u64> = match fields[3] {
            "-" => None,
            s => Some(s.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?),
        };
        let geometry = Arc::new(BoxGeometry::new(d, n)?);
        let mut values = vec![u8::MAX; geometry.site_count()];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(i), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("bad site line `{line}`")));
            };
            let i: usize = i.parse().map_err(|e| Error::Parse(format!("index: {e}")))?;
            let v: u8 = v.parse().map_err(|e| Error::Parse(format!("value: {e}")))?;
            if i >= values.len() || v > 1 {
                return Err(Error::Parse(format!("bad site line `{line}`")));
            }
            values[i] = v;
        }
        if values.contains(&u8::MAX) {
            return Err(Error::Parse("environment file does not list every site".into()));
        }
        let mut env = Environment::from_values(&geometry, values)?;
        env.parameter_r = r;
        env.seed = seed;
        if let (Some(r), Some(seed)) = (r, seed) {
            if let Ok(fresh) = sample_environment(&geometry, r, seed) {
                if fresh.values == env.values {
                    env.uniforms = fresh.uniforms;
                }
            }
        }
        Ok(env)
    }
}

/// An environment together with its probability under `P_r` on the relevant sites.
#[derive(Debug, Clone)]
pub struct WeightedEnvironment<F> {
    pub environment: Environment,
    pub weight: F,
    /// Number of relevant sites with potential 0.
    pub zeros: usize,
    /// Bit `k` set iff relevant site `k` has potential 1.
    pub mask: u64,
}

/// All box sites except `exclude` (the target, whose value never matters).
pub fn relevant_sites_excluding(geometry: &BoxGeometry, exclude: &[i64]) -> Result<Vec<usize>> {
    let skip = geometry.index_of(exclude)?;
    Ok((0..geometry.site_count()).filter(|&i| i != skip).collect())
}

/// Exhaustive enumeration of the `2^m` environments on `relevant` sites.
///
/// Sites outside `relevant` are fixed to 0. Environment `mask` has potential 1
/// exactly on the relevant sites whose bit is set, and weight
/// `r^{#zeros} (1-r)^{#ones}`.
pub fn enumerate_environments<F: Scalar>(
    geometry: &Arc<BoxGeometry>,
    relevant: &[usize],
    r: F,
    guard: usize,
) -> Result<impl Iterator<Item = WeightedEnvironment<F>>> {
    check_r(r.as_f64())?;
    let m = relevant.len();
    if m > guard || m >= 64 {
        return Err(Error::GuardExceeded { sites: m, guard });
    }
    if let Some(&bad) = relevant.iter().find(|&&i| i >= geometry.site_count()) {
        return Err(Error::Invalid(format!("relevant site index {bad} outside the box")));
    }
    let geometry = Arc::clone(geometry);
    let relevant = relevant.to_vec();
    Ok((0..(1u64 << m)).map(move |mask| {
        let mut values = vec![0u8; geometry.site_count()];
        for (k, &i) in relevant.iter().enumerate() {
            values[i] = ((mask >> k) & 1) as u8;
        }
        let ones = mask.count_ones() as usize;
        let zeros = m - ones;
        WeightedEnvironment {
            environment: Environment {
                geometry: Arc::clone(&geometry),
                values,
                uniforms: None,
                parameter_r: None,
                seed: None,
            },
            weight: binomial_weight(r, zeros, ones),
            zeros,
            mask,
        }
    }))
}

/// `r^zeros (1-r)^ones`.
pub fn binomial_weight<F: Scalar>(r: F, zeros: usize, ones: usize) -> F {
    r.powi(zeros as i32) * (F::one() - r).powi(ones as i32)
}
