//! Counter-based random streams.
//!
//! Per-site uniforms come from a ChaCha8 stream keyed by the master seed and
//! read at a word position derived from the site's *coordinates*, so the same
//! site gets the same uniform in every box that contains it and regardless of
//! iteration order or thread schedule.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::BoxGeometry;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `index` under `master`; injective in `index` for a fixed master.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Random generator for one replicate stream.
pub fn stream_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits_per_axis(dimension: usize) -> u32 {
    (66 / dimension as u32).min(64)
}

/// Word position of a site in the coordinate-keyed stream.
fn site_word_pos(site: &[i64], bits: u32) -> Result<u128> {
    let half: i128 = 1i128 << (bits - 1);
    let mut key: u128 = 0;
    for &c in site {
        let shifted = c as i128 + half;
        if shifted < 0 || shifted >= (half << 1) {
            return Err(Error::Invalid(format!(
                "coordinate {c} exceeds the {bits}-bit range of the site-keyed generator"
            )));
        }
        key = (key << bits) | shifted as u128;
    }
    Ok(key * 2)
}

/// Uniforms in `[0, 1)` for every site of `geometry`, in index order.
pub fn site_uniforms(geometry: &BoxGeometry, seed: u64) -> Result<Vec<f64>> {
    let d = geometry.dimension();
    let bits = bits_per_axis(d);
    let radius = geometry.radius();
    if bits < 64 && radius >= 1i64 << (bits - 1) {
        return Err(Error::Invalid(format!(
            "box radius {radius} too large for the site-keyed generator in dimension {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = geometry.side();
    let mut out = Vec::with_capacity(geometry.site_count());
    for row_start in (0..geometry.site_count()).step_by(side) {
        let first = geometry.site_at(row_start)?;
        rng.set_word_pos(site_word_pos(&first, bits)?);
        for _ in 0..side {
            out.push(rng.random::<f64>());
        }
    }
    Ok(out)
}

/// Uniform for a single site; agrees with [`site_uniforms`] entrywise.
pub fn site_uniform(seed: u64, site: &[i64]) -> Result<f64> {
    let bits = bits_per_axis(site.len().max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(site_word_pos(site, bits)?);
    let raw = rng.next_u64();
    Ok((raw >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
}
