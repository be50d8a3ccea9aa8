//! Box geometry `Z^d ∩ [-N, N]^d`: site indexing and nearest-neighbour tables.
//!
//! Sites are indexed row-major with axis `e_1` the slowest and `e_d` the
//! fastest. Neighbours are always listed in the order
//! `+e_1, -e_1, +e_2, -e_2, ..., +e_d, -e_d`; a neighbour outside the box is
//! reported as [`Neighbor::Killed`] (the walk is killed on exit).

use std::fmt;

use crate::error::{Error, Result};

/// One entry of a neighbour list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Neighbor {
    Site(Vec<i64>),
    Killed,
}

/// The box `[-N, N]^d` with a precomputed neighbour table.
///
/// The table stores site indices as `u32`; out-of-box neighbours point at the
/// ghost slot `site_count`, so solvers can keep one extra zero entry and sweep
/// without branching.
#[derive(Clone)]
pub struct BoxGeometry {
    dimension: usize,
    radius: i64,
    side: usize,
    site_count: usize,
    strides: Vec<usize>,
    neighbor_table: Vec<u32>,
}

impl fmt::Debug for BoxGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoxGeometry")
            .field("dimension", &self.dimension)
            .field("radius", &self.radius)
            .field("site_count", &self.site_count)
            .finish()
    }
}

impl PartialEq for BoxGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension && self.radius == other.radius
    }
}

impl Eq for BoxGeometry {}

/// Builds the box `Z^d ∩ [-N, N]^d`.
pub fn build_box(dimension: usize, radius: i64) -> Result<BoxGeometry> {
    BoxGeometry::new(dimension, radius)
}

impl BoxGeometry {
    pub fn new(dimension: usize, radius: i64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Invalid("dimension must be at least 1".into()));
        }
        if radius < 1 {
            return Err(Error::Invalid(format!("box radius must be at least 1, got {radius}")));
        }
        let too_large = |reason: String| Error::BoxTooLarge {
            dimension,
            radius,
            reason,
        };
        let side = radius
            .checked_mul(2)
            .and_then(|v| v.checked_add(1))
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| too_large("side length 2N+1 overflows".into()))?;
        let mut site_count: usize = 1;
        for _ in 0..dimension {
            site_count = site_count
                .checked_mul(side)
                .ok_or_else(|| too_large("(2N+1)^d overflows the platform index range".into()))?;
        }
        // ghost slot must also be addressable as u32
        if site_count >= u32::MAX as usize {
            return Err(too_large(format!(
                "(2N+1)^d = {site_count} exceeds the 32-bit site index range"
            )));
        }
        let degree = 2 * dimension;
        let table_len = site_count
            .checked_mul(degree)
            .ok_or_else(|| too_large("neighbour table size overflows".into()))?;

        let mut strides = vec![1usize; dimension];
        for axis in (0..dimension.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * side;
        }

        let ghost = site_count as u32;
        let mut neighbor_table = Vec::with_capacity(table_len);
        let mut coords = vec![-radius; dimension];
        for index in 0..site_count {
            for axis in 0..dimension {
                let c = coords[axis];
                neighbor_table.push(if c < radius {
                    (index + strides[axis]) as u32
                } else {
                    ghost
                });
                neighbor_table.push(if c > -radius {
                    (index - strides[axis]) as u32
                } else {
                    ghost
                });
            }
            // advance row-major odometer, last axis fastest
            for axis in (0..dimension).rev() {
                if coords[axis] < radius {
                    coords[axis] += 1;
                    break;
                }
                coords[axis] = -radius;
            }
        }

        Ok(Self {
            dimension,
            radius,
            side,
            site_count,
            strides,
            neighbor_table,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    /// `2N + 1`.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn site_count(&self) -> usize {
        self.site_count
    }

    /// Number of neighbours of every site, `2d`.
    pub fn degree(&self) -> usize {
        2 * self.dimension
    }

    /// Index of the ghost (killed) slot in the neighbour table.
    pub fn ghost(&self) -> usize {
        self.site_count
    }

    pub fn contains(&self, site: &[i64]) -> bool {
        site.len() == self.dimension && site.iter().all(|&c| c.abs() <= self.radius)
    }

    fn check(&self, site: &[i64]) -> Result<()> {
        if site.len() != self.dimension {
            return Err(Error::Invalid(format!(
                "site {site:?} has {} coordinates, box dimension is {}",
                site.len(),
                self.dimension
            )));
        }
        if !self.contains(site) {
            return Err(Error::OutsideBox {
                site: site.to_vec(),
                radius: self.radius,
                dimension: self.dimension,
            });
        }
        Ok(())
    }

    pub fn index_of(&self, site: &[i64]) -> Result<usize> {
        self.check(site)?;
        Ok(site
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (c + self.radius) as usize * s)
            .sum())
    }

    pub fn site_at(&self, index: usize) -> Result<Vec<i64>> {
        if index >= self.site_count {
            return Err(Error::Invalid(format!(
                "site index {index} out of range 0..{}",
                self.site_count
            )));
        }
        Ok(self
            .strides
            .iter()
            .map(|&s| ((index / s) % self.side) as i64 - self.radius)
            .collect())
    }

    pub fn origin_index(&self) -> usize {
        self.strides.iter().map(|&s| self.radius as usize * s).sum()
    }

    /// The `2d` neighbours of `site`, out-of-box ones as [`Neighbor::Killed`].
    pub fn neighbors(&self, site: &[i64]) -> Result<Vec<Neighbor>> {
        self.check(site)?;
        let mut out = Vec::with_capacity(self.degree());
        for axis in 0..self.dimension {
            for step in [1i64, -1] {
                let mut next = site.to_vec();
                next[axis] += step;
                out.push(if self.contains(&next) {
                    Neighbor::Site(next)
                } else {
                    Neighbor::Killed
                });
            }
        }
        Ok(out)
    }

    /// Raw neighbour indices of the site with index `index`; the ghost slot marks killing.
    #[inline]
    pub fn neighbor_indices(&self, index: usize) -> &[u32] {
        let deg = self.degree();
        &self.neighbor_table[index * deg..(index + 1) * deg]
    }

    #[inline]
    pub(crate) fn neighbor_table(&self) -> &[u32] {
        &self.neighbor_table
    }

    /// Iterator over all sites in index order.
    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.site_count).map(move |i| self.site_at(i).expect("index in range"))
    }
}

pub fn l1_norm(site: &[i64]) -> i64 {
    site.iter().map(|c| c.abs()).sum()
}

pub fn linf_norm(site: &[i64]) -> i64 {
    site.iter().map(|c| c.abs()).max().unwrap_or(0)
}

/// Greatest common divisor of the absolute coordinates (0 for the zero vector).
pub fn coordinate_gcd(site: &[i64]) -> i64 {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    site.iter().fold(0, |g, &c| gcd(g, c.abs()))
}

/// `n * x` coordinatewise.
pub fn scale_site(site: &[i64], n: i64) -> Vec<i64> {
    site.iter().map(|c| c * n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn site_counts() {
        assert_eq!(build_box(1, 1).unwrap().site_count(), 3);
        assert_eq!(build_box(2, 1).unwrap().site_count(), 9);
        assert_eq!(build_box(3, 15).unwrap().site_count(), 29791);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(build_box(0, 3).is_err());
        assert!(build_box(2, 0).is_err());
        let err = build_box(64, 1_000_000).unwrap_err();
        assert!(matches!(err, Error::BoxTooLarge { .. }), "{err}");
        assert!(err.to_string().contains("overflows"));
        let err = build_box(3, 2000).unwrap_err();
        assert!(err.to_string().contains("32-bit"), "{err}");
    }

    #[test]
    fn neighbor_examples() {
        let b = build_box(1, 1).unwrap();
        assert_eq!(
            b.neighbors(&[0]).unwrap(),
            vec![Neighbor::Site(vec![1]), Neighbor::Site(vec![-1])]
        );
        assert_eq!(
            b.neighbors(&[1]).unwrap(),
            vec![Neighbor::Killed, Neighbor::Site(vec![0])]
        );
        let b = build_box(2, 1).unwrap();
        assert_eq!(
            b.neighbors(&[1, 1]).unwrap(),
            vec![
                Neighbor::Killed,
                Neighbor::Site(vec![0, 1]),
                Neighbor::Killed,
                Neighbor::Site(vec![1, 0])
            ]
        );
        assert!(matches!(b.neighbors(&[2, 0]), Err(Error::OutsideBox { .. })));
    }

    #[test]
    fn norms() {
        assert_eq!(l1_norm(&[0, 0, 0]), 0);
        assert_eq!(linf_norm(&[0, 0, 0]), 0);
        assert_eq!(l1_norm(&[1, -2]), 3);
        assert_eq!(linf_norm(&[1, -2]), 2);
        assert_eq!(l1_norm(&[-5]), 5);
        assert_eq!(coordinate_gcd(&[4, -6]), 2);
        assert_eq!(coordinate_gcd(&[0, -1]), 1);
    }

    #[test]
    fn row_major_layout() {
        let b = build_box(2, 1).unwrap();
        assert_eq!(b.index_of(&[-1, -1]).unwrap(), 0);
        assert_eq!(b.index_of(&[-1, 0]).unwrap(), 1);
        assert_eq!(b.index_of(&[0, -1]).unwrap(), 3);
        assert_eq!(b.origin_index(), 4);
    }

    #[test]
    fn table_agrees_with_coordinates() {
        let b = build_box(3, 2).unwrap();
        for i in 0..b.site_count() {
            let site = b.site_at(i).unwrap();
            let listed = b.neighbors(&site).unwrap();
            for (raw, n) in b.neighbor_indices(i).iter().zip(listed) {
                match n {
                    Neighbor::Killed => assert_eq!(*raw as usize, b.ghost()),
                    Neighbor::Site(s) => assert_eq!(*raw as usize, b.index_of(&s).unwrap()),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn index_round_trips(d in 1usize..4, n in 1i64..5, seed in any::<u64>()) {
            let b = build_box(d, n).unwrap();
            let i = (seed as usize) % b.site_count();
            let site = b.site_at(i).unwrap();
            prop_assert_eq!(b.index_of(&site).unwrap(), i);
        }

        #[test]
        fn interior_edges_counted_twice(d in 1usize..4, n in 1i64..4) {
            let b = build_box(d, n).unwrap();
            let live: usize = (0..b.site_count())
                .map(|i| b.neighbor_indices(i).iter().filter(|&&j| j as usize != b.ghost()).count())
                .sum();
            prop_assert_eq!(live % 2, 0);
            // interior sites have all 2d neighbours
            let inner = (0..b.site_count())
                .filter(|&i| linf_norm(&b.site_at(i).unwrap()) < n)
                .all(|i| b.neighbor_indices(i).iter().all(|&j| (j as usize) < b.ghost()));
            prop_assert!(inner);
        }
    }
}
