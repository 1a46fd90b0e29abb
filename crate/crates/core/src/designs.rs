//! Nested quasi-uniform designs from the unscrambled Sobol' sequence.
//!
//! Every design used by the engine is a prefix of one deterministic point
//! stream, so a design of size `m` is contained in every design of size
//! `n >= m`. Direction numbers follow the Joe–Kuo `new-joe-kuo-6.21201`
//! table (rows `d s a m_1 .. m_s`) and are embedded for dimensions 1 to 20.
//! The all-zero first point is skipped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::euclidean;

pub const MAX_SOBOL_DIM: usize = 20;
const BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2..=20; dimension 1 is van der Corput.
const JOE_KUO: [(u32, u32, &[u32]); MAX_SOBOL_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
];

/// Axis-aligned box `[lower_j, upper_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(
                "domain",
                format!("bounds of length {} and {}", lower.len(), upper.len()),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::invalid("domain", "every upper bound must exceed its lower bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.side_lengths().iter().product()
    }

    /// Affine image of a point of the unit cube.
    pub fn map_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Gray-code Sobol' generator on the unit cube.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_SOBOL_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; BITS];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1u32 << (BITS - 1 - k);
        }
        directions.push(first);
        for &(s, a, m) in JOE_KUO.iter().take(dim - 1) {
            let s = s as usize;
            let mut v = [0u32; BITS];
            for k in 0..s.min(BITS) {
                v[k] = m[k] << (BITS - 1 - k);
            }
            for k in s..BITS {
                let mut x = v[k - s] ^ (v[k - s] >> s);
                for j in 1..s {
                    if (a >> (s - 1 - j)) & 1 == 1 {
                        x ^= v[k - j];
                    }
                }
                v[k] = x;
            }
            directions.push(v);
        }
        Ok(Self { directions })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Point number `index` of the full sequence (index 0 is the origin).
    pub fn point(&self, index: u64) -> Vec<f64> {
        let gray = index ^ (index >> 1);
        self.directions
            .iter()
            .map(|v| {
                let mut x = 0u32;
                let mut g = gray;
                let mut k = 0;
                while g != 0 {
                    if g & 1 == 1 {
                        x ^= v[k];
                    }
                    g >>= 1;
                    k += 1;
                }
                x as f64 / (1u64 << BITS) as f64
            })
            .collect()
    }

    /// Points `1..=n` of the sequence, generated incrementally.
    pub fn prefix(&self, n: usize) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut state = vec![0u32; dim];
        let scale = 1.0 / (1u64 << BITS) as f64;
        let mut out = Vec::with_capacity(n);
        for i in 0..n as u64 {
            // Gray-code step from point i to point i + 1 flips the lowest zero bit of i.
            let c = (!i).trailing_zeros() as usize;
            for (s, v) in state.iter_mut().zip(&self.directions) {
                *s ^= v[c];
            }
            out.push(state.iter().map(|&s| s as f64 * scale).collect());
        }
        out
    }
}

/// First `n` points (origin skipped) of the `d`-dimensional Sobol' sequence mapped onto `domain`.
pub fn sobol_prefix(d: usize, n: usize, domain: &Domain) -> Result<Vec<Vec<f64>>> {
    if domain.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: domain.dim(),
        });
    }
    let gen = Sobol::new(d)?;
    Ok(gen.prefix(n).iter().map(|u| domain.map_unit(u)).collect())
}

/// Upper limit on the number of evaluation nodes used by [`fill_distance`].
pub const FILL_GRID_CAP: usize = 1 << 22;
const FILL_SOBOL_CANDIDATES: usize = 1 << 16;

/// Numerical fill distance `sup_x min_u ||x - x_u||`.
///
/// For `d <= 2` the supremum is taken over a `resolution^d` grid including
/// the boundary (resolution shrunk if it would exceed [`FILL_GRID_CAP`]);
/// above that over `2^16` Sobol' candidates. The result underestimates the
/// true fill distance and converges as the node set is refined.
pub fn fill_distance(design: &[Vec<f64>], domain: &Domain, resolution: usize) -> Result<f64> {
    if design.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let d = domain.dim();
    if let Some(bad) = design.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let nodes: Vec<Vec<f64>> = if d <= 2 {
        let mut res = resolution.max(2);
        while res.pow(d as u32) > FILL_GRID_CAP {
            res /= 2;
        }
        let axis: Vec<f64> = (0..res).map(|i| i as f64 / (res - 1) as f64).collect();
        if d == 1 {
            axis.iter().map(|&t| domain.map_unit(&[t])).collect()
        } else {
            axis.iter()
                .flat_map(|&a| axis.iter().map(move |&b| [a, b]))
                .map(|u| domain.map_unit(&u))
                .collect()
        }
    } else {
        sobol_prefix(d, FILL_SOBOL_CANDIDATES, domain)?
    };
    Ok(nodes
        .par_iter()
        .map(|x| {
            design
                .iter()
                .map(|p| euclidean(x, p))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_point_is_center() {
        let x = sobol_prefix(1, 1, &Domain::unit(1)).unwrap();
        assert_eq!(x, vec![vec![0.5]]);
    }

    #[test]
    fn two_dim_reference_prefix() {
        let x = sobol_prefix(2, 4, &Domain::unit(2)).unwrap();
        let expected = vec![
            vec![0.5, 0.5],
            vec![0.75, 0.25],
            vec![0.25, 0.75],
            vec![0.375, 0.375],
        ];
        assert_eq!(x, expected);
    }

    #[test]
    fn twenty_dim_reference_points() {
        // Rows 1000 and 1024 of the full sequence (origin at row 0) from an
        // independent Joe–Kuo implementation.
        let row_1000 = [
            0.2197265625, 0.0966796875, 0.5185546875, 0.6767578125, 0.2802734375, 0.9072265625,
            0.0458984375, 0.8994140625, 0.5009765625, 0.0693359375, 0.0849609375, 0.2548828125,
            0.1611328125, 0.3837890625, 0.1435546875, 0.3701171875, 0.7197265625, 0.3447265625,
            0.9912109375, 0.7255859375,
        ];
        let row_1024 = [
            0.00146484375, 0.37646484375, 0.44775390625, 0.48681640625, 0.55712890625,
            0.84423828125, 0.24169921875, 0.58740234375, 0.69677734375, 0.67138671875,
            0.82177734375, 0.92138671875, 0.70654296875, 0.33837890625, 0.13232421875,
            0.85693359375, 0.85498046875, 0.19775390625, 0.53857421875, 0.34619140625,
        ];
        let row_37 = [
            0.921875, 0.640625, 0.578125, 0.921875, 0.765625, 0.296875, 0.171875, 0.796875,
            0.609375, 0.171875, 0.015625, 0.078125, 0.578125, 0.859375, 0.109375, 0.484375,
            0.796875, 0.421875, 0.046875, 0.140625,
        ];
        let gen = Sobol::new(20).unwrap();
        let pts = gen.prefix(1024);
        assert_eq!(pts[999], row_1000.to_vec());
        assert_eq!(pts[1023], row_1024.to_vec());
        assert_eq!(pts[36], row_37.to_vec());
        assert_eq!(gen.point(1000), row_1000.to_vec());
    }

    #[test]
    fn prefix_property() {
        let dom = Domain::new(vec![-1.0, 2.0, 0.0], vec![1.0, 5.0, 0.5]).unwrap();
        let a = sobol_prefix(3, 8, &dom).unwrap();
        let b = sobol_prefix(3, 4, &dom).unwrap();
        assert_eq!(&a[..4], &b[..]);
        assert!(a.iter().all(|x| dom.contains(x)));
    }

    #[test]
    fn unsupported_dimensions() {
        assert!(matches!(Sobol::new(0), Err(Error::UnsupportedDimension(0))));
        assert!(matches!(Sobol::new(21), Err(Error::UnsupportedDimension(21))));
    }

    #[test]
    fn fill_distance_examples() {
        let dom = Domain::unit(1);
        let h = fill_distance(&[vec![0.5]], &dom, 1001).unwrap();
        assert!((h - 0.5).abs() < 1e-12);
        let h = fill_distance(&[vec![0.25], vec![0.75]], &dom, 1001).unwrap();
        assert!((h - 0.25).abs() < 1e-12);
        assert!(fill_distance(&[], &dom, 10).is_err());
    }

    #[test]
    fn fill_distance_scales_like_inverse_sqrt_n() {
        let dom = Domain::unit(2);
        let h16 = fill_distance(&sobol_prefix(2, 16, &dom).unwrap(), &dom, 257).unwrap();
        let h64 = fill_distance(&sobol_prefix(2, 64, &dom).unwrap(), &dom, 257).unwrap();
        let c = h16 * 4.0;
        assert!(h64 <= c / 8.0 * 2.0, "h64 {h64} vs c {c}");
    }

    #[test]
    fn domain_validation() {
        assert!(Domain::new(vec![0.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert_eq!(Domain::new(vec![0.0, 1.0], vec![2.0, 4.0]).unwrap().volume(), 6.0);
    }
}
