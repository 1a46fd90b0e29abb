//! Numerical L2 and L-infinity norms of functions over a box.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::designs::{sobol_prefix, Domain};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L2,
    Linf,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L2 => "l2",
            NormKind::Linf => "linf",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(NormKind::L2),
            "linf" | "l_inf" | "inf" => Ok(NormKind::Linf),
            other => Err(Error::invalid("norm", format!("expected `l2` or `linf`, got `{other}`"))),
        }
    }
}

/// Fixed evaluation nodes for estimating a function norm on a domain.
///
/// L2 uses `budget` uniform points from a seeded ChaCha stream and returns
/// `(Vol * mean f^2)^{1/2}`; L-infinity uses the first `budget` Sobol' points
/// and returns `max |f|`.
#[derive(Debug, Clone)]
pub struct NormEstimator {
    kind: NormKind,
    volume: f64,
    nodes: Vec<Vec<f64>>,
}

impl NormEstimator {
    pub fn new(kind: NormKind, domain: &Domain, budget: usize, seed: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("budget", "must be at least 1"));
        }
        let nodes = match kind {
            NormKind::L2 => uniform_points(domain, budget, seed),
            NormKind::Linf => sobol_prefix(domain.dim(), budget, domain)?,
        };
        Ok(Self {
            kind,
            volume: domain.volume(),
            nodes,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    /// Norm from values of the function at [`NormEstimator::nodes`], in order.
    pub fn reduce(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nodes.len());
        match self.kind {
            NormKind::L2 => {
                let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
                (self.volume * mean_sq).sqrt()
            }
            NormKind::Linf => values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    pub fn norm_of(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let values: Vec<f64> = self.nodes.iter().map(|x| f(x)).collect();
        self.reduce(&values)
    }
}

/// `n` independent uniform points on `domain` from a ChaCha8 stream seeded with `seed`.
pub fn uniform_points(domain: &Domain, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            domain
                .lower
                .iter()
                .zip(&domain.upper)
                .map(|(l, h)| rng.random_range(*l..*h))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("L2".parse::<NormKind>().unwrap(), NormKind::L2);
        assert_eq!("linf".parse::<NormKind>().unwrap(), NormKind::Linf);
        assert!("l1".parse::<NormKind>().is_err());
        assert_eq!(NormKind::Linf.to_string(), "linf");
    }

    #[test]
    fn constant_function_norms() {
        let dom = Domain::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        let l2 = NormEstimator::new(NormKind::L2, &dom, 100, 1).unwrap();
        assert!((l2.norm_of(|_| 2.0) - 2.0 * 6f64.sqrt()).abs() < 1e-12);
        let linf = NormEstimator::new(NormKind::Linf, &dom, 64, 1).unwrap();
        assert_eq!(linf.norm_of(|x| -x[0]), linf.nodes().iter().map(|x| x[0]).fold(0.0, f64::max));
    }

    #[test]
    fn seeded_points_reproducible() {
        let dom = Domain::unit(3);
        assert_eq!(uniform_points(&dom, 10, 7), uniform_points(&dom, 10, 7));
        assert_ne!(uniform_points(&dom, 10, 7), uniform_points(&dom, 10, 8));
    }
}
