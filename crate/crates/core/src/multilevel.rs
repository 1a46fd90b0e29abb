//! The multi-level emulator `f_L(x) ~ sum_l P_l(x)`, where `P_l` interpolates the
//! refinement `f_l - f_{l-1}` on a nested design.

use serde::{Deserialize, Serialize};

use crate::benchmarks::FidelityLadder;
use crate::designs::Domain;
use crate::error::{Error, Result};
use crate::norms::{NormEstimator, NormKind};
use crate::rkhs::{Interpolant, StoredInterpolant};

/// Schema tag written into emulator files.
pub const EMULATOR_SCHEMA: &str = "stacking-design/emulator/v1";

/// One fidelity level of the emulator.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub level: usize,
    pub xi: f64,
    pub cost: f64,
    /// Simulator output `f_l` on the design, in design order.
    pub values: Vec<f64>,
    /// Interpolant of `z_l = f_l - f_{l-1}` on the design.
    pub interpolant: Interpolant,
    /// `(z^T Phi^-1 z)^{1/2}`
    pub norm_estimate: f64,
    /// Norm of the power function under the campaign norm.
    pub sigma_norm: f64,
}

impl LevelState {
    pub fn n(&self) -> usize {
        self.interpolant.len()
    }

    pub fn design(&self) -> &[Vec<f64>] {
        self.interpolant.design()
    }

    pub fn z(&self) -> &[f64] {
        self.interpolant.z()
    }
}

#[derive(Debug, Clone)]
pub struct MultiLevelEmulator {
    pub levels: Vec<LevelState>,
    pub ladder: FidelityLadder,
    pub norm: NormKind,
    pub domain: Domain,
    pub alpha_hat: Option<f64>,
}

impl MultiLevelEmulator {
    /// Assembles levels `1..=L` and checks indices, ladder values and nesting.
    pub fn new(
        levels: Vec<LevelState>,
        ladder: FidelityLadder,
        norm: NormKind,
        domain: Domain,
        alpha_hat: Option<f64>,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("levels", "emulator needs at least one level"));
        }
        for (i, lv) in levels.iter().enumerate() {
            if lv.level != i + 1 {
                return Err(Error::Schema(format!(
                    "level {} stored at position {}",
                    lv.level,
                    i + 1
                )));
            }
            let xi = ladder.xi(lv.level);
            if (lv.xi - xi).abs() > 1e-12 * xi {
                return Err(Error::Schema(format!(
                    "level {} has xi {} but the ladder gives {xi}",
                    lv.level, lv.xi
                )));
            }
            if lv.values.len() != lv.n() {
                return Err(Error::LengthMismatch {
                    points: lv.n(),
                    values: lv.values.len(),
                });
            }
            if lv.interpolant.spec().dim() != domain.dim() {
                return Err(Error::DimensionMismatch {
                    expected: domain.dim(),
                    got: lv.interpolant.spec().dim(),
                });
            }
            if i > 0 {
                let coarse = levels[i - 1].design();
                let fine = lv.design();
                if fine.len() > coarse.len() || coarse[..fine.len()] != *fine {
                    return Err(Error::Schema(format!(
                        "design of level {} is not a prefix of level {}",
                        lv.level,
                        lv.level - 1
                    )));
                }
            }
        }
        Ok(Self {
            levels,
            ladder,
            norm,
            domain,
            alpha_hat,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(LevelState::n).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.levels
            .iter()
            .map(|lv| lv.interpolant.predict(x))
            .sum()
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; xs.len()];
        for lv in &self.levels {
            for (o, p) in out.iter_mut().zip(lv.interpolant.predict_many(xs)?) {
                *o += p;
            }
        }
        Ok(out)
    }

    /// `sum_l ||sigma_l|| * norm_estimate_l`
    pub fn emulation_error_bound(&self) -> f64 {
        emulation_error_bound(&self.levels)
    }

    /// Approximate pointwise interval `f_hat(x) -+ (|P_L(x)|/(T^alpha - 1) + sum_l sigma_l(x) norm_l)`.
    pub fn error_interval(&self, x: &[f64], alpha: f64) -> Result<(f64, f64)> {
        let (center, half) = self.interval_parts(x, alpha)?;
        Ok((center - half, center + half))
    }

    /// Prediction and half-width of the error interval.
    pub fn interval_parts(&self, x: &[f64], alpha: f64) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        if self.levels.len() < 2 {
            return Err(Error::invalid("levels", "error interval needs at least two levels"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
        }
        let mut center = 0.0;
        let mut emulation = 0.0;
        for lv in &self.levels {
            center += lv.interpolant.predict(x)?;
            emulation += lv.interpolant.power_function(x)? * lv.norm_estimate;
        }
        let top = self.levels.last().expect("nonempty").interpolant.predict(x)?;
        let simulation = top.abs() / ((self.ladder.t as f64).powf(alpha) - 1.0);
        Ok((center, simulation + emulation))
    }

    /// Recomputes each level's `sigma_norm` with `est`.
    pub fn refresh_sigma_norms(&mut self, est: &NormEstimator) {
        for lv in &mut self.levels {
            lv.sigma_norm = lv.interpolant.power_function_norm(est);
        }
    }

    pub fn to_stored(&self) -> StoredEmulator {
        StoredEmulator {
            schema: EMULATOR_SCHEMA.to_string(),
            xi0: self.ladder.xi0,
            t: self.ladder.t,
            norm: self.norm,
            lower: self.domain.lower.clone(),
            upper: self.domain.upper.clone(),
            alpha_hat: self.alpha_hat,
            levels: self
                .levels
                .iter()
                .map(|lv| StoredLevel {
                    level: lv.level,
                    xi: lv.xi,
                    cost: lv.cost,
                    n: lv.n(),
                    norm_estimate: lv.norm_estimate,
                    sigma_norm: lv.sigma_norm,
                    values: lv.values.clone(),
                    interpolant: lv.interpolant.to_stored(),
                })
                .collect(),
        }
    }

    pub fn from_stored(s: &StoredEmulator) -> Result<Self> {
        if s.schema != EMULATOR_SCHEMA {
            return Err(Error::Schema(format!(
                "unknown schema `{}`, expected `{EMULATOR_SCHEMA}`",
                s.schema
            )));
        }
        let ladder = FidelityLadder::new(s.xi0, s.t)?;
        let domain = Domain::new(s.lower.clone(), s.upper.clone())?;
        let levels = s
            .levels
            .iter()
            .map(|sl| {
                if sl.n != sl.interpolant.design.len() {
                    return Err(Error::Schema(format!(
                        "level {}: n = {} but {} design points",
                        sl.level,
                        sl.n,
                        sl.interpolant.design.len()
                    )));
                }
                Ok(LevelState {
                    level: sl.level,
                    xi: sl.xi,
                    cost: sl.cost,
                    values: sl.values.clone(),
                    interpolant: Interpolant::from_stored(&sl.interpolant)?,
                    norm_estimate: sl.norm_estimate,
                    sigma_norm: sl.sigma_norm,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels, ladder, s.norm, domain, s.alpha_hat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_stored())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredEmulator =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_stored(&stored)
    }
}

/// `sum_l ||sigma_l|| * norm_estimate_l` over `levels`.
pub fn emulation_error_bound(levels: &[LevelState]) -> f64 {
    levels.iter().map(|lv| lv.sigma_norm * lv.norm_estimate).sum()
}

/// Serialized emulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredEmulator {
    pub schema: String,
    pub xi0: f64,
    #[serde(rename = "T")]
    pub t: u32,
    pub norm: NormKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha_hat: Option<f64>,
    pub levels: Vec<StoredLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredLevel {
    pub level: usize,
    pub xi: f64,
    pub cost: f64,
    pub n: usize,
    pub norm_estimate: f64,
    pub sigma_norm: f64,
    pub values: Vec<f64>,
    pub interpolant: StoredInterpolant,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::sobol_prefix;
    use crate::kernels::KernelSpec;
    use approx::assert_relative_eq;

    fn two_level() -> MultiLevelEmulator {
        let dom = Domain::new(vec![-1.0], vec![1.0]).unwrap();
        let x = sobol_prefix(1, 8, &dom).unwrap();
        let f1: Vec<f64> = x.iter().map(|p| p[0].sin()).collect();
        let f2: Vec<f64> = x[..4].iter().map(|p| p[0].sin() + 0.1 * p[0]).collect();
        let z2: Vec<f64> = f2.iter().zip(&f1).map(|(a, b)| a - b).collect();
        let spec = KernelSpec::isotropic(2.5, 0.7, 1).unwrap();
        let p1 = Interpolant::fit(&spec, &x, &f1).unwrap();
        let p2 = Interpolant::fit(&spec, &x[..4], &z2).unwrap();
        let ladder = FidelityLadder::new(1.0, 2).unwrap();
        let est = NormEstimator::new(NormKind::L2, &dom, 500, 3).unwrap();
        let mk = |level, values, interpolant: Interpolant| LevelState {
            level,
            xi: ladder.xi(level),
            cost: level as f64,
            values,
            norm_estimate: interpolant.rkhs_norm_estimate(),
            sigma_norm: interpolant.power_function_norm(&est),
            interpolant,
        };
        let levels = vec![mk(1, f1, p1), mk(2, f2, p2)];
        MultiLevelEmulator::new(levels, ladder, NormKind::L2, dom, None).unwrap()
    }

    #[test]
    fn telescoping_at_finest_design() {
        let em = two_level();
        for (x, f2) in em.levels[1].design().iter().zip(&em.levels[1].values) {
            assert_relative_eq!(em.predict(x).unwrap(), *f2, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn bound_is_sum_of_products() {
        let em = two_level();
        let by_hand = em.levels[0].sigma_norm * em.levels[0].norm_estimate
            + em.levels[1].sigma_norm * em.levels[1].norm_estimate;
        assert_relative_eq!(em.emulation_error_bound(), by_hand, max_relative = 1e-15);
    }

    #[test]
    fn interval_at_design_point_is_simulation_part() {
        let em = two_level();
        let x = em.levels[1].design()[2].clone();
        let (c, h) = em.interval_parts(&x, 1.0).unwrap();
        let top = em.levels[1].interpolant.predict(&x).unwrap();
        assert_relative_eq!(h, top.abs(), epsilon = 1e-5);
        assert!(em.error_interval(&x, 0.0).is_err());
        let (lo, hi) = em.error_interval(&x, 1.0).unwrap();
        assert_relative_eq!(lo + hi, 2.0 * c, max_relative = 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let em = two_level();
        let back = MultiLevelEmulator::from_json(&em.to_json().unwrap()).unwrap();
        let x = [0.123];
        assert_relative_eq!(back.predict(&x).unwrap(), em.predict(&x).unwrap(), max_relative = 1e-12);
        assert_eq!(back.sample_sizes(), vec![8, 4]);
    }

    #[test]
    fn rejects_broken_nesting() {
        let mut stored = two_level().to_stored();
        stored.levels[1].interpolant.design[0][0] += 1e-3;
        assert!(MultiLevelEmulator::from_stored(&stored).is_err());
        let mut stored = two_level().to_stored();
        stored.schema = "other".into();
        assert!(matches!(MultiLevelEmulator::from_stored(&stored), Err(Error::Schema(_))));
    }
}
