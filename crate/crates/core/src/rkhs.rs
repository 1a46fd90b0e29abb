//! Single-level RKHS interpolation.
//!
//! An [`Interpolant`] solves `(Phi + delta I) c = z` once and then provides
//! predictions, the power function `sigma(x)`, and the plug-in RKHS norm
//! `(z^T Phi^{-1} z)^{1/2}`. Hyperparameters are chosen by minimizing the
//! closed-form leave-one-out error over a grid of smoothness values and a
//! log-spaced lengthscale grid, followed by a Nelder–Mead polish.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::Domain;
use crate::error::{Error, Result};
use crate::kernels::{factorize, gram_raw, GramFactor, KernelSpec};
use crate::norms::{NormEstimator, NormKind};

/// Smoothness values searched by default.
pub const DEFAULT_NU_GRID: [f64; 5] = [0.5, 1.5, 2.5, 3.5, 4.5];

const EVAL_CHUNK: usize = 256;

/// A fitted interpolant `P(x) = sum_i c_i Phi(x, x_i)`.
#[derive(Debug, Clone)]
pub struct Interpolant {
    spec: KernelSpec,
    design: Vec<Vec<f64>>,
    scaled: Vec<Vec<f64>>,
    z: Vec<f64>,
    coeffs: DVector<f64>,
    factor: GramFactor,
}

impl Interpolant {
    pub fn fit(spec: &KernelSpec, design: &[Vec<f64>], z: &[f64]) -> Result<Self> {
        let (scaled, raw) = Self::prepare(spec, design, z)?;
        let factor = factorize(raw)?;
        Ok(Self::assemble(spec, design, scaled, z, factor))
    }

    /// Refits with a prescribed jitter, as recorded in a saved emulator.
    pub fn fit_with_jitter(
        spec: &KernelSpec,
        design: &[Vec<f64>],
        z: &[f64],
        jitter: f64,
    ) -> Result<Self> {
        let (scaled, raw) = Self::prepare(spec, design, z)?;
        let factor = GramFactor::with_jitter(raw, jitter)?;
        Ok(Self::assemble(spec, design, scaled, z, factor))
    }

    fn prepare(
        spec: &KernelSpec,
        design: &[Vec<f64>],
        z: &[f64],
    ) -> Result<(Vec<Vec<f64>>, DMatrix<f64>)> {
        if design.len() != z.len() {
            return Err(Error::LengthMismatch {
                points: design.len(),
                values: z.len(),
            });
        }
        if design.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        let scaled = spec.scale_points(design)?;
        let raw = gram_raw(spec, &scaled)?;
        Ok((scaled, raw))
    }

    fn assemble(
        spec: &KernelSpec,
        design: &[Vec<f64>],
        scaled: Vec<Vec<f64>>,
        z: &[f64],
        factor: GramFactor,
    ) -> Self {
        let coeffs = factor.solve(&DVector::from_column_slice(z));
        Self {
            spec: spec.clone(),
            design: design.to_vec(),
            scaled,
            z: z.to_vec(),
            coeffs,
            factor,
        }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn coeffs(&self) -> &[f64] {
        self.coeffs.as_slice()
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter()
    }

    pub fn factor(&self) -> &GramFactor {
        &self.factor
    }

    pub fn len(&self) -> usize {
        self.design.len()
    }

    pub fn is_empty(&self) -> bool {
        self.design.is_empty()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Kernel between a scaled query and a scaled design point. The jitter
    /// acts as a nugget, so a query equal to a design point sees the
    /// regularized diagonal.
    fn entry(&self, s: &[f64], p: &[f64]) -> f64 {
        let k = self.spec.eval_scaled(s, p);
        if s == p {
            k + self.jitter()
        } else {
            k
        }
    }

    /// `Phi(x, x)` under the same convention as [`Self::entry`].
    fn diagonal(&self, s: &[f64]) -> f64 {
        if self.scaled.iter().any(|p| p.as_slice() == s) {
            1.0 + self.jitter()
        } else {
            1.0
        }
    }

    fn cross_kernel(&self, xs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.scaled.len(),
            self.scaled.iter().map(|p| self.entry(xs, p)),
        )
    }

    /// Kernel matrix between the design (rows) and scaled queries (columns).
    fn cross_kernel_matrix(&self, scaled: &[Vec<f64>]) -> DMatrix<f64> {
        let n = self.scaled.len();
        let mut k = DMatrix::<f64>::zeros(n, scaled.len());
        for (j, s) in scaled.iter().enumerate() {
            for (i, p) in self.scaled.iter().enumerate() {
                k[(i, j)] = self.entry(s, p);
            }
        }
        k
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.cross_kernel(&self.spec.scale_point(x)).dot(&self.coeffs))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        for x in xs {
            self.check_dim(x)?;
        }
        Ok(xs
            .par_chunks(EVAL_CHUNK)
            .flat_map_iter(|chunk| {
                let scaled: Vec<Vec<f64>> = chunk.iter().map(|x| self.spec.scale_point(x)).collect();
                let k = self.cross_kernel_matrix(&scaled);
                (k.transpose() * &self.coeffs).iter().copied().collect::<Vec<_>>()
            })
            .collect())
    }

    /// `sqrt(max(0, Phi(x,x) - k(x)^T (Phi + delta I)^{-1} k(x)))`.
    pub fn power_function(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let s = self.spec.scale_point(x);
        let v = self.factor.solve_lower(&self.cross_kernel(&s));
        Ok((self.diagonal(&s) - v.norm_squared()).max(0.0).sqrt())
    }

    pub fn power_function_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        for x in xs {
            self.check_dim(x)?;
        }
        let lower = self.factor.lower();
        Ok(xs
            .par_chunks(EVAL_CHUNK)
            .flat_map_iter(|chunk| {
                let scaled: Vec<Vec<f64>> = chunk.iter().map(|x| self.spec.scale_point(x)).collect();
                let mut k = self.cross_kernel_matrix(&scaled);
                lower.solve_lower_triangular_mut(&mut k);
                k.column_iter()
                    .zip(&scaled)
                    .map(|(c, s)| (self.diagonal(s) - c.norm_squared()).max(0.0).sqrt())
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Plug-in RKHS norm `(z^T (Phi + delta I)^{-1} z)^{1/2}`.
    pub fn rkhs_norm_estimate(&self) -> f64 {
        let q: f64 = self.z.iter().zip(self.coeffs.iter()).map(|(a, b)| a * b).sum();
        q.max(0.0).sqrt()
    }

    /// `||sigma||` under the estimator's norm and nodes.
    pub fn power_function_norm(&self, est: &NormEstimator) -> f64 {
        let sigma = self
            .power_function_many(est.nodes())
            .expect("estimator nodes share the interpolant dimension");
        est.reduce(&sigma)
    }

    /// `||P||` under the estimator's norm and nodes.
    pub fn prediction_norm(&self, est: &NormEstimator) -> f64 {
        let values = self
            .predict_many(est.nodes())
            .expect("estimator nodes share the interpolant dimension");
        est.reduce(&values)
    }

    pub fn to_stored(&self) -> StoredInterpolant {
        StoredInterpolant {
            spec: self.spec.clone(),
            design: self.design.clone(),
            z: self.z.clone(),
            coeffs: self.coeffs.iter().copied().collect(),
            jitter: self.jitter(),
        }
    }

    /// Rebuilds from storage and checks the recorded coefficients.
    pub fn from_stored(s: &StoredInterpolant) -> Result<Self> {
        let interp = Self::fit_with_jitter(&s.spec, &s.design, &s.z, s.jitter)?;
        if s.coeffs.len() != interp.len() {
            return Err(Error::Schema(format!(
                "{} coefficients for {} design points",
                s.coeffs.len(),
                interp.len()
            )));
        }
        let scale = 1.0 + interp.coeffs.amax();
        let drift = interp
            .coeffs
            .iter()
            .zip(&s.coeffs)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if drift > 1e-6 * scale {
            return Err(Error::Schema(format!(
                "stored coefficients disagree with refit (max deviation {drift:e})"
            )));
        }
        Ok(interp)
    }
}

/// Serialized form of an [`Interpolant`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInterpolant {
    pub spec: KernelSpec,
    pub design: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub jitter: f64,
}

pub fn fit(spec: &KernelSpec, design: &[Vec<f64>], z: &[f64]) -> Result<Interpolant> {
    Interpolant::fit(spec, design, z)
}

pub fn predict(interp: &Interpolant, x: &[f64]) -> Result<f64> {
    interp.predict(x)
}

pub fn power_function(interp: &Interpolant, x: &[f64]) -> Result<f64> {
    interp.power_function(x)
}

pub fn rkhs_norm_estimate(interp: &Interpolant) -> f64 {
    interp.rkhs_norm_estimate()
}

/// `||sigma||` with a fresh estimator: `budget` seeded uniform points (L2) or Sobol' candidates (L-infinity).
pub fn norm_of_power_function(
    interp: &Interpolant,
    norm: NormKind,
    domain: &Domain,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    let est = NormEstimator::new(norm, domain, budget, seed)?;
    Ok(interp.power_function_norm(&est))
}

/// Leave-one-out residuals `c_j / (Phi^{-1})_{jj}` of the jittered system.
pub fn loocv_residuals(spec: &KernelSpec, design: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
    if design.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: design.len(),
        });
    }
    let interp = Interpolant::fit(spec, design, z)?;
    let inv = interp.factor.inverse();
    Ok(interp
        .coeffs
        .iter()
        .enumerate()
        .map(|(j, c)| c / inv[(j, j)])
        .collect())
}

/// Closed-form leave-one-out error `(1/n) ||Lambda^{-1} Phi^{-1} z||^2`.
pub fn loocv_error(spec: &KernelSpec, design: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    let r = loocv_residuals(spec, design, z)?;
    Ok(r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64)
}

/// Search region and effort for lengthscale selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleSearch {
    /// Domain side lengths; the region is `[min_factor, max_factor] * side`.
    pub side_lengths: Vec<f64>,
    pub grid_size: usize,
    pub min_factor: f64,
    pub max_factor: f64,
    pub polish_iterations: usize,
}

impl LengthscaleSearch {
    pub fn for_domain(domain: &Domain) -> Self {
        Self {
            side_lengths: domain.side_lengths(),
            grid_size: 8,
            min_factor: 0.05,
            max_factor: 2.0,
            polish_iterations: 100,
        }
    }

    fn log_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.side_lengths.iter().map(|s| (s * self.min_factor).ln()).collect();
        let hi = self.side_lengths.iter().map(|s| (s * self.max_factor).ln()).collect();
        (lo, hi)
    }

    /// Log-lengthscale grid: full tensor grid up to three dimensions, a shared
    /// relative factor across all dimensions beyond that.
    fn grid(&self) -> Vec<Vec<f64>> {
        let d = self.side_lengths.len();
        let g = self.grid_size.max(1);
        let factors: Vec<f64> = (0..g)
            .map(|i| {
                let t = if g == 1 { 0.5 } else { i as f64 / (g - 1) as f64 };
                (self.min_factor.ln() + t * (self.max_factor.ln() - self.min_factor.ln())).exp()
            })
            .collect();
        let logs = |idx: &[usize]| -> Vec<f64> {
            idx.iter()
                .zip(&self.side_lengths)
                .map(|(&i, s)| (s * factors[i]).ln())
                .collect()
        };
        if d <= 3 {
            let total = g.pow(d as u32);
            (0..total)
                .map(|mut k| {
                    let mut idx = vec![0; d];
                    for slot in idx.iter_mut() {
                        *slot = k % g;
                        k /= g;
                    }
                    logs(&idx)
                })
                .collect()
        } else {
            (0..g).map(|i| logs(&vec![i; d])).collect()
        }
    }
}

/// Selected kernel and its leave-one-out error.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperparameterFit {
    pub spec: KernelSpec,
    pub loocv: f64,
}

/// Chooses `nu` from `nu_grid` and lengthscales from the search region by
/// minimizing [`loocv_error`].
pub fn fit_hyperparameters(
    design: &[Vec<f64>],
    z: &[f64],
    nu_grid: &[f64],
    search: &LengthscaleSearch,
) -> Result<HyperparameterFit> {
    if design.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: design.len(),
        });
    }
    if design.len() != z.len() {
        return Err(Error::LengthMismatch {
            points: design.len(),
            values: z.len(),
        });
    }
    if nu_grid.is_empty() {
        return Err(Error::invalid("nu_grid", "must not be empty"));
    }
    let d = search.side_lengths.len();
    if let Some(bad) = design.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let (lo, hi) = search.log_bounds();
    let grid = search.grid();

    let objective = |nu: f64, logs: &[f64]| -> f64 {
        let ls: Vec<f64> = logs
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(v, (a, b))| v.clamp(*a, *b).exp())
            .collect();
        KernelSpec::new(nu, ls)
            .and_then(|spec| loocv_error(&spec, design, z))
            .ok()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY)
    };

    let per_nu: Vec<(Vec<f64>, f64)> = nu_grid
        .par_iter()
        .map(|&nu| {
            let scores: Vec<f64> = grid.iter().map(|g| objective(nu, g)).collect();
            let (best_idx, best_val) = argmin(&scores);
            if !best_val.is_finite() {
                return (grid[0].clone(), f64::INFINITY);
            }
            let start = grid[best_idx].clone();
            let (x, fx) = nelder_mead(
                |p| objective(nu, p),
                &start,
                0.5,
                search.polish_iterations,
            );
            if fx < best_val {
                (x, fx)
            } else {
                (start, best_val)
            }
        })
        .collect();

    let scores: Vec<f64> = per_nu.iter().map(|(_, v)| *v).collect();
    let (k, best) = argmin(&scores);
    if !best.is_finite() {
        return Err(Error::FactorizationFailure {
            n: design.len(),
            max_jitter: crate::kernels::JITTER_LADDER[crate::kernels::JITTER_LADDER.len() - 1],
        });
    }
    let lengthscales = per_nu[k]
        .0
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(v, (a, b))| v.clamp(*a, *b).exp())
        .collect();
    Ok(HyperparameterFit {
        spec: KernelSpec::new(nu_grid[k], lengthscales)?,
        loocv: best,
    })
}

/// First index of the minimum; ties resolve to the earliest entry.
fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| {
            if x < bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
}

/// Plain Nelder–Mead minimizer with an axis-aligned initial simplex.
pub(crate) fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        if spread.is_finite() && spread <= 1e-12 * (values[0].abs() + 1e-300) {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = along(1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let t = if fr < values[n] { 0.5 } else { -0.5 };
            let contracted = along(t);
            let fc = f(&contracted);
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    simplex[i] = best
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, p)| b + 0.5 * (p - b))
                        .collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let (k, v) = argmin(&values);
    (simplex[k].clone(), v)
}
