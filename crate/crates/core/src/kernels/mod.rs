//! Anisotropic Matérn kernels and jittered Cholesky factorization of their Gram matrices.

mod bessel;

pub use bessel::{bessel_k, bessel_k_scaled};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Scaled distance beyond which the kernel is treated as exactly zero.
pub const SATURATION: f64 = 700.0;

/// Relative jitter levels tried in order; multiplied by the mean Gram diagonal.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Smoothness `nu` and per-dimension lengthscales of a Matérn kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub nu: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(nu: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::invalid("nu", format!("must be positive, got {nu}")));
        }
        if lengthscales.is_empty() {
            return Err(Error::invalid("lengthscales", "dimension must be at least 1"));
        }
        if let Some(bad) = lengthscales.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(
                "lengthscales",
                format!("must be positive, got {bad}"),
            ));
        }
        Ok(Self { nu, lengthscales })
    }

    pub fn isotropic(nu: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(nu, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Spectral norm of the diagonal inverse-lengthscale matrix, `max_j 1/theta_j`.
    pub fn inverse_lengthscale_norm(&self) -> f64 {
        self.lengthscales
            .iter()
            .fold(0.0_f64, |acc, &l| acc.max(1.0 / l))
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

    /// Maps a point into the isotropic frame `Theta^{-1} x`.
    pub fn scale_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lengthscales)
            .map(|(xi, l)| xi / l)
            .collect()
    }

    pub fn scale_points(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| {
                self.check_dim(x)?;
                Ok(self.scale_point(x))
            })
            .collect()
    }

    /// Kernel value between two points already mapped by [`KernelSpec::scale_point`].
    #[inline]
    pub fn eval_scaled(&self, a: &[f64], b: &[f64]) -> f64 {
        matern_phi(euclidean(a, b), self.nu)
    }

    /// `phi_nu(||Theta^{-1}(x - y)||_2)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let t = (a - b) / l;
                t * t
            })
            .sum();
        Ok(matern_phi(r2.sqrt(), self.nu))
    }
}

#[inline]
pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

/// Matérn correlation `phi_nu(r)` with unit variance.
///
/// Half-integer orders use the exponential-times-polynomial closed form;
/// other orders go through [`matern_phi_bessel`].
pub fn matern_phi(r: f64, nu: f64) -> f64 {
    debug_assert!(r >= 0.0 && nu > 0.0);
    if r == 0.0 {
        return 1.0;
    }
    let t = r * (2.0 * nu).sqrt();
    if t > SATURATION {
        return 0.0;
    }
    match half_integer_order(nu) {
        Some(p) => matern_half_integer(t, p),
        None => matern_from_scaled(t, nu),
    }
}

/// General-order Matérn correlation via the modified Bessel function `K_nu`.
pub fn matern_phi_bessel(r: f64, nu: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let t = r * (2.0 * nu).sqrt();
    if t > SATURATION {
        return 0.0;
    }
    matern_from_scaled(t, nu)
}

fn matern_from_scaled(t: f64, nu: f64) -> f64 {
    let log_prefactor = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * t.ln() - t;
    let value = log_prefactor.exp() * bessel_k_scaled(nu, t);
    if value.is_finite() {
        value.min(1.0)
    } else {
        // K_nu overflowed at tiny t for large nu; the correlation is 1 to working precision.
        1.0
    }
}

/// `Some(p)` when `nu = p + 1/2` for a small integer `p`.
fn half_integer_order(nu: f64) -> Option<u32> {
    let p = nu - 0.5;
    if (0.0..=20.0).contains(&p) && p.fract() == 0.0 {
        Some(p as u32)
    } else {
        None
    }
}

fn matern_half_integer(t: f64, p: u32) -> f64 {
    match p {
        0 => (-t).exp(),
        1 => (1.0 + t) * (-t).exp(),
        2 => (1.0 + t + t * t / 3.0) * (-t).exp(),
        _ => {
            // p!/(2p)! * sum_i (p+i)!/(i!(p-i)!) (2t)^(p-i), Horner in 2t.
            let p = p as usize;
            let two_t = 2.0 * t;
            let mut acc = 0.0;
            for i in 0..=p {
                let coeff = factorial_ratio(p, i);
                acc = acc * two_t + coeff;
            }
            acc * (-t).exp()
        }
    }
}

/// `p!/(2p)! * (p+i)!/(i!(p-i)!)`
fn factorial_ratio(p: usize, i: usize) -> f64 {
    let mut v = 1.0;
    // (p+i)!/(2p)! = 1 / ((p+i+1)...(2p))
    for k in (p + i + 1)..=(2 * p) {
        v /= k as f64;
    }
    // p!/(p-i)! = (p-i+1)...p
    for k in (p - i + 1)..=p {
        v *= k as f64;
    }
    // 1/i!
    for k in 1..=i {
        v /= k as f64;
    }
    v
}

/// Cholesky factor of `Phi + delta I` together with the jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct GramFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl GramFactor {
    /// Factorizes `raw + jitter I` without escalation.
    pub fn with_jitter(raw: DMatrix<f64>, jitter: f64) -> Result<Self> {
        let n = raw.nrows();
        let mut m = raw;
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        Cholesky::new(m)
            .map(|chol| GramFactor { chol, jitter })
            .ok_or(Error::FactorizationFailure { n, max_jitter: jitter })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower-triangular factor `L` with `L L^T = Phi + delta I`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Reassembles `L L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut v = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        v
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Raw Gram matrix `[phi(||x_i - x_j||)]` on points already in the scaled frame.
pub(crate) fn gram_raw(spec: &KernelSpec, scaled: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = scaled.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        for i in 0..j {
            let r = euclidean(&scaled[i], &scaled[j]);
            if r == 0.0 {
                return Err(Error::FactorizationFailure {
                    n,
                    max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
                });
            }
            let v = matern_phi(r, spec.nu);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Factorizes a symmetric kernel matrix, escalating jitter along [`JITTER_LADDER`].
pub(crate) fn factorize(raw: DMatrix<f64>) -> Result<GramFactor> {
    let n = raw.nrows();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let mean_diag = raw.diagonal().mean();
    for &rel in &JITTER_LADDER {
        let jitter = rel * mean_diag;
        let mut m = raw.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(GramFactor { chol, jitter });
        }
    }
    Err(Error::FactorizationFailure {
        n,
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag,
    })
}

/// Jittered Cholesky factorization of the kernel matrix on `points`.
///
/// Exactly coincident points are rejected up front since no jitter on the
/// ladder makes such a system meaningful.
pub fn gram_matrix(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<GramFactor> {
    let scaled = spec.scale_points(points)?;
    factorize(gram_raw(spec, &scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // (nu, r, phi_nu(r)) from 40-digit arbitrary precision Bessel evaluation.
    const REFERENCE: &[(f64, f64, f64)] = &[
        (0.3, 1e-06, 0.999794363451529399),
        (0.3, 0.01, 0.948367267014945818),
        (0.3, 0.3, 0.61768917587903149),
        (0.3, 1.0, 0.307675148233089584),
        (0.3, 2.5, 0.083121579869735946),
        (0.3, 7.0, 0.00211504954781323938),
        (0.3, 20.0, 7.32191911099881725e-8),
        (0.75, 1e-06, 0.999999998111074935),
        (0.75, 0.3, 0.820175536030343415),
        (0.75, 1.0, 0.413791947496561364),
        (0.75, 20.0, 6.26642137152688272e-11),
        (1.0, 0.01, 0.99951253312741721),
        (1.0, 1.0, 0.444342523632236041),
        (1.0, 2.5, 0.0754368099089121222),
        (1.0, 20.0, 3.51389451276364969e-12),
        (1.5, 0.3, 0.903790159899038579),
        (1.5, 1.0, 0.483357724596507651),
        (1.5, 7.0, 0.0000712093848304732946),
        (2.0, 0.3, 0.921654940400952583),
        (2.0, 7.0, 0.0000310631151898362245),
        (2.0, 20.0, 7.05417415827409517e-16),
        (3.7, 0.01, 0.999931485209367432),
        (3.7, 1.0, 0.547956939115804897),
        (3.7, 2.5, 0.0589399176702826183),
        (3.7, 20.0, 4.40662787031045356e-20),
        (4.5, 1.0, 0.557615165720076161),
        (4.5, 7.0, 2.23321569722861477e-6),
        (7.25, 0.3, 0.949381438821830216),
        (7.25, 2.5, 0.0528244421390467732),
        (7.25, 20.0, 8.48531316388909571e-26),
    ];

    #[test]
    fn phi_examples() {
        assert_eq!(matern_phi(0.0, 2.7), 1.0);
        assert_relative_eq!(matern_phi(1.0, 0.5), (-1.0f64).exp(), max_relative = 1e-15);
        let s3 = 3f64.sqrt();
        assert_relative_eq!(
            matern_phi(1.0, 1.5),
            (1.0 + s3) * (-s3).exp(),
            max_relative = 1e-14
        );
        assert_relative_eq!(matern_phi_bessel(1.0, 1.5), 0.48336, epsilon = 1e-5);
    }

    #[test]
    fn phi_matches_reference() {
        for &(nu, r, expected) in REFERENCE {
            for got in [matern_phi(r, nu), matern_phi_bessel(r, nu)] {
                let rel = ((got - expected) / expected).abs();
                assert!(rel < 1e-12, "phi_{nu}({r}) = {got}, expected {expected}");
            }
        }
    }

    #[test]
    fn half_integer_closed_forms_agree_with_bessel_route() {
        for nu in [0.5, 1.5, 2.5, 3.5, 4.5] {
            let mut r = 1e-6;
            while r <= 30.0 {
                let closed = matern_phi(r, nu);
                let general = matern_phi_bessel(r, nu);
                if closed > 1e-290 {
                    let rel = ((closed - general) / closed).abs();
                    assert!(rel < 1e-10, "nu {nu} r {r}: {closed} vs {general}");
                }
                r *= 1.37;
            }
        }
    }

    #[test]
    fn saturates_far_out() {
        assert_eq!(matern_phi(600.0, 1.5), 0.0);
        assert_eq!(matern_phi_bessel(600.0, 1.3), 0.0);
        assert!(matern_phi(490.0, 0.5) > 0.0);
    }

    #[test]
    fn kernel_eval_examples() {
        let s = KernelSpec::new(0.5, vec![2.0]).unwrap();
        assert_eq!(s.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert_relative_eq!(s.eval(&[0.0], &[1.0]).unwrap(), (-0.5f64).exp(), max_relative = 1e-15);
        let s2 = KernelSpec::isotropic(0.5, 1.0, 2).unwrap();
        assert_relative_eq!(
            s2.eval(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            (-5.0f64).exp(),
            max_relative = 1e-14
        );
        assert!(matches!(
            s2.eval(&[0.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(0.0, vec![1.0]).is_err());
        assert!(KernelSpec::new(1.5, vec![]).is_err());
        assert!(KernelSpec::new(1.5, vec![1.0, -2.0]).is_err());
        let s = KernelSpec::new(1.5, vec![0.5, 0.25]).unwrap();
        assert_eq!(s.inverse_lengthscale_norm(), 4.0);
    }

    #[test]
    fn gram_single_point() {
        let s = KernelSpec::isotropic(1.5, 0.3, 2).unwrap();
        let g = gram_matrix(&s, &[vec![0.2, 0.4]]).unwrap();
        let m = g.reconstruct();
        assert_relative_eq!(m[(0, 0)], 1.0 + g.jitter(), max_relative = 1e-15);
        assert_eq!(g.jitter(), 1e-10);
    }

    #[test]
    fn gram_rejects_coincident_points() {
        let s = KernelSpec::isotropic(2.5, 0.3, 1).unwrap();
        let r = gram_matrix(&s, &[vec![0.5], vec![0.5]]);
        assert!(matches!(r, Err(Error::FactorizationFailure { .. })));
    }

    #[test]
    fn gram_collinear_entries() {
        let theta = 0.7;
        let s = KernelSpec::new(0.5, vec![theta]).unwrap();
        let xs = [vec![0.0], vec![0.4], vec![1.1]];
        let g = gram_matrix(&s, &xs).unwrap();
        let m = g.reconstruct();
        for i in 0..3 {
            for j in 0..3 {
                let mut expected = (-(xs[i][0] - xs[j][0]).abs() / theta).exp();
                if i == j {
                    expected += g.jitter();
                }
                assert!((m[(i, j)] - expected).abs() <= 1e-10 * expected);
            }
        }
    }
}
