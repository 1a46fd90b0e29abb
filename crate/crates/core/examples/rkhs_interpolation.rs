//! Single-level kernel interpolation with LOOCV hyperparameter selection:
//! fit, predict, power function, and the norm-times-power-function bound.

use stacking_design::designs::{sobol_prefix, Domain};
use stacking_design::norms::{NormEstimator, NormKind};
use stacking_design::rkhs::{fit_hyperparameters, Interpolant, LengthscaleSearch, DEFAULT_NU_GRID};

fn f(x: &[f64]) -> f64 {
    (3.0 * x[0]).sin() + x[1] * x[1]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = Domain::unit(2);
    let est = NormEstimator::new(NormKind::L2, &domain, 2000, 7)?;
    let search = LengthscaleSearch::for_domain(&domain);

    println!("  n   nu   lengthscales        loocv      bound     true error");
    for n in [16, 32, 64, 128] {
        let design = sobol_prefix(2, n, &domain)?;
        let z: Vec<f64> = design.iter().map(|x| f(x)).collect();
        let fit = fit_hyperparameters(&design, &z, &DEFAULT_NU_GRID, &search)?;
        let interp = Interpolant::fit(&fit.spec, &design, &z)?;
        let bound = interp.rkhs_norm_estimate() * interp.power_function_norm(&est);
        let pred = interp.predict_many(est.nodes())?;
        let err: Vec<f64> = est.nodes().iter().zip(&pred).map(|(x, p)| f(x) - p).collect();
        println!(
            "{n:4}  {:.1}  ({:.3}, {:.3})  {:9.2e}  {:9.2e}  {:9.2e}",
            fit.spec.nu,
            fit.spec.lengthscales[0],
            fit.spec.lengthscales[1],
            fit.loocv,
            bound,
            est.reduce(&err)
        );
    }

    let design = sobol_prefix(2, 32, &domain)?;
    let z: Vec<f64> = design.iter().map(|x| f(x)).collect();
    let interp = Interpolant::fit(&fit_hyperparameters(&design, &z, &[2.5], &search)?.spec, &design, &z)?;
    println!(
        "at a design point: predict - z = {:.1e}, sigma = {:.1e}",
        interp.predict(&design[3])? - z[3],
        interp.power_function(&design[3])?
    );
    Ok(())
}
