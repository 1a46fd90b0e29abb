//! Pointwise error intervals from a finished campaign, checked against the
//! known limit of the Poisson-like family.

use stacking_design::benchmarks::{Simulator, SyntheticFamily};
use stacking_design::designs::Domain;
use stacking_design::stacking::{run_stacking, StackingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let family = SyntheticFamily::poisson_like();
    let mut cfg = StackingConfig::new(1e-3, Domain::new(vec![-1.0], vec![1.0])?);
    cfg.xi0 = 0.4;
    let (em, stages) = run_stacking(&family, cfg)?;
    let alpha = em.alpha_hat.expect("rate estimated at termination");
    println!("L = {}, n = {:?}, alpha_hat = {alpha:.3}", stages.len(), em.sample_sizes());

    println!("     x    truth     lower     upper  inside");
    let mut inside = 0;
    let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    for &x in &grid {
        let (lo, hi) = em.error_interval(&[x], alpha)?;
        let truth = family.limit(&[x]).unwrap();
        let ok = lo <= truth && truth <= hi;
        inside += ok as usize;
        println!("{x:6.2} {truth:8.5} {lo:9.5} {hi:9.5}  {ok}");
    }
    println!("{inside}/{} points covered", grid.len());
    Ok(())
}
