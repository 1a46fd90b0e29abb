//! Stacking campaign on the multi-fidelity Currin family at `eps = 1` (L2),
//! printing one row per stage and level, then the achieved error against the
//! known limit.

use stacking_design::benchmarks::{Simulator, SyntheticFamily};
use stacking_design::norms::{NormEstimator, NormKind};
use stacking_design::stacking::{Campaign, StackingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let family = SyntheticFamily::currin();
    let mut campaign = Campaign::new(StackingConfig::currin())?;
    let start = std::time::Instant::now();
    campaign.run(&family)?;

    println!(" L  l     xi_l    C_l   n_l  alpha   sim_bound  emu_bound");
    for s in &campaign.stages {
        for lv in &s.levels {
            println!(
                "{:2} {:2} {:8.4} {:6} {:5}  {:>5}  {:>9}  {:9.4}",
                s.stage,
                lv.level,
                lv.xi,
                lv.cost,
                lv.n,
                s.alpha_hat.map(|a| format!("{a:.3}")).unwrap_or_default(),
                s.simulation_bound.map(|b| format!("{b:.4}")).unwrap_or_default(),
                s.emulation_bound
            );
        }
    }

    let em = campaign.emulator.as_ref().expect("converged");
    let est = NormEstimator::new(NormKind::L2, family.domain(), 10_000, 99)?;
    let pred = em.predict_many(est.nodes())?;
    let err: Vec<f64> = est
        .nodes()
        .iter()
        .zip(&pred)
        .map(|(x, p)| family.limit(x).unwrap() - p)
        .collect();
    println!("achieved L2 error: {:.4}", est.reduce(&err));
    println!("total cost: {}", campaign.total_cost());
    println!("elapsed: {:.2?}", start.elapsed());
    Ok(())
}
