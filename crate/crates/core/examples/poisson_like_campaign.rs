//! One-dimensional family with rate `alpha = 2` and cost growing like
//! `xi^-1`: a campaign with the rate estimated, then resumed at a tighter
//! tolerance so that existing runs are reused.

use stacking_design::benchmarks::SyntheticFamily;
use stacking_design::designs::Domain;
use stacking_design::stacking::{Campaign, StackingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let family = SyntheticFamily::poisson_like();
    let mut cfg = StackingConfig::new(1e-4, Domain::new(vec![-1.0], vec![1.0])?);
    cfg.xi0 = 0.4;
    let mut campaign = Campaign::new(cfg)?;
    campaign.run(&family)?;
    let report = |c: &Campaign| {
        let em = c.emulator.as_ref().unwrap();
        println!(
            "eps={}  L={}  n={:?}  alpha_hat={:.3}  cost={:.1}  calls={}",
            c.config.epsilon,
            em.num_levels(),
            em.sample_sizes(),
            em.alpha_hat.unwrap_or(f64::NAN),
            c.total_cost(),
            c.ledger.calls().len()
        );
    };
    report(&campaign);
    campaign.resume(&family, 2e-5)?;
    report(&campaign);
    assert!(campaign.ledger.is_duplicate_free());
    Ok(())
}
