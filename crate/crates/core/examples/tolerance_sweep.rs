//! Achieved error and cost across tolerances on the Currin family, written
//! as CSV to stdout for plotting.

use stacking_design::benchmarks::SyntheticFamily;
use stacking_design::cli::{achieved_error, write_sweep_csv, SweepRow};
use stacking_design::stacking::{Campaign, StackingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let family = SyntheticFamily::currin();
    let mut rows = Vec::new();
    for eps in [4.0, 2.0, 1.0] {
        let cfg = StackingConfig {
            epsilon: eps,
            ..StackingConfig::currin()
        };
        let mut campaign = Campaign::new(cfg.clone())?;
        campaign.run(&family)?;
        let em = campaign.emulator.as_ref().unwrap();
        rows.push(SweepRow {
            epsilon: eps,
            achieved_error: achieved_error(em, &family, &cfg)?,
            total_cost: campaign.total_cost(),
            final_level: em.num_levels(),
            sample_sizes: em.sample_sizes(),
        });
    }
    write_sweep_csv(&rows, true, std::io::stdout())?;
    Ok(())
}
