//! Driving an external program through the JSON-lines protocol.
//!
//! Each request is `{"level": l, "xi": xi_l, "x": [..]}` on the program's
//! stdin and each reply `{"y": value, "cost": cost}` on its stdout. This
//! example uses a small Python script; pass another command as arguments to
//! try your own, e.g. `cargo run --example external_simulator -- ./my_sim`.

use stacking_design::benchmarks::{subprocess_simulator, FidelityLadder, Simulator, SubprocessConfig};
use stacking_design::designs::Domain;
use stacking_design::stacking::{Campaign, StackingConfig};

const SCRIPT: &str = r#"
import json, math, sys
for line in sys.stdin:
    r = json.loads(line)
    x = r["x"][0]
    y = math.sin(3 * x) + r["xi"] * math.cos(x)
    print(json.dumps({"y": y, "cost": 2.0 ** r["level"]}), flush=True)
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let command = if args.is_empty() {
        vec!["python3".to_string(), "-c".to_string(), SCRIPT.to_string()]
    } else {
        args
    };
    let ladder = FidelityLadder::new(1.0, 2)?;
    let sim = subprocess_simulator(SubprocessConfig::new(command, 1, ladder))?;
    println!("f_1(0.3) = {:.5}", sim.evaluate(1, &[0.3])?.value);

    let mut cfg = StackingConfig::new(0.05, Domain::unit(1));
    cfg.max_levels = 8;
    let mut campaign = Campaign::new(cfg)?;
    campaign.run(&sim)?;
    for s in &campaign.stages {
        let n: Vec<usize> = s.levels.iter().map(|l| l.n).collect();
        println!("L={} n={n:?} sim_bound={:?} emu_bound={:.4}", s.stage, s.simulation_bound, s.emulation_bound);
    }
    println!("observed cost {}", campaign.total_cost());
    Ok(())
}
