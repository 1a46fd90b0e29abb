//! Asymptotic allocation across fidelities and the cost regime it implies,
//! compared with a single-fidelity design.

use stacking_design::stacking::theoretical_allocation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xi: Vec<f64> = (1..=5).map(|l| 0.5f64.powi(l)).collect();
    let cases = [
        ("slow convergence, smooth response", 1.0, 0.37, 3.5, 1),
        ("fast convergence, rough response", 2.0, 1.0, 1.0, 2),
        ("balanced", 2.0, 1.0, 2.0, 2),
    ];
    for (label, alpha, beta, nu, d) in cases {
        let t = theoretical_allocation(alpha, beta, nu, d, &xi)?;
        let first = t.proportions[0];
        let rel: Vec<String> = t.proportions.iter().map(|p| format!("{:.3}", p / first)).collect();
        println!("{label}: alpha={alpha} beta={beta} nu={nu} d={d}");
        println!("  regime: {}", t.regime);
        println!("  n_l / n_1: [{}]", rel.join(", "));
        println!(
            "  cost ~ eps^{:.3} |log eps|^{:.2}, single fidelity ~ eps^{:.3}",
            t.multilevel_cost.exponent, t.multilevel_cost.log_power, t.single_fidelity_exponent
        );
    }
    Ok(())
}
