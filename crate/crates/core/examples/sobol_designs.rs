//! Nested Sobol' designs: prefixes are reused across levels, and the fill
//! distance roughly halves each time the design grows by `2^d`.

use stacking_design::designs::{fill_distance, sobol_prefix, Domain};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = Domain::unit(2);
    let coarse = sobol_prefix(2, 16, &domain)?;
    let fine = sobol_prefix(2, 64, &domain)?;
    assert_eq!(coarse[..], fine[..16]);
    println!("first points:");
    for p in &fine[..4] {
        println!("  ({:.4}, {:.4})", p[0], p[1]);
    }

    println!("   n   fill distance");
    for n in [16, 64, 256] {
        let h = fill_distance(&sobol_prefix(2, n, &domain)?, &domain, 200)?;
        println!("{n:4}   {h:.4}");
    }

    let boxed = Domain::new(vec![-1.0, 10.0], vec![1.0, 20.0])?;
    let p = &sobol_prefix(2, 1, &boxed)?[0];
    println!("first point on [-1,1]x[10,20]: ({:.2}, {:.2})", p[0], p[1]);
    Ok(())
}
