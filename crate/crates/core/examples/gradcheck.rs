//! Whole-model gradient check in 64-bit arithmetic, one line per tensor.

use mmctr::cli::{gradcheck_config, gradcheck_report, GRADCHECK_TOLERANCE};

pub fn main() -> mmctr::Result<()> {
    let checks = gradcheck_report(&gradcheck_config())?;
    let mut worst = 0.0f64;
    for c in &checks {
        println!("{:<24} {:>6} {:.3e}", c.name, c.numel, c.rel_error);
        worst = worst.max(c.rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    Ok(())
}
