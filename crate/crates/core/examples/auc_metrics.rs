//! Rank AUC with tied scores, checked against the pairwise definition.

use mmctr::metrics::{auc, auc_bruteforce, logloss, EvalResult};

pub fn main() -> mmctr::Result<()> {
    let scores = [0.9, 0.4, 0.4, 0.7, 0.1, 0.4, 0.8];
    let labels = [1, 0, 1, 1, 0, 0, 0];
    let fast = auc(&scores, &labels)?;
    let pairs = auc_bruteforce(&scores, &labels)?;
    println!("auc (ranks) {fast:.6}");
    println!("auc (pairs) {pairs:.6}");
    println!("logloss     {:.6}", logloss(&scores, &labels)?);

    // one class only: AUC is undefined and reported as an error
    match auc(&[0.2, 0.3], &[1, 1]) {
        Ok(v) => println!("unexpected auc {v}"),
        Err(e) => println!("single class: {e}"),
    }
    let r = EvalResult::compute(&scores, &labels)?;
    println!("{} samples, {} positive", r.n_samples, r.n_pos);
    Ok(())
}
