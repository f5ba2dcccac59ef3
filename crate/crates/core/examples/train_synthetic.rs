//! Trains a small model on in-memory synthetic data with early stopping and
//! reports the validation curve.

use mmctr::cli::TrainConfig;
use mmctr::datapipe::{generate, SynthConfig};
use mmctr::trainer::train;

pub fn main() -> mmctr::Result<()> {
    let gen = SynthConfig {
        n_users: 150,
        n_items: 300,
        d_mm: 8,
        seq_len: 10,
        n_samples: 2500,
        n_val: 500,
        n_test: 0,
        ..SynthConfig::default()
    };
    let data = generate(&gen);
    let (train_set, val_set, _) = data.split(&gen);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        embedding_dim: 8,
        n_encoder_layers: 1,
        d_ff: 32,
        k: 2,
        n_cross_layers: 1,
        deep_hidden: vec![32],
        head_hidden: vec![16, 8],
        max_epochs: 6,
        patience: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data.items, &train_set, &val_set, &mut |line| println!("{}", line.to_json()))?;
    println!(
        "best epoch {} val auc {:.4} logloss {:.4}{}",
        out.best_epoch,
        out.best_val.auc,
        out.best_val.logloss,
        if out.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}
