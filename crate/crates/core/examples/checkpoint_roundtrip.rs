//! Saves the best parameters to the binary checkpoint format, reloads them
//! and confirms the restored model scores samples identically.

use mmctr::cli::{predict_with, Checkpoint, TrainConfig};
use mmctr::datapipe::{generate, SynthConfig};
use mmctr::trainer::train;

pub fn main() -> mmctr::Result<()> {
    let gen = SynthConfig {
        n_users: 60,
        n_items: 120,
        d_mm: 4,
        seq_len: 6,
        n_samples: 600,
        n_val: 150,
        n_test: 0,
        ..SynthConfig::default()
    };
    let data = generate(&gen);
    let (train_set, val_set, _) = data.split(&gen);
    let cfg = TrainConfig {
        embedding_dim: 4,
        n_encoder_layers: 1,
        d_ff: 16,
        k: 2,
        n_cross_layers: 1,
        deep_hidden: vec![16],
        head_hidden: vec![8, 4],
        batch_size: 32,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data.items, &train_set, &val_set, &mut |_| {})?;
    let ck = Checkpoint::new(&out.config, &out.model, &out.best, Some(&out.best_adam));
    let bytes = ck.to_bytes();
    println!("checkpoint: {} bytes, {} tensors", bytes.len(), ck.tensors.len());

    let back = Checkpoint::from_bytes(&bytes)?;
    let before = predict_with(&ck, &data.items, &val_set)?;
    let after = predict_with(&back, &data.items, &val_set)?;
    let same = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} predictions, bitwise identical after reload: {same}", after.len());
    Ok(())
}
