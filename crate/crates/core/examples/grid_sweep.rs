//! A small one-factor sweep parsed from grid text, ranked by validation AUC
//! and printed as the TSV table the `grid` command writes.

use std::path::Path;

use mmctr::cli::TrainConfig;
use mmctr::datapipe::{generate, SynthConfig};
use mmctr::trainer::{format_grid_tsv, grid_search, GridSpec};

const GRID: &str = "\
mode = one_factor
learning_rate = 1e-3, 1e-4
k = 0, 2
";

pub fn main() -> mmctr::Result<()> {
    let gen = SynthConfig {
        n_users: 100,
        n_items: 200,
        d_mm: 8,
        seq_len: 6,
        n_samples: 1000,
        n_val: 200,
        n_test: 0,
        ..SynthConfig::default()
    };
    let data = generate(&gen);
    let (train_set, val_set, _) = data.split(&gen);
    let base = TrainConfig {
        batch_size: 64,
        embedding_dim: 8,
        n_encoder_layers: 1,
        d_ff: 32,
        k: 2,
        n_cross_layers: 1,
        deep_hidden: vec![16],
        head_hidden: vec![8, 4],
        max_epochs: 2,
        patience: 1,
        ..TrainConfig::default()
    };
    let grid = GridSpec::parse(Path::new("<inline>"), GRID)?;
    let results = grid_search(&grid, &base, &data.items, &train_set, &val_set)?;
    print!("{}", format_grid_tsv(&results));
    Ok(())
}
