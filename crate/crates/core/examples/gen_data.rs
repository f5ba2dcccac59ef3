//! Writes a seeded synthetic dataset (`items.tsv`, `train.tsv`, `val.tsv`,
//! `test.tsv`) to a directory under the system temp dir.

use mmctr::cli::gen_data;
use mmctr::datapipe::{load_items, load_samples, SynthConfig};

pub fn main() -> mmctr::Result<()> {
    let out = std::env::temp_dir().join("mmctr-example-data");
    let cfg = SynthConfig {
        n_users: 100,
        n_items: 200,
        d_mm: 8,
        seq_len: 10,
        n_samples: 1200,
        n_val: 200,
        n_test: 200,
        ..SynthConfig::default()
    };
    gen_data(&cfg, &out)?;
    let items = load_items(out.join("items.tsv"))?;
    println!("{} items, d_mm {}", items.len(), items.d_mm);
    for split in ["train", "val", "test"] {
        let set = load_samples(out.join(format!("{split}.tsv")))?;
        println!("{split}: {} samples, {} clicks, N = {}", set.len(), set.n_positive(), set.seq_len);
    }
    println!("written to {}", out.display());
    Ok(())
}
