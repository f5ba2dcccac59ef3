use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{load_synth_config, Checkpoint, TrainConfig};
use crate::datapipe::{generate, load_items, load_samples, write_items, write_samples, Batch, ItemTable, SampleSet, SynthConfig};
use crate::embedlayer::ItemFeatures;
use crate::error::{Error, Result};
use crate::metrics::MetricLine;
use crate::model::CtrModel;
use crate::params::{check_param_gradients, ParamCheck};
use crate::trainer::{evaluate, grid_search, train, write_grid_tsv, GridSpec};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "mmctr", version, about = "Multimodal CTR model: data generation, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: items.tsv, train.tsv, val.tsv, test.tsv.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with early stopping; writes checkpoint.bin and metrics.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print AUC and logloss of a checkpoint on DATA/<split>.tsv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write `index<TAB>probability` for every sample of a file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Item file; defaults to items.tsv next to the input.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Compare backprop against finite differences on a tiny seeded model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Hyperparameter sweep; writes grid.tsv.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid file; defaults to the published one-factor grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// `DIR/items.tsv`, `DIR/train.tsv`, `DIR/val.tsv`.
pub fn load_dataset(dir: &Path) -> Result<(ItemTable, SampleSet, SampleSet)> {
    Ok((
        load_items(dir.join("items.tsv"))?,
        load_samples(dir.join("train.tsv"))?,
        load_samples(dir.join("val.tsv"))?,
    ))
}

pub fn gen_data(config: &SynthConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let data = generate(config);
    let (train, val, test) = data.split(config);
    write_items(out.join("items.tsv"), &data.items)?;
    write_samples(out.join("train.tsv"), &train)?;
    write_samples(out.join("val.tsv"), &val)?;
    write_samples(out.join("test.tsv"), &test)
}

/// Trains on `data` and writes `checkpoint.bin` and `metrics.jsonl` under `run`.
pub fn train_command(config: &TrainConfig, data: &Path, run: &Path, stdout: &mut dyn Write) -> Result<Checkpoint> {
    let (items, train_set, val_set) = load_dataset(data)?;
    create_dir(run)?;
    let metrics_path = run.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let mut failure = None;
    let outcome = train(config, &items, &train_set, &val_set, &mut |line| {
        let json = line.to_json();
        let r = writeln!(metrics, "{json}").and_then(|_| metrics.flush()).and_then(|_| writeln!(stdout, "{json}"));
        if let Err(e) = r {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(Error::io(&metrics_path, e));
    }
    let ck = Checkpoint::new(&outcome.config, &outcome.model, &outcome.best, Some(&outcome.best_adam));
    ck.save(run.join("checkpoint.bin"))?;
    Ok(ck)
}

/// Probabilities for `set`, computed exactly as `eval` computes them.
pub fn predict_with(ck: &Checkpoint, items: &ItemTable, set: &SampleSet) -> Result<Vec<f32>> {
    let (model, store) = ck.restore()?;
    set.validate(items)?;
    model.predict_probs(&store, &ItemFeatures::from_items(items), set, ck.config.eval_batch_size)
}

pub fn eval_command(ck: &Checkpoint, data: &Path, split: &str) -> Result<MetricLine> {
    let items = load_items(data.join("items.tsv"))?;
    let set = load_samples(data.join(format!("{split}.tsv")))?;
    set.validate(&items)?;
    let (model, store) = ck.restore()?;
    let r = evaluate(&model, &store, &ItemFeatures::from_items(&items), &set, ck.config.eval_batch_size)?;
    Ok(MetricLine::new(split, None, &r))
}

pub fn format_scores(probs: &[f32]) -> String {
    probs.iter().enumerate().map(|(i, p)| format!("{i}\t{p}\n")).collect()
}

/// The tiny architecture `gradcheck` uses unless a config file overrides it.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        embedding_dim: 4,
        d_mm: Some(4),
        seq_len: Some(6),
        k: 2,
        n_encoder_layers: 1,
        n_heads: 1,
        d_ff: 16,
        n_cross_layers: 1,
        deep_hidden: vec![8],
        head_hidden: vec![4, 2],
        transformer_dropout: 0.0,
        cross_net_dropout: 0.0,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Per-tensor gradient errors of the whole model in 64-bit arithmetic on a
/// small seeded batch with mixed history lengths.
pub fn gradcheck_report(config: &TrainConfig) -> Result<Vec<ParamCheck>> {
    let n = config.seq_len.unwrap_or(6);
    let synth = SynthConfig {
        seed: config.seed,
        n_users: 6,
        n_items: 10,
        d_mm: config.d_mm.unwrap_or(4),
        seq_len: n,
        n_samples: 8,
        latent_dim: 4,
        n_categories: 3,
        pool_size: 5,
        ..SynthConfig::default()
    };
    let data = generate(&synth);
    let set = data.sample_set(n);
    let bound = config.bind_data(&data.items, &set)?;
    let spec = bound.model_spec(data.items.vocab_sizes(), set.side_vocab_sizes())?;
    let (model, store) = CtrModel::new::<f64>(spec, bound.seed)?;
    let features = ItemFeatures::from_items(&data.items);
    let idx: Vec<usize> = (0..set.len()).collect();
    let batch = Batch::from_samples(&set.samples, &idx, n, set.n_side);
    // dropout is off in an eval session, whatever the configured rates
    check_param_gradients(&store, |s| Ok(model.loss(s, &features, &batch)?.0), 1e-6)
}

/// Runs one command; returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.map_or_else(|| Ok(SynthConfig::default()), load_synth_config)?;
            gen_data(&cfg, &out)?;
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = data.or(cfg.data.clone()).ok_or_else(|| Error::Config("no data directory (--data)".into()))?;
            let out = out.or(cfg.out.clone()).ok_or_else(|| Error::Config("no run directory (--out)".into()))?;
            train_command(&cfg, &data, &out, stdout)?;
        }
        Command::Eval { checkpoint, data, split } => {
            let ck = Checkpoint::load(checkpoint)?;
            emit(stdout, &eval_command(&ck, &data, &split)?.to_json())?;
        }
        Command::Predict { checkpoint, input, out, items } => {
            let ck = Checkpoint::load(checkpoint)?;
            let items_path = items.unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).join("items.tsv"));
            let items = load_items(items_path)?;
            let set = load_samples(&input)?;
            let probs = predict_with(&ck, &items, &set)?;
            std::fs::write(&out, format_scores(&probs)).map_err(|e| Error::io(&out, e))?;
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let mut cfg = gradcheck_config();
                    for (line, k, v) in super::parse_flat(&p, &text)? {
                        cfg.set(&k, &v)
                            .map_err(|m| Error::Config(format!("{}:{line}: {m}", p.display())))?;
                    }
                    cfg.validate()?;
                    cfg
                }
                None => gradcheck_config(),
            };
            let report = gradcheck_report(&cfg)?;
            let mut worst = 0.0f64;
            for c in &report {
                emit(stdout, &format!("{}\t{}\t{:e}", c.name, c.numel, c.rel_error))?;
                worst = worst.max(c.rel_error);
            }
            emit(stdout, &format!("max_rel_error\t{worst:e}"))?;
            if !(worst < GRADCHECK_TOLERANCE) {
                eprintln!("gradient check failed: {worst:e} >= {GRADCHECK_TOLERANCE:e}");
                return Ok(2);
            }
        }
        Command::Grid { config, grid, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let spec = grid.map_or_else(|| Ok(GridSpec::table1()), GridSpec::load)?;
            let (items, train_set, val_set) = load_dataset(&data)?;
            let results = grid_search(&spec, &cfg, &items, &train_set, &val_set)?;
            create_dir(&out)?;
            write_grid_tsv(out.join("grid.tsv"), &results)?;
            let failed = results.iter().filter(|r| r.auc().is_none()).count();
            emit(stdout, &format!("{} trials, {failed} failed, table in {}", results.len(), out.join("grid.tsv").display()))?;
        }
    }
    Ok(0)
}
