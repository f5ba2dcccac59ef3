//! Adam optimization, the epoch loop with AUC-monitored early stopping, and
//! hyperparameter grid search.

mod adam;
mod early_stop;
mod grid;

pub use adam::AdamState;
pub use early_stop::{EarlyStopState, Verdict};
pub use grid::{format_grid_tsv, grid_search, write_grid_tsv, GRID_HEADER, GridMode, GridSpec, Trial, TrialResult, TrialStatus};

use rand::RngCore;

use crate::cli::TrainConfig;
use crate::datapipe::{batches, ItemTable, SampleSet};
use crate::embedlayer::ItemFeatures;
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, MetricLine};
use crate::model::CtrModel;
use crate::params::{stream_rng, ParamStore, Session, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalResult,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The configuration with `N`, `d_mm` and feature counts filled from the data.
    pub config: TrainConfig,
    pub model: CtrModel,
    /// Parameters of the best validation epoch.
    pub best: ParamStore<f32>,
    /// Optimizer state at the end of the best epoch.
    pub best_adam: AdamState<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: EvalResult,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn metric_lines(&self) -> Vec<MetricLine> {
        self.history
            .iter()
            .map(|r| MetricLine::new("val", Some(r.epoch), &r.val))
            .collect()
    }
}

/// Side vocabularies covering every code seen in `sets`.
pub fn side_vocab(sets: &[&SampleSet]) -> Vec<usize> {
    let n = sets.first().map_or(0, |s| s.n_side);
    let mut out = vec![1; n];
    for set in sets {
        for (o, v) in out.iter_mut().zip(set.side_vocab_sizes()) {
            *o = (*o).max(v);
        }
    }
    out
}

/// AUC and logloss of the model on `set`, dropout off.
pub fn evaluate(
    model: &CtrModel,
    store: &ParamStore<f32>,
    features: &ItemFeatures,
    set: &SampleSet,
    batch_size: usize,
) -> Result<EvalResult> {
    let probs: Vec<f64> = model
        .predict_probs(store, features, set, batch_size)?
        .into_iter()
        .map(f64::from)
        .collect();
    let labels: Vec<u8> = set.samples.iter().map(|s| s.label).collect();
    EvalResult::compute(&probs, &labels)
}

/// Trains from a fresh initialization. `log` receives one validation line per
/// epoch as soon as it is computed.
pub fn train(
    config: &TrainConfig,
    items: &ItemTable,
    train_set: &SampleSet,
    val_set: &SampleSet,
    log: &mut dyn FnMut(&MetricLine),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train and validation splits must be non-empty".into()));
    }
    let n_pos = val_set.n_positive();
    if n_pos == 0 || n_pos == val_set.len() {
        return Err(Error::UndefinedMetric(
            "validation split needs both positive and negative samples".into(),
        ));
    }
    if val_set.n_side != train_set.n_side {
        return Err(Error::Data(format!(
            "train has {} side features, validation {}",
            train_set.n_side, val_set.n_side
        )));
    }
    train_set.validate(items)?;
    val_set.validate(items)?;

    let config = config.bind_data(items, train_set)?;
    let spec = config.model_spec(items.vocab_sizes(), side_vocab(&[train_set, val_set]))?;
    let seed = config.seed;
    let (model, mut store) = CtrModel::new::<f32>(spec, seed)?;
    let features = ItemFeatures::from_items(items);
    let mut adam = AdamState::new(&store, config.learning_rate);
    let mut stopper = EarlyStopState::new(config.patience);
    let mut best = store.clone();
    let mut best_adam = adam.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let n = model.spec.seq_len;

    for epoch in 1..=config.max_epochs {
        let shuffle = stream_rng(seed, Stream::Shuffle, epoch as u64).next_u64();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, batch) in batches(&train_set.samples, config.batch_size, n, train_set.n_side, Some(shuffle)).enumerate() {
            let rng = stream_rng(seed, Stream::Dropout, adam.t);
            let mut s = Session::new(&store, true, rng);
            let (loss, _) = model.loss(&mut s, &features, &batch)?;
            let value = f64::from(s.graph.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi + 1, loss: value });
            }
            s.backward(loss)?;
            let grads = s.param_grads();
            drop(s);
            store.set_grads(grads)?;
            adam.step(&mut store)?;
            loss_sum += value * batch.size as f64;
            count += batch.size;
        }
        if store.iter().any(|p| !p.tensor.is_finite()) {
            return Err(Error::Diverged { epoch, batch: 0, loss: f64::NAN });
        }
        let val = evaluate(&model, &store, &features, val_set, config.eval_batch_size)?;
        log(&MetricLine::new("val", Some(epoch), &val));
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val,
        });
        let verdict = stopper.observe(epoch, val.auc);
        if verdict.improved {
            best.clone_from(&store);
            best_adam.clone_from(&adam);
        }
        if verdict.stop {
            stopped_early = true;
            break;
        }
    }
    best.clear_grads();
    let best_val = history[stopper.best_epoch - 1].val;
    Ok(TrainOutcome {
        config,
        model,
        best,
        best_adam,
        history,
        best_epoch: stopper.best_epoch,
        best_val,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{generate, SynthConfig};

    fn small() -> (ItemTable, SampleSet, SampleSet) {
        let cfg = SynthConfig {
            n_users: 30,
            n_items: 40,
            d_mm: 4,
            seq_len: 6,
            n_samples: 400,
            latent_dim: 4,
            pool_size: 8,
            n_val: 100,
            n_test: 0,
            ..SynthConfig::default()
        };
        let data = generate(&cfg);
        let (tr, va, _) = data.split(&cfg);
        (data.items, tr, va)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            embedding_dim: 4,
            n_encoder_layers: 1,
            n_heads: 1,
            d_ff: 8,
            k: 2,
            n_cross_layers: 1,
            deep_hidden: vec![8],
            head_hidden: vec![4, 2],
            batch_size: 32,
            max_epochs: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_reproducible_and_best_reevaluates() {
        let (items, tr, va) = small();
        let mut lines = Vec::new();
        let a = train(&tiny_config(), &items, &tr, &va, &mut |l| lines.push(l.to_json())).unwrap();
        let b = train(&tiny_config(), &items, &tr, &va, &mut |_| {}).unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        let again = evaluate(&a.model, &a.best, &ItemFeatures::from_items(&items), &va, 7).unwrap();
        assert!((again.auc - a.best_val.auc).abs() < 1e-9);
        assert_eq!(a.best_adam.t, (a.best_epoch * 10) as u64);
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let (items, tr, va) = small();
        let cfg = TrainConfig { learning_rate: 1e30, ..tiny_config() };
        match train(&cfg, &items, &tr, &va, &mut |_| {}) {
            Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch >= 1 && batch <= 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let (items, tr, mut va) = small();
        va.samples.iter_mut().for_each(|s| s.label = 1);
        assert!(matches!(train(&tiny_config(), &items, &tr, &va, &mut |_| {}), Err(Error::UndefinedMetric(_))));
    }
}
