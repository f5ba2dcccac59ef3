/// Patience-based stopping on validation AUC. Epochs count from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_val_auc: f64,
    /// 0 until the first observation.
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val_auc: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
            patience,
        }
    }

    /// Records one epoch; only a strictly greater AUC counts as improvement.
    pub fn observe(&mut self, epoch: usize, val_auc: f64) -> Verdict {
        let improved = val_auc > self.best_val_auc;
        if improved {
            self.best_val_auc = val_auc;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        Verdict {
            improved,
            stop: self.epochs_since_improve >= self.patience,
        }
    }
}
