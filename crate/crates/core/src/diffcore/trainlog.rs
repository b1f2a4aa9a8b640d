use serde::{Deserialize, Serialize};

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    /// `epoch,train_loss,val_metric` lines.
    pub fn to_csv(&self, val_name: &str) -> String {
        let mut out = format!("epoch,train_loss,{val_name}\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.9},{:.9}\n", e.epoch, e.train_loss, e.val_metric));
        }
        out
    }
}

