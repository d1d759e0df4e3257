use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_MIN_ABS: f64 = 1.0;
/// Grid flows below this are left out of every metric.
pub const GRID_MIN_FLOW: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// All channels pooled, every finite target counted.
    #[default]
    Graph,
    /// Per-channel metrics over targets ≥ 10, then averaged over channels.
    Grid,
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(EvalMode::Graph),
            "grid" => Ok(EvalMode::Grid),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected graph or grid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
    /// Points contributing to MAE and RMSE.
    pub count: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAE {:.4}  MAPE {:.2}%  RMSE {:.4}  ({} points)",
            self.mae, self.mape, self.rmse, self.count
        )
    }
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    n_pct: usize,
}

impl Acc {
    fn push(&mut self, y: f64, p: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() >= MAPE_MIN_ABS {
            self.pct += (e / y).abs();
            self.n_pct += 1;
        }
    }

    fn report(&self) -> MetricReport {
        let n = self.n as f64;
        MetricReport {
            mae: self.abs / n,
            mape: if self.n_pct > 0 { 100.0 * self.pct / self.n_pct as f64 } else { 0.0 },
            rmse: (self.sq / n).sqrt(),
            count: self.n,
        }
    }
}

/// MAE, MAPE and RMSE of denormalized predictions. The last axis is the
/// channel; non-finite targets are skipped.
pub fn evaluate(preds: &Tensor, targets: &Tensor, mode: EvalMode) -> Result<MetricReport> {
    if preds.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} and targets {:?} differ in shape",
            preds.shape(),
            targets.shape()
        )));
    }
    let c = targets.last_dim();
    let mut accs: Vec<Acc> = (0..c).map(|_| Acc::default()).collect();
    let mut pooled = Acc::default();
    for (i, (&y, &p)) in targets.data().iter().zip(preds.data()).enumerate() {
        if !y.is_finite() {
            continue;
        }
        match mode {
            EvalMode::Graph => pooled.push(y, p),
            EvalMode::Grid if y >= GRID_MIN_FLOW => accs[i % c].push(y, p),
            EvalMode::Grid => {}
        }
    }
    match mode {
        EvalMode::Graph => {
            if pooled.n == 0 {
                return Err(Error::Data("no valid target points to evaluate".into()));
            }
            Ok(pooled.report())
        }
        EvalMode::Grid => {
            let used: Vec<MetricReport> = accs.iter().filter(|a| a.n > 0).map(Acc::report).collect();
            if used.is_empty() {
                return Err(Error::Data(format!("no target reaches the grid flow floor of {GRID_MIN_FLOW}")));
            }
            let k = used.len() as f64;
            Ok(MetricReport {
                mae: used.iter().map(|r| r.mae).sum::<f64>() / k,
                mape: used.iter().map(|r| r.mape).sum::<f64>() / k,
                rmse: used.iter().map(|r| r.rmse).sum::<f64>() / k,
                count: used.iter().map(|r| r.count).sum(),
            })
        }
    }
}
