use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{Checkpoint, GraphContext, Model, ModelConfig};
use crate::params::Gradients;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::adam::Adam;
use super::dataset::{Dataset, Split};
use super::metrics::{evaluate, EvalMode, MetricReport};
use super::windows::SplitSpec;

/// Optimisation settings. Defaults are desk scale; [`TrainConfig::full_scale`]
/// holds the full-scale batch size and epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation MAE.
    pub patience: usize,
    pub lr: f64,
    /// Stop after this many optimizer steps, whatever the epoch.
    pub max_steps: Option<usize>,
    /// Shuffling seed.
    pub seed: u64,
    /// Defaults to 6:2:2 on graphs and 7:1:2 on grids.
    pub split: Option<SplitSpec>,
    /// Defaults from the layout as well.
    pub mode: Option<EvalMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 30,
            patience: 5,
            lr: 1e-3,
            max_steps: None,
            seed: 0,
            split: None,
            mode: None,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if let Some(s) = &self.split {
            s.validate()?;
        }
        Ok(())
    }
}

/// `[model]` and `[train]` tables of a run configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_string(path)?)
    }
}

/// One optimizer step; validation metrics are filled on the last step of
/// each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation MAE.
    pub model: Model,
    /// Optimizer state at that point.
    pub optimizer: Adam,
    pub trace: Vec<StepRecord>,
    pub best_val: MetricReport,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, dataset: &Dataset) -> Checkpoint {
        checkpoint_of(&self.model, &self.optimizer, dataset)
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        epoch_means(&self.trace)
    }
}

pub(crate) fn checkpoint_of(model: &Model, opt: &Adam, dataset: &Dataset) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model);
    ck.arrays.extend(opt.state_arrays(&model.store));
    ck.meta.adam_step = opt.step;
    ck.meta.normalizer_mean = dataset.normalizer.mean.clone();
    ck.meta.normalizer_std = dataset.normalizer.std.clone();
    ck.meta.split = Some([dataset.split.train, dataset.split.val, dataset.split.test]);
    ck
}

/// Mean training loss per epoch.
pub fn epoch_means(trace: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in trace {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.train_loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().filter(|&(_, n)| n > 0).map(|(s, n)| s / n as f64).collect()
}

/// Loss and parameter gradients of one window.
pub(crate) fn sample_gradient(model: &Model, ctx: &GraphContext, dataset: &Dataset, start: usize) -> Result<(f64, Gradients)> {
    let cfg = &model.config;
    let s = dataset.sample(start, cfg.input_len, cfg.horizon)?;
    let mut g = Graph::new();
    let vars = model.store.bind(&mut g);
    let fp = model.forward(&mut g, &vars, ctx, &s.input, &s.indices, false)?;
    if s.valid.sum() == 0.0 {
        log::warn!("window starting at step {start} has no valid targets; loss is 0");
    }
    let loss = g.masked_mae(fp.prediction, &s.target, &s.valid)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        let detail = match g.first_non_finite() {
            Some((v, tag)) => format!("first non-finite tensor is node {} ({tag})", v.index()),
            None => "no non-finite intermediate found".to_string(),
        };
        return Err(Error::Numeric(format!(
            "loss is {value} on the window starting at step {start}; {detail}"
        )));
    }
    g.backward(loss)?;
    Ok((value, model.store.gradients(&g, &vars)))
}

/// Denormalized predictions and raw targets for windows starting at
/// `starts`, stacked along the first axis.
pub fn predict_windows(model: &Model, ctx: &GraphContext, dataset: &Dataset, starts: &[usize]) -> Result<(Tensor, Tensor)> {
    let cfg = &model.config;
    let parts: Vec<(Tensor, Tensor)> = starts
        .par_iter()
        .map(|&s| {
            let sample = dataset.sample(s, cfg.input_len, cfg.horizon)?;
            let pred = model.predict(ctx, &sample.input, &sample.indices)?;
            Ok((dataset.normalizer.invert(&pred)?, sample.raw_target))
        })
        .collect::<Result<_>>()?;
    stack(parts)
}

fn stack(parts: Vec<(Tensor, Tensor)>) -> Result<(Tensor, Tensor)> {
    let first = parts.first().ok_or_else(|| Error::Data("no windows to predict".into()))?;
    let mut shape = first.0.shape().to_vec();
    shape[0] *= parts.len();
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (a, b) in parts {
        p.extend_from_slice(a.data());
        t.extend_from_slice(b.data());
    }
    Ok((Tensor::new(&shape, p)?, Tensor::new(&shape, t)?))
}

/// Metrics of `model` over every window of `split`.
pub fn evaluate_split(model: &Model, ctx: &GraphContext, dataset: &Dataset, split: Split, mode: EvalMode) -> Result<MetricReport> {
    let starts = dataset.window_starts(split, model.config.input_len, model.config.horizon)?;
    let (p, t) = predict_windows(model, ctx, dataset, &starts)?;
    evaluate(&p, &t, mode)
}

/// Metrics of repeating the last observed input value over the horizon.
pub fn last_value_baseline(dataset: &Dataset, split: Split, h: usize, h_out: usize, mode: EvalMode) -> Result<MetricReport> {
    let starts = dataset.window_starts(split, h, h_out)?;
    let parts = starts
        .iter()
        .map(|&s| {
            let x = dataset.raw_input(s, h)?;
            let per = x.len() / h;
            let last = &x.data()[(h - 1) * per..];
            let mut shape = x.shape().to_vec();
            shape[0] = h_out;
            let pred = Tensor::from_fn(&shape, |i| last[i % per]);
            Ok((pred, dataset.sample(s, h, h_out)?.raw_target))
        })
        .collect::<Result<Vec<_>>>()?;
    let (p, t) = stack(parts)?;
    evaluate(&p, &t, mode)
}

/// Seeded mini-batch Adam on the training windows, validating after every
/// epoch and keeping the best parameters.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, model_cfg, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.mode.unwrap_or(Dataset::defaults_for(&dataset.network.layout()).1);
    let mut model = Model::new(model_cfg.clone())?;
    let ctx = GraphContext::build(&dataset.network, &dataset.train_history()?, model_cfg)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut starts = dataset.window_starts(Split::Train, model_cfg.input_len, model_cfg.horizon)?;
    let val_starts = dataset.window_starts(Split::Val, model_cfg.input_len, model_cfg.horizon)?;

    let mut trace = Vec::new();
    let mut best: Option<(MetricReport, usize, Model, Adam)> = None;
    let mut stagnant = 0;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        rng.shuffle(&mut starts);
        let batches: Vec<&[usize]> = starts.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&s| sample_gradient(&model, &ctx, dataset, s))
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(&model.store);
            let mut loss = 0.0;
            for (l, gr) in &results {
                loss += l;
                total.add_assign(gr);
            }
            let inv = 1.0 / results.len() as f64;
            total.scale(inv);
            opt.update(&mut model.store, &total)?;
            step += 1;
            trace.push(StepRecord {
                epoch,
                step,
                train_loss: loss * inv,
                val: None,
            });
            let out_of_steps = cfg.max_steps.is_some_and(|m| step >= m);
            if bi + 1 == batches.len() || out_of_steps {
                let (p, t) = predict_windows(&model, &ctx, dataset, &val_starts)?;
                let val = evaluate(&p, &t, mode)?;
                trace.last_mut().expect("step recorded").val = Some(val);
                on_epoch(trace.last().expect("step recorded"));
                log::info!("epoch {epoch} step {step}: train loss {:.5}, val {val}", loss * inv);
                let improved = best.as_ref().is_none_or(|b| val.mae < b.0.mae);
                if improved {
                    best = Some((val, epoch, model.clone(), opt.clone()));
                    stagnant = 0;
                } else {
                    stagnant += 1;
                }
                if out_of_steps || stagnant >= cfg.patience {
                    break 'epochs;
                }
            }
        }
    }
    let (best_val, best_epoch, model, optimizer) = best.ok_or_else(|| Error::Data("no training steps were run".into()))?;
    Ok(TrainOutcome {
        model,
        optimizer,
        trace,
        best_val,
        best_epoch,
    })
}

/// Loss trace as CSV: `epoch,step,train_loss,val_mae,val_mape,val_rmse`.
pub fn metrics_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,train_loss,val_mae,val_mape,val_rmse\n");
    for r in trace {
        let (a, b, c) = match r.val {
            Some(v) => (v.mae.to_string(), v.mape.to_string(), v.rmse.to_string()),
            None => Default::default(),
        };
        writeln!(out, "{},{},{},{a},{b},{c}", r.epoch, r.step, r.train_loss).expect("write to String");
    }
    out
}
