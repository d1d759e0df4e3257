use std::ops::Range;

use crate::embedding::{temporal_indices, TemporalIndex};
use crate::error::{Error, Result};
use crate::graph::{Layout, RoadNetwork};
use crate::series::TrafficTensor;
use crate::tensor::Tensor;

use super::metrics::EvalMode;
use super::normalize::Normalizer;
use super::windows::{steps, window_starts, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Normalized `h×N×C` input with missing values imputed.
    pub input: Tensor,
    /// Normalized `h′×N×C` target; missing entries are NaN.
    pub target: Tensor,
    /// 1 where the target is present.
    pub valid: Tensor,
    /// Raw `h′×N×C` target.
    pub raw_target: Tensor,
    pub indices: Vec<TemporalIndex>,
}

/// A road network and its series, normalized with statistics from the
/// training split and cut into chronological splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub network: RoadNetwork,
    pub series: TrafficTensor,
    pub normalizer: Normalizer,
    pub split: SplitSpec,
    pub splits: [Range<usize>; 3],
    /// Normalized series; missing inputs become 0 (the training mean).
    inputs: Tensor,
    targets: Tensor,
}

impl Dataset {
    pub fn new(network: RoadNetwork, series: TrafficTensor, split: SplitSpec) -> Result<Self> {
        if series.nodes() != network.node_count() {
            return Err(Error::Data(format!(
                "series has {} nodes, network {}",
                series.nodes(),
                network.node_count()
            )));
        }
        let splits = split.ranges(series.steps())?;
        if splits[0].is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let train = series.slice_steps(splits[0].start, splits[0].end)?;
        let normalizer = Normalizer::fit(train.values())?;
        let targets = normalizer.apply(series.values())?;
        let inputs = targets.map(|v| if v.is_finite() { v } else { 0.0 });
        Ok(Dataset {
            network,
            series,
            normalizer,
            split,
            splits,
            inputs,
            targets,
        })
    }

    /// Re-normalize with stored statistics, e.g. those of a checkpoint.
    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Result<Self> {
        if normalizer.channels() != self.series.channels() {
            return Err(Error::Data(format!(
                "normalizer has {} channels, series {}",
                normalizer.channels(),
                self.series.channels()
            )));
        }
        self.targets = normalizer.apply(self.series.values())?;
        self.inputs = self.targets.map(|v| if v.is_finite() { v } else { 0.0 });
        self.normalizer = normalizer;
        Ok(self)
    }

    /// Split ratios and metric mode implied by the network layout.
    pub fn defaults_for(layout: &Layout) -> (SplitSpec, EvalMode) {
        match layout {
            Layout::Graph => (SplitSpec::GRAPH, EvalMode::Graph),
            Layout::Grid { .. } => (SplitSpec::GRID, EvalMode::Grid),
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.splits[split as usize].clone()
    }

    /// Raw history of the training split.
    pub fn train_history(&self) -> Result<TrafficTensor> {
        let r = self.range(Split::Train);
        self.series.slice_steps(r.start, r.end)
    }

    /// Absolute start steps of every window inside `split`.
    pub fn window_starts(&self, split: Split, h: usize, h_out: usize) -> Result<Vec<usize>> {
        let r = self.range(split);
        let starts = window_starts(r.len(), h, h_out, 1)
            .map_err(|e| Error::Data(format!("{split:?} split: {e}")))?;
        Ok(starts.into_iter().map(|s| s + r.start).collect())
    }

    pub fn sample(&self, start: usize, h: usize, h_out: usize) -> Result<Sample> {
        let input = steps(&self.inputs, start, start + h)?;
        let target = steps(&self.targets, start + h, start + h + h_out)?;
        let raw_target = steps(self.series.values(), start + h, start + h + h_out)?;
        let valid = target.map(|v| if v.is_finite() { 1.0 } else { 0.0 });
        let indices = (start..start + h)
            .map(|s| temporal_indices(self.series.start(), s, self.series.interval_minutes()))
            .collect::<Result<_>>()?;
        Ok(Sample {
            input,
            target,
            valid,
            raw_target,
            indices,
        })
    }

    /// Raw input steps of a window, with missing values replaced by the
    /// training mean.
    pub fn raw_input(&self, start: usize, h: usize) -> Result<Tensor> {
        let x = steps(self.series.values(), start, start + h)?;
        let c = x.last_dim();
        Ok(Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            if v.is_finite() {
                v
            } else {
                self.normalizer.mean[i % c]
            }
        }))
    }
}
