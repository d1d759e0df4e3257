//! The rank-3 traffic tensor: time × node × channel.

use chrono::{Duration, NaiveDateTime};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flow observations over `T` steps, `N` nodes and `C` channels.
///
/// Raw (un-normalized) tensors may carry `NaN` for missing readings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTensor {
    values: Tensor,
    interval_minutes: u32,
    start: NaiveDateTime,
}

impl TrafficTensor {
    pub fn new(values: Tensor, interval_minutes: u32, start: NaiveDateTime) -> Result<Self> {
        values.dims3("traffic tensor")?;
        if interval_minutes == 0 {
            return Err(Error::Data("interval_minutes must be positive".into()));
        }
        Ok(TrafficTensor {
            values,
            interval_minutes,
            start,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn get(&self, t: usize, n: usize, c: usize) -> f64 {
        let (_, nn, cc) = (self.steps(), self.nodes(), self.channels());
        self.values.data()[(t * nn + n) * cc + c]
    }

    /// Timestamp of step `t`.
    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(t as i64 * self.interval_minutes as i64)
    }

    /// Steps per day, when the interval divides a day.
    pub fn steps_per_day(&self) -> Option<usize> {
        (1440 % self.interval_minutes == 0).then(|| (1440 / self.interval_minutes) as usize)
    }

    /// Contiguous sub-range of steps `[from, to)`.
    pub fn slice_steps(&self, from: usize, to: usize) -> Result<TrafficTensor> {
        if from >= to || to > self.steps() {
            return Err(Error::Data(format!(
                "step range {from}..{to} invalid for {} steps",
                self.steps()
            )));
        }
        let row = self.nodes() * self.channels();
        let data = self.values.data()[from * row..to * row].to_vec();
        let values = Tensor::new(&[to - from, self.nodes(), self.channels()], data)?;
        Ok(TrafficTensor {
            values,
            interval_minutes: self.interval_minutes,
            start: self.timestamp(from),
        })
    }
}
