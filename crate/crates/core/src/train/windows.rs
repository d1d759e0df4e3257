use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const GRAPH: SplitSpec = SplitSpec { train: 0.6, val: 0.2, test: 0.2 };
    pub const GRID: SplitSpec = SplitSpec { train: 0.7, val: 0.1, test: 0.2 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(p > 0.0 && p.is_finite())) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {}/{}/{} must be positive and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Contiguous step ranges for `len` steps, in time order.
    pub fn ranges(&self, len: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let a = (len as f64 * self.train).floor() as usize;
        let b = ((len as f64 * (self.train + self.val)).floor() as usize).clamp(a, len);
        Ok([0..a, a..b, b..len])
    }
}

/// Start offsets (relative to the range start) of every window of `h` input
/// and `h_out` target steps that fits in `len` steps.
pub fn window_starts(len: usize, h: usize, h_out: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    if len < h + h_out {
        return Err(Error::Data(format!(
            "{len} steps cannot hold one window of {h} input and {h_out} target steps"
        )));
    }
    Ok((0..=len - h - h_out).step_by(stride).collect())
}

/// `(input, target)` pairs cut from a `T×N×C` series.
pub fn make_windows(series: &Tensor, h: usize, h_out: usize, stride: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let t = series.dims3("series")?.0;
    window_starts(t, h, h_out, stride)?
        .into_iter()
        .map(|s| Ok((steps(series, s, s + h)?, steps(series, s + h, s + h + h_out)?)))
        .collect()
}

/// Steps `from..to` of a tensor whose first axis is time.
pub fn steps(series: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let t = series.shape()[0];
    if from >= to || to > t {
        return Err(Error::dim(format!("step range {from}..{to} outside 0..{t}")));
    }
    let per: usize = series.shape()[1..].iter().product();
    let mut shape = series.shape().to_vec();
    shape[0] = to - from;
    Tensor::new(&shape, series.data()[from * per..to * per].to_vec())
}
