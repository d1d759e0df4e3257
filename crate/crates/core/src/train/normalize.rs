use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this a channel's standard deviation is replaced by 1.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score transform over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Two-pass mean and population standard deviation per channel,
    /// skipping non-finite values.
    pub fn fit(values: &Tensor) -> Result<Self> {
        let c = values.last_dim();
        let mut mean = vec![0.0; c];
        let mut count = vec![0usize; c];
        for row in values.data().chunks(c) {
            for (j, &v) in row.iter().enumerate() {
                if v.is_finite() {
                    mean[j] += v;
                    count[j] += 1;
                }
            }
        }
        if let Some(j) = count.iter().position(|&k| k == 0) {
            return Err(Error::Data(format!("cannot fit normalizer: channel {j} has no finite values")));
        }
        for (m, &k) in mean.iter_mut().zip(&count) {
            *m /= k as f64;
        }
        let mut var = vec![0.0; c];
        for row in values.data().chunks(c) {
            for (j, &v) in row.iter().enumerate() {
                if v.is_finite() {
                    var[j] += (v - mean[j]) * (v - mean[j]);
                }
            }
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(&s, &k)| {
                let sd = (s / k as f64).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.channels() {
            return Err(Error::dim(format!(
                "normalizer has {} channels, tensor {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `(x − μ)/σ`; non-finite entries pass through.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.channels();
        Ok(Tensor::from_fn(x.shape(), |i| (x.data()[i] - self.mean[i % c]) / self.std[i % c]))
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.channels();
        Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * self.std[i % c] + self.mean[i % c]))
    }
}
