use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::series::TrafficTensor;
use crate::tensor::Tensor;

/// Binary node-pair masks shared by every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMasks {
    /// Geographic proximity, used by spatial heads.
    pub geo: Tensor,
    /// Historical-pattern similarity, used by delay-aware heads.
    pub sem: Tensor,
}

impl AttentionMasks {
    pub fn all_ones(n: usize) -> Self {
        AttentionMasks {
            geo: Tensor::full(&[n, n], 1.0),
            sem: Tensor::full(&[n, n], 1.0),
        }
    }
}

/// 1 where the BFS hop distance over `adjacency > 0` is at most `max_hops`.
pub fn geo_mask(adjacency: &Tensor, max_hops: usize) -> Result<Tensor> {
    let (n, m) = adjacency.dims2("geo_mask")?;
    if n != m {
        return Err(Error::dim(format!("adjacency must be square, got {:?}", adjacency.shape())));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| adjacency.get(&[i, j]) > 0.0).collect())
        .collect();
    let mut mask = Tensor::zeros(&[n, n]);
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            mask.set(&[src, u], 1.0);
            if dist[u] == max_hops {
                continue;
            }
            for &w in &neighbors[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    Ok(mask)
}

/// Semantic mask from mean daily profiles.
///
/// Each node's profile is the per-time-of-day mean of its history (channels
/// concatenated, missing values skipped). Row `i` marks `i` itself plus the
/// `top_k − 1` other nodes whose profiles have the highest Pearson
/// correlation with node `i`; ties go to the lower node index.
pub fn sem_mask(history: &TrafficTensor, top_k: usize) -> Result<Tensor> {
    if top_k == 0 {
        return Err(Error::Config("sem_mask top_k must be at least 1".into()));
    }
    let period = history.steps_per_day().ok_or_else(|| {
        Error::Data(format!(
            "interval {} min does not divide a day",
            history.interval_minutes()
        ))
    })?;
    if history.steps() < period {
        return Err(Error::Data(format!(
            "semantic mask needs at least one day of history ({period} steps), got {}",
            history.steps()
        )));
    }
    let n = history.nodes();
    let profiles: Vec<Vec<f64>> = (0..n).map(|i| daily_profile(history, i, period)).collect();
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        mask.set(&[i, i], 1.0);
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, pearson(&profiles[i], &profiles[j])))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in others.iter().take(top_k - 1) {
            mask.set(&[i, j], 1.0);
        }
    }
    Ok(mask)
}

fn daily_profile(history: &TrafficTensor, node: usize, period: usize) -> Vec<f64> {
    let c = history.channels();
    let start = history.start();
    let minute = chrono::Timelike::hour(&start) * 60 + chrono::Timelike::minute(&start);
    let phase = (minute / history.interval_minutes()) as usize;
    let mut sums = vec![0.0; period * c];
    let mut counts = vec![0usize; period * c];
    for t in 0..history.steps() {
        let slot = (phase + t) % period;
        for ch in 0..c {
            let v = history.get(t, node, ch);
            if v.is_finite() {
                sums[ch * period + slot] += v;
                counts[ch * period + slot] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect()
}

/// Pearson correlation; zero when either side is constant.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
