//! Seeded synthetic traffic: a double-peak daily profile, Gaussian noise and
//! Poisson congestion events that reach neighboring nodes after a delay.

use std::f64::consts::PI;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::embedding::MINUTES_PER_DAY;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::graph::RoadNetwork;
use crate::rng::Rng;
use crate::series::TrafficTensor;
use crate::tensor::Tensor;

use super::bundle::{Bundle, TIME_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Nodes `0..N` in a line.
    Path,
    /// `rows×cols` lattice; `nodes` must equal `rows·cols`.
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub topology: Topology,
    pub days: usize,
    pub interval_minutes: u32,
    /// ISO-8601 timestamp of step 0.
    pub start_time: String,
    pub channels: usize,
    /// Flow at the daily troughs.
    pub base_level: f64,
    /// Height of the two daily peaks above the base level.
    pub amplitude: f64,
    pub noise_sigma: f64,
    /// Expected congestion events per node per day.
    pub event_rate: f64,
    pub event_magnitude: f64,
    /// Steps an event lasts.
    pub event_duration: usize,
    /// Steps before an event reaches the neighbors of its node.
    pub delay: usize,
    /// Magnitude factor of the propagated copy.
    pub propagation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 12,
            topology: Topology::Path,
            days: 3,
            interval_minutes: 5,
            start_time: "2024-01-01T00:00:00".into(),
            channels: 1,
            base_level: 20.0,
            amplitude: 100.0,
            noise_sigma: 2.0,
            event_rate: 2.0,
            event_magnitude: 40.0,
            event_duration: 3,
            delay: 3,
            propagation: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_string(path)?)
    }

    pub fn steps_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes == 0 || self.days == 0 || self.channels == 0 || self.event_duration == 0 {
            return bad("nodes, days, channels and event_duration must be positive".into());
        }
        if self.interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(self.interval_minutes) {
            return bad(format!("interval_minutes must divide {MINUTES_PER_DAY}, got {}", self.interval_minutes));
        }
        if self.delay == 0 {
            return bad("delay must be at least 1 step".into());
        }
        let positive = [("base_level", self.base_level), ("amplitude", self.amplitude)];
        let non_negative = [
            ("noise_sigma", self.noise_sigma),
            ("event_rate", self.event_rate),
            ("event_magnitude", self.event_magnitude),
            ("propagation", self.propagation),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if let Topology::Grid { rows, cols } = self.topology {
            if rows * cols != self.nodes {
                return bad(format!("grid {rows}×{cols} does not hold {} nodes", self.nodes));
            }
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<NaiveDateTime> {
        NaiveDateTime::parse_from_str(&self.start_time, TIME_FORMAT)
            .map_err(|e| Error::Config(format!("start_time {:?}: {e}", self.start_time)))
    }

    pub fn network(&self) -> Result<RoadNetwork> {
        match self.topology {
            Topology::Path => RoadNetwork::path(self.nodes),
            Topology::Grid { rows, cols } => RoadNetwork::grid(rows, cols),
        }
    }
}

/// Daily profile with peaks at 06:00 and 18:00 and troughs at midnight and
/// noon.
pub fn daily_profile(minute_of_day: u32, base_level: f64, amplitude: f64) -> f64 {
    let phase = 2.0 * PI * minute_of_day as f64 / MINUTES_PER_DAY as f64;
    base_level + amplitude * 0.5 * (1.0 - (2.0 * phase).cos())
}

/// Generate a bundle from `spec`. Node scales, noise and events come from
/// separate seeded streams, so turning one off leaves the others unchanged.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Bundle> {
    spec.validate()?;
    let network = spec.network()?;
    let (n, c) = (spec.nodes, spec.channels);
    let steps = spec.days * spec.steps_per_day();
    let root = Rng::new(spec.seed);
    let mut scale_rng = root.fork(0);
    let mut noise_rng = root.fork(1);
    let mut event_rng = root.fork(2);

    let scale: Vec<f64> = (0..n * c).map(|_| scale_rng.uniform(0.8, 1.2)).collect();
    let mut events = vec![0.0; steps * n];
    let adj = network.adjacency();
    let rate = spec.event_rate * spec.interval_minutes as f64 / MINUTES_PER_DAY as f64;
    let mut add = |from: usize, node: usize, magnitude: f64| {
        for t in from..(from + spec.event_duration).min(steps) {
            events[t * n + node] += magnitude;
        }
    };
    for t in 0..steps {
        for i in 0..n {
            let k = event_rng.poisson(rate) as f64;
            if k == 0.0 {
                continue;
            }
            let m = k * spec.event_magnitude;
            add(t, i, m);
            for j in (0..n).filter(|&j| adj.get(&[i, j]) != 0.0) {
                add(t + spec.delay, j, spec.propagation * m);
            }
        }
    }

    let mut data = Vec::with_capacity(steps * n * c);
    for t in 0..steps {
        let minute = ((t as u64 * spec.interval_minutes as u64) % MINUTES_PER_DAY as u64) as u32;
        let base = daily_profile(minute, spec.base_level, spec.amplitude);
        for i in 0..n {
            for k in 0..c {
                let v = base * scale[i * c + k] + noise_rng.normal(0.0, spec.noise_sigma) + events[t * n + i];
                data.push(v.max(0.0));
            }
        }
    }
    let series = TrafficTensor::new(Tensor::new(&[steps, n, c], data)?, spec.interval_minutes, spec.start()?)?;
    Bundle::new(network, series)
}
