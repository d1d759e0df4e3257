//! Data embedding: raw-feature projection, Laplacian spatial embedding,
//! weekly and daily lookup tables and sinusoidal positional encoding, summed
//! with broadcasting into one `T×N×d` tensor.

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, uniform, Bindings, ParamId, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use crate::series::TrafficTensor;

pub const MINUTES_PER_DAY: u32 = 1440;

/// Weekday (Monday = 1 … Sunday = 7) and minute of day (1 … 1440).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalIndex {
    pub week: u32,
    pub day: u32,
}

impl TemporalIndex {
    pub fn at(ts: NaiveDateTime) -> Self {
        TemporalIndex {
            week: ts.weekday().number_from_monday(),
            day: ts.hour() * 60 + ts.minute() + 1,
        }
    }
}

/// Indices of the timestamp `t0 + step · interval`.
pub fn temporal_indices(t0: NaiveDateTime, step: usize, interval_minutes: u32) -> Result<TemporalIndex> {
    if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
        return Err(Error::Config(format!(
            "interval of {interval_minutes} minutes does not divide a day"
        )));
    }
    let ts = t0 + Duration::minutes(step as i64 * interval_minutes as i64);
    Ok(TemporalIndex::at(ts))
}

/// Sinusoidal encoding for positions `t = 1..=len`:
/// `sin(t / 10000^(2i/d))` at even `i`, `cos(t / 10000^(2(i-1)/d))` at odd `i`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d < 2 {
        return Err(Error::Config(format!("positional encoding needs d >= 2, got {d}")));
    }
    Ok(Tensor::from_fn(&[len, d], |k| {
        let t = (k / d + 1) as f64;
        let i = k % d;
        if i.is_multiple_of(2) {
            (t / 10000f64.powf(2.0 * i as f64 / d as f64)).sin()
        } else {
            (t / 10000f64.powf(2.0 * (i - 1) as f64 / d as f64)).cos()
        }
    }))
}

/// Parameter handles for the embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingParams {
    /// `C×d`
    pub w_data: ParamId,
    /// `k×d`
    pub w_spe: ParamId,
    /// `7×d`, row `w−1` for weekday `w`
    pub table_week: ParamId,
    /// `1440×d`, row `m−1` for minute index `m`
    pub table_day: ParamId,
}

impl EmbeddingParams {
    pub fn init(store: &mut ParameterStore, channels: usize, k: usize, d: usize, rng: &mut Rng) -> Self {
        let limit = 1.0 / (d as f64).sqrt();
        EmbeddingParams {
            w_data: store.add("embed.w_data", glorot(&[channels, d], channels, d, rng)),
            w_spe: store.add("embed.w_spe", glorot(&[k, d], k, d, rng)),
            table_week: store.add("embed.table_week", uniform(&[7, d], limit, rng)),
            table_day: store.add("embed.table_day", uniform(&[MINUTES_PER_DAY as usize, d], limit, rng)),
        }
    }
}

/// `X_emb = X·W_data ⊕₁ S·W_spe ⊕₂ X_w ⊕₂ X_d ⊕₂ X_tpe`.
///
/// `x_raw` is `T×N×C`, `spe_input` is `N×k`, `indices` has one entry per
/// time step. `⊕₁` broadcasts the `N×d` spatial term over time and `⊕₂`
/// broadcasts the `T×d` temporal terms over nodes.
pub fn embed(
    g: &mut Graph,
    vars: &Bindings,
    p: &EmbeddingParams,
    x_raw: Var,
    spe_input: Var,
    indices: &[TemporalIndex],
) -> Result<Var> {
    let (t, n, c) = g.value(x_raw).dims3("embed input")?;
    let (ns, _) = g.value(spe_input).dims2("spatial embedding input")?;
    if ns != n || indices.len() != t {
        return Err(Error::dim(format!(
            "embed: input {:?}, spatial input {:?}, {} temporal indices",
            g.shape(x_raw),
            g.shape(spe_input),
            indices.len()
        )));
    }
    let d = g.shape(vars.var(p.w_data))[1];
    let flat = g.reshape(x_raw, &[t * n, c])?;
    let data = g.matmul(flat, vars.var(p.w_data))?;
    let data = g.reshape(data, &[t, n, d])?;

    let spe = g.matmul(spe_input, vars.var(p.w_spe))?;
    let spe = g.expand(spe, &[t, n, d])?;

    let week_rows: Vec<usize> = indices.iter().map(|ix| ix.week as usize - 1).collect();
    let day_rows: Vec<usize> = indices.iter().map(|ix| ix.day as usize - 1).collect();
    let week = g.gather_rows(vars.var(p.table_week), &week_rows)?;
    let day = g.gather_rows(vars.var(p.table_day), &day_rows)?;
    let pe = g.constant(positional_encoding(t, d)?);
    let temporal = g.add(week, day)?;
    let temporal = g.add(temporal, pe)?;
    let temporal = g.reshape(temporal, &[t, 1, d])?;
    let temporal = g.expand(temporal, &[t, n, d])?;

    let out = g.add(data, spe)?;
    g.add(out, temporal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn monday() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    #[test]
    fn temporal_index_anchors() {
        assert_eq!(temporal_indices(monday(), 0, 5).unwrap(), TemporalIndex { week: 1, day: 1 });
        assert_eq!(temporal_indices(monday(), 1, 5).unwrap(), TemporalIndex { week: 1, day: 6 });
        let late = monday().with_hour(23).unwrap().with_minute(55).unwrap();
        assert_eq!(temporal_indices(late, 0, 5).unwrap().day, 1436);
        // Sunday
        assert_eq!(temporal_indices(monday(), 6 * 288, 5).unwrap().week, 7);
        assert!(matches!(temporal_indices(monday(), 0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn positional_encoding_formula() {
        let pe = positional_encoding(1, 2).unwrap();
        assert_eq!(pe.data(), &[1f64.sin(), 1f64.cos()]);
        let pe = positional_encoding(12, 8).unwrap();
        for t in 0..12 {
            assert_eq!(pe.get(&[t, 0]), ((t + 1) as f64).sin());
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, positional_encoding(12, 8).unwrap());
        assert!(positional_encoding(3, 1).is_err());
    }

    struct Fixture {
        store: ParameterStore,
        p: EmbeddingParams,
        x: Tensor,
        spe: Tensor,
        idx: Vec<TemporalIndex>,
    }

    fn fixture(seed: u64) -> Fixture {
        let (t, n, c, k, d) = (3, 4, 2, 2, 4);
        let mut rng = Rng::new(seed);
        let mut store = ParameterStore::new();
        let p = EmbeddingParams::init(&mut store, c, k, d, &mut rng);
        let x = Tensor::from_fn(&[t, n, c], |_| rng.standard_normal());
        let spe = Tensor::from_fn(&[n, k], |_| rng.standard_normal());
        let idx = (0..t).map(|s| temporal_indices(monday(), s * 100, 5).unwrap()).collect();
        Fixture { store, p, x, spe, idx }
    }

    fn run(f: &Fixture) -> Tensor {
        let mut g = Graph::new();
        let vars = f.store.bind(&mut g);
        let x = g.constant(f.x.clone());
        let s = g.constant(f.spe.clone());
        let out = embed(&mut g, &vars, &f.p, x, s, &f.idx).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn embed_matches_nested_loop_oracle() {
        let f = fixture(3);
        let out = run(&f);
        assert_eq!(out.shape(), &[3, 4, 4]);
        let pe = positional_encoding(3, 4).unwrap();
        let (wd, ws) = (f.store.get(f.p.w_data), f.store.get(f.p.w_spe));
        let (tw, td) = (f.store.get(f.p.table_week), f.store.get(f.p.table_day));
        for t in 0..3 {
            for n in 0..4 {
                for j in 0..4 {
                    let mut v = 0.0;
                    for c in 0..2 {
                        v += f.x.get(&[t, n, c]) * wd.get(&[c, j]);
                    }
                    for k in 0..2 {
                        v += f.spe.get(&[n, k]) * ws.get(&[k, j]);
                    }
                    v += tw.get(&[f.idx[t].week as usize - 1, j]);
                    v += td.get(&[f.idx[t].day as usize - 1, j]);
                    v += pe.get(&[t, j]);
                    assert!((out.get(&[t, n, j]) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_components_and_broadcast() {
        let mut f = fixture(4);
        for id in [f.p.w_spe, f.p.table_week, f.p.table_day] {
            f.store.get_mut(id).data_mut().fill(0.0);
        }
        let out = run(&f);
        let pe = positional_encoding(3, 4).unwrap();
        let wd = f.store.get(f.p.w_data).clone();
        let flat = f.x.reshape(&[12, 2]).unwrap();
        let direct = crate::tensor::matmul(&flat, &wd).unwrap();
        for t in 0..3 {
            for n in 0..4 {
                for j in 0..4 {
                    let expect = direct.get(&[t * 4 + n, j]) + pe.get(&[t, j]);
                    assert!((out.get(&[t, n, j]) - expect).abs() < 1e-15);
                }
            }
        }
        // raw input zero too: every node sees the same vector at fixed t
        f.x = Tensor::zeros(&[3, 4, 2]);
        let out = run(&f);
        for t in 0..3 {
            for n in 1..4 {
                for j in 0..4 {
                    assert_eq!(out.get(&[t, n, j]), out.get(&[t, 0, j]));
                }
            }
        }
    }

    #[test]
    fn absent_weekday_rows_get_no_gradient() {
        let f = fixture(5);
        let mut g = Graph::new();
        let vars = f.store.bind(&mut g);
        let x = g.constant(f.x.clone());
        let s = g.constant(f.spe.clone());
        let out = embed(&mut g, &vars, &f.p, x, s, &f.idx).unwrap();
        let sq = g.mul(out, out).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let grads = f.store.gradients(&g, &vars);
        let gw = grads.get(f.p.table_week);
        let present: Vec<usize> = f.idx.iter().map(|i| i.week as usize - 1).collect();
        for r in 0..7 {
            let row = &gw.data()[r * 4..(r + 1) * 4];
            if present.contains(&r) {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "row {r}");
            }
        }
    }

    #[test]
    fn linear_in_raw_input_with_frozen_tables() {
        let f = fixture(6);
        let mut f2 = fixture(6);
        let mut f3 = fixture(6);
        let other = Tensor::from_fn(&[3, 4, 2], |i| (i as f64 * 0.37).sin());
        f2.x = other.clone();
        f3.x = f.x.zip_map(&other, |a, b| 2.0 * a + 3.0 * b).unwrap();
        let (a, b, c) = (run(&f), run(&f2), run(&fixture(6)));
        // affine in x: E(2x+3y) = 2E(x) + 3E(y) - 4E(0)
        let mut f0 = fixture(6);
        f0.x = Tensor::zeros(&[3, 4, 2]);
        let z = run(&f0);
        let lhs = run(&f3);
        for i in 0..lhs.len() {
            let rhs = 2.0 * a.data()[i] + 3.0 * b.data()[i] - 4.0 * z.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
        assert_eq!(a, c);
    }
}
