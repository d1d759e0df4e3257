//! Encoder layer and output head.

use crate::attention::{head_forward, AttentionKind, AttentionOptions, HeadParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph::AttentionMasks;
use crate::params::{glorot, Bindings, ParamId, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::{Ablation, ModelConfig};

/// Attention weights captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    /// 1 for heads reading the layer input, 2 for the second stage of a
    /// criss-crossed stream.
    pub stage: usize,
    pub head: usize,
    pub kind: AttentionKind,
    /// `T×N×N` for spatial kinds, `N×T×T` for temporal.
    pub weights: Tensor,
}

/// A spatial→temporal or temporal→spatial stream: one stage-1 head and the
/// stage-2 head of the opposite type that consumes its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamParams {
    pub first: HeadParams,
    pub second: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    /// ReSSA then ReTSA.
    pub spatial: Vec<StreamParams>,
    /// ReTSA then ReSSA.
    pub temporal: Vec<StreamParams>,
    pub redasa: Vec<HeadParams>,
    /// `d×d` mixer.
    pub w_hat: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    /// `d×4d`
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    /// `4d×d`
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    /// `d×d_sk` skip tap and its bias.
    pub skip_w: ParamId,
    pub skip_b: ParamId,
}

impl LayerParams {
    pub fn init(store: &mut ParameterStore, index: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, d0) = (cfg.d, cfg.d0());
        let pre = format!("layer{index}");
        // without cross-wiring the second stage reads the d-wide layer input
        let d2 = if cfg.ablation == Ablation::NoCcds { d } else { d0 };
        let streams = |tag: &str, n: usize, store: &mut ParameterStore, rng: &mut Rng| {
            (0..n)
                .map(|i| StreamParams {
                    first: HeadParams::init(store, &format!("{pre}.{tag}{i}.first"), d, d0, false, rng),
                    second: HeadParams::init(store, &format!("{pre}.{tag}{i}.second"), d2, d0, false, rng),
                })
                .collect::<Vec<_>>()
        };
        let spatial = streams("ressa", cfg.h_ressa, store, rng);
        let temporal = streams("retsa", cfg.h_retsa, store, rng);
        let redasa = (0..cfg.h_redasa)
            .map(|i| HeadParams::init(store, &format!("{pre}.redasa{i}"), d, d0, true, rng))
            .collect();
        let w_hat = store.add(format!("{pre}.w_hat"), glorot(&[d, d], d, d, rng));
        let ln1_g = store.add(format!("{pre}.ln1.g"), Tensor::full(&[d], 1.0));
        let ln1_b = store.add(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
        let ln2_g = store.add(format!("{pre}.ln2.g"), Tensor::full(&[d], 1.0));
        let ln2_b = store.add(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
        let ffn_w1 = store.add(format!("{pre}.ffn.w1"), glorot(&[d, 4 * d], d, 4 * d, rng));
        let ffn_b1 = store.add(format!("{pre}.ffn.b1"), Tensor::zeros(&[4 * d]));
        let ffn_w2 = store.add(format!("{pre}.ffn.w2"), glorot(&[4 * d, d], 4 * d, d, rng));
        let ffn_b2 = store.add(format!("{pre}.ffn.b2"), Tensor::zeros(&[d]));
        let skip_w = store.add(format!("{pre}.skip.w"), glorot(&[d, cfg.d_sk], d, cfg.d_sk, rng));
        let skip_b = store.add(format!("{pre}.skip.b"), Tensor::zeros(&[cfg.d_sk]));
        LayerParams {
            spatial,
            temporal,
            redasa,
            w_hat,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            skip_w,
            skip_b,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadParams> {
        self.spatial
            .iter()
            .chain(&self.temporal)
            .flat_map(|s| [&s.first, &s.second])
            .chain(&self.redasa)
    }
}

/// `x·W + b` over the last axis of a rank-3 tensor.
pub(crate) fn affine(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (t, n, d) = g.value(x).dims3("affine input")?;
    let out = g.shape(w)[1];
    let flat = g.reshape(x, &[t * n, d])?;
    let mut y = g.matmul(flat, w)?;
    if let Some(b) = b {
        let bb = g.expand(b, &[t * n, out])?;
        y = g.add(y, bb)?;
    }
    g.reshape(y, &[t, n, out])
}

/// Everything a layer reads besides its own parameters.
pub(crate) struct LayerEnv<'a> {
    pub vars: &'a Bindings,
    pub masks: &'a AttentionMasks,
    pub opts: &'a AttentionOptions,
    pub cross: bool,
    pub eps: f64,
}

/// Output of both criss-crossed streams: (ReSSA-first, ReTSA-first), each a
/// list of `T×N×d₀` head outputs.
pub(crate) fn criss_cross_streams(
    g: &mut Graph,
    env: &LayerEnv<'_>,
    lp: &LayerParams,
    u: Var,
    mut rec: Option<&mut Vec<(usize, usize, AttentionKind, Var)>>,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let run = |streams: &[StreamParams],
                   kinds: (AttentionKind, AttentionKind),
                   g: &mut Graph,
                   rec: &mut Option<&mut Vec<(usize, usize, AttentionKind, Var)>>|
     -> Result<Vec<Var>> {
        let mask_of = |k: AttentionKind| match k {
            AttentionKind::Retsa => None,
            _ => Some(&env.masks.geo),
        };
        let mut outs = Vec::with_capacity(streams.len());
        for (i, s) in streams.iter().enumerate() {
            let a = head_forward(g, env.vars, &s.first, kinds.0, u, mask_of(kinds.0), env.opts)?;
            let src = if env.cross { a.out } else { u };
            let b = head_forward(g, env.vars, &s.second, kinds.1, src, mask_of(kinds.1), env.opts)?;
            if let Some(r) = rec.as_deref_mut() {
                r.push((1, i, kinds.0, a.weights));
                r.push((2, i, kinds.1, b.weights));
            }
            outs.push(if env.cross { b.out } else { g.add(a.out, b.out)? });
        }
        Ok(outs)
    };
    let ressa = run(&lp.spatial, (AttentionKind::Ressa, AttentionKind::Retsa), g, &mut rec)?;
    let retsa = run(&lp.temporal, (AttentionKind::Retsa, AttentionKind::Ressa), g, &mut rec)?;
    Ok((ressa, retsa))
}

/// Concatenate head outputs (ReSSA, ReDASA, ReTSA order) and apply `Ŵ`.
pub fn restsa_mix(g: &mut Graph, head_outputs: &[Var], w_hat: Var) -> Result<Var> {
    let cat = g.concat_last(head_outputs)?;
    let width = *g.shape(cat).last().unwrap_or(&0);
    if width != g.shape(w_hat)[0] {
        return Err(Error::dim(format!(
            "concatenated heads are {width} wide but the mixer expects {}",
            g.shape(w_hat)[0]
        )));
    }
    affine(g, cat, w_hat, None)
}

/// `u = LN(x)`, `y₁ = mix(heads(u))`, `out = FFN(LN(y₁ + x)) + y₁ + x`.
pub(crate) fn encoder_layer_forward(
    g: &mut Graph,
    env: &LayerEnv<'_>,
    lp: &LayerParams,
    x: Var,
    mut rec: Option<&mut Vec<(usize, usize, AttentionKind, Var)>>,
) -> Result<Var> {
    let v = |id: ParamId| env.vars.var(id);
    let u = g.layer_norm(x, v(lp.ln1_g), v(lp.ln1_b), env.eps)?;
    let (ressa, retsa) = criss_cross_streams(g, env, lp, u, rec.as_deref_mut())?;
    let mut heads = ressa;
    for (i, p) in lp.redasa.iter().enumerate() {
        let h = head_forward(g, env.vars, p, AttentionKind::Redasa, u, Some(&env.masks.sem), env.opts)?;
        if let Some(r) = rec.as_deref_mut() {
            r.push((1, i, AttentionKind::Redasa, h.weights));
        }
        heads.push(h.out);
    }
    heads.extend(retsa);
    let y1 = restsa_mix(g, &heads, v(lp.w_hat))?;
    let res = g.add(y1, x)?;
    let z = g.layer_norm(res, v(lp.ln2_g), v(lp.ln2_b), env.eps)?;
    let hidden = affine(g, z, v(lp.ffn_w1), Some(v(lp.ffn_b1)))?;
    let hidden = g.relu(hidden);
    let ffn = affine(g, hidden, v(lp.ffn_w2), Some(v(lp.ffn_b2)))?;
    g.add(ffn, res)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputHeadParams {
    /// `h′×h` map along the time axis.
    pub conv1_w: ParamId,
    /// `h′`
    pub conv1_b: ParamId,
    /// `d_sk×C`
    pub conv2_w: ParamId,
    /// `C`
    pub conv2_b: ParamId,
}

impl OutputHeadParams {
    pub fn init(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (h, hp, c) = (cfg.input_len, cfg.horizon, cfg.channels);
        OutputHeadParams {
            conv1_w: store.add("out.conv1.w", glorot(&[hp, h], h, hp, rng)),
            conv1_b: store.add("out.conv1.b", Tensor::zeros(&[hp])),
            conv2_w: store.add("out.conv2.w", glorot(&[cfg.d_sk, c], cfg.d_sk, c, rng)),
            conv2_b: store.add("out.conv2.b", Tensor::zeros(&[c])),
        }
    }
}

/// Sum the per-layer skip taps into `Y_hid`, map time `h→h′`, then features
/// `d_sk→C`.
pub(crate) fn output_head(
    g: &mut Graph,
    vars: &Bindings,
    layers: &[(Var, &LayerParams)],
    p: &OutputHeadParams,
) -> Result<Var> {
    let mut hid: Option<Var> = None;
    for &(out, lp) in layers {
        let tap = affine(g, out, vars.var(lp.skip_w), Some(vars.var(lp.skip_b)))?;
        hid = Some(match hid {
            Some(h) => g.add(h, tap)?,
            None => tap,
        });
    }
    let hid = hid.ok_or_else(|| Error::Contract("output head needs at least one layer".into()))?;
    let (t, n, dsk) = g.value(hid).dims3("hidden state")?;
    let w1 = vars.var(p.conv1_w);
    let hp = g.shape(w1)[0];
    let flat = g.reshape(hid, &[t, n * dsk])?;
    let y = g.matmul(w1, flat)?;
    let b1 = g.reshape(vars.var(p.conv1_b), &[hp, 1])?;
    let b1 = g.expand(b1, &[hp, n * dsk])?;
    let y = g.add(y, b1)?;
    let y = g.reshape(y, &[hp, n, dsk])?;
    affine(g, y, vars.var(p.conv2_w), Some(vars.var(p.conv2_b)))
}
