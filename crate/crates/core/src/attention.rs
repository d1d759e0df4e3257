//! Rectified linear self-attention and its spatial, temporal and
//! delay-aware variants.
//!
//! The free functions on plain tensors (`project_qkv`, `scaled_scores`,
//! `relsa`, `encov`, ...) evaluate one slice at a time. [`head_forward`]
//! records the same computation on a [`Graph`] for a whole `T×N×d` sample,
//! batching over time slices (spatial kinds) or node slices (temporal).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Bindings, ParamId, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Default look-back window of the delay-aware keys.
pub const DEFAULT_TAU: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Per time slice over nodes, geo-masked.
    Ressa,
    /// Per node slice over time, unmasked.
    Retsa,
    /// Per time slice over nodes with delay-aware keys, sem-masked.
    Redasa,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Ressa => "ressa",
            AttentionKind::Retsa => "retsa",
            AttentionKind::Redasa => "redasa",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ressa" => Ok(AttentionKind::Ressa),
            "retsa" => Ok(AttentionKind::Retsa),
            "redasa" => Ok(AttentionKind::Redasa),
            other => Err(Error::Config(format!(
                "unknown attention kind {other:?} (expected ressa, retsa or redasa)"
            ))),
        }
    }
}

/// Switches shared by every head of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOptions {
    /// ReLU + RMSNorm weights when true, masked softmax otherwise.
    pub rectified: bool,
    /// Add the convolution of V.
    pub encov: bool,
    pub eps: f64,
    pub tau: usize,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            rectified: true,
            encov: true,
            eps: 1e-8,
            tau: DEFAULT_TAU,
        }
    }
}

/// Parameter handles of one attention head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// RMSNorm gain, `d₀` entries.
    pub gain: ParamId,
    /// `1×1×3×3`
    pub encov: ParamId,
    /// One-element gate, ReDASA heads only.
    pub delay_gate: Option<ParamId>,
}

impl HeadParams {
    /// Glorot projections `d_in×d₀`, unit gain, Glorot 3×3 kernel, gate 0.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d0: usize,
        delay: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut proj = |name: &str, rng: &mut Rng| {
            store.add(format!("{prefix}.{name}"), glorot(&[d_in, d0], d_in, d0, rng))
        };
        let w_q = proj("w_q", rng);
        let w_k = proj("w_k", rng);
        let w_v = proj("w_v", rng);
        let gain = store.add(format!("{prefix}.gain"), Tensor::full(&[d0], 1.0));
        let encov = store.add(format!("{prefix}.encov"), glorot(&[1, 1, 3, 3], 9, 9, rng));
        let delay_gate = delay.then(|| store.add(format!("{prefix}.delay_gate"), Tensor::zeros(&[1])));
        HeadParams {
            w_q,
            w_k,
            w_v,
            gain,
            encov,
            delay_gate,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_q, self.w_k, self.w_v, self.gain, self.encov];
        v.extend(self.delay_gate);
        v
    }
}

pub fn project_qkv(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((tensor::matmul(x, w_q)?, tensor::matmul(x, w_k)?, tensor::matmul(x, w_v)?))
}

/// `A = QKᵀ/√d₀`.
pub fn scaled_scores(q: &Tensor, k: &Tensor, d0: usize) -> Result<Tensor> {
    let s = tensor::matmul(q, &k.transpose()?)?;
    let c = 1.0 / (d0 as f64).sqrt();
    Ok(s.map(|v| v * c))
}

/// `softmax(QKᵀ/√d₀) V` with masked keys excluded. Rows with no unmasked key
/// come back as zero rows and are listed in the second return value.
pub fn vanilla_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Vec<usize>)> {
    let a = scaled_scores(q, k, q.last_dim())?;
    let (w, empty) = tensor::softmax_rows(&a, mask)?;
    Ok((tensor::matmul(&w, v)?, empty))
}

/// `ReLU(A ⊙ M)`.
pub fn rectified_weights(a: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let masked = match mask {
        Some(m) => a.zip_map(m, |x, m| x * m)?,
        None => a.clone(),
    };
    Ok(tensor::relu(&masked))
}

/// `rms_norm(ReLU(A ⊙ M) · V, g, eps)`.
pub fn relsa(a: &Tensor, v: &Tensor, mask: Option<&Tensor>, g: &Tensor, eps: f64) -> Result<Tensor> {
    let w = rectified_weights(a, mask)?;
    tensor::rms_norm(&tensor::matmul(&w, v)?, g, eps)
}

/// `V` (`L×d₀`) convolved as a one-channel image with a 3×3 kernel, padding 1.
pub fn encov(v: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, d0) = v.dims2("encov input")?;
    if kernel.len() != 9 {
        return Err(Error::dim(format!("encov kernel must be 3×3, got {:?}", kernel.shape())));
    }
    let img = v.reshape(&[1, l, d0])?;
    let k = kernel.reshape(&[1, 1, 3, 3])?;
    tensor::conv2d(&img, &k, 1)?.reshape(&[l, d0])
}

/// `T×T` matrix averaging the previous `min(t, tau)` rows into row `t`.
pub fn delay_window_matrix(t: usize, tau: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for row in 0..t {
        let span = row.min(tau);
        for col in row - span..row {
            m.set(&[row, col], 1.0 / span as f64);
        }
    }
    m
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Keys `K̂_t = (x_t + σ(gate) · mean(x_{t−tau..t−1})) · W_K` for every `t`,
/// stacked as `T×N×d₀`. The mean runs over the steps that exist, so the
/// first step uses plain keys.
pub fn delay_aware_keys(x: &Tensor, w_k: &Tensor, gate: f64, tau: usize) -> Result<Tensor> {
    let (t, n, d) = x.dims3("delay_aware_keys input")?;
    let s = sigmoid(gate);
    let avg = tensor::matmul(&delay_window_matrix(t, tau), &x.reshape(&[t, n * d])?)?;
    let shifted = x.zip_map(&avg.reshape(&[t, n, d])?, |a, m| a + s * m)?;
    let k = tensor::matmul(&shifted.reshape(&[t * n, d])?, w_k)?;
    k.reshape(&[t, n, w_k.shape()[1]])
}

/// Output and attention weights of one head on one sample.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `T×N×d₀`
    pub out: Var,
    /// `T×N×N` for spatial kinds, `N×T×T` for ReTSA.
    pub weights: Var,
}

/// One head over a whole `T×N×d_in` sample.
///
/// `mask` (`N×N`) applies to the spatial kinds and is ignored by ReTSA.
pub fn head_forward(
    g: &mut Graph,
    vars: &Bindings,
    p: &HeadParams,
    kind: AttentionKind,
    x: Var,
    mask: Option<&Tensor>,
    opts: &AttentionOptions,
) -> Result<HeadOutput> {
    let (t, n, d_in) = g.value(x).dims3("attention input")?;
    let w_shape = g.shape(vars.var(p.w_q)).to_vec();
    if w_shape[0] != d_in {
        return Err(Error::dim(format!(
            "head projection expects {} input features, got {:?}",
            w_shape[0],
            g.shape(x)
        )));
    }
    match kind {
        AttentionKind::Ressa => en_relsa(g, vars, p, x, x, mask, opts),
        AttentionKind::Retsa => {
            let xs = g.swap_leading(x)?;
            let h = en_relsa(g, vars, p, xs, xs, None, opts)?;
            let out = g.swap_leading(h.out)?;
            Ok(HeadOutput { out, weights: h.weights })
        }
        AttentionKind::Redasa => {
            let gate = p
                .delay_gate
                .ok_or_else(|| Error::Contract("ReDASA head without a delay gate".into()))?;
            let xk = if opts.tau == 0 {
                x
            } else {
                let flat = g.reshape(x, &[t, n * d_in])?;
                let window = g.constant(delay_window_matrix(t, opts.tau));
                let avg = g.matmul(window, flat)?;
                let avg = g.reshape(avg, &[t, n, d_in])?;
                let s = g.sigmoid(vars.var(gate));
                let avg = g.scale_by(avg, s)?;
                g.add(x, avg)?
            };
            en_relsa(g, vars, p, x, xk, mask, opts)
        }
    }
}

/// Batched EnReLSA: `x` and `xk` are `B×L×d_in`; queries and values come
/// from `x`, keys from `xk`.
fn en_relsa(
    g: &mut Graph,
    vars: &Bindings,
    p: &HeadParams,
    x: Var,
    xk: Var,
    mask: Option<&Tensor>,
    opts: &AttentionOptions,
) -> Result<HeadOutput> {
    let (b, l, d_in) = g.value(x).dims3("attention input")?;
    let d0 = g.shape(vars.var(p.w_q))[1];
    let project = |src: Var, w: ParamId, g: &mut Graph| -> Result<Var> {
        let flat = g.reshape(src, &[b * l, d_in])?;
        let y = g.matmul(flat, vars.var(w))?;
        g.reshape(y, &[b, l, d0])
    };
    let q = project(x, p.w_q, g)?;
    let k = project(xk, p.w_k, g)?;
    let v = project(x, p.w_v, g)?;
    let raw = g.batch_matmul(q, k, true)?;
    let scores = g.scale(raw, 1.0 / (d0 as f64).sqrt());

    let (weights, attended) = if opts.rectified {
        let masked = match mask {
            Some(m) => {
                let m = g.constant(m.clone());
                let m = g.expand(m, &[b, l, l])?;
                g.mul(scores, m)?
            }
            None => scores,
        };
        let w = g.relu(masked);
        let y = g.batch_matmul(w, v, false)?;
        (w, g.rms_norm(y, vars.var(p.gain), opts.eps)?)
    } else {
        let (w, _) = g.softmax(scores, mask)?;
        (w, g.batch_matmul(w, v, false)?)
    };

    let out = if opts.encov {
        let img = g.reshape(v, &[b, 1, l, d0])?;
        let c = g.conv2d(img, vars.var(p.encov), 1)?;
        let c = g.reshape(c, &[b, l, d0])?;
        g.add(attended, c)?
    } else {
        attended
    };
    Ok(HeadOutput { out, weights })
}
