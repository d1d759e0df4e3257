//! The full forecaster: embedding, stacked encoder layers with skip taps, and
//! the two-map output head.

mod checkpoint;
mod config;
mod layer;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use config::{Ablation, ModelConfig};
pub use layer::{restsa_mix, AttentionRecord, LayerParams, OutputHeadParams, StreamParams};

use crate::attention::AttentionKind;
use crate::autodiff::{Graph, Var};
use crate::embedding::{embed, EmbeddingParams, TemporalIndex};
use crate::error::{Error, Result};
use crate::graph::{
    geo_mask, laplacian_embedding, normalized_laplacian, sem_mask, symmetric_eigen, AttentionMasks,
    RoadNetwork,
};
use crate::params::{Bindings, ParameterStore};
use crate::rng::Rng;
use crate::series::TrafficTensor;
use crate::tensor::Tensor;

use layer::{encoder_layer_forward, output_head, LayerEnv};

/// Per-network inputs shared by every sample: Laplacian embedding and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext {
    /// `N×k`
    pub spe: Tensor,
    pub masks: AttentionMasks,
}

impl GraphContext {
    /// Spectral embedding and masks for `net`; the semantic mask is built
    /// from `history` (normally the training split).
    pub fn build(net: &RoadNetwork, history: &TrafficTensor, cfg: &ModelConfig) -> Result<Self> {
        if history.nodes() != net.node_count() {
            return Err(Error::Data(format!(
                "series has {} nodes but the network has {}",
                history.nodes(),
                net.node_count()
            )));
        }
        let lap = normalized_laplacian(net.adjacency())?;
        let spe = laplacian_embedding(&symmetric_eigen(&lap)?, cfg.k)?;
        let top_k = cfg.sem_top_k.clamp(1, net.node_count());
        Ok(GraphContext {
            spe,
            masks: AttentionMasks {
                geo: geo_mask(net.adjacency(), cfg.geo_hops)?,
                sem: sem_mask(history, top_k)?,
            },
        })
    }

    pub fn nodes(&self) -> usize {
        self.spe.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub embedding: EmbeddingParams,
    pub layers: Vec<LayerParams>,
    pub head: OutputHeadParams,
}

/// Graph nodes produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `h′×N×C`
    pub prediction: Var,
    /// Attention weight nodes; empty unless requested.
    pub attention: Vec<AttentionTap>,
}

/// Where an attention weight node came from.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTap {
    pub layer: usize,
    pub stage: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub weights: Var,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParameterStore::new();
        let embedding = EmbeddingParams::init(&mut store, config.channels, config.k, config.d, &mut rng);
        let layers: Vec<LayerParams> = (0..config.layers)
            .map(|i| LayerParams::init(&mut store, i, &config, &mut rng))
            .collect();
        let head = OutputHeadParams::init(&mut store, &config, &mut rng);
        if config.ablation == Ablation::NoEncov {
            let kernels: Vec<_> = layers.iter().flat_map(|l| l.heads().map(|h| h.encov)).collect();
            for id in kernels {
                store.get_mut(id).data_mut().fill(0.0);
                store.freeze(id);
            }
        }
        Ok(Model {
            config,
            store,
            embedding,
            layers,
            head,
        })
    }

    /// Record a forward pass for one `h×N×C` window.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &Bindings,
        ctx: &GraphContext,
        window: &Tensor,
        indices: &[TemporalIndex],
        record: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (t, n, c) = window.dims3("model input")?;
        if t != cfg.input_len || c != cfg.channels || n != ctx.nodes() {
            return Err(Error::dim(format!(
                "model expects {}×{}×{} windows, got {:?}",
                cfg.input_len,
                ctx.nodes(),
                cfg.channels,
                window.shape()
            )));
        }
        let x = g.constant(window.clone());
        let spe = g.constant(ctx.spe.clone());
        let mut h = embed(g, vars, &self.embedding, x, spe, indices)?;
        let opts = cfg.attention_options();
        let env = LayerEnv {
            vars,
            masks: &ctx.masks,
            opts: &opts,
            cross: cfg.ablation != Ablation::NoCcds,
            eps: cfg.eps,
        };
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::new();
        for (li, lp) in self.layers.iter().enumerate() {
            let mut rec = Vec::new();
            h = encoder_layer_forward(g, &env, lp, h, record.then_some(&mut rec))?;
            attention.extend(rec.into_iter().map(|(stage, head, kind, weights)| AttentionTap {
                layer: li,
                stage,
                head,
                kind,
                weights,
            }));
            taps.push((h, lp));
        }
        let prediction = output_head(g, vars, &taps, &self.head)?;
        Ok(ForwardPass { prediction, attention })
    }

    /// Prediction for one window without keeping the tape.
    pub fn predict(&self, ctx: &GraphContext, window: &Tensor, indices: &[TemporalIndex]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.store.bind_constants(&mut g);
        let fp = self.forward(&mut g, &vars, ctx, window, indices, false)?;
        Ok(g.value(fp.prediction).clone())
    }

    /// Prediction plus every attention weight tensor.
    pub fn predict_with_attention(
        &self,
        ctx: &GraphContext,
        window: &Tensor,
        indices: &[TemporalIndex],
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let vars = self.store.bind_constants(&mut g);
        let fp = self.forward(&mut g, &vars, ctx, window, indices, true)?;
        let records = fp
            .attention
            .iter()
            .map(|t| AttentionRecord {
                layer: t.layer,
                stage: t.stage,
                head: t.head,
                kind: t.kind,
                weights: g.value(t.weights).clone(),
            })
            .collect();
        Ok((g.value(fp.prediction).clone(), records))
    }
}
