//! Object-level representation: a dual-stream encoder for the background
//! object, a semantic encoder for the operated object, and inter-object
//! cross-attention pooled into one relational feature vector.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{CrossAttention, Graph, LayerNorm, Mlp, ParameterStore, Var};
use crate::error::{HgmError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// Hidden widths of the coordinate encoder.
    pub spatial_hidden: Vec<usize>,
    /// Hidden widths of both descriptor encoders.
    pub semantic_hidden: Vec<usize>,
    /// Coordinate stream and its cross-attention; off for the no-PE ablation.
    pub enable_dual_stream: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            spatial_hidden: vec![64],
            semantic_hidden: vec![64],
            enable_dual_stream: true,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Pre-norm cross-attention block with a residual around it.
#[derive(Clone, Debug)]
struct AttentionBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: CrossAttention,
}

impl AttentionBlock {
    fn new(store: &mut ParameterStore, name: &str, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), cfg.model_dim)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), cfg.model_dim)?,
            attn: CrossAttention::new(store, &format!("{name}.attn"), cfg.model_dim, cfg.heads, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, queries: Var, context: Var, batch: usize) -> Result<Var> {
        let q = self.norm_q.forward(g, store, queries)?;
        let kv = self.norm_kv.forward(g, store, context)?;
        let (out, _) = self.attn.forward(g, store, q, kv, batch)?;
        g.add(queries, out)
    }
}

/// Fusion parameters live in a shared [`ParameterStore`]; this struct holds
/// their handles.
#[derive(Debug)]
pub struct FusionModule {
    cfg: FusionConfig,
    operated_width: usize,
    background_width: usize,
    background_semantic: Mlp,
    background_spatial: Option<Mlp>,
    background_block: Option<AttentionBlock>,
    operated_semantic: Mlp,
    inter_block: AttentionBlock,
    coord_attention_calls: AtomicU64,
}

impl Clone for FusionModule {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            operated_width: self.operated_width,
            background_width: self.background_width,
            background_semantic: self.background_semantic.clone(),
            background_spatial: self.background_spatial.clone(),
            background_block: self.background_block.clone(),
            operated_semantic: self.operated_semantic.clone(),
            inter_block: self.inter_block.clone(),
            coord_attention_calls: AtomicU64::new(0),
        }
    }
}

impl FusionModule {
    /// Registers parameters under `fusion.*`. Descriptor widths are `d + 3`
    /// for each role. No coordinate-stream parameters exist when the dual
    /// stream is disabled.
    pub fn new(
        store: &mut ParameterStore,
        cfg: &FusionConfig,
        operated_width: usize,
        background_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.heads == 0 || !cfg.model_dim.is_multiple_of(cfg.heads) {
            return Err(HgmError::HeadSplit { dim: cfg.model_dim, heads: cfg.heads });
        }
        let d = cfg.model_dim;
        let background_semantic =
            Mlp::new(store, "fusion.bg_semantic", &widths(background_width, &cfg.semantic_hidden, d), rng)?;
        let (background_spatial, background_block) = if cfg.enable_dual_stream {
            (
                Some(Mlp::new(store, "fusion.bg_spatial", &widths(3, &cfg.spatial_hidden, d), rng)?),
                Some(AttentionBlock::new(store, "fusion.bg_block", cfg, rng)?),
            )
        } else {
            (None, None)
        };
        let operated_semantic =
            Mlp::new(store, "fusion.op_semantic", &widths(operated_width, &cfg.semantic_hidden, d), rng)?;
        let inter_block = AttentionBlock::new(store, "fusion.inter_block", cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            operated_width,
            background_width,
            background_semantic,
            background_spatial,
            background_block,
            operated_semantic,
            inter_block,
            coord_attention_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn operated_width(&self) -> usize {
        self.operated_width
    }

    pub fn background_width(&self) -> usize {
        self.background_width
    }

    /// Number of cross-attention calls that consumed the coordinate stream.
    pub fn coord_attention_calls(&self) -> u64 {
        self.coord_attention_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.coord_attention_calls.store(0, Ordering::Relaxed);
    }

    pub fn operated_semantic(&self) -> &Mlp {
        &self.operated_semantic
    }

    /// `descriptors` is `[batch·N, background_width]`, `coords` is
    /// `[batch·N, 3]`; returns `[batch·N, model_dim]` tokens.
    pub fn encode_background(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        descriptors: Var,
        coords: Var,
        batch: usize,
    ) -> Result<Var> {
        let (dr, cr) = (g.value(descriptors).rows(), g.value(coords).rows());
        if dr != cr {
            return Err(HgmError::Shape(format!("{dr} descriptor rows but {cr} coordinate rows")));
        }
        let semantic = self.background_semantic.forward(g, store, descriptors)?;
        match (&self.background_spatial, &self.background_block) {
            (Some(spatial_mlp), Some(block)) => {
                let spatial = spatial_mlp.forward(g, store, coords)?;
                self.coord_attention_calls.fetch_add(1, Ordering::Relaxed);
                block.forward(g, store, semantic, spatial, batch)
            }
            _ => Ok(semantic),
        }
    }

    /// Per-token semantic encoding of `[batch·M, operated_width]` descriptors.
    pub fn encode_operated(&self, g: &mut Graph, store: &ParameterStore, descriptors: Var) -> Result<Var> {
        self.operated_semantic.forward(g, store, descriptors)
    }

    /// Operated tokens attend to background tokens; the result is mean-pooled
    /// per batch item to `[batch, model_dim]`.
    pub fn inter_object_fuse(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        operated: Var,
        background: Var,
        batch: usize,
    ) -> Result<Var> {
        let (oc, bc) = (g.value(operated).cols(), g.value(background).cols());
        if oc != self.cfg.model_dim || bc != self.cfg.model_dim {
            return Err(HgmError::DimMismatch(format!(
                "token widths {oc} and {bc}, model width {}",
                self.cfg.model_dim
            )));
        }
        let fused = self.inter_block.forward(g, store, operated, background, batch)?;
        g.segment_mean(fused, batch)
    }

    /// Full object branch for `batch` items stacked row-wise.
    pub fn relational_feature(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        operated_descriptors: Var,
        background_descriptors: Var,
        background_coords: Var,
        batch: usize,
    ) -> Result<Var> {
        let bg = self.encode_background(g, store, background_descriptors, background_coords, batch)?;
        let op = self.encode_operated(g, store, operated_descriptors)?;
        self.inter_object_fuse(g, store, op, bg, batch)
    }
}

/// Graph-free evaluation of [`FusionModule::encode_background`] on one object.
pub fn encode_background(
    module: &FusionModule,
    store: &ParameterStore,
    descriptors: &Tensor,
    coords: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let d = g.constant(descriptors.clone())?;
    let c = g.constant(coords.clone())?;
    let out = module.encode_background(&mut g, store, d, c, 1)?;
    Ok(g.value(out).clone())
}

pub fn encode_operated(module: &FusionModule, store: &ParameterStore, descriptors: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let d = g.constant(descriptors.clone())?;
    let out = module.encode_operated(&mut g, store, d)?;
    Ok(g.value(out).clone())
}

/// Pooled relational feature of one operated/background token pair.
pub fn inter_object_fuse(
    module: &FusionModule,
    store: &ParameterStore,
    operated_tokens: &Tensor,
    background_tokens: &Tensor,
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let o = g.constant(operated_tokens.clone())?;
    let b = g.constant(background_tokens.clone())?;
    let out = module.inter_object_fuse(&mut g, store, o, b, 1)?;
    Ok(g.value(out).data().to_vec())
}
