//! Patch discriminator conditioned on semantic features of the reference
//! image through attention-based feature fusion (AFF).
//!
//! A fusion stage takes the trunk feature `f` after one convolution and the
//! matching semantic level `a`. The semantic map is resized to the trunk
//! grid, group-normalized, projected by a 1x1 convolution and layer-normed
//! into tokens that attend to themselves. The normalized result queries the
//! projected trunk tokens (keys and values) in a cross-attention. That
//! output goes through layer norm, GELU and a 1x1 projection and is
//! concatenated in front of the untouched `f`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{
    gelu, leaky_relu, multi_head_attention, resize_bilinear, AttentionOutput, Conv2d, GroupNorm,
    LayerNorm, Linear, ParamBuilder, ParamStore,
};

const KERNEL: usize = 4;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub num_layers: usize,
    pub base_channels: usize,
    pub strides: Vec<usize>,
    /// 1-based trunk layers whose output is fused with the low, mid and high
    /// semantic levels, shallow to deep. Empty for an unconditioned trunk.
    pub aff_layers: Vec<usize>,
    pub aff_embed_dim: usize,
    pub num_heads: usize,
    pub group_norm_groups: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_layers: 5,
            base_channels: 16,
            strides: vec![2, 2, 2, 1, 1],
            aff_layers: vec![2, 3, 4],
            aff_embed_dim: 16,
            num_heads: 2,
            group_norm_groups: 8,
            seed: 29,
        }
    }
}

impl DiscriminatorConfig {
    /// Full-width plan: channels 64-128-256-512-1 and 8 attention heads.
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            aff_embed_dim: 64,
            num_heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be at least 2, got {}", self.num_layers));
        }
        if self.strides.len() != self.num_layers || self.strides.contains(&0) {
            return bad(format!(
                "strides {:?} must list one positive stride per layer ({})",
                self.strides, self.num_layers
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if !(self.aff_layers.is_empty() || self.aff_layers.len() == 3) {
            return bad(format!(
                "aff_layers must name three layers (low, mid, high) or none, got {:?}",
                self.aff_layers
            ));
        }
        if self.aff_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("aff_layers {:?} must be strictly increasing", self.aff_layers));
        }
        if let Some(&l) = self.aff_layers.iter().find(|&&l| l == 0 || l >= self.num_layers) {
            return bad(format!(
                "aff layer {l} outside [1, {}] (the final logit layer cannot be fused)",
                self.num_layers - 1
            ));
        }
        if !self.aff_layers.is_empty() {
            if self.aff_embed_dim == 0 || self.num_heads == 0 || !self.aff_embed_dim.is_multiple_of(self.num_heads) {
                return bad(format!(
                    "aff_embed_dim {} must be a positive multiple of num_heads {}",
                    self.aff_embed_dim, self.num_heads
                ));
            }
            if self.group_norm_groups == 0 {
                return bad("group_norm_groups must be positive".into());
            }
        }
        Ok(())
    }

    /// Output channels of trunk layer `layer` (1-based) before any fusion.
    pub fn trunk_channels(&self, layer: usize) -> usize {
        if layer == self.num_layers {
            1
        } else {
            self.base_channels << (layer - 1).min(3)
        }
    }

    /// Spatial size of the realism map for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut size = (h, w);
        for (i, &s) in self.strides.iter().enumerate() {
            let step = |n: usize| -> Result<usize> {
                if n + 2 * PADDING < KERNEL {
                    return Err(Error::Shape(format!(
                        "input {h}x{w} too small for discriminator layer {}",
                        i + 1
                    )));
                }
                Ok((n + 2 * PADDING - KERNEL) / s + 1)
            };
            size = (step(size.0)?, step(size.1)?);
        }
        Ok(size)
    }
}

/// Attention-based feature fusion of one semantic level into one trunk stage.
#[derive(Debug, Clone)]
pub struct AffModule {
    semantic_norm: GroupNorm,
    semantic_proj: Conv2d,
    semantic_ln: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    query_ln: LayerNorm,
    cross_q: Linear,
    trunk_proj: Conv2d,
    trunk_ln: LayerNorm,
    cross_k: Linear,
    cross_v: Linear,
    out_ln: LayerNorm,
    out_proj: Conv2d,
    heads: usize,
    embed_dim: usize,
}

/// Fused map plus the attention weights of both attention calls.
#[derive(Debug, Clone)]
pub struct AffOutput {
    /// `(B, E + C_f, H, W)`; channels `E..` are the trunk input unchanged.
    pub fused: Tensor,
    pub self_attention: AttentionOutput,
    pub cross_attention: AttentionOutput,
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

impl AffModule {
    pub fn new(
        pb: ParamBuilder<'_>,
        semantic_channels: usize,
        trunk_channels: usize,
        embed_dim: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        let e = embed_dim;
        Ok(Self {
            semantic_norm: pb.scope("semantic_norm", |pb| GroupNorm::new(pb, groups, semantic_channels))?,
            semantic_proj: pb.scope("semantic_proj", |pb| Conv2d::new(pb, semantic_channels, e, 1, 1, 0))?,
            semantic_ln: pb.scope("semantic_ln", |pb| LayerNorm::new(pb, e))?,
            self_q: pb.scope("self_q", |pb| Linear::new(pb, e, e))?,
            self_k: pb.scope("self_k", |pb| Linear::new(pb, e, e))?,
            self_v: pb.scope("self_v", |pb| Linear::new(pb, e, e))?,
            query_ln: pb.scope("query_ln", |pb| LayerNorm::new(pb, e))?,
            cross_q: pb.scope("cross_q", |pb| Linear::new(pb, e, e))?,
            trunk_proj: pb.scope("trunk_proj", |pb| Conv2d::new(pb, trunk_channels, e, 1, 1, 0))?,
            trunk_ln: pb.scope("trunk_ln", |pb| LayerNorm::new(pb, e))?,
            cross_k: pb.scope("cross_k", |pb| Linear::new(pb, e, e))?,
            cross_v: pb.scope("cross_v", |pb| Linear::new(pb, e, e))?,
            out_ln: pb.scope("out_ln", |pb| LayerNorm::new(pb, e))?,
            out_proj: pb.scope("out_proj", |pb| Conv2d::new(pb, e, e, 1, 1, 0))?,
            heads,
            embed_dim: e,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn forward(&self, semantic: &Tensor, trunk: &Tensor) -> Result<AffOutput> {
        let (b, _, h, w) = trunk.dims4()?;
        let (sb, _, _, _) = semantic.dims4()?;
        if sb != b {
            return Err(Error::Shape(format!(
                "semantic batch {sb} does not match trunk batch {b}"
            )));
        }
        let a = resize_bilinear(semantic, h, w)?;
        let a = self.semantic_proj.forward(&self.semantic_norm.forward(&a)?)?;
        let a_tokens = self.semantic_ln.forward(&to_tokens(&a)?)?;
        let self_attention = multi_head_attention(
            &self.self_q.forward(&a_tokens)?,
            &self.self_k.forward(&a_tokens)?,
            &self.self_v.forward(&a_tokens)?,
            self.heads,
        )?;
        let query = self.cross_q.forward(&self.query_ln.forward(&self_attention.values)?)?;

        let f_tokens = self.trunk_ln.forward(&to_tokens(&self.trunk_proj.forward(trunk)?)?)?;
        let cross_attention = multi_head_attention(
            &query,
            &self.cross_k.forward(&f_tokens)?,
            &self.cross_v.forward(&f_tokens)?,
            self.heads,
        )?;

        let g = gelu(&self.out_ln.forward(&cross_attention.values)?)?;
        let g = g.transpose(1, 2)?.reshape((b, self.embed_dim, h, w))?;
        let fused = Tensor::cat(&[&self.out_proj.forward(&g)?, trunk], 1)?;
        Ok(AffOutput {
            fused,
            self_attention,
            cross_attention,
        })
    }
}

/// Per-patch realism logits, `(B, 1, H_p, W_p)`.
#[derive(Debug, Clone)]
pub struct RealismMap {
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    trunk: Vec<Conv2d>,
    /// `(layer, module)` for each fused layer, shallow to deep.
    fusions: Vec<(usize, AffModule)>,
    params: ParamStore,
}

impl Discriminator {
    /// `semantic_channels` is the channel depth of the conditioning pyramid.
    pub fn new(cfg: &DiscriminatorConfig, semantic_channels: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if !cfg.aff_layers.is_empty() && !semantic_channels.is_multiple_of(cfg.group_norm_groups) {
            return Err(Error::Config(format!(
                "semantic channels {semantic_channels} not divisible by {} groups",
                cfg.group_norm_groups
            )));
        }
        let ((trunk, fusions), params) = ParamStore::build(cfg.seed, dtype, |pb| {
            let mut trunk = Vec::with_capacity(cfg.num_layers);
            let mut fusions = Vec::new();
            let mut cin = 1;
            for layer in 1..=cfg.num_layers {
                let cout = cfg.trunk_channels(layer);
                let stride = cfg.strides[layer - 1];
                trunk.push(pb.scope(&format!("trunk{layer}"), |pb| {
                    Conv2d::new(pb, cin, cout, KERNEL, stride, PADDING)
                })?);
                cin = cout;
                if cfg.aff_layers.contains(&layer) {
                    let m = pb.scope(&format!("aff{layer}"), |pb| {
                        AffModule::new(
                            pb,
                            semantic_channels,
                            cout,
                            cfg.aff_embed_dim,
                            cfg.num_heads,
                            cfg.group_norm_groups,
                        )
                    })?;
                    fusions.push((layer, m));
                    cin += cfg.aff_embed_dim;
                }
            }
            Ok((trunk, fusions))
        })?;
        Ok(Self {
            cfg: cfg.clone(),
            trunk,
            fusions,
            params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_conditioned(&self) -> bool {
        !self.fusions.is_empty()
    }

    pub fn final_layer(&self) -> &Conv2d {
        self.trunk.last().expect("at least two layers")
    }

    pub fn discriminate(&self, candidate: &Tensor, semantic: Option<&FeaturePyramid>) -> Result<RealismMap> {
        Ok(self.forward_traced(candidate, semantic)?.0)
    }

    /// Also returns each fusion stage's output, for inspection.
    pub fn forward_traced(
        &self,
        candidate: &Tensor,
        semantic: Option<&FeaturePyramid>,
    ) -> Result<(RealismMap, Vec<AffOutput>)> {
        let levels = match (semantic, self.is_conditioned()) {
            (Some(p), true) => Some(p.levels()),
            (None, true) => {
                return Err(Error::Shape(
                    "conditioned discriminator needs a semantic pyramid".into(),
                ))
            }
            (_, false) => None,
        };
        let mut x = candidate.clone();
        let mut traces = Vec::with_capacity(self.fusions.len());
        let mut next_fusion = 0;
        for (i, conv) in self.trunk.iter().enumerate() {
            let layer = i + 1;
            x = conv.forward(&x)?;
            if layer == self.cfg.num_layers {
                break;
            }
            x = leaky_relu(&x, 0.2)?;
            if let Some((fl, module)) = self.fusions.get(next_fusion) {
                if *fl == layer {
                    let level = levels.expect("conditioned")[next_fusion];
                    let out = module.forward(&level.values, &x)?;
                    x = out.fused.clone();
                    traces.push(out);
                    next_fusion += 1;
                }
            }
        }
        Ok((RealismMap { logits: x }, traces))
    }
}
