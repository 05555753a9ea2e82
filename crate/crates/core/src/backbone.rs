//! Frozen vision-transformer feature extractor with hierarchical taps.
//!
//! Parameters are plain (non-variable) tensors, so no gradient is ever
//! accumulated for them and no optimizer can own them; gradients still flow
//! through the network to its input. Parameter names follow the common
//! `patch_embed / blocks.{i}.attn.qkv / mlp.fc1` ViT layout so that external
//! safetensors checkpoints with that layout load through the same code path
//! as the seeded tiny test backbone.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormalizedImage;
use crate::error::{Error, Result};
use crate::nn::{self, multi_head_attention, resize_bilinear, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Seeded random 12-block transformer, small enough for unit tests.
    TinyTest,
    /// ViT weights read from a safetensors file.
    ExternalCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub tap_blocks: [usize; 3],
    pub input_size: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::tiny_test()
    }
}

impl BackboneSpec {
    pub fn tiny_test() -> Self {
        Self {
            kind: BackboneKind::TinyTest,
            patch_size: 8,
            embed_dim: 32,
            num_blocks: 12,
            num_heads: 2,
            tap_blocks: [4, 8, 12],
            input_size: 64,
            checkpoint_path: None,
            seed: 1234,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    /// ViT-base geometry (patch 14 at 518 px gives a 37x37 token grid).
    pub fn vit_base(checkpoint_path: PathBuf) -> Self {
        Self {
            kind: BackboneKind::ExternalCheckpoint,
            patch_size: 14,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            input_size: 518,
            checkpoint_path: Some(checkpoint_path),
            ..Self::tiny_test()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input_size {} must be a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        let [a, b, c] = self.tap_blocks;
        if !(a >= 1 && a < b && b < c && c <= self.num_blocks) {
            return bad(format!(
                "tap_blocks {:?} must be strictly increasing within [1, {}]",
                self.tap_blocks, self.num_blocks
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return bad("std entries must be positive".into());
        }
        if self.kind == BackboneKind::ExternalCheckpoint && self.checkpoint_path.is_none() {
            return bad("external-checkpoint backbone needs checkpoint_path".into());
        }
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid_size(&self) -> usize {
        self.input_size / self.patch_size
    }
}

/// All `(x, y)` token positions of the feature grid, row-major.
pub fn token_coordinates(spec: &BackboneSpec) -> Vec<(usize, usize)> {
    grid_coordinates(spec.grid_size(), spec.grid_size())
}

pub(crate) fn grid_coordinates(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
    Dense,
}

/// Dense features shaped `(B, C, H_f, W_f)`; single images have `B = 1`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub level: Level,
}

impl FeatureMap {
    pub fn new(values: Tensor, level: Level) -> Result<Self> {
        values.dims4()?;
        Ok(Self { values, level })
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    /// `(C, H_f, W_f)`
    pub fn shape_chw(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[1], d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            level: self.level,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub low: FeatureMap,
    pub mid: FeatureMap,
    pub high: FeatureMap,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&FeatureMap; 3] {
        [&self.low, &self.mid, &self.high]
    }

    pub fn detach(&self) -> Self {
        Self {
            low: self.low.detach(),
            mid: self.mid.detach(),
            high: self.high.detach(),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let e = x.dim(2)?;
        let h = self.norm1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = qkv.narrow(2, 0, e)?;
        let k = qkv.narrow(2, e, e)?;
        let v = qkv.narrow(2, 2 * e, e)?;
        let a = multi_head_attention(&q, &k, &v, heads)?.values;
        let x = (x + self.proj.forward(&a)?)?;
        let h = nn::gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// A loaded, frozen backbone.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    params: BTreeMap<String, Tensor>,
    patch_weight: Tensor,
    patch_bias: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    mean: Tensor,
    std: Tensor,
}

impl Backbone {
    pub fn load(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let params = match spec.kind {
            BackboneKind::TinyTest => tiny_parameters(spec)?,
            BackboneKind::ExternalCheckpoint => {
                let path = spec.checkpoint_path.as_deref().expect("validated");
                read_safetensors(path)?
            }
        };
        Self::from_parameters(spec, params)
    }

    fn from_parameters(spec: &BackboneSpec, raw: BTreeMap<String, Tensor>) -> Result<Self> {
        let e = spec.embed_dim;
        let p = spec.patch_size;
        let n = spec.grid_size() * spec.grid_size();
        let dtype = raw.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let mut params = BTreeMap::new();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = raw
                .get(name)
                .ok_or_else(|| Error::BackboneLoad(format!("missing tensor `{name}`")))?;
            if t.dims() != shape {
                return Err(Error::BackboneLoad(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            let t = t.to_dtype(dtype)?.detach();
            params.insert(name.to_string(), t.clone());
            Ok(t)
        };
        let patch_weight = take("patch_embed.proj.weight", &[e, 3, p, p])?;
        let patch_bias = take("patch_embed.proj.bias", &[e])?;
        let cls_token = take("cls_token", &[1, 1, e])?;
        let pos_embed = take("pos_embed", &[1, n + 1, e])?;
        let mut blocks = Vec::with_capacity(spec.num_blocks);
        for i in 0..spec.num_blocks {
            let mut ln = |name: &str| -> Result<LayerNorm> {
                Ok(LayerNorm {
                    gamma: take(&format!("blocks.{i}.{name}.weight"), &[e])?,
                    beta: take(&format!("blocks.{i}.{name}.bias"), &[e])?,
                    eps: 1e-6,
                })
            };
            let norm1 = ln("norm1")?;
            let norm2 = ln("norm2")?;
            let mut lin = |name: &str, out: usize, inp: usize| -> Result<Linear> {
                Ok(Linear {
                    weight: take(&format!("blocks.{i}.{name}.weight"), &[out, inp])?,
                    bias: Some(take(&format!("blocks.{i}.{name}.bias"), &[out])?),
                })
            };
            blocks.push(Block {
                norm1,
                qkv: lin("attn.qkv", 3 * e, e)?,
                proj: lin("attn.proj", e, e)?,
                norm2,
                fc1: lin("mlp.fc1", 4 * e, e)?,
                fc2: lin("mlp.fc2", e, 4 * e)?,
            });
        }
        let dev = Device::Cpu;
        let mean = Tensor::from_slice(&spec.mean, (1, 3, 1, 1), &dev)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&spec.std, (1, 3, 1, 1), &dev)?.to_dtype(dtype)?;
        Ok(Self {
            spec: spec.clone(),
            params,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            mean,
            std,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.patch_weight.dtype()
    }

    /// Copy of this backbone with parameters cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_parameters(&self.spec, params)
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// SHA-256 over parameter names and values.
    pub fn checksum(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            crate::nn::hash_tensor(&mut h, t)?;
        }
        Ok(h.finalize().into())
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.params.clone().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// `(B, 1, H, W)` in `[0, 1]` to standardized `(B, 3, S, S)`.
    pub fn prepare_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("backbone expects 1-channel input, got {c}")));
        }
        let s = self.spec.input_size;
        let x = resize_bilinear(&x.to_dtype(self.dtype())?, s, s)?;
        let x = Tensor::cat(&[&x, &x, &x], 1)?;
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    pub fn prepare_input(&self, img: &NormalizedImage) -> Result<Tensor> {
        self.prepare_batch(&image_tensor(img, self.dtype())?)
    }

    /// Token grids after each requested block (1-based, increasing).
    fn taps(&self, x: &Tensor, blocks: &[usize]) -> Result<Vec<Tensor>> {
        let x = self.prepare_batch(x)?;
        let p = self.spec.patch_size;
        let g = self.spec.grid_size();
        let e = self.spec.embed_dim;
        let patches = x
            .conv2d(&self.patch_weight, 0, p, 1, 1)?
            .broadcast_add(&self.patch_bias.reshape((1, e, 1, 1))?)?;
        let b = patches.dim(0)?;
        let tokens = patches.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, e))?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed)?;
        let last = *blocks.last().unwrap_or(&0);
        let mut out = Vec::with_capacity(blocks.len());
        for (i, block) in self.blocks.iter().enumerate().take(last) {
            h = block.forward(&h, self.spec.num_heads)?;
            if blocks.contains(&(i + 1)) {
                let grid = h
                    .narrow(1, 1, g * g)?
                    .transpose(1, 2)?
                    .contiguous()?
                    .reshape((b, e, g, g))?;
                out.push(grid);
            }
        }
        Ok(out)
    }

    /// Low/mid/high features of a `(B, 1, H, W)` batch.
    pub fn pyramid_batch(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut t = self.taps(x, &self.spec.tap_blocks)?.into_iter();
        let mut next = |level| FeatureMap::new(t.next().expect("three taps"), level);
        Ok(FeaturePyramid {
            low: next(Level::Low)?,
            mid: next(Level::Mid)?,
            high: next(Level::High)?,
        })
    }

    /// Final tap block features of a `(B, 1, H, W)` batch.
    pub fn dense_batch(&self, x: &Tensor) -> Result<FeatureMap> {
        let t = self.taps(x, &self.spec.tap_blocks[2..])?;
        FeatureMap::new(t.into_iter().next().expect("one tap"), Level::Dense)
    }

    pub fn extract_hierarchy(&self, img: &NormalizedImage) -> Result<FeaturePyramid> {
        self.pyramid_batch(&image_tensor(img, self.dtype())?)
    }

    pub fn extract_dense(&self, img: &NormalizedImage) -> Result<FeatureMap> {
        self.dense_batch(&image_tensor(img, self.dtype())?)
    }
}

/// `(1, 1, H, W)` tensor of a normalized image.
pub fn image_tensor(img: &NormalizedImage, dtype: DType) -> Result<Tensor> {
    let (h, w) = img.dims();
    let data: Vec<f32> = img.pixels().iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn tiny_parameters(spec: &BackboneSpec) -> Result<BTreeMap<String, Tensor>> {
    let e = spec.embed_dim;
    let p = spec.patch_size;
    let n = spec.grid_size() * spec.grid_size();
    let (_, store) = ParamStore::build(spec.seed, DType::F32, |pb| {
        pb.scope("patch_embed.proj", |pb| {
            let bound = 1.0 / ((3 * p * p) as f64).sqrt();
            pb.param("weight", &[e, 3, p, p], nn::Init::Uniform(bound))?;
            pb.param("bias", &[e], nn::Init::Uniform(bound))
        })?;
        pb.param("cls_token", &[1, 1, e], nn::Init::Normal(0.02))?;
        pb.param("pos_embed", &[1, n + 1, e], nn::Init::Normal(0.02))?;
        for i in 0..spec.num_blocks {
            pb.scope(&format!("blocks.{i}"), |pb| {
                pb.scope("norm1", |pb| LayerNorm::new(pb, e))?;
                pb.scope("attn.qkv", |pb| Linear::new(pb, e, 3 * e))?;
                pb.scope("attn.proj", |pb| Linear::new(pb, e, e))?;
                pb.scope("norm2", |pb| LayerNorm::new(pb, e))?;
                pb.scope("mlp.fc1", |pb| Linear::new(pb, e, 4 * e))?;
                pb.scope("mlp.fc2", |pb| Linear::new(pb, 4 * e, e))
            })?;
        }
        Ok(())
    })?;
    Ok(store
        .iter()
        .map(|(k, v)| (k.to_string(), v.as_tensor().detach()))
        .collect())
}

fn read_safetensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::BackboneLoad(format!("{} does not exist", path.display())));
    }
    let map = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::BackboneLoad(format!("{}: {e}", path.display())))?;
    Ok(map.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Window;
    use ndarray::Array2;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> NormalizedImage {
        NormalizedImage::new(Array2::from_shape_fn((h, w), |(y, x)| f(y, x)), Window::SOFT_TISSUE).unwrap()
    }

    #[test]
    fn prepare_input_shapes_and_replication() {
        let spec = BackboneSpec {
            input_size: 224,
            ..BackboneSpec::tiny_test()
        };
        let bb = Backbone::load(&spec).unwrap();
        let x = bb.prepare_input(&image(64, 64, |_, _| 0.5)).unwrap();
        assert_eq!(x.dims(), &[1, 3, 224, 224]);
        // undo standardization: every channel must be the same image
        let raw = x.broadcast_mul(&bb.std).unwrap().broadcast_add(&bb.mean).unwrap();
        let ch: Vec<Vec<f32>> = (0..3)
            .map(|c| raw.narrow(1, c, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        for c in 1..3 {
            for (a, b) in ch[0].iter().zip(&ch[c]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let bb = Backbone::load(&BackboneSpec::tiny_test()).unwrap();
        let img = image(64, 64, |y, x| ((y * 64 + x) % 97) as f32 / 97.0);
        let x = bb.prepare_input(&img).unwrap();
        let ch0 = x.narrow(1, 0, 1).unwrap();
        let raw = ((ch0 * 0.229).unwrap() + 0.485).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in raw.iter().zip(img.pixels().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_pyramid_shapes_and_dense_equals_high() {
        let bb = Backbone::load(&BackboneSpec::tiny_test()).unwrap();
        let img = image(64, 64, |y, x| ((x + y) % 7) as f32 / 7.0);
        let pyr = bb.extract_hierarchy(&img).unwrap();
        for lvl in pyr.levels() {
            assert_eq!(lvl.shape_chw(), (32, 8, 8));
        }
        let dense = bb.extract_dense(&img).unwrap();
        assert_eq!(dense.level, Level::Dense);
        let a = dense.values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = pyr.high.values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_independent_of_slice_size() {
        let bb = Backbone::load(&BackboneSpec::tiny_test()).unwrap();
        for size in [16, 48, 96] {
            let f = bb.extract_dense(&image(size, size, |y, _| y as f32 / size as f32)).unwrap();
            assert_eq!(f.shape_chw(), (32, 8, 8));
        }
    }

    #[test]
    fn deterministic_frozen_and_sensitive() {
        let bb = Backbone::load(&BackboneSpec::tiny_test()).unwrap();
        let before = bb.checksum().unwrap();
        let img = image(64, 64, |y, x| ((3 * x + y) % 11) as f32 / 11.0);
        let first = bb.extract_dense(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for _ in 0..100 {
            let again = bb.extract_dense(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(first, again);
        }
        assert_eq!(before, bb.checksum().unwrap());
        assert_eq!(before, Backbone::load(&BackboneSpec::tiny_test()).unwrap().checksum().unwrap());

        let mut px = img.pixels().clone();
        px[[10, 20]] = if px[[10, 20]] > 0.5 { 0.0 } else { 1.0 };
        let other = NormalizedImage::new(px, Window::SOFT_TISSUE).unwrap();
        let changed = bb.extract_dense(&other).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let max_diff = first.iter().zip(&changed).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn token_grid_enumeration() {
        let spec = BackboneSpec {
            input_size: 16,
            ..BackboneSpec::tiny_test()
        };
        assert_eq!(token_coordinates(&spec), vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let all = token_coordinates(&BackboneSpec::tiny_test());
        assert_eq!(all.len(), 64);
        let uniq: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), 64);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = BackboneSpec::tiny_test();
        s.tap_blocks = [4, 4, 12];
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::tiny_test();
        s.tap_blocks = [4, 8, 13];
        assert!(s.validate().is_err());
        let mut s = BackboneSpec::tiny_test();
        s.input_size = 60;
        assert!(s.validate().is_err());
    }

    #[test]
    fn external_checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.safetensors");
        let tiny = Backbone::load(&BackboneSpec::tiny_test()).unwrap();
        tiny.save_safetensors(&path).unwrap();
        let spec = BackboneSpec {
            kind: BackboneKind::ExternalCheckpoint,
            checkpoint_path: Some(path.clone()),
            ..BackboneSpec::tiny_test()
        };
        let ext = Backbone::load(&spec).unwrap();
        assert_eq!(ext.checksum().unwrap(), tiny.checksum().unwrap());

        let missing = BackboneSpec {
            checkpoint_path: Some(dir.path().join("nope.safetensors")),
            ..spec.clone()
        };
        assert!(matches!(Backbone::load(&missing), Err(Error::BackboneLoad(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Backbone::load(&spec), Err(Error::BackboneLoad(_))));
    }
}
