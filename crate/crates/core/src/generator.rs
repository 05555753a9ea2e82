//! U-shaped denoising network.
//!
//! Encoder levels of two 3x3 convolutions each, average-pool downsampling,
//! a bottleneck with optional token self-attention, nearest-neighbour
//! upsampling with skip concatenation, and a 1x1 head. With
//! `residual_output` the head predicts noise that is subtracted from the
//! input; the result is clamped to `[0, 1]`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::image_tensor;
use crate::data::NormalizedImage;
use crate::error::{invalid, Error, Result};
use crate::nn::{attend, leaky_relu, Conv2d, Linear, ParamBuilder, ParamStore};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Number of down/up-sampling levels.
    pub depth: usize,
    pub use_self_attention: bool,
    pub residual_output: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
            use_self_attention: true,
            residual_output: true,
            seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "generator.base_channels must be at least 8, got {}",
                self.base_channels
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "generator.depth must be at least 2, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(pb: ParamBuilder<'_>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            a: pb.scope("conv1", |pb| Conv2d::new(pb, cin, cout, 3, 1, 1))?,
            b: pb.scope("conv2", |pb| Conv2d::new(pb, cout, cout, 3, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = leaky_relu(&self.a.forward(x)?, SLOPE)?;
        leaky_relu(&self.b.forward(&x)?, SLOPE)
    }
}

#[derive(Debug, Clone)]
struct TokenAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

impl TokenAttention {
    fn new(pb: ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let inner = (channels / 8).max(4);
        Ok(Self {
            query: pb.scope("query", |pb| Linear::new(pb, channels, inner))?,
            key: pb.scope("key", |pb| Linear::new(pb, channels, inner))?,
            value: pb.scope("value", |pb| Linear::new(pb, channels, channels))?,
            out: pb.scope("out", |pb| Linear::new(pb, channels, channels))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let a = attend(
            &self.query.forward(&tokens)?,
            &self.key.forward(&tokens)?,
            &self.value.forward(&tokens)?,
        )?;
        let y = self.out.forward(&a.values)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoders: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    attention: Option<TokenAttention>,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
    params: ParamStore,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let c = |level: usize| cfg.base_channels << level;
        let (parts, params) = ParamStore::build(cfg.seed, dtype, |pb| {
            let mut encoders = Vec::with_capacity(cfg.depth);
            for level in 0..cfg.depth {
                let cin = if level == 0 { 1 } else { c(level - 1) };
                encoders.push(pb.scope(&format!("enc{level}"), |pb| DoubleConv::new(pb, cin, c(level)))?);
            }
            let bottleneck = pb.scope("bottleneck", |pb| DoubleConv::new(pb, c(cfg.depth - 1), c(cfg.depth)))?;
            let attention = if cfg.use_self_attention {
                Some(pb.scope("attention", |pb| TokenAttention::new(pb, c(cfg.depth)))?)
            } else {
                None
            };
            let mut decoders = Vec::with_capacity(cfg.depth);
            for level in (0..cfg.depth).rev() {
                decoders.push(pb.scope(&format!("dec{level}"), |pb| {
                    DoubleConv::new(pb, c(level + 1) + c(level), c(level))
                })?);
            }
            // A zero residual head makes the untrained network the identity.
            let head = pb.scope("head", |pb| {
                if cfg.residual_output {
                    Conv2d::zeros(pb, c(0), 1, 1)
                } else {
                    Conv2d::new(pb, c(0), 1, 1, 1, 0)
                }
            })?;
            Ok((encoders, bottleneck, attention, decoders, head))
        })?;
        let (encoders, bottleneck, attention, decoders, head) = parts;
        Ok(Self {
            cfg: cfg.clone(),
            encoders,
            bottleneck,
            attention,
            decoders,
            head,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.cfg.required_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(invalid!(
                "input {h}x{w} must have both dimensions divisible by {m} (2^depth for depth {})",
                self.cfg.depth
            ));
        }
        Ok(())
    }

    /// `(B, 1, H, W)` in `[0, 1]` to a denoised batch of the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, ch, h, w) = x.dims4()?;
        if ch != 1 {
            return Err(Error::Shape(format!("generator expects 1 channel, got {ch}")));
        }
        self.check_input_dims(h, w)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut y = x.clone();
        for enc in &self.encoders {
            let f = enc.forward(&y)?;
            y = f.avg_pool2d(2)?;
            skips.push(f);
        }
        y = self.bottleneck.forward(&y)?;
        if let Some(att) = &self.attention {
            y = att.forward(&y)?;
        }
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = y.upsample_nearest2d(sh, sw)?;
            y = dec.forward(&Tensor::cat(&[&up, &skip], 1)?)?;
        }
        let head = self.head.forward(&y)?;
        let out = if self.cfg.residual_output {
            (x - head)?
        } else {
            head
        };
        Ok(out.clamp(0.0, 1.0)?)
    }

    pub fn denoise(&self, images: &[NormalizedImage]) -> Result<Vec<NormalizedImage>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let dims = first.dims();
        if images.iter().any(|i| i.dims() != dims) {
            return Err(Error::Shape("denoise batch must share one image size".into()));
        }
        let batch = Tensor::cat(
            &images
                .iter()
                .map(|i| image_tensor(i, self.params.dtype()))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let out = self.forward(&batch)?.to_dtype(DType::F32)?;
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let v = out.get(i)?.flatten_all()?.to_vec1::<f32>()?;
                let px = ndarray::Array2::from_shape_vec(dims, v).map_err(|e| invalid!("{e}"))?;
                NormalizedImage::from_clamped(px, img.window())
            })
            .collect()
    }
}

pub fn parameter_count(cfg: &GeneratorConfig) -> Result<usize> {
    Ok(Generator::new(cfg, DType::F32)?.params().element_count())
}
