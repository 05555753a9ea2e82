use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Row-stochastic `(out, in)` bilinear interpolation matrix using half-pixel
/// centers (`align_corners = false`). Equal sizes give the exact identity.
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`,
/// expressed as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dtype: DType = x.dtype();
    let mut y = x.clone();
    if w != out_w {
        let rx = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), &Device::Cpu)?.to_dtype(dtype)?;
        y = y.broadcast_matmul(&rx.t()?)?;
    }
    if h != out_h {
        let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), &Device::Cpu)?.to_dtype(dtype)?;
        y = ry.broadcast_matmul(&y)?;
    }
    Ok(y)
}
