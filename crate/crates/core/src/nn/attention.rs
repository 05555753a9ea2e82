use candle_core::Tensor;

use super::{softmax_last_dim, Linear};
use crate::error::{Error, Result};

/// Query, key and value token matrices of one attention call, each
/// `(..., N, d_k)`.
#[derive(Debug, Clone)]
pub struct AttentionProjection {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl AttentionProjection {
    pub fn new(query: Tensor, key: Tensor, value: Tensor) -> Result<Self> {
        let (q, k, v) = (query.dims(), key.dims(), value.dims());
        if q.len() < 2 || q != k || k != v {
            return Err(Error::Shape(format!(
                "query {q:?}, key {k:?} and value {v:?} must share token count and width"
            )));
        }
        if q[q.len() - 2] == 0 {
            return Err(Error::Shape("attention needs at least one token".into()));
        }
        Ok(Self { query, key, value })
    }

    /// Projects one token matrix through three linear maps.
    pub fn project(tokens: &Tensor, wq: &Linear, wk: &Linear, wv: &Linear) -> Result<Self> {
        Self::new(wq.forward(tokens)?, wk.forward(tokens)?, wv.forward(tokens)?)
    }

    pub fn scale_dim(&self) -> usize {
        *self.query.dims().last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub values: Tensor,
    /// Row-stochastic weights, `(..., N_q, N_k)`.
    pub weights: Tensor,
}

/// `Softmax(Q K^T / sqrt(d_k)) V` without input validation; `q` may have a
/// different token count from `k`/`v`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttentionOutput> {
    let dk = *q.dims().last().unwrap() as f64;
    let scores = (q.matmul(&k.t()?)? / dk.sqrt())?;
    let weights = softmax_last_dim(&scores)?;
    let values = weights.matmul(v)?;
    Ok(AttentionOutput { values, weights })
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Checked scaled dot-product self-attention.
pub fn self_attention(proj: &AttentionProjection) -> Result<AttentionOutput> {
    for (name, t) in [("query", &proj.query), ("key", &proj.key), ("value", &proj.value)] {
        if !all_finite(t)? {
            return Err(Error::Numeric(format!("non-finite attention {name}")));
        }
    }
    attend(&proj.query, &proj.key, &proj.value)
}

/// Splits the last dimension of `(B, N, E)` tensors into `heads` heads,
/// attends per head and merges back to `(B, N_q, E)`. Weights are
/// `(B, heads, N_q, N_k)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<AttentionOutput> {
    let (b, nq, e) = q.dims3()?;
    let nk = k.dim(1)?;
    if heads == 0 || e % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding width {e} not divisible by {heads} heads"
        )));
    }
    let d = e / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, d))?.transpose(1, 2)?.contiguous()?)
    };
    let out = attend(&split(q, nq)?, &split(k, nk)?, &split(v, nk)?)?;
    let values = out.values.transpose(1, 2)?.contiguous()?.reshape((b, nq, e))?;
    Ok(AttentionOutput {
        values,
        weights: out.weights,
    })
}
