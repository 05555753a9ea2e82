//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters are created through [`ParamBuilder`] from a seeded ChaCha
//! stream so that model initialization is reproducible bit for bit, and are
//! kept in a name-ordered [`ParamStore`] that the optimizer, checksums and
//! checkpoints iterate in a stable order.

mod adam;
mod attention;
mod layers;
mod params;
mod resize;

pub use adam::{Adam, AdamState};
pub use attention::{attend, multi_head_attention, self_attention, AttentionOutput, AttentionProjection};
pub use layers::{gelu, leaky_relu, softmax_last_dim, Conv2d, GroupNorm, LayerNorm, Linear};
pub use params::{Init, ParamBuilder, ParamStore};
pub(crate) use params::hash_tensor;
pub use resize::{bilinear_matrix, resize_bilinear};
