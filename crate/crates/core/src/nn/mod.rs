//! Differentiable building blocks with hand-derived backward passes.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod params;

pub use attention::{attend, attend_backward, attention, Groups, KvMemory, MultiHeadAttention};
pub use conv::{im2col, Conv1d};
pub use gradcheck::{gradient_check, rel_err, sample_coords, Coord, GradCheckReport};
pub use gru::GruCell;
pub use layers::{dense, gelu, layer_norm, sigmoid, standardize, Dense, FeedForward, LayerNorm};
pub use params::{Builder, ParamId, ParamLeaf, ParamStore};
