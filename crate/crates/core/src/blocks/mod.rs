//! Conditioning blocks: text-driven context composition, tri-attention with a
//! zero-init mixer, adaLN modulation and timestep embeddings.

mod adaln;
mod attention;
mod bundle;
mod compose;
mod layout;
mod linear;
mod time;
mod tri;

pub use adaln::{gated_residual, modulate, AdaLn, Modulation, LN_EPS};
pub use attention::MultiHeadAttention;
pub use bundle::ConditioningBundle;
pub use compose::KvComposer;
pub use layout::Layout;
pub use linear::Linear;
pub use time::{timestep_embedding, TimeEmbedder, TIME_SCALE};
pub use tri::{adaln_modulate, kv_compose, sparse_tri_attention, tri_attention_block, BlockInputs, TriAttentionBlock, TriBlockConfig};
