//! Procedural paired-edit corpus: primitive scenes, templated instructions,
//! toy conditioning encoders and ground-truth preservation masks.

mod corpus;
mod encode;
mod scene;
mod vocab;

pub use corpus::{load_corpus, write_corpus, CorpusItem, CorpusManifest, CorpusRecord};
pub use encode::{encode_image_condition, encode_instruction, image_token_positions, ImageEmbedder, TextEncoder, IMAGE_TOKENS, VIEWS, VIEW_PATCHES};
pub use scene::{
    color_code, corpus_verb, gen_pair, ground_truth_mask, random_pair, Asset, Attachment, PairedSample, Primitive, SceneSpec, FINE_RES, SLAT_CHANNELS,
    SLAT_RES, STRUCT_RES,
};
pub use vocab::{Color, EditInstruction, Position, Shape, Verb, MAX_TOKENS, PAD, VOCAB_SIZE};
