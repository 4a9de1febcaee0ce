//! The two flow networks, their training loop and the two-stage edit
//! pipeline.

mod cond;
mod net;
mod pipeline;
mod slat;
mod structure;
mod train;

pub use cond::{guidance_drop, CondInput, Conditioner, FinalLayer, TIME_FREQ_DIM};
pub use net::{forward_batch, predict, row_range, BoundNet, FlowNet, NetInput};
pub use pipeline::{blob_hash, directory_hash, edit_pipeline, slat_stage, structure_stage, EditModel, EditOutput, RunManifest};
pub use slat::{Pyramid, ResBlock, SlatNet, SlatNetConfig, SparseConv};
pub use structure::{StructureNet, StructureNetConfig};
pub use train::{batch_loss, resample, smoothed_endpoints, train_step, Stage, StepReport, TrainConfig, TrainExample, TrainPair, Trainer};
