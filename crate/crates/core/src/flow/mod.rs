//! Rectified flow with `x_t = (1 − t)·x₀ + t·ε`: `t = 0` is data, `t = 1` is
//! noise, and the regressed velocity is `ε − x₀`.

mod dropout;
mod loss;
mod sampler;
mod schedule;

pub use dropout::{cfg_dropout, draw_dropout, DropDecision, DropMode, DEFAULT_DROP_RATE};
pub use loss::{cfm_loss, cfm_loss_graph, edit_loss, edit_loss_graph, velocity_target, FlowSample};
pub use sampler::{euler_sample_cfg, guided_velocity, SamplerConfig, VelocityField};
pub use schedule::{interpolate, logistic, logit, sample_t_logit_normal, MU_SPARSE, MU_STRUCTURE};
