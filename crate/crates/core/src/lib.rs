//! Flow-matching audio generation conditioned on video and text.
//!
//! The crate contains the full generative stack at desk scale: a conditional
//! flow-matching objective and Euler sampler with classifier-free guidance, a
//! multimodal transformer whose audio and visual streams share frame-rate
//! aligned rotary embeddings, a frame-aligned synchronization pathway, a
//! spectral front-end, a procedural multimodal dataset, an optimizer/trainer
//! with checkpointing, and model-free evaluation metrics.

pub mod audiofe;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod mmdit;
pub mod syncmod;
pub mod synthdata;
pub mod tensorfile;
pub mod trainer;

pub use config::{lr_at_step, ModelConfig, SampleConfig, TrainConfig};
pub use error::{Error, ErrorKind, Result};
pub use flow::{FlowTime, LatentSeq, VelocityEvaluator};
pub use graph::{ParamStore, Real};
pub use mmdit::{count_params, Model, Network};
pub use syncmod::{Conditions, sync_seq_len};
