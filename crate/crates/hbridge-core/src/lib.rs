//! HBridge at desk scale: an asymmetric two-expert transformer in which a
//! frozen understanding expert conditions a trainable flow-matching
//! generative expert through mid-layer shared attention, plus the analysis
//! tooling to quantify what each bridged layer contributes.

pub mod analysis;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod gen;
pub mod math;
pub mod model;
pub mod params;
pub mod parallel;
pub mod rng;
pub mod srt;
pub mod trainer;
pub mod und;

pub use config::{BridgePlan, BridgeSpec, Config, ExpertSpec, FusionMode, TrainSpec, VitSpec};
pub use error::{HbError, Result};
