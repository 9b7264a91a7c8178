//! Performance and energy model of MoE LLM serving on tiered monolithic 3D
//! DRAM with near-memory processing.

pub mod attention;
pub mod budget;
pub mod config;
pub mod energy;
pub mod engine;
pub mod error;
pub mod expert;
pub mod nmp;
pub mod placement;
pub mod report;
pub mod serving;
pub mod timing;

pub use config::{
    load_config, model_preset, preset, ModelConfig, Scenario, SystemConfig, WorkloadConfig,
};
pub use energy::Energy;
pub use error::{Result, SimError};
pub use report::{compare, RunComparison, SimReport};
pub use serving::{run_serving, Policy, SimOptions};
