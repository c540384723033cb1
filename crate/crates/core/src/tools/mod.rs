//! Attention-map export, the cost model and run configuration.

pub mod attention;
pub mod config;
pub mod cost;

pub use attention::{attention_map, export_attention, parse_pgm, AttentionMap};
pub use config::RunConfig;
pub use cost::{cost_report, measure_forward, CostReport, ModelDims, Paradigm};
