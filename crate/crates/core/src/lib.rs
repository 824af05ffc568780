//! Tree-structured, layer-wise federated aggregation of LoRA adapters.
//!
//! Clients warm up private LoRA adapters, the server clusters them once into
//! a global merge tree using the adapters' `B` factors, and every layer then
//! aggregates at its own depth of that tree: coarse sharing near the input,
//! finer peer groups deeper in the network. Each client mixes its peer
//! group's cluster expert with an external expert averaged over everyone else.

pub mod aggregation;
pub mod config;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod lora;
pub mod oracle;
pub mod rng;
pub mod similarity;
pub mod synthetic;
pub mod topology;

pub use aggregation::{ClientUpload, ExpertAssignment, Variant, Weighting};
pub use config::{FederationConfig, Mode, SyntheticSpec};
pub use error::{Error, Result};
pub use federation::{run_experiment, ExperimentReport, RoundReport, RunStatus};
pub use linalg::Matrix;
pub use lora::{Activation, AdapterPair, FrozenBackbone, LayerExperts, Sample};
pub use similarity::{DistanceMatrix, Metric};
pub use topology::{DepthSchedule, MergeTree, Partition};
