//! Activation matching and masked prediction from a frozen teacher into a
//! recurrent student.

pub mod config;
pub mod data;
pub mod loss;
pub mod mask;
pub mod optim;
pub mod stages;
pub mod train;

pub use config::{DistillConfig, OptimConfig, RunConfig};
pub use loss::{ActivationMap, MatchingScope};
pub use mask::{MaskSpec, MaskStrategy};
pub use stages::{stage_partition, StageMap};
pub use train::{distill_run, Distiller, RunSummary, Sample, StepMetrics, TeacherTargets};
