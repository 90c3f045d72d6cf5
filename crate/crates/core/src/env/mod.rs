//! Synthetic pose-generation tasks with exact ground truth.

mod fusion;
mod kinematics;
mod tasks;

pub use fusion::{DualFusion, VisualEncoders};
pub use kinematics::KinematicChain;
pub use tasks::{
    export_tasks, import_tasks, EnvConfig, Environment, ImageChannel, QaPair, TaskInstance, TaskMix,
};
