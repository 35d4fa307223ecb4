//! Closed-loop evaluation: the kinematic world, sensor noise, scripted
//! demonstrations and the inference loop.

pub mod evaluate;
pub mod inference;
pub mod noise;
pub mod synth;
pub mod world;

pub use evaluate::{evaluate, summarize, summary_to_csv, table_to_csv, EvalRow, EvalSpec, Grid, SummaryRow};
pub use inference::{demo_world, run_inference, write_trace, ChunkPolicy, EvalResult, Feedback, RolloutConfig, TraceRecord};
pub use noise::{inject_noise_object, inject_noise_pose, inject_noise_state, NoiseSpec};
pub use synth::{generate_prior_demos, generate_task_demos, sample_task_instance, PriorSpec, TaskInstance, TaskSpec};
pub use world::{step_world, GraspState, ObjectGeometry, SimWorld};
