//! Two-stage recipe: teacher-forced cross-entropy on short captions, then
//! sequence training that lowers the probability of the EOS token the
//! model actually emitted. A REINFORCE arm with a CIDEr reward is provided
//! for comparison.

mod config;
mod stage;
mod steps;

pub use config::{StageKind, TrainConfig};
pub use stage::{
    probe, read_trace, run_stage, stop_length, Prepared, ProbeResult, StageOutcome, StageOutput, StopReason,
    TraceRecord, TRACE_HEADER,
};
pub use steps::{
    debias_gradient, eos_debias_step, eos_prob_after, eos_ros, next_token_log_prob_grad, reinforce_gradient,
    reinforce_step, xent_batch_grad, xent_loss_grad, xent_step, DebiasTelemetry, Pair, ReinforceTelemetry,
};
