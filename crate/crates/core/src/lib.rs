//! Toy-scale laboratory for preference-optimization objectives.
//!
//! Small autoregressive softmax policies, DPO/PPO objectives with their
//! component decompositions and controlled variants, a synthetic preference
//! task, training loops, and gradient-alignment probes that measure whether
//! an objective's gradient pushes the model toward or away from its own final
//! responses.

// Validation helpers use `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod objectives;
pub mod policy;
pub mod probe;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod variants;

pub use error::{LabError, Result};
pub use objectives::{ObjectiveId, PreferencePair, Rollout};
pub use policy::{GradVector, ParamVector, Policy, PolicyKind, PolicySpec, SamplerConfig, TokenSequence, EOS};
