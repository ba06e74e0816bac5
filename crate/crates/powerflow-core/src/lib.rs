//! Desk-scale laboratory for matching autoregressive policies to power-sharpened
//! targets, exactly.
//!
//! Everything here operates on universes small enough to enumerate, so every
//! quantity the training objectives estimate by sampling (partition functions,
//! target distributions, expected gradients) also has an exact counterpart in
//! [`oracle`]. That is the point: the sampled path and the closed-form path are
//! implemented independently and the tests hold them against each other.
//!
//! Module map:
//!
//! * [`seqspace`] — token vocabularies and prefix-free trajectory universes.
//! * [`policy`] — tabular / bigram softmax policies with analytic score vectors.
//! * [`bases`] — canned base-policy generators used by experiments and tests.
//! * [`target`] — power-sharpened (escort-style) target densities and penalties.
//! * [`oracle`] — exact enumeration: partitions, target distributions, KL/TV,
//!   expected gradients, finite differences.
//! * [`objectives`] — trajectory-balance, length-aware, clipped, and RL-KL losses.
//! * [`trainer`] — seeded on-policy/off-policy training loop with metrics.
//! * [`mvsim`] — exact replay of majority-vote self-reward dynamics.
//!
//! The crate is `no_std` (alloc required); all floating-point work is `f64`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bases;
mod math;
pub mod mvsim;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod seqspace;
pub mod target;
pub mod trainer;

pub use objectives::{ClipSpec, LogZScalar, LossKind, LossParams};
pub use oracle::{NormalizedTarget, UniverseDist};
pub use policy::{AutoregressivePolicy, BigramPolicy, ParamGradient, ParamKey, TabularPolicy};
pub use seqspace::{QueryId, Termination, Trajectory, Vocab};
pub use target::{PsiMode, TargetSpec};
pub use trainer::{train, StepMetrics, TrainConfig, TrainOutput};
