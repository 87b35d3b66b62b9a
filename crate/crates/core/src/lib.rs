//! Token dynamics of masked self-attention, with and without LayerNorm.
//!
//! * [`mask`]: attention masks as directed graphs and their connectivity.
//! * [`numerics`]: token matrices, SVD, seeded sampling.
//! * [`dynamics`]: the layer updates and trajectory recording.
//! * [`metrics`]: collapse observables such as `mu`, `phi` and stable rank.
//! * [`theory`]: contraction rates, bound verifiers and constructed equilibria.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod mask;
pub mod metrics;
pub mod numerics;
pub mod theory;

pub use dynamics::{LayerWeights, Mode, ScoreInput, WeightSchedule};
pub use mask::{MaskGraph, MaskKind};
pub use numerics::TokenMatrix;
