//! Diagonal adaptive kernel regression: fixed-kernel, two-layer and D-layer
//! gradient flows over trigonometric eigenbases, with the tooling to measure
//! their rates and to check the one-dimensional hitting-time bounds.
// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod basis;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod onedim;
pub mod sampling;
pub mod signals;

pub use basis::{BasisElement, MultiIndex, OrderedSpectrum, Phase};
pub use dynamics::{Estimator, ModelState, StoppingRule, TrainConfig, Trajectory};
pub use error::{Error, Result};
pub use sampling::{Dataset, DesignMatrix, LeastSquares};
pub use signals::{CoefficientVector, GappedDecay};
