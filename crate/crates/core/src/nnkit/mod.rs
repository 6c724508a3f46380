//! Layers with hand-written backward passes, Adam, finite-difference
//! gradient checking and the `MMK1` checkpoint format. Everything runs in
//! `f64`.

mod adam;
mod batchnorm;
mod checkpoint;
mod conv;
mod gradcheck;
mod ops;

pub use adam::AdamState;
pub use batchnorm::{BatchNorm2d, BnCache, BnGrads, BnMode};
pub use checkpoint::Checkpoint;
pub use conv::{Conv2d, ConvCache, ConvGrads};
pub use gradcheck::{gradcheck, gradcheck_subset, FD_STEP, REL_FLOOR, RETRY_ABOVE, RETRY_STEPS, numeric_gradient, relative_error, GradFailure, GradcheckReport, Parameterized};
pub use ops::{
    mse_backward, mse_forward, relu_backward, relu_forward, upsample2_backward, upsample2_forward,
};
