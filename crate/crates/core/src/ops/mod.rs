//! Differentiable operators with analytic backward passes.
//!
//! Every backward function is a pure function of the cotangent and an explicit
//! set of saved forward values.

pub mod activation;
pub mod conv;
pub mod deform;
pub mod norm;
pub mod trilinear;

use serde::{Deserialize, Serialize};

pub use activation::{
    bce_with_logits, bce_with_logits_backward, global_avg_pool, global_avg_pool_backward, linear,
    linear_backward, relu, relu_backward, sigmoid,
};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvSpec};
pub use deform::{
    deformable_conv3d_apply, deformable_conv3d_backward, deformable_conv3d_forward, DeformGrads,
    DeformableConvSpec,
};
pub use norm::{batchnorm_backward, batchnorm_eval, batchnorm_forward, BatchNormSaved, RunningStats};
pub use trilinear::{trilinear_sample, trilinear_sample_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
