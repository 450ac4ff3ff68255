//! Backpropagation through time, RMSProp, initialization, the soft
//! orthogonality penalty and finite-difference gradient checks.

pub mod backprop;
pub mod gradcheck;
pub mod init;
pub mod optim;

pub use backprop::{backward, loss_and_gradients, GradNorm, Gradients};
pub use gradcheck::{check_gradients, grad_check, GradCheckReport, ParamCheck};
pub use init::{
    init_model, init_transition, ortho_penalty, ortho_penalty_grad, ortho_penalty_step,
    ortho_penalty_step_at, ModelSpec, TransitionInit,
};
pub use optim::{RmsProp, RMSPROP_EPSILON};
