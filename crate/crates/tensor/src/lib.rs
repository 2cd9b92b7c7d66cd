//! Dense `f64` tensors with reverse-mode differentiation, Jacobi linear
//! algebra kernels and the AdamW optimizer.

pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    check_gradients, check_gradients_floor, check_gradients_many, relative_error, relative_error_floor, GradCheckReport,
};
pub use linalg::{eig_sym, svd, Svd, SymEig};
pub use optim::{onecycle_lr, AdamW, OneCycle, OptimState, ParamScale, StepOutcome};
pub use tape::{Gradients, Tape, Unary, Var, ATANH_CLAMP, MASK_NEG};
pub use tensor::Tensor;
