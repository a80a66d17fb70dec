//! Dense tensors, reverse-mode autodiff, Adam, and a finite-difference checker.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, NamedParam};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::{cosine_sim, l2_normalize, matmul, softmax, Real, Tensor};
