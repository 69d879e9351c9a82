//! Dense tensors, a recorded op graph with reverse-mode differentiation, and
//! a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{softmax_rows, BnConfig, BnStats, Graph, Mode, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
