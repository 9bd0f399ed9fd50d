//! Minimal dense real/complex linear algebra plus a reverse-mode autodiff
//! tape sufficient for every gradient this toolkit needs.

pub mod complexmat;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use complexmat::ComplexMatrix;
pub use tape::{Tape, Var};
pub use tensor::RealTensor;
