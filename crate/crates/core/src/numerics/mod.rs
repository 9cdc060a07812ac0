//! Dense real/complex arrays, a symmetric eigensolver, and seeded randomness.

mod complex;
mod eigh;
mod rng;
mod tensor;

pub use complex::{cmatmul, expm, ComplexMatrix};
pub use eigh::{eigh_symmetric, SymmetricEigen};
pub use num_complex::Complex64;
pub use rng::SeededRng;
pub use tensor::{matmul, softmax_rows, RealTensor, MASK_SENTINEL};
