//! Dense linear algebra, seeded randomness and finite-difference oracles.

mod fd;
mod linalg;
mod rng;

pub use fd::{fd_grad, fd_grad_mat, fd_hessian_2d, Hessian2d, ASYMMETRY_WARN, DEFAULT_STEP};
pub use linalg::{
    max_eigenvalue_psd, min_eigenvalue_spd, solve_lu, solve_spd, sym2_eigenvalues, Cholesky, Mat,
    Vector,
};
pub use rng::Rng;
