//! Numerical laboratory for low Mach number limits of isentropic Euler flows.
//!
//! The crate is organised bottom-up:
//!
//! * [`state_space`]: fluid states, physical parameters and the lifting maps
//!   into the relaxed Euler state space `(rho, m, M, Q)`.
//! * [`young_measure`]: finitely supported Young measures on spacetime grids,
//!   pushforwards, pairings and the spectral pressure reconstruction.
//! * [`relaxed_operator`]: the first-order operator of the relaxed Euler
//!   system, its Fourier symbol, wave cone and negative-norm residuals.
//! * [`jensen`]: the exact di-atomic Jensen test and certified upper bounds
//!   on the (truncated) quasiconvex envelope.
//! * [`compressible_solver`]: explicit finite-volume solver on the periodic
//!   unit square with stiff pressure `rho^gamma / eps`.
//! * [`limit_driver`]: Mach-number ladders and the diagnostics built on them.
//!
//! Data-parallel loops go through [`par`]; with the default `parallel`
//! feature they run on rayon, otherwise sequentially.

pub mod compressible_solver;
pub mod error;
pub mod fft;
pub mod jensen;
pub mod limit_driver;
pub mod optimize;
pub mod par;
pub mod relaxed_operator;
pub mod snapshot;
pub mod state_space;
pub mod young_measure;

pub use error::{Error, Result};
