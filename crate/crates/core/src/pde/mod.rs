//! 2D incompressible Navier–Stokes data: spectral solver, corpus generation,
//! storage and windowing.

mod dataset;
mod solver;
mod windows;

pub use dataset::{
    decode_dataset, encode_dataset, gaussian_random_field, generate_dataset, load_dataset, save_dataset, Split,
    TrajectorySet, FORMAT_VERSION,
};
pub use solver::{solve_navier_stokes, wavenumber, Fft2, NavierStokes, SolverConfig, Spectral};
pub use windows::{make_bundled_windows, BundledWindow};
