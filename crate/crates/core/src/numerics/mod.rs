//! Grid arithmetic, seeded randomness, spectra and least squares.

mod grid;
mod lstsq;
pub mod pfm;
mod rng;
mod spectrum;

pub use grid::{Grid, Shape};
pub use lstsq::{affine_residual, is_valid, lstsq_scale_shift};
pub use rng::{gaussian_grid, RandomSource};
pub use spectrum::{band_energy, band_energy_csv, band_partition, bin_radius, fft2_power, BandMap};
