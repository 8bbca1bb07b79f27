//! Learned tomographic reconstruction trained with an entropic Wasserstein loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] and [`rng`]: pixel grids, nonnegative measures and reproducible randomness.
//! * [`transport`]: cost kernels, Sinkhorn scaling with an exact unrolled gradient,
//!   spectral kernel application and an exact min-cost-flow oracle.
//! * [`tomography`]: a matched parallel-beam ray transform / backprojection pair.
//! * [`datagen`]: random-circle phantoms with per-circle misalignment and noisy sinograms.
//! * [`diffnet`]: a small reverse-mode engine and the learned primal-dual network.
//! * [`training`]: ADAM, cosine annealing, gradient clipping and the training loop.
//! * [`io`]: raw binary formats and PGM output.

pub mod datagen;
pub mod diffnet;
pub mod error;
pub mod grid;
pub mod io;
pub mod rng;
pub mod scalar;
pub mod tomography;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{add_background, mass, normalize_mass, DiscreteMeasure, PixelGrid};
pub use rng::SeededRng;
