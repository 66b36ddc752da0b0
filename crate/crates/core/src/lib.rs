//! LDVAE-T: a transformer-encoded Dirichlet variational autoencoder for
//! hyperspectral unmixing with bundled (Gaussian) endmembers.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: a small define-by-run autodiff tape over `f64` tensors,
//!   special functions and reparameterised Gamma sampling.
//! * [`data`]: cube I/O, patches, splits, PPI and bundle estimation, and a
//!   synthetic scene generator.
//! * [`model`]: tokenizer, transformer encoder, Dirichlet head and the
//!   two-MLP bundle decoder, plus the binary checkpoint format.
//! * [`losses`]: reconstruction, Dirichlet KL, abundance and bundle KL terms
//!   and the annealed total.
//! * [`metrics`]: SAD, RMSE, endmember matching and report export.
//! * [`train`]: Adam, the epoch loop and `fit`.
//! * [`cli`]: the `unmix-ldvae` command-line surface.

pub mod cli;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod train;
