//! Single-image body mesh recovery through latent-conditioned feature fields.
//!
//! The pipeline: a convolutional encoder turns an image into a foreground
//! latent, a neural field conditioned on that latent is volume-rendered into a
//! small feature map for any horizontal viewing direction, and an iterative
//! regressor reads body pose, shape, and camera parameters off that map.
//! Because the field can be rendered from directions other than the one the
//! photo was taken from, training can supervise those imagined views too.
//!
//! Everything numeric is generic over the scalar type through [`Scalar`];
//! `f64` aliases are exported at the crate root and are what the CLI uses.

pub mod body_model;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod fields;
pub mod losses;
pub mod mat;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regressor;
pub mod scalar;
pub mod silhouette;
pub mod synth;
pub mod tape;
pub mod train;

pub use mat::Mat;
pub use scalar::Scalar;
pub use tape::{Tape, Var};

/// Scalar type the CLI and the shipped tooling run at.
pub type Real = f64;

pub type Mat64 = Mat<f64>;
pub type Mat32 = Mat<f32>;
pub type Tape64 = Tape<f64>;
