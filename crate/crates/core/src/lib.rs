//! Spatiotemporal 3D residual networks for sperm-motility classification.
//!
//! The crate carries its own tensor type and reverse-mode differentiation
//! engine ([`autodiff`]), residual building blocks ([`blocks`]), the three
//! network variants ([`models`]), the Adam/one-cycle training recipe
//! ([`optim`]), the frame and tabular input pipeline ([`data`]) and the
//! training/evaluation driver with checkpoint I/O ([`train`]).

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod exec;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
