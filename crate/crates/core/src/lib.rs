//! Masked-autoencoder test-time training (MATE) for point-cloud classification.
//!
//! The crate is `no_std` with `alloc`. It holds every algorithmic piece of the
//! pipeline: geometry kernels ([`geom`]), the corruption suite ([`corrupt`]),
//! a small reverse-mode autodiff engine and the point transformer built on it
//! ([`autodiff`], [`nn`]), joint training ([`train`]), the test-time training
//! engine ([`ttt`]) and the synthetic shape generator ([`datagen`]).
//!
//! File formats, configuration and the command-line front end live in the
//! companion `mate` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod corrupt;
pub mod datagen;
mod error;
pub mod geom;
pub mod hull;
pub mod nn;
pub mod rng;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
pub use geom::{PointCloud, TokenizedCloud};
