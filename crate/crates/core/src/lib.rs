//! Photonic Gaussian-kernel attention.
//!
//! A continuous-variable photonic circuit (displacement loading, a layered
//! beamsplitter mesh, vacuum detection) evaluates a Gaussian-kernel
//! attention score. This crate simulates that circuit two ways, a truncated
//! Fock-space oracle ([`fock`]) and an exact coherent-state fast path
//! ([`coherent`]), builds the score on top ([`kernel`]), and embeds it in a
//! small trainable encoder classifier ([`nn`], [`autodiff`], [`train`]) with
//! an experiment harness ([`data`], [`experiment`]).

pub mod autodiff;
pub mod checkpoint;
pub mod coherent;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fock;
pub mod kernel;
pub mod nn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
