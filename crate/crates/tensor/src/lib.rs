//! Minimal dense-tensor core with reverse-mode automatic differentiation.
//!
//! Values flow through a [`Graph`] that records every op; a single
//! [`Graph::backward`] call deposits gradients into the [`Param`]s that were
//! read and clears the record. Models hold `Param`s, optimizers update them.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{BnMode, Graph, Primitive, Var};
pub use nn::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode, Module};
pub use tensor::{Param, Tensor};
