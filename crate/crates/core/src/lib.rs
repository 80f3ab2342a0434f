//! Multi-head deeply supervised classifiers trained with a collaborative,
//! layer-wise discriminative loss.
//!
//! A [`network::Model`] is a body of layers with classifier heads attached
//! after chosen weight layers. Each head's cross-entropy is modulated by how
//! badly the other heads do on the same sample ([`loss`]), gradients are
//! computed with that modulation held fixed ([`backprop`]), and prediction
//! minimizes the same weighted objective over labels ([`inference`]).

pub mod backprop;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod loss;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
