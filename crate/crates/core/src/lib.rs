//! Split learning over row and column shuffled Transformer encoders.
//!
//! The edge owns the patch embedding (`edgemodel`) and the classification head,
//! the cloud owns a stack of Transformer encoder blocks (`encoder`). Features
//! crossing the boundary are row/column shuffled (`shuffle`), and because every
//! operator in the encoder is permutation equivalent the cloud trains exactly the
//! same model it would have trained on plain features, up to conjugation of its
//! weights by the secret column permutation.

pub mod attack;
pub mod config;
pub mod data;
pub mod edgemodel;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod info;
pub mod permutation;
pub mod proto;
pub mod rngs;
pub mod shuffle;
pub mod store;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use permutation::{Permutation, ShuffleKey};
pub use tensor::Matrix;
