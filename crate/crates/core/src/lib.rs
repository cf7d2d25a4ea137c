//! Dataset condensation toolkit: distribution discrepancies between a
//! training set and a small synthetic set, condensation objectives that
//! minimize them, and helpers that check the relations between the
//! discrepancies on concrete data.

pub mod augment;
pub mod condense;
pub mod data;
pub mod discrepancy;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod matrix;
pub mod models;
pub mod seed;
pub mod spaces;

pub use data::{LabeledDataset, SyntheticDataset};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use models::Mlp;
