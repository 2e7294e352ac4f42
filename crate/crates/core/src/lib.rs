//! Verified robustness bounds for feed-forward and convolutional networks
//! with ReLU, sigmoid, tanh and arctan activations and max pooling.

pub mod certify;
pub mod error;
pub mod maxpool;
pub mod model;
pub mod oracle;
pub mod propagate;
pub mod relaxation;

pub use error::{Error, Result};
