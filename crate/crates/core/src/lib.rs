//! Label-efficient tissue classification on paired H&E / IHC patches.
//!
//! The numeric core is generic over the floating-point type; the pipeline
//! itself runs in `f64` through the aliases below.

pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io_util;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Encoder = models::EncoderModel<f64>;
pub type Autoencoder = models::AutoencoderModel<f64>;
pub type Head = models::ClassifierHead<f64>;
pub type Supervised = models::SupervisedClassifier<f64>;
pub type Optimizer = tensor::Optimizer<f64>;
