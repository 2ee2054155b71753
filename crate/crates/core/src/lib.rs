pub mod error;
pub mod numerics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod geometry;
pub mod nn;
pub mod boxrpb;
pub mod attention;
pub mod decoder;
pub mod matching;
pub mod loss;
pub mod eval;
pub mod cost;
pub mod synth;
pub mod train;

pub type Tensor = numerics::Tensor<f64>;
pub type BBox = geometry::BBox<f64>;
pub type GroundTruth = matching::GroundTruth<f64>;
pub type Model = decoder::Model<f64>;
pub type Tape = numerics::Tape<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type AdamW = numerics::AdamW<f64>;
