//! Temporal feature-wise linear modulation (TFiLM) for sequence
//! super-resolution and imputation.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tfilm;
pub mod train;
