//! Benchmark domains behind the explicit and generative model interfaces.

pub mod kmeans;
pub mod lightdark;
pub mod rocksample;
pub mod tiger;

pub use kmeans::{kmeans_discretize, KmeansError, Quantizer};
pub use lightdark::{lightdark, LightDark, LightDarkState};
pub use rocksample::{rocksample, rocksample_from_seed, RockSample, RockSampleState};
pub use tiger::{tiger_generative, tiger_model};
