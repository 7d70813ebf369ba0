pub mod error;
pub mod ptb;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod darksynth;
pub mod photon;
pub mod metrics;
pub mod sensorsim;
