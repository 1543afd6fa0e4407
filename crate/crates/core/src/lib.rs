//! Population-graph node classification: phenotypic measure selection and
//! weighting, Chebyshev spectral graph convolutions with multi-layer
//! aggregation, and an auxiliary label-similarity channel.

pub mod cli;
pub mod container;
pub mod dataio;
pub mod error;
pub mod model;
pub mod nn;
pub mod pswe;
pub mod rng;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Ablation, AmaGcn, AmaGcnConfig};
pub use pswe::{MeasureKind, MeasureScore, MeasureSpec, PhenotypeTable};
pub use spectral::{ChebBasis, PopulationGraph};
