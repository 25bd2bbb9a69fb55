//! Video segment classification: frame aggregators, classifiers, metrics,
//! ensembling and the data formats that tie them together.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod netvlad;
pub mod nextvlad;
pub mod predictions;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{grad_check, Gradients, Graph, Var};
pub use checkpoint::{Bound, ParamStore};
pub use error::{Error, Result};
pub use metrics::{ClassRanking, GroundTruth};
pub use model::{Family, Model, ModelSpec};
pub use predictions::PredictionTable;
pub use rng::SeededRng;
pub use tensor::Tensor;
