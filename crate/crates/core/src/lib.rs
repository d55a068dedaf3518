pub mod alchemy;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod normnet;
pub mod ops;
pub mod patch;
pub mod siteforge;
pub mod tensor;
pub mod wct;

pub use checkpoint::ModelCheckpoint;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use linalg::{eigh, eigh_backward, EigenDecomposition};
pub use metrics::{MetricBundle, ScoredLabels};
pub use normnet::{NormNet, TrainConfig, TrainReport};
pub use patch::{Label, Patch};
pub use siteforge::{SiteDataset, SiteStyle, Split, SplitSpec};
pub use tensor::{Element, Tensor};
pub use wct::{BlendParam, FeatureStats};
