//! Causal graphical normalizing flows for interventional and counterfactual
//! inference on structural causal models.

pub mod baselines;
pub mod causal;
pub mod dag;
pub mod dequant;
pub mod error;
pub mod estimand;
pub mod experiment;
pub mod flow;
pub mod gcomp_oracle;
pub mod intervention;
pub mod nn;
pub mod quadrature;
pub mod root;
pub mod scalar;
pub mod scm_sim;
pub mod train;

pub use dag::{CausalDag, NodeKind, NodeSpec};
pub use error::{Error, Result};
pub use flow::{FlowArchitecture, FlowModel, SampleBatch, Standardizer};
pub use intervention::InterventionSpec;
pub use nn::Matrix;
pub use scalar::Scalar;

pub type FlowModelF64 = FlowModel<f64>;
pub type FlowModelF32 = FlowModel<f32>;
pub use train::{fit, TrainConfig, TrainLog};
