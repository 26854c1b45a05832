//! Streaming conformer transducer with modular domain adaptation.
//!
//! A frozen backbone serves every domain; a domain may replace components
//! with its own parameters or attach bottleneck adapters, and owns exactly
//! those parameters. See [`routing`] for the registry and [`store`] for the
//! bundle format.

pub mod conformer;
pub mod error;
pub mod model;
pub mod routing;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transducer;

pub use conformer::{count_params, encode, EncoderConfig, EncoderOutput, Selector};
pub use error::{Error, Result};
pub use model::{Graph, ModelConfig, Owner, ParamSet};
pub use routing::{DomainId, DomainPlan, MdaModel, ModulePath, Site, Stack};
pub use store::{compose, load_bundle, save_bundle, ParameterBundle};
pub use tensor::{Real, Tape, Tensor};
pub use train::{evaluate, train_backbone, train_domain, TrainConfig};
