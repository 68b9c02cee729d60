//! SurVAE flows: composable bijective, surjective and stochastic layers with
//! exact or bounded log-likelihoods.

pub mod ad;
pub mod ckpt;
pub mod data;
pub mod dist;
pub mod docs;
pub mod error;
pub mod flow;
pub mod layers;
pub mod nn;
pub mod noise;
pub mod oracle;
pub mod presets;
pub mod train;

pub use ad::{Parameter, Parameterized, Tape, Tensor, Var};
pub use dist::{DistSpec, Distribution};
pub use error::{Error, Result};
pub use flow::{EvalKind, EvalResult, Flow, FlowSpec};
pub use noise::{Noise, NoiseBundle};
pub use ckpt::TrainerState;
pub use data::Dataset;
pub use flow::BaseSpec;
pub use layers::{LayerSpec, Orientation, Transform};
pub use oracle::{Grid, McEstimate};
pub use train::{TraceRow, TrainConfig, Trainer};
