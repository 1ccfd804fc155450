//! IARC task-switching benchmark with small attention models.
//!
//! * [`stream`]: token streams, the next-symbol oracle and control-tape encoding
//! * [`tensor`], [`autodiff`], [`optim`], [`gradcheck`], [`checkpoint`]: a
//!   small reverse-mode autodiff stack with momentum SGD
//! * [`attention`]: causal DPA / EA attention maps with ALiBi
//! * [`models`]: transformer, cisformer, block-causal MLP and LSTM
//! * [`train`]: training, evaluation and the task-subset ablation

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod stream;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, AttnKind, AttnMatrix, ScoreMatrix};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use models::{Arch, Model, ModelSpec};
pub use optim::SgdMomentum;
pub use stream::{Control, EncodedBatch, OracleState, Task, TaskConfig, TaskSet, TokenStream};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainReport};
