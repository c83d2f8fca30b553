//! Convolutional network engine: layer kernels, model graph, initialization,
//! optimizer and serialization.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod init;
pub mod io;
pub mod model;
pub mod optim;
pub mod pool;
pub mod spec;

pub use batchnorm::{BatchNorm, Mode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use dense::{fc_forward, Dense, DenseGrads};
pub use init::glorot_init;
pub use io::{decode_model, decode_optimizer, encode_model, encode_optimizer, load_model, save_model};
pub use model::{Forward, Gradients, Layer, Model};
pub use optim::{lr_schedule, sgd_nesterov_step, LrSchedule, OptimizerState};
pub use pool::{maxpool_backward, maxpool_forward, PoolGeometry};
pub use spec::{build_architecture, nominal_input, ArchitectureRef, LayerSpec, NetworkSpec, CATALOG};
