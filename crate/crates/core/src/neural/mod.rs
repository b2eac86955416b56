//! Small sequence models with hand-derived backpropagation through time:
//! Elman RNN, LSTM, bidirectional LSTM, GRU, and a multi-head attention
//! block feeding a GRU. All arithmetic is `f64`.

mod attention;
mod checkpoint;
mod kernels;
mod model;
mod recurrent;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{Architecture, Batch, FeatureSet, NetConfig, SequenceData, SequenceModel, TensorSpec};
pub use train::{clip_gradient, fit_forecast, fit_panel, forecast_panel, train, TrainReport};
