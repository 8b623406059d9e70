//! Attentional graph convolutional network (AGCN) for audio-visual scene
//! classification: log-Mel front end, residual backbone, attention fusion,
//! salient/contextual scene graphs, spectral graph convolution and training.

pub mod audio;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod input;
pub mod model;
pub mod overlay;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use model::{Agcn, AgcnConfig, Modality};
pub use params::ParamRegistry;
pub use tensor::Tensor;
