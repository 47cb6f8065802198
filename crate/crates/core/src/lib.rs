mod codec;
pub mod adaptation;
pub mod analysis;
pub mod dataset;
pub mod mt19937;
pub mod network;
pub mod physics;
pub mod scalar;
pub mod signal;

pub use codec::FormatError;

/// Double-precision emulator, the default for training and checkpoints.
pub type BiLstmModel = network::BiLstm<f64>;
/// Single-precision emulator for faster inference.
pub type BiLstmModelF32 = network::BiLstm<f32>;
pub type LaserParams = physics::VcselParams<f64>;
pub type LaserParamsF32 = physics::VcselParams<f32>;
pub type Receiver = physics::ReceiverParams<f64>;
pub type Taps = signal::FfeTaps<f64>;
pub type Optimizer = network::Adam<f64>;
