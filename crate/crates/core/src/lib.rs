pub mod eval;
pub mod experiment;
pub mod moe;
pub mod nn;
pub mod retrieval;
mod scalar;
pub mod seed;
pub mod taxonomy;
pub mod vae;

pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type DenseNet64 = nn::DenseNet<f64>;
pub type DenseNet32 = nn::DenseNet<f32>;
pub type ModalityVae64 = vae::ModalityVae<f64>;
pub type ModalityVae32 = vae::ModalityVae<f32>;
pub type Mmvae64 = moe::MmvaeModel<f64>;
pub type Mmvae32 = moe::MmvaeModel<f32>;
pub type Dataset64 = taxonomy::PairedDataset<f64>;
pub type Dataset32 = taxonomy::PairedDataset<f32>;
