//! Spectrogram autoencoder with a discrete bottleneck.

mod codebook;
mod loss;
mod nets;

pub use codebook::{quantize_graph, CodeSequence, Codebook, QuantizedVars, ReinitConfig};
pub use loss::{
    lsgan_discriminator, lsgan_generator, vq_loss, AdversarialLoss, MultiResolutionStft, VqLossTerms,
    DEFAULT_COMMITMENT, DEFAULT_LAMBDA_ADV, MRSTFT_RESOLUTIONS,
};
pub use nets::{log_features, ConvNetConfig, ConvResNet, DecoderConfig, EncoderConfig, FEATURE_FLOOR};
