//! Decoding engine for vision-language models that fuses next-token
//! distributions conditioned on an image and on a randomly transformed copy
//! of it, alongside the contrastive baselines (visual contrastive decoding
//! and mutual-information decoding) and the POPE, CHAIR and MME scorers.
//!
//! The model lives behind [`provider`]; everything here works in token-id
//! space against a [`provider::ProviderHandle`].

pub mod decoding;
pub mod dist;
pub mod eval;
pub mod image;
pub mod provider;
pub mod rng;
pub mod selector;
pub mod transforms;

pub use decoding::{
    decode, run_session, DecodeError, DecodeFailure, DecodeOutput, DecodeSession, DecodeTrace, Sampler,
    Strategy, StrategyConfig,
};
pub use dist::{combine_unmasked, linear_combine, DistError, TokenDistribution, TokenId, Weights};
pub use image::{ImageBuffer, ImageError};
pub use provider::{Capabilities, DistributionRequest, Endpoint, ImageInput, ProviderError, ProviderHandle};
pub use rng::Rng;
pub use transforms::{apply_transform, diffusion_distort, sample_transform, TransformKind, TransformParams};
