//! Training-free reference-image stylization.
//!
//! The engine runs in two phases against a pluggable noise-prediction
//! backend:
//!
//! 1. **Inversion with feature caching** — both the content and the style
//!    image are driven to their terminal noise latents by deterministic
//!    DDIM inversion, while every hooked self-attention site records its
//!    query/key/value features per timestep into a [`cache::FeatureStore`].
//! 2. **Fused forward sampling** — forward DDIM sampling starts from the
//!    AdaIN-fusion of the two terminal latents; hooked self-attention sites
//!    replace their computation with [`attention::fused_attention`], which
//!    blends the cached content query with the live query, concatenates
//!    content and style keys, and AdaIN-fuses the values.
//!
//! The crate ships a deterministic toy U-Net backend
//! ([`denoiser::toy::ToyUNet`]) and a lossless space-to-depth codec
//! ([`codec::SpaceToDepthCodec`]) so the whole pipeline runs at desk scale;
//! real latent-diffusion hosts plug in behind [`denoiser::DenoiserBackend`]
//! and [`codec::LatentCodec`].

pub mod attention;
pub mod cache;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod schedule;

pub use attention::{AdainScope, FeatureMap, ProjectionWeights, Qkv};
pub use cache::{CacheKey, CachedFeatures, FeatureStore, Role};
pub use codec::{ImageBuffer, LatentCodec, SpaceToDepthCodec};
pub use denoiser::{
    cfg_combine, toy::ToyUNet, toy::ToyUNetConfig, AttentionHooks, Conditioning, DenoiserBackend,
    HookMode, SiteId,
};
pub use error::{Error, Result};
pub use pipeline::{stylize, InjectionSites, StylizeConfig, StylizeResult};
pub use schedule::{Latent, NoiseSchedule, TimestepPlan};
