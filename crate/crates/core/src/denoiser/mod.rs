//! Pluggable noise-prediction backends with hookable self-attention sites.
//!
//! A backend exposes its self-attention blocks as named sites. During a
//! `predict_noise` call every site runs in one of three modes:
//!
//! - `Passthrough` — plain self-attention;
//! - `Record` — plain self-attention, but the projected query/key/value
//!   arrays are handed back to the caller;
//! - `Fuse` — the site's output is computed by
//!   [`attention::fused_attention`](crate::attention::fused_attention) over
//!   cached content/style features.
//!
//! The crate ships a deterministic toy U-Net in [`toy`]; external
//! latent-diffusion hosts implement [`DenoiserBackend`] with the same
//! interception semantics.

pub mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array2;

use crate::attention::AdainScope;
use crate::cache::CachedFeatures;
use crate::error::{Error, Result};
use crate::schedule::Latent;

/// Stable identifier of one self-attention block inside a backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(String);

impl SiteId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for SiteId {
    fn from(s: &str) -> Self {
        SiteId(s.to_string())
    }
}

impl From<String> for SiteId {
    fn from(s: String) -> Self {
        SiteId(s)
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Context embedding consumed by cross-attention. The text encoder is out
/// of scope; the null conditioning is an all-zeros matrix of the configured
/// shape and acts as the neutral prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    embedding: Array2<f64>,
}

impl Conditioning {
    pub fn new(embedding: Array2<f64>) -> Result<Self> {
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter(
                "conditioning embedding must be finite".into(),
            ));
        }
        Ok(Conditioning { embedding })
    }

    pub fn null(tokens: usize, dim: usize) -> Self {
        Conditioning {
            embedding: Array2::zeros((tokens, dim)),
        }
    }

    /// Null conditioning with this embedding's shape (the unconditional
    /// branch of classifier-free guidance).
    pub fn null_like(&self) -> Self {
        let (t, d) = self.embedding.dim();
        Self::null(t, d)
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn tokens(&self) -> usize {
        self.embedding.dim().0
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim().1
    }
}

/// Cached features plus fusion parameters for one site running in `Fuse`
/// mode.
#[derive(Debug, Clone)]
pub struct FuseParams<'a> {
    pub content: &'a CachedFeatures,
    pub style: &'a CachedFeatures,
    pub alpha: f64,
    pub beta: f64,
    pub eps_guard: f64,
    pub scope: AdainScope,
}

/// Per-site interception mode for one `predict_noise` call.
#[derive(Debug, Clone, Default)]
pub enum HookMode<'a> {
    #[default]
    Passthrough,
    Record,
    Fuse(FuseParams<'a>),
}

/// Per-call hook state: requested modes in, recorded features out.
///
/// Hook state lives for a single `predict_noise` call; sites not named in
/// the mode map run as passthrough.
#[derive(Debug, Default)]
pub struct AttentionHooks<'a> {
    modes: BTreeMap<SiteId, HookMode<'a>>,
    recorded: BTreeMap<SiteId, CachedFeatures>,
}

impl<'a> AttentionHooks<'a> {
    /// All sites passthrough.
    pub fn passthrough() -> Self {
        Self::default()
    }

    pub fn set_mode(&mut self, site: impl Into<SiteId>, mode: HookMode<'a>) {
        self.modes.insert(site.into(), mode);
    }

    pub fn mode_for(&self, site: &SiteId) -> &HookMode<'a> {
        static PASSTHROUGH: HookMode<'static> = HookMode::Passthrough;
        self.modes.get(site).unwrap_or(&PASSTHROUGH)
    }

    /// Sites named in the mode map (used by backends to reject hooks on
    /// sites they do not expose).
    pub fn hooked_sites(&self) -> impl Iterator<Item = &SiteId> {
        self.modes.keys()
    }

    /// Called by the backend when a site in `Record` mode has produced its
    /// projected query/key/value arrays.
    pub fn push_recorded(&mut self, site: SiteId, feats: CachedFeatures) {
        self.recorded.insert(site, feats);
    }

    /// Drains everything recorded during the last call.
    pub fn take_recorded(&mut self) -> BTreeMap<SiteId, CachedFeatures> {
        std::mem::take(&mut self.recorded)
    }
}

/// An opaque noise predictor with enumerable self-attention hook sites.
///
/// Implementations must be deterministic: identical inputs and hook modes
/// produce bitwise-identical outputs across calls and processes. Adapters
/// for external latent-diffusion hosts implement exactly this trait; latent
/// geometry is reported by the adapter via [`DenoiserBackend::latent_channels`].
pub trait DenoiserBackend {
    /// Channel count of the latents this backend operates on.
    fn latent_channels(&self) -> usize;

    /// Every self-attention site, in a deterministic, duplicate-free order.
    fn list_attention_sites(&self) -> Vec<SiteId>;

    /// The subset of sites on the decoding (upsampling) half; the default
    /// injection-site policy targets these. Backends without a meaningful
    /// split report all sites.
    fn decoder_attention_sites(&self) -> Vec<SiteId> {
        self.list_attention_sites()
    }

    /// Predicts the noise component of `x_t` at timestep `t` under the given
    /// conditioning, honoring the per-site hook modes.
    fn predict_noise(
        &self,
        x_t: &Latent,
        t: u32,
        cond: &Conditioning,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent>;
}

/// Classifier-free guidance: `eps_uncond + scale * (eps_cond - eps_uncond)`.
///
/// Callers short-circuit `scale == 1` to a single conditional evaluation;
/// this function just applies the combination.
pub fn cfg_combine(eps_uncond: &Latent, eps_cond: &Latent, scale: f64) -> Result<Latent> {
    if eps_uncond.dim() != eps_cond.dim() {
        return Err(Error::Shape(format!(
            "guidance branches disagree: {:?} vs {:?}",
            eps_uncond.dim(),
            eps_cond.dim()
        )));
    }
    Ok(eps_uncond + &((eps_cond - eps_uncond) * scale))
}

/// Checks the adapter contract on a backend's site enumeration: sites must
/// be non-empty and duplicate-free, and decoder sites must be a subset.
pub fn validate_backend(backend: &dyn DenoiserBackend) -> Result<()> {
    let sites = backend.list_attention_sites();
    if sites.is_empty() {
        return Err(Error::AdapterContract(
            "backend exposes no self-attention sites".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for site in &sites {
        if !seen.insert(site.clone()) {
            return Err(Error::AdapterContract(format!(
                "backend reports duplicate attention site '{site}'"
            )));
        }
    }
    for site in backend.decoder_attention_sites() {
        if !seen.contains(&site) {
            return Err(Error::AdapterContract(format!(
                "decoder site '{site}' is not in the site list"
            )));
        }
    }
    Ok(())
}
