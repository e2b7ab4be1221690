//! Two-phase stylization orchestration.
//!
//! Phase 1 ([`invert_and_record`]) drives a latent to its terminal noise
//! state by DDIM inversion, recording query/key/value features at every
//! injection site and planned timestep. Phase 2 ([`sample_with_fusion`])
//! samples forward from the AdaIN-fusion of the content and style terminal
//! latents, replacing each injection site's self-attention with the fused
//! kernel over the cached features. The plan is shared verbatim between
//! phases, so every fused lookup lands on the exact timestep the features
//! were recorded at.

use ndarray::{Array2, Array4};

use crate::attention::{adain, AdainScope, FeatureMap};
use crate::cache::{CacheKey, FeatureStore, Role};
use crate::codec::{ImageBuffer, LatentCodec};
use crate::denoiser::{
    cfg_combine, validate_backend, AttentionHooks, Conditioning, DenoiserBackend, FuseParams,
    HookMode, SiteId,
};
use crate::error::{Error, Result};
use crate::schedule::{Latent, NoiseSchedule, TimestepPlan};

/// Which self-attention sites receive feature recording and fused injection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum InjectionSites {
    /// Every site on the backend's decoding (upsampling) half — the default.
    #[default]
    DecoderHalf,
    /// Every self-attention site.
    All,
    /// An explicit site list; unknown ids are rejected.
    Explicit(Vec<SiteId>),
}

/// Knobs of one stylization job. The defaults are the reference settings:
/// 30 steps, guidance 1 during inversion and 5 during forward sampling,
/// query blend 0.8/0.2.
#[derive(Debug, Clone)]
pub struct StylizeConfig {
    /// Weight of the cached content query in the fused attention blend.
    pub alpha: f64,
    /// Weight of the live query; `alpha + beta` must equal 1.
    pub beta: f64,
    pub steps: usize,
    pub cfg_inversion: f64,
    pub cfg_forward: f64,
    pub injection_sites: InjectionSites,
    pub eps_guard: f64,
    /// Reproducibility seed carried in the job description (consumed by
    /// backend construction; the sampling loops themselves are
    /// deterministic).
    pub seed: u64,
    pub conditioning: Conditioning,
    pub adain_scope: AdainScope,
    /// Keep the per-step forward trajectory in the result.
    pub keep_trajectory: bool,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        StylizeConfig {
            alpha: 0.8,
            beta: 0.2,
            steps: 30,
            cfg_inversion: 1.0,
            cfg_forward: 5.0,
            injection_sites: InjectionSites::DecoderHalf,
            eps_guard: 1e-5,
            seed: 0,
            conditioning: Conditioning::null(4, 16),
            adain_scope: AdainScope::Merged,
            keep_trajectory: false,
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Constraint(format!(
                "alpha + beta must equal 1, got {} + {}",
                self.alpha, self.beta
            )));
        }
        if self.steps < 1 {
            return Err(Error::Parameter("steps must be >= 1".into()));
        }
        if self.cfg_inversion < 0.0 || self.cfg_forward < 0.0 {
            return Err(Error::Parameter(
                "guidance scales must be non-negative".into(),
            ));
        }
        if !(self.eps_guard > 0.0 && self.eps_guard.is_finite()) {
            return Err(Error::Parameter(
                "eps_guard must be a small positive real".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`stylize`].
#[derive(Debug)]
pub struct StylizeResult {
    pub latent: Latent,
    pub image: ImageBuffer,
    /// The feature store populated during the inversion phase (content and
    /// style roles).
    pub store: FeatureStore,
    /// Forward-phase latents after each step, newest last, when requested.
    pub trajectory: Option<Vec<Latent>>,
}

/// Expands the injection-site policy against a concrete backend.
pub fn resolve_injection_sites(
    backend: &dyn DenoiserBackend,
    sites: &InjectionSites,
) -> Result<Vec<SiteId>> {
    match sites {
        InjectionSites::All => Ok(backend.list_attention_sites()),
        InjectionSites::DecoderHalf => Ok(backend.decoder_attention_sites()),
        InjectionSites::Explicit(list) => {
            let known = backend.list_attention_sites();
            let mut out = Vec::new();
            for site in list {
                if !known.contains(site) {
                    return Err(Error::UnknownSite(site.to_string()));
                }
                if !out.contains(site) {
                    out.push(site.clone());
                }
            }
            Ok(out)
        }
    }
}

/// Inversion phase for one image: runs the plan in increasing-timestep order
/// under `cfg_inversion`, recording query/key/value features (key/value only
/// for the style role) at every injection site, and returns the terminal
/// latent.
pub fn invert_and_record(
    latent: &Latent,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    store: &mut FeatureStore,
    role: Role,
    config: &StylizeConfig,
) -> Result<Latent> {
    config.validate()?;
    let sites = resolve_injection_sites(backend, &config.injection_sites)?;
    let cond = &config.conditioning;
    let mut x = latent.clone();
    let mut t_cur = 0u32;
    for t_next in plan.ascending() {
        let mut hooks = AttentionHooks::passthrough();
        for site in &sites {
            hooks.set_mode(site.clone(), HookMode::Record);
        }
        // With guidance 1 a single conditional evaluation suffices; the
        // recording always comes from the conditional branch.
        let eps = if config.cfg_inversion == 1.0 {
            backend.predict_noise(&x, t_next, cond, &mut hooks)?
        } else {
            let e_c = backend.predict_noise(&x, t_next, cond, &mut hooks)?;
            let e_u = backend.predict_noise(
                &x,
                t_next,
                &cond.null_like(),
                &mut AttentionHooks::passthrough(),
            )?;
            cfg_combine(&e_u, &e_c, config.cfg_inversion)?
        };
        let recorded = hooks.take_recorded();
        if recorded.len() != sites.len() {
            return Err(Error::AdapterContract(format!(
                "backend recorded {} sites but {} were hooked",
                recorded.len(),
                sites.len()
            )));
        }
        for (site, feats) in recorded {
            let feats = match role {
                Role::Content => feats,
                Role::Style => feats.without_query(),
            };
            store.record(CacheKey::new(t_next, site, role), feats)?;
        }
        x = schedule.invert_step(&x, &eps, t_cur, t_next)?;
        t_cur = t_next;
    }
    Ok(x)
}

/// AdaIN fusion of the two terminal latents: per channel, spatial statistics
/// of the content latent are replaced by the style latent's.
pub fn fuse_initial_latents(z_c: &Latent, z_s: &Latent, eps_guard: f64) -> Result<Latent> {
    if z_c.dim() != z_s.dim() {
        return Err(Error::Shape(format!(
            "content latent {:?} and style latent {:?} differ",
            z_c.dim(),
            z_s.dim()
        )));
    }
    let fused = adain(&latent_as_map(z_c), &latent_as_map(z_s), eps_guard)?;
    Ok(map_as_latent(&fused, z_c.dim()))
}

fn latent_as_map(z: &Latent) -> FeatureMap {
    let (_, c, h, w) = z.dim();
    Array2::from_shape_fn((h * w, c), |(t, ch)| z[(0, ch, t / w, t % w)])
}

fn map_as_latent(m: &FeatureMap, dim: (usize, usize, usize, usize)) -> Latent {
    let (_, c, h, w) = dim;
    Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| m[(y * w + x, ch)])
}

/// Forward phase: samples the plan in decreasing-timestep order under
/// `cfg_forward`, with every injection site running the fused-attention
/// kernel over the features cached at the matching timestep. Both guidance
/// branches receive the same injection.
pub fn sample_with_fusion(
    z_start: &Latent,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    store: &FeatureStore,
    config: &StylizeConfig,
) -> Result<Latent> {
    Ok(fused_sampling_loop(z_start, backend, schedule, plan, store, config, false)?.0)
}

fn fused_sampling_loop(
    z_start: &Latent,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    store: &FeatureStore,
    config: &StylizeConfig,
    keep_trajectory: bool,
) -> Result<(Latent, Option<Vec<Latent>>)> {
    config.validate()?;
    let sites = resolve_injection_sites(backend, &config.injection_sites)?;
    let cond = &config.conditioning;
    let steps = plan.steps();
    let mut x = z_start.clone();
    let mut trajectory = keep_trajectory.then(Vec::new);
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = if config.cfg_forward == 1.0 {
            let mut hooks = build_fuse_hooks(store, t, &sites, config)?;
            backend.predict_noise(&x, t, cond, &mut hooks)?
        } else {
            let mut hooks_u = build_fuse_hooks(store, t, &sites, config)?;
            let e_u = backend.predict_noise(&x, t, &cond.null_like(), &mut hooks_u)?;
            let mut hooks_c = build_fuse_hooks(store, t, &sites, config)?;
            let e_c = backend.predict_noise(&x, t, cond, &mut hooks_c)?;
            cfg_combine(&e_u, &e_c, config.cfg_forward)?
        };
        x = schedule.denoise_step(&x, &eps, t, t_prev)?;
        if let Some(traj) = &mut trajectory {
            traj.push(x.clone());
        }
    }
    Ok((x, trajectory))
}

fn build_fuse_hooks<'s>(
    store: &'s FeatureStore,
    t: u32,
    sites: &[SiteId],
    config: &StylizeConfig,
) -> Result<AttentionHooks<'s>> {
    let mut hooks = AttentionHooks::passthrough();
    for site in sites {
        let content = store.lookup(&CacheKey::new(t, site.clone(), Role::Content))?;
        let style = store.lookup(&CacheKey::new(t, site.clone(), Role::Style))?;
        hooks.set_mode(
            site.clone(),
            HookMode::Fuse(FuseParams {
                content,
                style,
                alpha: config.alpha,
                beta: config.beta,
                eps_guard: config.eps_guard,
                scope: config.adain_scope,
            }),
        );
    }
    Ok(hooks)
}

/// Plain invert-then-sample round trip with no recording, no injection and
/// guidance 1 in both directions; the reference a stylized output is
/// compared against.
pub fn reconstruct(
    latent: &Latent,
    backend: &dyn DenoiserBackend,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    cond: &Conditioning,
) -> Result<Latent> {
    let mut x = latent.clone();
    let mut t_cur = 0u32;
    for t_next in plan.ascending() {
        let eps = backend.predict_noise(&x, t_next, cond, &mut AttentionHooks::passthrough())?;
        x = schedule.invert_step(&x, &eps, t_cur, t_next)?;
        t_cur = t_next;
    }
    let steps = plan.steps();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = backend.predict_noise(&x, t, cond, &mut AttentionHooks::passthrough())?;
        x = schedule.denoise_step(&x, &eps, t, t_prev)?;
    }
    Ok(x)
}

/// End-to-end stylization: encode both images, invert both while recording
/// features, fuse the terminal latents, sample forward with fused attention,
/// decode. Deterministic for a fixed backend and config.
pub fn stylize(
    content: &ImageBuffer,
    style: &ImageBuffer,
    backend: &dyn DenoiserBackend,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    config: &StylizeConfig,
) -> Result<StylizeResult> {
    config.validate()?;
    validate_backend(backend)?;
    let z_c = codec.encode(content)?;
    let z_s = codec.encode(style)?;
    if z_c.dim() != z_s.dim() {
        return Err(Error::Shape(format!(
            "content latent {:?} and style latent {:?} differ; resize the style image to the content image's dimensions",
            z_c.dim(),
            z_s.dim()
        )));
    }
    let plan = schedule.plan_timesteps(config.steps)?;
    let mut store = FeatureStore::new();
    let z_c_t = invert_and_record(
        &z_c,
        backend,
        schedule,
        &plan,
        &mut store,
        Role::Content,
        config,
    )?;
    let z_s_t = invert_and_record(
        &z_s,
        backend,
        schedule,
        &plan,
        &mut store,
        Role::Style,
        config,
    )?;
    let z_fused = fuse_initial_latents(&z_c_t, &z_s_t, config.eps_guard)?;
    let (latent, trajectory) = fused_sampling_loop(
        &z_fused,
        backend,
        schedule,
        &plan,
        &store,
        config,
        config.keep_trajectory,
    )?;
    let image = codec.decode(&latent)?;
    Ok(StylizeResult {
        latent,
        image,
        store,
        trajectory,
    })
}
