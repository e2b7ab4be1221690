//! Deterministic desk-scale U-Net backend.
//!
//! One resolution level holds a residual block, a self-attention block and a
//! cross-attention block in sequence; levels below the input resolution are
//! reached by average-pool downsampling and left by nearest-neighbor
//! upsampling. All attention sites sit on the upsampling path, so the
//! default decoder-side injection policy covers every site.
//!
//! Weights are drawn from a seeded ChaCha stream in a fixed order, so the
//! same config and seed always yield bitwise-identical predictions. The
//! backend needs no training: the acceptance properties of the surrounding
//! pipeline are invariants of the math, not of prediction quality.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::attention::{project_qkv, scaled_dot_attention, split_heads, ProjectionWeights};
use crate::cache::CachedFeatures;
use crate::denoiser::{AttentionHooks, Conditioning, DenoiserBackend, HookMode, SiteId};
use crate::error::{Error, Result};
use crate::schedule::Latent;

const TEMB_DIM: usize = 32;
const WEIGHTS_MAGIC: [u8; 4] = *b"MSTW";

/// Configuration of the toy backend. `latent_channels` must match the codec
/// in front of it; `base_width` is the hidden channel width at every level.
#[derive(Debug, Clone)]
pub struct ToyUNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub num_heads: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    pub seed: u64,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        ToyUNetConfig {
            latent_channels: 12,
            base_width: 16,
            levels: 2,
            num_heads: 2,
            context_tokens: 4,
            context_dim: 16,
            seed: 0,
        }
    }
}

impl ToyUNetConfig {
    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config(
                "toy backend needs at least one resolution level (zero levels leave no attention sites)".into(),
            ));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        if self.num_heads == 0 || self.base_width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must divide base_width {}",
                self.num_heads, self.base_width
            )));
        }
        if self.context_tokens == 0 || self.context_dim == 0 {
            return Err(Error::Config("conditioning shape must be non-empty".into()));
        }
        Ok(())
    }
}

struct Conv3x3 {
    w: Array4<f64>,
    b: Array1<f64>,
}

impl Conv3x3 {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, gain: f64) -> Self {
        let bound = gain / ((c_in * 9) as f64).sqrt();
        Conv3x3 {
            w: Array4::from_shape_fn((c_out, c_in, 3, 3), |_| uniform(rng, bound)),
            b: Array1::zeros(c_out),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = self.w.dim().0;
        let mut out = Array3::zeros((c_out, h, w));
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = self.b[o];
                    for i in 0..c_in {
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += self.w[(o, i, dy, dx)] * x[(i, sy as usize, sx as usize)];
                            }
                        }
                    }
                    out[(o, y, xx)] = acc;
                }
            }
        }
        out
    }
}

struct LinearLayer {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl LinearLayer {
    fn init(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        LinearLayer {
            w: Array2::from_shape_fn((d_out, d_in), |_| uniform(rng, bound)),
            b: Array1::zeros(d_out),
        }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }
}

struct ResBlock {
    conv1: Conv3x3,
    conv2: Conv3x3,
    time_proj: LinearLayer,
}

impl ResBlock {
    fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        ResBlock {
            conv1: Conv3x3::init(rng, width, width, 1.0),
            conv2: Conv3x3::init(rng, width, width, 1.0),
            time_proj: LinearLayer::init(rng, width, width),
        }
    }

    fn forward(&self, x: &Array3<f64>, temb: &Array1<f64>) -> Array3<f64> {
        let mut a = self.conv1.forward(&silu(x));
        let shift = self.time_proj.forward(temb);
        for (c, mut plane) in a.axis_iter_mut(Axis(0)).enumerate() {
            plane += shift[c];
        }
        let a = self.conv2.forward(&silu(&a));
        x + &a
    }
}

struct SelfAttentionBlock {
    weights: ProjectionWeights,
    site: SiteId,
}

impl SelfAttentionBlock {
    fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize, site: SiteId) -> Self {
        // Tied query/key projections with a strong gain give peaked softmax
        // weights, and identity values make the block a similarity-weighted
        // average over the tokens themselves; the query then genuinely
        // selects tokens instead of blending everything uniformly.
        let bound = 4.0 / (width as f64).sqrt();
        let w_qk = Array2::from_shape_fn((width, width), |_| uniform(rng, bound));
        let weights = ProjectionWeights::new(w_qk.clone(), w_qk, Array2::eye(width), heads)
            .expect("width is validated to be divisible by heads");
        SelfAttentionBlock { weights, site }
    }

    fn forward(&self, x: &Array3<f64>, hooks: &mut AttentionHooks<'_>) -> Result<Array3<f64>> {
        let (c, h, w) = x.dim();
        let phi = flatten_map(x);
        let mode = hooks.mode_for(&self.site).clone();
        let out = match mode {
            HookMode::Passthrough => {
                let qkv = project_qkv(&phi, &self.weights)?;
                scaled_dot_attention(&qkv)? + &phi
            }
            HookMode::Record => {
                let qkv = project_qkv(&phi, &self.weights)?;
                let rec = CachedFeatures::with_query(
                    qkv.q.mapv(|x| x as f32),
                    qkv.k.mapv(|x| x as f32),
                    qkv.v.mapv(|x| x as f32),
                )?;
                hooks.push_recorded(self.site.clone(), rec);
                scaled_dot_attention(&qkv)? + &phi
            }
            HookMode::Fuse(p) => crate::attention::fused_attention(
                &phi,
                p.content,
                p.style,
                p.alpha,
                p.beta,
                &self.weights,
                p.eps_guard,
                p.scope,
            )?,
        };
        Ok(unflatten_map(&out, c, h, w))
    }
}

struct CrossAttentionBlock {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    heads: usize,
}

impl CrossAttentionBlock {
    fn init(rng: &mut ChaCha8Rng, width: usize, ctx_dim: usize, heads: usize) -> Self {
        let bq = 1.0 / (width as f64).sqrt();
        let bc = 1.0 / (ctx_dim as f64).sqrt();
        CrossAttentionBlock {
            w_q: Array2::from_shape_fn((width, width), |_| uniform(rng, bq)),
            w_k: Array2::from_shape_fn((ctx_dim, width), |_| uniform(rng, bc)),
            w_v: Array2::from_shape_fn((ctx_dim, width), |_| uniform(rng, bc)),
            heads,
        }
    }

    fn forward(&self, x: &Array3<f64>, cond: &Conditioning) -> Result<Array3<f64>> {
        let (c, h, w) = x.dim();
        let phi = flatten_map(x);
        let q = split_heads(&phi.dot(&self.w_q), self.heads)?;
        let k = split_heads(&cond.embedding().dot(&self.w_k), self.heads)?;
        let v = split_heads(&cond.embedding().dot(&self.w_v), self.heads)?;
        let out = crate::attention::attention_over(&q, &k, &v)? + &phi;
        Ok(unflatten_map(&out, c, h, w))
    }
}

struct UpGroup {
    res: ResBlock,
    sa: SelfAttentionBlock,
    ca: CrossAttentionBlock,
}

/// The toy backend. Build with [`ToyUNet::new`]; geometry is
/// `(1, latent_channels, h, w)` with `h` and `w` divisible by
/// `2^(levels - 1)`.
pub struct ToyUNet {
    config: ToyUNetConfig,
    time_lin1: LinearLayer,
    time_lin2: LinearLayer,
    stem: Conv3x3,
    downs: Vec<Conv3x3>,
    mid: ResBlock,
    ups: Vec<UpGroup>,
    up_convs: Vec<Conv3x3>,
    head: Conv3x3,
}

impl ToyUNet {
    pub fn new(config: ToyUNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.base_width;
        let time_lin1 = LinearLayer::init(&mut rng, w, TEMB_DIM);
        let time_lin2 = LinearLayer::init(&mut rng, w, w);
        let stem = Conv3x3::init(&mut rng, w, config.latent_channels, 1.0);
        let downs = (1..config.levels)
            .map(|_| Conv3x3::init(&mut rng, w, w, 1.0))
            .collect();
        let mid = ResBlock::init(&mut rng, w);
        let ups = (0..config.levels)
            .map(|l| UpGroup {
                res: ResBlock::init(&mut rng, w),
                sa: SelfAttentionBlock::init(
                    &mut rng,
                    w,
                    config.num_heads,
                    SiteId::from(format!("up.{l}.sa")),
                ),
                ca: CrossAttentionBlock::init(&mut rng, w, config.context_dim, config.num_heads),
            })
            .collect();
        let up_convs = (1..config.levels)
            .map(|_| Conv3x3::init(&mut rng, w, w, 1.0))
            .collect();
        // Small head gain keeps noise predictions mild so long inversion
        // chains stay well conditioned.
        let head = Conv3x3::init(&mut rng, config.latent_channels, w, 0.1);
        Ok(ToyUNet {
            config,
            time_lin1,
            time_lin2,
            stem,
            downs,
            mid,
            ups,
            up_convs,
            head,
        })
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.config
    }

    /// Default null conditioning matching this backend's context shape.
    pub fn null_conditioning(&self) -> Conditioning {
        Conditioning::null(self.config.context_tokens, self.config.context_dim)
    }

    fn time_embed(&self, t: u32) -> Array1<f64> {
        let half = TEMB_DIM / 2;
        let mut emb = Array1::zeros(TEMB_DIM);
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
            emb[2 * i] = (t as f64 * freq).sin();
            emb[2 * i + 1] = (t as f64 * freq).cos();
        }
        self.time_lin2.forward(&silu1(&self.time_lin1.forward(&emb)))
    }

    fn check_input(&self, x_t: &Latent, cond: &Conditioning) -> Result<()> {
        let (b, c, h, w) = x_t.dim();
        if b != 1 {
            return Err(Error::Shape(format!("batch size must be 1, got {b}")));
        }
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels but backend expects {}",
                self.config.latent_channels
            )));
        }
        let factor = 1usize << (self.config.levels - 1);
        if h % factor != 0 || w % factor != 0 || h < factor || w < factor {
            return Err(Error::Shape(format!(
                "latent {h}x{w} not divisible by the downsampling factor {factor}"
            )));
        }
        if cond.dim() != self.config.context_dim {
            return Err(Error::Shape(format!(
                "conditioning dim {} does not match backend context dim {}",
                cond.dim(),
                self.config.context_dim
            )));
        }
        Ok(())
    }

    /// Serializes every weight tensor in the array record format used by the
    /// feature cache (three u32 dims + row-major f32 payload), preceded by a
    /// length-prefixed parameter name.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let params = self.named_params();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, dims, data) in params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn named_params(&self) -> Vec<(String, [usize; 3], Vec<f32>)> {
        let mut out = Vec::new();
        push_linear(&mut out, "time.lin1", &self.time_lin1);
        push_linear(&mut out, "time.lin2", &self.time_lin2);
        push_conv(&mut out, "stem", &self.stem);
        for (i, conv) in self.downs.iter().enumerate() {
            push_conv(&mut out, &format!("down.{}", i + 1), conv);
        }
        push_res(&mut out, "mid", &self.mid);
        for (l, g) in self.ups.iter().enumerate() {
            push_res(&mut out, &format!("up.{l}.res"), &g.res);
            push_mat(&mut out, &format!("up.{l}.sa.wq"), g.sa.weights.w_q());
            push_mat(&mut out, &format!("up.{l}.sa.wk"), g.sa.weights.w_k());
            push_mat(&mut out, &format!("up.{l}.sa.wv"), g.sa.weights.w_v());
            push_mat(&mut out, &format!("up.{l}.ca.wq"), &g.ca.w_q);
            push_mat(&mut out, &format!("up.{l}.ca.wk"), &g.ca.w_k);
            push_mat(&mut out, &format!("up.{l}.ca.wv"), &g.ca.w_v);
        }
        for (i, conv) in self.up_convs.iter().enumerate() {
            push_conv(&mut out, &format!("upconv.{}", i + 1), conv);
        }
        push_conv(&mut out, "head", &self.head);
        out
    }
}

impl DenoiserBackend for ToyUNet {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn list_attention_sites(&self) -> Vec<SiteId> {
        // Evaluation order: coarsest level first.
        (0..self.config.levels)
            .rev()
            .map(|l| SiteId::from(format!("up.{l}.sa")))
            .collect()
    }

    fn predict_noise(
        &self,
        x_t: &Latent,
        t: u32,
        cond: &Conditioning,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        self.check_input(x_t, cond)?;
        let known = self.list_attention_sites();
        for site in hooks.hooked_sites() {
            if !known.contains(site) {
                return Err(Error::UnknownSite(site.to_string()));
            }
        }

        let temb = self.time_embed(t);
        let x3 = x_t.index_axis(Axis(0), 0).to_owned();
        let mut h = self.stem.forward(&x3);
        let mut skips = vec![h.clone()];
        for conv in &self.downs {
            h = conv.forward(&avg_pool2(&silu(&h)));
            skips.push(h.clone());
        }
        h = self.mid.forward(&h, &temb);
        for l in (0..self.config.levels).rev() {
            h = &h + &skips[l];
            let group = &self.ups[l];
            h = group.res.forward(&h, &temb);
            h = group.sa.forward(&h, hooks)?;
            h = group.ca.forward(&h, cond)?;
            if l > 0 {
                h = self.up_convs[l - 1].forward(&upsample2(&h));
            }
        }
        let eps = self.head.forward(&silu(&h));
        Ok(eps.insert_axis(Axis(0)))
    }
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}

fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

fn silu1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// (C, H, W) -> (H*W, C) token layout.
fn flatten_map(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h * w, c), |(t, ch)| x[(ch, t / w, t % w)])
}

fn unflatten_map(x: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| x[(y * w + xx, ch)])
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        0.25 * (x[(ch, 2 * y, 2 * xx)]
            + x[(ch, 2 * y, 2 * xx + 1)]
            + x[(ch, 2 * y + 1, 2 * xx)]
            + x[(ch, 2 * y + 1, 2 * xx + 1)])
    })
}

fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[(ch, y / 2, xx / 2)])
}

fn push_conv(out: &mut Vec<(String, [usize; 3], Vec<f32>)>, name: &str, conv: &Conv3x3) {
    let (o, i, _, _) = conv.w.dim();
    out.push((
        format!("{name}.w"),
        [o, i, 9],
        conv.w.iter().map(|&v| v as f32).collect(),
    ));
    out.push((
        format!("{name}.b"),
        [1, 1, conv.b.len()],
        conv.b.iter().map(|&v| v as f32).collect(),
    ));
}

fn push_linear(out: &mut Vec<(String, [usize; 3], Vec<f32>)>, name: &str, lin: &LinearLayer) {
    let (o, i) = lin.w.dim();
    out.push((
        format!("{name}.w"),
        [1, o, i],
        lin.w.iter().map(|&v| v as f32).collect(),
    ));
    out.push((
        format!("{name}.b"),
        [1, 1, lin.b.len()],
        lin.b.iter().map(|&v| v as f32).collect(),
    ));
}

fn push_res(out: &mut Vec<(String, [usize; 3], Vec<f32>)>, name: &str, res: &ResBlock) {
    push_conv(out, &format!("{name}.conv1"), &res.conv1);
    push_linear(out, &format!("{name}.time"), &res.time_proj);
    push_conv(out, &format!("{name}.conv2"), &res.conv2);
}

fn push_mat(out: &mut Vec<(String, [usize; 3], Vec<f32>)>, name: &str, m: &Array2<f64>) {
    let (r, c) = m.dim();
    out.push((
        name.to_string(),
        [1, r, c],
        m.iter().map(|&v| v as f32).collect(),
    ));
}
