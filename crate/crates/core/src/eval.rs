//! Desk-scale fidelity proxies and the query-blend sweep harness.
//!
//! The proxies are PSNR against the content image and an L2 distance
//! between per-channel (mean, std) latent statistics against the style
//! latent. The sweep runs one stylization per blend factor and reports how
//! far each output drifts from the plain content reconstruction; the
//! assertable trend is a positive rank correlation between the style weight
//! and that drift.

use std::fs;
use std::path::Path;

use crate::codec::{ImageBuffer, LatentCodec};
use crate::denoiser::DenoiserBackend;
use crate::error::{Error, Result};
use crate::pipeline::{reconstruct, stylize, StylizeConfig};
use crate::schedule::{Latent, NoiseSchedule};

/// Per-beta sweep outcome. All sequences share the betas' length.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub betas: Vec<f64>,
    /// Relative L2 between each stylized latent and the plain content
    /// reconstruction.
    pub content_distance: Vec<f64>,
    /// Distance between each output's per-channel (mean, std) statistics and
    /// the style latent's.
    pub style_stats_distance: Vec<f64>,
    /// PSNR of each output image against the content image.
    pub psnr_db: Vec<f64>,
}

impl SweepReport {
    /// CSV with the fixed header and six significant digits per float.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta,content_distance,style_stats_distance,psnr_db\n");
        for i in 0..self.betas.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_sig6(self.betas[i]),
                fmt_sig6(self.content_distance[i]),
                fmt_sig6(self.style_stats_distance[i]),
                fmt_sig6(self.psnr_db[i]),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn fmt_sig6(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x.is_nan() {
        return "nan".into();
    }
    format!("{x:.5e}")
}

/// Peak signal-to-noise ratio in dB with peak 1.0; identical inputs return
/// the +infinity sentinel.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.pixels().dim(),
            b.pixels().dim()
        )));
    }
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// L2 distance between the concatenated per-channel (mean, std) vectors of
/// two latents, statistics taken over the spatial axes.
pub fn style_stats_distance(a: &Latent, b: &Latent) -> Result<f64> {
    let (_, ca, _, _) = a.dim();
    let (_, cb, _, _) = b.dim();
    if ca != cb {
        return Err(Error::Shape(format!(
            "latents have {ca} vs {cb} channels"
        )));
    }
    let mut acc = 0.0;
    for c in 0..ca {
        let (mu_a, sd_a) = spatial_stats(a, c);
        let (mu_b, sd_b) = spatial_stats(b, c);
        acc += (mu_a - mu_b) * (mu_a - mu_b) + (sd_a - sd_b) * (sd_a - sd_b);
    }
    Ok(acc.sqrt())
}

fn spatial_stats(z: &Latent, c: usize) -> (f64, f64) {
    let (_, _, h, w) = z.dim();
    let n = (h * w) as f64;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            sum += z[(0, c, y, x)];
        }
    }
    let mu = sum / n;
    let mut var = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d = z[(0, c, y, x)] - mu;
            var += d * d;
        }
    }
    (mu, (var / n).sqrt())
}

/// `||a - b||_2 / ||b||_2` (plain `||a - b||_2` when `b` is all zero).
pub fn relative_l2(a: &Latent, b: &Latent) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if den == 0.0 { num } else { num / den })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Parameter(
            "rank correlation needs two sequences of equal length >= 2".into(),
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..rx.len() {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Parameter(
            "rank correlation undefined for a constant sequence".into(),
        ));
    }
    Ok(num / (dx * dy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Runs one stylization per blend factor (`alpha = 1 - beta`, shared seed
/// and settings otherwise) and reports the distance proxies against a plain
/// content reconstruction computed once.
pub fn beta_sweep(
    content: &ImageBuffer,
    style: &ImageBuffer,
    backend: &dyn DenoiserBackend,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    betas: &[f64],
    base_config: &StylizeConfig,
) -> Result<SweepReport> {
    if betas.is_empty() {
        return Err(Error::Parameter("sweep needs at least one beta".into()));
    }
    for w in betas.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Parameter(format!(
                "betas must be strictly ascending, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    if betas[0] < 0.0 || *betas.last().unwrap() > 1.0 {
        return Err(Error::Parameter("betas must lie within [0, 1]".into()));
    }

    let plan = schedule.plan_timesteps(base_config.steps)?;
    let z_content = codec.encode(content)?;
    let z_style = codec.encode(style)?;
    let recon = reconstruct(
        &z_content,
        backend,
        schedule,
        &plan,
        &base_config.conditioning,
    )?;

    let mut report = SweepReport {
        betas: betas.to_vec(),
        content_distance: Vec::with_capacity(betas.len()),
        style_stats_distance: Vec::with_capacity(betas.len()),
        psnr_db: Vec::with_capacity(betas.len()),
    };
    for &beta in betas {
        let config = StylizeConfig {
            alpha: 1.0 - beta,
            beta,
            ..base_config.clone()
        };
        let out = stylize(content, style, backend, codec, schedule, &config)?;
        report
            .content_distance
            .push(relative_l2(&out.latent, &recon)?);
        report
            .style_stats_distance
            .push(style_stats_distance(&out.latent, &z_style)?);
        report.psnr_db.push(psnr(&out.image, content)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SpaceToDepthCodec;
    use crate::denoiser::toy::{ToyUNet, ToyUNetConfig};
    use ndarray::{Array3, Array4};

    fn const_image(v: f64) -> ImageBuffer {
        ImageBuffer::new(Array3::from_elem((4, 4, 3), v)).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = const_image(0.5);
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_offset_is_twenty_db() {
        // MSE = 0.1^2 -> 20 * log10(1/0.1) = 20 dB by closed form.
        let a = const_image(0.4);
        let b = const_image(0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = const_image(0.1);
        let b = ImageBuffer::new(Array3::zeros((2, 4, 3))).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn stats_distance_of_identical_is_zero_and_symmetric() {
        let a = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| {
            (c * 4 + y * 2 + x) as f64 * 0.3
        });
        let b = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| {
            1.0 - (c * 4 + y * 2 + x) as f64 * 0.1
        });
        assert_eq!(style_stats_distance(&a, &a).unwrap(), 0.0);
        let ab = style_stats_distance(&a, &b).unwrap();
        let ba = style_stats_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab >= 0.0);
    }

    #[test]
    fn stats_distance_constant_latents_oracle() {
        // Means 0 and 1, both stds 0, one channel -> distance 1.
        let a = Array4::from_elem((1, 1, 2, 2), 0.0);
        let b = Array4::from_elem((1, 1, 2, 2), 1.0);
        assert!((style_stats_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stats_distance_rejects_channel_mismatch() {
        let a = Array4::<f64>::zeros((1, 1, 2, 2));
        let b = Array4::<f64>::zeros((1, 2, 2, 2));
        assert!(matches!(
            style_stats_distance(&a, &b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs = [0.0, 0.2, 0.5, 0.8, 1.0];
        let inc = [1.0, 2.0, 3.0, 4.0, 5.0];
        let dec = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &inc).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &dec).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 1.0, 2.0, 3.0];
        let r = spearman(&xs, &ys).unwrap();
        assert!(r > 0.9 && r <= 1.0);
    }

    #[test]
    fn csv_layout_and_significant_digits() {
        let report = SweepReport {
            betas: vec![0.0, 0.2],
            content_distance: vec![0.123456789, 1.5],
            style_stats_distance: vec![2.0, 0.25],
            psnr_db: vec![f64::INFINITY, 20.0],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "beta,content_distance,style_stats_distance,psnr_db"
        );
        assert_eq!(lines.next().unwrap(), "0.00000e0,1.23457e-1,2.00000e0,inf");
        assert_eq!(lines.next().unwrap(), "2.00000e-1,1.50000e0,2.50000e-1,2.00000e1");
        assert!(lines.next().is_none());
    }

    fn sweep_fixture() -> (ToyUNet, NoiseSchedule, SpaceToDepthCodec, ImageBuffer, ImageBuffer) {
        let unet = ToyUNet::new(ToyUNetConfig {
            latent_channels: 12,
            base_width: 16,
            levels: 2,
            num_heads: 2,
            context_tokens: 4,
            context_dim: 16,
            seed: 12,
        })
        .unwrap();
        let schedule = NoiseSchedule::scaled_linear(1000, 0.00085, 0.012).unwrap();
        let codec = SpaceToDepthCodec::new(2).unwrap();
        let content = ImageBuffer::new(Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y * 37 + x * 11 + c * 5) % 256) as f64 / 255.0
        }))
        .unwrap();
        let style = ImageBuffer::new(Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y as f64 * 0.7).sin() * 0.4 + 0.5 + (x as f64 + c as f64) * 0.01).clamp(0.0, 1.0)
        }))
        .unwrap();
        (unet, schedule, codec, content, style)
    }

    #[test]
    fn single_element_sweep_has_one_row() {
        let (unet, schedule, codec, content, style) = sweep_fixture();
        let base = StylizeConfig {
            steps: 3,
            ..Default::default()
        };
        let report =
            beta_sweep(&content, &style, &unet, &codec, &schedule, &[0.5], &base).unwrap();
        assert_eq!(report.betas.len(), 1);
        assert_eq!(report.content_distance.len(), 1);
        assert_eq!(report.to_csv().lines().count(), 2);
    }

    #[test]
    fn zero_beta_minimizes_content_distance() {
        let (unet, schedule, codec, content, style) = sweep_fixture();
        let base = StylizeConfig {
            steps: 8,
            ..Default::default()
        };
        let report = beta_sweep(
            &content,
            &style,
            &unet,
            &codec,
            &schedule,
            &[0.0, 0.5, 1.0],
            &base,
        )
        .unwrap();
        let d0 = report.content_distance[0];
        for &d in &report.content_distance[1..] {
            assert!(d0 <= d, "beta=0 distance {d0} not minimal against {d}");
        }
    }

    #[test]
    fn sweep_rejects_unsorted_or_out_of_range_betas() {
        let (unet, schedule, codec, content, style) = sweep_fixture();
        let base = StylizeConfig {
            steps: 2,
            ..Default::default()
        };
        for bad in [vec![0.5, 0.2], vec![-0.1, 0.5], vec![0.5, 1.2], vec![]] {
            assert!(matches!(
                beta_sweep(&content, &style, &unet, &codec, &schedule, &bad, &base),
                Err(Error::Parameter(_))
            ));
        }
    }
}
