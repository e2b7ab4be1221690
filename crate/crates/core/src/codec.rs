//! Image/latent transform filling the autoencoder role at desk scale.
//!
//! The reference codec is a pure space-to-depth permutation: a `p x p` pixel
//! block becomes `3 * p^2` latent channels, so encode/decode are bit-exact
//! inverses and any reconstruction error observed downstream is attributable
//! to the sampling loop alone. A learned autoencoder plugs in behind the
//! same [`LatentCodec`] trait.

use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::schedule::Latent;

/// RGB image with values in `[0, 1]`, shaped (height, width, 3).
///
/// Buffers decoded from arbitrary latents may leave the nominal range;
/// [`write_png`] clamps on quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pixels: Array3<f64>,
}

impl ImageBuffer {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (_, _, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("image contains non-finite values".into()));
        }
        Ok(ImageBuffer { pixels })
    }

    /// From packed 8-bit RGB rows, mapping linearly onto `[0, 1]`.
    pub fn from_rgb8(data: &[u8], width: usize, height: usize) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            data[(y * width + x) * 3 + c] as f64 / 255.0
        });
        Ok(ImageBuffer { pixels })
    }

    /// Packed 8-bit RGB rows; values are clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w, _) = self.pixels.dim();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = self.pixels[(y, x, c)].clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Image-to-latent transform with a fixed spatial factor. The latent scale
/// factor is part of the adapter; the reference codec uses 1.
pub trait LatentCodec {
    fn encode(&self, image: &ImageBuffer) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<ImageBuffer>;
    fn spatial_factor(&self) -> usize;
    fn latent_scale(&self) -> f64 {
        1.0
    }
}

/// Lossless reference codec: `(H, W, 3)` image to `(1, 3 * p^2, H/p, W/p)`
/// latent, channel index `c = rgb * p^2 + dy * p + dx`.
#[derive(Debug, Clone)]
pub struct SpaceToDepthCodec {
    factor: usize,
}

impl SpaceToDepthCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Parameter("spatial factor must be >= 1".into()));
        }
        Ok(SpaceToDepthCodec { factor })
    }

    /// Latent channel count produced by this codec.
    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }
}

impl LatentCodec for SpaceToDepthCodec {
    fn encode(&self, image: &ImageBuffer) -> Result<Latent> {
        let p = self.factor;
        let (h, w, _) = image.pixels.dim();
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by the spatial factor {p}"
            )));
        }
        let latent = Array4::from_shape_fn((1, 3 * p * p, h / p, w / p), |(_, c, y, x)| {
            let rgb = c / (p * p);
            let dy = (c % (p * p)) / p;
            let dx = c % p;
            image.pixels[(y * p + dy, x * p + dx, rgb)]
        });
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<ImageBuffer> {
        let p = self.factor;
        let (b, c, lh, lw) = latent.dim();
        if b != 1 {
            return Err(Error::Shape(format!("latent batch must be 1, got {b}")));
        }
        if c != 3 * p * p {
            return Err(Error::Shape(format!(
                "latent has {c} channels but the factor-{p} codec expects {}",
                3 * p * p
            )));
        }
        let pixels = Array3::from_shape_fn((lh * p, lw * p, 3), |(y, x, rgb)| {
            let (dy, dx) = (y % p, x % p);
            latent[(0, rgb * p * p + dy * p + dx, y / p, x / p)]
        });
        Ok(ImageBuffer { pixels })
    }

    fn spatial_factor(&self) -> usize {
        self.factor
    }
}

/// Reads an 8-bit RGB PNG, mapping values linearly onto `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageBuffer::from_rgb8(img.as_raw(), w as usize, h as usize)
}

/// Writes as 8-bit RGB PNG (clamping and rounding).
pub fn write_png(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, image.to_rgb8())
            .expect("buffer length matches dimensions");
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}
