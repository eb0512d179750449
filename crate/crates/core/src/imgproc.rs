//! Raster container, resampling and the degradations used by the harness.
//!
//! Coordinates are `(row, col)` everywhere with pixel centers at integer
//! positions; resampling maps output centers to input centers with the usual
//! half-pixel convention, so `src = (dst + 0.5) * in / out - 0.5`.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawio::write_atomic;

/// Downsampling ratio of the pyramid's lower level.
pub const DOWN_RATIO: f64 = 0.75;
/// Upsampling ratio of the pyramid's upper level.
pub const UP_RATIO: f64 = 1.5;

/// Row-major, channel-interleaved f32 raster with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        check_shape(height, width, channels)?;
        Self::from_vec(height, width, channels, vec![value; height * width * channels])
    }

    /// Wraps raw samples, validating length, channel count and range.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_shape(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "sample count {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from a per-pixel function returning `channels` samples,
    /// clamping every sample to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_shape(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp_unit(f(y, x, c)));
                }
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = clamp_unit(value);
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample of channel `c`, coordinates clamped to the raster.
    pub fn sample(&self, y: f64, x: f64, c: usize) -> f32 {
        bilinear_at(&self.data, self.height, self.width, self.channels, y, x, c) as f32
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::invalid("images differ in shape"));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(total / self.data.len() as f64)
    }

    /// Expands a single-channel image to three identical channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|v| [*v; 3]).collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("shape checked"))
        } else {
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("shape checked"))
        }
    }

    /// Converts a decoded image; grayscale sources stay single-channel,
    /// everything else becomes RGB (alpha is dropped).
    pub fn from_dynamic(img: &DynamicImage) -> ImageBuffer {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
        );
        let (channels, raw) = if gray {
            (1, img.to_luma8().into_raw())
        } else {
            (3, img.to_rgb8().into_raw())
        };
        ImageBuffer {
            height: h,
            width: w,
            channels,
            data: raw.into_iter().map(|b| b as f32 / 255.0).collect(),
        }
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageBuffer {
        let data = self.data.iter().map(|v| to_u8(*v) as f32 / 255.0).collect();
        ImageBuffer { data, ..self.clone() }
    }
}

fn check_shape(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("empty raster {height}x{width}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("unsupported channel count {channels}")));
    }
    Ok(())
}

#[inline]
fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Bilinear lookup on an interleaved plane with clamped coordinates.
#[inline]
pub(crate) fn bilinear_at(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    y: f64,
    x: f64,
    ch: usize,
) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resampling of an interleaved `h x w x c` plane to `oh x ow`.
pub(crate) fn resample_bilinear(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    if oh == h && ow == w {
        return data.to_vec();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..ow {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(bilinear_at(data, h, w, c, y, x, ch) as f32);
            }
        }
    }
    out
}

/// Output length of a dimension resized by `r`, rounding half up, at least 1.
pub fn scaled_dim(n: usize, r: f64) -> usize {
    // Products like 101 * 0.75 are exact in binary, so `floor(x + 0.5)` is
    // a faithful round-half-up here.
    ((n as f64 * r + 0.5).floor() as usize).max(1)
}

fn check_ratio(r: f64) -> Result<()> {
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::invalid(format!("resize ratio must be positive, got {r}")));
    }
    Ok(())
}

/// Bilinear resize by ratio `r`; output dimensions are `round(r * dims)`.
pub fn resize(img: &ImageBuffer, r: f64) -> Result<ImageBuffer> {
    check_ratio(r)?;
    let oh = scaled_dim(img.height, r);
    let ow = scaled_dim(img.width, r);
    resize_to(img, oh, ow)
}

pub fn resize_to(img: &ImageBuffer, oh: usize, ow: usize) -> Result<ImageBuffer> {
    check_shape(oh, ow, img.channels)?;
    let data = resample_bilinear(&img.data, img.height, img.width, img.channels, oh, ow);
    Ok(ImageBuffer {
        height: oh,
        width: ow,
        channels: img.channels,
        data: data.into_iter().map(clamp_unit).collect(),
    })
}

/// The three-level pyramid: base image plus its 0.75x and 1.5x resamplings.
#[derive(Clone, Debug)]
pub struct ScalePyramid {
    pub base: ImageBuffer,
    pub down: ImageBuffer,
    pub up: ImageBuffer,
    pub down_ratio: f64,
    pub up_ratio: f64,
}

pub fn build_pyramid(img: &ImageBuffer) -> Result<ScalePyramid> {
    Ok(ScalePyramid {
        down: resize(img, DOWN_RATIO)?,
        up: resize(img, UP_RATIO)?,
        base: img.clone(),
        down_ratio: DOWN_RATIO,
        up_ratio: UP_RATIO,
    })
}

/// BT.601 luma.
pub fn to_grayscale(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| clamp_unit(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
        .collect();
    Ok(ImageBuffer {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}

/// Luminance of any image: pass-through for gray, BT.601 for RGB.
pub fn luminance(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        img.clone()
    } else {
        to_grayscale(img).expect("three channels")
    }
}

/// `(sin, cos)` of an angle in degrees, exact for multiples of 90.
pub fn sin_cos_deg(angle: f64) -> (f64, f64) {
    let quarter = angle / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle.to_radians().sin_cos()
    }
}

/// Similarity transform `dst = dst_center + scale * R(angle) * (src - src_center)`
/// on `(row, col)` points; positive angles turn counter-clockwise on screen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub angle: f64,
    pub scale: f64,
    pub src_center: (f64, f64),
    pub dst_center: (f64, f64),
}

impl Similarity {
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = sin_cos_deg(self.angle);
        let dy = p.0 - self.src_center.0;
        let dx = p.1 - self.src_center.1;
        let ry = -s * dx + c * dy;
        let rx = c * dx + s * dy;
        (
            self.dst_center.0 + self.scale * ry,
            self.dst_center.1 + self.scale * rx,
        )
    }

    pub fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = sin_cos_deg(self.angle);
        let dy = (p.0 - self.dst_center.0) / self.scale;
        let dx = (p.1 - self.dst_center.1) / self.scale;
        // R(angle)^T
        let ry = s * dx + c * dy;
        let rx = c * dx - s * dy;
        (self.src_center.0 + ry, self.src_center.1 + rx)
    }
}

/// Result of an inverse-mapped warp: pixels whose pre-image falls outside
/// the source raster are zero and flagged invalid.
#[derive(Clone, Debug)]
pub struct Warped {
    pub image: ImageBuffer,
    pub valid: Vec<bool>,
}

impl Warped {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Warps `img` by a similarity transform into a raster of the same size.
pub fn warp_similarity(img: &ImageBuffer, t: &Similarity) -> Result<Warped> {
    if !t.scale.is_finite() || t.scale <= 0.0 {
        return Err(Error::invalid(format!("warp scale must be positive, got {}", t.scale)));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0.0_f32; h * w * c];
    let mut valid = vec![false; h * w];
    const SLACK: f64 = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.invert((y as f64, x as f64));
            if sy < -SLACK || sx < -SLACK || sy > (h - 1) as f64 + SLACK || sx > (w - 1) as f64 + SLACK {
                continue;
            }
            let idx = y * w + x;
            valid[idx] = true;
            for ch in 0..c {
                data[idx * c + ch] = clamp_unit(bilinear_at(&img.data, h, w, c, sy, sx, ch) as f32);
            }
        }
    }
    Ok(Warped {
        image: ImageBuffer {
            height: h,
            width: w,
            channels: c,
            data,
        },
        valid,
    })
}

/// Rotation by `angle` degrees and scaling about `center`.
pub fn warp_rigid(img: &ImageBuffer, angle: f64, scale: f64, center: (f64, f64)) -> Result<Warped> {
    warp_similarity(
        img,
        &Similarity {
            angle,
            scale,
            src_center: center,
            dst_center: center,
        },
    )
}

/// Post-processing attack applied before detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    None,
    Jpeg { quality: u8 },
    GaussianNoise { sigma: f32 },
}

impl Attack {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Attack::None => Ok(()),
            Attack::Jpeg { quality } if (1..=100).contains(&quality) => Ok(()),
            Attack::Jpeg { quality } => Err(Error::invalid(format!("jpeg quality {quality} not in [1, 100]"))),
            Attack::GaussianNoise { sigma } if sigma.is_finite() && sigma >= 0.0 => Ok(()),
            Attack::GaussianNoise { sigma } => Err(Error::invalid(format!("noise sigma {sigma} must be >= 0"))),
        }
    }

    /// Short label, also the textual form accepted by [`str::parse`].
    pub fn label(&self) -> String {
        match self {
            Attack::None => "none".to_string(),
            Attack::Jpeg { quality } => format!("jpeg:{quality}"),
            Attack::GaussianNoise { sigma } => format!("noise:{sigma}"),
        }
    }
}

impl std::str::FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let attack = match s.split_once(':') {
            None if s == "none" => Attack::None,
            Some(("jpeg", q)) => Attack::Jpeg {
                quality: q.parse().map_err(|_| Error::invalid(format!("bad jpeg quality in {s:?}")))?,
            },
            Some(("noise", sigma)) => Attack::GaussianNoise {
                sigma: sigma.parse().map_err(|_| Error::invalid(format!("bad noise sigma in {s:?}")))?,
            },
            _ => return Err(Error::invalid(format!("unknown attack {s:?}; expected none, jpeg:Q or noise:S"))),
        };
        attack.validate()?;
        Ok(attack)
    }
}

/// Applies an attack. Noise draws from a generator seeded with `seed`.
pub fn degrade(img: &ImageBuffer, attack: Attack, seed: u64) -> Result<ImageBuffer> {
    attack.validate()?;
    match attack {
        Attack::None => Ok(img.clone()),
        Attack::GaussianNoise { sigma } if sigma == 0.0 => Ok(img.clone()),
        Attack::GaussianNoise { sigma } => {
            let normal = Normal::new(0.0_f32, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = img
                .data
                .iter()
                .map(|v| clamp_unit(v + normal.sample(&mut rng)))
                .collect();
            Ok(ImageBuffer { data, ..img.clone() })
        }
        Attack::Jpeg { quality } => {
            let bytes = encode_jpeg(img, quality)?;
            let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?;
            let mut out = ImageBuffer::from_dynamic(&decoded);
            if out.channels != img.channels {
                out = if img.channels == 1 { luminance(&out) } else { out.to_rgb() };
            }
            Ok(out)
        }
    }
}

pub fn encode_jpeg(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    let color = if img.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
    )?;
    Ok(buf)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.to_dynamic().write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Reads a PNG or JPEG file.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?;
    Ok(ImageBuffer::from_dynamic(&img))
}

/// Writes an 8-bit PNG atomically.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 1, |_, x, _| x as f32 / (w - 1) as f32).unwrap()
    }

    fn smooth_rgb(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |y, x, c| {
            let (y, x) = (y as f32, x as f32);
            0.5 + 0.3 * ((y * 0.11 + c as f32).sin() * (x * 0.07).cos())
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_samples() {
        assert!(ImageBuffer::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageBuffer::new(0, 3, 1).is_err());
    }

    #[test]
    fn resize_identity() {
        let img = smooth_rgb(13, 9);
        assert_eq!(resize(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn resize_constant() {
        let img = ImageBuffer::filled(4, 4, 1, 0.5).unwrap();
        let out = resize(&img, 0.75).unwrap();
        assert_eq!((out.height(), out.width()), (3, 3));
        assert!(out.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn resize_upsampled_ramp_matches_scalar_bilinear() {
        let img = ramp(8, 8);
        let out = resize(&img, 2.0).unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
        for oy in 0..16 {
            for ox in 0..16 {
                // independent scalar evaluation: half-pixel map, clamp, lerp
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 7.0);
                let x0 = sx.floor();
                let x1 = (x0 + 1.0).min(7.0);
                let t = sx - x0;
                let expect = (x0 / 7.0) * (1.0 - t) + (x1 / 7.0) * t;
                assert!((out.get(oy, ox, 0) as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_rejects_bad_ratio() {
        let img = ramp(4, 4);
        for r in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(resize(&img, r), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn pyramid_dimensions() {
        let p = build_pyramid(&ImageBuffer::new(100, 100, 1).unwrap()).unwrap();
        assert_eq!((p.down.height(), p.down.width()), (75, 75));
        assert_eq!((p.up.height(), p.up.width()), (150, 150));
        let p = build_pyramid(&ImageBuffer::new(4, 4, 1).unwrap()).unwrap();
        assert_eq!(p.down.height(), 3);
        // 101 * 0.75 = 75.75
        let p = build_pyramid(&ImageBuffer::new(101, 101, 1).unwrap()).unwrap();
        assert_eq!(p.down.height(), 76);
    }

    #[test]
    fn pyramid_rounding_exhaustive() {
        for n in 1..=512usize {
            // integer-only oracle: round(3n/4) and round(3n/2), halves up
            let down = ((3 * n + 2) / 4).max(1);
            let up = (3 * n + 1) / 2;
            assert_eq!(scaled_dim(n, DOWN_RATIO), down, "n = {n}");
            assert_eq!(scaled_dim(n, UP_RATIO), up, "n = {n}");
        }
    }

    #[test]
    fn grayscale_weights() {
        let white = ImageBuffer::filled(1, 1, 3, 1.0).unwrap();
        assert!((to_grayscale(&white).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-6);
        let red = ImageBuffer::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).unwrap().get(0, 0, 0) - 0.299).abs() < 1e-7);
        assert!(to_grayscale(&ramp(2, 2)).is_err());

        let img = smooth_rgb(7, 5);
        let g = to_grayscale(&img).unwrap();
        for y in 0..7 {
            for x in 0..5 {
                let p = img.pixel(y, x);
                let expect = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                assert!((g.get(y, x, 0) as f64 - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn warp_identity() {
        let img = smooth_rgb(11, 11);
        let w = warp_rigid(&img, 0.0, 1.0, (5.0, 5.0)).unwrap();
        assert_eq!(w.image, img);
        assert_eq!(w.valid_count(), 121);
    }

    #[test]
    fn warp_quarter_turn_is_permutation() {
        let img = ImageBuffer::from_fn(10, 10, 1, |y, x, _| (y * 10 + x) as f32 / 100.0).unwrap();
        let w = warp_rigid(&img, 90.0, 1.0, (4.5, 4.5)).unwrap();
        assert_eq!(w.valid_count(), 100);
        for y in 0..10 {
            for x in 0..10 {
                // counter-clockwise turn: output (y, x) reads input (x, 9 - y)
                assert!((w.image.get(y, x, 0) - img.get(x, 9 - y, 0)).abs() < 1e-6, "{y} {x}");
            }
        }
    }

    #[test]
    fn warp_matches_inverse_transform_oracle() {
        let img = smooth_rgb(24, 20);
        let (angle, scale, (cy, cx)) = (30.0_f64, 1.3_f64, (11.0, 9.5));
        let w = warp_rigid(&img, angle, scale, (cy, cx)).unwrap();
        let a = angle.to_radians();
        for y in 0..24 {
            for x in 0..20 {
                let (dy, dx) = ((y as f64 - cy) / scale, (x as f64 - cx) / scale);
                let sy = cy + a.sin() * dx + a.cos() * dy;
                let sx = cx + a.cos() * dx - a.sin() * dy;
                let inside = (0.0..=23.0).contains(&sy) && (0.0..=19.0).contains(&sx);
                assert_eq!(w.valid[y * 20 + x], inside);
                if inside {
                    for c in 0..3 {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (ty, tx) = (sy - y0, sx - x0);
                        let at = |yy: f64, xx: f64| img.get((yy as usize).min(23), (xx as usize).min(19), c) as f64;
                        let expect = (at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1.0) * tx) * (1.0 - ty)
                            + (at(y0 + 1.0, x0) * (1.0 - tx) + at(y0 + 1.0, x0 + 1.0) * tx) * ty;
                        assert!((w.image.get(y, x, c) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let img = smooth_rgb(48, 48);
        let center = (23.5, 23.5);
        let fwd = warp_rigid(&img, 25.0, 1.2, center).unwrap();
        let back = warp_rigid(&fwd.image, -25.0, 1.0 / 1.2, center).unwrap();
        // pixels whose round trip stayed inside both rasters
        let t = Similarity {
            angle: -25.0,
            scale: 1.0 / 1.2,
            src_center: center,
            dst_center: center,
        };
        let (mut err, mut n) = (0.0, 0usize);
        for y in 0..48 {
            for x in 0..48 {
                let (my, mx) = t.invert((y as f64, x as f64));
                let (iy, ix) = (my.round() as isize, mx.round() as isize);
                let inner = (2..46).contains(&iy) && (2..46).contains(&ix) && fwd.valid[iy as usize * 48 + ix as usize];
                if back.valid[y * 48 + x] && inner {
                    err += (back.image.get(y, x, 0) - img.get(y, x, 0)).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 1000);
        assert!(err / (n as f64) < 0.02, "{}", err / n as f64);
    }

    #[test]
    fn warp_rejects_bad_scale() {
        assert!(warp_rigid(&ramp(4, 4), 0.0, 0.0, (1.5, 1.5)).is_err());
    }

    #[test]
    fn degrade_noop_cases() {
        let img = smooth_rgb(9, 9);
        assert_eq!(degrade(&img, Attack::None, 1).unwrap(), img);
        assert_eq!(degrade(&img, Attack::GaussianNoise { sigma: 0.0 }, 1).unwrap(), img);
    }

    #[test]
    fn degrade_noise_is_seeded() {
        let img = smooth_rgb(16, 16);
        let a = degrade(&img, Attack::GaussianNoise { sigma: 0.05 }, 7).unwrap();
        let b = degrade(&img, Attack::GaussianNoise { sigma: 0.05 }, 7).unwrap();
        let c = degrade(&img, Attack::GaussianNoise { sigma: 0.05 }, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degrade_rejects_bad_parameters() {
        let img = ramp(4, 4);
        assert!(degrade(&img, Attack::Jpeg { quality: 0 }, 0).is_err());
        assert!(degrade(&img, Attack::Jpeg { quality: 101 }, 0).is_err());
        assert!(degrade(&img, Attack::GaussianNoise { sigma: -0.1 }, 0).is_err());
    }

    #[test]
    fn jpeg_round_trip_error_is_small() {
        let img = smooth_rgb(64, 64).quantized();
        let out = degrade(&img, Attack::Jpeg { quality: 90 }, 0).unwrap();
        assert!(out.same_shape(&img));
        assert!(img.mean_abs_diff(&out).unwrap() < 0.02);
    }

    #[test]
    fn attack_parsing() {
        assert_eq!("none".parse::<Attack>().unwrap(), Attack::None);
        assert_eq!("jpeg:80".parse::<Attack>().unwrap(), Attack::Jpeg { quality: 80 });
        assert_eq!(
            "noise:0.02".parse::<Attack>().unwrap(),
            Attack::GaussianNoise { sigma: 0.02 }
        );
        assert!("blur:3".parse::<Attack>().is_err());
        assert!("jpeg:0".parse::<Attack>().is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_for_8bit() {
        let img = smooth_rgb(5, 6).quantized();
        let bytes = encode_png(&img).unwrap();
        let back = ImageBuffer::from_dynamic(&image::load_from_memory(&bytes).unwrap());
        assert_eq!(back, img);
    }
}
