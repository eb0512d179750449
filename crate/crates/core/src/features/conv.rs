//! Inference-only convolutional feature extractor.
//!
//! Weight file layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "CMFDCONV"
//! version    u32      1
//! blocks     u32
//! per block:
//!   out, in, k, stride   u32 x 4
//!   eps                  f32
//!   kernel               f32 x out*in*k*k   (out, in, ky, kx order)
//!   bias, mean, var, gamma, beta   f32 x out each
//! ```
//!
//! Each block is a zero-padded `k x k` convolution, normalization with the
//! stored running statistics, and a rectifier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::imgproc::{resample_bilinear, ImageBuffer};
use crate::rawio::write_atomic;

pub const CONV_MAGIC: &[u8; 8] = b"CMFDCONV";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub eps: f32,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl ConvBlock {
    fn validate(&self) -> Result<()> {
        let (o, i, k) = (self.out_channels, self.in_channels, self.kernel_size);
        if o == 0 || i == 0 || k == 0 || k % 2 == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "bad conv block shape out={o} in={i} k={k} stride={}",
                self.stride
            )));
        }
        if self.kernel.len() != o * i * k * k {
            return Err(Error::invalid("conv kernel length does not match its shape"));
        }
        for v in [&self.bias, &self.mean, &self.var, &self.gamma, &self.beta] {
            if v.len() != o {
                return Err(Error::invalid("conv per-channel vector length mismatch"));
            }
        }
        if self.var.iter().any(|v| *v + self.eps <= 0.0) {
            return Err(Error::invalid("normalization variance must be positive"));
        }
        Ok(())
    }

    /// Per-output-channel affine `(scale, shift)` folding bias and normalization.
    fn folded(&self) -> Vec<(f32, f32)> {
        (0..self.out_channels)
            .map(|c| {
                let s = self.gamma[c] / (self.var[c] + self.eps).sqrt();
                (s, (self.bias[c] - self.mean[c]) * s + self.beta[c])
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub blocks: Vec<ConvBlock>,
}

impl ConvWeights {
    pub fn new(blocks: Vec<ConvBlock>) -> Result<Self> {
        let w = Self { blocks };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("conv extractor has no blocks"));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for pair in self.blocks.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::invalid(format!(
                    "conv blocks do not chain: {} outputs feed {} inputs",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// He-initialized kernels with identity normalization, deterministic in
    /// `seed`. Used as an untrained stand-in network.
    pub fn random(seed: u64, in_channels: usize, widths: &[usize], kernel_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        for &cout in widths {
            let fan_in = (cin * kernel_size * kernel_size) as f32;
            let std = (2.0 / fan_in).sqrt();
            let kernel = (0..cout * cin * kernel_size * kernel_size)
                .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
                .collect();
            let bias = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
            blocks.push(ConvBlock {
                out_channels: cout,
                in_channels: cin,
                kernel_size,
                stride: 1,
                eps: 1e-5,
                kernel,
                bias,
                mean: vec![0.0; cout],
                var: vec![1.0; cout],
                gamma: vec![1.0; cout],
                beta: vec![0.0; cout],
            });
            cin = cout;
        }
        Self::new(blocks)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONV_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            for v in [b.out_channels, b.in_channels, b.kernel_size, b.stride] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            out.extend_from_slice(&b.eps.to_le_bytes());
            for v in [&b.kernel, &b.bias, &b.mean, &b.var, &b.gamma, &b.beta] {
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CONV_MAGIC {
            return Err(Error::Format("conv weights: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("conv weights: unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let out_channels = r.u32()? as usize;
            let in_channels = r.u32()? as usize;
            let kernel_size = r.u32()? as usize;
            let stride = r.u32()? as usize;
            let eps = r.f32()?;
            let klen = out_channels
                .checked_mul(in_channels)
                .and_then(|v| v.checked_mul(kernel_size * kernel_size))
                .ok_or_else(|| Error::Format("conv weights: shape overflow".into()))?;
            let kernel = r.f32s(klen)?;
            let bias = r.f32s(out_channels)?;
            let mean = r.f32s(out_channels)?;
            let var = r.f32s(out_channels)?;
            let gamma = r.f32s(out_channels)?;
            let beta = r.f32s(out_channels)?;
            blocks.push(ConvBlock {
                out_channels,
                in_channels,
                kernel_size,
                stride,
                eps,
                kernel,
                bias,
                mean,
                var,
                gamma,
                beta,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("conv weights: trailing bytes".into()));
        }
        Self::new(blocks).map_err(|e| Error::Format(format!("conv weights: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("conv weights: truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("conv weights: overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// One block over an interleaved `h x w x in` plane.
fn run_block(input: &[f32], h: usize, w: usize, b: &ConvBlock) -> (Vec<f32>, usize, usize) {
    let (cin, cout, k, s) = (b.in_channels, b.out_channels, b.kernel_size, b.stride);
    let pad = (k / 2) as isize;
    let oh = h.div_ceil(s);
    let ow = w.div_ceil(s);
    let folded = b.folded();
    // kernel reordered to (ky, kx, in, out) so the inner loop runs over outputs
    let mut kt = vec![0.0_f32; k * k * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    kt[((ky * k + kx) * cin + i) * cout + o] = b.kernel[((o * cin + i) * k + ky) * k + kx];
                }
            }
        }
    }
    let mut out = vec![0.0_f32; oh * ow * cout];
    let mut acc = vec![0.0_f32; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..k {
                let iy = (oy * s) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &input[(iy as usize * w + ix as usize) * cin..][..cin];
                    let taps = &kt[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (i, v) in px.iter().enumerate() {
                        for (a, t) in acc.iter_mut().zip(&taps[i * cout..(i + 1) * cout]) {
                            *a += v * t;
                        }
                    }
                }
            }
            let dst = &mut out[(oy * ow + ox) * cout..][..cout];
            for ((d, a), (sc, sh)) in dst.iter_mut().zip(&acc).zip(&folded) {
                *d = (a * sc + sh).max(0.0);
            }
        }
    }
    (out, oh, ow)
}

/// Forward pass; the last block's output is resampled to the input size.
pub fn conv_features(img: &ImageBuffer, weights: &ConvWeights) -> Result<FeatureMap> {
    weights.validate()?;
    if weights.input_channels() != img.channels() {
        return Err(Error::invalid(format!(
            "conv extractor expects {} input channels, image has {}",
            weights.input_channels(),
            img.channels()
        )));
    }
    let (mut h, mut w) = (img.height(), img.width());
    let mut plane = img.data().to_vec();
    for b in &weights.blocks {
        let (next, nh, nw) = run_block(&plane, h, w, b);
        plane = next;
        h = nh;
        w = nw;
    }
    let depth = weights.output_channels();
    let data = resample_bilinear(&plane, h, w, depth, img.height(), img.width());
    FeatureMap::from_vec(img.height(), img.width(), depth, data)
}
