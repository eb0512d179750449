//! Per-pixel descriptor fields over the scale pyramid.

mod conv;
mod zernike;

pub use conv::{conv_features, ConvBlock, ConvWeights, CONV_MAGIC};
pub use zernike::{zernike_basis, zernike_features, ZernikeBasis, ZERNIKE_ORDERS};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgproc::{luminance, resample_bilinear, ScalePyramid};

/// `H x W x D` descriptor field, row-major with descriptors contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != height * width * depth {
            return Err(Error::invalid(format!(
                "feature data length {} does not match {height}x{width}x{depth}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn descriptor(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.depth;
        &self.data[i..i + self.depth]
    }

    /// Bilinear blend of the four descriptors around `(y, x)` written into
    /// `out`. Coordinates outside `[0, H-1] x [0, W-1]` are clamped.
    #[inline]
    pub fn sample_into(&self, y: f32, x: f32, out: &mut [f32]) {
        self.sample_taps(&BilinearTaps::new(self.height, self.width, y, x), out);
    }

    /// [`FeatureMap::sample_into`] with precomputed taps, for maps that
    /// share this map's dimensions.
    #[inline]
    pub fn sample_taps(&self, t: &BilinearTaps, out: &mut [f32]) {
        let d = self.depth;
        let a = &self.data[t.i00 * d..t.i00 * d + d];
        let b = &self.data[t.i01 * d..t.i01 * d + d];
        let c = &self.data[t.i10 * d..t.i10 * d + d];
        let e = &self.data[t.i11 * d..t.i11 * d + d];
        let [w00, w01, w10, w11] = t.weights;
        for ((((o, a), b), c), e) in out[..d].iter_mut().zip(a).zip(b).zip(c).zip(e) {
            *o = w00 * a + w01 * b + w10 * c + w11 * e;
        }
    }

    pub fn sample(&self, y: f32, x: f32) -> Vec<f32> {
        let mut out = vec![0.0; self.depth];
        self.sample_into(y, x, &mut out);
        out
    }

    pub fn resized(&self, height: usize, width: usize) -> FeatureMap {
        FeatureMap {
            height,
            width,
            depth: self.depth,
            data: resample_bilinear(&self.data, self.height, self.width, self.depth, height, width),
        }
    }
}

/// Neighbor indices and weights of one clamped bilinear lookup.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    weights: [f32; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(height: usize, width: usize, y: f32, x: f32) -> Self {
        let y = y.clamp(0.0, (height - 1) as f32);
        let x = x.clamp(0.0, (width - 1) as f32);
        let (y0, x0) = (y as usize, x as usize);
        let y1 = (y0 + 1).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        Self {
            i00: y0 * width + x0,
            i01: y0 * width + x1,
            i10: y1 * width + x0,
            i11: y1 * width + x1,
            weights: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        }
    }
}

/// Pyramid level tag: `Up` is the 1.5x image, `Down` the 0.75x one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Up,
    Base,
    Down,
}

/// Feature maps of one extractor over the pyramid levels, all resampled to
/// the base resolution. Holds either all three levels or just `Base`.
#[derive(Clone, Debug)]
pub struct FeaturePyramidSet {
    levels: Vec<(Scale, FeatureMap)>,
}

impl FeaturePyramidSet {
    pub fn new(levels: Vec<(Scale, FeatureMap)>) -> Result<Self> {
        let first = levels
            .first()
            .map(|(_, m)| (m.height, m.width, m.depth))
            .ok_or_else(|| Error::invalid("feature pyramid needs at least one level"))?;
        if levels
            .iter()
            .any(|(_, m)| (m.height, m.width, m.depth) != first)
        {
            return Err(Error::invalid("feature pyramid levels differ in shape"));
        }
        Ok(Self { levels })
    }

    /// Degenerate set holding one map, for single-scale matching.
    pub fn single(map: FeatureMap) -> Self {
        Self {
            levels: vec![(Scale::Base, map)],
        }
    }

    pub fn levels(&self) -> &[(Scale, FeatureMap)] {
        &self.levels
    }

    pub fn maps(&self) -> impl Iterator<Item = &FeatureMap> {
        self.levels.iter().map(|(_, m)| m)
    }

    pub fn level(&self, scale: Scale) -> Option<&FeatureMap> {
        self.levels.iter().find(|(s, _)| *s == scale).map(|(_, m)| m)
    }

    pub fn height(&self) -> usize {
        self.levels[0].1.height
    }

    pub fn width(&self) -> usize {
        self.levels[0].1.width
    }

    pub fn depth(&self) -> usize {
        self.levels[0].1.depth
    }

    /// Only the base level, for single-scale scoring.
    pub fn base_only(&self) -> FeaturePyramidSet {
        let map = self.level(Scale::Base).unwrap_or(&self.levels[0].1).clone();
        Self::single(map)
    }

    /// Per-channel zero mean and unit variance, with statistics pooled over
    /// every level so cross-level distances stay comparable.
    pub fn standardized(&self) -> FeaturePyramidSet {
        let d = self.depth();
        let mut sum = vec![0.0_f64; d];
        let mut sq = vec![0.0_f64; d];
        let mut n = 0usize;
        for map in self.maps() {
            for px in map.data.chunks_exact(d) {
                for k in 0..d {
                    sum[k] += px[k] as f64;
                    sq[k] += (px[k] as f64).powi(2);
                }
            }
            n += map.height * map.width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let levels = self
            .levels
            .iter()
            .map(|(s, m)| {
                let data =
                    m.data
                        .chunks_exact(d)
                        .flat_map(|px| {
                            px.iter().enumerate().map(|(k, v)| ((*v as f64 - mean[k]) * inv_std[k]) as f32)
                        })
                        .collect();
                (*s, FeatureMap { data, ..m.clone() })
            })
            .collect();
        FeaturePyramidSet { levels }
    }
}

/// Which descriptor family to extract.
#[derive(Clone, Debug)]
pub enum Extractor {
    Zernike(ZernikeBasis),
    Conv(ConvWeights),
}

impl Extractor {
    pub fn extract(&self, img: &crate::imgproc::ImageBuffer) -> Result<FeatureMap> {
        match self {
            Extractor::Zernike(basis) => zernike_features(&luminance(img), basis),
            Extractor::Conv(weights) => conv_features(img, weights),
        }
    }
}

/// Runs the extractor on the up, base and down images and resamples the
/// results to the base resolution.
pub fn feature_pyramid(pyr: &ScalePyramid, extractor: &Extractor) -> Result<FeaturePyramidSet> {
    let (h, w) = (pyr.base.height(), pyr.base.width());
    let inputs = [
        (Scale::Up, &pyr.up),
        (Scale::Base, &pyr.base),
        (Scale::Down, &pyr.down),
    ];
    let levels = inputs
        .par_iter()
        .map(|(s, img)| extractor.extract(img).map(|m| (*s, m.resized(h, w))))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramidSet::new(levels)
}
