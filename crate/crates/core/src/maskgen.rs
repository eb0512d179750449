//! Mask types, the rule-based copy-move decoder and visualization overlays.
//!
//! The decoder sees the same evidence a learned decoder would: the fit-error
//! maps and the offset field of each feature family. A pixel is a copy-move
//! core pixel when, for some family, the median fit error over radii falls
//! below `eps_threshold` and its match points back to it within
//! `consistency_tol` pixels. The core is median filtered, components smaller
//! than `min_region_px` are dropped, and the survivors are grown back by
//! `dilate_radius`: a pixel only passes the fit test once its whole disk sits
//! in coherent motion, so raw cores are eroded by about one fitting radius.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dlf::FitErrorMap;
use crate::error::{Error, Result};
use crate::imgproc::{save_png, ImageBuffer};
use crate::patchmatch::OffsetField;

/// Ground-truth pixel classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Source = 1,
    Target = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Background, Label::Source, Label::Target];

    /// PNG color: background black, source green, target red.
    pub fn color(self) -> [f32; 3] {
        match self {
            Label::Background => [0.0, 0.0, 0.0],
            Label::Source => [0.0, 1.0, 0.0],
            Label::Target => [1.0, 0.0, 0.0],
        }
    }
}

/// Three-class label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![Label::Background; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Copy-move (source or target) versus background.
    pub fn binary(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|l| *l != Label::Background).collect(),
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        let data = self.labels.iter().flat_map(|l| l.color()).collect();
        ImageBuffer::from_vec(self.height, self.width, 3, data).expect("valid colors")
    }

    /// Decodes the RGB convention; pure green is source, pure red target,
    /// anything else non-black counts as target.
    pub fn from_image(img: &ImageBuffer) -> ClassMask {
        let (h, w) = (img.height(), img.width());
        let mut mask = ClassMask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(y, x);
                let label = if p.iter().all(|v| *v < 0.5) {
                    Label::Background
                } else if p.len() == 3 && p[1] >= 0.5 && p[0] < 0.5 {
                    Label::Source
                } else {
                    Label::Target
                };
                mask.set(y, x, label);
            }
        }
        mask
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&self.to_image(), path)
    }
}

/// Background / copy-move raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self::from_vec(height, width, vec![false; height * width]).expect("sized")
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask length does not match its shape"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// 8-bit gray image, copy-move 255.
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        ImageBuffer::from_vec(self.height, self.width, 1, data).expect("valid samples")
    }

    /// Any channel at or above one half marks copy-move.
    pub fn from_image(img: &ImageBuffer) -> BinaryMask {
        let (h, w) = (img.height(), img.width());
        let data = (0..h * w)
            .map(|i| img.pixel(i / w, i % w).iter().any(|v| *v >= 0.5))
            .collect();
        BinaryMask { height: h, width: w, data }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&self.to_image(), path)
    }

    /// Majority vote over the `(2r+1)^2` window, clipped at borders.
    pub fn median_filtered(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut sat = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += self.data[y * w + x] as u32;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let mut out = BinaryMask::new(h, w);
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                let ones = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0];
                let total = ((y1 - y0) * (x1 - x0)) as u32;
                out.data[y * w + x] = 2 * ones > total;
            }
        }
        out
    }

    /// 8-connected component labels (0 = unset) and component sizes.
    pub fn components(&self) -> (Vec<u32>, Vec<usize>) {
        let (h, w) = (self.height, self.width);
        let mut labels = vec![0u32; h * w];
        let mut sizes = vec![0usize];
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0;
            labels[start] = id;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if self.data[j] && labels[j] == 0 {
                            labels[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    /// Drops 8-connected components with fewer than `min_size` pixels.
    pub fn without_small_components(&self, min_size: usize) -> BinaryMask {
        let (labels, sizes) = self.components();
        let data = labels.iter().map(|l| *l != 0 && sizes[*l as usize] >= min_size).collect();
        BinaryMask { data, ..self.clone() }
    }

    /// Dilation by the closed Euclidean disk of radius `r`.
    pub fn dilated(&self, r: usize) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let (h, w) = (self.height as isize, self.width as isize);
        let r = r as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y as usize, x as usize) {
                    continue;
                }
                // interior pixels add nothing beyond their set neighbors' disks
                let interior = [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().all(|(dy, dx)| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny >= 0 && nx >= 0 && ny < h && nx < w && self.get(ny as usize, nx as usize)
                });
                if interior {
                    continue;
                }
                for (dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h && nx < w {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
        out
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        BinaryMask { data, ..self.clone() }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        BinaryMask { data, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Cutoff on the median fit error, in squared pixels.
    pub eps_threshold: f32,
    pub min_region_px: usize,
    /// Maximum `|delta(p + delta(p)) + delta(p)|`, in pixels.
    pub consistency_tol: f32,
    pub median_radius: usize,
    /// Growth applied to surviving cores; 0 disables it.
    pub dilate_radius: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            eps_threshold: 2.0,
            min_region_px: 64,
            consistency_tol: 4.0,
            median_radius: 2,
            dilate_radius: 15,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_threshold.is_finite() && self.eps_threshold > 0.0) {
            return Err(Error::invalid("eps_threshold must be positive"));
        }
        if !(self.consistency_tol.is_finite() && self.consistency_tol > 0.0) {
            return Err(Error::invalid("consistency_tol must be positive"));
        }
        Ok(())
    }
}

/// Evidence from one feature family.
#[derive(Clone, Copy, Debug)]
pub struct FamilyEvidence<'a> {
    pub errors: &'a FitErrorMap,
    pub field: &'a OffsetField,
}

/// Anything that turns per-family evidence into a copy-move mask.
pub trait MaskDecoder {
    fn decode(&self, families: &[FamilyEvidence<'_>]) -> Result<BinaryMask>;
}

/// The thresholded-fit-error decoder described in the module docs.
#[derive(Clone, Debug, Default)]
pub struct RuleDecoder {
    pub config: DecoderConfig,
}

impl MaskDecoder for RuleDecoder {
    fn decode(&self, families: &[FamilyEvidence<'_>]) -> Result<BinaryMask> {
        decode_mask(families, &self.config)
    }
}

/// Pixels whose match maps back within `tol`.
pub fn mirror_consistent(field: &OffsetField, tol: f32) -> BinaryMask {
    let (h, w) = (field.height(), field.width());
    let tol = tol as f64;
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (dy, dx) = field.get(y, x);
            let (dy, dx) = (dy as f64, dx as f64);
            let (by, bx) = field.sample(y as f64 + dy, x as f64 + dx);
            ((by + dy).powi(2) + (bx + dx).powi(2)).sqrt() <= tol
        })
        .collect();
    BinaryMask { height: h, width: w, data }
}

/// Rule-based copy-move decision; see the module docs.
pub fn decode_mask(families: &[FamilyEvidence<'_>], cfg: &DecoderConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let first = families
        .first()
        .ok_or_else(|| Error::invalid("decoder needs at least one feature family"))?;
    let (h, w) = (first.field.height(), first.field.width());
    for f in families {
        if (f.field.height(), f.field.width()) != (h, w) || (f.errors.height(), f.errors.width()) != (h, w) {
            return Err(Error::invalid("decoder inputs differ in dimensions"));
        }
    }
    let mut core = BinaryMask::new(h, w);
    for f in families {
        let consistent = mirror_consistent(f.field, cfg.consistency_tol);
        for y in 0..h {
            for x in 0..w {
                if consistent.get(y, x) && f.errors.median(y, x) < cfg.eps_threshold {
                    core.set(y, x, true);
                }
            }
        }
    }
    let cleaned = core
        .median_filtered(cfg.median_radius)
        .without_small_components(cfg.min_region_px);
    Ok(cleaned.dilated(cfg.dilate_radius))
}

/// Blends mask colors over an image at half opacity.
pub fn overlay(img: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer> {
    if (img.height(), img.width()) != (mask.height, mask.width) {
        return Err(Error::invalid("overlay mask and image differ in size"));
    }
    tint(img, |y, x| mask.get(y, x).then_some(Label::Target.color()))
}

/// Three-class overlay: source green, target red.
pub fn overlay_classes(img: &ImageBuffer, mask: &ClassMask) -> Result<ImageBuffer> {
    if (img.height(), img.width()) != (mask.height, mask.width) {
        return Err(Error::invalid("overlay mask and image differ in size"));
    }
    tint(img, |y, x| match mask.get(y, x) {
        Label::Background => None,
        l => Some(l.color()),
    })
}

fn tint(img: &ImageBuffer, color: impl Fn(usize, usize) -> Option<[f32; 3]>) -> Result<ImageBuffer> {
    const ALPHA: f32 = 0.5;
    let mut out = img.to_rgb();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if let Some(c) = color(y, x) {
                for (ch, cv) in c.iter().enumerate() {
                    let v = out.get(y, x, ch);
                    out.set(y, x, ch, (1.0 - ALPHA) * v + ALPHA * cv);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlf::{dlf_errors, DEFAULT_RADII, DEGENERATE_ERROR};

    fn square_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, true);
            }
        }
        m
    }

    /// Two 30x30 squares matched onto each other by a pure translation,
    /// random offsets elsewhere.
    fn pair_field() -> (OffsetField, BinaryMask) {
        let (h, w) = (96, 96);
        let truth = square_mask(h, w, 10, 10, 30).or(&square_mask(h, w, 55, 50, 30));
        let mut s = 7u64;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        let mut f = OffsetField::from_fn(h, w, |y, x| {
            if (10..40).contains(&y) && (10..40).contains(&x) {
                (45.0, 40.0)
            } else if (55..85).contains(&y) && (50..80).contains(&x) {
                (-45.0, -40.0)
            } else {
                ((rnd() - 0.5) * 120.0, (rnd() - 0.5) * 120.0)
            }
        });
        f.clamp_to_bounds();
        (f, truth)
    }

    #[test]
    fn sentinel_errors_give_empty_mask() {
        let (f, _) = pair_field();
        let e = FitErrorMap::from_vec(96, 96, vec![7, 9, 11], vec![DEGENERATE_ERROR; 96 * 96 * 3]).unwrap();
        let m = decode_mask(&[FamilyEvidence { errors: &e, field: &f }], &DecoderConfig::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn ideal_pair_is_recovered() {
        let (f, truth) = pair_field();
        let e = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        // sharp edges erode the core by one fitting radius only; matched
        // fields lose a wider band and use the larger default growth
        let cfg = DecoderConfig {
            dilate_radius: 9,
            ..DecoderConfig::default()
        };
        let m = decode_mask(&[FamilyEvidence { errors: &e, field: &f }], &cfg).unwrap();
        let tp = m.and(&truth).count() as f64;
        let (p, r) = (tp / m.count() as f64, tp / truth.count() as f64);
        assert!(2.0 * p * r / (p + r) > 0.9, "p={p} r={r}");
        // decoding twice gives the same mask
        assert_eq!(m, decode_mask(&[FamilyEvidence { errors: &e, field: &f }], &cfg).unwrap());
    }

    #[test]
    fn mirror_check_is_symmetric_on_ideal_pairs() {
        let (f, _) = pair_field();
        let c = mirror_consistent(&f, 0.5);
        assert!(c.get(20, 20) && c.get(65, 60));
    }

    #[test]
    fn threshold_homogeneity() {
        let (f, _) = pair_field();
        let e = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        let cfg = DecoderConfig::default();
        let base = decode_mask(&[FamilyEvidence { errors: &e, field: &f }], &cfg).unwrap();
        for c in [0.25_f32, 2.0, 8.0] {
            let scaled = e.scaled(c);
            let cfg_c = DecoderConfig {
                eps_threshold: cfg.eps_threshold * c,
                ..cfg.clone()
            };
            let m = decode_mask(&[FamilyEvidence { errors: &scaled, field: &f }], &cfg_c).unwrap();
            assert_eq!(m, base);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (f, _) = pair_field();
        let e = FitErrorMap::from_vec(4, 4, vec![7], vec![0.0; 16]).unwrap();
        let r = decode_mask(&[FamilyEvidence { errors: &e, field: &f }], &DecoderConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(decode_mask(&[], &DecoderConfig::default()).is_err());
    }

    #[test]
    fn small_specks_are_removed() {
        let mut m = square_mask(40, 40, 5, 5, 12);
        for x in 25..35 {
            m.set(30, x, true);
        }
        let cleaned = m.without_small_components(64);
        assert_eq!(cleaned.count(), 144);
        assert!(!cleaned.get(30, 30));
    }

    #[test]
    fn components_use_eight_connectivity() {
        let mut m = BinaryMask::new(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(3, 3, true);
        let (_, sizes) = m.components();
        assert_eq!(&sizes[1..], &[2, 1]);
    }

    #[test]
    fn median_filter_removes_isolated_pixels() {
        let mut m = square_mask(20, 20, 4, 4, 10);
        m.set(17, 17, true);
        let f = m.median_filtered(1);
        assert!(!f.get(17, 17));
        assert!(f.get(8, 8));
    }

    #[test]
    fn dilation_by_disk() {
        let mut m = BinaryMask::new(21, 21);
        m.set(10, 10, true);
        let d = m.dilated(3);
        let expect = (-3i32..=3).flat_map(|a| (-3i32..=3).map(move |b| (a, b))).filter(|(a, b)| a * a + b * b <= 9).count();
        assert_eq!(d.count(), expect);
        let sq = square_mask(30, 30, 10, 10, 8);
        let brute = {
            let mut out = BinaryMask::new(30, 30);
            for y in 0..30i32 {
                for x in 0..30i32 {
                    let hit = (10..18).any(|sy: i32| (10..18).any(|sx: i32| (sy - y).pow(2) + (sx - x).pow(2) <= 16));
                    out.set(y as usize, x as usize, hit);
                }
            }
            out
        };
        assert_eq!(sq.dilated(4), brute);
    }

    #[test]
    fn class_mask_png_convention() {
        let mut c = ClassMask::new(2, 3);
        c.set(0, 1, Label::Source);
        c.set(1, 2, Label::Target);
        let img = c.to_image();
        assert_eq!(img.pixel(0, 1), &[0.0, 1.0, 0.0]);
        assert_eq!(img.pixel(1, 2), &[1.0, 0.0, 0.0]);
        assert_eq!(ClassMask::from_image(&img), c);
        assert_eq!(c.binary().count(), 2);
        let b = c.binary().to_image();
        assert_eq!(BinaryMask::from_image(&b), c.binary());
    }

    #[test]
    fn overlays() {
        let img = ImageBuffer::from_fn(6, 8, 3, |y, x, c| (y + x + c) as f32 / 20.0).unwrap();
        let empty = BinaryMask::new(6, 8);
        assert_eq!(overlay(&img, &empty).unwrap(), img);

        let full = BinaryMask::from_vec(6, 8, vec![true; 48]).unwrap();
        let tinted = overlay(&img, &full).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let (p, q) = (img.pixel(y, x), tinted.pixel(y, x));
                assert!((q[0] - (0.5 * p[0] + 0.5)).abs() < 1e-6);
                assert!((q[1] - 0.5 * p[1]).abs() < 1e-6 && (q[2] - 0.5 * p[2]).abs() < 1e-6);
            }
        }

        let half = BinaryMask::from_vec(6, 8, (0..48).map(|i| i % 8 < 4).collect()).unwrap();
        let o = overlay(&img, &half).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(o.pixel(y, x) != img.pixel(y, x), x < 4);
            }
        }
        assert!(overlay(&img, &BinaryMask::new(5, 8)).is_err());

        let mut cls = ClassMask::new(6, 8);
        cls.set(0, 0, Label::Source);
        let o = overlay_classes(&img, &cls).unwrap();
        assert!(o.pixel(0, 0)[1] > img.pixel(0, 0)[1]);
        assert_eq!(o.pixel(5, 5), img.pixel(5, 5));
    }
}
