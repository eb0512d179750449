//! Synthetic copy-move forgeries with three-class ground truth.
//!
//! A forgery cuts a random star-shaped polygon out of an image, warps it by
//! a similarity transform and pastes it elsewhere. Target coverage is
//! computed by mapping 4x4 subsamples of each destination pixel back into the
//! source polygon, so integer translations and quarter turns reproduce the
//! source footprint exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{load_image, resize_to, save_png, ImageBuffer, Similarity};
use crate::maskgen::{ClassMask, Label};
use crate::rawio::write_atomic;

const PLACEMENT_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;
/// Smallest image side the generator accepts.
pub const MIN_SIDE: usize = 32;

/// Sampling ranges for forgeries; equal bounds pin a parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgerySpec {
    pub vertices: [usize; 2],
    /// Source region area as a fraction of the image area.
    pub area_frac: [f64; 2],
    /// Degrees.
    pub angle: [f64; 2],
    pub scale: [f64; 2],
    pub num_regions: [usize; 2],
    pub seed: u64,
    /// Square side to resize sources to before forging, if any.
    pub resize: Option<usize>,
}

impl Default for ForgerySpec {
    fn default() -> Self {
        Self {
            vertices: [3, 12],
            area_frac: [0.005, 0.1],
            angle: [-180.0, 180.0],
            scale: [0.5, 2.0],
            num_regions: [1, 3],
            seed: 0,
            resize: None,
        }
    }
}

fn check_range<T: PartialOrd + Copy + std::fmt::Debug>(name: &str, r: [T; 2], lo: T, hi: T) -> Result<()> {
    if r[0] <= r[1] && r[0] >= lo && r[1] <= hi {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} range {r:?} must be ordered within [{lo:?}, {hi:?}]")))
    }
}

impl ForgerySpec {
    /// Pure translations of a single region.
    pub fn translation() -> Self {
        Self {
            angle: [0.0, 0.0],
            scale: [1.0, 1.0],
            num_regions: [1, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("vertices", self.vertices, 3, 12)?;
        check_range("area_frac", self.area_frac, 0.005, 0.1)?;
        check_range("angle", self.angle, -180.0, 180.0)?;
        check_range("scale", self.scale, 0.5, 2.0)?;
        check_range("num_regions", self.num_regions, 1, 3)?;
        if self.resize.is_some_and(|s| s < MIN_SIDE) {
            return Err(Error::invalid(format!("resize side must be at least {MIN_SIDE}")));
        }
        Ok(())
    }
}

/// One placed copy-move pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Polygon in absolute `(row, col)` source coordinates.
    pub polygon: Vec<(f64, f64)>,
    /// Maps source points onto the paste site.
    pub transform: Similarity,
    pub area_frac: f64,
}

#[derive(Clone, Debug)]
pub struct Forgery {
    pub forged: ImageBuffer,
    pub truth: ClassMask,
    pub regions: Vec<Region>,
    pub warnings: Vec<String>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn shoelace(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.1 * b.0 - b.1 * a.0
        })
        .sum();
    twice.abs() / 2.0
}

/// Star-shaped polygon about the origin with exactly `area` square pixels.
/// Angles are stratified so every angular gap but a triangle's stays below
/// a half turn.
pub fn star_polygon(rng: &mut ChaCha8Rng, vertices: usize, area: f64) -> Vec<(f64, f64)> {
    let k = vertices as f64;
    let raw: Vec<(f64, f64)> = (0..vertices)
        .map(|i| {
            let t = (i as f64 + rng.gen_range(0.2..0.8)) / k * std::f64::consts::TAU;
            let r = rng.gen_range(0.45..1.0);
            (-r * t.sin(), r * t.cos())
        })
        .collect();
    let f = (area / shoelace(&raw)).sqrt();
    raw.into_iter().map(|(y, x)| (y * f, x * f)).collect()
}

/// Even-odd point in polygon test.
pub fn point_in_polygon(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > p.0) != (yj > p.0) && p.1 < (xj - xi) * (p.0 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn subsamples() -> impl Iterator<Item = (f64, f64)> {
    let o = |i: usize| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
    (0..SUPERSAMPLE).flat_map(move |i| (0..SUPERSAMPLE).map(move |j| (o(i), o(j))))
}

/// Sparse coverage raster over a bounding box.
struct Footprint {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    cover: Vec<f32>,
}

impl Footprint {
    fn build(bbox: (usize, usize, usize, usize), f: impl Fn((f64, f64)) -> bool) -> Self {
        let (y0, x0, y1, x1) = bbox;
        let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        let mut cover = vec![0.0; h * w];
        for yy in 0..h {
            for xx in 0..w {
                let (py, px) = ((y0 + yy) as f64, (x0 + xx) as f64);
                let hits = subsamples().filter(|(oy, ox)| f((py + oy, px + ox))).count();
                cover[yy * w + xx] = hits as f32 / n;
            }
        }
        Self { y0, x0, h, w, cover }
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.h * self.w)
            .filter(|i| self.cover[*i] > 0.0)
            .map(|i| (self.y0 + i / self.w, self.x0 + i % self.w, self.cover[i]))
    }
}

/// Pixel bounding box of a point set padded by one pixel, if it fits.
fn pixel_bbox(points: &[(f64, f64)], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| points.iter().map(sel).fold(init, f);
    let y0 = fold(f64::min, f64::INFINITY, |p| p.0).floor() - 1.0;
    let y1 = fold(f64::max, f64::NEG_INFINITY, |p| p.0).ceil() + 1.0;
    let x0 = fold(f64::min, f64::INFINITY, |p| p.1).floor() - 1.0;
    let x1 = fold(f64::max, f64::NEG_INFINITY, |p| p.1).ceil() + 1.0;
    if y0 < 0.0 || x0 < 0.0 || y1 > (h - 1) as f64 || x1 > (w - 1) as f64 {
        return None;
    }
    Some((y0 as usize, x0 as usize, y1 as usize, x1 as usize))
}

fn source_footprint(region: &Region, h: usize, w: usize) -> Option<Footprint> {
    let bbox = pixel_bbox(&region.polygon, h, w)?;
    Some(Footprint::build(bbox, |p| point_in_polygon(&region.polygon, p)))
}

fn target_footprint(region: &Region, h: usize, w: usize) -> Option<Footprint> {
    let corners: Vec<_> = region.polygon.iter().map(|p| region.transform.apply(*p)).collect();
    let bbox = pixel_bbox(&corners, h, w)?;
    Some(Footprint::build(bbox, |q| {
        point_in_polygon(&region.polygon, region.transform.invert(q))
    }))
}

/// Pastes one region: content is sampled from `original`, blended into
/// `forged` by coverage, and labeled where coverage reaches one half.
pub fn apply_region(original: &ImageBuffer, forged: &mut ImageBuffer, truth: &mut ClassMask, region: &Region) -> Result<()> {
    let (h, w) = (original.height(), original.width());
    let src = source_footprint(region, h, w).ok_or_else(|| Error::invalid("source polygon leaves the image"))?;
    let dst = target_footprint(region, h, w).ok_or_else(|| Error::invalid("pasted region leaves the image"))?;
    for (y, x, c) in src.iter() {
        if c >= 0.5 {
            truth.set(y, x, Label::Source);
        }
    }
    for (y, x, c) in dst.iter() {
        let (sy, sx) = region.transform.invert((y as f64, x as f64));
        for ch in 0..original.channels() {
            let v = original.sample(sy, sx, ch);
            let blended = if c >= 1.0 { v } else { (1.0 - c) * forged.get(y, x, ch) + c * v };
            forged.set(y, x, ch, blended);
        }
        if c >= 0.5 {
            truth.set(y, x, Label::Target);
        }
    }
    Ok(())
}

/// Attempts to place one region clear of `occupied`, marking it on success.
fn place_region(rng: &mut ChaCha8Rng, spec: &ForgerySpec, area_frac: f64, h: usize, w: usize, occupied: &mut [bool]) -> Option<Region> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let k = rng.gen_range(spec.vertices[0]..=spec.vertices[1]);
        let shape = star_polygon(rng, k, area_frac * (h * w) as f64);
        let angle = uniform(rng, spec.angle);
        let scale = uniform(rng, spec.scale);
        let src_center = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let dst_center = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let region = Region {
            polygon: shape.iter().map(|(y, x)| (y + src_center.0, x + src_center.1)).collect(),
            transform: Similarity {
                angle,
                scale,
                src_center,
                dst_center,
            },
            area_frac,
        };
        let (Some(src), Some(dst)) = (source_footprint(&region, h, w), target_footprint(&region, h, w)) else {
            continue;
        };
        let mut claimed: Vec<usize> = src.iter().map(|(y, x, _)| y * w + x).collect();
        let n_src = claimed.len();
        claimed.extend(dst.iter().map(|(y, x, _)| y * w + x));
        let clash = claimed.iter().any(|i| occupied[*i]) || {
            let mut s = claimed[..n_src].to_vec();
            s.sort_unstable();
            claimed[n_src..].iter().any(|i| s.binary_search(i).is_ok())
        };
        if clash {
            continue;
        }
        for i in claimed {
            occupied[i] = true;
        }
        return Some(region);
    }
    None
}

/// Generates one forgery; deterministic in `spec.seed`.
pub fn generate(img: &ImageBuffer, spec: &ForgerySpec) -> Result<Forgery> {
    spec.validate()?;
    let (h, w) = (img.height(), img.width());
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(format!("image {h}x{w} is below the {MIN_SIDE} px minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let wanted = rng.gen_range(spec.num_regions[0]..=spec.num_regions[1]);
    let mut occupied = vec![false; h * w];
    let mut regions = Vec::new();
    let mut warnings = Vec::new();
    for _ in 0..wanted {
        let frac = uniform(&mut rng, spec.area_frac);
        match place_region(&mut rng, spec, frac, h, w, &mut occupied) {
            Some(r) => regions.push(r),
            None => {
                warnings.push(format!(
                    "placement failed after {PLACEMENT_ATTEMPTS} attempts; num_regions reduced to {}",
                    regions.len()
                ));
                break;
            }
        }
    }
    // guarantee one pair by shrinking the snippet
    let mut frac = spec.area_frac[0];
    while regions.is_empty() {
        frac *= 0.7;
        if frac * ((h * w) as f64) < 16.0 {
            return Err(Error::invalid("no copy-move region fits in this image"));
        }
        if let Some(r) = place_region(&mut rng, spec, frac, h, w, &mut occupied) {
            warnings.push(format!("area fraction shrunk to {frac:.5} to place a region"));
            regions.push(r);
        }
    }
    let mut forged = img.clone();
    let mut truth = ClassMask::new(h, w);
    for r in &regions {
        apply_region(img, &mut forged, &mut truth, r)?;
    }
    Ok(Forgery {
        forged,
        truth,
        regions,
        warnings,
    })
}

/// Textured RGB test scene: fractal value noise, flat shapes and grain.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0f32; h * w * 3];
    let mut amp = 0.5f32;
    for period in [64usize, 32, 16, 8, 4] {
        let (gh, gw) = (h / period + 2, w / period + 2);
        for ch in 0..3 {
            let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>() - 0.5).collect();
            let a = amp * if ch == 0 { 1.0 } else { 0.6 };
            for y in 0..h {
                let fy = y as f32 / period as f32;
                let (iy, ty) = (fy as usize, smooth(fy.fract()));
                for x in 0..w {
                    let fx = x as f32 / period as f32;
                    let (ix, tx) = (fx as usize, smooth(fx.fract()));
                    let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                    let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                    let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                    data[(y * w + x) * 3 + ch] += a * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
        amp *= 0.6;
    }
    let tint: [f32; 3] = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    for (i, v) in data.iter_mut().enumerate() {
        // share luminance structure across channels
        *v = tint[i % 3] + 0.6 * *v;
    }
    for _ in 0..rng.gen_range(4..10) {
        let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let (ry, rx) = (rng.gen_range(6.0..h as f32 / 5.0), rng.gen_range(6.0..w as f32 / 5.0));
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let ellipse = rng.gen_bool(0.5);
        let opacity = rng.gen_range(0.4..0.8);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for (ch, c) in color.iter().enumerate() {
                        let p = &mut data[(y * w + x) * 3 + ch];
                        *p = (1.0 - opacity) * *p + opacity * c;
                    }
                }
            }
        }
    }
    let grain = Normal::new(0.0f32, 0.02).expect("valid sigma");
    for v in data.iter_mut() {
        *v = (*v + grain.sample(&mut rng)).clamp(0.0, 1.0);
    }
    ImageBuffer::from_vec(h, w, 3, data).expect("clamped samples")
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Seed of corpus item `i`.
pub fn item_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub index: usize,
    pub forged: String,
    pub truth: String,
    pub source: String,
    pub seed: u64,
    pub regions: Vec<Region>,
    pub warnings: Vec<String>,
}

/// Column order of `manifest.tsv`.
pub const MANIFEST_COLUMNS: [&str; 13] = [
    "index",
    "forged",
    "truth",
    "source",
    "seed",
    "num_regions",
    "vertices",
    "area_frac",
    "angle",
    "scale",
    "src_center",
    "dst_center",
    "warnings",
];

impl ManifestRecord {
    fn tsv_line(&self) -> String {
        let join = |f: &dyn Fn(&Region) -> String| self.regions.iter().map(f).collect::<Vec<_>>().join(",");
        let center = |c: (f64, f64)| format!("{}:{}", c.0, c.1);
        let fields = [
            self.index.to_string(),
            self.forged.clone(),
            self.truth.clone(),
            self.source.clone(),
            self.seed.to_string(),
            self.regions.len().to_string(),
            join(&|r| r.polygon.len().to_string()),
            join(&|r| format!("{:.6}", r.area_frac)),
            join(&|r| format!("{:.4}", r.transform.angle)),
            join(&|r| format!("{:.4}", r.transform.scale)),
            join(&|r| center(r.transform.src_center)),
            join(&|r| center(r.transform.dst_center)),
            self.warnings.join("; ").replace(['\t', '\n'], " "),
        ];
        fields.join("\t")
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Per-item failures; generation continued past them.
    pub errors: Vec<String>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = MANIFEST_COLUMNS.join("\t");
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", r.tsv_line());
        }
        s
    }
}

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `n` forgeries from the images in `src_dir` into
/// `out_dir/{forged,truth}/NNNN.png` plus `out_dir/manifest.tsv`.
pub fn generate_corpus(src_dir: &Path, n: usize, spec: &ForgerySpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let sources = list_images(src_dir)?;
    if sources.is_empty() && n > 0 {
        return Err(Error::invalid(format!("no source images in {}", src_dir.display())));
    }
    write_corpus(n, out_dir, |i| {
        let src = &sources[i % sources.len()];
        let name = src.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let run = || -> Result<ManifestRecord> {
            let mut img = load_image(src)?;
            if let Some(side) = spec.resize {
                img = resize_to(&img, side, side)?;
            }
            corpus_item(&img, name.clone(), i, spec, out_dir)
        };
        run().map_err(|e| format!("item {i} ({}): {e}", src.display()))
    })
}

/// Seed salt separating scene synthesis from forgery placement.
const SCENE_SALT: u64 = 0x5ce7_e5a1_7000_0001;

/// [`generate_corpus`] over `side x side` synthetic scenes; the source
/// column reads `synthetic:<scene seed>`.
pub fn generate_synthetic_corpus(n: usize, side: usize, spec: &ForgerySpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if side < MIN_SIDE {
        return Err(Error::invalid(format!("synthetic scenes need a side of at least {MIN_SIDE}")));
    }
    write_corpus(n, out_dir, |i| {
        let scene_seed = item_seed(spec.seed ^ SCENE_SALT, i);
        let img = synthetic_scene(side, side, scene_seed);
        corpus_item(&img, format!("synthetic:{scene_seed}"), i, spec, out_dir).map_err(|e| format!("item {i}: {e}"))
    })
}

fn write_corpus(
    n: usize,
    out_dir: &Path,
    item: impl Fn(usize) -> std::result::Result<ManifestRecord, String> + Sync + Send,
) -> Result<Manifest> {
    let items: Vec<_> = (0..n).into_par_iter().map(&item).collect();
    let mut manifest = Manifest::default();
    for item in items {
        match item {
            Ok(r) => manifest.records.push(r),
            Err(e) => manifest.errors.push(e),
        }
    }
    write_atomic(&out_dir.join("manifest.tsv"), manifest.to_tsv().as_bytes())?;
    Ok(manifest)
}

fn corpus_item(img: &ImageBuffer, source: String, i: usize, spec: &ForgerySpec, out_dir: &Path) -> Result<ManifestRecord> {
    let seed = item_seed(spec.seed, i);
    let f = generate(img, &ForgerySpec { seed, ..spec.clone() })?;
    let name = format!("{i:04}.png");
    save_png(&f.forged, &out_dir.join("forged").join(&name))?;
    f.truth.save(&out_dir.join("truth").join(&name))?;
    Ok(ManifestRecord {
        index: i,
        forged: format!("forged/{name}"),
        truth: format!("truth/{name}"),
        source,
        seed,
        regions: f.regions,
        warnings: f.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> ImageBuffer {
        synthetic_scene(128, 128, 3)
    }

    #[test]
    fn translation_copies_bits() {
        let img = scene();
        for seed in 0..5 {
            let f = generate(&img, &ForgerySpec { seed, ..ForgerySpec::translation() }).unwrap();
            let r = &f.regions[0];
            assert!(f.warnings.is_empty());
            assert_eq!(f.truth.count(Label::Source), f.truth.count(Label::Target));
            let (ty, tx) = (
                r.transform.dst_center.0 - r.transform.src_center.0,
                r.transform.dst_center.1 - r.transform.src_center.1,
            );
            let src = source_footprint(r, 128, 128).unwrap();
            let mut full = 0;
            for (y, x, c) in src.iter() {
                let (y2, x2) = ((y as f64 + ty) as usize, (x as f64 + tx) as usize);
                assert_eq!(f.truth.get(y, x) == Label::Source, f.truth.get(y2, x2) == Label::Target);
                if c >= 1.0 {
                    full += 1;
                    assert_eq!(f.forged.pixel(y2, x2), img.pixel(y, x));
                }
            }
            assert!(full > 0);
        }
    }

    #[test]
    fn quarter_turn_permutes_square() {
        let img = scene();
        let mut forged = img.clone();
        let mut truth = ClassMask::new(128, 128);
        let (cy, cx) = (30.0, 30.0);
        let region = Region {
            polygon: vec![(cy - 10.0, cx - 10.0), (cy - 10.0, cx + 10.0), (cy + 10.0, cx + 10.0), (cy + 10.0, cx - 10.0)],
            transform: Similarity {
                angle: 90.0,
                scale: 1.0,
                src_center: (cy, cx),
                dst_center: (90.0, 80.0),
            },
            area_frac: 0.0,
        };
        apply_region(&img, &mut forged, &mut truth, &region).unwrap();
        assert_eq!(truth.count(Label::Source), truth.count(Label::Target));
        for dy in -10i64..=10 {
            for dx in -10i64..=10 {
                // counter-clockwise: (dy, dx) -> (-dx, dy)
                let (y, x) = ((30 + dy) as usize, (30 + dx) as usize);
                let (y2, x2) = ((90 - dx) as usize, (80 + dy) as usize);
                assert_eq!(truth.get(y, x) == Label::Source, truth.get(y2, x2) == Label::Target);
                if dy.abs() < 10 && dx.abs() < 10 {
                    assert_eq!(forged.pixel(y2, x2), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn doubling_scale_quadruples_area() {
        let img = synthetic_scene(256, 256, 9);
        for seed in 0..6 {
            let spec = ForgerySpec {
                scale: [2.0, 2.0],
                num_regions: [1, 1],
                area_frac: [0.005, 0.02],
                seed,
                ..ForgerySpec::default()
            };
            let f = generate(&img, &spec).unwrap();
            let (s, t) = (f.truth.count(Label::Source) as f64, f.truth.count(Label::Target) as f64);
            assert!((t / (4.0 * s) - 1.0).abs() < 0.15, "{s} {t}");
        }
    }

    #[test]
    fn regions_never_overlap_and_are_deterministic() {
        let img = scene();
        for seed in 0..20 {
            let spec = ForgerySpec {
                seed,
                num_regions: [3, 3],
                ..ForgerySpec::default()
            };
            let f = generate(&img, &spec).unwrap();
            let mut claimed = vec![0u8; 128 * 128];
            for r in &f.regions {
                for fp in [source_footprint(r, 128, 128).unwrap(), target_footprint(r, 128, 128).unwrap()] {
                    for (y, x, _) in fp.iter() {
                        claimed[y * 128 + x] += 1;
                    }
                }
            }
            assert!(claimed.iter().all(|c| *c <= 1));
            assert!(f.truth.count(Label::Source) > 0 && f.truth.count(Label::Target) > 0);
            if f.regions.len() < 3 {
                assert!(!f.warnings.is_empty());
            }
            let g = generate(&img, &spec).unwrap();
            assert_eq!(f.forged, g.forged);
            assert_eq!(f.truth, g.truth);
        }
    }

    #[test]
    fn polygon_area_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 3..=12 {
            let p = star_polygon(&mut rng, k, 500.0);
            assert!((shoelace(&p) - 500.0).abs() < 1e-6);
            assert_eq!(p.len(), k);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ForgerySpec::default().validate().is_ok());
        assert!(ForgerySpec { scale: [0.4, 1.0], ..Default::default() }.validate().is_err());
        assert!(ForgerySpec { vertices: [5, 4], ..Default::default() }.validate().is_err());
        assert!(generate(&ImageBuffer::new(20, 20, 3).unwrap(), &ForgerySpec::default()).is_err());
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        for i in 0..2 {
            save_png(&synthetic_scene(64, 64, i), &src.join(format!("s{i}.png"))).unwrap();
        }
        std::fs::write(src.join("broken.png"), b"not a png").unwrap();
        let spec = ForgerySpec { seed: 4, ..Default::default() };

        let empty = generate_corpus(&src, 0, &spec, &dir.path().join("e")).unwrap();
        assert!(empty.records.is_empty());
        let tsv = std::fs::read_to_string(dir.path().join("e/manifest.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 1);

        let a = generate_corpus(&src, 6, &spec, &dir.path().join("a")).unwrap();
        let b = generate_corpus(&src, 6, &spec, &dir.path().join("b")).unwrap();
        // broken.png sorts first and is reused every third item
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.errors.len(), 2);
        for r in &a.records {
            for rel in [&r.forged, &r.truth] {
                let x = std::fs::read(dir.path().join("a").join(rel)).unwrap();
                let y = std::fs::read(dir.path().join("b").join(rel)).unwrap();
                assert_eq!(x, y);
            }
            let truth = ClassMask::from_image(&load_image(&dir.path().join("a").join(&r.truth)).unwrap());
            assert!(truth.count(Label::Source) > 0 && truth.count(Label::Target) > 0);
        }
        assert_eq!(
            std::fs::read(dir.path().join("a/manifest.tsv")).unwrap(),
            std::fs::read(dir.path().join("b/manifest.tsv")).unwrap()
        );
        assert_eq!(b.to_tsv().lines().count(), 5);
    }

    #[test]
    fn synthetic_corpus_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ForgerySpec { seed: 9, ..ForgerySpec::translation() };
        let a = generate_synthetic_corpus(3, 64, &spec, &dir.path().join("a")).unwrap();
        generate_synthetic_corpus(3, 64, &spec, &dir.path().join("b")).unwrap();
        assert_eq!(a.records.len(), 3);
        assert!(a.records[0].source.starts_with("synthetic:"));
        for name in ["manifest.tsv", "forged/0002.png", "truth/0002.png"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(name)).unwrap(),
                std::fs::read(dir.path().join("b").join(name)).unwrap()
            );
        }
        assert!(generate_synthetic_corpus(1, 16, &spec, &dir.path().join("c")).is_err());
    }
}
