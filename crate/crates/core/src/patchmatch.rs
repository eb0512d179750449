//! Cross-scale PatchMatch with softmax candidate selection.
//!
//! Every iteration builds seventeen candidates per pixel from the previous
//! field: the current offset, four axial neighbors' offsets (zero-order),
//! eight linear extrapolations along axial and diagonal directions
//! (first-order), and four random perturbations. Candidates are scored by the
//! best negative L1 descriptor distance over all pairs of pyramid levels and
//! blended with softmax weights. All pixels update from the same previous
//! field, so rows may be processed in any order.
//!
//! Neighbor geometry, as `(dy, dx)` steps: `a` left, `b` up-left, `c` up,
//! `d` up-right, `e` right, `f` down-right, `g` down, `h` down-left. The
//! second-order partner of direction `u` is the pixel at `2u`. Shifts wrap
//! around the borders.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BilinearTaps, FeatureMap, FeaturePyramidSet};
use crate::imgproc::bilinear_at;
use crate::rawio::encode_raw;

/// Candidates per pixel and iteration.
pub const NUM_CANDIDATES: usize = 17;

/// Score given to candidates below the minimum offset norm. Finite, so the
/// softmax assigns them zero weight without tripping the finiteness check.
pub const EXCLUDED_SCORE: f32 = -1.0e30;

/// Axial directions `a, c, e, g` as `(dy, dx)`.
pub const AXIAL: [(isize, isize); 4] = [(0, -1), (-1, 0), (0, 1), (1, 0)];

/// All eight directions `a..h` as `(dy, dx)`.
pub const DIRECTIONS: [(isize, isize); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];

const INIT_STREAM: u64 = 0;
const INIT_WORDS_PER_PIXEL: u128 = 64;
const SEARCH_WORDS_PER_PIXEL: u128 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmConfig {
    pub iterations: usize,
    /// Softmax temperature applied to candidate scores.
    pub beta: f32,
    /// Half-width of the random-search square, in pixels.
    pub search_radius: f32,
    /// Offsets shorter than this are rejected at initialization and scored
    /// as excluded afterwards.
    pub min_offset_norm: f32,
    pub seed: u64,
    /// Score over all pairs of pyramid levels; otherwise base level only.
    pub cross_scale: bool,
}

impl Default for PmConfig {
    fn default() -> Self {
        Self {
            iterations: 24,
            beta: 10.0,
            search_radius: 25.0,
            min_offset_norm: 8.0,
            seed: 0x5eed,
            cross_scale: true,
        }
    }
}

impl PmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("patchmatch needs at least one iteration"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.search_radius.is_finite() && self.search_radius >= 0.0) {
            return Err(Error::invalid("search radius must be non-negative"));
        }
        if !(self.min_offset_norm.is_finite() && self.min_offset_norm >= 0.0) {
            return Err(Error::invalid("min offset norm must be non-negative"));
        }
        Ok(())
    }
}

/// Continuous per-pixel offsets `(dy, dx)`; `(y + dy, x + dx)` stays inside
/// the raster.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    dy: Vec<f32>,
    dx: Vec<f32>,
}

impl OffsetField {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut dy = Vec::with_capacity(height * width);
        let mut dx = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                dy.push(a);
                dx.push(b);
            }
        }
        Self { height, width, dy, dx }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dy[i], self.dx[i])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: (f32, f32)) {
        let i = y * self.width + x;
        self.dy[i] = v.0;
        self.dx[i] = v.1;
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    /// Lookup with wraparound indices.
    #[inline]
    fn get_wrapped(&self, y: isize, x: isize) -> (f32, f32) {
        let yy = y.rem_euclid(self.height as isize) as usize;
        let xx = x.rem_euclid(self.width as isize) as usize;
        self.get(yy, xx)
    }

    /// Bilinear lookup of both components at a continuous position.
    pub fn sample(&self, y: f64, x: f64) -> (f64, f64) {
        (
            bilinear_at(&self.dy, self.height, self.width, 1, y, x, 0),
            bilinear_at(&self.dx, self.height, self.width, 1, y, x, 0),
        )
    }

    /// Whole-field circular shift: `out(i, j) = self(i + sy, j + sx)`.
    pub fn shifted(&self, sy: isize, sx: isize) -> OffsetField {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get_wrapped(y as isize + sy, x as isize + sx)
        })
    }

    /// Component-wise median over a `(2r+1)^2` window, truncated at the
    /// borders. Targets are clamped back into the raster.
    pub fn median_filtered(&self, radius: usize) -> OffsetField {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let rows: Vec<Vec<(f32, f32)>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                let mut a = Vec::new();
                let mut b = Vec::new();
                (0..w)
                    .map(|x| {
                        let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                        a.clear();
                        b.clear();
                        for yy in y0..=y1 {
                            let row = yy * w;
                            a.extend_from_slice(&self.dy[row + x0..=row + x1]);
                            b.extend_from_slice(&self.dx[row + x0..=row + x1]);
                        }
                        let v = (median_of(&mut a), median_of(&mut b));
                        clamp_offset(v, y, x, h, w)
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<(f32, f32)> = rows.into_iter().flatten().collect();
        Self::from_fn(h, w, |y, x| flat[y * w + x])
    }

    pub fn clamp_to_bounds(&mut self) {
        for y in 0..self.height {
            for x in 0..self.width {
                let v = clamp_offset(self.get(y, x), y, x, self.height, self.width);
                self.set(y, x, v);
            }
        }
    }

    /// Checks finiteness and that every target lies inside the raster.
    pub fn check_invariants(&self) -> Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                let (dy, dx) = self.get(y, x);
                let (ty, tx) = (y as f32 + dy, x as f32 + dx);
                if !(dy.is_finite() && dx.is_finite()) {
                    return Err(Error::Invariant(format!("non-finite offset at ({y}, {x})")));
                }
                if ty < 0.0 || tx < 0.0 || ty > (self.height - 1) as f32 || tx > (self.width - 1) as f32 {
                    return Err(Error::Invariant(format!(
                        "offset at ({y}, {x}) targets ({ty}, {tx}) outside the raster"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Raw f32 encoding with header `(H, W, 2)` and `(dy, dx)` interleaved.
    pub fn to_raw(&self) -> Vec<u8> {
        let data: Vec<f32> = self.dy.iter().zip(&self.dx).flat_map(|(a, b)| [*a, *b]).collect();
        encode_raw(self.height, self.width, 2, &data).expect("length matches")
    }
}

/// Lower median; the slice is reordered.
fn median_of(v: &mut [f32]) -> f32 {
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, f32::total_cmp).1
}

/// Clamps an offset so that its target lies inside an `h x w` raster.
#[inline]
pub fn clamp_offset(v: (f32, f32), y: usize, x: usize, h: usize, w: usize) -> (f32, f32) {
    (clamp_axis(v.0, y, h), clamp_axis(v.1, x, w))
}

/// In-range components pass through unchanged, so clamping adds no rounding.
#[inline]
fn clamp_axis(d: f32, p: usize, n: usize) -> f32 {
    let t = p as f32 + d;
    if t < 0.0 {
        -(p as f32)
    } else if t > (n - 1) as f32 {
        (n - 1 - p) as f32
    } else {
        d
    }
}

#[inline]
fn norm(v: (f32, f32)) -> f32 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

/// Uniform `[0, 1)` from 24 random bits.
#[inline]
fn unit(word: u32) -> f32 {
    (word >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random integer targets, rejecting offsets shorter than `min_offset_norm`.
/// Each pixel reads its own fixed slice of one counter-based stream.
pub fn init_offsets(h: usize, w: usize, cfg: &PmConfig) -> Result<OffsetField> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("offset field needs at least 2x2 pixels, got {h}x{w}")));
    }
    let mut field = OffsetField::from_fn(h, w, |_, _| (0.0, 0.0));
    let rows: Vec<Vec<(f32, f32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = rng_for(cfg.seed, INIT_STREAM);
            (0..w)
                .map(|x| {
                    rng.set_word_pos((y * w + x) as u128 * INIT_WORDS_PER_PIXEL);
                    for _ in 0..INIT_WORDS_PER_PIXEL / 2 {
                        let ty = (rng.next_u32() as u64 * h as u64 >> 32) as usize;
                        let tx = (rng.next_u32() as u64 * w as u64 >> 32) as usize;
                        let v = (ty as f32 - y as f32, tx as f32 - x as f32);
                        if norm(v) >= cfg.min_offset_norm && v != (0.0, 0.0) {
                            return v;
                        }
                    }
                    farthest_corner(y, x, h, w)
                })
                .collect()
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            field.set(y, x, v);
        }
    }
    Ok(field)
}

fn farthest_corner(y: usize, x: usize, h: usize, w: usize) -> (f32, f32) {
    let ty = if y * 2 < h { h - 1 } else { 0 };
    let tx = if x * 2 < w { w - 1 } else { 0 };
    (ty as f32 - y as f32, tx as f32 - x as f32)
}

/// Zero-order candidates `a, c, e, g`: each pixel takes its axial
/// neighbor's offset, via circular shifts of the whole field.
pub fn zero_order_candidates(field: &OffsetField) -> Vec<OffsetField> {
    AXIAL.iter().map(|&(sy, sx)| field.shifted(sy, sx)).collect()
}

/// First-order candidates `aa..hh`: `2 * delta(p + u) - delta(p + 2u)` for
/// each of the eight directions.
pub fn first_order_candidates(field: &OffsetField) -> Vec<OffsetField> {
    DIRECTIONS
        .iter()
        .map(|&(sy, sx)| {
            let near = field.shifted(sy, sx);
            let far = field.shifted(2 * sy, 2 * sx);
            OffsetField::from_fn(field.height, field.width, |y, x| {
                let (n, f) = (near.get(y, x), far.get(y, x));
                (2.0 * n.0 - f.0, 2.0 * n.1 - f.1)
            })
        })
        .collect()
}

/// Draws the four random-search perturbations of one pixel from `rng`,
/// which must be positioned at that pixel's slot of the iteration's stream.
#[inline]
fn random_perturbations(rng: &mut ChaCha8Rng, radius: f32, out: &mut [(f32, f32)]) {
    for o in out.iter_mut().take(4) {
        let a = unit(rng.next_u32());
        let b = unit(rng.next_u32());
        *o = ((2.0 * a - 1.0) * radius, (2.0 * b - 1.0) * radius);
    }
}

/// Random-search candidates `r1..r4`: current offset plus a uniform
/// perturbation within `search_radius` on each axis, clamped to the raster.
/// Deterministic in `(seed, iteration, pixel, slot)`.
pub fn random_search_candidates(field: &OffsetField, cfg: &PmConfig, iteration: usize) -> Vec<OffsetField> {
    let (h, w) = (field.height, field.width);
    let mut layers = vec![field.clone(); 4];
    let mut rng = rng_for(cfg.seed, search_stream(iteration));
    let mut pert = [(0.0, 0.0); 4];
    for y in 0..h {
        for x in 0..w {
            rng.set_word_pos((y * w + x) as u128 * SEARCH_WORDS_PER_PIXEL);
            random_perturbations(&mut rng, cfg.search_radius, &mut pert);
            let cur = field.get(y, x);
            for (layer, p) in layers.iter_mut().zip(&pert) {
                layer.set(y, x, clamp_offset((cur.0 + p.0, cur.1 + p.1), y, x, h, w));
            }
        }
    }
    layers
}

fn search_stream(iteration: usize) -> u64 {
    iteration as u64 + 1
}

/// The seventeen candidates of every pixel, all clamped to the raster.
/// Order: current, `a c e g`, `aa..hh`, `r1..r4`.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    height: usize,
    width: usize,
    offsets: Vec<(f32, f32)>,
}

impl CandidateSet {
    pub fn generate(field: &OffsetField, cfg: &PmConfig, iteration: usize) -> Self {
        let (h, w) = (field.height, field.width);
        let mut offsets = vec![(0.0, 0.0); h * w * NUM_CANDIDATES];
        offsets
            .par_chunks_mut(w * NUM_CANDIDATES)
            .enumerate()
            .for_each(|(y, row)| {
                let mut rng = rng_for(cfg.seed, search_stream(iteration));
                rng.set_word_pos((y * w) as u128 * SEARCH_WORDS_PER_PIXEL);
                for (x, slot) in row.chunks_exact_mut(NUM_CANDIDATES).enumerate() {
                    gather_candidates(field, y, x, cfg.search_radius, &mut rng, slot);
                }
            });
        Self {
            height: h,
            width: w,
            offsets,
        }
    }

    pub fn from_offsets(height: usize, width: usize, offsets: Vec<(f32, f32)>) -> Result<Self> {
        if offsets.len() != height * width * NUM_CANDIDATES {
            return Err(Error::invalid("candidate set needs 17 offsets per pixel"));
        }
        Ok(Self {
            height,
            width,
            offsets,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &[(f32, f32)] {
        let i = (y * self.width + x) * NUM_CANDIDATES;
        &self.offsets[i..i + NUM_CANDIDATES]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn per_pixel(&self) -> usize {
        NUM_CANDIDATES
    }
}

/// Fills `out` with the 17 clamped candidates of pixel `(y, x)`; `rng` must
/// sit at the pixel's search slot and advances by one slot.
#[inline]
fn gather_candidates(
    field: &OffsetField,
    y: usize,
    x: usize,
    radius: f32,
    rng: &mut ChaCha8Rng,
    out: &mut [(f32, f32)],
) {
    let (h, w) = (field.height, field.width);
    let (yi, xi) = (y as isize, x as isize);
    let cur = field.get(y, x);
    out[0] = cur;
    for (k, &(sy, sx)) in AXIAL.iter().enumerate() {
        out[1 + k] = field.get_wrapped(yi + sy, xi + sx);
    }
    for (k, &(sy, sx)) in DIRECTIONS.iter().enumerate() {
        let n = field.get_wrapped(yi + sy, xi + sx);
        let f = field.get_wrapped(yi + 2 * sy, xi + 2 * sx);
        out[5 + k] = (2.0 * n.0 - f.0, 2.0 * n.1 - f.1);
    }
    let mut pert = [(0.0, 0.0); 4];
    random_perturbations(rng, radius, &mut pert);
    for (k, p) in pert.iter().enumerate() {
        out[13 + k] = (cur.0 + p.0, cur.1 + p.1);
    }
    for o in out.iter_mut() {
        *o = clamp_offset(*o, y, x, h, w);
    }
}

/// L1 distance with four interleaved partial sums, so the loop vectorizes.
#[inline]
fn l1(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0_f32; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| (p - q).abs()).sum();
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            lanes[k] += (p[k] - q[k]).abs();
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// All levels of a set interleaved per pixel, so one candidate lookup
/// touches a single contiguous run of memory.
struct PackedSet {
    map: FeatureMap,
    depth: usize,
}

impl PackedSet {
    fn new(pyrs: &FeaturePyramidSet) -> Self {
        let (h, w, d) = (pyrs.height(), pyrs.width(), pyrs.depth());
        let maps: Vec<&FeatureMap> = pyrs.maps().collect();
        let mut data = Vec::with_capacity(h * w * d * maps.len());
        for y in 0..h {
            for x in 0..w {
                for m in &maps {
                    data.extend_from_slice(m.descriptor(y, x));
                }
            }
        }
        Self {
            map: FeatureMap::from_vec(h, w, d * maps.len(), data).expect("shape is consistent"),
            depth: d,
        }
    }
}

/// Reusable buffers for scoring one pixel against many candidates.
struct Scorer<'a> {
    packed: &'a PackedSet,
    source: Vec<f32>,
    target: Vec<f32>,
    min_norm: f32,
}

impl<'a> Scorer<'a> {
    fn new(packed: &'a PackedSet, min_norm: f32) -> Self {
        let n = packed.map.depth();
        Self {
            source: vec![0.0; n],
            target: vec![0.0; n],
            packed,
            min_norm,
        }
    }

    fn load_source(&mut self, y: usize, x: usize) {
        self.source.copy_from_slice(self.packed.map.descriptor(y, x));
    }

    /// Best `-L1` over all (source level, target level) pairs.
    #[inline]
    fn score(&mut self, y: usize, x: usize, cand: (f32, f32)) -> f32 {
        if norm(cand) < self.min_norm {
            return EXCLUDED_SCORE;
        }
        let (ty, tx) = (y as f32 + cand.0, x as f32 + cand.1);
        let map = &self.packed.map;
        let taps = BilinearTaps::new(map.height(), map.width(), ty, tx);
        map.sample_taps(&taps, &mut self.target);
        -pair_l1_min(&self.source, &self.target, self.packed.depth)
    }
}

/// Minimum L1 over all level pairs of two concatenated descriptors.
#[inline]
fn pair_l1_min(source: &[f32], target: &[f32], d: usize) -> f32 {
    let mut best = f32::INFINITY;
    for s in source.chunks_exact(d) {
        for t in target.chunks_exact(d) {
            best = best.min(l1(s, t));
        }
    }
    best
}

/// Scores one pixel's candidates, reusing the score of exact duplicates.
#[inline]
fn score_pixel(scorer: &mut Scorer<'_>, y: usize, x: usize, cands: &[(f32, f32)], out: &mut [f32]) {
    scorer.load_source(y, x);
    for k in 0..cands.len() {
        out[k] = match cands[..k].iter().position(|c| *c == cands[k]) {
            Some(j) => out[j],
            None => scorer.score(y, x, cands[k]),
        };
    }
}

/// Cross-scale matching score of offset `cand` at pixel `pos`: the maximum
/// over level pairs `(n, m)` of `-|F_n(pos) - F_m(pos + cand)|_1`, with
/// `F_m` sampled bilinearly. A set holding only the base level yields the
/// plain single-scale score.
pub fn score_cross_scale(pyrs: &FeaturePyramidSet, pos: (usize, usize), cand: (f32, f32)) -> f32 {
    let d = pyrs.depth();
    let source: Vec<f32> = pyrs.maps().flat_map(|m| m.descriptor(pos.0, pos.1).to_vec()).collect();
    let (ty, tx) = (pos.0 as f32 + cand.0, pos.1 as f32 + cand.1);
    let target: Vec<f32> = pyrs.maps().flat_map(|m| m.sample(ty, tx)).collect();
    -pair_l1_min(&source, &target, d)
}

/// Softmax-weighted blend of one pixel's candidates. `None` when every
/// candidate is excluded.
#[inline]
fn blend(cands: &[(f32, f32)], scores: &[f32], beta: f32) -> Option<(f32, f32)> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= EXCLUDED_SCORE {
        return None;
    }
    let (mut wy, mut wx, mut total) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (c, s) in cands.iter().zip(scores) {
        let wgt = (beta as f64 * (*s as f64 - max as f64)).exp();
        wy += wgt * c.0 as f64;
        wx += wgt * c.1 as f64;
        total += wgt;
    }
    Some(((wy / total) as f32, (wx / total) as f32))
}

/// Relaxed argmax: per pixel, `sum_k softmax(beta * S)_k * delta_k`, then
/// clamped to the raster. Pixels whose candidates are all excluded keep
/// their first (current) candidate.
pub fn soft_select(candidates: &CandidateSet, scores: &[f32], beta: f32) -> Result<OffsetField> {
    let (h, w) = (candidates.height, candidates.width);
    if scores.len() != h * w * NUM_CANDIDATES {
        return Err(Error::invalid("score count does not match the candidate set"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Invariant(format!("non-finite matching score at candidate {i}")));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    Ok(OffsetField::from_fn(h, w, |y, x| {
        let i = (y * w + x) * NUM_CANDIDATES;
        let cands = candidates.at(y, x);
        let v = blend(cands, &scores[i..i + NUM_CANDIDATES], beta).unwrap_or(cands[0]);
        clamp_offset(v, y, x, h, w)
    }))
}

/// Scores every candidate of a set, excluding short offsets.
pub fn score_candidates(pyrs: &FeaturePyramidSet, candidates: &CandidateSet, min_norm: f32) -> Vec<f32> {
    let (h, w) = (candidates.height, candidates.width);
    let packed = PackedSet::new(pyrs);
    let mut scores = vec![0.0; h * w * NUM_CANDIDATES];
    scores
        .par_chunks_mut(w * NUM_CANDIDATES)
        .enumerate()
        .for_each(|(y, row)| {
            let mut scorer = Scorer::new(&packed, min_norm);
            for (x, out) in row.chunks_exact_mut(NUM_CANDIDATES).enumerate() {
                score_pixel(&mut scorer, y, x, candidates.at(y, x), out);
            }
        });
    scores
}

/// Per-pixel score of the offsets held by `field` (no norm exclusion).
pub fn field_scores(pyrs: &FeaturePyramidSet, field: &OffsetField) -> Vec<f32> {
    let (h, w) = (field.height, field.width);
    let packed = PackedSet::new(pyrs);
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut scorer = Scorer::new(&packed, 0.0);
        for (x, o) in row.iter_mut().enumerate() {
            scorer.load_source(y, x);
            *o = scorer.score(y, x, field.get(y, x));
        }
    });
    out
}

pub fn mean_field_score(pyrs: &FeaturePyramidSet, field: &OffsetField) -> f64 {
    let s = field_scores(pyrs, field);
    s.iter().map(|v| *v as f64).sum::<f64>() / s.len() as f64
}

/// One propagation + evaluation step from `field`.
pub fn iterate(pyrs: &FeaturePyramidSet, field: &OffsetField, cfg: &PmConfig, iteration: usize) -> OffsetField {
    iterate_packed(&PackedSet::new(pyrs), field, cfg, iteration)
}

fn iterate_packed(packed: &PackedSet, field: &OffsetField, cfg: &PmConfig, iteration: usize) -> OffsetField {
    let (h, w) = (field.height, field.width);
    let rows: Vec<Vec<(f32, f32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = rng_for(cfg.seed, search_stream(iteration));
            rng.set_word_pos((y * w) as u128 * SEARCH_WORDS_PER_PIXEL);
            let mut scorer = Scorer::new(packed, cfg.min_offset_norm);
            let mut cands = [(0.0, 0.0); NUM_CANDIDATES];
            let mut scores = [0.0; NUM_CANDIDATES];
            (0..w)
                .map(|x| {
                    gather_candidates(field, y, x, cfg.search_radius, &mut rng, &mut cands);
                    score_pixel(&mut scorer, y, x, &cands, &mut scores);
                    let v = blend(&cands, &scores, cfg.beta).unwrap_or(cands[0]);
                    clamp_offset(v, y, x, h, w)
                })
                .collect()
        })
        .collect();
    let mut next = field.clone();
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            next.set(y, x, v);
        }
    }
    next
}

fn matching_set(pyrs: &FeaturePyramidSet, cfg: &PmConfig) -> FeaturePyramidSet {
    if cfg.cross_scale {
        pyrs.clone()
    } else {
        pyrs.base_only()
    }
}

/// Initialization followed by `cfg.iterations` propagation/evaluation steps.
pub fn run_patchmatch(pyrs: &FeaturePyramidSet, cfg: &PmConfig) -> Result<OffsetField> {
    run_patchmatch_traced(pyrs, cfg, |_, _| {})
}

/// [`run_patchmatch`] that hands each intermediate field to `observe`
/// (`0` is the initialization).
pub fn run_patchmatch_traced(
    pyrs: &FeaturePyramidSet,
    cfg: &PmConfig,
    mut observe: impl FnMut(usize, &OffsetField),
) -> Result<OffsetField> {
    cfg.validate()?;
    let set = matching_set(pyrs, cfg);
    let packed = PackedSet::new(&set);
    let mut field = init_offsets(set.height(), set.width(), cfg)?;
    observe(0, &field);
    for it in 0..cfg.iterations {
        field = iterate_packed(&packed, &field, cfg, it);
        observe(it + 1, &field);
    }
    field.check_invariants()?;
    Ok(field)
}

/// Offset fields of the two feature families: `conv` from the
/// convolutional features when present, `zernike` always.
#[derive(Clone, Debug)]
pub struct DualField {
    pub conv: Option<OffsetField>,
    pub zernike: OffsetField,
}

/// Seed offset separating the conv family's random streams from Zernike's.
const CONV_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn dual_field(
    zernike: &FeaturePyramidSet,
    conv: Option<&FeaturePyramidSet>,
    cfg: &PmConfig,
) -> Result<DualField> {
    let zernike_field = run_patchmatch(zernike, cfg)?;
    let conv_field = conv
        .map(|set| {
            let mut c = cfg.clone();
            c.seed ^= CONV_SEED_SALT;
            run_patchmatch(set, &c)
        })
        .transpose()?;
    Ok(DualField {
        conv: conv_field,
        zernike: zernike_field,
    })
}
