//! Dense linear fitting of offset fields.
//!
//! For every pixel and radius the offsets inside the closed disk around the
//! pixel (truncated at the borders) are fitted by `delta ~ A (y, x) + b` in
//! least squares, one shared design for both components. The reported error
//! is the mean squared residual over both components.
//!
//! Disk sums come from per-row prefix sums of the fourteen moments involved,
//! so each pixel costs one lookup pair per disk row instead of a full
//! neighborhood scan.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchmatch::OffsetField;
use crate::rawio::encode_raw;

pub const DEFAULT_RADII: [usize; 3] = [7, 9, 11];

/// Error reported where a neighborhood cannot support an affine fit.
pub const DEGENERATE_ERROR: f32 = 1.0e9;

const MIN_SAMPLES: f64 = 6.0;

/// `H x W x R` residual energies, one channel per radius.
#[derive(Clone, Debug, PartialEq)]
pub struct FitErrorMap {
    height: usize,
    width: usize,
    radii: Vec<usize>,
    data: Vec<f32>,
}

impl FitErrorMap {
    pub fn from_vec(height: usize, width: usize, radii: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * radii.len() {
            return Err(Error::invalid("fit error length does not match its shape"));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("fit errors must be finite and non-negative"));
        }
        Ok(Self {
            height,
            width,
            radii,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radii(&self) -> &[usize] {
        &self.radii
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let n = self.radii.len();
        let i = (y * self.width + x) * n;
        &self.data[i..i + n]
    }

    /// Channel `k` as a flat `H x W` plane.
    pub fn channel(&self, k: usize) -> Vec<f32> {
        self.data.iter().skip(k).step_by(self.radii.len()).copied().collect()
    }

    /// Median over radii at one pixel.
    pub fn median(&self, y: usize, x: usize) -> f32 {
        let mut v = self.at(y, x).to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    pub fn scaled(&self, c: f32) -> FitErrorMap {
        FitErrorMap {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn to_raw(&self) -> Vec<u8> {
        encode_raw(self.height, self.width, self.radii.len(), &self.data).expect("length matches")
    }
}

/// Moment planes, each holding per-row prefix sums of width `w + 1`.
struct Prefix {
    w: usize,
    planes: Vec<Vec<f64>>,
}

// moment indices
const N: usize = 0;
const U: usize = 1;
const V: usize = 2;
const UU: usize = 3;
const VV: usize = 4;
const UV: usize = 5;
// per component c in {0, 1}: D + 4c, UD + 4c, VD + 4c, DD + 4c
const D: usize = 6;
const UD: usize = 7;
const VD: usize = 8;
const DD: usize = 9;
const MOMENTS: usize = 14;

impl Prefix {
    fn build(field: &OffsetField) -> Self {
        let (h, w) = (field.height(), field.width());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let n = (h * w) as f64;
        let mean = |v: &[f32]| v.iter().map(|x| *x as f64).sum::<f64>() / n;
        let means = [mean(field.dy()), mean(field.dx())];
        let comps = [field.dy(), field.dx()];
        let mut planes = vec![vec![0.0_f64; h * (w + 1)]; MOMENTS];
        for y in 0..h {
            let u = y as f64 - cy;
            let mut acc = [0.0_f64; MOMENTS];
            for x in 0..w {
                let v = x as f64 - cx;
                let vals = [
                    1.0,
                    u,
                    v,
                    u * u,
                    v * v,
                    u * v,
                ];
                for (a, s) in acc.iter_mut().zip(vals) {
                    *a += s;
                }
                for c in 0..2 {
                    let d = comps[c][y * w + x] as f64 - means[c];
                    acc[D + 4 * c] += d;
                    acc[UD + 4 * c] += u * d;
                    acc[VD + 4 * c] += v * d;
                    acc[DD + 4 * c] += d * d;
                }
                for (p, a) in planes.iter_mut().zip(acc) {
                    p[y * (w + 1) + x + 1] = a;
                }
            }
        }
        Self { w, planes }
    }

    #[inline]
    fn run(&self, k: usize, y: usize, x0: usize, x1: usize) -> f64 {
        let row = y * (self.w + 1);
        self.planes[k][row + x1 + 1] - self.planes[k][row + x0]
    }
}

/// Closed-disk half widths per row offset `-r..=r`.
fn half_widths(r: usize) -> Vec<usize> {
    let r2 = (r * r) as i64;
    (-(r as i64)..=r as i64)
        .map(|dy| {
            let rem = r2 - dy * dy;
            let mut c = (rem as f64).sqrt() as i64;
            while c * c > rem {
                c -= 1;
            }
            while (c + 1) * (c + 1) <= rem {
                c += 1;
            }
            c as usize
        })
        .collect()
}

/// Mean squared affine-fit residual from raw disk moments `m`.
fn residual_from_moments(m: &[f64; MOMENTS]) -> f32 {
    let n = m[N];
    if n < MIN_SAMPLES {
        return DEGENERATE_ERROR;
    }
    let (mu, mv) = (m[U] / n, m[V] / n);
    let cuu = m[UU] - n * mu * mu;
    let cvv = m[VV] - n * mv * mv;
    let cuv = m[UV] - n * mu * mv;
    let det = cuu * cvv - cuv * cuv;
    // collinear neighborhoods (e.g. one-pixel-wide rasters) have no unique fit
    if det <= 1e-9 * (cuu * cvv).max(1e-300) || det <= 0.0 {
        return DEGENERATE_ERROR;
    }
    let mut rss = 0.0;
    for c in 0..2 {
        let md = m[D + 4 * c] / n;
        let cud = m[UD + 4 * c] - n * mu * md;
        let cvd = m[VD + 4 * c] - n * mv * md;
        let cdd = m[DD + 4 * c] - n * md * md;
        let explained = (cvv * cud * cud - 2.0 * cuv * cud * cvd + cuu * cvd * cvd) / det;
        rss += (cdd - explained).max(0.0);
    }
    (rss / (2.0 * n)) as f32
}

/// Per-pixel affine-fit errors of `field` for each radius.
pub fn dlf_errors(field: &OffsetField, radii: &[usize]) -> Result<FitErrorMap> {
    let (h, w) = (field.height(), field.width());
    if radii.is_empty() {
        return Err(Error::invalid("at least one fitting radius is required"));
    }
    for &r in radii {
        if r == 0 || 2 * r > h.min(w) {
            return Err(Error::invalid(format!(
                "fitting radius {r} must be in 1..={} for a {h}x{w} field",
                h.min(w) / 2
            )));
        }
    }
    let prefix = Prefix::build(field);
    let widths: Vec<Vec<usize>> = radii.iter().map(|&r| half_widths(r)).collect();
    let nr = radii.len();
    let mut data = vec![0.0_f32; h * w * nr];
    data.par_chunks_mut(w * nr).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for (k, (&r, hw)) in radii.iter().zip(&widths).enumerate() {
                let mut m = [0.0_f64; MOMENTS];
                for (i, &half) in hw.iter().enumerate() {
                    let yy = y as isize + i as isize - r as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let x0 = x.saturating_sub(half);
                    let x1 = (x + half).min(w - 1);
                    for (j, mj) in m.iter_mut().enumerate() {
                        *mj += prefix.run(j, yy as usize, x0, x1);
                    }
                }
                row[x * nr + k] = residual_from_moments(&m);
            }
        }
    });
    FitErrorMap::from_vec(h, w, radii.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32) / (1u64 << 24) as f32
        }
    }

    /// Direct 3x3 normal equations with Gaussian elimination, per pixel.
    fn naive(field: &OffsetField, y: usize, x: usize, r: usize) -> (f64, f64) {
        let (h, w) = (field.height() as isize, field.width() as isize);
        let mut pts = Vec::new();
        for yy in 0..h {
            for xx in 0..w {
                let (dy, dx) = (yy - y as isize, xx - x as isize);
                if dy * dy + dx * dx <= (r * r) as isize {
                    pts.push((yy as f64, xx as f64, field.get(yy as usize, xx as usize)));
                }
            }
        }
        let n = pts.len() as f64;
        let mut affine = 0.0;
        let mut constant = 0.0;
        for c in 0..2 {
            let val = |p: &(f64, f64, (f32, f32))| if c == 0 { p.2 .0 as f64 } else { p.2 .1 as f64 };
            let mut a = [[0.0f64; 4]; 3];
            for p in &pts {
                let row = [1.0, p.0 - y as f64, p.1 - x as f64];
                for i in 0..3 {
                    for j in 0..3 {
                        a[i][j] += row[i] * row[j];
                    }
                    a[i][3] += row[i] * val(p);
                }
            }
            for col in 0..3 {
                let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
                a.swap(col, piv);
                for i in 0..3 {
                    if i != col {
                        let f = a[i][col] / a[col][col];
                        for j in col..4 {
                            a[i][j] -= f * a[col][j];
                        }
                    }
                }
            }
            let coef: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
            let mean = pts.iter().map(&val).sum::<f64>() / n;
            for p in &pts {
                let fit = coef[0] + coef[1] * (p.0 - y as f64) + coef[2] * (p.1 - x as f64);
                affine += (val(p) - fit).powi(2);
                constant += (val(p) - mean).powi(2);
            }
        }
        (affine / (2.0 * n), constant / (2.0 * n))
    }

    fn random_field(h: usize, w: usize, seed: u64) -> OffsetField {
        let mut r = lcg(seed);
        OffsetField::from_fn(h, w, |_, _| ((r() - 0.5) * 40.0, (r() - 0.5) * 40.0))
    }

    #[test]
    fn disk_half_widths() {
        assert_eq!(half_widths(1), vec![0, 1, 0]);
        let hw = half_widths(7);
        assert_eq!(hw.len(), 15);
        assert_eq!(hw[7], 7);
        let count: usize = hw.iter().map(|c| 2 * c + 1).sum();
        let brute = (-7i32..=7).flat_map(|a| (-7i32..=7).map(move |b| (a, b))).filter(|(a, b)| a * a + b * b <= 49).count();
        assert_eq!(count, brute);
    }

    #[test]
    fn affine_field_has_zero_error() {
        let f = OffsetField::from_fn(40, 44, |y, x| {
            let (y, x) = (y as f32, x as f32);
            (0.3 * y - 0.7 * x + 12.0, -0.2 * y + 0.9 * x - 5.0)
        });
        let e = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        assert!(e.data().iter().all(|v| *v <= 1e-10), "{:?}", e.data().iter().copied().fold(0.0, f32::max));
    }

    #[test]
    fn random_field_matches_naive_least_squares() {
        let f = random_field(24, 26, 4);
        let e = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        for y in 0..24 {
            for x in 0..26 {
                for (k, &r) in DEFAULT_RADII.iter().enumerate() {
                    let (affine, constant) = naive(&f, y, x, r);
                    let got = e.at(y, x)[k] as f64;
                    assert!((got - affine).abs() < 1e-6 * affine.max(1.0), "({y},{x}) r={r}: {got} vs {affine}");
                    assert!(got <= constant * (1.0 + 1e-6));
                }
            }
        }
    }

    #[test]
    fn constant_shift_leaves_errors_unchanged() {
        let f = random_field(30, 30, 9);
        let g = OffsetField::from_fn(30, 30, |y, x| {
            let v = f.get(y, x);
            (v.0 + 17.0, v.1 - 4.5)
        });
        let a = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        let b = dlf_errors(&g, &DEFAULT_RADII).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-4 * p.max(1.0));
        }
    }

    #[test]
    fn piecewise_field_separates_inside_from_outside() {
        let mut r = lcg(21);
        let (cy, cx, rad) = (32.0f32, 32.0f32, 18.0f32);
        let f = OffsetField::from_fn(64, 64, |y, x| {
            let (yf, xf) = (y as f32, x as f32);
            let noise = ((r() - 0.5) * 60.0, (r() - 0.5) * 60.0);
            if (yf - cy).hypot(xf - cx) <= rad {
                (0.1 * yf - 20.0, 0.05 * xf + 25.0)
            } else {
                noise
            }
        });
        let e = dlf_errors(&f, &DEFAULT_RADII).unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let d = (y as f32 - cy).hypot(x as f32 - cx);
                let v = e.median(y, x) as f64;
                if d <= rad - 11.0 {
                    inside += v;
                    ni += 1;
                } else if d > rad + 11.0 {
                    outside += v;
                    no += 1;
                }
            }
        }
        assert!(inside / (ni as f64) < 0.1 * outside / (no as f64));
        // near the edge only the smallest disk still fits inside the region
        for x in 0..64 {
            let d = (x as f32 - cx).abs();
            if (rad - 8.0..=rad - 7.0).contains(&d) {
                let v = e.at(32, x);
                assert!(v[0] < 1e-6 && v[2] > 1.0, "{x}: {v:?}");
            }
        }
    }

    #[test]
    fn radius_preconditions() {
        let f = random_field(10, 20, 1);
        assert!(dlf_errors(&f, &[6]).is_err());
        assert!(dlf_errors(&f, &[0]).is_err());
        assert!(dlf_errors(&f, &[]).is_err());
        assert!(dlf_errors(&f, &[5]).is_ok());
    }

    #[test]
    fn collinear_neighborhood_is_degenerate() {
        let f = OffsetField::from_fn(2, 2, |_, _| (0.0, 1.0));
        let e = dlf_errors(&f, &[1]).unwrap();
        // each closed unit disk holds three samples
        assert!(e.data().iter().all(|v| *v == DEGENERATE_ERROR));
    }

    #[test]
    fn median_and_channels() {
        let e = FitErrorMap::from_vec(1, 2, vec![7, 9, 11], vec![3.0, 1.0, 2.0, 0.0, 5.0, 4.0]).unwrap();
        assert_eq!(e.median(0, 0), 2.0);
        assert_eq!(e.median(0, 1), 4.0);
        assert_eq!(e.channel(1), vec![1.0, 5.0]);
        assert!(FitErrorMap::from_vec(1, 1, vec![7], vec![-1.0]).is_err());
    }
}
