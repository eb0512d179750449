//! Zernike-moment magnitude features.
//!
//! Each pixel is described by `|Z_nm|` of the disk patch centered on it, for
//! the twelve `(n, m)` pairs of order at most 5 with `m >= 0`. Moments are
//! normalized by the disk's pixel count, so `Z_00` is the patch mean.

use rayon::prelude::*;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::imgproc::ImageBuffer;

/// Default `(n, m)` channel set: all pairs with `n <= 5`, `m >= 0`,
/// `n - m` even.
pub const ZERNIKE_ORDERS: [(u32, u32); 12] = [
    (0, 0),
    (1, 1),
    (2, 0),
    (2, 2),
    (3, 1),
    (3, 3),
    (4, 0),
    (4, 2),
    (4, 4),
    (5, 1),
    (5, 3),
    (5, 5),
];

/// Precomputed polynomials on the `(2R+1) x (2R+1)` patch grid.
#[derive(Clone, Debug)]
pub struct ZernikeBasis {
    patch_radius: usize,
    orders: Vec<(u32, u32)>,
    /// `(dy, dx)` of grid cells inside the unit disk.
    disk: Vec<(isize, isize)>,
    /// Per order, real and imaginary parts of `V_nm` on the full grid.
    values: Vec<(Vec<f64>, Vec<f64>)>,
    /// Projection weights `(n+1)/N * conj(V_nm)`, laid out per disk cell
    /// as `[re_0, im_0, re_1, im_1, ...]`.
    kernels: Vec<f64>,
}

pub fn zernike_basis(patch_radius: usize) -> Result<ZernikeBasis> {
    ZernikeBasis::with_orders(patch_radius, &ZERNIKE_ORDERS)
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Radial polynomial `R_nm(rho)`.
fn radial(n: u32, m: u32, rho: f64) -> f64 {
    (0..=(n - m) / 2)
        .map(|s| {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - s)
                / (factorial(s) * factorial((n + m) / 2 - s) * factorial((n - m) / 2 - s))
                * rho.powi((n - 2 * s) as i32)
        })
        .sum()
}

impl ZernikeBasis {
    pub fn with_orders(patch_radius: usize, orders: &[(u32, u32)]) -> Result<Self> {
        if patch_radius < 2 {
            return Err(Error::invalid(format!("patch radius {patch_radius} < 2")));
        }
        if orders.is_empty() {
            return Err(Error::invalid("empty Zernike order set"));
        }
        for &(n, m) in orders {
            if m > n || (n - m) % 2 != 0 {
                return Err(Error::invalid(format!("invalid Zernike order ({n}, {m})")));
            }
        }
        let r = patch_radius as isize;
        // the unit disk is inscribed in the outer pixel edges of the patch
        let unit = patch_radius as f64 + 0.5;
        let side = 2 * patch_radius + 1;
        let mut disk = Vec::new();
        let mut polar = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                let rho = ((dy * dy + dx * dx) as f64).sqrt() / unit;
                let theta = (-dy as f64).atan2(dx as f64);
                polar.push((rho, theta));
                if rho <= 1.0 {
                    disk.push((dy, dx));
                }
            }
        }
        let count = disk.len() as f64;
        let mut values = Vec::with_capacity(orders.len());
        let k = orders.len();
        let mut kernels = vec![0.0; disk.len() * 2 * k];
        for (o, &(n, m)) in orders.iter().enumerate() {
            let (mut re, mut im) = (vec![0.0; side * side], vec![0.0; side * side]);
            let mut cell = 0;
            for (i, &(rho, theta)) in polar.iter().enumerate() {
                if rho > 1.0 {
                    continue;
                }
                let amp = radial(n, m, rho);
                let (s, c) = (m as f64 * theta).sin_cos();
                re[i] = amp * c;
                im[i] = amp * s;
                let norm = (n + 1) as f64 / count;
                kernels[cell * 2 * k + 2 * o] = norm * re[i];
                kernels[cell * 2 * k + 2 * o + 1] = -norm * im[i];
                cell += 1;
            }
            values.push((re, im));
        }
        Ok(Self {
            patch_radius,
            orders: orders.to_vec(),
            disk,
            values,
            kernels,
        })
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    pub fn side(&self) -> usize {
        2 * self.patch_radius + 1
    }

    pub fn orders(&self) -> &[(u32, u32)] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// `V_nm` at grid cell `(dy, dx)` relative to the patch center.
    pub fn value(&self, order: usize, dy: isize, dx: isize) -> (f64, f64) {
        let r = self.patch_radius as isize;
        let i = ((dy + r) as usize) * self.side() + (dx + r) as usize;
        (self.values[order].0[i], self.values[order].1[i])
    }

    /// Discrete inner product `sum V_a * conj(V_b)` over the grid.
    pub fn inner(&self, a: usize, b: usize) -> (f64, f64) {
        let (ar, ai) = &self.values[a];
        let (br, bi) = &self.values[b];
        let mut re = 0.0;
        let mut im = 0.0;
        for i in 0..ar.len() {
            re += ar[i] * br[i] + ai[i] * bi[i];
            im += ai[i] * br[i] - ar[i] * bi[i];
        }
        (re, im)
    }

    /// Moment magnitudes of a patch given as a lookup over `(dy, dx)`.
    pub fn magnitudes(&self, mut patch: impl FnMut(isize, isize) -> f64, out: &mut [f32]) {
        let samples: Vec<f64> = self.disk.iter().map(|&(dy, dx)| patch(dy, dx)).collect();
        let mut acc = vec![0.0; 2 * self.len()];
        self.project(&samples, out, &mut acc);
    }

    /// Each accumulator sums over disk cells in order; cells run in the
    /// outer loop so all orders advance together.
    #[inline]
    fn project(&self, samples: &[f64], out: &mut [f32], acc: &mut [f64]) {
        acc.fill(0.0);
        for (s, ks) in samples.iter().zip(self.kernels.chunks_exact(acc.len())) {
            for (a, k) in acc.iter_mut().zip(ks) {
                *a += s * k;
            }
        }
        for (o, c) in out.iter_mut().zip(acc.chunks_exact(2)) {
            *o = (c[0] * c[0] + c[1] * c[1]).sqrt() as f32;
        }
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// Moment magnitudes of the patch around every pixel of a gray image.
pub fn zernike_features(gray: &ImageBuffer, basis: &ZernikeBasis) -> Result<FeatureMap> {
    if gray.channels() != 1 {
        return Err(Error::invalid("Zernike features need a single-channel image"));
    }
    let (h, w) = (gray.height(), gray.width());
    let side = basis.side();
    if h < side || w < side {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {side}x{side} Zernike patch"
        )));
    }
    let depth = basis.len();
    let pix = gray.data();
    let mut data = vec![0.0_f32; h * w * depth];
    data.par_chunks_mut(w * depth).enumerate().for_each(|(y, row)| {
        let mut samples = vec![0.0_f64; basis.disk.len()];
        let mut acc = vec![0.0_f64; 2 * depth];
        let interior_y = y >= basis.patch_radius && y + basis.patch_radius < h;
        for x in 0..w {
            let interior = interior_y && x >= basis.patch_radius && x + basis.patch_radius < w;
            for (s, &(dy, dx)) in samples.iter_mut().zip(&basis.disk) {
                let (yy, xx) = if interior {
                    ((y as isize + dy) as usize, (x as isize + dx) as usize)
                } else {
                    (reflect(y as isize + dy, h), reflect(x as isize + dx, w))
                };
                *s = pix[yy * w + xx] as f64;
            }
            basis.project(&samples, &mut row[x * depth..(x + 1) * depth], &mut acc);
        }
    });
    FeatureMap::from_vec(h, w, depth, data)
}
