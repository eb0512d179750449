//! Quick built-in checks run by `cmfd selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::metrics::EvalMetrics;
use super::pipeline::Detector;
use crate::dlf::{dlf_errors, DEFAULT_RADII};
use crate::error::Result;
use crate::features::{zernike_basis, zernike_features};
use crate::forgegen::{generate, synthetic_scene, ForgerySpec};
use crate::imgproc::ImageBuffer;
use crate::patchmatch::{first_order_candidates, soft_select, CandidateSet, OffsetField, NUM_CANDIDATES};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn soft_argmax_limit(rng: &mut ChaCha8Rng) -> Result<Check> {
    // candidates stay within 40 px of the centre of an 81x81 raster, so
    // none is clamped at the centre pixel
    let (side, c) = (81, 40);
    let mut worst = 0.0_f32;
    for _ in 0..50 {
        let cands: Vec<(f32, f32)> = (0..NUM_CANDIDATES)
            .map(|_| (rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)))
            .collect();
        let best = rng.gen_range(0..NUM_CANDIDATES);
        let pixel: Vec<f32> = (0..NUM_CANDIDATES)
            .map(|k| if k == best { 0.0 } else { -rng.gen_range(0.1..5.0) })
            .collect();
        let offsets = cands.iter().copied().cycle().take(side * side * NUM_CANDIDATES).collect();
        let scores: Vec<f32> = pixel.iter().copied().cycle().take(side * side * NUM_CANDIDATES).collect();
        let chosen = soft_select(&CandidateSet::from_offsets(side, side, offsets)?, &scores, 1e4)?.get(c, c);
        worst = worst.max((chosen.0 - cands[best].0).abs() + (chosen.1 - cands[best].1).abs());
    }
    Ok(check("soft-argmax limit", worst <= 1e-3, format!("max l1 gap {worst:.2e}")))
}

fn first_order_exact() -> Check {
    let field = OffsetField::from_fn(40, 40, |y, x| (30.0 - 0.3 * y as f32 + 0.1 * x as f32, -20.0 + 0.2 * y as f32));
    let mut worst = 0.0_f32;
    for cand in first_order_candidates(&field) {
        for y in 2..38 {
            for x in 2..38 {
                let (a, b) = (cand.get(y, x), field.get(y, x));
                worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
            }
        }
    }
    check("first-order candidates on affine field", worst <= 1e-4, format!("max deviation {worst:.2e}"))
}

fn affine_fit(rng: &mut ChaCha8Rng) -> Result<Check> {
    let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let field = OffsetField::from_fn(48, 48, |y, x| {
        let (y, x) = (y as f64, x as f64);
        ((c[0] * y + c[1] * x + c[2]) as f32, (c[3] * y + c[4] * x + c[5]) as f32)
    });
    let e = dlf_errors(&field, &DEFAULT_RADII)?;
    let worst = e.data().iter().copied().fold(0.0_f32, f32::max);
    Ok(check("fit error on affine field", worst <= 1e-6, format!("max eps^2 {worst:.2e}")))
}

fn zernike_quarter_turn(rng: &mut ChaCha8Rng) -> Result<Check> {
    let n = 33;
    let img = ImageBuffer::from_fn(n, n, 1, |_, _, _| rng.gen::<f32>())?;
    let rot = ImageBuffer::from_fn(n, n, 1, |y, x, _| img.get(x, n - 1 - y, 0))?;
    let basis = zernike_basis(8)?;
    let (f, g) = (zernike_features(&img, &basis)?, zernike_features(&rot, &basis)?);
    let mut worst = 0.0_f32;
    for y in 0..n {
        for x in 0..n {
            for (a, b) in f.descriptor(x, n - 1 - y).iter().zip(g.descriptor(y, x)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(check("Zernike quarter-turn invariance", worst <= 1e-4, format!("max change {worst:.2e}")))
}

fn detects_translation(cfg: &RunConfig) -> Result<Check> {
    let img = synthetic_scene(128, 128, 11);
    let forgery = generate(&img, &ForgerySpec { area_frac: [0.08, 0.08], seed: 3, ..ForgerySpec::translation() })?;
    let det = Detector::new(cfg)?.detect(&forgery.forged)?;
    let m = EvalMetrics::from_masks(&det.mask, &forgery.truth.binary())?;
    Ok(check("detects a translated block", m.f1 >= 0.6, format!("f1 {:.3}", m.f1)))
}

/// Runs every check; `cfg` drives the end-to-end one.
pub fn run_selftest(cfg: &RunConfig) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.patchmatch.seed);
    Ok(vec![
        soft_argmax_limit(&mut rng)?,
        first_order_exact(),
        affine_fit(&mut rng)?,
        zernike_quarter_turn(&mut rng)?,
        detects_translation(cfg)?,
    ])
}
