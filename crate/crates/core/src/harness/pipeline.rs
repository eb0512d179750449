//! End-to-end detection, evaluation and robustness sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Aggregation, RunConfig};
use super::metrics::{aggregate, EvalMetrics};
use crate::dlf::{dlf_errors, FitErrorMap};
use crate::error::{Error, Result};
use crate::features::{feature_pyramid, zernike_basis, ConvWeights, Extractor, FeaturePyramidSet};
use crate::forgegen::{item_seed, list_images};
use crate::imgproc::{build_pyramid, degrade, load_image, save_png, Attack, ImageBuffer};
use crate::maskgen::{overlay, BinaryMask, ClassMask, FamilyEvidence, MaskDecoder, RuleDecoder};
use crate::patchmatch::{dual_field, OffsetField};
use crate::rawio::write_atomic;

/// Everything the detector computed for one image.
#[derive(Clone, Debug)]
pub struct Detection {
    pub mask: BinaryMask,
    pub zernike_field: OffsetField,
    pub zernike_errors: FitErrorMap,
    pub conv_field: Option<OffsetField>,
    pub conv_errors: Option<FitErrorMap>,
}

/// A configured detection pipeline; cheap to share across threads.
pub struct Detector {
    cfg: RunConfig,
    zernike: Extractor,
    conv: Option<Extractor>,
    decoder: Box<dyn MaskDecoder + Send + Sync>,
}

impl Detector {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let zernike = Extractor::Zernike(zernike_basis(cfg.features.zernike_radius)?);
        let conv = if cfg.features.conv {
            let w = match &cfg.features.conv_weights {
                Some(p) => ConvWeights::load(p)?,
                None => ConvWeights::random(cfg.features.conv_seed, 3, &cfg.features.conv_widths, cfg.features.conv_kernel)?,
            };
            Some(Extractor::Conv(w))
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            zernike,
            conv,
            decoder: Box::new(RuleDecoder {
                config: cfg.decoder.clone(),
            }),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn features(&self, img: &ImageBuffer, extractor: &Extractor) -> Result<FeaturePyramidSet> {
        let pyr = build_pyramid(img)?;
        let set = feature_pyramid(&pyr, extractor)?;
        Ok(if self.cfg.features.standardize { set.standardized() } else { set })
    }

    pub fn detect(&self, img: &ImageBuffer) -> Result<Detection> {
        let rgb = img.to_rgb();
        let zset = self.features(&rgb, &self.zernike)?;
        let cset = self.conv.as_ref().map(|e| self.features(&rgb, e)).transpose()?;
        let mut fields = dual_field(&zset, cset.as_ref(), &self.cfg.patchmatch)?;
        let r = self.cfg.dlf.field_median_radius;
        if r > 0 {
            fields.zernike = fields.zernike.median_filtered(r);
            fields.conv = fields.conv.map(|f| f.median_filtered(r));
        }
        let zernike_errors = dlf_errors(&fields.zernike, &self.cfg.dlf.radii)?;
        let conv_errors = fields.conv.as_ref().map(|f| dlf_errors(f, &self.cfg.dlf.radii)).transpose()?;
        let mut evidence = vec![FamilyEvidence {
            errors: &zernike_errors,
            field: &fields.zernike,
        }];
        if let (Some(e), Some(f)) = (&conv_errors, &fields.conv) {
            evidence.push(FamilyEvidence { errors: e, field: f });
        }
        let mask = self.decoder.decode(&evidence)?;
        Ok(Detection {
            mask,
            zernike_field: fields.zernike,
            zernike_errors,
            conv_field: fields.conv,
            conv_errors,
        })
    }

    /// Detects on a file and writes `masks/`, `overlays/` and `diag/`
    /// artifacts under `out`.
    pub fn detect_file(&self, path: &Path, out: &Path) -> Result<Detection> {
        let img = load_image(path)?;
        let det = self.detect(&img)?;
        let stem = file_stem(path);
        det.mask.save(&out.join("masks").join(format!("{stem}.png")))?;
        save_png(&overlay(&img, &det.mask)?, &out.join("overlays").join(format!("{stem}.png")))?;
        let diag = out.join("diag");
        write_atomic(&diag.join(format!("{stem}.offsets.f32")), &det.zernike_field.to_raw())?;
        write_atomic(&diag.join(format!("{stem}.dlf.f32")), &det.zernike_errors.to_raw())?;
        if let (Some(f), Some(e)) = (&det.conv_field, &det.conv_errors) {
            write_atomic(&diag.join(format!("{stem}.conv.offsets.f32")), &f.to_raw())?;
            write_atomic(&diag.join(format!("{stem}.conv.dlf.f32")), &e.to_raw())?;
        }
        Ok(det)
    }
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Result of comparing predicted masks to ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    /// Sorted by image name.
    pub per_image: Vec<(String, EvalMetrics)>,
    pub aggregate: EvalMetrics,
    /// Names lacking a prediction or a truth mask.
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn from_pairs(mut per_image: Vec<(String, EvalMetrics)>, missing: Vec<String>, how: Aggregation) -> Self {
        per_image.sort_by(|a, b| a.0.cmp(&b.0));
        let metrics: Vec<EvalMetrics> = per_image.iter().map(|(_, m)| *m).collect();
        Self {
            aggregation: how,
            aggregate: aggregate(&metrics, how),
            per_image,
            missing,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}", "image", "precision", "recall", "f1", "tp", "fp", "fn");
        let mut row = |name: &str, m: &EvalMetrics| {
            let _ = writeln!(
                s,
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}",
                name, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        };
        for (name, m) in &self.per_image {
            row(name, m);
        }
        let label = match self.aggregation {
            Aggregation::PerImage => "mean",
            Aggregation::Pooled => "pooled",
        };
        row(label, &self.aggregate);
        for m in &self.missing {
            let _ = writeln!(s, "missing pair: {m}");
        }
        s
    }

    /// One JSON object per line: per-image records, missing names, then
    /// the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (name, m) in &self.per_image {
            let _ = writeln!(s, "{}", serde_json::json!({"kind": "image", "image": name, "metrics": m}));
        }
        for name in &self.missing {
            let _ = writeln!(s, "{}", serde_json::json!({"kind": "missing", "image": name}));
        }
        let _ = writeln!(
            s,
            "{}",
            serde_json::json!({"kind": "aggregate", "aggregation": self.aggregation, "images": self.per_image.len(), "metrics": self.aggregate})
        );
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join("metrics.txt"), self.to_table().as_bytes())?;
        write_atomic(&out.join("metrics.jsonl"), self.to_jsonl().as_bytes())
    }
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (file_stem(&p), p)).collect())
}

/// Pairs masks by file stem; truth may use either PNG convention.
pub fn evaluate_dirs(pred_dir: &Path, truth_dir: &Path, how: Aggregation) -> Result<EvalReport> {
    let pred = images_by_stem(pred_dir)?;
    let truth = images_by_stem(truth_dir)?;
    let mut missing: Vec<String> = pred.keys().filter(|k| !truth.contains_key(*k)).cloned().collect();
    missing.extend(truth.keys().filter(|k| !pred.contains_key(*k)).cloned());
    missing.sort();
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = pred
        .iter()
        .filter_map(|(k, p)| truth.get(k).map(|t| (k, p, t)))
        .collect();
    let per_image = pairs
        .par_iter()
        .map(|(k, p, t)| {
            let pm = BinaryMask::from_image(&load_image(p)?);
            let tm = BinaryMask::from_image(&load_image(t)?);
            Ok(((*k).clone(), EvalMetrics::from_masks(&pm, &tm)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(per_image, missing, how))
}

/// A forged image with its three-class truth.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub name: String,
    pub forged: ImageBuffer,
    pub truth: ClassMask,
}

/// Reads `dir/forged/*.png` with matching `dir/truth/*.png`.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let forged = images_by_stem(&dir.join("forged"))?;
    let truth = images_by_stem(&dir.join("truth"))?;
    forged
        .into_iter()
        .map(|(name, fp)| {
            let tp = truth
                .get(&name)
                .ok_or_else(|| Error::Format(format!("corpus image {name} has no truth mask")))?;
            Ok(CorpusItem {
                forged: load_image(&fp)?,
                truth: ClassMask::from_image(&load_image(tp)?),
                name,
            })
        })
        .collect()
}

/// Detects on every item and scores against the binary truth.
pub fn evaluate_corpus(detector: &Detector, items: &[CorpusItem]) -> Result<EvalReport> {
    let per_image = items
        .par_iter()
        .map(|it| {
            let det = detector.detect(&it.forged)?;
            Ok((it.name.clone(), EvalMetrics::from_masks(&det.mask, &it.truth.binary())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(per_image, Vec::new(), detector.config().eval.aggregation))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub attack: String,
    pub images: usize,
    pub metrics: EvalMetrics,
}

/// Mean metrics per attack level; each image's attack is seeded from
/// `sweep.attack_seed` and its index.
pub fn robustness_sweep(detector: &Detector, items: &[CorpusItem], attacks: &[Attack]) -> Result<Vec<SweepRow>> {
    let seed = detector.config().sweep.attack_seed;
    attacks
        .iter()
        .map(|attack| {
            attack.validate()?;
            let attacked = items
                .par_iter()
                .enumerate()
                .map(|(i, it)| {
                    Ok(CorpusItem {
                        forged: degrade(&it.forged, *attack, item_seed(seed, i))?,
                        ..it.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate_corpus(detector, &attacked)?;
            Ok(SweepRow {
                attack: attack.label(),
                images: items.len(),
                metrics: report.aggregate,
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("attack\timages\tprecision\trecall\tf1\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.attack, r.images, m.precision, m.recall, m.f1);
    }
    s
}

pub fn sweep_jsonl(rows: &[SweepRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}

pub fn write_sweep(rows: &[SweepRow], out: &Path) -> Result<()> {
    write_atomic(&out.join("sweep.tsv"), sweep_tsv(rows).as_bytes())?;
    write_atomic(&out.join("sweep.jsonl"), sweep_jsonl(rows).as_bytes())
}
