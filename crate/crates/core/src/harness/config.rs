//! Run configuration: one TOML document covering every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dlf::DEFAULT_RADII;
use crate::error::{Error, Result};
use crate::forgegen::ForgerySpec;
use crate::imgproc::Attack;
use crate::maskgen::DecoderConfig;
use crate::patchmatch::PmConfig;
use crate::rawio::write_atomic;

/// File name of the echoed configuration in every output directory.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub zernike_radius: usize,
    /// Per-channel z-scoring before matching.
    pub standardize: bool,
    /// Adds the convolutional family.
    pub conv: bool,
    /// Weight file; seeded random weights when absent.
    pub conv_weights: Option<PathBuf>,
    pub conv_seed: u64,
    pub conv_widths: Vec<usize>,
    pub conv_kernel: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            zernike_radius: 8,
            standardize: true,
            conv: false,
            conv_weights: None,
            conv_seed: 1,
            conv_widths: vec![16, 32, 32, 64, 64],
            conv_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlfConfig {
    pub radii: Vec<usize>,
    /// Median pre-filter applied to each offset field before fitting.
    pub field_median_radius: usize,
}

impl Default for DlfConfig {
    fn default() -> Self {
        Self {
            radii: DEFAULT_RADII.to_vec(),
            field_median_radius: 6,
        }
    }
}

/// How per-image confusion counts become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics per image, then the unweighted mean.
    #[default]
    PerImage,
    /// Counts summed over the corpus first.
    Pooled,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Attack specs such as `none`, `jpeg:80`, `noise:0.02`.
    pub attacks: Vec<String>,
    pub attack_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attacks: ["none", "noise:0.02", "noise:0.05", "jpeg:100", "jpeg:80", "jpeg:60"]
                .map(String::from)
                .to_vec(),
            attack_seed: 17,
        }
    }
}

impl SweepConfig {
    pub fn parsed_attacks(&self) -> Result<Vec<Attack>> {
        self.attacks.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub patchmatch: PmConfig,
    pub dlf: DlfConfig,
    pub decoder: DecoderConfig,
    pub generator: ForgerySpec,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(CONFIG_FILE), self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.patchmatch.validate()?;
        self.decoder.validate()?;
        self.generator.validate()?;
        self.sweep.parsed_attacks()?;
        if self.dlf.radii.is_empty() {
            return Err(Error::Config("dlf.radii is empty".into()));
        }
        if self.features.zernike_radius < 2 {
            return Err(Error::Config("features.zernike_radius must be at least 2".into()));
        }
        if self.features.conv_widths.is_empty() || self.features.conv_kernel == 0 {
            return Err(Error::Config("conv widths and kernel must be non-empty".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value`; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config is serializable");
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for part in path {
            node = node
                .get_mut(part)
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a field")))?
            .insert(last.to_string(), value);
        let updated: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Seeds every random component from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.patchmatch.seed = seed;
        self.generator.seed = seed;
        self.sweep.attack_seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.set("decoder.eps_threshold=0.3").unwrap();
        cfg.set("sweep.attacks=[\"noise:0.02\"]").unwrap();
        cfg.set("features.conv_weights=/tmp/w.bin").unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[patchmatch]\nitrations = 3\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set("patchmatch.nope=1").is_err());
        assert!(cfg.set("nosection.x=1").is_err());
        assert!(cfg.set("patchmatch.iterations=-3").is_err());
        assert!(cfg.set("no_equals_sign").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::from_toml("[patchmatch]\niterations = 3\n").unwrap();
        assert_eq!(cfg.patchmatch.iterations, 3);
        assert_eq!(cfg.patchmatch.beta, PmConfig::default().beta);
        cfg.set("patchmatch.cross_scale=false").unwrap();
        cfg.set("eval.aggregation=pooled").unwrap();
        assert!(!cfg.patchmatch.cross_scale);
        assert_eq!(cfg.eval.aggregation, Aggregation::Pooled);
        assert!(cfg.set("sweep.attacks=[\"blur:3\"]").is_err());
    }
}
