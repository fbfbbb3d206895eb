//! Run configuration, stored as TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pieces of the network are wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Relation-aware cross-attention before subtraction.
    pub relation_aware: bool,
    /// Scale-aware channel gating after subtraction.
    pub scale_aware: bool,
    /// Cross-transformer fusion across scales.
    pub cross_transformer: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            relation_aware: true,
            scale_aware: true,
            cross_transformer: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            relation_aware: false,
            scale_aware: false,
            cross_transformer: false,
        }
    }

    /// The seven non-empty combinations, ordered as in the usual ablation
    /// table: CT, SA, RA, SA+CT, RA+CT, RA+SA, all.
    pub fn ablation_grid() -> [Toggles; 7] {
        let t = |ra, sa, ct| Toggles {
            relation_aware: ra,
            scale_aware: sa,
            cross_transformer: ct,
        };
        [
            t(false, false, true),
            t(false, true, false),
            t(true, false, false),
            t(false, true, true),
            t(true, false, true),
            t(true, true, false),
            t(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.relation_aware {
            parts.push("RA");
        }
        if self.scale_aware {
            parts.push("SA");
        }
        if self.cross_transformer {
            parts.push("CT");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Multiplier on the 64/128/256/512 stage widths.
    pub width_factor: f64,
    /// Residual blocks per stage.
    pub stage_depths: [usize; 4],
    /// Stride of the first block in each stage (the stem adds a further 4×).
    pub stage_strides: [usize; 4],
    pub relation_aware: bool,
    pub scale_aware: bool,
    pub cross_transformer: bool,
    /// Multiply attention logits by 1/√C. Off by default.
    pub attention_scaling: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width_factor: 0.125,
            stage_depths: [2, 2, 2, 2],
            stage_strides: [1, 2, 1, 1],
            relation_aware: true,
            scale_aware: true,
            cross_transformer: true,
            attention_scaling: false,
        }
    }
}

pub const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const STEM_STRIDE: usize = 4;

impl NetworkConfig {
    pub fn toggles(&self) -> Toggles {
        Toggles {
            relation_aware: self.relation_aware,
            scale_aware: self.scale_aware,
            cross_transformer: self.cross_transformer,
        }
    }

    pub fn set_toggles(&mut self, t: Toggles) {
        self.relation_aware = t.relation_aware;
        self.scale_aware = t.scale_aware;
        self.cross_transformer = t.cross_transformer;
    }

    pub fn widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|w| ((w as f64 * self.width_factor).round() as usize).max(1))
    }

    pub fn downsample(&self) -> usize {
        STEM_STRIDE * self.stage_strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_factor > 0.0 && self.width_factor.is_finite()) {
            return Err(Error::Config(format!("width_factor must be positive, got {}", self.width_factor)));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config("stage strides must be 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValLoss,
    ValF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub selection: Selection,
    /// Bound on the global gradient norm per step; unset disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_every: 80,
            decay_factor: 0.1,
            epochs: 200,
            batch_size: 4,
            selection: Selection::ValLoss,
            max_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rescale: bool,
    /// Upper bound of the zoom factor; crops return to the input size.
    pub max_scale: f64,
    pub crop: bool,
    /// Largest crop offset in pixels before resizing back.
    pub max_crop: usize,
    pub blur: bool,
    pub blur_sigma: [f64; 2],
    pub blur_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rescale: true,
            max_scale: 1.25,
            crop: true,
            max_crop: 8,
            blur: true,
            blur_sigma: [0.3, 1.0],
            blur_probability: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip: false,
            rescale: false,
            crop: false,
            blur: false,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.rescale || self.crop || self.blur
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// No edits and no nuisance: both images are identical.
    None,
    #[default]
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Difficulty::None),
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the `A/ B/ label/ list/` layout. When absent, a
    /// synthetic set is generated from the fields below.
    pub root: Option<String>,
    /// Patch size for tiling real datasets.
    pub patch: usize,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
    pub synthetic_size: usize,
    pub difficulty: Difficulty,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            patch: 256,
            synthetic_train: 8,
            synthetic_val: 4,
            synthetic_test: 4,
            synthetic_size: 64,
            difficulty: Difficulty::Easy,
        }
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2022,
            model: NetworkConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let size = self.data.synthetic_size;
        if self.data.root.is_none() && (size == 0 || size % self.model.downsample() != 0) {
            return Err(Error::Config(format!(
                "synthetic_size {size} must be a positive multiple of {}",
                self.model.downsample()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn default_widths_and_stride() {
        let m = NetworkConfig::default();
        assert_eq!(m.widths(), [8, 16, 32, 64]);
        assert_eq!(m.downsample(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = -1.0").is_err());
        assert!(RunConfig::from_toml("[train]\ndecay_factor = 0.0").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[data]\nsynthetic_size = 60").is_err());
    }

    #[test]
    fn ablation_grid_is_distinct_and_non_empty() {
        let grid = Toggles::ablation_grid();
        for (i, a) in grid.iter().enumerate() {
            assert_ne!(a.label(), "none");
            for b in &grid[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
