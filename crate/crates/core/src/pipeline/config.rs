use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle_adjust::BaConfig;
use crate::data_assoc::TriangulationConfig;
use crate::rot_avg::RotationConfig;
use crate::trans_avg::TranslationConfig;
use crate::two_view::VerificationConfig;

use super::PipelineError;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "GSFM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Verify every pair that has matches instead of retrieving candidates.
    pub exhaustive: bool,
    pub lookahead: usize,
    /// Partners per image; `None` picks 5 or 15 by collection size.
    pub k: Option<usize>,
    pub large_collection: usize,
    pub min_score: f64,
    pub block: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            exhaustive: false,
            lookahead: 10,
            k: None,
            large_collection: 500,
            min_score: 0.3,
            block: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewGraphConfig {
    pub cycle_threshold_deg: f64,
}

impl Default for ViewGraphConfig {
    fn default() -> Self {
        Self { cycle_threshold_deg: 7.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Everything a run needs. Loaded from TOML; every section and key is
/// optional and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_workers: usize,
    pub seed: u64,
    pub retrieval: RetrievalConfig,
    pub verification: VerificationConfig,
    pub view_graph: ViewGraphConfig,
    pub rotation: RotationConfig,
    pub translation: TranslationConfig,
    pub triangulation: TriangulationConfig,
    pub bundle_adjustment: BaConfig,
    pub auc_thresholds_deg: Vec<f64>,
    pub io: IoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_workers: default_workers(),
            seed: 0,
            retrieval: RetrievalConfig::default(),
            verification: VerificationConfig::default(),
            view_graph: ViewGraphConfig::default(),
            rotation: RotationConfig::default(),
            translation: TranslationConfig::default(),
            triangulation: TriangulationConfig::default(),
            bundle_adjustment: BaConfig::default(),
            auc_thresholds_deg: crate::metrics::DEFAULT_AUC_THRESHOLDS_DEG.to_vec(),
            io: IoConfig::default(),
        }
    }
}

/// `GSFM_WORKERS` when set to a positive integer, otherwise 1.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Defaults tuned for a synthetic scene: intrinsics are exact and held
    /// fixed, and the rotation uncertainty drops to 0.1 when correspondences
    /// are exact.
    pub fn for_synthetic(noise_px: f64) -> Self {
        let mut cfg = Self::default();
        cfg.bundle_adjustment.optimize_intrinsics = false;
        if noise_px == 0.0 {
            cfg.rotation.sigma = 0.1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.n_workers == 0 {
            return err("n_workers must be > 0".into());
        }
        self.verification.validate().map_err(PipelineError::Config)?;
        if self.retrieval.lookahead == 0 || self.retrieval.block == 0 {
            return err("retrieval lookahead and block must be > 0".into());
        }
        if !(self.view_graph.cycle_threshold_deg > 0.0) {
            return err("cycle_threshold_deg must be > 0".into());
        }
        if !(self.rotation.sigma > 0.0) || self.rotation.p_max < 3 {
            return err("rotation sigma must be > 0 and p_max >= 3".into());
        }
        if self.translation.n_projections == 0 || self.translation.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return err("translation n_projections and huber_delta must be > 0".into());
        }
        if self.triangulation.min_track_length < 2 || self.bundle_adjustment.min_track_length < 2 {
            return err("minimum track length must be at least 2".into());
        }
        if self.bundle_adjustment.filter_thresholds_px.iter().any(|&t| !(t > 0.0)) {
            return err("BA filter thresholds must be > 0".into());
        }
        if self.auc_thresholds_deg.is_empty()
            || self.auc_thresholds_deg.iter().any(|&t| !(t > 0.0))
            || self.auc_thresholds_deg.windows(2).any(|w| w[1] <= w[0])
        {
            return err("AUC thresholds must be positive and ascending".into());
        }
        Ok(())
    }
}
