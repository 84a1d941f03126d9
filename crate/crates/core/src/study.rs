//! End-to-end study: data and specifications in, radius report out.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{bootstrap_cov, ser_matrix, BootstrapConfig, CovarianceEstimate};
use crate::cstest::{DfConvention, Variant};
use crate::data::{order_main_first, subsample_share, Dataset, Specification, DEFAULT_SHARE_FLOOR};
use crate::error::{Error, Result};
use crate::radius::{robustness_radius, RadiusOptions, RadiusReport};
use crate::regress::fit_all;
use crate::sensitivity::{sensitivity_block, SensitivityBlock, SensitivityInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Relative paths resolve against the config file's directory.
    pub data_path: PathBuf,
    #[serde(default)]
    pub cluster_column: Option<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub df_convention: DfConvention,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    pub specifications: Vec<Specification>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    /// Sensitivity parameter for which to report the implied bias bound.
    #[serde(default)]
    pub tau_bar: Option<f64>,
}

fn default_alpha() -> f64 {
    0.05
}

impl StudyConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: StudyConfig = serde_json::from_str(&text)?;
        if cfg.data_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_path = dir.join(&cfg.data_path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidInput(format!("alpha = {} outside (0, 0.5]", self.alpha)));
        }
        order_main_first(&self.specifications)?;
        let mut bootstrap = self.bootstrap.clone();
        if bootstrap.cluster_column.is_none() {
            bootstrap.cluster_column = self.cluster_column.clone();
        }
        bootstrap.validate()
    }

    fn bootstrap_config(&self) -> BootstrapConfig {
        let mut b = self.bootstrap.clone();
        if b.cluster_column.is_none() {
            b.cluster_column = self.cluster_column.clone();
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub label: String,
    pub theta_hat: f64,
    pub se: f64,
    pub n_j: usize,
    pub subsample_share: f64,
    pub below_share_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub tool_version: &'static str,
    /// Filled in by the caller; excluded from determinism comparisons.
    pub generated_at: Option<String>,
    pub seed: u64,
    pub config: StudyConfig,
    pub estimates: Vec<EstimateRow>,
    #[serde(serialize_with = "ser_matrix")]
    pub covariance: DMatrix<f64>,
    pub n_trimmed: usize,
    pub n_redrawn: usize,
    pub trim_threshold: f64,
    pub radius: RadiusReport,
    pub sensitivity: Option<SensitivityBlock>,
}

/// Intermediate outputs kept alongside the report.
#[derive(Debug, Clone)]
pub struct StudyArtifacts {
    pub labels: Vec<String>,
    pub theta: Vec<f64>,
    pub covariance: CovarianceEstimate,
}

pub fn run_study(cfg: &StudyConfig) -> Result<(StudyReport, StudyArtifacts)> {
    cfg.validate()?;
    let ds = Dataset::from_csv_path(&cfg.data_path)?;
    run_study_on(cfg, &ds)
}

/// Runs the pipeline on an already loaded dataset.
pub fn run_study_on(cfg: &StudyConfig, ds: &Dataset) -> Result<(StudyReport, StudyArtifacts)> {
    cfg.validate()?;
    let specs = order_main_first(&cfg.specifications)?;
    let (fits, masks) = fit_all(ds, &specs)?;
    let n = ds.row_count();
    let estimates: Vec<EstimateRow> = fits
        .iter()
        .zip(&masks)
        .map(|(f, m)| {
            let share = subsample_share(m, n, DEFAULT_SHARE_FLOOR);
            EstimateRow {
                label: f.label.clone(),
                theta_hat: f.theta_hat,
                se: f.se_conventional,
                n_j: m.n_j,
                subsample_share: share.share,
                below_share_floor: share.below_floor,
            }
        })
        .collect();
    let theta: Vec<f64> = fits.iter().map(|f| f.theta_hat).collect();
    let labels: Vec<String> = fits.iter().map(|f| f.label.clone()).collect();

    let bcfg = cfg.bootstrap_config();
    let covariance = bootstrap_cov(ds, &specs, &bcfg)?;
    let opts = RadiusOptions {
        alpha: cfg.alpha,
        variant: cfg.variant,
        df_convention: cfg.df_convention,
        must_equal: specs[1..].iter().map(|s| s.must_equal_main).collect(),
        tol: None,
    };
    let radius = robustness_radius(&theta, &covariance.matrix, &opts)?;

    let main = &fits[0];
    let inputs = SensitivityInputs {
        b_rr: radius.b_rr,
        var_ratio: main.var_ratio,
        r2_dx: main.r2_treatment_on_controls,
    };
    let sensitivity = match sensitivity_block(inputs, cfg.tau_bar) {
        Ok(block) => Some(block),
        Err(e) => {
            log::warn!("sensitivity block skipped: {e}");
            None
        }
    };

    let report = StudyReport {
        tool_version: env!("CARGO_PKG_VERSION"),
        generated_at: None,
        seed: bcfg.seed,
        config: cfg.clone(),
        estimates,
        covariance: covariance.matrix.clone(),
        n_trimmed: covariance.n_trimmed,
        n_redrawn: covariance.n_redrawn,
        trim_threshold: covariance.trim_threshold,
        radius,
        sensitivity,
    };
    Ok((report, StudyArtifacts { labels, theta, covariance }))
}
