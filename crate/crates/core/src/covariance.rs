//! Joint covariance of the stacked estimates.
//!
//! The bootstrap resamples rows (or whole clusters) once per replication and
//! refits every specification on that same resample, which is what carries
//! the correlation between overlapping subsamples. Draws whose norm exceeds
//! the trimming threshold are replaced by the zero vector before the sample
//! covariance is taken.
//!
//! Replication `r` draws from `ChaCha8Rng` keyed by the study seed with
//! stream id `r + (attempt << 48)`, where `attempt` counts redraws after an
//! unestimable resample. Results are therefore identical for any number of
//! worker threads.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Specification};
use crate::error::{Error, Result};
use crate::regress::{fit_all, EstimateBundle};

pub const DEFAULT_REPLICATIONS: usize = 1000;
/// Fraction of replications allowed to be unestimable before giving up.
pub const MAX_UNESTIMABLE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    #[default]
    IidRows,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum TrimThreshold {
    Explicit(f64),
    #[default]
    #[serde(with = "auto_literal")]
    Auto,
}

mod auto_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got \"{s}\"")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cluster_column: Option<String>,
    #[serde(default)]
    pub trim_threshold: TrimThreshold,
    #[serde(default)]
    pub mode: ResampleMode,
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replications: DEFAULT_REPLICATIONS,
            seed: 0,
            cluster_column: None,
            trim_threshold: TrimThreshold::Auto,
            mode: ResampleMode::IidRows,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidInput("bootstrap needs at least 2 replications".into()));
        }
        if let TrimThreshold::Explicit(t) = self.trim_threshold {
            if !(t > 0.0) {
                return Err(Error::InvalidInput(format!("trim threshold {t} must be positive")));
            }
        }
        if self.mode == ResampleMode::Cluster && self.cluster_column.is_none() {
            return Err(Error::InvalidInput("cluster resampling needs a cluster column".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceEstimate {
    #[serde(serialize_with = "ser_matrix")]
    pub matrix: DMatrix<f64>,
    pub n_trimmed: usize,
    /// Resamples that had to be redrawn because some specification was unestimable.
    pub n_redrawn: usize,
    pub trim_threshold: f64,
    /// B × (m+1) recorded draws, after trimming.
    #[serde(skip)]
    pub replicate_draws: DMatrix<f64>,
}

pub(crate) fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// Default trimming threshold `scale · exp(√n / 8)`.
pub fn auto_trim_threshold(n: usize, scale: f64) -> f64 {
    assert!(n >= 1 && scale > 0.0, "auto_trim_threshold needs n >= 1 and scale > 0");
    scale * ((n as f64).sqrt() / 8.0).exp()
}

/// Sample covariance (divisor B − 1) of the rows of `draws`, checked for
/// symmetry and positive semi-definiteness.
pub fn draws_covariance(draws: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = draws.nrows();
    if b < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    let k = draws.ncols();
    let mean = draws.row_mean();
    let mut cov = DMatrix::zeros(k, k);
    for row in draws.row_iter() {
        let d = row - &mean;
        cov += d.transpose() * d;
    }
    cov /= (b - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    check_psd(&cov)?;
    Ok(cov)
}

fn check_psd(cov: &DMatrix<f64>) -> Result<()> {
    let trace = cov.trace();
    let tolerance = 1e-10 * trace.abs();
    let min_eigenvalue = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min_eigenvalue < -tolerance {
        return Err(Error::NonPsd { min_eigenvalue, tolerance });
    }
    Ok(())
}

fn resample_indices(rng: &mut ChaCha8Rng, n: usize, clusters: Option<&[Vec<usize>]>) -> Vec<usize> {
    match clusters {
        None => (0..n).map(|_| rng.random_range(0..n)).collect(),
        Some(groups) => {
            let g = groups.len();
            let mut rows = Vec::with_capacity(n);
            for _ in 0..g {
                rows.extend_from_slice(&groups[rng.random_range(0..g)]);
            }
            rows
        }
    }
}

fn replication_rng(seed: u64, rep: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + ((attempt as u64) << 48));
    rng
}

enum RepOutcome {
    Draw { theta: Vec<f64>, redrawn: usize },
    GaveUp { redrawn: usize },
}

/// Trimmed (optionally cluster) bootstrap covariance of the stacked estimates.
///
/// `specs` must be ordered main first; every specification must be estimable
/// on the original data.
pub fn bootstrap_cov(ds: &Dataset, specs: &[Specification], config: &BootstrapConfig) -> Result<CovarianceEstimate> {
    config.validate()?;
    let ds_clustered;
    let ds = if config.mode == ResampleMode::Cluster {
        ds_clustered = ds.clone().with_cluster_column(config.cluster_column.as_deref())?;
        &ds_clustered
    } else {
        ds
    };
    let (fits, _) = fit_all(ds, specs)?;
    let theta0: Vec<f64> = fits.iter().map(|f| f.theta_hat).collect();
    let threshold = match config.trim_threshold {
        TrimThreshold::Explicit(t) => t,
        TrimThreshold::Auto => {
            let norm = theta0.iter().map(|x| x * x).sum::<f64>().sqrt();
            auto_trim_threshold(ds.row_count(), norm + 1.0)
        }
    };
    let clusters = match config.mode {
        ResampleMode::Cluster => Some(ds.cluster_groups()?),
        ResampleMode::IidRows => None,
    };
    let n = ds.row_count();
    let b = config.replications;
    let budget = (MAX_UNESTIMABLE_SHARE * b as f64).floor() as usize;

    let outcomes: Vec<RepOutcome> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut redrawn = 0;
            loop {
                if redrawn > budget {
                    return RepOutcome::GaveUp { redrawn };
                }
                let mut rng = replication_rng(config.seed, rep, redrawn);
                let rows = resample_indices(&mut rng, n, clusters.as_deref());
                let sample = ds.take_rows(&rows);
                match fit_all(&sample, specs) {
                    Ok((fits, _)) => {
                        return RepOutcome::Draw {
                            theta: fits.iter().map(|f| f.theta_hat).collect(),
                            redrawn,
                        }
                    }
                    Err(_) => redrawn += 1,
                }
            }
        })
        .collect();

    let failed: usize = outcomes
        .iter()
        .map(|o| match o {
            RepOutcome::Draw { redrawn, .. } | RepOutcome::GaveUp { redrawn } => *redrawn,
        })
        .sum();
    if failed > budget || outcomes.iter().any(|o| matches!(o, RepOutcome::GaveUp { .. })) {
        return Err(Error::TooManyUnestimable { failed, replications: b });
    }
    if failed > 0 {
        log::info!("{failed} bootstrap resamples were unestimable and redrawn");
    }

    let k = specs.len();
    let mut draws = DMatrix::zeros(b, k);
    let mut n_trimmed = 0;
    for (r, o) in outcomes.iter().enumerate() {
        let RepOutcome::Draw { theta, .. } = o else { unreachable!() };
        let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > threshold {
            n_trimmed += 1;
        } else {
            for (j, t) in theta.iter().enumerate() {
                draws[(r, j)] = *t;
            }
        }
    }
    let matrix = draws_covariance(&draws)?;
    Ok(CovarianceEstimate {
        matrix,
        n_trimmed,
        n_redrawn: failed,
        trim_threshold: threshold,
        replicate_draws: draws,
    })
}

/// Plug-in covariance under i.i.d. rows from the per-row influence
/// contributions: `Σ_i ψ_i ψ_iᵀ / n²`.
pub fn plugin_cov_iid(bundle: &EstimateBundle) -> Result<CovarianceEstimate> {
    let n = bundle.influence_rows.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("bundle has no row-level contributions".into()));
    }
    if bundle.influence_rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("singular denominator in influence contributions".into()));
    }
    let psi = &bundle.influence_rows;
    let matrix = psi.transpose() * psi / (n as f64 * n as f64);
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    check_psd(&matrix)?;
    Ok(CovarianceEstimate {
        matrix,
        n_trimmed: 0,
        n_redrawn: 0,
        trim_threshold: f64::INFINITY,
        replicate_draws: DMatrix::zeros(0, bundle.theta.len()),
    })
}

/// Writes replicate draws as CSV with the specification labels as header.
pub fn write_draws_csv<W: std::io::Write>(est: &CovarianceEstimate, labels: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labels)?;
    for row in est.replicate_draws.row_iter() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
