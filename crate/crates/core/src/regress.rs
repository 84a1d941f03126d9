//! Per-specification least squares via Frisch–Waugh–Lovell residualization
//! and the stacked estimate vector.
//!
//! The treatment is residualized on an intercept and the specification's
//! controls over its own subsample; the coefficient of interest is then
//! `Σ w u y / Σ w u²`. Weights enter every cross-product linearly.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Column, Dataset, Specification, SubsampleMask, MAX_CATEGORICAL_LEVELS};
use crate::error::{Error, Result};

/// Relative tolerance on the diagonal of the triangular factor below which
/// the design is declared rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FwlFit {
    pub label: String,
    /// Dataset rows used, in order; aligns with the per-row vectors below.
    pub rows: Vec<usize>,
    pub theta_hat: f64,
    /// Treatment residualized on intercept and controls.
    pub residualized_treatment: Vec<f64>,
    /// Weighted sample mean of the squared residualized treatment.
    pub denom: f64,
    pub outcome_values: Vec<f64>,
    pub weights: Vec<f64>,
    /// Residuals of the full regression of the outcome on treatment and controls.
    pub residuals: Vec<f64>,
    pub se_conventional: f64,
    /// Number of columns in the full design (intercept, treatment, expanded controls).
    pub regressors: usize,
    /// R² of the treatment on intercept and controls.
    pub r2_treatment_on_controls: f64,
    /// Σ w u² / Σ w e²: residual variance of the treatment over that of the outcome.
    pub var_ratio: f64,
}

/// Intercept plus controls on the subsample, categorical controls expanded
/// to indicators with the first level seen in the subsample dropped.
fn control_design(ds: &Dataset, spec: &Specification, rows: &[usize]) -> Result<DMatrix<f64>> {
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; rows.len()]];
    for name in &spec.controls {
        match ds.column(name)? {
            Column::Numeric(v) => cols.push(rows.iter().map(|&r| v[r].unwrap()).collect()),
            Column::Categorical(v) => {
                let mut levels: Vec<&str> = Vec::new();
                for &r in rows {
                    let s = v[r].as_deref().unwrap();
                    if !levels.contains(&s) {
                        levels.push(s);
                    }
                }
                if levels.len() > MAX_CATEGORICAL_LEVELS {
                    return Err(Error::TooManyLevels {
                        column: name.clone(),
                        levels: levels.len(),
                        cap: MAX_CATEGORICAL_LEVELS,
                    });
                }
                for level in levels.iter().skip(1) {
                    cols.push(
                        rows.iter()
                            .map(|&r| f64::from(u8::from(v[r].as_deref() == Some(level))))
                            .collect(),
                    );
                }
            }
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| cols[j][i]))
}

/// Weighted least-squares projector onto the column span of a design.
struct Projector {
    design: DMatrix<f64>,
    sqrt_w: DVector<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    col_scale: Vec<f64>,
}

impl Projector {
    fn new(design: DMatrix<f64>, weights: &[f64], label: &str) -> Result<Self> {
        let sqrt_w = DVector::from_iterator(weights.len(), weights.iter().map(|w| w.sqrt()));
        let mut scaled = design.clone();
        let mut col_scale = Vec::with_capacity(design.ncols());
        for mut col in scaled.column_iter_mut() {
            col.component_mul_assign(&sqrt_w);
            let norm = col.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::RankDeficient { label: label.to_string() });
            }
            col /= norm;
            col_scale.push(norm);
        }
        let qr = scaled.qr();
        let r = qr.r();
        let q = qr.q();
        let diag_max = r.diagonal().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if r.nrows() < r.ncols()
            || r.diagonal().iter().any(|x| x.abs() <= RANK_TOL * diag_max)
        {
            return Err(Error::RankDeficient { label: label.to_string() });
        }
        Ok(Projector { design, sqrt_w, q, r, col_scale })
    }

    /// Residual of `v` after weighted projection on the design.
    fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let wv = v.component_mul(&self.sqrt_w);
        let qtv = self.q.transpose() * wv;
        let mut coef = self
            .r
            .solve_upper_triangular(&qtv)
            .expect("nonsingular triangular factor");
        for (c, s) in coef.iter_mut().zip(&self.col_scale) {
            *c /= s;
        }
        v - &self.design * coef
    }
}

/// Fits one specification on its subsample.
pub fn fit_fwl(ds: &Dataset, spec: &Specification, mask: &SubsampleMask) -> Result<FwlFit> {
    if mask.included.len() != ds.row_count() {
        return Err(Error::InvalidInput("mask does not match dataset".into()));
    }
    mask.require_rows(&spec.label, spec.regressor_count())?;
    let rows = &mask.index_set;
    let y_col = ds.numeric(&spec.outcome)?;
    let d_col = ds.numeric(&spec.treatment)?;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y_col[r].unwrap()));
    let d = DVector::from_iterator(rows.len(), rows.iter().map(|&r| d_col[r].unwrap()));
    let weights: Vec<f64> = match &spec.weights {
        Some(w) => {
            let wc = ds.numeric(w)?;
            rows.iter().map(|&r| wc[r].unwrap()).collect()
        }
        None => vec![1.0; rows.len()],
    };
    let w = DVector::from_column_slice(&weights);
    if w.sum() <= 0.0 {
        return Err(Error::InvalidData(format!(
            "specification \"{}\" has zero total weight",
            spec.label
        )));
    }

    let design = control_design(ds, spec, rows)?;
    let regressors = design.ncols() + 1;
    if rows.len() < regressors + 2 {
        return Err(Error::InsufficientRows {
            label: spec.label.clone(),
            n_j: rows.len(),
            required: regressors + 2,
        });
    }
    let proj = Projector::new(design, &weights, &spec.label)?;

    let u = proj.residual(&d);
    let y_res = proj.residual(&y);
    let wuu: f64 = u.iter().zip(w.iter()).map(|(u, w)| w * u * u).sum();
    let d_mean = d.dot(&w) / w.sum();
    let d_ss: f64 = d.iter().zip(w.iter()).map(|(d, w)| w * (d - d_mean).powi(2)).sum();
    if d_ss <= 0.0 || wuu <= (1e-10f64).powi(2) * d.iter().zip(w.iter()).map(|(d, w)| w * d * d).sum::<f64>() {
        return Err(Error::NoResidualVariation { label: spec.label.clone() });
    }
    let wuy: f64 = u.iter().zip(y.iter()).zip(w.iter()).map(|((u, y), w)| w * u * y).sum();
    let theta_hat = wuy / wuu;
    let e = &y_res - &u * theta_hat;

    let n_j = rows.len() as f64;
    let meat: f64 = u
        .iter()
        .zip(e.iter())
        .zip(w.iter())
        .map(|((u, e), w)| (w * u * e).powi(2))
        .sum();
    let hc1 = n_j / (n_j - regressors as f64);
    let se_conventional = (hc1 * meat).sqrt() / wuu;
    let wee: f64 = e.iter().zip(w.iter()).map(|(e, w)| w * e * e).sum();

    Ok(FwlFit {
        label: spec.label.clone(),
        rows: rows.clone(),
        theta_hat,
        denom: wuu / n_j,
        residualized_treatment: u.as_slice().to_vec(),
        outcome_values: y.as_slice().to_vec(),
        weights,
        residuals: e.as_slice().to_vec(),
        se_conventional,
        regressors,
        r2_treatment_on_controls: (1.0 - wuu / d_ss).clamp(0.0, 1.0),
        var_ratio: if wee > 0.0 { wuu / wee } else { f64::INFINITY },
    })
}

/// Stacked estimates across specifications, main specification first.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateBundle {
    pub labels: Vec<String>,
    pub theta: Vec<f64>,
    /// Covariance of `theta` itself (not scaled by n); filled by the covariance step.
    #[serde(skip)]
    pub cov: Option<DMatrix<f64>>,
    pub n: usize,
    pub n_per_spec: Vec<usize>,
    /// n × (m+1): `w u y / denom` on included rows, zero elsewhere.
    #[serde(skip)]
    pub moment_rows: DMatrix<f64>,
    /// n × (m+1): per-row influence `w u e / mean_n(w u²)`, zero elsewhere.
    #[serde(skip)]
    pub influence_rows: DMatrix<f64>,
}

impl EstimateBundle {
    /// Bundle from estimates and a covariance with no row-level data.
    pub fn from_estimates(labels: Vec<String>, theta: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::InvalidInput("need a main estimate and at least one check".into()));
        }
        if cov.nrows() != theta.len() || cov.ncols() != theta.len() {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{}, expected {}x{}",
                cov.nrows(),
                cov.ncols(),
                theta.len(),
                theta.len()
            )));
        }
        if labels.len() != theta.len() {
            return Err(Error::InvalidInput("label count does not match estimates".into()));
        }
        let k = theta.len();
        Ok(EstimateBundle {
            labels,
            theta,
            cov: Some(cov),
            n: 0,
            n_per_spec: vec![0; k],
            moment_rows: DMatrix::zeros(0, k),
            influence_rows: DMatrix::zeros(0, k),
        })
    }

    pub fn m(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn with_cov(mut self, cov: DMatrix<f64>) -> Self {
        self.cov = Some(cov);
        self
    }

    pub fn cov(&self) -> Result<&DMatrix<f64>> {
        self.cov
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("estimate bundle has no covariance".into()))
    }
}

/// Stacks per-specification fits into one bundle over `n` dataset rows.
pub fn stack_estimates(fits: &[FwlFit], masks: &[SubsampleMask]) -> Result<EstimateBundle> {
    if fits.is_empty() || fits.len() != masks.len() {
        return Err(Error::InvalidInput("fits and masks must be non-empty and paired".into()));
    }
    let n = masks[0].included.len();
    if masks.iter().any(|m| m.included.len() != n) {
        return Err(Error::InvalidInput("masks cover different row counts".into()));
    }
    let k = fits.len();
    let mut moment_rows = DMatrix::zeros(n, k);
    let mut influence_rows = DMatrix::zeros(n, k);
    for (j, (fit, mask)) in fits.iter().zip(masks).enumerate() {
        if fit.rows != mask.index_set {
            return Err(Error::InvalidInput(format!(
                "fit \"{}\" does not match its mask",
                fit.label
            )));
        }
        let s_full: f64 = fit.denom * fit.rows.len() as f64 / n as f64;
        for (pos, &row) in fit.rows.iter().enumerate() {
            let wu = fit.weights[pos] * fit.residualized_treatment[pos];
            moment_rows[(row, j)] = wu * fit.outcome_values[pos] / fit.denom;
            influence_rows[(row, j)] = wu * fit.residuals[pos] / s_full;
        }
    }
    Ok(EstimateBundle {
        labels: fits.iter().map(|f| f.label.clone()).collect(),
        theta: fits.iter().map(|f| f.theta_hat).collect(),
        cov: None,
        n,
        n_per_spec: masks.iter().map(|m| m.n_j).collect(),
        moment_rows,
        influence_rows,
    })
}

/// Builds masks and fits every specification on the dataset.
pub fn fit_all(ds: &Dataset, specs: &[Specification]) -> Result<(Vec<FwlFit>, Vec<SubsampleMask>)> {
    let mut fits = Vec::with_capacity(specs.len());
    let mut masks = Vec::with_capacity(specs.len());
    for spec in specs {
        let mask = crate::data::build_mask(ds, spec)?;
        fits.push(fit_fwl(ds, spec, &mask)?);
        masks.push(mask);
    }
    Ok((fits, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_mask;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn exact_linear_relation() {
        let mut s = 7u64;
        let d: Vec<f64> = (0..20).map(|_| lcg(&mut s)).collect();
        let x: Vec<f64> = (0..20).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = d.iter().map(|d| 2.0 * d).collect();
        let ds = Dataset::from_numeric(vec![("y", y), ("d", d), ("x", x)]).unwrap();
        let spec = Specification::new("s", "y", "d", &["x"]);
        let fit = fit_fwl(&ds, &spec, &build_mask(&ds, &spec).unwrap()).unwrap();
        assert!((fit.theta_hat - 2.0).abs() < 1e-10);
    }

    #[test]
    fn constant_treatment_rejected() {
        let ds = Dataset::from_numeric(vec![
            ("y", (0..10).map(|i| i as f64).collect()),
            ("d", vec![3.0; 10]),
        ])
        .unwrap();
        let spec = Specification::new("s", "y", "d", &[]);
        let err = fit_fwl(&ds, &spec, &build_mask(&ds, &spec).unwrap()).unwrap_err();
        assert!(err.to_string().contains("treatment has no residual variation"));
    }

    #[test]
    fn collinear_controls_rejected() {
        let mut s = 3u64;
        let x: Vec<f64> = (0..30).map(|_| lcg(&mut s)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let d: Vec<f64> = (0..30).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = (0..30).map(|_| lcg(&mut s)).collect();
        let ds = Dataset::from_numeric(vec![("y", y), ("d", d), ("x", x), ("x2", x2)]).unwrap();
        let spec = Specification::new("s", "y", "d", &["x", "x2"]);
        let err = fit_fwl(&ds, &spec, &build_mask(&ds, &spec).unwrap()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn residualized_treatment_is_orthogonal() {
        let mut s = 11u64;
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| lcg(&mut s) * 100.0).collect();
        let d: Vec<f64> = x.iter().map(|x| 0.01 * x + lcg(&mut s)).collect();
        let y: Vec<f64> = d.iter().map(|d| d + lcg(&mut s)).collect();
        let w: Vec<f64> = (0..n).map(|_| 1.0 + lcg(&mut s)).collect();
        let ds = Dataset::from_numeric(vec![("y", y), ("d", d), ("x", x.clone()), ("w", w)]).unwrap();
        let spec = Specification::new("s", "y", "d", &["x"]).with_weights("w");
        let fit = fit_fwl(&ds, &spec, &build_mask(&ds, &spec).unwrap()).unwrap();
        let wu_one: f64 = fit.weights.iter().zip(&fit.residualized_treatment).map(|(w, u)| w * u).sum();
        let wu_x: f64 = fit
            .rows
            .iter()
            .enumerate()
            .map(|(p, &r)| fit.weights[p] * fit.residualized_treatment[p] * x[r])
            .sum();
        let xs: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(wu_one.abs() < 1e-8 * (n as f64).sqrt());
        assert!(wu_x.abs() < 1e-8 * xs);
        assert!(fit.denom > 0.0);
    }

    #[test]
    fn categorical_control_expands() {
        // y depends on group intercepts only; treatment is independent of groups
        let groups = ["a", "b", "c"];
        let mut s = 5u64;
        let n = 45;
        let g: Vec<Option<String>> = (0..n).map(|i| Some(groups[i % 3].to_string())).collect();
        let d: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.5 * d[i] + [0.0, 10.0, -4.0][i % 3]).collect();
        let ds = Dataset::new(vec![
            ("y".into(), Column::Numeric(y.into_iter().map(Some).collect())),
            ("d".into(), Column::Numeric(d.into_iter().map(Some).collect())),
            ("g".into(), Column::Categorical(g)),
        ])
        .unwrap();
        let spec = Specification::new("s", "y", "d", &["g"]);
        let fit = fit_fwl(&ds, &spec, &build_mask(&ds, &spec).unwrap()).unwrap();
        assert!((fit.theta_hat - 1.5).abs() < 1e-10);
        assert_eq!(fit.regressors, 4);
    }

    #[test]
    fn stacked_moments_reproduce_theta() {
        let mut s = 21u64;
        let n = 100;
        let d: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = d.iter().map(|d| 0.7 * d + lcg(&mut s)).collect();
        let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ds = Dataset::from_numeric(vec![("y", y), ("d", d), ("i", idx)]).unwrap();
        let specs = vec![
            Specification::new("main", "y", "d", &[]).main(),
            Specification::new("half", "y", "d", &[]).with_filter("i < 50"),
        ];
        let (fits, masks) = fit_all(&ds, &specs).unwrap();
        let b = stack_estimates(&fits, &masks).unwrap();
        for r in 50..100 {
            assert_eq!(b.moment_rows[(r, 1)], 0.0);
            assert_eq!(b.influence_rows[(r, 1)], 0.0);
        }
        for j in 0..2 {
            let mean = b.moment_rows.column(j).sum() / n as f64;
            let rescaled = mean * n as f64 / b.n_per_spec[j] as f64;
            assert!((rescaled - b.theta[j]).abs() <= 1e-10 * b.theta[j].abs());
        }
    }

    #[test]
    fn duplicated_specs_match() {
        let mut s = 2u64;
        let d: Vec<f64> = (0..40).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = d.iter().map(|d| d + lcg(&mut s)).collect();
        let ds = Dataset::from_numeric(vec![("y", y), ("d", d)]).unwrap();
        let spec = Specification::new("a", "y", "d", &[]);
        let (fits, masks) = fit_all(&ds, &[spec.clone(), spec]).unwrap();
        let b = stack_estimates(&fits, &masks).unwrap();
        assert_eq!(b.theta[0], b.theta[1]);
    }

    #[test]
    fn mismatched_rows_error() {
        let ds = Dataset::from_numeric(vec![("y", vec![1.0, 2.0, 0.0, 4.0, 3.0]), ("d", vec![0.0, 1.0, 0.5, 2.0, 1.0])]).unwrap();
        let spec = Specification::new("a", "y", "d", &[]);
        let (fits, mut masks) = fit_all(&ds, &[spec]).unwrap();
        masks[0] = SubsampleMask::from_flags(vec![true; 4]);
        assert!(stack_estimates(&fits, &masks).is_err());
    }
}
