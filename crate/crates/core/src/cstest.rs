//! Conditional chi-square (CC) test and its refinement (RCC) for the
//! polyhedral null `Aθ ≤ rhs`, where `A` encodes `|θ₀ − θⱼ| ≤ b` for every
//! check `j`.
//!
//! The statistic is the squared Mahalanobis distance from `θ̂` to the
//! polyhedron, `T = min_{Aμ ≤ rhs} (θ̂−μ)ᵀ V⁻¹ (θ̂−μ)`, with `V` the covariance
//! of `θ̂`. It is compared to a chi-square quantile whose degrees of freedom
//! count the inequalities active at the minimizer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dist::{chi2_quantile, normal_cdf};
use crate::error::{Error, Result};
use crate::qp::least_distance;

/// Largest accepted condition number of the covariance.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative activity tolerance.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Rank tolerance for the active-row submatrix.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cc,
    #[default]
    Rcc,
}

/// How the degrees of freedom are counted from the active inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DfConvention {
    /// Rank of the active rows of `A`.
    #[default]
    Rank,
    /// Number of active rows.
    Rows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InequalitySystem {
    pub a: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub equality_rows: Vec<usize>,
}

impl InequalitySystem {
    pub fn m(&self) -> usize {
        self.a.nrows() / 2
    }

    pub fn slack(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.rhs - &self.a * mu
    }
}

/// Rows `2k` and `2k+1` (0-based) encode `θ₀ − θ_{k+1} ≤ rhs` and
/// `θ_{k+1} − θ₀ ≤ rhs`. Checks flagged in `must_equal` get `rhs = 0`.
pub fn build_system(m: usize, b: f64, must_equal: &[bool]) -> Result<InequalitySystem> {
    if m == 0 {
        return Err(Error::InvalidInput("at least one check is required".into()));
    }
    if !(b >= 0.0) {
        return Err(Error::InvalidInput(format!("bound b = {b} must be nonnegative")));
    }
    if !must_equal.is_empty() && must_equal.len() != m {
        return Err(Error::InvalidInput(format!(
            "must_equal has {} entries, expected {m}",
            must_equal.len()
        )));
    }
    let mut a = DMatrix::zeros(2 * m, m + 1);
    let mut rhs = DVector::from_element(2 * m, b);
    let mut equality_rows = Vec::new();
    for k in 0..m {
        a[(2 * k, 0)] = 1.0;
        a[(2 * k, k + 1)] = -1.0;
        a[(2 * k + 1, 0)] = -1.0;
        a[(2 * k + 1, k + 1)] = 1.0;
        if must_equal.get(k).copied().unwrap_or(false) {
            rhs[2 * k] = 0.0;
            rhs[2 * k + 1] = 0.0;
            equality_rows.extend([2 * k, 2 * k + 1]);
        }
    }
    Ok(InequalitySystem { a, rhs, equality_rows })
}

/// Cholesky factor and condition number of a covariance matrix.
#[derive(Debug, Clone)]
pub struct CovFactor {
    pub l: DMatrix<f64>,
    pub condition: f64,
}

pub fn factor_cov(cov: &DMatrix<f64>) -> Result<CovFactor> {
    let k = cov.nrows();
    if cov.ncols() != k || k == 0 {
        return Err(Error::InvalidInput("covariance must be square and non-empty".into()));
    }
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("covariance has non-finite entries".into()));
    }
    let scale = cov.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for i in 0..k {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidInput("covariance is not symmetric".into()));
            }
        }
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let condition = max / min;
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned { condition });
    }
    let chol = sym.cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(CovFactor { l: chol.l(), condition })
}

/// Estimates, covariance and constraint matrix with the pieces that do not
/// depend on the right-hand side precomputed; reused across many `b`.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    pub theta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub a: DMatrix<f64>,
    factor: CovFactor,
    /// A L, the constraint normals in whitened coordinates.
    al: DMatrix<f64>,
    /// A V Aᵀ
    gram: DMatrix<f64>,
    a_theta: DVector<f64>,
}

impl PreparedProblem {
    pub fn new(theta: &[f64], cov: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != theta.len() || cov.nrows() != theta.len() {
            return Err(Error::InvalidInput("dimension mismatch between estimates, covariance and A".into()));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("estimates must be finite".into()));
        }
        let factor = factor_cov(cov)?;
        let theta = DVector::from_column_slice(theta);
        let al = a * &factor.l;
        let gram = &al * al.transpose();
        let a_theta = a * &theta;
        Ok(PreparedProblem {
            theta,
            cov: cov.clone(),
            a: a.clone(),
            factor,
            al,
            gram,
            a_theta,
        })
    }

    pub fn condition(&self) -> f64 {
        self.factor.condition
    }

    /// Standard deviation of `a_s θ̂` for each row.
    pub fn row_sd(&self) -> Vec<f64> {
        self.gram.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub mu_hat: DVector<f64>,
    pub statistic: f64,
    /// Multipliers `λ ≥ 0` with `V⁻¹(θ̂−μ̂) = Aᵀλ`.
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
}

/// Projects `θ̂` onto `{μ : Aμ ≤ rhs}` in the `V⁻¹` metric.
pub fn project_prepared(p: &PreparedProblem, rhs: &DVector<f64>) -> Result<Projection> {
    // μ = θ̂ − L z turns the constraint into (A L) z ≥ Aθ̂ − rhs
    let c = &p.a_theta - rhs;
    let sol = least_distance(&p.al, &c)?;
    let mu_hat = &p.theta - &p.factor.l * &sol.z;
    let statistic = sol.z.norm_squared();

    // KKT: stationarity V⁻¹(θ̂−μ̂) = Aᵀλ, feasibility, complementarity
    let lt_inv_z = p
        .factor
        .l
        .transpose()
        .solve_upper_triangular(&sol.z)
        .ok_or(Error::NotPositiveDefinite)?;
    let grad_scale = 1.0 + lt_inv_z.amax();
    let stationarity = (&lt_inv_z - p.a.transpose() * &sol.multipliers).amax() / grad_scale;
    let slack = rhs - &p.a * &mu_hat;
    let scale = 1.0 + rhs.amax() + mu_hat.amax();
    let infeasibility = slack.iter().fold(0.0f64, |acc, s| acc.max(-s)) / scale;
    let complementarity = slack
        .iter()
        .zip(sol.multipliers.iter())
        .fold(0.0f64, |acc, (s, l)| acc.max((s * l).abs()))
        / (scale * grad_scale);
    Ok(Projection {
        mu_hat,
        statistic,
        multipliers: sol.multipliers,
        kkt_residual: stationarity.max(infeasibility).max(complementarity),
    })
}

/// Projection of `θ̂` onto the inequality system; returns `(μ̂, T)`.
pub fn project_qp(
    theta_hat: &[f64],
    cov: &DMatrix<f64>,
    system: &InequalitySystem,
) -> Result<(DVector<f64>, f64)> {
    let p = PreparedProblem::new(theta_hat, cov, &system.a)?;
    let proj = project_prepared(&p, &system.rhs)?;
    Ok((proj.mu_hat, proj.statistic))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActiveSet {
    pub rows: Vec<usize>,
    pub r_hat_rows: usize,
    pub r_hat_rank: usize,
}

/// Row `s` is active when `rhs_s − a_s μ̂ ≤ 1e-7 · scale`.
pub fn count_active(mu_hat: &DVector<f64>, system: &InequalitySystem, scale: f64) -> ActiveSet {
    let slack = system.slack(mu_hat);
    let eps = ACTIVE_TOL * scale;
    let rows: Vec<usize> = slack
        .iter()
        .enumerate()
        .filter_map(|(s, &v)| (v <= eps).then_some(s))
        .collect();
    let r_hat_rank = if rows.is_empty() {
        0
    } else {
        let sub = DMatrix::from_fn(rows.len(), system.a.ncols(), |i, j| system.a[(rows[i], j)]);
        let sv = sub.singular_values();
        let top = sv.max();
        sv.iter().filter(|&&s| s > RANK_TOL * top).count()
    };
    ActiveSet {
        r_hat_rows: rows.len(),
        rows,
        r_hat_rank,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub minimizer: Vec<f64>,
    pub active_rows: Vec<usize>,
    pub r_hat: usize,
    pub r_hat_rows: usize,
    pub r_hat_rank: usize,
    pub critical_value: f64,
    pub reject: bool,
    pub variant: Variant,
    pub df_convention: DfConvention,
    pub alpha: f64,
    /// Level actually used for the quantile (`2αΦ(τ̂)` under the refinement).
    pub effective_level: f64,
    /// Distance-to-next-inequality statistic, set when the refinement applied.
    pub rcc_tau: Option<f64>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOptions {
    pub alpha: f64,
    pub variant: Variant,
    pub df_convention: DfConvention,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            alpha: 0.05,
            variant: Variant::Rcc,
            df_convention: DfConvention::Rank,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} outside (0, 0.5]")));
    }
    Ok(())
}

/// Activity scale: largest row standard deviation plus the largest bound.
/// Both scale linearly with the data, so activity is scale-equivariant.
fn activity_scale(p: &PreparedProblem, rhs: &DVector<f64>) -> f64 {
    let sd_max = p.row_sd().into_iter().fold(0.0f64, f64::max);
    sd_max + rhs.amax()
}

/// Distance from `μ̂` along the active facet `j` to the nearest other
/// inequality, in standard-deviation units. Rows whose normal points the same
/// way as row `j` are skipped. Returns 0 when no row qualifies.
fn refinement_tau(g: &DMatrix<f64>, j: usize, slack: &DVector<f64>) -> f64 {
    let sd_j = g[(j, j)].sqrt();
    let mut tau = f64::INFINITY;
    for l in 0..g.nrows() {
        if l == j {
            continue;
        }
        let sd_l = g[(l, l)].sqrt();
        let denom = sd_j * sd_l - g[(j, l)];
        if denom <= 1e-12 * sd_j * sd_l {
            continue;
        }
        tau = tau.min(sd_j * slack[l].max(0.0) / denom);
    }
    if tau.is_finite() {
        tau
    } else {
        0.0
    }
}

/// Runs the CC or RCC test on a prepared problem with the given bounds.
pub fn run_test(p: &PreparedProblem, system: &InequalitySystem, opts: TestOptions) -> Result<TestOutcome> {
    check_alpha(opts.alpha)?;
    let proj = project_prepared(p, &system.rhs)?;
    let active = count_active(&proj.mu_hat, system, activity_scale(p, &system.rhs));
    let r_hat = match opts.df_convention {
        DfConvention::Rank => active.r_hat_rank,
        DfConvention::Rows => active.r_hat_rows,
    };
    let mut level = opts.alpha;
    let mut rcc_tau = None;
    if opts.variant == Variant::Rcc && r_hat == 1 {
        let slack = system.slack(&proj.mu_hat);
        let tau = refinement_tau(&p.gram, active.rows[0], &slack);
        level = 2.0 * opts.alpha * normal_cdf(tau);
        rcc_tau = Some(tau);
    }
    let critical_value = if r_hat == 0 || level >= 1.0 {
        0.0
    } else {
        chi2_quantile(r_hat, 1.0 - level)?
    };
    // with nothing active the minimizer is θ̂ itself and T is round-off
    let reject = r_hat > 0 && proj.statistic > critical_value;
    Ok(TestOutcome {
        statistic: proj.statistic,
        minimizer: proj.mu_hat.iter().copied().collect(),
        active_rows: active.rows,
        r_hat,
        r_hat_rows: active.r_hat_rows,
        r_hat_rank: active.r_hat_rank,
        critical_value,
        reject,
        variant: opts.variant,
        df_convention: opts.df_convention,
        alpha: opts.alpha,
        effective_level: level,
        rcc_tau,
        kkt_residual: proj.kkt_residual,
    })
}

/// Outcome when `θ̂` already satisfies every inequality: `T = 0` for any
/// covariance, so this needs no factorization and accepts singular
/// (e.g. duplicated-specification) covariances.
pub fn feasible_outcome(
    theta_hat: &[f64],
    cov: &DMatrix<f64>,
    system: &InequalitySystem,
    opts: TestOptions,
) -> Result<TestOutcome> {
    check_alpha(opts.alpha)?;
    let theta = DVector::from_column_slice(theta_hat);
    let slack = system.slack(&theta);
    if slack.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidInput("estimates violate the inequality system".into()));
    }
    let gram = &system.a * cov * system.a.transpose();
    let sd_max = gram.diagonal().iter().fold(0.0f64, |a, &g| a.max(g.max(0.0).sqrt()));
    let active = count_active(&theta, system, sd_max + system.rhs.amax());
    let r_hat = match opts.df_convention {
        DfConvention::Rank => active.r_hat_rank,
        DfConvention::Rows => active.r_hat_rows,
    };
    let mut level = opts.alpha;
    let mut rcc_tau = None;
    if opts.variant == Variant::Rcc && r_hat == 1 {
        let tau = refinement_tau(&gram, active.rows[0], &slack);
        level = 2.0 * opts.alpha * normal_cdf(tau);
        rcc_tau = Some(tau);
    }
    let critical_value = if r_hat == 0 || level >= 1.0 {
        0.0
    } else {
        chi2_quantile(r_hat, 1.0 - level)?
    };
    Ok(TestOutcome {
        statistic: 0.0,
        minimizer: theta_hat.to_vec(),
        active_rows: active.rows,
        r_hat,
        r_hat_rows: active.r_hat_rows,
        r_hat_rank: active.r_hat_rank,
        critical_value,
        reject: false,
        variant: opts.variant,
        df_convention: opts.df_convention,
        alpha: opts.alpha,
        effective_level: level,
        rcc_tau,
        kkt_residual: 0.0,
    })
}

pub fn cc_test(
    theta_hat: &[f64],
    cov: &DMatrix<f64>,
    system: &InequalitySystem,
    alpha: f64,
    df_convention: DfConvention,
) -> Result<TestOutcome> {
    let p = PreparedProblem::new(theta_hat, cov, &system.a)?;
    run_test(&p, system, TestOptions { alpha, variant: Variant::Cc, df_convention })
}

pub fn rcc_test(
    theta_hat: &[f64],
    cov: &DMatrix<f64>,
    system: &InequalitySystem,
    alpha: f64,
    df_convention: DfConvention,
) -> Result<TestOutcome> {
    let p = PreparedProblem::new(theta_hat, cov, &system.a)?;
    run_test(&p, system, TestOptions { alpha, variant: Variant::Rcc, df_convention })
}
