//! Robustness radius: the smallest bound `b` at which the null
//! "every check lies within `b` of the main estimate" is not rejected.
//!
//! Search: test `b = 0`; if rejected, audit the decision on a 64-point grid
//! over `[0, max distance]` and bisect the first reject → accept transition.
//! The returned value is always an evaluated, non-rejected `b` (or +∞ when no
//! finite bound is accepted).

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};

use crate::cstest::{build_system, feasible_outcome, run_test, DfConvention, PreparedProblem, TestOptions, TestOutcome, Variant};
use crate::error::{Error, Result};
use crate::regress::EstimateBundle;

pub const AUDIT_POINTS: usize = 64;

/// Upper bound used when probing whether any finite radius exists.
const PROBE_LIMIT_FACTOR: f64 = 1e6;

fn finite_or_null<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub b: f64,
    pub statistic: f64,
    pub r_hat: usize,
    pub critical_value: f64,
    pub reject: bool,
}

impl TracePoint {
    fn from_outcome(b: f64, o: &TestOutcome) -> Self {
        TracePoint {
            b,
            statistic: o.statistic,
            r_hat: o.r_hat,
            critical_value: o.critical_value,
            reject: o.reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusReport {
    /// Robustness radius; `null` in JSON when no finite bound is accepted.
    #[serde(serialize_with = "finite_or_null")]
    pub b_rr: f64,
    pub finite: bool,
    pub alpha: f64,
    pub variant: Variant,
    pub df_convention: DfConvention,
    pub tolerance: f64,
    pub max_distance: f64,
    pub fully_robust: bool,
    pub sign_robust: bool,
    pub per_check_distance: Vec<f64>,
    pub must_equal: Vec<bool>,
    /// Set when the audit grid showed a reject after an accept.
    pub non_monotone: bool,
    pub search_trace: Vec<TracePoint>,
    pub lw_test: TestOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusOptions {
    pub alpha: f64,
    pub variant: Variant,
    pub df_convention: DfConvention,
    /// One flag per check; empty means none pinned.
    pub must_equal: Vec<bool>,
    /// Bisection tolerance; `None` uses `1e-6 · (1 + max distance)`.
    pub tol: Option<f64>,
}

impl Default for RadiusOptions {
    fn default() -> Self {
        RadiusOptions {
            alpha: 0.05,
            variant: Variant::Rcc,
            df_convention: DfConvention::Rank,
            must_equal: Vec::new(),
            tol: None,
        }
    }
}

impl RadiusOptions {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    fn test_options(&self) -> TestOptions {
        TestOptions {
            alpha: self.alpha,
            variant: self.variant,
            df_convention: self.df_convention,
        }
    }
}

struct Search<'a> {
    problem: PreparedProblem,
    opts: &'a RadiusOptions,
    m: usize,
    trace: Vec<TracePoint>,
}

impl Search<'_> {
    fn eval(&mut self, b: f64) -> Result<TestOutcome> {
        let system = build_system(self.m, b, &self.opts.must_equal)?;
        let out = run_test(&self.problem, &system, self.opts.test_options())?;
        self.trace.push(TracePoint::from_outcome(b, &out));
        Ok(out)
    }

    fn rejects(&mut self, b: f64) -> Result<bool> {
        Ok(self.eval(b)?.reject)
    }

    /// Shrinks `(lo, hi)` with `lo` rejected and `hi` accepted to width `tol`.
    fn bisect(&mut self, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.rejects(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

/// Computes the robustness radius from stacked estimates and their covariance.
pub fn robustness_radius(theta: &[f64], cov: &DMatrix<f64>, opts: &RadiusOptions) -> Result<RadiusReport> {
    if theta.len() < 2 {
        return Err(Error::InvalidInput("need a main estimate and at least one check".into()));
    }
    let m = theta.len() - 1;
    if !opts.must_equal.is_empty() && opts.must_equal.len() != m {
        return Err(Error::InvalidInput(format!(
            "must_equal has {} entries, expected {m}",
            opts.must_equal.len()
        )));
    }
    let must_equal: Vec<bool> = if opts.must_equal.is_empty() {
        vec![false; m]
    } else {
        opts.must_equal.clone()
    };
    let per_check_distance: Vec<f64> = theta[1..].iter().map(|t| (theta[0] - t).abs()).collect();
    let max_distance = per_check_distance.iter().copied().fold(0.0, f64::max);
    let max_free = per_check_distance
        .iter()
        .zip(&must_equal)
        .filter(|(_, &pinned)| !pinned)
        .map(|(d, _)| *d)
        .fold(0.0, f64::max);
    let tol = opts.tol.unwrap_or(1e-6 * (1.0 + max_distance));
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }

    if max_distance == 0.0 {
        // θ̂ satisfies the b = 0 null exactly; valid even for singular covariances
        let system = build_system(m, 0.0, &must_equal)?;
        let lw_test = feasible_outcome(theta, cov, &system, opts.test_options())?;
        let search_trace = vec![TracePoint::from_outcome(0.0, &lw_test)];
        return Ok(RadiusReport {
            b_rr: 0.0,
            finite: true,
            alpha: opts.alpha,
            variant: opts.variant,
            df_convention: opts.df_convention,
            tolerance: tol,
            max_distance,
            fully_robust: true,
            sign_robust: theta[0] != 0.0,
            per_check_distance,
            must_equal,
            non_monotone: false,
            search_trace,
            lw_test,
        });
    }

    let a = build_system(m, 0.0, &must_equal)?.a;
    let mut search = Search {
        problem: PreparedProblem::new(theta, cov, &a)?,
        opts,
        m,
        trace: Vec::new(),
    };

    let lw_test = search.eval(0.0)?;
    let mut non_monotone = false;
    let b_rr = if !lw_test.reject {
        0.0
    } else {
        // at max_free every unpinned check is satisfied by θ̂ itself
        let mut upper = max_free;
        let mut finite = !search.rejects(upper)?;
        if !finite {
            // pinned checks still bind: widen until accepted or clearly hopeless
            let limit = PROBE_LIMIT_FACTOR * (1.0 + max_distance);
            let mut probe = upper.max(tol);
            while probe < limit {
                probe *= 2.0;
                if !search.rejects(probe)? {
                    upper = probe;
                    finite = true;
                    break;
                }
            }
        }
        if !finite {
            f64::INFINITY
        } else {
            let grid: Vec<f64> = (0..AUDIT_POINTS)
                .map(|k| upper * k as f64 / (AUDIT_POINTS - 1) as f64)
                .collect();
            let mut decisions = Vec::with_capacity(AUDIT_POINTS);
            decisions.push(true); // b = 0 rejected above
            for &b in &grid[1..AUDIT_POINTS - 1] {
                decisions.push(search.rejects(b)?);
            }
            decisions.push(false);
            let first_accept = decisions.iter().position(|r| !r).expect("upper end accepted");
            non_monotone = decisions[first_accept..].iter().any(|&r| r);
            if non_monotone {
                log::debug!("reject decision is not monotone in b; reporting the first accepted grid cell");
            }
            search.bisect(grid[first_accept - 1], grid[first_accept], tol)?
        }
    };

    let finite = b_rr.is_finite();
    Ok(RadiusReport {
        b_rr,
        finite,
        alpha: opts.alpha,
        variant: opts.variant,
        df_convention: opts.df_convention,
        tolerance: tol,
        max_distance,
        fully_robust: b_rr <= tol,
        sign_robust: b_rr < theta[0].abs(),
        per_check_distance,
        must_equal,
        non_monotone,
        search_trace: search.trace,
        lw_test,
    })
}

/// Radius for an estimate bundle with its covariance filled.
pub fn radius_for_bundle(bundle: &EstimateBundle, opts: &RadiusOptions) -> Result<RadiusReport> {
    robustness_radius(&bundle.theta, bundle.cov()?, opts)
}

/// The all-equal null (`b = 0` for every check).
pub fn lu_white_full_robustness(
    theta: &[f64],
    cov: &DMatrix<f64>,
    alpha: f64,
    variant: Variant,
    df_convention: DfConvention,
) -> Result<TestOutcome> {
    if theta.len() < 2 {
        return Err(Error::InvalidInput("need a main estimate and at least one check".into()));
    }
    let system = build_system(theta.len() - 1, 0.0, &[])?;
    let p = PreparedProblem::new(theta, cov, &system.a)?;
    run_test(&p, &system, TestOptions { alpha, variant, df_convention })
}

/// Writes the search trace as CSV (`b,statistic,r_hat,critical_value,reject`).
pub fn write_trace_csv<W: std::io::Write>(report: &RadiusReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &report.search_trace {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
