//! Normal and chi-square distribution helpers.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation polished by
/// two Halley steps against the erfc-based CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e / normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Upper-tail probability of a chi-square variable.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x < 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// The `p`-quantile of a chi-square distribution with `df` degrees of freedom.
///
/// `df = 0` returns 0, so a statistic with no active constraints never rejects.
/// One and two degrees of freedom use closed forms; otherwise a safeguarded
/// Newton iteration inverts the regularized lower incomplete gamma function.
pub fn chi2_quantile(df: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("probability {p} outside (0, 1)")));
    }
    match df {
        0 => return Ok(0.0),
        1 => {
            let z = normal_quantile(0.5 + 0.5 * p)?;
            return Ok(z * z);
        }
        2 => return Ok(-2.0 * (-p).ln_1p()),
        _ => {}
    }
    let k = df as f64;
    let a = k / 2.0;
    // Wilson–Hilferty start
    let z = normal_quantile(p)?;
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let ln_norm = ln_gamma(a) + a * 2f64.ln();
    for _ in 0..200 {
        let f = gamma_lr(a, x / 2.0) - p;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = ((a - 1.0) * x.ln() - x / 2.0 - ln_norm).exp();
        let mut next = x - f / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-14 * x {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_known_values() {
        assert!((normal_quantile(0.975).unwrap() - 1.959963984540054).abs() < 1e-13);
        assert!((normal_quantile(0.95).unwrap() - 1.6448536269514722).abs() < 1e-13);
        assert!((normal_quantile(1e-10).unwrap() + 6.361340902404056).abs() < 1e-10);
        assert!(normal_quantile(0.0).is_err());
    }

    #[test]
    fn chi2_quantile_conventions() {
        assert_eq!(chi2_quantile(0, 0.95).unwrap(), 0.0);
        assert!(chi2_quantile(3, 1.0).is_err());
        assert!(chi2_quantile(3, 0.0).is_err());
        assert!(chi2_quantile(3, -0.5).is_err());
    }

    #[test]
    fn chi2_quantile_inverts_sf() {
        for df in 1..40 {
            for &p in &[0.01, 0.3, 0.9, 0.95, 0.999] {
                let q = chi2_quantile(df, p).unwrap();
                let back = 1.0 - chi2_sf(q, df);
                assert!((back - p).abs() < 1e-11, "df={df} p={p} q={q} back={back}");
            }
        }
    }
}
