//! Least-distance quadratic programs
//!
//! ```text
//!     minimize    ½ ‖z‖²
//!     subject to  M z ≥ c
//! ```
//!
//! solved by the Goldfarb–Idnani dual active-set method (identity Hessian).
//! Every strictly convex QP with a positive definite Hessian reduces to this
//! form after a change of variables through the Cholesky factor. A projected
//! gradient ascent on the dual is kept as a fallback.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LdpSolution {
    pub z: DVector<f64>,
    /// Lagrange multiplier per constraint (zero off the active set); `z = Mᵀλ`.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub used_fallback: bool,
}

fn violation_tol(row: &[f64], c: f64, z_norm: f64) -> f64 {
    let row_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    1e-13 * (1.0 + c.abs() + row_norm * z_norm)
}

/// Solves the least-distance problem; falls back to dual projected gradient
/// if the active-set iteration stalls.
pub fn least_distance(m: &DMatrix<f64>, c: &DVector<f64>) -> Result<LdpSolution> {
    match goldfarb_idnani(m, c) {
        Ok(sol) => Ok(sol),
        Err(Error::QpNonConvergence { .. }) => dual_projected_gradient(m, c),
        Err(e) => Err(e),
    }
}

/// Dual active-set iteration. Starts from the unconstrained minimizer
/// `z = 0` and adds the most violated constraint until all hold.
pub fn goldfarb_idnani(m: &DMatrix<f64>, c: &DVector<f64>) -> Result<LdpSolution> {
    let (n_con, dim) = m.shape();
    assert_eq!(c.len(), n_con);
    let rows: Vec<Vec<f64>> = (0..n_con).map(|i| m.row(i).iter().copied().collect()).collect();
    let normals: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_column_slice(r)).collect();

    let mut z = DVector::zeros(dim);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (n_con + dim) + 100;
    let mut iter = 0;

    loop {
        // most violated constraint, measured in normalized distance
        let z_norm = z.norm();
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..n_con {
            if active.contains(&i) {
                continue;
            }
            let s = normals[i].dot(&z) - c[i];
            if s < -violation_tol(&rows[i], c[i], z_norm) {
                let score = s / normals[i].norm();
                if pick.is_none_or(|(_, best)| score < best) {
                    pick = Some((i, score));
                }
            }
        }
        let Some((p, _)) = pick else { break };
        let np = &normals[p];
        let mut u_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::QpNonConvergence { iterations: iter });
            }
            // step direction: component of n_p orthogonal to the active normals,
            // and the dual direction r with N r = projection of n_p
            let (zdir, r) = if active.is_empty() {
                (np.clone(), DVector::zeros(0))
            } else {
                let n_mat = DMatrix::from_fn(dim, active.len(), |i, j| normals[active[j]][i]);
                let qr = n_mat.clone().qr();
                let qt_np = qr.q().transpose() * np;
                let r = qr
                    .r()
                    .solve_upper_triangular(&qt_np)
                    .ok_or(Error::QpNonConvergence { iterations: iter })?;
                (np - &n_mat * &r, r)
            };

            // largest dual step keeping active multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut block: Option<usize> = None;
            for (k, (&rk, &uk)) in r.iter().zip(&u).enumerate() {
                if rk > 0.0 {
                    let ratio = uk / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        block = Some(k);
                    }
                }
            }

            let zz = zdir.norm_squared();
            let dependent = zz <= 1e-24 * np.norm_squared().max(1e-300);
            let s_p = np.dot(&z) - c[p];
            let t2 = if dependent { f64::INFINITY } else { -s_p / zz };

            if !t1.is_finite() && !t2.is_finite() {
                return Err(Error::InvalidInput("inequality system is infeasible".into()));
            }
            if t2 <= t1 {
                z += &zdir * t2;
                for (uk, rk) in u.iter_mut().zip(r.iter()) {
                    *uk -= t2 * rk;
                }
                u_p += t2;
                active.push(p);
                u.push(u_p);
                break;
            }
            if !dependent {
                z += &zdir * t1;
            }
            for (uk, rk) in u.iter_mut().zip(r.iter()) {
                *uk -= t1 * rk;
            }
            u_p += t1;
            let k = block.expect("finite t1 has a blocking constraint");
            active.remove(k);
            u.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(n_con);
    for (&a, &ua) in active.iter().zip(&u) {
        multipliers[a] = ua.max(0.0);
    }
    Ok(LdpSolution {
        z,
        multipliers,
        active,
        iterations: iter,
        used_fallback: false,
    })
}

/// Projected gradient ascent on the dual `max_{λ≥0} cᵀλ − ½‖Mᵀλ‖²` with
/// exact line search. Iteration cap 10⁵; stops when the dual objective
/// improves by less than 1e-10 (relative).
pub fn dual_projected_gradient(m: &DMatrix<f64>, c: &DVector<f64>) -> Result<LdpSolution> {
    let n_con = m.nrows();
    let mut lambda = DVector::<f64>::zeros(n_con);
    let dual = |l: &DVector<f64>| c.dot(l) - 0.5 * (m.transpose() * l).norm_squared();
    let mut obj = dual(&lambda);
    const MAX_ITER: usize = 100_000;
    for iter in 1..=MAX_ITER {
        let z = m.transpose() * &lambda;
        let grad = c - m * &z;
        let dir = DVector::from_fn(n_con, |i, _| {
            if lambda[i] > 0.0 || grad[i] > 0.0 {
                grad[i]
            } else {
                0.0
            }
        });
        let curv = (m.transpose() * &dir).norm_squared();
        if dir.norm_squared() == 0.0 || curv == 0.0 {
            return Ok(finish_dual(m, lambda, iter));
        }
        let step = grad.dot(&dir) / curv;
        lambda = (&lambda + dir * step).map(|x| x.max(0.0));
        let next = dual(&lambda);
        if (next - obj).abs() <= 1e-10 * (1.0 + obj.abs()) {
            return Ok(finish_dual(m, lambda, iter));
        }
        obj = next;
    }
    Err(Error::QpNonConvergence { iterations: MAX_ITER })
}

fn finish_dual(m: &DMatrix<f64>, lambda: DVector<f64>, iterations: usize) -> LdpSolution {
    let z = m.transpose() * &lambda;
    let active = lambda
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l > 0.0).then_some(i))
        .collect();
    LdpSolution {
        z,
        multipliers: lambda,
        active,
        iterations,
        used_fallback: true,
    }
}
