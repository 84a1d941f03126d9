//! Mapping between the robustness radius and an omitted-variable-bias
//! sensitivity parameter: the bound `τ̄` on selection on unobservables
//! relative to selection on included covariates, and the bias bound it
//! implies.
//!
//! With `R²` the R² of the treatment on the main specification's controls
//! and `v = var(e_D)/var(e_y)` (residual variance of the treatment over that
//! of the outcome),
//!
//! ```text
//! b(τ̄) = sqrt( (1/v) · τ̄² R² / (1 − R² − τ̄²) )     when 1 − R² − τ̄² > 0, else ∞
//! τ̂(b) = sqrt( b² v (1 − R²) / (R² + b² v) )
//! ```
//!
//! The bias bound is finite exactly when `1 − R² − τ̄² > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityInputs {
    pub b_rr: f64,
    /// var(e_D) / var(e_y) from the main specification.
    pub var_ratio: f64,
    /// R² of the treatment on the main specification's controls.
    pub r2_dx: f64,
}

impl SensitivityInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_rr >= 0.0) {
            return Err(Error::InvalidInput(format!("b_rr = {} must be nonnegative", self.b_rr)));
        }
        if !(self.var_ratio > 0.0) || !self.var_ratio.is_finite() {
            return Err(Error::InvalidInput(format!("var_ratio = {} must be positive", self.var_ratio)));
        }
        if !(0.0..1.0).contains(&self.r2_dx) {
            return Err(Error::InvalidInput(format!("r2_dx = {} outside [0, 1)", self.r2_dx)));
        }
        Ok(())
    }
}

/// Smallest sensitivity parameter whose implied bias bound equals the radius.
pub fn tau_from_radius(inp: &SensitivityInputs) -> Result<f64> {
    inp.validate()?;
    if inp.b_rr == 0.0 {
        return Ok(0.0);
    }
    if inp.b_rr.is_infinite() {
        return Ok((1.0 - inp.r2_dx).sqrt());
    }
    let k = inp.b_rr * inp.b_rr * inp.var_ratio;
    Ok((k * (1.0 - inp.r2_dx) / (inp.r2_dx + k)).sqrt())
}

/// Bias bound implied by a sensitivity parameter; `+∞` outside the finite branch.
pub fn bias_from_tau(tau_bar: f64, var_ratio: f64, r2_dx: f64) -> Result<f64> {
    if !(tau_bar >= 0.0) {
        return Err(Error::InvalidInput(format!("tau_bar = {tau_bar} must be nonnegative")));
    }
    SensitivityInputs { b_rr: 0.0, var_ratio, r2_dx }.validate()?;
    let t2 = tau_bar * tau_bar;
    let denom = 1.0 - r2_dx - t2;
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((t2 * r2_dx / (var_ratio * denom)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityBlock {
    pub inputs: SensitivityInputs,
    pub tau_hat: f64,
    /// Bias bound for a user-chosen parameter, when one was given.
    pub tau_bar: Option<f64>,
    #[serde(serialize_with = "ser_opt_finite")]
    pub bias_bound: Option<f64>,
    pub interpretation: &'static str,
}

fn ser_opt_finite<S: serde::Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) if v.is_finite() => s.serialize_some(v),
        Some(_) => s.serialize_str("inf"),
        None => s.serialize_none(),
    }
}

pub const TAU_INTERPRETATION: &str = "tau_hat is the smallest ratio of selection on unobservables to \
selection on included covariates under which the null that bias from observables is at most \
bias from unobservables is not rejected";

pub fn sensitivity_block(inputs: SensitivityInputs, tau_bar: Option<f64>) -> Result<SensitivityBlock> {
    let tau_hat = tau_from_radius(&inputs)?;
    let bias_bound = tau_bar
        .map(|t| bias_from_tau(t, inputs.var_ratio, inputs.r2_dx))
        .transpose()?;
    Ok(SensitivityBlock {
        inputs,
        tau_hat,
        tau_bar,
        bias_bound,
        interpretation: TAU_INTERPRETATION,
    })
}
