//! Differentiable sparsity surrogates: the PMMP minimax objective, the
//! exponential relaxation (DRR), and the l1 penalty, plus plain-array
//! reference versions used by tests and reports.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::model::MaskedModel;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("gate value {0} outside [0,1]")]
    GateOutOfRange(f64),
    #[error("multiplier value {0} negative")]
    NegativeMultiplier(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Pmmp,
    Drr,
    Rl1,
    None,
}

/// Regularizer configuration. `alpha` scales every penalty; `beta` is the
/// DRR sharpness; the pmmp fields seed gates and multipliers. The l2 weight
/// of the original DRR formulation is fixed at zero here (it was not found
/// beneficial), so no `rho` field exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub pmmp_p_init: f64,
    pub pmmp_u_multi: f64,
    /// Step-size ratio of the u-ascent relative to parameter descent.
    pub pmmp_u_ratio: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self { method: Method::None, alpha: 0.0, ..Self::default() }
    }

    pub fn drr(alpha: f64) -> Self {
        Self { method: Method::Drr, alpha, ..Self::default() }
    }

    pub fn rl1(alpha: f64) -> Self {
        Self { method: Method::Rl1, alpha, ..Self::default() }
    }

    pub fn pmmp(alpha: f64, p_init: f64, u_multi: f64) -> Self {
        Self {
            method: Method::Pmmp,
            alpha,
            pmmp_p_init: p_init,
            pmmp_u_multi: u_multi,
            ..Self::default()
        }
    }
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            method: Method::None,
            alpha: 0.0,
            beta: 5.0,
            pmmp_p_init: 1.0,
            pmmp_u_multi: 1.0,
            pmmp_u_ratio: 1.0,
        }
    }
}

/// Expected l0 under independent Bernoulli gates: sum of gamma entries.
pub fn expected_l0(gammas: &[&Array2<f64>]) -> Result<f64, RegularizerError> {
    let mut total = 0.0;
    for g in gammas {
        for &v in g.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(RegularizerError::GateOutOfRange(v));
            }
            total += v;
        }
    }
    Ok(total)
}

/// alpha * sum_i (1 - exp(-beta*|theta_i|)).
pub fn drr_penalty(thetas: &[&Array2<f64>], alpha: f64, beta: f64) -> f64 {
    alpha
        * thetas
            .iter()
            .flat_map(|t| t.iter())
            .map(|&v| 1.0 - (-beta * v.abs()).exp())
            .sum::<f64>()
}

/// alpha * sum_i |theta_i|.
pub fn l1_penalty(thetas: &[&Array2<f64>], alpha: f64) -> f64 {
    alpha * thetas.iter().flat_map(|t| t.iter()).map(|v| v.abs()).sum::<f64>()
}

/// Scalar PMMP objective over one parameter group:
/// alpha*sum(gamma) + base + sum(u*(theta-w*gamma)^2) + sum(u*w^2*gamma*(1-gamma)).
pub fn pmmp_objective(
    theta: &Array2<f64>,
    w: &Array2<f64>,
    gamma: &Array2<f64>,
    u: &Array2<f64>,
    alpha: f64,
    base_loss: f64,
) -> Result<f64, RegularizerError> {
    for &g in gamma.iter() {
        if !(0.0..=1.0).contains(&g) {
            return Err(RegularizerError::GateOutOfRange(g));
        }
    }
    for &uv in u.iter() {
        if uv < 0.0 {
            return Err(RegularizerError::NegativeMultiplier(uv));
        }
    }
    let gate_term = alpha * gamma.sum();
    let residual = theta - &(w * gamma);
    let constraint = (&residual * &residual * u).sum();
    let variance = (u * &(w * w) * gamma * &gamma.mapv(|g| 1.0 - g)).sum();
    Ok(gate_term + base_loss + constraint + variance)
}

/// DRR penalty recorded on a tape over several theta nodes.
pub fn drr_penalty_tape(
    tape: &mut Tape,
    thetas: &[Var],
    alpha: f64,
    beta: f64,
) -> Result<Var, AutodiffError> {
    let mut acc: Option<Var> = None;
    for &t in thetas {
        let a = tape.abs(t)?;
        let s = tape.scale(a, -beta)?;
        let e = tape.exp(s)?;
        let neg = tape.scale(e, -1.0)?;
        let one_minus = tape.add_const(neg, 1.0)?;
        let term = tape.sum(one_minus)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("at least one theta"), alpha)
}

/// l1 penalty recorded on a tape; subgradient 0 at exact zeros.
pub fn l1_penalty_tape(tape: &mut Tape, thetas: &[Var], alpha: f64) -> Result<Var, AutodiffError> {
    let mut acc: Option<Var> = None;
    for &t in thetas {
        let a = tape.abs(t)?;
        let term = tape.sum(a)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("at least one theta"), alpha)
}

/// PMMP penalty terms (without the base loss) on a tape for one group.
pub fn pmmp_penalty_tape(
    tape: &mut Tape,
    theta: Var,
    w: Var,
    gamma: Var,
    u: Var,
    alpha: f64,
) -> Result<Var, AutodiffError> {
    let gate_sum = tape.sum(gamma)?;
    let gate_term = tape.scale(gate_sum, alpha)?;
    let wg = tape.mul(w, gamma)?;
    let resid = tape.sub(theta, wg)?;
    let resid_sq = tape.square(resid)?;
    let constr = tape.mul(u, resid_sq)?;
    let constr_sum = tape.sum(constr)?;
    let w_sq = tape.square(w)?;
    let neg_g = tape.scale(gamma, -1.0)?;
    let one_minus_g = tape.add_const(neg_g, 1.0)?;
    let var_core = tape.mul(gamma, one_minus_g)?;
    let var_w = tape.mul(w_sq, var_core)?;
    let var_u = tape.mul(u, var_w)?;
    let var_sum = tape.sum(var_u)?;
    let partial = tape.add(gate_term, constr_sum)?;
    tape.add(partial, var_sum)
}

/// Clamp gates into [0,1] and multipliers to >= 0 on a whole model.
pub fn pmmp_project(model: &mut MaskedModel) {
    model.pmmp_project();
}
