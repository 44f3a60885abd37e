//! Step 2 of the estimator: the weighted conditional log-likelihood over
//! discordant outcome pairs, maximized in the log-odds parametrization, and
//! the complier causal effect delta.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compliance::{ClassProbabilities, ComplianceModelFit};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numerics::{newton_maximize, NewtonResult, NewtonSettings};

/// Absolute log-odds beyond which a component is treated as having diverged
/// to the boundary (eta within ~3e-7 of 0 or 1).
pub const BOUNDARY_LOGIT: f64 = 15.0;

/// The four causal log-odds shifts: (control on never-takers, control on
/// compliers, treatment on compliers, treatment on always-takers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalParams {
    pub beta: [f64; 4],
}

impl CausalParams {
    pub fn new(beta: [f64; 4]) -> Self {
        CausalParams { beta }
    }

    /// Success probabilities eta_h = expit(beta_h).
    pub fn eta(&self) -> [f64; 4] {
        self.beta.map(expit)
    }
}

pub fn expit(b: f64) -> f64 {
    if b >= 0.0 {
        1.0 / (1.0 + (-b).exp())
    } else {
        let e = b.exp();
        e / (1.0 + e)
    }
}

/// Mixing weights over the four causal cells for one subject. Entries are
/// nonnegative and sum to one; the support is fixed by the (z, x) pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub [f64; 4]);

impl WeightVector {
    pub fn dot(&self, eta: &[f64; 4]) -> f64 {
        self.0
            .iter()
            .zip(eta.iter())
            .map(|(w, e)| w * e)
            .sum()
    }
}

/// Weight vector for a subject given its arm, receipt, and step-1 class
/// probabilities. Subjects with z != x reveal their class, so their weights
/// are fixed basis vectors independent of step 1.
pub fn build_weight_vector(z: bool, x: bool, probs: &ClassProbabilities) -> WeightVector {
    match (z, x) {
        (false, false) => WeightVector([probs.pi_star_01_0, probs.pi_star_01_1, 0.0, 0.0]),
        (false, true) => WeightVector([0.0, 0.0, 0.0, 1.0]),
        (true, false) => WeightVector([1.0, 0.0, 0.0, 0.0]),
        (true, true) => WeightVector([0.0, 0.0, probs.pi_star_12_1, probs.pi_star_12_2]),
    }
}

/// Weighted conditional log-likelihood in the eta parametrization;
/// concordant subjects (d = 0) contribute nothing.
pub fn loglik2(eta: &[f64; 4], weights: &[WeightVector], y2: &[bool], d: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..weights.len() {
        if !d[i] {
            continue;
        }
        let m = weights[i].dot(eta);
        total += if y2[i] { m.ln() } else { (1.0 - m).ln() };
    }
    total
}

/// Score of the per-subject conditional log-likelihood with respect to beta,
/// already including the discordance indicator.
pub fn score2_subject(
    beta: &CausalParams,
    weight: &WeightVector,
    y2: bool,
    d: bool,
) -> DVector<f64> {
    let mut out = DVector::zeros(4);
    if !d {
        return out;
    }
    let eta = beta.eta();
    let m = weight.dot(&eta);
    let resid = if y2 { 1.0 / m } else { -1.0 / (1.0 - m) };
    for h in 0..4 {
        let a = eta[h] * (1.0 - eta[h]);
        out[h] = a * resid * weight.0[h];
    }
    out
}

/// Gradient and Hessian of the step-2 log-likelihood with respect to beta,
/// by the chain rule through eta.
pub fn grad2_hess2(
    beta: &CausalParams,
    weights: &[WeightVector],
    y2: &[bool],
    d: &[bool],
) -> (DVector<f64>, DMatrix<f64>) {
    let eta = beta.eta();
    let a: [f64; 4] = std::array::from_fn(|h| eta[h] * (1.0 - eta[h]));
    let b: [f64; 4] = std::array::from_fn(|h| a[h] * (1.0 - 2.0 * eta[h]));

    // d l2* / d eta and d^2 l2* / d eta d eta'
    let mut grad_eta: DVector<f64> = DVector::zeros(4);
    let mut hess_eta: DMatrix<f64> = DMatrix::zeros(4, 4);
    for i in 0..weights.len() {
        if !d[i] {
            continue;
        }
        let w = &weights[i].0;
        let m = weights[i].dot(&eta);
        let resid = if y2[i] { 1.0 / m } else { -1.0 / (1.0 - m) };
        let curv = if y2[i] {
            1.0 / (m * m)
        } else {
            1.0 / ((1.0 - m) * (1.0 - m))
        };
        for h in 0..4 {
            grad_eta[h] += resid * w[h];
            for k in 0..4 {
                hess_eta[(h, k)] -= curv * w[h] * w[k];
            }
        }
    }

    let mut grad: DVector<f64> = DVector::zeros(4);
    let mut hess: DMatrix<f64> = DMatrix::zeros(4, 4);
    for h in 0..4 {
        grad[h] = a[h] * grad_eta[h];
        for k in 0..4 {
            hess[(h, k)] = a[h] * a[k] * hess_eta[(h, k)];
        }
        hess[(h, h)] += b[h] * grad_eta[h];
    }
    (grad, hess)
}

/// Fitted step-2 model.
#[derive(Debug, Clone)]
pub struct CausalFit {
    pub params: CausalParams,
    /// eta_h = expit(beta_h).
    pub eta: [f64; 4],
    /// Complier causal effect beta2 - beta1; None when either component hit
    /// the boundary or had no informative discordant subjects.
    pub delta: Option<f64>,
    pub n_discordant: usize,
    pub newton: NewtonResult,
    /// Component h diverged past |beta_h| > 15.
    pub boundary_flags: [bool; 4],
    /// Component h had at least one informative discordant subject.
    pub identified: [bool; 4],
    /// Per-subject weight vectors used by the fit; kept for the sandwich.
    pub weights: Vec<WeightVector>,
}

impl CausalFit {
    /// Count of discordant subjects in each (z, x) cell, indexed [z][x].
    fn discordant_cells(dataset: &Dataset) -> [[usize; 2]; 2] {
        let mut cells = [[0usize; 2]; 2];
        for r in dataset.records() {
            if r.discordant() {
                cells[r.z as usize][r.x as usize] += 1;
            }
        }
        cells
    }
}

/// Complier causal effect: the treatment-vs-control log-odds shift for
/// compliers.
pub fn causal_delta(beta: &CausalParams) -> f64 {
    beta.beta[2] - beta.beta[1]
}

/// Maximizes the weighted conditional log-likelihood given the step-1 fit.
///
/// Components whose mixture cell is populated but whose anchoring pure cell
/// is empty are not separately identified and raise an error; components
/// with no informative discordant subjects at all are left at zero and
/// flagged instead.
pub fn fit_step2(
    dataset: &Dataset,
    step1: &ComplianceModelFit,
    settings: &NewtonSettings,
) -> Result<CausalFit> {
    if step1.per_subject.len() != dataset.len() {
        return Err(Error::Validation(format!(
            "step-1 fit covers {} subjects but the dataset has {}",
            step1.per_subject.len(),
            dataset.len()
        )));
    }

    let cells = CausalFit::discordant_cells(dataset);
    let (d00, d01, d10, d11) = (cells[0][0], cells[0][1], cells[1][0], cells[1][1]);
    if d00 > 0 && d10 == 0 {
        return Err(Error::Identification(
            "beta0 is not identified: discordant z=0,x=0 subjects mix never-takers and \
             compliers but there are no discordant z=1,x=0 subjects to anchor beta0"
                .into(),
        ));
    }
    if d11 > 0 && d01 == 0 {
        return Err(Error::Identification(
            "beta3 is not identified: discordant z=1,x=1 subjects mix compliers and \
             always-takers but there are no discordant z=0,x=1 subjects to anchor beta3"
                .into(),
        ));
    }
    let identified = [d10 > 0, d00 > 0, d11 > 0, d01 > 0];

    let weights: Vec<WeightVector> = dataset
        .records()
        .iter()
        .zip(step1.per_subject.iter())
        .map(|(r, probs)| build_weight_vector(r.z, r.x, probs))
        .collect();
    let y2: Vec<bool> = dataset.records().iter().map(|r| r.y2).collect();
    let d: Vec<bool> = dataset.records().iter().map(|r| r.discordant()).collect();
    let n_discordant = d.iter().filter(|&&di| di).count();

    let objective = |theta: &DVector<f64>| {
        let beta = CausalParams::new([theta[0], theta[1], theta[2], theta[3]]);
        let value = loglik2(&beta.eta(), &weights, &y2, &d);
        let (grad, hess) = grad2_hess2(&beta, &weights, &y2, &d);
        (value, grad, hess)
    };
    let newton = newton_maximize(objective, &DVector::zeros(4), settings)?;
    if !newton.converged {
        return Err(Error::Convergence(format!(
            "step-2 Newton stopped after {} iterations with gradient norm {:.3e}",
            newton.iterations, newton.gradient_norm
        )));
    }

    let params = CausalParams::new([
        newton.argmax[0],
        newton.argmax[1],
        newton.argmax[2],
        newton.argmax[3],
    ]);
    let boundary_flags: [bool; 4] = params.beta.map(|b| b.abs() > BOUNDARY_LOGIT);
    let delta_estimable =
        identified[1] && identified[2] && !boundary_flags[1] && !boundary_flags[2];
    let delta = delta_estimable.then(|| causal_delta(&params));

    Ok(CausalFit {
        eta: params.eta(),
        params,
        delta,
        n_discordant,
        newton,
        boundary_flags,
        identified,
        weights,
    })
}
