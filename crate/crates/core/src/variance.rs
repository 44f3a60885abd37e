//! Sandwich variance for the stacked two-step estimator
//! (alpha0, alpha2, beta), Wald inference, and the standard error of the
//! complier effect delta.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::causal::{causal_delta, CausalFit};
use crate::compliance::{hess1, score1_subject, ClassProbabilities, ComplianceModelFit};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numerics::solve_linear;

/// Estimated covariance of (alpha0, alpha2, beta) with derived standard
/// errors and the standard error of delta = beta2 - beta1.
#[derive(Debug, Clone)]
pub struct SandwichCovariance {
    pub sigma: DMatrix<f64>,
    pub parameter_labels: Vec<String>,
    pub se: DVector<f64>,
    pub delta_se: f64,
}

/// One row of a Wald inference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub label: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

impl WaldRow {
    pub fn new(label: impl Into<String>, estimate: f64, std_err: f64) -> Self {
        let t = estimate / std_err;
        WaldRow {
            label: label.into(),
            estimate,
            std_err,
            t_statistic: t,
            p_value: normal_two_sided_p(t),
        }
    }
}

/// Two-sided p-value against the standard normal reference.
pub fn normal_two_sided_p(t: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(t.abs()))
}

/// Derivatives of a subject's weight vector with respect to (alpha0, alpha2).
///
/// Both matrices are 4 x p. They vanish when z != x because those weights
/// are constants.
pub fn dw_dalpha(
    z: bool,
    x: bool,
    probs: &ClassProbabilities,
    g: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = g.len();
    let mut d0 = DMatrix::zeros(4, p);
    let mut d2 = DMatrix::zeros(4, p);
    match (z, x) {
        (false, false) => {
            let prod = probs.pi_star_01_0 * probs.pi_star_01_1;
            for j in 0..p {
                d0[(0, j)] = prod * g[j];
                d0[(1, j)] = -prod * g[j];
            }
        }
        (true, true) => {
            let prod = probs.pi_star_12_1 * probs.pi_star_12_2;
            for j in 0..p {
                d2[(2, j)] = -prod * g[j];
                d2[(3, j)] = prod * g[j];
            }
        }
        _ => {}
    }
    (d0, d2)
}

/// Mixed second derivative of the step-2 log-likelihood with respect to
/// beta and the stacked (alpha0, alpha2), a 4 x 2p matrix.
///
/// Differentiating the beta-score a_h * r_i(m) * w_ih in alpha produces two
/// terms: the residual times dw/dalpha, and the residual's own curvature
/// through m = w'eta. Both are kept; the block is validated against finite
/// differences.
pub fn cross_block(step1: &ComplianceModelFit, step2: &CausalFit, dataset: &Dataset) -> DMatrix<f64> {
    let p = step1.params.dim();
    let eta = step2.params.eta();
    let a: [f64; 4] = std::array::from_fn(|h| eta[h] * (1.0 - eta[h]));
    let mut block = DMatrix::zeros(4, 2 * p);
    for (i, r) in dataset.records().iter().enumerate() {
        if !r.discordant() {
            continue;
        }
        let w = &step2.weights[i];
        let m = w.dot(&eta);
        let resid = if r.y2 { 1.0 / m } else { -1.0 / (1.0 - m) };
        let curv = if r.y2 {
            1.0 / (m * m)
        } else {
            1.0 / ((1.0 - m) * (1.0 - m))
        };
        let g = step1.design.row(i).transpose();
        let (dw0, dw2) = dw_dalpha(r.z, r.x, &step1.per_subject[i], &g);
        for j in 0..p {
            // dm/dalpha = eta' dw/dalpha
            let dm0: f64 = (0..4).map(|k| eta[k] * dw0[(k, j)]).sum();
            let dm2: f64 = (0..4).map(|k| eta[k] * dw2[(k, j)]).sum();
            for h in 0..4 {
                block[(h, j)] += a[h] * (resid * dw0[(h, j)] - curv * w.0[h] * dm0);
                block[(h, p + j)] += a[h] * (resid * dw2[(h, j)] - curv * w.0[h] * dm2);
            }
        }
    }
    block
}

/// Block lower-triangular Hessian of the stacked estimating equations:
/// step-1 Hessian on top, the cross block and step-2 Hessian below.
pub fn assemble_h(
    step1: &ComplianceModelFit,
    step2: &CausalFit,
    dataset: &Dataset,
) -> DMatrix<f64> {
    let p = step1.params.dim();
    let dim = 2 * p + 4;
    let z: Vec<bool> = dataset.records().iter().map(|r| r.z).collect();
    let x: Vec<bool> = dataset.records().iter().map(|r| r.x).collect();
    let h1 = hess1(&step1.params, &step1.design, &z, &x);
    let y2: Vec<bool> = dataset.records().iter().map(|r| r.y2).collect();
    let d: Vec<bool> = dataset.records().iter().map(|r| r.discordant()).collect();
    let (_, h2) = crate::causal::grad2_hess2(&step2.params, &step2.weights, &y2, &d);
    let cross = cross_block(step1, step2, dataset);

    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (2 * p, 2 * p)).copy_from(&h1);
    h.view_mut((2 * p, 0), (4, 2 * p)).copy_from(&cross);
    h.view_mut((2 * p, 2 * p), (4, 4)).copy_from(&h2);
    h
}

/// Sum of outer products of the per-subject stacked scores
/// (d l1i / d alpha0, d l1i / d alpha2, di * d l2i / d beta).
pub fn assemble_k(
    step1: &ComplianceModelFit,
    step2: &CausalFit,
    dataset: &Dataset,
) -> DMatrix<f64> {
    let p = step1.params.dim();
    let dim = 2 * p + 4;
    let z: Vec<bool> = dataset.records().iter().map(|r| r.z).collect();
    let x: Vec<bool> = dataset.records().iter().map(|r| r.x).collect();
    let mut k = DMatrix::zeros(dim, dim);
    let mut s = DVector::zeros(dim);
    for (i, r) in dataset.records().iter().enumerate() {
        let s1 = score1_subject(&step1.params, &step1.design, &z, &x, i);
        let s2 = crate::causal::score2_subject(
            &step2.params,
            &step2.weights[i],
            r.y2,
            r.discordant(),
        );
        s.rows_mut(0, 2 * p).copy_from(&s1);
        s.rows_mut(2 * p, 4).copy_from(&s2);
        k.ger(1.0, &s, &s, 1.0);
    }
    k
}

fn parameter_labels(step1: &ComplianceModelFit) -> Vec<String> {
    let mut labels = Vec::new();
    for l in &step1.design_labels {
        labels.push(format!("alpha0[{l}]"));
    }
    for l in &step1.design_labels {
        labels.push(format!("alpha2[{l}]"));
    }
    for h in 0..4 {
        labels.push(format!("beta{h}"));
    }
    labels
}

/// Sandwich covariance H^-1 K H^-T of the stacked estimator.
pub fn sandwich(
    step1: &ComplianceModelFit,
    step2: &CausalFit,
    dataset: &Dataset,
) -> Result<SandwichCovariance> {
    let h = assemble_h(step1, step2, dataset);
    let k = assemble_k(step1, step2, dataset);
    sandwich_from_parts(&h, &k, parameter_labels(step1))
}

/// Sandwich from pre-assembled H and K; exposed for block-level testing.
pub fn sandwich_from_parts(
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    parameter_labels: Vec<String>,
) -> Result<SandwichCovariance> {
    let dim = h.nrows();
    if parameter_labels.len() != dim || k.nrows() != dim || k.ncols() != dim {
        return Err(Error::Validation("sandwich dimension mismatch".into()));
    }
    // sigma = H^-1 K H^-T computed as solve(H, solve(H, K)^T)^T
    let hinv_k = solve_linear(h, k)?;
    let mut sigma = solve_linear(h, &hinv_k.transpose())?.transpose();
    // clean roundoff asymmetry
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = avg;
            sigma[(j, i)] = avg;
        }
    }
    let se = DVector::from_fn(dim, |i, _| sigma[(i, i)].max(0.0).sqrt());
    let b = dim - 4; // offset of the beta block
    let delta_var =
        sigma[(b + 1, b + 1)] + sigma[(b + 2, b + 2)] - 2.0 * sigma[(b + 1, b + 2)];
    Ok(SandwichCovariance {
        sigma,
        parameter_labels,
        se,
        delta_se: delta_var.max(0.0).sqrt(),
    })
}

impl SandwichCovariance {
    /// Variance block of the beta parameters.
    pub fn beta_block(&self) -> DMatrix<f64> {
        let b = self.sigma.nrows() - 4;
        self.sigma.view((b, b), (4, 4)).into_owned()
    }
}

/// Wald rows for every stacked parameter plus a final delta row when the
/// effect is estimable.
pub fn wald_table(
    estimates: &DVector<f64>,
    cov: &SandwichCovariance,
    step2: &CausalFit,
) -> Vec<WaldRow> {
    let mut rows: Vec<WaldRow> = estimates
        .iter()
        .zip(cov.parameter_labels.iter())
        .zip(cov.se.iter())
        .map(|((&est, label), &se)| WaldRow::new(label.clone(), est, se))
        .collect();
    if step2.delta.is_some() {
        rows.push(WaldRow::new(
            "delta",
            causal_delta(&step2.params),
            cov.delta_se,
        ));
    }
    rows
}

/// Stacked estimate vector (alpha0, alpha2, beta) matching the sandwich
/// parameter ordering.
pub fn stacked_estimates(step1: &ComplianceModelFit, step2: &CausalFit) -> DVector<f64> {
    let p = step1.params.dim();
    let mut out = DVector::zeros(2 * p + 4);
    out.rows_mut(0, 2 * p).copy_from(&step1.params.to_stacked());
    for h in 0..4 {
        out[2 * p + h] = step2.params.beta[h];
    }
    out
}
