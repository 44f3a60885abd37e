//! Step 1 of the estimator: a multinomial logit for compliance-class
//! membership (compliers as reference category), fitted by maximum
//! likelihood from the partially observed classes, plus BIC model selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_design, Dataset, DesignSpec};
use crate::numerics::{newton_maximize, NewtonResult, NewtonSettings};

/// Coefficients of the class-membership model: `alpha0` drives the
/// never-taker log-odds against compliers, `alpha2` the always-taker
/// log-odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceParams {
    pub alpha0: DVector<f64>,
    pub alpha2: DVector<f64>,
}

impl ComplianceParams {
    pub fn new(alpha0: DVector<f64>, alpha2: DVector<f64>) -> Result<Self> {
        if alpha0.len() != alpha2.len() {
            return Err(Error::Validation(format!(
                "alpha0 has length {} but alpha2 has length {}",
                alpha0.len(),
                alpha2.len()
            )));
        }
        if alpha0.iter().chain(alpha2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite compliance coefficient".into()));
        }
        Ok(ComplianceParams { alpha0, alpha2 })
    }

    pub fn dim(&self) -> usize {
        self.alpha0.len()
    }

    /// Packs (alpha0, alpha2) into one stacked vector for the optimizer.
    pub fn to_stacked(&self) -> DVector<f64> {
        let p = self.dim();
        let mut out = DVector::zeros(2 * p);
        out.rows_mut(0, p).copy_from(&self.alpha0);
        out.rows_mut(p, p).copy_from(&self.alpha2);
        out
    }

    pub fn from_stacked(stacked: &DVector<f64>) -> Self {
        let p = stacked.len() / 2;
        ComplianceParams {
            alpha0: stacked.rows(0, p).into_owned(),
            alpha2: stacked.rows(p, p).into_owned(),
        }
    }
}

/// Class probabilities for one subject, together with the ratio
/// probabilities conditional on the two observable arm/receipt mixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    /// pi(0|v): never-taker.
    pub pi0: f64,
    /// pi(1|v): complier.
    pub pi1: f64,
    /// pi(2|v): always-taker.
    pub pi2: f64,
    /// pi(0|v) / (pi0 + pi1): never-taker given not an always-taker.
    pub pi_star_01_0: f64,
    /// pi(1|v) / (pi0 + pi1).
    pub pi_star_01_1: f64,
    /// pi(1|v) / (pi1 + pi2).
    pub pi_star_12_1: f64,
    /// pi(2|v) / (pi1 + pi2): always-taker given not a never-taker.
    pub pi_star_12_2: f64,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^s), safe against overflow.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Log-space cell probabilities for the four observation patterns of the
/// step-1 likelihood, as functions of the class scores (s0, s2).
#[derive(Debug, Clone, Copy)]
struct LogCells {
    /// log(pi0 + pi1)
    log_pi01: f64,
    /// log pi2
    log_pi2: f64,
    /// log pi0
    log_pi0: f64,
    /// log(pi1 + pi2)
    log_pi12: f64,
}

/// log(e^{s0} + 1 + e^{s2}) via log-sum-exp.
fn log_denominator(s0: f64, s2: f64) -> f64 {
    let m = s0.max(0.0).max(s2);
    m + ((s0 - m).exp() + (-m).exp() + (s2 - m).exp()).ln()
}

fn log_cells(s0: f64, s2: f64) -> LogCells {
    let log_d = log_denominator(s0, s2);
    LogCells {
        log_pi01: softplus(s0) - log_d,
        log_pi2: s2 - log_d,
        log_pi0: s0 - log_d,
        log_pi12: softplus(s2) - log_d,
    }
}

impl ClassProbabilities {
    /// Evaluates the multinomial-logit probabilities from the class scores
    /// s0 = g'alpha0 and s2 = g'alpha2, entirely in log space.
    pub fn from_scores(s0: f64, s2: f64) -> Self {
        let log_d = log_denominator(s0, s2);
        ClassProbabilities {
            pi0: (s0 - log_d).exp(),
            pi1: (-log_d).exp(),
            pi2: (s2 - log_d).exp(),
            pi_star_01_0: sigmoid(s0),
            pi_star_01_1: sigmoid(-s0),
            pi_star_12_1: sigmoid(-s2),
            pi_star_12_2: sigmoid(s2),
        }
    }
}

/// Class probabilities at one covariate design row `g`.
pub fn class_probabilities(params: &ComplianceParams, g: &DVector<f64>) -> ClassProbabilities {
    ClassProbabilities::from_scores(params.alpha0.dot(g), params.alpha2.dot(g))
}

fn check_dims(params: &ComplianceParams, design: &DMatrix<f64>, z: &[bool], x: &[bool]) {
    assert_eq!(params.dim(), design.ncols(), "design width != alpha length");
    assert_eq!(design.nrows(), z.len());
    assert_eq!(design.nrows(), x.len());
}

fn scores_at(params: &ComplianceParams, design: &DMatrix<f64>, i: usize) -> (f64, f64) {
    let row = design.row(i);
    let mut s0 = 0.0;
    let mut s2 = 0.0;
    for j in 0..design.ncols() {
        s0 += row[j] * params.alpha0[j];
        s2 += row[j] * params.alpha2[j];
    }
    (s0, s2)
}

/// Step-1 log-likelihood over the four observed (z, x) patterns.
pub fn loglik1(params: &ComplianceParams, design: &DMatrix<f64>, z: &[bool], x: &[bool]) -> f64 {
    check_dims(params, design, z, x);
    let mut total = 0.0;
    for i in 0..design.nrows() {
        let (s0, s2) = scores_at(params, design, i);
        let cells = log_cells(s0, s2);
        total += match (z[i], x[i]) {
            (false, false) => cells.log_pi01,
            (false, true) => cells.log_pi2,
            (true, false) => cells.log_pi0,
            (true, true) => cells.log_pi12,
        };
    }
    total
}

/// Per-subject score contribution, stacked as (d/d alpha0, d/d alpha2).
pub fn score1_subject(
    params: &ComplianceParams,
    design: &DMatrix<f64>,
    z: &[bool],
    x: &[bool],
    i: usize,
) -> DVector<f64> {
    let p = params.dim();
    let (s0, s2) = scores_at(params, design, i);
    let probs = ClassProbabilities::from_scores(s0, s2);
    let coef0 = match (z[i], x[i]) {
        (false, false) => probs.pi_star_01_0 - probs.pi0,
        (true, false) => 1.0 - probs.pi0,
        _ => -probs.pi0,
    };
    let coef2 = match (z[i], x[i]) {
        (true, true) => probs.pi_star_12_2 - probs.pi2,
        (false, true) => 1.0 - probs.pi2,
        _ => -probs.pi2,
    };
    let mut out = DVector::zeros(2 * p);
    for j in 0..p {
        out[j] = coef0 * design[(i, j)];
        out[p + j] = coef2 * design[(i, j)];
    }
    out
}

/// Gradient of [`loglik1`], stacked as (d/d alpha0, d/d alpha2).
pub fn grad1(
    params: &ComplianceParams,
    design: &DMatrix<f64>,
    z: &[bool],
    x: &[bool],
) -> DVector<f64> {
    check_dims(params, design, z, x);
    let mut grad = DVector::zeros(2 * params.dim());
    for i in 0..design.nrows() {
        grad += score1_subject(params, design, z, x, i);
    }
    grad
}

/// Hessian of [`loglik1`] in the stacked (alpha0, alpha2) coordinates.
pub fn hess1(
    params: &ComplianceParams,
    design: &DMatrix<f64>,
    z: &[bool],
    x: &[bool],
) -> DMatrix<f64> {
    check_dims(params, design, z, x);
    let p = params.dim();
    let mut h00 = DMatrix::zeros(p, p);
    let mut h02 = DMatrix::zeros(p, p);
    let mut h22 = DMatrix::zeros(p, p);
    for i in 0..design.nrows() {
        let (s0, s2) = scores_at(params, design, i);
        let probs = ClassProbabilities::from_scores(s0, s2);
        let mix00 = if !z[i] && !x[i] {
            probs.pi_star_01_0 * probs.pi_star_01_1
        } else {
            0.0
        };
        let mix22 = if z[i] && x[i] {
            probs.pi_star_12_2 * probs.pi_star_12_1
        } else {
            0.0
        };
        let w00 = mix00 - probs.pi0 * (1.0 - probs.pi0);
        let w02 = probs.pi0 * probs.pi2;
        let w22 = mix22 - probs.pi2 * (1.0 - probs.pi2);
        for a in 0..p {
            let ga = design[(i, a)];
            for b in 0..p {
                let gg = ga * design[(i, b)];
                h00[(a, b)] += w00 * gg;
                h02[(a, b)] += w02 * gg;
                h22[(a, b)] += w22 * gg;
            }
        }
    }
    let mut hess = DMatrix::zeros(2 * p, 2 * p);
    hess.view_mut((0, 0), (p, p)).copy_from(&h00);
    hess.view_mut((0, p), (p, p)).copy_from(&h02);
    hess.view_mut((p, 0), (p, p)).copy_from(&h02.transpose());
    hess.view_mut((p, p), (p, p)).copy_from(&h22);
    hess
}

/// Fitted step-1 model.
#[derive(Debug, Clone)]
pub struct ComplianceModelFit {
    pub params: ComplianceParams,
    pub per_subject: Vec<ClassProbabilities>,
    pub loglik: f64,
    pub bic: f64,
    pub newton: NewtonResult,
    /// Design matrix the fit used; kept for the sandwich assembly.
    pub design: DMatrix<f64>,
    pub design_labels: Vec<String>,
    pub spec: DesignSpec,
}

/// Errors out unless both non-compliance cells (z=1,x=0 and z=0,x=1) are
/// populated; without them the class coefficients diverge.
fn check_identification(dataset: &Dataset) -> Result<()> {
    let counts = dataset.zx_counts();
    if counts[1][0] == 0 {
        return Err(Error::Identification(
            "no subjects with z=1, x=0: never-taker prevalence is not identified".into(),
        ));
    }
    if counts[0][1] == 0 {
        return Err(Error::Identification(
            "no subjects with z=0, x=1: always-taker prevalence is not identified".into(),
        ));
    }
    Ok(())
}

/// Maximum-likelihood fit of the compliance-class model.
pub fn fit_step1(
    dataset: &Dataset,
    spec: &DesignSpec,
    settings: &NewtonSettings,
) -> Result<ComplianceModelFit> {
    check_identification(dataset)?;
    let design = build_design(dataset, spec)?;
    let z: Vec<bool> = dataset.records().iter().map(|r| r.z).collect();
    let x: Vec<bool> = dataset.records().iter().map(|r| r.x).collect();
    let p = design.matrix.ncols();

    let objective = |theta: &DVector<f64>| {
        let params = ComplianceParams::from_stacked(theta);
        (
            loglik1(&params, &design.matrix, &z, &x),
            grad1(&params, &design.matrix, &z, &x),
            hess1(&params, &design.matrix, &z, &x),
        )
    };
    let newton = newton_maximize(objective, &DVector::zeros(2 * p), settings)?;
    if !newton.converged {
        return Err(Error::Convergence(format!(
            "step-1 Newton stopped after {} iterations with gradient norm {:.3e}",
            newton.iterations, newton.gradient_norm
        )));
    }

    let params = ComplianceParams::from_stacked(&newton.argmax);
    let per_subject: Vec<ClassProbabilities> = (0..dataset.len())
        .map(|i| {
            let (s0, s2) = scores_at(&params, &design.matrix, i);
            ClassProbabilities::from_scores(s0, s2)
        })
        .collect();
    let loglik = newton.objective;
    let k = 2 * p;
    let bic = -2.0 * loglik + k as f64 * (dataset.len() as f64).ln();

    Ok(ComplianceModelFit {
        params,
        per_subject,
        loglik,
        bic,
        newton,
        design: design.matrix,
        design_labels: design.labels,
        spec: spec.clone(),
    })
}

/// Candidate that could not be fitted during BIC selection.
#[derive(Debug)]
pub struct SkippedSpec {
    pub spec: DesignSpec,
    pub reason: String,
}

/// Result of BIC model selection: fits ranked by ascending BIC plus the
/// candidates that failed identification or convergence.
#[derive(Debug)]
pub struct BicSelection {
    pub ranked: Vec<ComplianceModelFit>,
    pub skipped: Vec<SkippedSpec>,
}

impl BicSelection {
    pub fn best(&self) -> &ComplianceModelFit {
        &self.ranked[0]
    }
}

/// Fits every candidate design and ranks the successes by BIC.
pub fn bic_select(
    dataset: &Dataset,
    candidates: &[DesignSpec],
    settings: &NewtonSettings,
) -> Result<BicSelection> {
    if candidates.is_empty() {
        return Err(Error::Validation("no candidate design specs".into()));
    }
    let mut ranked = Vec::new();
    let mut skipped = Vec::new();
    for spec in candidates {
        match fit_step1(dataset, spec, settings) {
            Ok(fit) => ranked.push(fit),
            Err(e) => skipped.push(SkippedSpec {
                spec: spec.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if ranked.is_empty() {
        return Err(Error::Identification(format!(
            "all {} candidate specs failed to fit",
            candidates.len()
        )));
    }
    ranked.sort_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap());
    Ok(BicSelection { ranked, skipped })
}
