//! Comparison estimators: conditional logistic fits of the post outcome on
//! received treatment, assigned treatment, and assigned treatment among
//! protocol-adherent subjects, all restricted to discordant pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numerics::{newton_maximize, solve_linear, NewtonSettings};
use crate::variance::normal_two_sided_p;

/// Which baseline coding was fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Regress on received treatment x over all discordant subjects.
    TreatmentReceived,
    /// Regress on assigned arm z over all discordant subjects.
    IntentionToTreat,
    /// Regress on z restricted to subjects with z = x.
    PerProtocol,
}

impl BaselineKind {
    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::TreatmentReceived => "treatment-received",
            BaselineKind::IntentionToTreat => "intention-to-treat",
            BaselineKind::PerProtocol => "per-protocol",
        }
    }
}

/// Point estimate and model-based inference for one baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub delta_hat: f64,
    pub std_err: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// One baseline fit; `estimate` is None when the discordant 2x2 table has
/// an empty cell and the slope does not exist.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineFit {
    pub kind: BaselineKind,
    pub estimate: Option<BaselineEstimate>,
    pub n_used: usize,
}

impl BaselineFit {
    pub fn boundary(&self) -> bool {
        self.estimate.is_none()
    }
}

/// Intercept + slope logistic regression of y2 on a binary regressor over
/// the discordant subset, with the slope standard error taken from the
/// inverse observed information.
pub fn conditional_logistic(
    y2: &[bool],
    regressor: &[bool],
    d: &[bool],
) -> Result<(Option<(f64, f64)>, usize)> {
    if y2.len() != regressor.len() || y2.len() != d.len() {
        return Err(Error::Validation("conditional_logistic length mismatch".into()));
    }
    let idx: Vec<usize> = (0..y2.len()).filter(|&i| d[i]).collect();
    let n_used = idx.len();

    // 2x2 cell counts over discordant subjects: [regressor][y2]
    let mut cells = [[0usize; 2]; 2];
    for &i in &idx {
        cells[regressor[i] as usize][y2[i] as usize] += 1;
    }
    if cells.iter().flatten().any(|&c| c == 0) {
        return Ok((None, n_used));
    }

    let settings = NewtonSettings::default();
    let objective = |theta: &DVector<f64>| {
        let (b0, b1) = (theta[0], theta[1]);
        let mut value = 0.0;
        let mut grad = DVector::zeros(2);
        let mut hess = DMatrix::zeros(2, 2);
        for &i in &idx {
            let r = if regressor[i] { 1.0 } else { 0.0 };
            let lin = b0 + b1 * r;
            let p = crate::causal::expit(lin);
            let y = if y2[i] { 1.0 } else { 0.0 };
            value += y * lin - (lin.max(0.0) + (-lin.abs()).exp().ln_1p());
            grad[0] += y - p;
            grad[1] += (y - p) * r;
            let w = p * (1.0 - p);
            hess[(0, 0)] -= w;
            hess[(0, 1)] -= w * r;
            hess[(1, 0)] -= w * r;
            hess[(1, 1)] -= w * r * r;
        }
        (value, grad, hess)
    };
    let newton = newton_maximize(objective, &DVector::zeros(2), &settings)?;
    if !newton.converged {
        return Err(Error::Convergence(
            "baseline logistic fit did not converge".into(),
        ));
    }
    let info_inv = solve_linear(
        &(-&newton.hessian_at_optimum),
        &DMatrix::identity(2, 2),
    )?;
    let slope = newton.argmax[1];
    let se = info_inv[(1, 1)].max(0.0).sqrt();
    Ok((Some((slope, se)), n_used))
}

fn baseline_fit(kind: BaselineKind, y2: &[bool], regressor: &[bool], d: &[bool]) -> Result<BaselineFit> {
    let (est, n_used) = conditional_logistic(y2, regressor, d)?;
    Ok(BaselineFit {
        kind,
        estimate: est.map(|(slope, se)| BaselineEstimate {
            delta_hat: slope,
            std_err: se,
            t_statistic: slope / se,
            p_value: normal_two_sided_p(slope / se),
        }),
        n_used,
    })
}

/// Runs the three baseline analyses on a dataset.
pub fn run_baselines(dataset: &Dataset) -> Result<Vec<BaselineFit>> {
    let y2: Vec<bool> = dataset.records().iter().map(|r| r.y2).collect();
    let z: Vec<bool> = dataset.records().iter().map(|r| r.z).collect();
    let x: Vec<bool> = dataset.records().iter().map(|r| r.x).collect();
    let d: Vec<bool> = dataset.records().iter().map(|r| r.discordant()).collect();
    // per-protocol keeps only subjects whose receipt matched assignment
    let d_pp: Vec<bool> = dataset
        .records()
        .iter()
        .map(|r| r.discordant() && r.z == r.x)
        .collect();

    Ok(vec![
        baseline_fit(BaselineKind::TreatmentReceived, &y2, &x, &d)?,
        baseline_fit(BaselineKind::IntentionToTreat, &y2, &z, &d)?,
        baseline_fit(BaselineKind::PerProtocol, &y2, &z, &d_pp)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SubjectRecord;
    use approx::assert_relative_eq;

    /// Builds vectors with the given discordant 2x2 counts
    /// (n00, n01, n10, n11) indexed as n[regressor][y2].
    fn from_counts(n00: usize, n01: usize, n10: usize, n11: usize) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
        let mut y2 = Vec::new();
        let mut reg = Vec::new();
        for (r, y, n) in [
            (false, false, n00),
            (false, true, n01),
            (true, false, n10),
            (true, true, n11),
        ] {
            for _ in 0..n {
                reg.push(r);
                y2.push(y);
            }
        }
        let d = vec![true; y2.len()];
        (y2, reg, d)
    }

    #[test]
    fn balanced_table_gives_zero_slope() {
        let (y2, reg, d) = from_counts(10, 10, 10, 10);
        let (est, n_used) = conditional_logistic(&y2, &reg, &d).unwrap();
        let (slope, se) = est.unwrap();
        assert!(slope.abs() < 1e-9);
        assert_relative_eq!(se, (4.0f64 / 10.0).sqrt(), epsilon = 1e-6);
        assert_eq!(n_used, 40);
    }

    #[test]
    fn slope_equals_log_cross_ratio() {
        let (y2, reg, d) = from_counts(20, 10, 10, 20);
        let (est, _) = conditional_logistic(&y2, &reg, &d).unwrap();
        let (slope, _) = est.unwrap();
        // log((n11/n10) / (n01/n00)) = log(4)
        assert_relative_eq!(slope, 4.0f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn empty_cell_reports_boundary() {
        let (y2, reg, d) = from_counts(0, 0, 8, 5);
        let (est, n_used) = conditional_logistic(&y2, &reg, &d).unwrap();
        assert!(est.is_none());
        assert_eq!(n_used, 13);
    }

    fn perfect_compliance_dataset() -> Dataset {
        let mut records = Vec::new();
        for i in 0..60 {
            let z = i % 2 == 0;
            let y1 = i % 3 == 0;
            let y2 = (i % 5) < 2;
            records.push(SubjectRecord {
                id: i.to_string(),
                y1,
                y2,
                z,
                x: z,
                covariates: vec![],
            });
        }
        Dataset::new(records, vec![]).unwrap()
    }

    #[test]
    fn perfect_compliance_makes_all_baselines_agree() {
        let ds = perfect_compliance_dataset();
        let fits = run_baselines(&ds).unwrap();
        let slopes: Vec<f64> = fits
            .iter()
            .map(|f| f.estimate.unwrap().delta_hat)
            .collect();
        assert!((slopes[0] - slopes[1]).abs() < 1e-10);
        assert!((slopes[1] - slopes[2]).abs() < 1e-10);
        assert_eq!(fits[0].n_used, fits[2].n_used);
    }

    #[test]
    fn all_concordant_dataset_reports_empty_baselines() {
        let mut records = Vec::new();
        for i in 0..20 {
            let z = i % 2 == 0;
            let x = i % 4 < 2;
            records.push(SubjectRecord {
                id: i.to_string(),
                y1: true,
                y2: true,
                z,
                x,
                covariates: vec![],
            });
        }
        let ds = Dataset::new(records, vec![]).unwrap();
        let fits = run_baselines(&ds).unwrap();
        for f in &fits {
            assert_eq!(f.n_used, 0);
            assert!(f.boundary());
        }
    }

    #[test]
    fn per_protocol_uses_no_more_subjects_than_itt() {
        let mut records = Vec::new();
        for i in 0..50 {
            let z = i % 2 == 0;
            let x = if i % 5 == 0 { !z } else { z };
            records.push(SubjectRecord {
                id: i.to_string(),
                y1: i % 3 == 0,
                y2: i % 7 < 3,
                z,
                x,
                covariates: vec![],
            });
        }
        let ds = Dataset::new(records, vec![]).unwrap();
        let fits = run_baselines(&ds).unwrap();
        let itt = fits.iter().find(|f| f.kind == BaselineKind::IntentionToTreat).unwrap();
        let pp = fits.iter().find(|f| f.kind == BaselineKind::PerProtocol).unwrap();
        assert!(pp.n_used <= itt.n_used);
    }
}
