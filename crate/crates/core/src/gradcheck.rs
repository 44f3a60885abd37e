//! Finite-difference self-checks for every analytic derivative in the
//! pipeline, run at randomized parameter/data configurations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::causal::{build_weight_vector, grad2_hess2, CausalFit, CausalParams, WeightVector};
use crate::compliance::{
    class_probabilities, grad1, hess1, loglik1, ComplianceModelFit, ComplianceParams,
};
use crate::model::{Dataset, DesignSpec, SubjectRecord};
use crate::numerics::{
    finite_diff_jacobian, max_rel_error, NewtonResult,
};
use crate::sim::derive_seed;
use crate::variance::{cross_block, dw_dalpha};

/// Worst relative error observed for one derivative block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub worst_rel_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Outcome of the full derivative suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub configurations: usize,
    pub subjects_per_configuration: usize,
    pub checks: Vec<CheckResult>,
    pub vacuous: bool,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "derivative checks: {} configurations x {} subjects (seed {})",
            self.configurations, self.subjects_per_configuration, self.seed
        )
        .unwrap();
        if self.vacuous {
            writeln!(out, "warning: zero subjects requested; checks are vacuous").unwrap();
        }
        for c in &self.checks {
            writeln!(
                out,
                "{:<12} worst relative error {:>12.3e}  (threshold {:.0e})  {}",
                c.name,
                c.worst_rel_error,
                c.threshold,
                if c.pass { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

const THRESHOLD: f64 = 1e-5;

struct Config {
    dataset: Dataset,
    design: DMatrix<f64>,
    alpha: ComplianceParams,
    beta: CausalParams,
}

fn random_config(seed: u64, n: usize) -> Config {
    let mut rng = StdRng::seed_from_u64(seed);
    let p = rng.gen_range(1..=3usize);
    let mut records = Vec::with_capacity(n);
    let mut design = DMatrix::zeros(n, p);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        let mut covariates = Vec::new();
        for j in 1..p {
            let v = rng.gen_range(-2.0..2.0);
            design[(i, j)] = v;
            covariates.push(v);
        }
        let y1 = rng.gen_bool(0.5);
        let y2 = rng.gen_bool(0.5);
        records.push(SubjectRecord {
            id: i.to_string(),
            y1,
            y2,
            z: rng.gen_bool(0.5),
            x: rng.gen_bool(0.5),
            covariates,
        });
    }
    let covariate_names: Vec<String> = (1..p).map(|j| format!("v{j}")).collect();
    let alpha = ComplianceParams::new(
        DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)),
        DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)),
    )
    .unwrap();
    let beta = CausalParams::new(std::array::from_fn(|_| rng.gen_range(-1.5..1.5)));
    Config {
        dataset: Dataset::new(records, covariate_names).expect("nonempty by construction"),
        design,
        alpha,
        beta,
    }
}

/// Step-1 state at arbitrary (not fitted) parameters, for derivative checks.
fn synthetic_step1(config: &Config) -> ComplianceModelFit {
    let per_subject = (0..config.dataset.len())
        .map(|i| class_probabilities(&config.alpha, &config.design.row(i).transpose()))
        .collect();
    ComplianceModelFit {
        params: config.alpha.clone(),
        per_subject,
        loglik: 0.0,
        bic: 0.0,
        newton: empty_newton(2 * config.alpha.dim()),
        design: config.design.clone(),
        design_labels: (0..config.design.ncols()).map(|j| format!("c{j}")).collect(),
        spec: DesignSpec::intercept_only(),
    }
}

fn synthetic_step2(config: &Config, step1: &ComplianceModelFit) -> CausalFit {
    let weights: Vec<WeightVector> = config
        .dataset
        .records()
        .iter()
        .zip(step1.per_subject.iter())
        .map(|(r, probs)| build_weight_vector(r.z, r.x, probs))
        .collect();
    CausalFit {
        params: config.beta,
        eta: config.beta.eta(),
        delta: Some(crate::causal::causal_delta(&config.beta)),
        n_discordant: config.dataset.n_discordant(),
        newton: empty_newton(4),
        boundary_flags: [false; 4],
        identified: [true; 4],
        weights,
    }
}

fn empty_newton(dim: usize) -> NewtonResult {
    NewtonResult {
        argmax: DVector::zeros(dim),
        objective: 0.0,
        gradient_norm: 0.0,
        iterations: 0,
        converged: true,
        hessian_at_optimum: DMatrix::zeros(dim, dim),
    }
}

fn check_config(config: &Config, worst: &mut [f64; 6]) {
    let z: Vec<bool> = config.dataset.records().iter().map(|r| r.z).collect();
    let x: Vec<bool> = config.dataset.records().iter().map(|r| r.x).collect();
    let y2: Vec<bool> = config.dataset.records().iter().map(|r| r.y2).collect();
    let d: Vec<bool> = config
        .dataset
        .records()
        .iter()
        .map(|r| r.discordant())
        .collect();
    let stacked = config.alpha.to_stacked();
    let design = &config.design;

    // grad1 against the scalar log-likelihood
    let value_fn = |theta: &DVector<f64>| {
        let params = ComplianceParams::from_stacked(theta);
        DVector::from_vec(vec![loglik1(&params, design, &z, &x)])
    };
    let g1 = grad1(&config.alpha, design, &z, &x);
    let g1_num = finite_diff_jacobian(value_fn, &stacked, 1e-6).transpose();
    worst[0] = worst[0].max(max_rel_error(
        &DMatrix::from_column_slice(g1.len(), 1, g1.as_slice()),
        &g1_num,
    ));

    // hess1 against grad1
    let grad_fn = |theta: &DVector<f64>| {
        let params = ComplianceParams::from_stacked(theta);
        grad1(&params, design, &z, &x)
    };
    let h1 = hess1(&config.alpha, design, &z, &x);
    let h1_num = finite_diff_jacobian(grad_fn, &stacked, 1e-5);
    worst[1] = worst[1].max(max_rel_error(&h1, &h1_num));

    let step1 = synthetic_step1(config);
    let step2 = synthetic_step2(config, &step1);
    let beta_vec = DVector::from_vec(config.beta.beta.to_vec());

    // grad2 against loglik2
    let weights = step2.weights.clone();
    let value2_fn = |theta: &DVector<f64>| {
        let b = CausalParams::new([theta[0], theta[1], theta[2], theta[3]]);
        DVector::from_vec(vec![crate::causal::loglik2(&b.eta(), &weights, &y2, &d)])
    };
    let (g2, h2) = grad2_hess2(&config.beta, &weights, &y2, &d);
    let g2_num = finite_diff_jacobian(value2_fn, &beta_vec, 1e-6).transpose();
    worst[2] = worst[2].max(max_rel_error(
        &DMatrix::from_column_slice(4, 1, g2.as_slice()),
        &g2_num,
    ));

    // hess2 against grad2
    let grad2_fn = |theta: &DVector<f64>| {
        let b = CausalParams::new([theta[0], theta[1], theta[2], theta[3]]);
        grad2_hess2(&b, &weights, &y2, &d).0
    };
    let h2_num = finite_diff_jacobian(grad2_fn, &beta_vec, 1e-5);
    worst[3] = worst[3].max(max_rel_error(&h2, &h2_num));

    // cross block against grad2 recomputed under perturbed alpha
    let analytic_cross = cross_block(&step1, &step2, &config.dataset);
    let records = config.dataset.records();
    let beta = config.beta;
    let grad_in_alpha = |theta: &DVector<f64>| {
        let params = ComplianceParams::from_stacked(theta);
        let w: Vec<WeightVector> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let g = design.row(i).transpose();
                build_weight_vector(r.z, r.x, &class_probabilities(&params, &g))
            })
            .collect();
        grad2_hess2(&beta, &w, &y2, &d).0
    };
    let cross_num = finite_diff_jacobian(grad_in_alpha, &stacked, 1e-6);
    worst[4] = worst[4].max(max_rel_error(&analytic_cross, &cross_num));

    // dw/dalpha against the weight map
    for (i, r) in records.iter().enumerate() {
        if i >= 4 {
            break; // a few subjects per configuration suffice
        }
        let g = design.row(i).transpose();
        let probs = class_probabilities(&config.alpha, &g);
        let (dw0, dw2) = dw_dalpha(r.z, r.x, &probs, &g);
        let p = config.alpha.dim();
        let mut analytic = DMatrix::zeros(4, 2 * p);
        analytic.view_mut((0, 0), (4, p)).copy_from(&dw0);
        analytic.view_mut((0, p), (4, p)).copy_from(&dw2);
        let weight_fn = |theta: &DVector<f64>| {
            let params = ComplianceParams::from_stacked(theta);
            let pr = class_probabilities(&params, &g);
            DVector::from_vec(build_weight_vector(r.z, r.x, &pr).0.to_vec())
        };
        let num = finite_diff_jacobian(weight_fn, &stacked, 1e-6);
        worst[5] = worst[5].max(max_rel_error(&analytic, &num));
    }
}

/// Runs the suite over `configurations` random setups of `n` subjects each.
pub fn run(seed: u64, configurations: usize, n: usize) -> GradCheckReport {
    let names = ["grad1", "hess1", "grad2", "hess2", "cross_block", "dw_dalpha"];
    let mut worst = [0.0f64; 6];
    let vacuous = n == 0 || configurations == 0;
    if !vacuous {
        for c in 0..configurations {
            let config = random_config(derive_seed(seed, c as u64), n);
            check_config(&config, &mut worst);
        }
    }
    GradCheckReport {
        seed,
        configurations,
        subjects_per_configuration: n,
        checks: names
            .iter()
            .zip(worst.iter())
            .map(|(name, &err)| CheckResult {
                name: name.to_string(),
                worst_rel_error: err,
                threshold: THRESHOLD,
                pass: err < THRESHOLD,
            })
            .collect(),
        vacuous,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run(2024, 20, 30);
        assert!(report.pass(), "{}", report.render_text());
        for c in &report.checks {
            assert!(c.worst_rel_error < 1e-5, "{}: {}", c.name, c.worst_rel_error);
        }
    }

    #[test]
    fn zero_subjects_is_a_vacuous_pass() {
        let report = run(1, 5, 0);
        assert!(report.vacuous);
        assert!(report.pass());
        assert!(report.render_text().contains("vacuous"));
    }
}
