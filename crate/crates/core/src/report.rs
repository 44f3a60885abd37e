//! Estimation report: the table layout for both estimation steps, the
//! baseline comparison, run diagnostics, and a stable machine-readable JSON
//! form used for regression testing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineFit;
use crate::causal::CausalFit;
use crate::compliance::ComplianceModelFit;
use crate::error::{Error, Result};
use crate::numerics::NewtonSettings;
use crate::variance::{stacked_estimates, wald_table, SandwichCovariance, WaldRow};

pub const SCHEMA_VERSION: u32 = 1;

/// Run provenance recorded alongside the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the input CSV bytes, hex-encoded; "simulated" runs carry
    /// the generating seed instead.
    pub input_digest: String,
    pub design: String,
    pub settings: NewtonSettingsRecord,
    pub version: String,
}

/// Serializable copy of the Newton settings used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettingsRecord {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_halving_max: usize,
    pub ridge_floor: f64,
}

impl From<&NewtonSettings> for NewtonSettingsRecord {
    fn from(s: &NewtonSettings) -> Self {
        NewtonSettingsRecord {
            max_iterations: s.max_iterations,
            gradient_tolerance: s.gradient_tolerance,
            step_halving_max: s.step_halving_max,
            ridge_floor: s.ridge_floor,
        }
    }
}

/// Convergence and data-shape diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub n_discordant: usize,
    pub step1_iterations: usize,
    pub step1_gradient_norm: f64,
    pub step1_loglik: f64,
    pub step1_bic: f64,
    pub step2_iterations: usize,
    pub step2_gradient_norm: f64,
    pub step2_loglik: f64,
    pub boundary_flags: [bool; 4],
    pub identified: [bool; 4],
}

/// Baseline row in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: String,
    pub delta_hat: Option<f64>,
    pub std_err: Option<f64>,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub n_used: usize,
    pub boundary: bool,
}

impl From<&BaselineFit> for BaselineRow {
    fn from(fit: &BaselineFit) -> Self {
        BaselineRow {
            kind: fit.kind.label().to_string(),
            delta_hat: fit.estimate.map(|e| e.delta_hat),
            std_err: fit.estimate.map(|e| e.std_err),
            t_statistic: fit.estimate.map(|e| e.t_statistic),
            p_value: fit.estimate.map(|e| e.p_value),
            n_used: fit.n_used,
            boundary: fit.estimate.is_none(),
        }
    }
}

/// Full estimation report; serializes to a stable JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    /// Wald rows for alpha0 and alpha2 components.
    pub step1: Vec<WaldRow>,
    /// Wald rows for beta0..beta3 plus the delta row when estimable.
    pub step2: Vec<WaldRow>,
    /// Delta point estimate; absent when non-estimable.
    pub delta: Option<f64>,
    pub delta_se: f64,
    pub baselines: Vec<BaselineRow>,
    pub diagnostics: Diagnostics,
}

impl EstimationReport {
    pub fn assemble(
        step1: &ComplianceModelFit,
        step2: &CausalFit,
        cov: &SandwichCovariance,
        baselines: &[BaselineFit],
        provenance: Provenance,
        n: usize,
    ) -> Self {
        let estimates = stacked_estimates(step1, step2);
        let rows = wald_table(&estimates, cov, step2);
        let p2 = 2 * step1.params.dim();
        let step1_rows = rows[..p2].to_vec();
        let step2_rows = rows[p2..].to_vec();
        EstimationReport {
            schema_version: SCHEMA_VERSION,
            provenance,
            step1: step1_rows,
            step2: step2_rows,
            delta: step2.delta,
            delta_se: cov.delta_se,
            baselines: baselines.iter().map(BaselineRow::from).collect(),
            diagnostics: Diagnostics {
                n,
                n_discordant: step2.n_discordant,
                step1_iterations: step1.newton.iterations,
                step1_gradient_norm: step1.newton.gradient_norm,
                step1_loglik: step1.loglik,
                step1_bic: step1.bic,
                step2_iterations: step2.newton.iterations,
                step2_gradient_norm: step2.newton.gradient_norm,
                step2_loglik: step2.newton.objective,
                boundary_flags: step2.boundary_flags,
                identified: step2.identified,
            },
        }
    }

    /// Stable machine-readable form (pretty JSON, fixed field order, full
    /// float precision).
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Human-readable tables, three decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let rule = "-".repeat(66);

        writeln!(out, "{rule}").unwrap();
        writeln!(out, "Step 1: compliance-class model ({})", self.provenance.design).unwrap();
        writeln!(
            out,
            "{:<24} {:>9} {:>10} {:>12} {:>8}",
            "Parameter", "Value", "Std. Err.", "t-statistic", "p-value"
        )
        .unwrap();
        for row in &self.step1 {
            writeln!(
                out,
                "{:<24} {:>9.3} {:>10.3} {:>12.3} {:>8}",
                row.label,
                row.estimate,
                row.std_err,
                row.t_statistic,
                format_p(row.p_value)
            )
            .unwrap();
        }

        writeln!(out, "{rule}").unwrap();
        writeln!(out, "Step 2: causal parameters").unwrap();
        writeln!(
            out,
            "{:<24} {:>9} {:>10} {:>12} {:>8}",
            "Parameter", "Value", "Std. Err.", "t-statistic", "p-value"
        )
        .unwrap();
        for row in &self.step2 {
            writeln!(
                out,
                "{:<24} {:>9.3} {:>10.3} {:>12.3} {:>8}",
                row.label,
                row.estimate,
                row.std_err,
                row.t_statistic,
                format_p(row.p_value)
            )
            .unwrap();
        }
        if self.delta.is_none() {
            writeln!(out, "delta: not estimable (see boundary/identified flags)").unwrap();
        }

        writeln!(out, "{rule}").unwrap();
        writeln!(out, "Baseline estimators (discordant pairs, model-based SEs)").unwrap();
        writeln!(
            out,
            "{:<24} {:>9} {:>10} {:>12} {:>8} {:>6}",
            "Estimator", "Value", "Std. Err.", "t-statistic", "p-value", "n"
        )
        .unwrap();
        for b in &self.baselines {
            match (b.delta_hat, b.std_err, b.t_statistic, b.p_value) {
                (Some(d), Some(se), Some(t), Some(p)) => writeln!(
                    out,
                    "{:<24} {:>9.3} {:>10.3} {:>12.3} {:>8} {:>6}",
                    b.kind,
                    d,
                    se,
                    t,
                    format_p(p),
                    b.n_used
                )
                .unwrap(),
                _ => writeln!(
                    out,
                    "{:<24} {:>9} {:>10} {:>12} {:>8} {:>6}",
                    b.kind, "--", "--", "--", "--", b.n_used
                )
                .unwrap(),
            }
        }

        writeln!(out, "{rule}").unwrap();
        writeln!(
            out,
            "n = {}, discordant = {}; step1 iters = {} (|grad| = {:.2e}), \
             step2 iters = {} (|grad| = {:.2e})",
            self.diagnostics.n,
            self.diagnostics.n_discordant,
            self.diagnostics.step1_iterations,
            self.diagnostics.step1_gradient_norm,
            self.diagnostics.step2_iterations,
            self.diagnostics.step2_gradient_norm,
        )
        .unwrap();
        if self.diagnostics.boundary_flags.iter().any(|&b| b) {
            writeln!(
                out,
                "boundary flags: {:?} (|beta| > 15; estimate does not exist)",
                self.diagnostics.boundary_flags
            )
            .unwrap();
        }
        if self.diagnostics.identified.iter().any(|&b| !b) {
            writeln!(
                out,
                "identified: {:?} (false = no informative discordant subjects)",
                self.diagnostics.identified
            )
            .unwrap();
        }
        out
    }
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

/// Hex SHA-256 of a byte slice (input provenance digests).
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::run_baselines;
    use crate::causal::fit_step2;
    use crate::compliance::fit_step1;
    use crate::model::{DesignSpec, DesignTerm};
    use crate::sim::{sample, scenario};
    use crate::variance::sandwich;

    fn sample_report() -> EstimationReport {
        let config = scenario("consistent").unwrap().with_n(600).with_seed(77);
        let sim = sample(&config).unwrap();
        let spec = DesignSpec::new(vec![DesignTerm::Intercept, DesignTerm::Raw("v".into())])
            .unwrap();
        let settings = NewtonSettings::default();
        let step1 = fit_step1(&sim.dataset, &spec, &settings).unwrap();
        let step2 = fit_step2(&sim.dataset, &step1, &settings).unwrap();
        let cov = sandwich(&step1, &step2, &sim.dataset).unwrap();
        let baselines = run_baselines(&sim.dataset).unwrap();
        EstimationReport::assemble(
            &step1,
            &step2,
            &cov,
            &baselines,
            Provenance {
                input_digest: "seed:77".into(),
                design: spec.describe(),
                settings: (&settings).into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            sim.dataset.len(),
        )
    }

    #[test]
    fn report_roundtrips_through_json() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let back = EstimationReport::from_json(&json).unwrap();
        assert_eq!(report, back);
        // serialization is stable
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn human_table_contains_the_same_numbers_to_printed_precision() {
        let report = sample_report();
        let text = report.render_text();
        for row in report.step1.iter().chain(report.step2.iter()) {
            let printed = format!("{:.3}", row.estimate);
            assert!(
                text.contains(&printed),
                "value {printed} for {} missing from table",
                row.label
            );
        }
        assert!(text.contains("delta"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
