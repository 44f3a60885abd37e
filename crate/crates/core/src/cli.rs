//! Command-line surface: estimation, simulation, Monte Carlo studies, and
//! derivative self-checks.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{load_csv, write_dataset_csv, write_truth_csv, ColumnMapping};
use crate::mc::{run_study, McOptions};
use crate::model::{Dataset, DesignSpec, DesignTerm};
use crate::numerics::NewtonSettings;
use crate::report::{EstimationReport, NewtonSettingsRecord, Provenance};
use crate::sim::{sample, scenario};

#[derive(Debug, Parser)]
#[command(
    name = "paircausal",
    version,
    about = "Complier causal effects for paired binary outcomes under two-sided non-compliance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the two-step estimator with sandwich standard errors and
    /// baseline comparisons on a CSV dataset.
    Estimate(EstimateArgs),
    /// Draw a dataset from a named generative preset.
    Simulate(SimulateArgs),
    /// Run a replicated simulate-and-fit study.
    McStudy(McArgs),
    /// Check every analytic derivative against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input CSV path.
    #[arg(long)]
    pub data: PathBuf,
    /// Column holding the pre-treatment outcome.
    #[arg(long, default_value = "y1")]
    pub y1: String,
    /// Column holding the post-treatment outcome.
    #[arg(long, default_value = "y2")]
    pub y2: String,
    /// Column holding the assigned arm.
    #[arg(long, default_value = "z")]
    pub z: String,
    /// Column holding the received treatment.
    #[arg(long, default_value = "x")]
    pub x: String,
    /// Compliance-model covariate, repeatable. Forms: `name` (raw),
    /// `name:quartiles` (3 dummies, 4th quartile reference),
    /// `name:binary` (validated 0/1).
    #[arg(long = "covariate", value_name = "SPEC")]
    pub covariates: Vec<String>,
    /// Intercept-only compliance model.
    #[arg(long, conflicts_with = "covariates")]
    pub no_covariates: bool,
    /// Write the structured JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Newton gradient tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Newton iteration cap.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset name: consistent, null, misspecified, or confounded.
    #[arg(long)]
    pub preset: String,
    /// Number of subjects.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path for the observable data.
    #[arg(long)]
    pub out: PathBuf,
    /// Output path for the hidden truth (default: <out>.truth.csv).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Preset name: consistent, null, misspecified, or confounded.
    #[arg(long)]
    pub preset: String,
    /// Replication count.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Subjects per replication.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Master seed; each replication derives its own.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use an intercept-only compliance model instead of intercept + v.
    #[arg(long)]
    pub no_covariates: bool,
    /// Write the structured JSON summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Newton gradient tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Newton iteration cap.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// RNG seed for the randomized configurations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random configurations.
    #[arg(long, default_value_t = 200)]
    pub configs: usize,
    /// Subjects per configuration (0 gives a vacuous pass).
    #[arg(long, default_value_t = 40)]
    pub n: usize,
}

/// Parses a `--covariate` flag value into a design term.
pub fn parse_covariate_term(spec: &str) -> Result<(String, DesignTerm)> {
    let (name, modifier) = match spec.split_once(':') {
        Some((name, modifier)) => (name.trim(), Some(modifier.trim())),
        None => (spec.trim(), None),
    };
    if name.is_empty() {
        return Err(Error::Validation(format!("empty covariate name in '{spec}'")));
    }
    let term = match modifier {
        None | Some("raw") => DesignTerm::Raw(name.to_string()),
        Some("quartiles") => DesignTerm::QuartileDummies {
            name: name.to_string(),
            reference: 4,
        },
        Some("binary") => DesignTerm::Binary(name.to_string()),
        Some(other) => {
            return Err(Error::Validation(format!(
                "unknown covariate modifier ':{other}' (expected :quartiles or :binary)"
            )))
        }
    };
    Ok((name.to_string(), term))
}

fn design_from_covariates(covariates: &[String]) -> Result<(Vec<String>, DesignSpec)> {
    let mut names = Vec::new();
    let mut terms = vec![DesignTerm::Intercept];
    for spec in covariates {
        let (name, term) = parse_covariate_term(spec)?;
        if !names.contains(&name) {
            names.push(name);
        }
        terms.push(term);
    }
    Ok((names, DesignSpec::new(terms)?))
}

fn settings_from(tol: f64, max_iter: usize) -> NewtonSettings {
    NewtonSettings {
        max_iterations: max_iter,
        gradient_tolerance: tol,
        ..NewtonSettings::default()
    }
}

/// Core of `estimate`, reusable by the FFI layer: fit both steps, the
/// sandwich, and the baselines on an already-loaded dataset.
pub fn estimate_dataset(
    dataset: &Dataset,
    spec: &DesignSpec,
    settings: &NewtonSettings,
    input_digest: String,
) -> Result<EstimationReport> {
    let step1 = crate::compliance::fit_step1(dataset, spec, settings)?;
    let step2 = crate::causal::fit_step2(dataset, &step1, settings)?;
    let cov = crate::variance::sandwich(&step1, &step2, dataset)?;
    let baselines = crate::baselines::run_baselines(dataset)?;
    Ok(EstimationReport::assemble(
        &step1,
        &step2,
        &cov,
        &baselines,
        Provenance {
            input_digest,
            design: spec.describe(),
            settings: NewtonSettingsRecord::from(settings),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        dataset.len(),
    ))
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<EstimationReport> {
    let (covariate_names, spec) = if args.no_covariates {
        (Vec::new(), DesignSpec::intercept_only())
    } else {
        design_from_covariates(&args.covariates)?
    };
    let mapping = ColumnMapping {
        y1: args.y1.clone(),
        y2: args.y2.clone(),
        z: args.z.clone(),
        x: args.x.clone(),
        covariates: covariate_names,
    };
    let (dataset, ignored) = load_csv(&args.data, &mapping)?;
    for column in &ignored {
        eprintln!("warning: ignoring unmapped column '{column}'");
    }
    let bytes = std::fs::read(&args.data)
        .map_err(|e| Error::Io(format!("{}: {e}", args.data.display())))?;
    let digest = crate::report::sha256_hex(&bytes);
    let settings = settings_from(args.tol, args.max_iter);
    let report = estimate_dataset(&dataset, &spec, &settings, digest)?;
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json()?)
            .map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    }
    Ok(report)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let config = scenario(&args.preset)?.with_n(args.n).with_seed(args.seed);
    let sim = sample(&config)?;
    write_dataset_csv(&args.out, &sim.dataset)?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| default_truth_path(&args.out));
    write_truth_csv(&truth_path, &sim)?;

    let counts = sim.dataset.zx_counts();
    let n = sim.dataset.len() as f64;
    let mut out = String::new();
    use std::fmt::Write as _;
    writeln!(
        out,
        "wrote {} subjects to {} (truth: {})",
        sim.dataset.len(),
        args.out.display(),
        truth_path.display()
    )
    .unwrap();
    writeln!(out, "counts and proportions by (assigned, received) cell:").unwrap();
    for z in 0..2 {
        for x in 0..2 {
            let label = match (z, x) {
                (0, 0) => "control,  untreated (compliers + never-takers)",
                (0, 1) => "control,  treated   (always-takers)",
                (1, 0) => "treatment, untreated (never-takers)",
                _ => "treatment, treated   (compliers + always-takers)",
            };
            writeln!(
                out,
                "  z={z} x={x}  {:>6}  {:>6.3}  {label}",
                counts[z][x],
                counts[z][x] as f64 / n
            )
            .unwrap();
        }
    }
    Ok(out)
}

pub fn default_truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".truth.csv");
    PathBuf::from(s)
}

pub fn cmd_mc_study(args: &McArgs) -> Result<crate::mc::McSummary> {
    let spec = if args.no_covariates {
        DesignSpec::intercept_only()
    } else {
        DesignSpec::new(vec![DesignTerm::Intercept, DesignTerm::Raw("v".into())])?
    };
    let options = McOptions {
        config: scenario(&args.preset)?.with_n(args.n),
        replications: args.reps,
        seed: args.seed,
        spec,
        settings: settings_from(args.tol, args.max_iter),
    };
    let summary = run_study(&options)?;
    if let Some(out) = &args.out {
        std::fs::write(out, summary.to_json()?)
            .map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    }
    Ok(summary)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> gradcheck::GradCheckReport {
    gradcheck::run(args.seed, args.configs, args.n)
}

/// Remediation hint rendered under CLI errors.
pub fn hint_for(error: &Error) -> Option<&'static str> {
    match error {
        Error::Validation(_) => {
            Some("check column names, 0/1 coding, and --covariate modifiers")
        }
        Error::Identification(_) => Some(
            "the model needs non-compliant subjects in both directions and discordant \
             outcome pairs in the cells that pin each effect; consider --no-covariates \
             or a larger dataset",
        ),
        Error::Convergence(_) => {
            Some("try a looser --tol, more --max-iter, or check for separation")
        }
        Error::Singular(_) => Some("the design may be collinear; drop redundant covariates"),
        Error::Io(_) => None,
    }
}

/// Runs a parsed command, printing human output to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(args) => {
            let report = cmd_estimate(args)?;
            print!("{}", report.render_text());
            Ok(())
        }
        Command::Simulate(args) => {
            let text = cmd_simulate(args)?;
            print!("{text}");
            Ok(())
        }
        Command::McStudy(args) => {
            let summary = cmd_mc_study(args)?;
            print!("{}", summary.render_text());
            Ok(())
        }
        Command::Gradcheck(args) => {
            let report = cmd_gradcheck(args);
            print!("{}", report.render_text());
            if report.pass() {
                Ok(())
            } else {
                Err(Error::Validation(
                    "derivative checks exceeded the error threshold".into(),
                ))
            }
        }
    }
}
