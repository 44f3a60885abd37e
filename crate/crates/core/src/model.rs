//! Core domain types: compliance classes, subject records, datasets, and
//! covariate design construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent compliance class of a trial participant.
///
/// The numeric codes follow the convention 0 = never-taker, 1 = complier,
/// 2 = always-taker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComplianceClass {
    NeverTaker = 0,
    Complier = 1,
    AlwaysTaker = 2,
}

impl ComplianceClass {
    pub const ALL: [ComplianceClass; 3] = [
        ComplianceClass::NeverTaker,
        ComplianceClass::Complier,
        ComplianceClass::AlwaysTaker,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ComplianceClass::NeverTaker),
            1 => Some(ComplianceClass::Complier),
            2 => Some(ComplianceClass::AlwaysTaker),
            _ => None,
        }
    }

    /// Treatment actually received given the assigned arm: never-takers
    /// never take it, always-takers always do, compliers follow assignment.
    pub fn received(self, assigned: bool) -> bool {
        match self {
            ComplianceClass::NeverTaker => false,
            ComplianceClass::Complier => assigned,
            ComplianceClass::AlwaysTaker => true,
        }
    }
}

/// One trial participant: binary outcomes before (`y1`) and after (`y2`)
/// treatment, assigned arm `z`, received treatment `x`, and raw covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub y1: bool,
    pub y2: bool,
    pub z: bool,
    pub x: bool,
    pub covariates: Vec<f64>,
}

impl SubjectRecord {
    /// Discordance indicator: 1 exactly when the pre/post outcomes differ.
    pub fn discordant(&self) -> bool {
        discordant(self.y1, self.y2)
    }
}

/// Returns true when exactly one of the two outcomes is 1 (y1 + y2 = 1).
pub fn discordant(y1: bool, y2: bool) -> bool {
    y1 != y2
}

/// An ordered collection of subjects with a shared covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking that it is nonempty and that every record
    /// carries one covariate value per name.
    pub fn new(records: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("dataset has no records".into()));
        }
        let arity = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != arity {
                return Err(Error::Validation(format!(
                    "record {} ({}) has {} covariates, expected {}",
                    i,
                    r.id,
                    r.covariates.len(),
                    arity
                )));
            }
            for (j, v) in r.covariates.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "record {} ({}) has non-finite covariate {}",
                        i, r.id, covariate_names[j]
                    )));
                }
            }
        }
        Ok(Dataset {
            records,
            covariate_names,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Column of raw covariate values for `name`.
    pub fn covariate_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .covariate_index(name)
            .ok_or_else(|| Error::Validation(format!("unknown covariate '{name}'")))?;
        Ok(self.records.iter().map(|r| r.covariates[j]).collect())
    }

    /// Count of records in each (z, x) cell, indexed as [z][x].
    pub fn zx_counts(&self) -> [[usize; 2]; 2] {
        let mut counts = [[0usize; 2]; 2];
        for r in &self.records {
            counts[r.z as usize][r.x as usize] += 1;
        }
        counts
    }

    pub fn n_discordant(&self) -> usize {
        self.records.iter().filter(|r| r.discordant()).count()
    }
}

/// Which quartile (1-4) serves as the omitted reference category.
pub type ReferenceQuartile = u8;

/// One column-generating term of a covariate design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignTerm {
    /// All-ones column.
    Intercept,
    /// Covariate passed through unchanged.
    Raw(String),
    /// Three 0/1 dummies for the quartiles of the named covariate, with the
    /// reference quartile omitted.
    QuartileDummies {
        name: String,
        reference: ReferenceQuartile,
    },
    /// A covariate that must already be coded 0/1.
    Binary(String),
}

/// Ordered list of design terms; exactly one intercept is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    terms: Vec<DesignTerm>,
}

impl DesignSpec {
    pub fn new(terms: Vec<DesignTerm>) -> Result<Self> {
        let n_intercepts = terms
            .iter()
            .filter(|t| matches!(t, DesignTerm::Intercept))
            .count();
        if n_intercepts != 1 {
            return Err(Error::Validation(format!(
                "design spec must contain exactly one intercept term, found {n_intercepts}"
            )));
        }
        for t in &terms {
            if let DesignTerm::QuartileDummies { reference, .. } = t {
                if !(1..=4).contains(reference) {
                    return Err(Error::Validation(format!(
                        "reference quartile must be 1-4, got {reference}"
                    )));
                }
            }
        }
        Ok(DesignSpec { terms })
    }

    /// Intercept-only design.
    pub fn intercept_only() -> Self {
        DesignSpec {
            terms: vec![DesignTerm::Intercept],
        }
    }

    pub fn terms(&self) -> &[DesignTerm] {
        &self.terms
    }

    /// Number of columns this spec emits.
    pub fn width(&self) -> usize {
        self.terms
            .iter()
            .map(|t| match t {
                DesignTerm::QuartileDummies { .. } => 3,
                _ => 1,
            })
            .sum()
    }

    /// Compact description, e.g. `intercept + gi:quartiles + statin:binary`.
    pub fn describe(&self) -> String {
        self.terms
            .iter()
            .map(|t| match t {
                DesignTerm::Intercept => "intercept".to_string(),
                DesignTerm::Raw(name) => name.clone(),
                DesignTerm::QuartileDummies { name, .. } => format!("{name}:quartiles"),
                DesignTerm::Binary(name) => format!("{name}:binary"),
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// The treatment-state indicator vector t(c, x).
///
/// Entry layout: (never-taker & control, complier & control,
/// complier & treated, always-taker & treated). Pairs impossible under the
/// compliance rules (e.g. a treated never-taker) yield the zero vector.
pub fn t_vector(class: ComplianceClass, x: bool) -> [f64; 4] {
    let xi = if x { 1.0 } else { 0.0 };
    match class {
        ComplianceClass::NeverTaker => [1.0 - xi, 0.0, 0.0, 0.0],
        ComplianceClass::Complier => [0.0, 1.0 - xi, xi, 0.0],
        ComplianceClass::AlwaysTaker => [0.0, 0.0, 0.0, xi],
    }
}

/// Design matrix plus per-column labels.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

/// Empirical percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Quartile cutpoints (25/50/75 empirical percentiles) of a column.
pub fn quartile_cutpoints(values: &[f64]) -> [f64; 3] {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.50),
        percentile(&sorted, 0.75),
    ]
}

/// Quartile (1-4) of `v` given cutpoints: quartile q covers
/// cut_{q-1} < v <= cut_q with cut_0 = -inf and cut_4 = +inf.
pub fn quartile_of(v: f64, cuts: &[f64; 3]) -> u8 {
    if v <= cuts[0] {
        1
    } else if v <= cuts[1] {
        2
    } else if v <= cuts[2] {
        3
    } else {
        4
    }
}

/// Builds the n x p design matrix g(v) for a dataset under a design spec.
///
/// Quartile cutpoints come from the empirical distribution of the named
/// covariate in this dataset, so the result is deterministic for a fixed
/// (dataset, spec) pair.
pub fn build_design(dataset: &Dataset, spec: &DesignSpec) -> Result<DesignMatrix> {
    let n = dataset.len();
    let p = spec.width();
    let mut matrix = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(p);
    let mut col = 0;

    for term in spec.terms() {
        match term {
            DesignTerm::Intercept => {
                for i in 0..n {
                    matrix[(i, col)] = 1.0;
                }
                labels.push("intercept".to_string());
                col += 1;
            }
            DesignTerm::Raw(name) => {
                let values = dataset.covariate_column(name)?;
                for (i, v) in values.iter().enumerate() {
                    matrix[(i, col)] = *v;
                }
                labels.push(name.clone());
                col += 1;
            }
            DesignTerm::Binary(name) => {
                let values = dataset.covariate_column(name)?;
                for (i, v) in values.iter().enumerate() {
                    if *v != 0.0 && *v != 1.0 {
                        return Err(Error::Validation(format!(
                            "covariate '{name}' declared binary but row {i} has value {v}"
                        )));
                    }
                    matrix[(i, col)] = *v;
                }
                labels.push(name.clone());
                col += 1;
            }
            DesignTerm::QuartileDummies { name, reference } => {
                let values = dataset.covariate_column(name)?;
                let cuts = quartile_cutpoints(&values);
                if cuts[0] == cuts[2] {
                    return Err(Error::Validation(format!(
                        "covariate '{name}' is too concentrated for quartile dummies \
                         (25th and 75th percentiles coincide)"
                    )));
                }
                let emitted: Vec<u8> = (1..=4).filter(|q| q != reference).collect();
                for q in &emitted {
                    labels.push(format!("{name}_q{q}"));
                }
                for (i, v) in values.iter().enumerate() {
                    let q = quartile_of(*v, &cuts);
                    if let Some(k) = emitted.iter().position(|&e| e == q) {
                        matrix[(i, col + k)] = 1.0;
                    }
                }
                col += 3;
            }
        }
    }
    debug_assert_eq!(col, p);
    Ok(DesignMatrix { matrix, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(y1: bool, y2: bool, z: bool, x: bool, covs: Vec<f64>) -> SubjectRecord {
        SubjectRecord {
            id: "t".into(),
            y1,
            y2,
            z,
            x,
            covariates: covs,
        }
    }

    fn dataset_with_covariate(name: &str, values: &[f64]) -> Dataset {
        let records = values
            .iter()
            .map(|&v| record(false, false, false, false, vec![v]))
            .collect();
        Dataset::new(records, vec![name.to_string()]).unwrap()
    }

    #[test]
    fn t_vector_matches_definition() {
        assert_eq!(
            t_vector(ComplianceClass::NeverTaker, false),
            [1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            t_vector(ComplianceClass::Complier, false),
            [0.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(
            t_vector(ComplianceClass::Complier, true),
            [0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(
            t_vector(ComplianceClass::AlwaysTaker, true),
            [0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn t_vector_impossible_pairs_vanish() {
        assert_eq!(
            t_vector(ComplianceClass::NeverTaker, true),
            [0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            t_vector(ComplianceClass::AlwaysTaker, false),
            [0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn t_vector_possible_pairs_have_one_unit_entry() {
        for class in ComplianceClass::ALL {
            for z in [false, true] {
                let x = class.received(z);
                let t = t_vector(class, x);
                assert_eq!(t.iter().filter(|&&e| e == 1.0).count(), 1);
                assert_eq!(t.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn discordant_truth_table() {
        assert!(discordant(true, false));
        assert!(discordant(false, true));
        assert!(!discordant(false, false));
        assert!(!discordant(true, true));
    }

    #[test]
    fn intercept_only_design_is_all_ones() {
        let ds = dataset_with_covariate("v", &[3.0, 7.0, -1.0]);
        let d = build_design(&ds, &DesignSpec::intercept_only()).unwrap();
        assert_eq!(d.matrix.nrows(), 3);
        assert_eq!(d.matrix.ncols(), 1);
        assert!(d.matrix.iter().all(|&v| v == 1.0));
        assert_eq!(d.labels, vec!["intercept"]);
    }

    #[test]
    fn quartile_dummies_on_one_to_eight() {
        let ds = dataset_with_covariate("v", &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let spec = DesignSpec::new(vec![
            DesignTerm::Intercept,
            DesignTerm::QuartileDummies {
                name: "v".into(),
                reference: 4,
            },
        ])
        .unwrap();
        let d = build_design(&ds, &spec).unwrap();
        assert_eq!(d.labels, vec!["intercept", "v_q1", "v_q2", "v_q3"]);
        let expected = [
            [1., 0., 0.],
            [1., 0., 0.],
            [0., 1., 0.],
            [0., 1., 0.],
            [0., 0., 1.],
            [0., 0., 1.],
            [0., 0., 0.],
            [0., 0., 0.],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert_eq!(d.matrix[(i, j + 1)], e, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn binary_covariate_passes_through() {
        let ds = dataset_with_covariate("statin", &[0., 1., 1., 0.]);
        let spec = DesignSpec::new(vec![
            DesignTerm::Intercept,
            DesignTerm::Binary("statin".into()),
        ])
        .unwrap();
        let d = build_design(&ds, &spec).unwrap();
        assert_eq!(d.matrix.column(1).iter().copied().collect::<Vec<_>>(),
                   vec![0., 1., 1., 0.]);
    }

    #[test]
    fn binary_term_rejects_non_binary_values() {
        let ds = dataset_with_covariate("age", &[40., 61.]);
        let spec = DesignSpec::new(vec![
            DesignTerm::Intercept,
            DesignTerm::Binary("age".into()),
        ])
        .unwrap();
        assert!(matches!(
            build_design(&ds, &spec),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_covariate_is_an_error() {
        let ds = dataset_with_covariate("v", &[1., 2.]);
        let spec =
            DesignSpec::new(vec![DesignTerm::Intercept, DesignTerm::Raw("w".into())]).unwrap();
        assert!(matches!(
            build_design(&ds, &spec),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn constant_covariate_rejected_for_quartiles() {
        let ds = dataset_with_covariate("v", &[5., 5., 5., 5.]);
        let spec = DesignSpec::new(vec![
            DesignTerm::Intercept,
            DesignTerm::QuartileDummies {
                name: "v".into(),
                reference: 4,
            },
        ])
        .unwrap();
        assert!(matches!(
            build_design(&ds, &spec),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn design_spec_requires_exactly_one_intercept() {
        assert!(DesignSpec::new(vec![DesignTerm::Raw("v".into())]).is_err());
        assert!(DesignSpec::new(vec![DesignTerm::Intercept, DesignTerm::Intercept]).is_err());
    }

    #[test]
    fn quartile_dummy_rows_sum_to_at_most_one() {
        let values: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64).collect();
        let ds = dataset_with_covariate("v", &values);
        for reference in 1..=4u8 {
            let spec = DesignSpec::new(vec![
                DesignTerm::Intercept,
                DesignTerm::QuartileDummies {
                    name: "v".into(),
                    reference,
                },
            ])
            .unwrap();
            let d = build_design(&ds, &spec).unwrap();
            for i in 0..ds.len() {
                let s: f64 = (1..4).map(|j| d.matrix[(i, j)]).sum();
                assert!(s <= 1.0);
            }
        }
    }

    #[test]
    fn build_design_is_deterministic() {
        let values: Vec<f64> = (0..50).map(|i| ((i * 31) % 17) as f64 / 3.0).collect();
        let ds = dataset_with_covariate("v", &values);
        let spec = DesignSpec::new(vec![
            DesignTerm::Intercept,
            DesignTerm::QuartileDummies {
                name: "v".into(),
                reference: 4,
            },
        ])
        .unwrap();
        let a = build_design(&ds, &spec).unwrap();
        let b = build_design(&ds, &spec).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn dataset_validates_covariate_arity() {
        let records = vec![
            record(false, true, false, false, vec![1.0]),
            record(true, false, true, true, vec![1.0, 2.0]),
        ];
        assert!(Dataset::new(records, vec!["v".into()]).is_err());
    }
}
