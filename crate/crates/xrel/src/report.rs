//! Structured experiment reports. Everything here is serde-serializable;
//! report.json stays byte-reproducible because wall-clock data lives in a
//! separate metadata file.

use serde::Serialize;

use crate::solver::MembershipReport;

/// Pass/fail verdict tied to a named criterion.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    /// Direction of the comparison: true means pass iff value < threshold.
    pub less_than: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Verdict {
    pub fn less(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            pass: value < threshold,
            value,
            threshold,
            less_than: true,
            note: None,
        }
    }

    pub fn greater(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            pass: value > threshold,
            value,
            threshold,
            less_than: false,
            note: None,
        }
    }

    pub fn with_note(mut self, note: &str) -> Self {
        self.note = Some(note.to_string());
        self
    }
}

/// Solver convergence section of a report (mirrors the diagnostics but in a
/// serializable, trimmed form).
#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub contrast: f64,
    pub contrast_warning: bool,
    /// Frobenius norm of the torus zero-mode source offset M⟨ℙ⟩.
    pub zero_mode_offset_norm: f64,
}

impl SolveSummary {
    pub fn from_diag(d: &crate::solver::SolveDiagnostics) -> Self {
        let norm = d
            .zero_mode_offset
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        Self {
            iterations: d.iterations,
            final_residual: d.final_residual,
            residual_history: d.residual_history.clone(),
            contrast: d.contrast,
            contrast_warning: d.contrast_warning,
            zero_mode_offset_norm: norm,
        }
    }
}

/// Top-level experiment report written to report.json.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub generator: String,
    pub verdicts: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub memberships: Vec<NamedMembership>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedMembership {
    pub name: String,
    #[serde(flatten)]
    pub report: MembershipReport,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            generator: crate::rng::GENERATOR_NAME.to_string(),
            verdicts: Vec::new(),
            solve: None,
            memberships: Vec::new(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn push_membership(&mut self, name: &str, rep: MembershipReport) {
        self.memberships.push(NamedMembership {
            name: name.to_string(),
            report: rep,
        });
    }
}
