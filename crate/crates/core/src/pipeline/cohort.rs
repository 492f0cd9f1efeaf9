use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::report::{run_case, ReportBody, RunOptions};
use super::{CaseFile, ErrorClass, PipelineError, Stage};
use crate::activation::{Category, CoverageReport};

/// A cohort entry: a case file path (relative to the cohort file) or an
/// inline case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CohortEntry {
    Path(String),
    Inline(Box<CaseFile>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub cohort_id: String,
    pub cases: Vec<CohortEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl CohortFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::validation(Stage::Load, format!("cannot read {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::validation(Stage::Load, format!("cohort document: {e}")))
    }

    /// Load every entry. A broken entry yields an error in its slot and
    /// does not affect the others.
    pub fn entries(&self, base: &Path) -> Vec<(PathBuf, Result<CaseFile, PipelineError>)> {
        self.cases
            .iter()
            .map(|e| match e {
                CohortEntry::Path(p) => {
                    let path = base.join(p);
                    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| base.to_path_buf());
                    (dir, CaseFile::load(&path))
                }
                CohortEntry::Inline(c) => (base.to_path_buf(), Ok((**c).clone())),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaseOutcome {
    Ok { report: Box<ReportBody> },
    Failed { case_id: Option<String>, error: PipelineError },
}

impl CaseOutcome {
    pub fn report(&self) -> Option<&ReportBody> {
        match self {
            CaseOutcome::Ok { report } => Some(report),
            CaseOutcome::Failed { .. } => None,
        }
    }
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            n: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Quartiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cases: usize,
    /// Indices of failed cases.
    pub failed: Vec<usize>,
    /// Top-ranked configuration of each case.
    pub predicted: Vec<CategoryStats>,
    /// Clinical replay of each case that has an evaluated one.
    pub clinical: Vec<CategoryStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cohort_id: String,
    pub cases: Vec<CaseOutcome>,
    pub summary: CohortSummary,
}

fn stats<'a>(reports: impl Iterator<Item = &'a CoverageReport> + Clone) -> Vec<CategoryStats> {
    Category::ALL
        .iter()
        .filter_map(|&cat| {
            let pick = |f: fn(&crate::activation::CategoryCoverage) -> Option<f64>| {
                let v: Vec<f64> = reports
                    .clone()
                    .flat_map(|r| r.categories.iter().filter(|c| c.category == cat).filter_map(f))
                    .collect();
                Quartiles::of(&v)
            };
            let target = pick(|c| c.target);
            let constraint = pick(|c| c.constraint);
            (target.is_some() || constraint.is_some()).then_some(CategoryStats {
                category: cat,
                target,
                constraint,
            })
        })
        .collect()
}

pub fn summarize(cases: &[CaseOutcome]) -> CohortSummary {
    let ok: Vec<&ReportBody> = cases.iter().filter_map(CaseOutcome::report).collect();
    let predicted = ok.iter().filter_map(|r| r.top()).map(|t| &t.coverage);
    let clinical = ok
        .iter()
        .filter_map(|r| r.clinical.as_ref())
        .filter_map(|c| c.coverage.as_ref());
    CohortSummary {
        cases: cases.len(),
        failed: cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.report().is_none())
            .map(|(i, _)| i)
            .collect(),
        predicted: stats(predicted),
        clinical: stats(clinical),
    }
}

/// Run each case on up to `workers` threads. Entries are
/// `(base directory, loaded case)`; failures stay in their own slot.
pub fn run_cohort(
    cohort_id: &str,
    inputs: &[(PathBuf, Result<CaseFile, PipelineError>)],
    workers: usize,
    opts: &RunOptions,
) -> CohortReport {
    let slots: Vec<Mutex<Option<CaseOutcome>>> = inputs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, inputs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((base, input)) = inputs.get(i) else { break };
                let outcome = match input {
                    Err(e) => CaseOutcome::Failed {
                        case_id: None,
                        error: e.clone(),
                    },
                    Ok(case) => {
                        let case_opts = RunOptions {
                            base_dir: Some(base.clone()),
                            ..opts.clone()
                        };
                        let run = catch_unwind(AssertUnwindSafe(|| run_case(case, &case_opts)));
                        let result = run.unwrap_or_else(|_| {
                            Err(PipelineError::new(Stage::Optimize, ErrorClass::Solver, "case panicked"))
                        });
                        match result {
                            Ok(report) => CaseOutcome::Ok {
                                report: Box::new(report),
                            },
                            Err(error) => {
                                log::warn!("case {} failed: {error}", case.case_id);
                                CaseOutcome::Failed {
                                    case_id: Some(case.case_id.clone()),
                                    error,
                                }
                            }
                        }
                    }
                };
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let cases: Vec<CaseOutcome> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect();
    CohortReport {
        cohort_id: cohort_id.to_string(),
        summary: summarize(&cases),
        cases,
    }
}
