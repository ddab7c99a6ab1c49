//! JSON problem and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FitError, FitProblem, FitReport};
use crate::body_model::{KinematicModel, LandmarkEvaluator, PoseState};
use crate::metrics::{mpjpe, mpjpe_pa};

/// Problem file: the problem itself plus an optional ground-truth state
/// kept for debugging synthetic problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProblemFile {
    #[serde(flatten)]
    problem: FitProblem,
    #[serde(default)]
    truth: Option<PoseState>,
}

/// Parse a problem file; errors carry `path:line:column`.
pub fn parse_problem(text: &str, path: &str) -> Result<(FitProblem, Option<PoseState>), FitError> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| FitError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok((file.problem, file.truth))
}

pub fn load_problem(path: &Path) -> Result<(FitProblem, Option<PoseState>), FitError> {
    let text = fs::read_to_string(path)?;
    parse_problem(&text, &path.display().to_string())
}

/// Serialize a problem (and optional truth) in the problem-file format.
pub fn problem_json(problem: &FitProblem, truth: Option<&PoseState>) -> String {
    let file = ProblemFile {
        problem: problem.clone(),
        truth: truth.cloned(),
    };
    serde_json::to_string_pretty(&file).expect("problem serializes")
}

/// Landmark errors of the fitted state against a known truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthComparison {
    pub mpjpe_mm: f64,
    pub mpjpe_pa_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportFile {
    #[serde(flatten)]
    pub report: FitReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthComparison>,
}

impl FitReportFile {
    pub fn new(
        model: &KinematicModel,
        report: FitReport,
        truth: Option<&PoseState>,
    ) -> Result<Self, FitError> {
        let truth = match truth {
            Some(t) => {
                t.check(model)?;
                let eval = LandmarkEvaluator::new(model);
                let (a, b) = (eval.landmarks(&report.state)?, eval.landmarks(t)?);
                let metric = |r: Result<f64, _>| {
                    r.map_err(|e: crate::metrics::MetricsError| {
                        FitError::InvalidProblem(e.to_string())
                    })
                };
                Some(TruthComparison {
                    mpjpe_mm: metric(mpjpe(&a, &b))?,
                    mpjpe_pa_mm: metric(mpjpe_pa(&a, &b))?,
                })
            }
            None => None,
        };
        Ok(Self { report, truth })
    }
}

pub fn write_report_json<W: Write>(report: &FitReportFile, w: &mut W) -> Result<(), FitError> {
    serde_json::to_writer_pretty(&mut *w, report).map_err(std::io::Error::other)?;
    writeln!(w)?;
    Ok(())
}

pub fn save_report(report: &FitReportFile, path: &Path) -> Result<(), FitError> {
    let mut f = fs::File::create(path)?;
    write_report_json(report, &mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\n  \"camera\": {\"fx\": 1, \"fy\": 1, \"cx\": 0, \"cy\": 0},\n  \"observations\": [,]\n}";
        match parse_problem(text, "p.json") {
            Err(FitError::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "p.json");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
