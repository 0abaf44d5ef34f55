//! Solving MILP models: MPS export for external solvers and a small exact
//! branch-and-bound engine for micro instances.

mod bnb;
mod external;
pub mod mps;
pub mod simplex;

use std::collections::HashMap;
use std::fmt;

use crate::transcription::{MilpModel, Sense, VarKind};

pub use bnb::{brute_force, solve_builtin, BuiltinLimits, MAX_BUILTIN_INTEGERS, MAX_BUILTIN_VARIABLES};
pub use external::{default_solver_command, parse_solution, solve_external, ExternalOptions, SOLVER_ENV};
pub use mps::{read_mps, write_mps};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Time or node limit reached; an incumbent may be present.
    Limit,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Limit => "limit",
        })
    }
}

impl std::str::FromStr for SolveStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "optimal" => Ok(SolveStatus::Optimal),
            "infeasible" => Ok(SolveStatus::Infeasible),
            "unbounded" => Ok(SolveStatus::Unbounded),
            "limit" => Ok(SolveStatus::Limit),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// NaN when no assignment is available.
    pub objective: f64,
    pub assignment: HashMap<String, f64>,
    /// Relative MIP gap reported by the backend.
    pub gap: f64,
    /// Wall clock seconds.
    pub runtime: f64,
    pub feasibility: Option<FeasibilityReport>,
}

impl SolveResult {
    pub fn empty(status: SolveStatus, runtime: f64) -> Self {
        SolveResult {
            status,
            objective: f64::NAN,
            assignment: HashMap::new(),
            gap: f64::NAN,
            runtime,
            feasibility: None,
        }
    }

    pub fn has_assignment(&self) -> bool {
        !self.assignment.is_empty()
    }

    /// Values in model column order; missing names read as NaN.
    pub fn values(&self, model: &MilpModel) -> Vec<f64> {
        model
            .variables
            .iter()
            .map(|v| self.assignment.get(&v.name).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Writes `name value` lines plus `=obj=`, `=status=` and `=gap=` records.
    pub fn write_solution<W: std::io::Write>(&self, model: &MilpModel, mut w: W) -> std::io::Result<()> {
        writeln!(w, "=status= {}", self.status)?;
        writeln!(w, "=obj= {}", self.objective)?;
        writeln!(w, "=gap= {}", self.gap)?;
        for v in &model.variables {
            if let Some(x) = self.assignment.get(&v.name) {
                writeln!(w, "{} {}", v.name, x)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub tolerance: f64,
    pub max_violation: f64,
    /// Names of violated rows, bounds or integrality, with the violation size.
    pub violations: Vec<(String, f64)>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Absolute feasibility tolerance applied to every returned solution.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Checks bounds, integrality and every row of `model` at `x`.
pub fn check_feasibility(model: &MilpModel, x: &[f64], tol: f64) -> FeasibilityReport {
    let mut violations = Vec::new();
    let mut worst: f64 = 0.0;
    let mut note = |name: String, v: f64| {
        worst = worst.max(v);
        if v > tol || v.is_nan() {
            violations.push((name, v));
        }
    };
    for (j, v) in model.variables.iter().enumerate() {
        let xj = x.get(j).copied().unwrap_or(f64::NAN);
        if xj.is_nan() {
            note(format!("{} (missing)", v.name), f64::NAN);
            continue;
        }
        note(format!("{} lower", v.name), (v.lower - xj).max(0.0));
        note(format!("{} upper", v.name), (xj - v.upper).max(0.0));
        if v.kind != VarKind::Continuous {
            note(format!("{} integrality", v.name), (xj - xj.round()).abs());
        }
    }
    for c in &model.constraints {
        let lhs: f64 = c.terms.iter().map(|&(j, a)| a * x.get(j).copied().unwrap_or(f64::NAN)).sum();
        let viol = match c.sense {
            Sense::Le => (lhs - c.rhs).max(0.0),
            Sense::Ge => (c.rhs - lhs).max(0.0),
            Sense::Eq => (lhs - c.rhs).abs(),
        };
        note(c.name.clone(), viol);
    }
    FeasibilityReport {
        tolerance: tol,
        max_violation: worst,
        violations,
    }
}

/// Attaches a feasibility report to a result that carries an assignment.
pub(crate) fn attach_report(model: &MilpModel, mut result: SolveResult) -> SolveResult {
    if result.has_assignment() {
        let x = result.values(model);
        let report = check_feasibility(model, &x, FEASIBILITY_TOL);
        if !report.is_feasible() {
            log::warn!(
                "solution violates {} constraint(s), worst {:e}",
                report.violations.len(),
                report.max_violation
            );
        }
        result.feasibility = Some(report);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_flags_row_and_integrality() {
        let mut m = MilpModel::new("chk");
        let x = m.add_var("x", VarKind::Integer, 0.0, 5.0);
        let y = m.add_var("y", VarKind::Continuous, 0.0, 1.0);
        m.add_con("c", vec![(x, 1.0), (y, 1.0)], Sense::Le, 3.0);
        let ok = check_feasibility(&m, &[2.0, 1.0], 1e-6);
        assert!(ok.is_feasible());
        let bad = check_feasibility(&m, &[2.5, 1.0], 1e-6);
        let names: Vec<&str> = bad.violations.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["x integrality", "c"]);
    }
}
