use std::collections::HashMap;
use std::time::Instant;

use super::simplex::{self, Lp, LpOutcome};
use super::{attach_report, SolveResult, SolveStatus};
use crate::error::{Error, Result};
use crate::transcription::{MilpModel, ObjSense};

pub const MAX_BUILTIN_VARIABLES: usize = 500;
pub const MAX_BUILTIN_INTEGERS: usize = 60;
const INT_TOL: f64 = 1e-6;
const GAP_ABS: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct BuiltinLimits {
    pub max_nodes: usize,
    pub max_lp_iterations: usize,
}

impl Default for BuiltinLimits {
    fn default() -> Self {
        BuiltinLimits {
            max_nodes: 2_000_000,
            max_lp_iterations: 100_000,
        }
    }
}

fn to_lp(model: &MilpModel) -> Lp {
    let sign = match model.sense {
        ObjSense::Minimize => 1.0,
        ObjSense::Maximize => -1.0,
    };
    let mut cost = vec![0.0; model.variables.len()];
    for &(j, c) in &model.objective {
        cost[j] += sign * c;
    }
    let mut lower: Vec<f64> = model.variables.iter().map(|v| v.lower).collect();
    let mut upper: Vec<f64> = model.variables.iter().map(|v| v.upper).collect();
    for j in 0..model.variables.len() {
        if model.is_integer(j) {
            lower[j] = (lower[j] - INT_TOL).ceil();
            upper[j] = (upper[j] + INT_TOL).floor();
        }
    }
    Lp {
        cost,
        lower,
        upper,
        rows: model
            .constraints
            .iter()
            .map(|c| (c.terms.clone(), c.sense, c.rhs))
            .collect(),
    }
}

fn guard(model: &MilpModel) -> Result<Vec<usize>> {
    let ints: Vec<usize> = (0..model.variables.len()).filter(|&j| model.is_integer(j)).collect();
    if model.variables.len() > MAX_BUILTIN_VARIABLES || ints.len() > MAX_BUILTIN_INTEGERS {
        return Err(Error::Solver(format!(
            "model too large for the built-in solver: {} variables ({} integer); limits are {} and {}",
            model.variables.len(),
            ints.len(),
            MAX_BUILTIN_VARIABLES,
            MAX_BUILTIN_INTEGERS
        )));
    }
    Ok(ints)
}

fn finish(model: &MilpModel, status: SolveStatus, best: Option<(Vec<f64>, f64)>, start: Instant) -> SolveResult {
    let runtime = start.elapsed().as_secs_f64();
    let Some((x, obj)) = best else {
        return SolveResult::empty(status, runtime);
    };
    let sign = if model.sense == ObjSense::Maximize { -1.0 } else { 1.0 };
    let assignment: HashMap<String, f64> = model
        .variables
        .iter()
        .zip(&x)
        .map(|(v, &xj)| (v.name.clone(), xj))
        .collect();
    attach_report(
        model,
        SolveResult {
            status,
            objective: sign * obj,
            assignment,
            gap: if status == SolveStatus::Optimal { 0.0 } else { f64::NAN },
            runtime,
            feasibility: None,
        },
    )
}

/// Depth-first branch-and-bound on the most fractional variable.
pub fn solve_builtin(model: &MilpModel, limits: BuiltinLimits) -> Result<SolveResult> {
    let start = Instant::now();
    let ints = guard(model)?;
    let root = to_lp(model);
    let mut stack = vec![(root.lower.clone(), root.upper.clone())];
    let mut incumbent: Option<(Vec<f64>, f64)> = None;
    let mut nodes = 0;
    let mut lp = root;
    while let Some((lo, up)) = stack.pop() {
        if nodes >= limits.max_nodes {
            return Ok(finish(model, SolveStatus::Limit, incumbent, start));
        }
        nodes += 1;
        lp.lower = lo;
        lp.upper = up;
        let (x, obj) = match simplex::solve(&lp, limits.max_lp_iterations)? {
            LpOutcome::Infeasible => continue,
            LpOutcome::Unbounded => {
                if nodes == 1 {
                    return Ok(finish(model, SolveStatus::Unbounded, None, start));
                }
                continue;
            }
            LpOutcome::Optimal { x, objective } => (x, objective),
        };
        if let Some((_, best)) = &incumbent {
            if obj >= best - GAP_ABS {
                continue;
            }
        }
        let branch = ints
            .iter()
            .map(|&j| (j, (x[j] - x[j].floor()).min(x[j].ceil() - x[j])))
            .filter(|&(_, f)| f > INT_TOL)
            .fold(None, |acc: Option<(usize, f64)>, (j, f)| match acc {
                Some((_, bf)) if bf >= f => acc,
                _ => Some((j, f)),
            });
        match branch {
            None => {
                let mut x = x;
                for &j in &ints {
                    x[j] = x[j].round();
                }
                let obj = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
                incumbent = Some((x, obj));
            }
            Some((j, _)) => {
                let v = x[j];
                let mut down = (lp.lower.clone(), lp.upper.clone());
                down.1[j] = v.floor();
                let mut upb = (lp.lower.clone(), lp.upper.clone());
                upb.0[j] = v.ceil();
                // the child nearer the LP value is explored first
                if v - v.floor() > 0.5 {
                    stack.push(down);
                    stack.push(upb);
                } else {
                    stack.push(upb);
                    stack.push(down);
                }
            }
        }
    }
    let status = if incumbent.is_some() {
        SolveStatus::Optimal
    } else {
        SolveStatus::Infeasible
    };
    log::debug!("branch-and-bound explored {nodes} nodes");
    Ok(finish(model, status, incumbent, start))
}

/// Enumerates every integer assignment within bounds and solves the LP over
/// the continuous variables for each. Exponential; an oracle for tests.
pub fn brute_force(model: &MilpModel, limits: BuiltinLimits) -> Result<SolveResult> {
    let start = Instant::now();
    let ints = guard(model)?;
    let mut lp = to_lp(model);
    let ranges: Vec<(i64, i64)> = ints
        .iter()
        .map(|&j| {
            let (l, u) = (lp.lower[j], lp.upper[j]);
            if !l.is_finite() || !u.is_finite() {
                return Err(Error::Solver(format!(
                    "enumeration needs finite bounds on {}",
                    model.variables[j].name
                )));
            }
            Ok((l as i64, u as i64))
        })
        .collect::<Result<_>>()?;
    let leaves = ranges
        .iter()
        .try_fold(1u64, |acc, &(l, u)| acc.checked_mul((u - l + 1).max(0) as u64))
        .filter(|&n| n <= 1 << 24)
        .ok_or_else(|| Error::Solver("too many integer assignments to enumerate".into()))?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut unbounded = false;
    let mut point: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    for _ in 0..leaves {
        if ranges.iter().all(|r| r.0 <= r.1) {
            for (k, &j) in ints.iter().enumerate() {
                lp.lower[j] = point[k] as f64;
                lp.upper[j] = point[k] as f64;
            }
            match simplex::solve(&lp, limits.max_lp_iterations)? {
                LpOutcome::Optimal { x, objective } => {
                    if best.as_ref().map_or(true, |(_, b)| objective < *b) {
                        best = Some((x, objective));
                    }
                }
                LpOutcome::Unbounded => unbounded = true,
                LpOutcome::Infeasible => {}
            }
        }
        for k in 0..point.len() {
            if point[k] < ranges[k].1 {
                point[k] += 1;
                break;
            }
            point[k] = ranges[k].0;
        }
    }
    let status = if unbounded {
        SolveStatus::Unbounded
    } else if best.is_some() {
        SolveStatus::Optimal
    } else {
        SolveStatus::Infeasible
    };
    Ok(finish(model, status, if unbounded { None } else { best }, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcription::{Sense, VarKind};

    #[test]
    fn integer_rounding_down() {
        let mut m = MilpModel::new("t");
        let x = m.add_var("x", VarKind::Integer, 0.0, f64::INFINITY);
        m.add_con("cap", vec![(x, 1.0)], Sense::Le, 2.5);
        m.objective = vec![(x, -1.0)];
        let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.objective, -2.0);
        assert_eq!(r.assignment["x"], 2.0);
    }

    #[test]
    fn lp_only_single_node() {
        let mut m = MilpModel::new("lp");
        let x = m.add_var("x", VarKind::Continuous, 0.0, 5.0);
        m.objective = vec![(x, -1.0)];
        let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
        assert_eq!(r.objective, -5.0);
        assert!(r.feasibility.unwrap().is_feasible());
    }

    #[test]
    fn maximize_sense() {
        let mut m = MilpModel::new("max");
        m.sense = ObjSense::Maximize;
        let x = m.add_var("x", VarKind::Integer, 0.0, 10.0);
        let y = m.add_var("y", VarKind::Integer, 0.0, 10.0);
        m.add_con("c", vec![(x, 2.0), (y, 3.0)], Sense::Le, 12.5);
        m.objective = vec![(x, 3.0), (y, 4.0)];
        let a = solve_builtin(&m, BuiltinLimits::default()).unwrap();
        let b = brute_force(&m, BuiltinLimits::default()).unwrap();
        assert_eq!(a.objective, 18.0);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn size_guard() {
        let mut m = MilpModel::new("big");
        for j in 0..61 {
            m.add_var(format!("z{j}"), VarKind::Binary, 0.0, 1.0);
        }
        assert!(solve_builtin(&m, BuiltinLimits::default()).is_err());
    }

    #[test]
    fn infeasible_model() {
        let mut m = MilpModel::new("inf");
        let x = m.add_var("x", VarKind::Integer, 0.0, 10.0);
        m.add_con("a", vec![(x, 2.0)], Sense::Eq, 3.0);
        let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }
}
