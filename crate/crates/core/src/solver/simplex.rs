//! Dense bounded-variable primal simplex with Bland's rule.
//!
//! Meant for small models: the tableau is stored explicitly and every pivot
//! touches all of it.

use crate::error::{Error, Result};
use crate::transcription::Sense;

pub const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;

/// Minimize `cost . x` subject to rows and `lower <= x <= upper`.
#[derive(Debug, Clone)]
pub struct Lp {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<(Vec<(usize, f64)>, Sense, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

pub fn solve(lp: &Lp, max_iter: usize) -> Result<LpOutcome> {
    let Some(reduced) = presolve(lp) else {
        return Ok(LpOutcome::Infeasible);
    };
    let outcome = match Tableau::build(&reduced.lp) {
        None => LpOutcome::Infeasible,
        Some(mut t) => t.run(max_iter)?,
    };
    Ok(match outcome {
        LpOutcome::Optimal { x: core, .. } => {
            let mut x = reduced.fixed.clone();
            for (k, &j) in reduced.free_cols.iter().enumerate() {
                x[j] = core[k];
            }
            let objective = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
            LpOutcome::Optimal { x, objective }
        }
        other => other,
    })
}

struct Reduced {
    /// Values of all original columns; only meaningful for fixed ones.
    fixed: Vec<f64>,
    /// Original indices of columns left to the simplex.
    free_cols: Vec<usize>,
    lp: Lp,
}

fn close(a: f64, b: f64) -> bool {
    a.is_finite() && b.is_finite() && (a - b).abs() <= FEAS_TOL * (1.0 + a.abs().max(b.abs()))
}

/// Turns singleton rows into bounds and substitutes fixed columns until
/// nothing changes. Returns `None` when infeasibility is detected.
fn presolve(lp: &Lp) -> Option<Reduced> {
    let n = lp.cost.len();
    let mut lo = lp.lower.clone();
    let mut up = lp.upper.clone();
    let mut rows: Vec<(Vec<(usize, f64)>, Sense, f64)> = lp
        .rows
        .iter()
        .map(|(t, s, b)| (t.iter().copied().filter(|&(_, a)| a != 0.0).collect(), *s, *b))
        .collect();
    let mut alive = vec![true; rows.len()];
    let mut is_fixed = vec![false; n];
    loop {
        let mut changed = false;
        for j in 0..n {
            if !is_fixed[j] && close(lo[j], up[j]) {
                up[j] = lo[j];
                is_fixed[j] = true;
                changed = true;
            }
        }
        for (r, row) in rows.iter_mut().enumerate() {
            if !alive[r] {
                continue;
            }
            let (terms, sense, rhs) = row;
            let mut shift = 0.0;
            terms.retain(|&(j, a)| {
                if is_fixed[j] {
                    shift += a * lo[j];
                    false
                } else {
                    true
                }
            });
            *rhs -= shift;
            match terms.len() {
                0 => {
                    let ok = match sense {
                        Sense::Le => *rhs >= -FEAS_TOL * (1.0 + rhs.abs()),
                        Sense::Ge => *rhs <= FEAS_TOL * (1.0 + rhs.abs()),
                        Sense::Eq => close(*rhs, 0.0),
                    };
                    if !ok {
                        return None;
                    }
                    alive[r] = false;
                    changed = true;
                }
                1 => {
                    let (j, a) = terms[0];
                    let v = *rhs / a;
                    let (tighten_up, tighten_lo) = match (sense, a > 0.0) {
                        (Sense::Eq, _) => (true, true),
                        (Sense::Le, true) | (Sense::Ge, false) => (true, false),
                        (Sense::Le, false) | (Sense::Ge, true) => (false, true),
                    };
                    if tighten_up && v < up[j] {
                        up[j] = v;
                    }
                    if tighten_lo && v > lo[j] {
                        lo[j] = v;
                    }
                    if lo[j] > up[j] {
                        if close(lo[j], up[j]) {
                            up[j] = lo[j];
                        } else {
                            return None;
                        }
                    }
                    alive[r] = false;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }
    let free_cols: Vec<usize> = (0..n).filter(|&j| !is_fixed[j]).collect();
    let mut map = vec![usize::MAX; n];
    for (k, &j) in free_cols.iter().enumerate() {
        map[j] = k;
    }
    let reduced_rows = rows
        .into_iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|((t, s, b), _)| (t.into_iter().map(|(j, a)| (map[j], a)).collect(), s, b))
        .collect();
    Some(Reduced {
        fixed: lo.clone(),
        lp: Lp {
            cost: free_cols.iter().map(|&j| lp.cost[j]).collect(),
            lower: free_cols.iter().map(|&j| lo[j]).collect(),
            upper: free_cols.iter().map(|&j| up[j]).collect(),
            rows: reduced_rows,
        },
        free_cols,
    })
}

/// How an original column maps onto non-negative tableau columns.
#[derive(Debug, Clone, Copy)]
enum ColMap {
    /// x = offset + y
    Shift { col: usize, offset: f64 },
    /// x = offset - y
    Mirror { col: usize, offset: f64 },
    /// x = y+ - y-
    Split { pos: usize, neg: usize },
}

struct Tableau {
    m: usize,
    ncols: usize,
    /// Row-major m x ncols, holding B^-1 A.
    a: Vec<f64>,
    /// Values of basic variables.
    beta: Vec<f64>,
    basis: Vec<usize>,
    upper: Vec<f64>,
    at_upper: Vec<bool>,
    cost: Vec<f64>,
    n_struct: usize,
    artificial_start: usize,
    maps: Vec<ColMap>,
}

impl Tableau {
    fn build(lp: &Lp) -> Option<Tableau> {
        let mut maps = Vec::with_capacity(lp.cost.len());
        let mut upper = Vec::new();
        let mut cost = Vec::new();
        for j in 0..lp.cost.len() {
            let (l, u, c) = (lp.lower[j], lp.upper[j], lp.cost[j]);
            if l > u {
                return None;
            }
            if l.is_finite() {
                maps.push(ColMap::Shift { col: upper.len(), offset: l });
                upper.push(u - l);
                cost.push(c);
            } else if u.is_finite() {
                maps.push(ColMap::Mirror { col: upper.len(), offset: u });
                upper.push(f64::INFINITY);
                cost.push(-c);
            } else {
                maps.push(ColMap::Split {
                    pos: upper.len(),
                    neg: upper.len() + 1,
                });
                upper.extend([f64::INFINITY, f64::INFINITY]);
                cost.extend([c, -c]);
            }
        }
        let n_struct = upper.len();
        let m = lp.rows.len();
        // dense rows over structural columns, with rhs adjusted for the shifts
        let mut dense = vec![vec![0.0; n_struct]; m];
        let mut rhs = vec![0.0; m];
        let mut senses = Vec::with_capacity(m);
        for (i, (terms, sense, b)) in lp.rows.iter().enumerate() {
            let mut b = *b;
            for &(j, a) in terms {
                match maps[j] {
                    ColMap::Shift { col, offset } => {
                        dense[i][col] += a;
                        b -= a * offset;
                    }
                    ColMap::Mirror { col, offset } => {
                        dense[i][col] -= a;
                        b -= a * offset;
                    }
                    ColMap::Split { pos, neg } => {
                        dense[i][pos] += a;
                        dense[i][neg] -= a;
                    }
                }
            }
            rhs[i] = b;
            senses.push(*sense);
        }
        // one slack per inequality, then artificials where the slack cannot start basic
        let n_slack = senses.iter().filter(|s| **s != Sense::Eq).count();
        let mut needs_art = vec![false; m];
        for i in 0..m {
            let slack_ok = match senses[i] {
                Sense::Le => rhs[i] >= 0.0,
                Sense::Ge => rhs[i] <= 0.0,
                Sense::Eq => false,
            };
            needs_art[i] = !slack_ok;
        }
        let n_art = needs_art.iter().filter(|&&x| x).count();
        let ncols = n_struct + n_slack + n_art;
        let artificial_start = n_struct + n_slack;
        let mut a = vec![0.0; m * ncols];
        let mut beta = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut slack = n_struct;
        let mut art = artificial_start;
        for i in 0..m {
            let row = &mut a[i * ncols..(i + 1) * ncols];
            row[..n_struct].copy_from_slice(&dense[i]);
            let mut slack_col = None;
            match senses[i] {
                Sense::Le => {
                    row[slack] = 1.0;
                    slack_col = Some(slack);
                    slack += 1;
                }
                Sense::Ge => {
                    row[slack] = -1.0;
                    slack_col = Some(slack);
                    slack += 1;
                }
                Sense::Eq => {}
            }
            let sign = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
            if needs_art[i] {
                for v in row.iter_mut() {
                    *v *= sign;
                }
                row[art] = 1.0;
                basis[i] = art;
                art += 1;
                beta[i] = rhs[i] * sign;
            } else {
                let s = slack_col.expect("slack basis only for inequalities");
                if row[s] < 0.0 {
                    for v in row.iter_mut() {
                        *v = -*v;
                    }
                }
                basis[i] = s;
                beta[i] = rhs[i].abs();
            }
        }
        upper.extend(std::iter::repeat(f64::INFINITY).take(n_slack + n_art));
        cost.extend(std::iter::repeat(0.0).take(n_slack + n_art));
        Some(Tableau {
            m,
            ncols,
            a,
            beta,
            basis,
            upper,
            at_upper: vec![false; ncols],
            cost,
            n_struct,
            artificial_start,
            maps,
        })
    }

    fn col(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.ncols + j]
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.a[i * self.ncols..(i + 1) * self.ncols];
                for (dj, aij) in d.iter_mut().zip(row) {
                    *dj -= cb * aij;
                }
            }
        }
        d
    }

    /// Runs simplex iterations on `cost`; returns false if unbounded.
    fn optimize(&mut self, cost: &[f64], max_iter: usize) -> Result<bool> {
        let mut in_basis = vec![false; self.ncols];
        for &b in &self.basis {
            in_basis[b] = true;
        }
        for _ in 0..max_iter {
            let d = self.reduced_costs(cost);
            let entering = (0..self.ncols).find(|&j| {
                !in_basis[j]
                    && self.upper[j] > 0.0
                    && ((!self.at_upper[j] && d[j] < -PIVOT_TOL) || (self.at_upper[j] && d[j] > PIVOT_TOL))
            });
            let Some(j) = entering else {
                return Ok(true);
            };
            let dir = if self.at_upper[j] { -1.0 } else { 1.0 };
            let mut best: Option<(f64, usize, bool)> = None;
            for i in 0..self.m {
                let alpha = dir * self.col(i, j);
                let b = self.basis[i];
                let limit = if alpha > PIVOT_TOL {
                    Some((self.beta[i].max(0.0) / alpha, false))
                } else if alpha < -PIVOT_TOL && self.upper[b].is_finite() {
                    Some(((self.upper[b] - self.beta[i]).max(0.0) / -alpha, true))
                } else {
                    None
                };
                if let Some((t, to_upper)) = limit {
                    let better = match best {
                        None => true,
                        Some((bt, r, _)) => t < bt - 1e-12 || (t <= bt + 1e-12 && b < self.basis[r]),
                    };
                    if better {
                        best = Some((t, i, to_upper));
                    }
                }
            }
            let (theta, leave) = match best {
                Some((t, r, up)) if t <= self.upper[j] => (t, Some((r, up))),
                _ => (self.upper[j], None),
            };
            if theta.is_infinite() {
                return Ok(false);
            }
            for i in 0..self.m {
                self.beta[i] -= dir * theta * self.col(i, j);
            }
            match leave {
                None => {
                    self.at_upper[j] = !self.at_upper[j];
                }
                Some((r, to_upper)) => {
                    let entering_value = if self.at_upper[j] {
                        self.upper[j] - theta
                    } else {
                        theta
                    };
                    let old = self.basis[r];
                    self.pivot(r, j);
                    self.beta[r] = entering_value;
                    in_basis[old] = false;
                    in_basis[j] = true;
                    self.at_upper[j] = false;
                    self.at_upper[old] = to_upper;
                }
            }
        }
        Err(Error::Solver(format!("simplex iteration limit {max_iter} reached")))
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let n = self.ncols;
        let p = self.a[r * n + j];
        for v in &mut self.a[r * n..(r + 1) * n] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.a[r * n..(r + 1) * n].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.a[i * n + j];
            if f != 0.0 {
                for (v, pr) in self.a[i * n..(i + 1) * n].iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                self.a[i * n + j] = 0.0;
            }
        }
        self.basis[r] = j;
    }

    fn value(&self, j: usize) -> f64 {
        if let Some(i) = self.basis.iter().position(|&b| b == j) {
            self.beta[i]
        } else if self.at_upper[j] {
            self.upper[j]
        } else {
            0.0
        }
    }

    fn run(&mut self, max_iter: usize) -> Result<LpOutcome> {
        if self.artificial_start < self.ncols {
            let phase1: Vec<f64> = (0..self.ncols)
                .map(|j| if j >= self.artificial_start { 1.0 } else { 0.0 })
                .collect();
            self.optimize(&phase1, max_iter)?;
            let infeas: f64 = (self.artificial_start..self.ncols).map(|j| self.value(j)).sum();
            let scale = 1.0 + self.beta.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if infeas > 1e-9 * scale {
                return Ok(LpOutcome::Infeasible);
            }
            for j in self.artificial_start..self.ncols {
                self.upper[j] = 0.0;
                self.at_upper[j] = false;
            }
            for i in 0..self.m {
                if self.basis[i] >= self.artificial_start {
                    self.beta[i] = 0.0;
                }
            }
        }
        let cost = self.cost.clone();
        if !self.optimize(&cost, max_iter)? {
            return Ok(LpOutcome::Unbounded);
        }
        let y: Vec<f64> = (0..self.n_struct).map(|j| self.value(j)).collect();
        let x: Vec<f64> = self
            .maps
            .iter()
            .map(|m| match *m {
                ColMap::Shift { col, offset } => offset + y[col],
                ColMap::Mirror { col, offset } => offset - y[col],
                ColMap::Split { pos, neg } => y[pos] - y[neg],
            })
            .collect();
        Ok(LpOutcome::Optimal { x, objective: 0.0 })
    }
}
