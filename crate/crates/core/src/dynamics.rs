//! Forward simulation of drug concentration (PK), tumor log-populations (PD)
//! and white blood cell counts, plus the RK4 reference integrator and the
//! Euler global error bound used to validate the discretization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{DrugParams, ParamBundle, TimeGrid, TumorParams, WbcParams};
use crate::error::{Error, Result};

/// A state sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    pub unit: &'static str,
    /// Days, strictly increasing.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn new(label: impl Into<String>, unit: &'static str, times: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(times.len(), values.len());
        Trajectory {
            label: label.into(),
            unit,
            times,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("non-empty trajectory")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_trajectories_csv(w, &[self])
    }
}

/// Writes trajectories sharing one time axis as columns `t_days,<label> (<unit>),...`.
pub fn write_trajectories_csv<W: Write>(w: W, trajs: &[&Trajectory]) -> Result<()> {
    let Some(first) = trajs.first() else {
        return Ok(());
    };
    for t in trajs {
        if t.len() != first.len() {
            return Err(Error::LengthMismatch {
                what: "trajectory columns",
                expected: first.len(),
                actual: t.len(),
            });
        }
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t_days".to_string()];
    header.extend(trajs.iter().map(|t| format!("{} ({})", t.label, t.unit)));
    out.write_record(&header)?;
    for i in 0..first.len() {
        let mut row = vec![format!("{}", first.times[i])];
        row.extend(trajs.iter().map(|t| format!("{:e}", t.values[i])));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// How white blood cell dynamics sample drug concentration within a day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WbcSampling {
    /// Grid point at the start of the day.
    #[default]
    DayStart,
    /// Mean of the day's grid points.
    DayAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Pk,
    Pd,
}

/// Absolute stability of forward Euler for linear decay at `rate`: h < 2/rate.
pub fn check_stability(h: f64, rate: f64, _kind: RateKind) -> bool {
    h * rate < 2.0
}

pub fn require_stable(h: f64, rate: f64, kind: RateKind) -> Result<()> {
    if check_stability(h, rate, kind) {
        Ok(())
    } else {
        Err(Error::Unstable {
            h,
            rate,
            limit: 2.0 / rate,
        })
    }
}

pub fn effective_concentration(c: f64, beta_eff: f64) -> f64 {
    (c - beta_eff).max(0.0)
}

fn check_doses(doses: &[f64], grid: &TimeGrid) -> Result<()> {
    let s = grid.n_steps();
    if doses.len() != s && doses.len() != s + 1 {
        return Err(Error::LengthMismatch {
            what: "doses",
            expected: s + 1,
            actual: doses.len(),
        });
    }
    Ok(())
}

/// Euler PK recursion. `doses[s]` is the mass (g) administered at step `s`;
/// the value at index S, if present, is ignored.
pub fn simulate_pk(drug: &DrugParams, doses: &[f64], grid: &TimeGrid, volume: f64) -> Result<Trajectory> {
    check_doses(doses, grid)?;
    let h = grid.h();
    if !check_stability(h, drug.xi, RateKind::Pk) {
        log::warn!("{}: h = {h} day is not below 2/xi = {}", drug.name, 2.0 / drug.xi);
    }
    let n = grid.n_steps();
    let mut c = vec![0.0; n + 1];
    for s in 0..n {
        c[s + 1] = c[s] - h * drug.xi * c[s] + doses[s] / volume;
    }
    Ok(Trajectory::new(drug.name.clone(), "g/m^3", grid.times(), c))
}

/// Kill effect of each drug on each cell type, indexed `[d][q]`.
pub fn kill_matrix(tumor: &TumorParams, drugs: &[DrugParams]) -> Vec<Vec<f64>> {
    drugs
        .iter()
        .map(|d| {
            tumor
                .cell_types
                .iter()
                .map(|c| d.eta_for(c.resistant_to.as_deref() == Some(d.name.as_str())))
                .collect()
        })
        .collect()
}

/// Euler PD recursion driven by effective concentrations, one slice per drug.
pub fn simulate_pd_effective(
    tumor: &TumorParams,
    drugs: &[DrugParams],
    effective: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Vec<Trajectory>> {
    if effective.len() != drugs.len() {
        return Err(Error::LengthMismatch {
            what: "concentration trajectories",
            expected: drugs.len(),
            actual: effective.len(),
        });
    }
    let n = grid.n_steps();
    for e in effective {
        if e.len() != n + 1 {
            return Err(Error::LengthMismatch {
                what: "concentration trajectory",
                expected: n + 1,
                actual: e.len(),
            });
        }
    }
    let h = grid.h();
    let eta = kill_matrix(tumor, drugs);
    let times = grid.times();
    let out = tumor
        .cell_types
        .iter()
        .enumerate()
        .map(|(q, cell)| {
            let p_inf = cell.n_inf.ln();
            let mut p = vec![0.0; n + 1];
            p[0] = cell.n0.ln();
            for s in 0..n {
                let t = times[s];
                let kill: f64 = (0..drugs.len())
                    .map(|d| eta[d][q] * (-drugs[d].rho * t).exp() * effective[d][s])
                    .sum();
                p[s + 1] = p[s] + h * (tumor.lambda * (p_inf - p[s]) - kill);
            }
            Trajectory::new(cell.name.clone(), "ln cells", times.clone(), p)
        })
        .collect();
    Ok(out)
}

/// Euler PD recursion from drug concentrations; applies each drug's threshold.
pub fn simulate_pd(
    tumor: &TumorParams,
    drugs: &[DrugParams],
    concentrations: &[Trajectory],
    grid: &TimeGrid,
) -> Result<Vec<Trajectory>> {
    let eff: Vec<Vec<f64>> = drugs
        .iter()
        .zip(concentrations)
        .map(|(d, c)| c.values.iter().map(|&v| effective_concentration(v, d.beta_eff)).collect())
        .collect();
    if concentrations.len() != drugs.len() {
        return Err(Error::LengthMismatch {
            what: "concentration trajectories",
            expected: drugs.len(),
            actual: concentrations.len(),
        });
    }
    simulate_pd_effective(tumor, drugs, &eff, grid)
}

/// Per-day concentration samples (length M+1) taken from a step trajectory.
pub fn day_samples(conc: &Trajectory, grid: &TimeGrid, sampling: WbcSampling) -> Vec<f64> {
    let m = grid.horizon_days as usize;
    (0..=m)
        .map(|day| match sampling {
            WbcSampling::DayStart => conc.values[grid.day_start(day)],
            WbcSampling::DayAverage if day < m => {
                let r = grid.day_steps(day);
                let len = r.len() as f64;
                conc.values[r].iter().sum::<f64>() / len
            }
            WbcSampling::DayAverage => conc.values[grid.n_steps()],
        })
        .collect()
}

/// Day-resolution white blood cell recursion with delay `wbc.delay_days`.
/// `day_conc[d]` holds M+1 daily concentration samples for drug `d`.
pub fn simulate_wbc(wbc: &WbcParams, drugs: &[DrugParams], day_conc: &[Vec<f64>], days: usize) -> Result<Trajectory> {
    if day_conc.len() != drugs.len() {
        return Err(Error::LengthMismatch {
            what: "daily concentration series",
            expected: drugs.len(),
            actual: day_conc.len(),
        });
    }
    for c in day_conc {
        if c.len() != days + 1 {
            return Err(Error::LengthMismatch {
                what: "daily concentrations",
                expected: days + 1,
                actual: c.len(),
            });
        }
    }
    let tau = wbc.delay_days as usize;
    let mut n = vec![0.0; days + 1];
    n[0] = wbc.n_w0;
    for m in 0..days {
        let mut next = n[m] + (wbc.production - wbc.turnover * n[m]);
        if m >= tau {
            next -= drugs
                .iter()
                .zip(day_conc)
                .map(|(d, c)| d.eta_w * n[m] * c[m - tau])
                .sum::<f64>();
        }
        n[m + 1] = next;
    }
    let times = (0..=days).map(|m| m as f64).collect();
    Ok(Trajectory::new("white blood cells", "cells/m^3", times, n))
}

/// Every simulated state for one dosing plan.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub concentration: Vec<Trajectory>,
    pub log_pops: Vec<Trajectory>,
    pub wbc: Trajectory,
}

impl Simulation {
    /// Σ_q P_{q,S}.
    pub fn final_objective(&self) -> f64 {
        self.log_pops.iter().map(Trajectory::last).sum()
    }

    pub fn final_cells(&self) -> f64 {
        self.log_pops.iter().map(|p| p.last().exp()).sum()
    }
}

/// Runs PK, PD and WBC dynamics for `doses[d][s]` (g).
pub fn simulate_all(params: &ParamBundle, doses: &[Vec<f64>], sampling: WbcSampling) -> Result<Simulation> {
    let grid = &params.grid;
    if doses.len() != params.drugs.len() {
        return Err(Error::LengthMismatch {
            what: "dose schedules",
            expected: params.drugs.len(),
            actual: doses.len(),
        });
    }
    let concentration = params
        .drugs
        .iter()
        .zip(doses)
        .map(|(d, u)| simulate_pk(d, u, grid, grid.compartment_volume))
        .collect::<Result<Vec<_>>>()?;
    let log_pops = simulate_pd(&params.tumor, &params.drugs, &concentration, grid)?;
    let daily: Vec<Vec<f64>> = concentration.iter().map(|c| day_samples(c, grid, sampling)).collect();
    let wbc = simulate_wbc(&params.wbc, &params.drugs, &daily, grid.horizon_days as usize)?;
    Ok(Simulation {
        concentration,
        log_pops,
        wbc,
    })
}

/// RK4 solution sampled on the coarse grid, plus the fine trace it came from.
#[derive(Debug, Clone)]
pub struct Reference {
    pub concentration: Vec<Trajectory>,
    pub log_pops: Vec<Trajectory>,
    pub fine_step: f64,
    /// `[d]` fine concentration samples (left limits at impulse instants).
    pub fine_concentration: Vec<Vec<f64>>,
    pub fine_log_pops: Vec<Vec<f64>>,
    /// Fine indices at which an impulse is applied.
    pub impulse_indices: Vec<usize>,
}

/// Classical RK4 on the continuous PK/PD system with impulsive dosing.
///
/// Doses jump the concentration by `U/V` at their administration instant; the
/// coarse samples are left limits so they line up with the Euler states.
pub fn rk4_reference(
    tumor: &TumorParams,
    drugs: &[DrugParams],
    doses: &[Vec<f64>],
    grid: &TimeGrid,
    volume: f64,
    fine_step: f64,
) -> Result<Reference> {
    let h = grid.h();
    if !(fine_step > 0.0) || fine_step > h / 16.0 + 1e-15 {
        return Err(Error::invariant("fine_step", format!("must be in (0, h/16] with h = {h}")));
    }
    if doses.len() != drugs.len() {
        return Err(Error::LengthMismatch {
            what: "dose schedules",
            expected: drugs.len(),
            actual: doses.len(),
        });
    }
    for u in doses {
        check_doses(u, grid)?;
    }
    let sub = (h / fine_step).ceil() as usize;
    let dt = h / sub as f64;
    let n = grid.n_steps();
    let nd = drugs.len();
    let nq = tumor.len();
    let eta = kill_matrix(tumor, drugs);
    let p_inf = tumor.log_n_inf();

    let deriv = |t: f64, c: &[f64], p: &[f64], dc: &mut [f64], dp: &mut [f64]| {
        for d in 0..nd {
            dc[d] = -drugs[d].xi * c[d];
        }
        for q in 0..nq {
            let kill: f64 = (0..nd)
                .map(|d| eta[d][q] * (-drugs[d].rho * t).exp() * effective_concentration(c[d], drugs[d].beta_eff))
                .sum();
            dp[q] = tumor.lambda * (p_inf[q] - p[q]) - kill;
        }
    };

    let mut c = vec![0.0; nd];
    let mut p = tumor.log_n0();
    let mut coarse_c = vec![vec![0.0; n + 1]; nd];
    let mut coarse_p = vec![vec![0.0; n + 1]; nq];
    let mut fine_c = vec![Vec::with_capacity(n * sub + 1); nd];
    let mut fine_p = vec![Vec::with_capacity(n * sub + 1); nq];
    let mut impulses = Vec::new();
    let (mut k1c, mut k2c, mut k3c, mut k4c) = (vec![0.0; nd], vec![0.0; nd], vec![0.0; nd], vec![0.0; nd]);
    let (mut k1p, mut k2p, mut k3p, mut k4p) = (vec![0.0; nq], vec![0.0; nq], vec![0.0; nq], vec![0.0; nq]);
    let mut tc = vec![0.0; nd];
    let mut tp = vec![0.0; nq];

    for s in 0..=n {
        for d in 0..nd {
            coarse_c[d][s] = c[d];
        }
        for q in 0..nq {
            coarse_p[q][s] = p[q];
        }
        if s == n {
            break;
        }
        if doses.iter().any(|u| u[s] != 0.0) {
            impulses.push(s * sub);
        }
        for d in 0..nd {
            c[d] += doses[d][s] / volume;
        }
        for j in 0..sub {
            let t = grid.time(s) + j as f64 * dt;
            for d in 0..nd {
                fine_c[d].push(if j == 0 { coarse_c[d][s] } else { c[d] });
            }
            for q in 0..nq {
                fine_p[q].push(p[q]);
            }
            deriv(t, &c, &p, &mut k1c, &mut k1p);
            for d in 0..nd {
                tc[d] = c[d] + 0.5 * dt * k1c[d];
            }
            for q in 0..nq {
                tp[q] = p[q] + 0.5 * dt * k1p[q];
            }
            deriv(t + 0.5 * dt, &tc, &tp, &mut k2c, &mut k2p);
            for d in 0..nd {
                tc[d] = c[d] + 0.5 * dt * k2c[d];
            }
            for q in 0..nq {
                tp[q] = p[q] + 0.5 * dt * k2p[q];
            }
            deriv(t + 0.5 * dt, &tc, &tp, &mut k3c, &mut k3p);
            for d in 0..nd {
                tc[d] = c[d] + dt * k3c[d];
            }
            for q in 0..nq {
                tp[q] = p[q] + dt * k3p[q];
            }
            deriv(t + dt, &tc, &tp, &mut k4c, &mut k4p);
            for d in 0..nd {
                c[d] += dt / 6.0 * (k1c[d] + 2.0 * k2c[d] + 2.0 * k3c[d] + k4c[d]);
            }
            for q in 0..nq {
                p[q] += dt / 6.0 * (k1p[q] + 2.0 * k2p[q] + 2.0 * k3p[q] + k4p[q]);
            }
        }
    }
    for d in 0..nd {
        fine_c[d].push(c[d]);
    }
    for q in 0..nq {
        fine_p[q].push(p[q]);
    }

    let times = grid.times();
    Ok(Reference {
        concentration: drugs
            .iter()
            .zip(coarse_c)
            .map(|(d, v)| Trajectory::new(d.name.clone(), "g/m^3", times.clone(), v))
            .collect(),
        log_pops: tumor
            .cell_types
            .iter()
            .zip(coarse_p)
            .map(|(cell, v)| Trajectory::new(cell.name.clone(), "ln cells", times.clone(), v))
            .collect(),
        fine_step: dt,
        fine_concentration: fine_c,
        fine_log_pops: fine_p,
        impulse_indices: impulses,
    })
}

/// Single-drug PK reference.
pub fn rk4_pk(drug: &DrugParams, doses: &[f64], grid: &TimeGrid, volume: f64, fine_step: f64) -> Result<Trajectory> {
    let tumor = TumorParams {
        lambda: 1.0,
        cell_types: Vec::new(),
    };
    let drug = DrugParams {
        eta0: 0.0,
        ..drug.clone()
    };
    let r = rk4_reference(&tumor, std::slice::from_ref(&drug), &[doses.to_vec()], grid, volume, fine_step)?;
    Ok(r.concentration.into_iter().next().expect("one drug"))
}

impl Reference {
    /// Max |second difference| / dt^2 over stencils that do not straddle an
    /// impulse (the concentration is smooth only between doses).
    pub fn curvature(series: &[f64], dt: f64, impulses: &[usize]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..series.len().saturating_sub(1) {
            if impulses.iter().any(|&k| k == i || k == i + 1) {
                continue;
            }
            let d2 = (series[i + 1] - 2.0 * series[i] + series[i - 1]) / (dt * dt);
            worst = worst.max(d2.abs());
        }
        worst
    }

    pub fn alpha_concentration(&self, d: usize) -> f64 {
        Self::curvature(&self.fine_concentration[d], self.fine_step, &self.impulse_indices)
    }

    pub fn alpha_log_pop(&self, q: usize) -> f64 {
        Self::curvature(&self.fine_log_pops[q], self.fine_step, &self.impulse_indices)
    }
}

/// Global Euler error bound for a state driven by an Euler-approximated
/// input, over horizon `horizon` days with step `h`.
pub fn euler_error_bound(h: f64, horizon: f64, lipschitz_g: f64, lipschitz_f: f64, alpha_z: f64, alpha_y: f64) -> Result<f64> {
    if !(lipschitz_g > 0.0) || !(lipschitz_f > 0.0) {
        return Err(Error::invariant("lipschitz", "constants must be positive"));
    }
    if alpha_z < 0.0 || alpha_y < 0.0 || h < 0.0 {
        return Err(Error::invariant("alpha", "curvature bounds and h must be non-negative"));
    }
    let inner = alpha_z / lipschitz_g * (lipschitz_g * horizon).exp_m1() + alpha_y / lipschitz_f;
    Ok(0.5 * h * inner * (lipschitz_f * horizon).exp_m1())
}

/// Bound on |Euler − exact| for each cell type's log-population under a
/// single drug, with curvatures measured on `reference`.
pub fn single_drug_pd_bounds(
    tumor: &TumorParams,
    drug: &DrugParams,
    grid: &TimeGrid,
    reference: &Reference,
) -> Result<Vec<f64>> {
    let eta = kill_matrix(tumor, std::slice::from_ref(drug));
    let horizon = grid.time(grid.n_steps());
    let alpha_c = reference.alpha_concentration(0);
    (0..tumor.len())
        .map(|q| {
            let lf = eta[0][q].abs().max(tumor.lambda.abs());
            euler_error_bound(grid.h(), horizon, drug.xi.abs(), lf, alpha_c, reference.alpha_log_pop(q))
        })
        .collect()
}
