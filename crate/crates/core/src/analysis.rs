//! Experiments on top of the planner: sensitivity sweeps, regulated oral
//! schedules and solver comparisons across discretizations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::calibration::{default_regimens, regimen_doses, trial_grid, RegimenSpec};
use crate::domain::{cells_to_diameter, DrugParams, ParamBundle, TimeGrid};
use crate::dynamics::{simulate_pk, Simulation, WbcSampling};
use crate::error::{Error, Result};
use crate::solver::{solve_builtin, solve_external, BuiltinLimits, ExternalOptions, SolveResult, SolveStatus};
use crate::transcription::{build_deterministic, extract_plan, Bilinear, BuildOptions, MilpModel, ModelStats, TreatmentPlan};

/// Largest elimination rate a sweep may set (1/day).
pub const MAX_XI: f64 = 1.0;

#[derive(Debug, Clone)]
pub enum Backend {
    Builtin(BuiltinLimits),
    External(ExternalOptions),
}

pub fn solve_model(model: &MilpModel, backend: &Backend) -> Result<SolveResult> {
    match backend {
        Backend::Builtin(limits) => solve_builtin(model, *limits),
        Backend::External(opts) => solve_external(model, opts),
    }
}

/// Parameter scaled by a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepTarget {
    Xi(String),
    /// Kill effect on non-resistant cells; the resistant type follows through
    /// the drug's resistant factor.
    Eta0(String),
    EtaW(String),
    Rho(String),
    Neutropenia,
    /// Maximum permissible dose and concentration of one drug.
    MaxDose(String),
}

impl fmt::Display for SweepTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepTarget::Xi(d) => write!(f, "xi:{d}"),
            SweepTarget::Eta0(d) => write!(f, "eta0:{d}"),
            SweepTarget::EtaW(d) => write!(f, "eta_w:{d}"),
            SweepTarget::Rho(d) => write!(f, "rho:{d}"),
            SweepTarget::Neutropenia => f.write_str("neutropenia"),
            SweepTarget::MaxDose(d) => write!(f, "max_dose:{d}"),
        }
    }
}

impl FromStr for SweepTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, drug) = match s.split_once(':') {
            Some((k, d)) => (k, Some(d.to_string())),
            None => (s, None),
        };
        let need = |d: Option<String>| {
            d.filter(|d| !d.is_empty())
                .ok_or_else(|| Error::invariant("target", format!("`{kind}` needs a drug, e.g. `{kind}:docetaxel`")))
        };
        Ok(match kind {
            "xi" => SweepTarget::Xi(need(drug)?),
            "eta0" => SweepTarget::Eta0(need(drug)?),
            "eta_w" => SweepTarget::EtaW(need(drug)?),
            "rho" => SweepTarget::Rho(need(drug)?),
            "max_dose" => SweepTarget::MaxDose(need(drug)?),
            "neutropenia" => SweepTarget::Neutropenia,
            other => return Err(Error::invariant("target", format!("unknown sweep target `{other}`"))),
        })
    }
}

fn drug_mut<'a>(params: &'a mut ParamBundle, name: &str) -> Result<&'a mut DrugParams> {
    params
        .drugs
        .iter_mut()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::invariant("target", format!("unknown drug `{name}`")))
}

/// Pill counts moved away from the base level in the sweep direction.
fn remap_pills(base: f64, fraction: f64) -> f64 {
    let v = base * fraction;
    if fraction > 1.0 {
        v.ceil()
    } else {
        v.floor().max(1.0)
    }
}

fn regimen_peak(spec: &RegimenSpec, drug: &DrugParams, grid: &TimeGrid) -> Result<f64> {
    let g = trial_grid(spec, grid)?;
    let doses = regimen_doses(spec, &g)?;
    Ok(simulate_pk(drug, &doses, &g, g.compartment_volume)?.max())
}

/// Scales the selected parameter of `base` by `fraction`.
pub fn apply_target(base: &ParamBundle, target: &SweepTarget, fraction: f64) -> Result<ParamBundle> {
    if !(fraction > 0.0) {
        return Err(Error::invariant("fraction", "must be positive"));
    }
    let mut p = base.clone();
    if fraction == 1.0 {
        return Ok(p);
    }
    match target {
        SweepTarget::Xi(d) => {
            let drug = drug_mut(&mut p, d)?;
            drug.xi *= fraction;
            if drug.xi > MAX_XI {
                log::warn!("{d}: elimination rate capped at {MAX_XI}/day");
                drug.xi = MAX_XI;
            }
        }
        SweepTarget::Eta0(d) => drug_mut(&mut p, d)?.eta0 *= fraction,
        SweepTarget::EtaW(d) => drug_mut(&mut p, d)?.eta_w *= fraction,
        SweepTarget::Rho(d) => drug_mut(&mut p, d)?.rho *= fraction,
        SweepTarget::Neutropenia => p.wbc.beta_neu *= fraction,
        SweepTarget::MaxDose(d) => {
            let bsa = p.grid.body_surface;
            let grid = p.grid.clone();
            let drug = drug_mut(&mut p, d)?;
            let old = drug.clone();
            let daily_ratio = match drug.pill_mass {
                Some(pill) => {
                    let per_day = (drug.beta_cum * bsa / pill).floor().max(1.0);
                    let per_meal = (drug.beta_rate * bsa / pill).floor().max(1.0);
                    let new_day = remap_pills(per_day, fraction);
                    let new_meal = remap_pills(per_meal, fraction).min(new_day);
                    drug.beta_cum = new_day * pill / bsa;
                    drug.beta_rate = new_meal * pill / bsa;
                    new_day / per_day
                }
                None => {
                    drug.beta_cum *= fraction;
                    drug.beta_rate *= fraction;
                    fraction
                }
            };
            let spec = default_regimens().into_iter().find(|r| &r.drug == d);
            drug.beta_conc *= match spec {
                Some(spec) => {
                    let scaled = RegimenSpec {
                        dose: spec.dose * daily_ratio,
                        ..spec.clone()
                    };
                    regimen_peak(&scaled, &old, &grid)? / regimen_peak(&spec, &old, &grid)?
                }
                None => daily_ratio,
            };
        }
    }
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    /// Solver status, or `error: ...` when the point failed.
    pub status: String,
    pub objective: f64,
    pub gap: f64,
    pub runtime: f64,
}

/// One solve per fraction; failures are recorded and the sweep continues.
/// Points run concurrently and come back in input order.
pub fn sensitivity_sweep(
    base: &ParamBundle,
    target: &SweepTarget,
    fractions: &[f64],
    options: &(dyn Fn(&ParamBundle) -> BuildOptions + Sync),
    backend: &Backend,
) -> Vec<SweepPoint> {
    fractions
        .par_iter()
        .map(|&fraction| {
            let run = || -> Result<SolveResult> {
                let p = apply_target(base, target, fraction)?;
                let model = build_deterministic(&p, &options(&p))?;
                solve_model(&model, backend)
            };
            match run() {
                Ok(r) => SweepPoint {
                    fraction,
                    status: r.status.to_string(),
                    objective: r.objective,
                    gap: r.gap,
                    runtime: r.runtime,
                },
                Err(e) => {
                    log::warn!("{target} at {fraction}: {e}");
                    SweepPoint {
                        fraction,
                        status: format!("error: {e}"),
                        objective: f64::NAN,
                        gap: f64::NAN,
                        runtime: 0.0,
                    }
                }
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, target: &SweepTarget, points: &[SweepPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["target", "fraction", "objective", "status", "gap", "runtime_s"])?;
    for p in points {
        out.write_record([
            target.to_string(),
            p.fraction.to_string(),
            p.objective.to_string(),
            p.status.clone(),
            p.gap.to_string(),
            format!("{:.3}", p.runtime),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fractions from `lo` to `hi` inclusive in steps of `step`.
pub fn fraction_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

/// Smallest neutrophil count (cells/m^3) over a daily white blood cell series.
pub fn min_neutrophils(params: &ParamBundle, wbc: &[f64]) -> f64 {
    wbc.iter().fold(f64::INFINITY, |m, &n| m.min(params.wbc.theta_neu * n))
}

#[derive(Debug, Clone)]
pub struct Regularization {
    pub plan: TreatmentPlan,
    pub base_objective: f64,
    pub regulated_objective: f64,
    /// Regulated minus optimal diameter (mm).
    pub diameter_delta_mm: f64,
    pub min_neutrophils: f64,
    /// Broken operational or toxicity limits of the regulated plan.
    pub violations: Vec<String>,
}

impl Regularization {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replaces every oral schedule with a constant daily pill pattern: the plan's
/// total pills over its dosing days, divided evenly (rounded down) and spread
/// over the meals. Days without any dose of that drug stay rest days unless
/// `keep_rest_days` is false.
pub fn regularize_plan(
    plan: &TreatmentPlan,
    params: &ParamBundle,
    sampling: WbcSampling,
    keep_rest_days: bool,
) -> Result<Regularization> {
    let grid = &params.grid;
    let spd = grid.steps_per_day();
    let days = grid.horizon_days as usize;
    let meals = grid.meal_offsets();
    let bsa = grid.body_surface;
    let mut reg = TreatmentPlan::zero(params);
    for (d, drug) in params.drugs.iter().enumerate() {
        let Some(pill) = drug.pill_mass else {
            reg.doses[d] = plan.doses[d].clone();
            continue;
        };
        let daily = &plan.daily_totals(spd)[d];
        let dosing: Vec<usize> = (0..days).filter(|&m| !keep_rest_days || daily[m] > 1e-9).collect();
        if dosing.is_empty() {
            continue;
        }
        let pills: f64 = daily.iter().map(|g| (g / pill).round()).sum();
        let per_day = (pills / dosing.len() as f64).floor() as usize;
        let per_meal_cap = ((drug.beta_rate * bsa + 1e-9) / pill).floor() as usize;
        let mut pattern = vec![0usize; meals.len()];
        for i in 0..per_day {
            pattern[i % meals.len()] += 1;
        }
        if pattern.iter().any(|&c| c > per_meal_cap) {
            log::warn!("{}: {per_day} pills a day exceed the per-meal cap", drug.name);
        }
        for &m in &dosing {
            for (i, &off) in meals.iter().enumerate() {
                reg.doses[d][m * spd + off] = pattern[i] as f64 * pill;
            }
        }
    }
    let base_sim = plan.simulate(params, sampling)?;
    let sim = reg.simulate(params, sampling)?;
    let violations = plan_violations(&reg, &sim, params);
    let min_neu = min_neutrophils(params, &sim.wbc.values);
    let base_obj = base_sim.final_objective();
    let reg_obj = sim.final_objective();
    let delta = cells_to_diameter(sim.final_cells())? - cells_to_diameter(base_sim.final_cells())?;
    reg.concentration = sim.concentration.iter().map(|t| t.values.clone()).collect();
    reg.effective = params
        .drugs
        .iter()
        .zip(&reg.concentration)
        .map(|(d, c)| c.iter().map(|&v| (v - d.beta_eff).max(0.0)).collect())
        .collect();
    reg.log_pops = sim.log_pops.iter().map(|t| t.values.clone()).collect();
    reg.wbc = sim.wbc.values.clone();
    Ok(Regularization {
        plan: reg,
        base_objective: base_obj,
        regulated_objective: reg_obj,
        diameter_delta_mm: delta,
        min_neutrophils: min_neu,
        violations,
    })
}

/// Operational and toxicity limits broken by a simulated plan. Relative
/// tolerance 1e-6.
pub fn plan_violations(plan: &TreatmentPlan, sim: &Simulation, params: &ParamBundle) -> Vec<String> {
    let tol = 1e-6;
    let grid = &params.grid;
    let spd = grid.steps_per_day();
    let mut out = Vec::new();
    for (d, drug) in params.drugs.iter().enumerate() {
        let cap = drug.conc_cap(grid.compartment_volume);
        if let Some(s) = sim.concentration[d].values.iter().position(|&c| c > cap * (1.0 + tol)) {
            out.push(format!("{}: concentration above cap at step {s}", drug.name));
        }
        let step_cap = drug.max_step_dose(grid);
        for (s, &u) in plan.doses[d].iter().enumerate() {
            if u > step_cap * (1.0 + tol) {
                out.push(format!("{}: dose {u} g at step {s} above the per-step cap", drug.name));
                break;
            }
            if drug.pill_mass.is_some() && u > 0.0 && !grid.is_meal_step(s) {
                out.push(format!("{}: dose outside meal time at step {s}", drug.name));
                break;
            }
        }
        let day_cap = drug.max_daily_dose(grid);
        if let Some(m) = plan.daily_totals(spd)[d].iter().position(|&t| t > day_cap * (1.0 + tol)) {
            out.push(format!("{}: daily dose above cap on day {m}", drug.name));
        }
    }
    let floor = params.wbc.beta_neu;
    if let Some(m) = sim
        .wbc
        .values
        .iter()
        .position(|&n| params.wbc.theta_neu * n < floor * (1.0 - tol))
    {
        out.push(format!("neutropenia on day {m}"));
    }
    let floor = params.wbc.beta_lym;
    if let Some(m) = sim
        .wbc
        .values
        .iter()
        .position(|&n| params.wbc.theta_lym * n < floor * (1.0 - tol))
    {
        out.push(format!("lymphocytopenia on day {m}"));
    }
    out
}

/// One solver configuration in a comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigSpec {
    pub step_minutes: u32,
    /// Discretization levels; `None` selects McCormick envelopes.
    pub levels: Option<usize>,
}

impl fmt::Display for ConfigSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.levels {
            Some(k) => write!(f, "h={}min discrete 1/{k}", self.step_minutes),
            None => write!(f, "h={}min mccormick", self.step_minutes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub config: ConfigSpec,
    pub status: String,
    pub objective: f64,
    pub gap: f64,
    pub runtime: f64,
    pub stats: Option<ModelStats>,
    /// Smallest neutrophil count in the solved model (cells/m^3).
    pub min_neutrophils: f64,
}

/// Builds and solves the deterministic model for each configuration in turn.
pub fn compare_configurations(params: &ParamBundle, configs: &[ConfigSpec], backend: &Backend) -> Vec<ComparisonRow> {
    configs
        .iter()
        .map(|&config| {
            let mut stats = None;
            let mut run = || -> Result<(SolveResult, f64)> {
                let mut p = params.clone();
                p.grid = p.grid.with_step_minutes(config.step_minutes)?;
                let bilinear = match config.levels {
                    Some(k) => Bilinear::discrete(&p, k),
                    None => Bilinear::McCormick,
                };
                let model = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(bilinear))?;
                stats = Some(model.stats());
                let r = solve_model(&model, backend)?;
                let neu = if r.has_assignment() && r.status != SolveStatus::Infeasible {
                    min_neutrophils(&p, &extract_plan(&model, &p, &r.assignment)?.wbc)
                } else {
                    f64::NAN
                };
                Ok((r, neu))
            };
            match run() {
                Ok((r, neu)) => ComparisonRow {
                    config,
                    status: r.status.to_string(),
                    objective: r.objective,
                    gap: r.gap,
                    runtime: r.runtime,
                    stats,
                    min_neutrophils: neu,
                },
                Err(e) => ComparisonRow {
                    config,
                    status: format!("error: {e}"),
                    objective: f64::NAN,
                    gap: f64::NAN,
                    runtime: 0.0,
                    stats,
                    min_neutrophils: f64::NAN,
                },
            }
        })
        .collect()
}

pub fn write_comparison_csv<W: std::io::Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "config",
        "step_minutes",
        "bilinear",
        "objective",
        "status",
        "gap",
        "runtime_s",
        "constraints",
        "variables",
        "integers",
        "binaries",
        "min_neutrophils",
    ])?;
    for r in rows {
        let s = r.stats.unwrap_or_default();
        out.write_record([
            r.config.to_string(),
            r.config.step_minutes.to_string(),
            r.config.levels.map_or("mccormick".to_string(), |k| format!("1/{k}")),
            r.objective.to_string(),
            r.status.clone(),
            r.gap.to_string(),
            format!("{:.3}", r.runtime),
            s.constraints.to_string(),
            s.variables.to_string(),
            s.integers.to_string(),
            s.binaries.to_string(),
            r.min_neutrophils.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_params;

    #[test]
    fn target_parsing() {
        assert_eq!("eta0:docetaxel".parse::<SweepTarget>().unwrap(), SweepTarget::Eta0("docetaxel".into()));
        assert_eq!("neutropenia".parse::<SweepTarget>().unwrap(), SweepTarget::Neutropenia);
        assert!("xi".parse::<SweepTarget>().is_err());
        assert!("bogus:x".parse::<SweepTarget>().is_err());
    }

    #[test]
    fn pill_regimens_remap() {
        let p = default_params();
        let bsa = p.grid.body_surface;
        let pills = |b: &ParamBundle, d: &str| {
            let drug = &b.drugs[b.drug_index(d).unwrap()];
            let pill = drug.pill_mass.unwrap();
            ((drug.beta_cum * bsa / pill).round(), (drug.beta_rate * bsa / pill).round())
        };
        let t = |d: &str| SweepTarget::MaxDose(d.into());
        assert_eq!(pills(&apply_target(&p, &t("capecitabine"), 1.25).unwrap(), "capecitabine"), (10.0, 5.0));
        assert_eq!(pills(&apply_target(&p, &t("capecitabine"), 0.75).unwrap(), "capecitabine"), (6.0, 3.0));
        assert_eq!(pills(&apply_target(&p, &t("etoposide"), 1.25).unwrap(), "etoposide"), (3.0, 2.0));
        assert_eq!(pills(&apply_target(&p, &t("etoposide"), 0.75).unwrap(), "etoposide"), (1.0, 1.0));
        let up = apply_target(&p, &t("capecitabine"), 1.25).unwrap();
        let i = p.drug_index("capecitabine").unwrap();
        assert!((up.drugs[i].beta_conc / p.drugs[i].beta_conc - 1.25).abs() < 1e-9);
    }

    #[test]
    fn xi_capped() {
        let p = default_params();
        let q = apply_target(&p, &SweepTarget::Xi("etoposide".into()), 1.5).unwrap();
        assert_eq!(q.drugs[p.drug_index("etoposide").unwrap()].xi, MAX_XI);
    }

    #[test]
    fn identity_fraction() {
        let p = default_params();
        assert_eq!(apply_target(&p, &SweepTarget::Neutropenia, 1.0).unwrap(), p);
    }

    #[test]
    fn grid_of_fractions() {
        assert_eq!(fraction_grid(0.8, 1.2, 0.1), vec![0.8, 0.9, 1.0, 1.1, 1.2]);
    }

    #[test]
    fn constant_plan_is_fixed_point() {
        let p = default_params();
        let mut plan = TreatmentPlan::zero(&p);
        let spd = p.grid.steps_per_day();
        let i = p.drug_index("etoposide").unwrap();
        for day in 0..p.grid.horizon_days as usize {
            plan.doses[i][day * spd + p.grid.meal_offsets()[0]] = 0.05;
        }
        let r = regularize_plan(&plan, &p, WbcSampling::DayStart, true).unwrap();
        assert_eq!(r.plan.doses, plan.doses);
        assert_eq!(r.diameter_delta_mm, 0.0);
    }
}
