//! Parameter estimation from clinical-trial descriptions.
//!
//! The kill effect of a drug is fitted so that a simulated cohort treated with
//! the trial regimen reaches the trial's partial response rate. A patient
//! responds when the tumor diameter halves, i.e. the population drops below
//! `N0 / 8`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DrugParams, TimeGrid, TumorParams, DEFAULT_REGIMENS};
use crate::dynamics::{effective_concentration, simulate_pk, Trajectory};
use crate::error::{Error, Result};

/// Step used for calibration runs (minutes).
pub const CALIBRATION_STEP_MINUTES: u32 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimenSpec {
    pub drug: String,
    /// Dose per administration (g/m^2).
    pub dose: f64,
    /// Hour offsets of the administrations within each dosing day.
    pub admin_hours: Vec<f64>,
    pub on_days: u32,
    pub rest_days: u32,
    pub cycles: u32,
    /// Partial response rate observed in the trial.
    pub response_rate: f64,
}

#[derive(Debug, Deserialize)]
struct RegimenFile {
    regimen: Vec<RegimenSpec>,
}

impl RegimenSpec {
    pub fn cycle_days(&self) -> u32 {
        self.on_days + self.rest_days
    }

    pub fn trial_days(&self) -> u32 {
        self.cycles * self.cycle_days()
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("regimen.{}.{f}", self.drug);
        if !(self.response_rate > 0.0 && self.response_rate < 1.0) {
            return Err(Error::invariant(field("response_rate"), "must lie in (0, 1)"));
        }
        if !(self.dose >= 0.0) {
            return Err(Error::invariant(field("dose"), "must be non-negative"));
        }
        if self.on_days == 0 || self.cycles == 0 {
            return Err(Error::invariant(field("on_days"), "need at least one dosing day and cycle"));
        }
        if self.admin_hours.iter().any(|&h| !(0.0..24.0).contains(&h)) {
            return Err(Error::invariant(field("admin_hours"), "must lie within [0, 24)"));
        }
        Ok(())
    }
}

pub fn parse_regimens(text: &str, origin: &Path) -> Result<Vec<RegimenSpec>> {
    let file: RegimenFile = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0),
        message: e.message().to_string(),
    })?;
    for r in &file.regimen {
        r.validate()?;
    }
    Ok(file.regimen)
}

pub fn load_regimens(path: impl AsRef<Path>) -> Result<Vec<RegimenSpec>> {
    let path = path.as_ref();
    parse_regimens(&fs::read_to_string(path)?, path)
}

pub fn default_regimens() -> Vec<RegimenSpec> {
    parse_regimens(DEFAULT_REGIMENS, Path::new("regimens.toml")).expect("shipped regimens are valid")
}

/// Hourly grid covering every cycle of the trial.
pub fn trial_grid(spec: &RegimenSpec, base: &TimeGrid) -> Result<TimeGrid> {
    base.with_horizon(spec.trial_days())
        .with_step_minutes(CALIBRATION_STEP_MINUTES)
}

/// Dose mass (g) per grid step for the trial regimen.
pub fn regimen_doses(spec: &RegimenSpec, grid: &TimeGrid) -> Result<Vec<f64>> {
    if grid.horizon_days < spec.trial_days() {
        return Err(Error::invariant(
            "grid.horizon_days",
            format!(
                "{} days is shorter than the {}-day trial of {}",
                grid.horizon_days,
                spec.trial_days(),
                spec.drug
            ),
        ));
    }
    let mut doses = vec![0.0; grid.n_steps()];
    let mass = spec.dose * grid.body_surface;
    for cycle in 0..spec.cycles {
        for day in 0..spec.on_days {
            let d = (cycle * spec.cycle_days() + day) as usize;
            for &hr in &spec.admin_hours {
                let offset = ((hr * 60.0) / f64::from(grid.step_minutes)).floor() as usize;
                doses[grid.day_start(d) + offset] += mass;
            }
        }
    }
    Ok(doses)
}

/// Effective concentration produced by the trial regimen.
pub fn regimen_to_effective_concentration(spec: &RegimenSpec, drug: &DrugParams, grid: &TimeGrid) -> Result<Trajectory> {
    let doses = regimen_doses(spec, grid)?;
    let mut traj = simulate_pk(drug, &doses, grid, grid.compartment_volume)?;
    for v in &mut traj.values {
        *v = effective_concentration(*v, drug.beta_eff);
    }
    traj.label = format!("{} effective", drug.name);
    Ok(traj)
}

/// Gompertz drift of an aggregate tumor on an Euler grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub lambda: f64,
    pub p0: f64,
    pub p_inf: f64,
    /// Step in days.
    pub h: f64,
}

impl Drift {
    /// Aggregate tumor: total initial and asymptotic populations.
    pub fn from_tumor(tumor: &TumorParams, h: f64) -> Drift {
        Drift {
            lambda: tumor.lambda,
            p0: tumor.cell_types.iter().map(|c| c.n0).sum::<f64>().ln(),
            p_inf: tumor.cell_types.iter().map(|c| c.n_inf).sum::<f64>().ln(),
            h,
        }
    }
}

/// Final log-population for kill effect `eta` under effective concentration
/// `e` (one value per grid point; the last is unused). No temporal resistance.
pub fn simulate_final(e: &[f64], eta: f64, drift: &Drift) -> f64 {
    let n = e.len().saturating_sub(1);
    let mut p = drift.p0;
    for &es in &e[..n] {
        p += drift.h * (drift.lambda * (drift.p_inf - p) - eta * es);
    }
    p
}

/// Drug-free final value `a` and kill sensitivity `b`: final = a - eta * b.
fn affine_terms(e: &[f64], drift: &Drift) -> (f64, f64) {
    let a = simulate_final(e, 0.0, drift);
    let decay = 1.0 - drift.h * drift.lambda;
    let n = e.len().saturating_sub(1);
    let mut b = 0.0;
    for &es in &e[..n] {
        b = decay * b + drift.h * es;
    }
    (a, b)
}

/// Kill effect whose perturbed cohort (`eta + eps_k`) has mean final
/// log-population equal to `target`.
pub fn solve_eta_for_delta(e: &[f64], eps: &[f64], target: f64, drift: &Drift) -> Result<f64> {
    let (a, b) = affine_terms(e, drift);
    if !(b > 0.0) {
        return Err(Error::Unidentifiable(
            "effective concentration is zero throughout the trial".into(),
        ));
    }
    let eps_mean = if eps.is_empty() {
        0.0
    } else {
        eps.iter().sum::<f64>() / eps.len() as f64
    };
    Ok((a - target) / b - eps_mean)
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub trials: usize,
    /// Perturbation standard deviation as a fraction of the kill effect.
    pub sigma_frac: f64,
    pub seed: u64,
    /// Accepted distance between simulated and target response rate.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            trials: 1000,
            sigma_frac: 0.10,
            seed: 2021,
            tolerance: 0.01,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub eta: f64,
    pub delta: f64,
    pub response_rate: f64,
    pub iterations: usize,
}

/// Fraction of trials whose final log-population is at or below `threshold`.
pub fn simulated_response(e: &[f64], etas: &[f64], drift: &Drift, threshold: f64) -> f64 {
    let hits = etas
        .par_iter()
        .filter(|&&eta| simulate_final(e, eta, drift) <= threshold)
        .count();
    hits as f64 / etas.len() as f64
}

/// Fits the kill effect on non-resistant cells to the trial response rate by
/// bisection on the mean offset `delta`. Perturbations use standard normal
/// draws fixed by the seed, scaled so that sigma is `sigma_frac` times the
/// returned kill effect.
pub fn calibrate_kill_effect(
    spec: &RegimenSpec,
    drug: &DrugParams,
    tumor: &TumorParams,
    base_grid: &TimeGrid,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    spec.validate()?;
    if opts.trials == 0 {
        return Err(Error::invariant("trials", "must be positive"));
    }
    let grid = trial_grid(spec, base_grid)?;
    let e = regimen_to_effective_concentration(spec, drug, &grid)?.values;
    let drift = Drift::from_tumor(tumor, grid.h());
    let threshold = drift.p0 - 8f64.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let z: Vec<f64> = (0..opts.trials).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z_mean = z.iter().sum::<f64>() / z.len() as f64;

    // eta solves mean(final) = threshold + delta with eps_k = sigma_frac * eta * z_k
    let at = |delta: f64| -> Result<(f64, f64)> {
        let c = solve_eta_for_delta(&e, &[], threshold + delta, &drift)?;
        let eta = c / (1.0 + opts.sigma_frac * z_mean);
        let etas: Vec<f64> = z.iter().map(|zk| eta * (1.0 + opts.sigma_frac * zk)).collect();
        Ok((eta, simulated_response(&e, &etas, &drift, threshold)))
    };

    let target = spec.response_rate;
    let (a, _) = affine_terms(&e, &drift);
    // at delta_hi the kill effect is zero and nobody responds
    let mut hi = a - threshold;
    let (_, prr_hi) = at(hi)?;
    let mut lo = -1.0;
    let (mut eta_lo, mut prr_lo) = at(lo)?;
    while prr_lo < target && lo > -64.0 {
        lo *= 2.0;
        (eta_lo, prr_lo) = at(lo)?;
    }
    if prr_lo < target || prr_hi > target {
        return Err(Error::Bracket {
            target,
            lo: prr_hi,
            hi: prr_lo,
        });
    }
    let mut best = Calibration {
        eta: eta_lo,
        delta: lo,
        response_rate: prr_lo,
        iterations: 0,
    };
    for it in 1..=opts.max_iterations {
        let mid = 0.5 * (lo + hi);
        let (eta, prr) = at(mid)?;
        if (prr - target).abs() < (best.response_rate - target).abs() || hi - lo < 1e-12 {
            best = Calibration {
                eta,
                delta: mid,
                response_rate: prr,
                iterations: it,
            };
        }
        if (prr - target).abs() <= opts.tolerance || hi - lo < 1e-12 {
            log::info!(
                "{}: eta = {:.4e} after {it} bisection steps (response {:.3})",
                drug.name,
                eta,
                prr
            );
            return Ok(Calibration {
                eta,
                delta: mid,
                response_rate: prr,
                iterations: it,
            });
        }
        if prr > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    log::warn!(
        "{}: bisection stopped after {} steps with response {:.3}",
        drug.name,
        opts.max_iterations,
        best.response_rate
    );
    Ok(best)
}

/// Gompertz shape from the population doubling time at `n0`.
pub fn gompertz_shape(n0: f64, n_inf: f64, doubling_days: f64) -> Result<f64> {
    if !(n0 > 0.0) {
        return Err(Error::invariant("n0", "must be positive"));
    }
    if !(n_inf > 2.0 * n0) {
        return Err(Error::invariant("n_inf", "must exceed twice n0"));
    }
    if !(doubling_days > 0.0) {
        return Err(Error::invariant("doubling_days", "must be positive"));
    }
    Ok(((n_inf / n0).ln() / (n_inf / (2.0 * n0)).ln()).ln() / doubling_days)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_params;

    fn spec(drug: &str) -> RegimenSpec {
        default_regimens().into_iter().find(|r| r.drug == drug).unwrap()
    }

    #[test]
    fn gompertz_anchor() {
        let l = gompertz_shape(1e9, 1e12, 150.0).unwrap();
        assert!((l - 7.05e-4).abs() < 5e-6);
        assert!(gompertz_shape(1e9, 1.5e9, 150.0).is_err());
    }

    #[test]
    fn docetaxel_impulses() {
        let p = default_params();
        let s = spec("docetaxel");
        let g = trial_grid(&s, &p.grid).unwrap();
        let doses = regimen_doses(&s, &g).unwrap();
        let given: Vec<(usize, f64)> = doses.iter().cloned().enumerate().filter(|&(_, v)| v > 0.0).collect();
        assert_eq!(given.len(), 7);
        for (i, (step, mass)) in given.iter().enumerate() {
            assert!((mass - 0.17).abs() < 1e-12);
            assert_eq!(*step, i * 21 * 24 + 8);
        }
    }

    #[test]
    fn short_grid_rejected() {
        let p = default_params();
        let s = spec("docetaxel");
        assert!(regimen_doses(&s, &p.grid).is_err());
    }

    #[test]
    fn closed_form_without_drift() {
        let drift = Drift {
            lambda: 0.0,
            p0: 20.0,
            p_inf: 27.0,
            h: 0.5,
        };
        let e = vec![2.0; 11];
        let eta = solve_eta_for_delta(&e, &[0.0; 4], 18.0, &drift).unwrap();
        assert!((eta - 2.0 / (0.5 * 20.0)).abs() < 1e-12);
        let e2: Vec<f64> = e.iter().map(|v| v * 2.0).collect();
        let eta2 = solve_eta_for_delta(&e2, &[0.0; 4], 18.0, &drift).unwrap();
        assert!((eta2 - eta / 2.0).abs() < 1e-12);
        assert!(solve_eta_for_delta(&[0.0; 5], &[], 18.0, &drift).is_err());
    }
}
