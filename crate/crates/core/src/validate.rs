//! Property suites run by `chemoplan validate`: integrator stability, Euler
//! error bounds, dominance, solver oracle equivalence and the branching
//! process expectation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{ParamBundle, TumorParams};
use crate::dynamics::{
    check_stability, rk4_reference, simulate_pd, simulate_pd_effective, simulate_pk, single_drug_pd_bounds, RateKind,
};
use crate::error::{Error, Result};
use crate::scenarios::{expected_populations, simulate_branching, BranchingConfig};
use crate::solver::{brute_force, solve_builtin, BuiltinLimits, SolveResult, SolveStatus};
use crate::transcription::{build_deterministic, Bilinear, BuildOptions, MilpModel, Sense, VarKind};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn from(name: &'static str, r: Result<String>) -> SuiteReport {
        match r {
            Ok(detail) => SuiteReport {
                name,
                passed: true,
                detail,
            },
            Err(e) => SuiteReport {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

fn fail(msg: String) -> Error {
    Error::Model(msg)
}

pub fn run_all(params: &ParamBundle, seed: u64) -> Vec<SuiteReport> {
    vec![
        SuiteReport::from("stability", stability_suite(params)),
        SuiteReport::from("error-bounds", error_bound_suite(params)),
        SuiteReport::from("dominance", dominance_suite(params, seed)),
        SuiteReport::from("oracle-equivalence", oracle_suite(params, seed)),
        SuiteReport::from("branching-expectation", branching_suite(seed)),
    ]
}

/// Step lengths of the shipped grid are stable for every rate; doubling past
/// 2/rate is flagged; a drug-free tumor grows monotonically.
pub fn stability_suite(params: &ParamBundle) -> Result<String> {
    let h = params.grid.h();
    let mut rates: Vec<(String, f64, RateKind)> = params
        .drugs
        .iter()
        .map(|d| (d.name.clone(), d.xi, RateKind::Pk))
        .collect();
    rates.push(("tumor".into(), params.tumor.lambda, RateKind::Pd));
    for (name, rate, kind) in &rates {
        if !check_stability(h, *rate, *kind) {
            return Err(fail(format!("{name}: h = {h} is unstable")));
        }
        if check_stability(2.0 / rate * 1.01, *rate, *kind) {
            return Err(fail(format!("{name}: step beyond 2/rate reported stable")));
        }
    }
    let free = params.without_drugs();
    let pd = simulate_pd(&free.tumor, &[], &[], &free.grid)?;
    let total: Vec<f64> = (0..=free.grid.n_steps())
        .map(|s| pd.iter().map(|t| t.values[s]).sum())
        .collect();
    if total.windows(2).any(|w| w[1] < w[0]) {
        return Err(fail("drug-free log-population decreased".into()));
    }
    Ok(format!("{} rates stable at h = {h:.5} day", rates.len()))
}

fn capecitabine_instance(params: &ParamBundle, step_minutes: u32) -> Result<(ParamBundle, Vec<f64>)> {
    let d = params
        .drug_index("capecitabine")
        .ok_or_else(|| Error::invariant("drug", "capecitabine is required for the error-bound suite"))?;
    let mut p = params.clone();
    p.drugs = vec![params.drugs[d].clone()];
    p.tumor = restrict_tumor(&p.tumor, "capecitabine");
    p.grid = p.grid.with_horizon(5).with_step_minutes(step_minutes)?;
    let drug = &p.drugs[0];
    let per_meal = drug.max_step_dose(&p.grid);
    let pill = drug.pill_mass.unwrap_or(per_meal);
    let dose = (per_meal / pill).floor() * pill;
    let mut doses = vec![0.0; p.grid.n_steps()];
    for day in 0..5 {
        for off in p.grid.meal_offsets().into_iter().take(2) {
            doses[p.grid.day_start(day) + off] = dose;
        }
    }
    Ok((p, doses))
}

/// Maximum Euler error over all grid points and cell types, and whether every
/// point respects the bound.
pub fn euler_errors(params: &ParamBundle, step_minutes: u32, fine_step: f64) -> Result<(f64, bool)> {
    let (p, doses) = capecitabine_instance(params, step_minutes)?;
    let g = &p.grid;
    let vol = g.compartment_volume;
    let c = simulate_pk(&p.drugs[0], &doses, g, vol)?;
    let euler = simulate_pd(&p.tumor, &p.drugs, std::slice::from_ref(&c), g)?;
    let reference = rk4_reference(&p.tumor, &p.drugs, std::slice::from_ref(&doses), g, vol, fine_step)?;
    let bounds = single_drug_pd_bounds(&p.tumor, &p.drugs[0], g, &reference)?;
    let mut worst: f64 = 0.0;
    let mut within = true;
    for (q, traj) in euler.iter().enumerate() {
        for (a, b) in traj.values.iter().zip(&reference.log_pops[q].values) {
            let err = (a - b).abs();
            worst = worst.max(err);
            within &= err <= bounds[q];
        }
    }
    Ok((worst, within))
}

/// Single-drug five-day instance at 60 and 30 minute steps.
pub fn error_bound_suite(params: &ParamBundle) -> Result<String> {
    let fine = (30.0 / 1440.0) / 32.0;
    let (e60, ok60) = euler_errors(params, 60, fine)?;
    let (e30, ok30) = euler_errors(params, 30, fine)?;
    if !ok60 || !ok30 {
        return Err(fail("Euler error exceeds the bound".into()));
    }
    let ratio = e30 / e60;
    if !(0.3..=0.7).contains(&ratio) {
        return Err(fail(format!("error ratio {ratio:.3} is not first order")));
    }
    Ok(format!("max error {e60:.3e} (60 min), {e30:.3e} (30 min), ratio {ratio:.3}"))
}

/// Larger effective concentration never leaves a larger tumor.
pub fn dominance_suite(params: &ParamBundle, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = params.grid.with_horizon(3);
    if params.tumor.lambda * grid.h() > 1.0 {
        return Err(fail("dominance needs lambda * h <= 1".into()));
    }
    let n = grid.n_steps() + 1;
    let nd = params.drugs.len();
    let mut violations = 0;
    for _ in 0..200 {
        let e2: Vec<Vec<f64>> = (0..nd).map(|_| (0..n).map(|_| rng.gen::<f64>() * 10.0).collect()).collect();
        let e1: Vec<Vec<f64>> = e2
            .iter()
            .map(|row| row.iter().map(|v| v + rng.gen::<f64>() * 5.0).collect())
            .collect();
        let p1 = simulate_pd_effective(&params.tumor, &params.drugs, &e1, &grid)?;
        let p2 = simulate_pd_effective(&params.tumor, &params.drugs, &e2, &grid)?;
        violations += p1.iter().zip(&p2).filter(|(a, b)| a.last() > b.last()).count();
    }
    if violations > 0 {
        return Err(fail(format!("{violations} dominance violations")));
    }
    Ok("200 pairs, no violations".into())
}

/// Random pure integer/mixed programs small enough to enumerate.
pub fn random_micro_milp(rng: &mut ChaCha8Rng, index: usize) -> MilpModel {
    let mut m = MilpModel::new(format!("micro{index}"));
    let n_int = rng.gen_range(2..=5);
    let n_cont = rng.gen_range(0..=2);
    let mut vars = Vec::new();
    for j in 0..n_int {
        let kind = if rng.gen_bool(0.4) { VarKind::Binary } else { VarKind::Integer };
        let ub = if kind == VarKind::Binary { 1.0 } else { rng.gen_range(1..=4) as f64 };
        vars.push(m.add_var(format!("z{j}"), kind, 0.0, ub));
    }
    for j in 0..n_cont {
        vars.push(m.add_var(format!("x{j}"), VarKind::Continuous, 0.0, rng.gen_range(1.0..6.0)));
    }
    for r in 0..rng.gen_range(1..=4) {
        let terms: Vec<(usize, f64)> = vars
            .iter()
            .map(|&j| (j, (rng.gen_range(-3.0..5.0f64) * 4.0).round() / 4.0))
            .filter(|&(_, c)| c != 0.0)
            .collect();
        let sense = match rng.gen_range(0..3) {
            0 => Sense::Ge,
            1 => Sense::Eq,
            _ => Sense::Le,
        };
        let rhs = (rng.gen_range(0.0..8.0f64) * 2.0).round() / 2.0;
        m.add_con(format!("r{r}"), terms, sense, rhs);
    }
    m.objective = vars
        .iter()
        .map(|&j| (j, (rng.gen_range(-5.0..5.0f64) * 8.0).round() / 8.0))
        .filter(|&(_, c)| c != 0.0)
        .collect();
    m
}

fn same_outcome(a: &SolveResult, b: &SolveResult, tol: f64) -> bool {
    match (a.status, b.status) {
        (SolveStatus::Optimal, SolveStatus::Optimal) => (a.objective - b.objective).abs() <= tol,
        (x, y) => x == y,
    }
}

/// Two-day, six-hour-step etoposide instance small enough for enumeration.
pub fn micro_chemo_params(params: &ParamBundle) -> Result<ParamBundle> {
    let d = params
        .drug_index("etoposide")
        .ok_or_else(|| Error::invariant("drug", "etoposide is required for the micro instance"))?;
    let mut p = params.clone();
    p.drugs = vec![params.drugs[d].clone()];
    p.tumor = restrict_tumor(&p.tumor, "etoposide");
    p.grid = p.grid.with_horizon(2).with_step_minutes(360)?;
    p.wbc.delay_days = 1;
    p.grid.wbc_lag_days = 1;
    p.validate()?;
    Ok(p)
}

pub fn micro_chemo_model(params: &ParamBundle) -> Result<MilpModel> {
    let p = micro_chemo_params(params)?;
    build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::McCormick))
}

/// Branch-and-bound against enumeration on random programs and a chemo model.
pub fn oracle_suite(params: &ParamBundle, seed: u64) -> Result<String> {
    let limits = BuiltinLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..50 {
        let m = random_micro_milp(&mut rng, i);
        let a = solve_builtin(&m, limits)?;
        let b = brute_force(&m, limits)?;
        if !same_outcome(&a, &b, 1e-7) {
            return Err(fail(format!(
                "micro {i}: branch-and-bound {} {} vs enumeration {} {}",
                a.status, a.objective, b.status, b.objective
            )));
        }
    }
    let m = micro_chemo_model(params)?;
    let a = solve_builtin(&m, limits)?;
    let b = brute_force(&m, limits)?;
    if !same_outcome(&a, &b, 1e-7) || a.status != SolveStatus::Optimal {
        return Err(fail(format!(
            "chemo micro model: branch-and-bound {} {} vs enumeration {} {}",
            a.status, a.objective, b.status, b.objective
        )));
    }
    Ok(format!("50 random programs and the chemo micro model agree (objective {:.9})", a.objective))
}

/// Monte Carlo means of the branching process against the closed form.
pub fn branching_suite(seed: u64) -> Result<String> {
    let mut worst: f64 = 0.0;
    for t in [5u32, 15, 30] {
        let cfg = BranchingConfig {
            generations: t,
            replications: 2000,
            seed,
            ..BranchingConfig::default()
        };
        let pops = simulate_branching(&cfg)?;
        let expect = expected_populations(&cfg, t);
        let n = pops.len() as f64;
        let mean = pops.iter().map(|r| r[0] as f64).sum::<f64>() / n;
        let var = pops.iter().map(|r| (r[0] as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let z = if se > 0.0 { (mean - expect[0]).abs() / se } else { (mean - expect[0]).abs() };
        worst = worst.max(z);
        if z > 3.0 {
            return Err(fail(format!("t = {t}: mean {mean:.4e} is {z:.2} standard errors from {:.4e}", expect[0])));
        }
    }
    Ok(format!("largest deviation {worst:.2} standard errors"))
}

/// Tumor with only the cell types relevant to `drug`.
pub fn restrict_tumor(tumor: &TumorParams, drug: &str) -> TumorParams {
    TumorParams {
        lambda: tumor.lambda,
        cell_types: tumor
            .cell_types
            .iter()
            .filter(|c| c.resistant_to.is_none() || c.resistant_to.as_deref() == Some(drug))
            .cloned()
            .collect(),
    }
}
