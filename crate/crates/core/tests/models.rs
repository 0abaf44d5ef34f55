use chemoplan::solver::{solve_builtin, BuiltinLimits, SolveStatus};
use chemoplan::transcription::{build_chance_constrained, build_deterministic, extract_plan, names};
use chemoplan::validate::{micro_chemo_params, restrict_tumor};
use chemoplan::*;

fn within(actual: usize, reference: f64, frac: f64) -> bool {
    (actual as f64 - reference).abs() <= frac * reference
}

fn single_drug(drug: &str, days: u32, minutes: u32) -> ParamBundle {
    let base = default_params();
    let d = base.drug_index(drug).unwrap();
    let mut p = base.clone();
    p.drugs = vec![base.drugs[d].clone()];
    p.tumor = restrict_tumor(&p.tumor, drug);
    p.grid = p.grid.with_horizon(days).with_step_minutes(minutes).unwrap();
    p.wbc.delay_days = 1;
    p.grid.wbc_lag_days = 1;
    p
}

fn two_scenarios(p: &ParamBundle) -> ScenarioSet {
    let labels = p.tumor.cell_types.iter().map(|c| c.name.clone()).collect();
    ScenarioSet::new(
        labels,
        vec![
            Scenario { log_pops: vec![20.5, 17.9], prob: 0.7 },
            Scenario { log_pops: vec![20.3, 19.5], prob: 0.3 },
        ],
    )
    .unwrap()
}

fn with_scenario_start(p: &ParamBundle, s: &Scenario) -> ParamBundle {
    let mut q = p.clone();
    q.tumor = p.tumor.with_initial(&s.log_pops.iter().map(|v| v.exp()).collect::<Vec<_>>());
    q
}

#[test]
fn deterministic_sizes_match_reference() {
    let base = default_params();
    for (minutes, cons, vars, ints, bins) in [(240, 8547.0, 3759.0, 714, 588), (60, 17619.0, 9051.0, 1092, 966)] {
        let mut p = base.clone();
        p.grid = p.grid.with_step_minutes(minutes).unwrap();
        let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::discrete(&p, 20))).unwrap();
        let s = m.stats();
        assert!(within(s.constraints, cons, 0.15), "h={minutes}: {s:?}");
        assert!(within(s.variables, vars, 0.15), "h={minutes}: {s:?}");
        assert_eq!((s.integers, s.binaries), (ints, bins), "h={minutes}");
    }
}

#[test]
fn chance_size_matches_reference() {
    let mut p = default_params();
    p.grid = p.grid.with_step_minutes(60).unwrap();
    let o = BuildOptions::new(&p)
        .with_bilinear(Bilinear::discrete(&p, 20))
        .with_scenarios(default_scenarios(), 0.05, 0.4e9);
    let s = build_chance_constrained(&p, &o).unwrap().stats();
    assert!(within(s.constraints, 35804.0, 0.15), "{s:?}");
    assert!(within(s.variables, 27205.0, 0.15), "{s:?}");
    assert_eq!((s.integers, s.binaries), (1102, 976));
}

#[test]
fn mccormick_bounds_discrete_on_micro_instances() {
    let p = micro_chemo_params(&default_params()).unwrap();
    let solve = |b: Bilinear| {
        let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(b)).unwrap();
        let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        r.objective
    };
    let relaxed = solve(Bilinear::McCormick);
    for k in [2, 4, 8] {
        assert!(relaxed <= solve(Bilinear::discrete(&p, k)) + 1e-9, "K={k}");
    }
}

#[test]
fn extracted_plan_reproduces_states() {
    let p = micro_chemo_params(&default_params()).unwrap();
    let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::McCormick)).unwrap();
    let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
    let plan = extract_plan(&m, &p, &r.assignment).unwrap();
    let sim = plan.simulate(&p, WbcSampling::DayStart).unwrap();
    for (model, simulated) in plan.log_pops.iter().zip(&sim.log_pops) {
        for (a, b) in model.iter().zip(&simulated.values) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    for (model, simulated) in plan.concentration.iter().zip(&sim.concentration) {
        for (a, b) in model.iter().zip(&simulated.values) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn oral_doses_are_whole_pills_at_meals() {
    let p = micro_chemo_params(&default_params()).unwrap();
    let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::discrete(&p, 4))).unwrap();
    let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
    let plan = extract_plan(&m, &p, &r.assignment).unwrap();
    let pill = p.drugs[0].pill_mass.unwrap();
    assert!(plan.doses[0].iter().any(|&u| u > 0.0));
    for (s, &u) in plan.doses[0].iter().enumerate() {
        if !p.grid.is_meal_step(s) {
            assert_eq!(u, 0.0, "step {s}");
        }
        let pills = u / pill;
        assert!((pills - pills.round()).abs() <= 1e-6, "step {s}: {pills} pills");
    }
}

#[test]
fn infusion_days_are_followed_by_rest() {
    let p = single_drug("docetaxel", 9, 720);
    let rest = p.drugs[0].rest_days.unwrap() as usize;
    let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::McCormick)).unwrap();
    let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    let plan = extract_plan(&m, &p, &r.assignment).unwrap();
    let daily = &plan.daily_totals(p.grid.steps_per_day())[0];
    assert!(daily.iter().any(|&u| u > 1e-9));
    for (day, &u) in daily.iter().enumerate() {
        if u > 1e-9 {
            for later in day + 1..(day + 1 + rest).min(daily.len()) {
                assert!(daily[later] <= 1e-9, "dose on day {later} within rest after day {day}");
            }
        }
    }
}

#[test]
fn drug_free_model_matches_simulation() {
    let mut p = default_params().without_drugs();
    p.grid = p.grid.with_horizon(4).with_step_minutes(720).unwrap();
    let m = build_deterministic(&p, &BuildOptions::new(&p)).unwrap();
    let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
    let sim = TreatmentPlan::zero(&p).simulate(&p, WbcSampling::DayStart).unwrap();
    assert!((r.objective - sim.final_objective()).abs() <= 1e-6);
}

#[test]
fn selected_scenarios_reach_target() {
    let p = single_drug("docetaxel", 3, 720);
    let set = two_scenarios(&p);
    let n_surg = 0.98 * set.scenarios[0].total_cells();
    let o = BuildOptions::new(&p)
        .with_bilinear(Bilinear::McCormick)
        .with_scenarios(set.clone(), 0.3, n_surg);
    let m = build_chance_constrained(&p, &o).unwrap();
    let r = solve_builtin(&m, BuiltinLimits::default()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    let plan = extract_plan(&m, &p, &r.assignment).unwrap();
    let mass: f64 = plan.selected_scenarios.iter().map(|&k| set.scenarios[k].prob).sum();
    assert!(mass >= 0.7 - 1e-9);
    for &k in &plan.selected_scenarios {
        let q = with_scenario_start(&p, &set.scenarios[k]);
        let sim = plan.simulate(&q, WbcSampling::DayStart).unwrap();
        assert!(sim.final_cells() <= n_surg * (1.0 + 1e-9), "scenario {k}");
    }
}

#[test]
fn single_scenario_forces_target() {
    let p = single_drug("docetaxel", 3, 720);
    let set = ScenarioSet::new(
        p.tumor.cell_types.iter().map(|c| c.name.clone()).collect(),
        vec![Scenario { log_pops: vec![20.5, 17.9], prob: 1.0 }],
    )
    .unwrap();
    let n_surg = 0.99 * set.scenarios[0].total_cells();
    let o = BuildOptions::new(&p)
        .with_bilinear(Bilinear::McCormick)
        .with_scenarios(set.clone(), 0.0, n_surg);
    let r = solve_builtin(&build_chance_constrained(&p, &o).unwrap(), BuiltinLimits::default()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!((r.assignment[&names::zsurg(0)] - 1.0).abs() <= 1e-6);
    let q = with_scenario_start(&p, &set.scenarios[0]);
    let det = build_deterministic(&q, &BuildOptions::new(&q).with_bilinear(Bilinear::McCormick)).unwrap();
    let d = solve_builtin(&det, BuiltinLimits::default()).unwrap();
    assert!(r.objective >= d.objective - 1e-9);
}
