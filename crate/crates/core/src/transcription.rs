//! MILP transcription of the chemotherapy planning problem.
//!
//! White blood cell quantities inside the model are expressed in units of
//! [`WBC_SCALE`] cells/m^3 to keep coefficients well conditioned.

use std::collections::HashMap;
use std::fmt;

use crate::domain::{ParamBundle, Route, ScenarioSet};
use crate::dynamics::{self, RateKind, Simulation, WbcSampling};
use crate::error::{Error, Result};

pub const WBC_SCALE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Integer,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjSense {
    Minimize,
    Maximize,
}

/// Dimensions of a chemotherapy model, kept so solutions can be decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct ChemoLayout {
    pub n_drugs: usize,
    pub n_types: usize,
    pub n_steps: usize,
    pub n_days: usize,
    /// Number of scenarios with their own PD block; 0 for deterministic models.
    pub n_scenarios: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpModel {
    pub name: String,
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub sense: ObjSense,
    pub objective: Vec<(usize, f64)>,
    pub var_index: HashMap<String, usize>,
    pub layout: Option<ChemoLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelStats {
    pub variables: usize,
    pub constraints: usize,
    pub integers: usize,
    pub binaries: usize,
}

impl MilpModel {
    pub fn new(name: impl Into<String>) -> Self {
        MilpModel {
            name: name.into(),
            variables: Vec::new(),
            constraints: Vec::new(),
            sense: ObjSense::Minimize,
            objective: Vec::new(),
            var_index: HashMap::new(),
            layout: None,
        }
    }

    /// Adds a variable; panics on a duplicate name (a builder bug).
    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lower: f64, upper: f64) -> usize {
        let name = name.into();
        let (lower, upper) = match kind {
            VarKind::Binary => (lower.max(0.0), upper.min(1.0)),
            _ => (lower, upper),
        };
        let idx = self.variables.len();
        let prev = self.var_index.insert(name.clone(), idx);
        assert!(prev.is_none(), "duplicate variable name {name}");
        self.variables.push(Variable {
            name,
            kind,
            lower,
            upper,
        });
        idx
    }

    pub fn add_con(&mut self, name: impl Into<String>, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint {
            name: name.into(),
            terms,
            sense,
            rhs,
        });
    }

    pub fn var(&self, name: &str) -> Option<usize> {
        self.var_index.get(name).copied()
    }

    pub fn is_integer(&self, j: usize) -> bool {
        self.variables[j].kind != VarKind::Continuous
    }

    pub fn stats(&self) -> ModelStats {
        ModelStats {
            variables: self.variables.len(),
            constraints: self.constraints.len(),
            integers: self.variables.iter().filter(|v| v.kind != VarKind::Continuous).count(),
            binaries: self.variables.iter().filter(|v| v.kind == VarKind::Binary).count(),
        }
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|&(j, c)| c * x[j]).sum()
    }

    /// Checks structural invariants: indices in range, bounds ordered, names unique.
    pub fn validate(&self) -> Result<()> {
        let n = self.variables.len();
        if self.var_index.len() != n {
            return Err(Error::Model("variable names are not unique".into()));
        }
        for v in &self.variables {
            if !(v.lower <= v.upper) {
                return Err(Error::Model(format!("variable {} has lower > upper", v.name)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.constraints {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Model(format!("duplicate constraint name {}", c.name)));
            }
            if c.terms.iter().any(|&(j, _)| j >= n) {
                return Err(Error::Model(format!("constraint {} references a missing variable", c.name)));
            }
        }
        if self.objective.iter().any(|&(j, _)| j >= n) {
            return Err(Error::Model("objective references a missing variable".into()));
        }
        Ok(())
    }
}

impl fmt::Display for MilpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let term = |f: &mut fmt::Formatter<'_>, terms: &[(usize, f64)]| -> fmt::Result {
            for (i, &(j, c)) in terms.iter().enumerate() {
                let name = &self.variables[j].name;
                match (i, c < 0.0) {
                    (0, _) => write!(f, " {c} {name}")?,
                    (_, true) => write!(f, " - {} {name}", -c)?,
                    (_, false) => write!(f, " + {c} {name}")?,
                }
            }
            Ok(())
        };
        let sense = match self.sense {
            ObjSense::Minimize => "minimize",
            ObjSense::Maximize => "maximize",
        };
        write!(f, "{sense}:")?;
        term(f, &self.objective)?;
        writeln!(f)?;
        writeln!(f, "subject to")?;
        for c in &self.constraints {
            write!(f, "  {}:", c.name)?;
            term(f, &c.terms)?;
            let op = match c.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            writeln!(f, " {op} {}", c.rhs)?;
        }
        writeln!(f, "bounds")?;
        for v in &self.variables {
            let kind = match v.kind {
                VarKind::Continuous => "",
                VarKind::Integer => " int",
                VarKind::Binary => " bin",
            };
            writeln!(f, "  {} <= {} <= {}{kind}", v.lower, v.name, v.upper)?;
        }
        Ok(())
    }
}

/// Approximation of the bilinear white blood cell kill term N_w * C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bilinear {
    McCormick,
    /// `levels` intervals of `width` cells/m^3 above the toxicity bound.
    Discrete { levels: usize, width: f64 },
}

impl Bilinear {
    pub fn discrete(params: &ParamBundle, levels: usize) -> Bilinear {
        Bilinear::Discrete {
            levels,
            width: (params.wbc.n_w0 - params.wbc.beta_w()) / levels as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Minimize the summed final log-populations.
    Shrinkage,
    /// Maximize the probability of reaching an operable size.
    Probability,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub bilinear: Bilinear,
    pub objective: Objective,
    pub scenario_set: Option<ScenarioSet>,
    pub epsilon: f64,
    /// Operable tumor size (cells).
    pub n_surg: f64,
    pub sampling: WbcSampling,
    /// Adds the valid equality Σ_k V_k = C to the discrete block.
    pub tighten_levels: bool,
}

impl BuildOptions {
    pub fn new(params: &ParamBundle) -> Self {
        BuildOptions {
            bilinear: Bilinear::discrete(params, 20),
            objective: Objective::Shrinkage,
            scenario_set: None,
            epsilon: 0.05,
            n_surg: 0.4e9,
            sampling: WbcSampling::DayStart,
            tighten_levels: true,
        }
    }

    pub fn with_bilinear(mut self, b: Bilinear) -> Self {
        self.bilinear = b;
        self
    }

    pub fn with_scenarios(mut self, set: ScenarioSet, epsilon: f64, n_surg: f64) -> Self {
        self.scenario_set = Some(set);
        self.epsilon = epsilon;
        self.n_surg = n_surg;
        self
    }

    pub fn with_objective(mut self, o: Objective) -> Self {
        self.objective = o;
        self
    }

    fn validate(&self, params: &ParamBundle) -> Result<()> {
        if let Bilinear::Discrete { levels, width } = self.bilinear {
            let span = params.wbc.n_w0 - params.wbc.beta_w();
            if levels == 0 || !(width > 0.0) || ((levels as f64 * width - span) / span).abs() > 1e-9 {
                return Err(Error::invariant(
                    "bilinear",
                    format!("levels * width must equal n_w0 - beta_w = {span}"),
                ));
            }
        }
        Ok(())
    }
}

pub mod names {
    pub fn u(d: usize, s: usize) -> String {
        format!("U_d{d}_s{s}")
    }
    pub fn c(d: usize, s: usize) -> String {
        format!("C_d{d}_s{s}")
    }
    pub fn e(d: usize, s: usize) -> String {
        format!("E_d{d}_s{s}")
    }
    pub fn ze(d: usize, s: usize) -> String {
        format!("ZE_d{d}_s{s}")
    }
    pub fn zpill(d: usize, s: usize) -> String {
        format!("Zpill_d{d}_s{s}")
    }
    pub fn zrest(d: usize, m: usize) -> String {
        format!("Zrest_d{d}_m{m}")
    }
    pub fn p(q: usize, s: usize) -> String {
        format!("P_q{q}_s{s}")
    }
    pub fn pk(k: usize, q: usize, s: usize) -> String {
        format!("P_k{k}_q{q}_s{s}")
    }
    pub fn zsurg(k: usize) -> String {
        format!("Zsurg_k{k}")
    }
    pub fn nw(m: usize) -> String {
        format!("Nw_m{m}")
    }
    pub fn cday(d: usize, m: usize) -> String {
        format!("Cday_d{d}_m{m}")
    }
}

/// Deterministic model: minimize Σ_q P_{q,S} from the bundle's initial state.
pub fn build_deterministic(params: &ParamBundle, options: &BuildOptions) -> Result<MilpModel> {
    let mut b = Builder::new(params, options, "chemo_deterministic")?;
    b.controls();
    b.wbc();
    let init: Vec<(f64, f64)> = params
        .tumor
        .cell_types
        .iter()
        .map(|c| (c.n0.ln(), c.n_inf.ln()))
        .collect();
    let finals = b.pd_block(None, &init);
    b.model.objective = finals.into_iter().map(|j| (j, 1.0)).collect();
    b.model.layout = Some(b.layout(0));
    b.model.validate()?;
    Ok(b.model)
}

/// Chance-constrained model over the scenario set in `options`.
pub fn build_chance_constrained(params: &ParamBundle, options: &BuildOptions) -> Result<MilpModel> {
    let set = options
        .scenario_set
        .as_ref()
        .ok_or_else(|| Error::invariant("scenario_set", "chance-constrained model needs scenarios"))?;
    if set.labels.len() != params.tumor.len() {
        return Err(Error::LengthMismatch {
            what: "scenario cell types",
            expected: params.tumor.len(),
            actual: set.labels.len(),
        });
    }
    if !(0.0..1.0).contains(&options.epsilon) {
        return Err(Error::invariant("epsilon", "must lie in [0, 1)"));
    }
    for (k, s) in set.scenarios.iter().enumerate() {
        if !(options.n_surg < s.total_cells()) {
            return Err(Error::invariant(
                "n_surg",
                format!("scenario {k} starts at {} cells, already operable", s.total_cells()),
            ));
        }
    }
    let mut b = Builder::new(params, options, "chemo_chance")?;
    b.controls();
    b.wbc();
    let p_surg = options.n_surg.ln();
    let ratios: Vec<f64> = params.tumor.cell_types.iter().map(|c| (c.n_inf / c.n0).ln()).collect();
    let mut zs = Vec::new();
    let mut first_finals = Vec::new();
    for (k, sc) in set.scenarios.iter().enumerate() {
        let init: Vec<(f64, f64)> = sc.log_pops.iter().zip(&ratios).map(|(&p, &r)| (p, p + r)).collect();
        let finals = b.pd_block(Some(k), &init);
        let z = b.model.add_var(names::zsurg(k), VarKind::Binary, 0.0, 1.0);
        let total = sc.total_cells();
        for (q, &pf) in finals.iter().enumerate() {
            let frac_ln = sc.log_pops[q] - total.ln();
            let target = p_surg + frac_ln;
            let big_m = init[q].1 - target;
            b.model
                .add_con(format!("surg_k{k}_q{q}"), vec![(pf, 1.0), (z, big_m)], Sense::Le, target + big_m);
        }
        zs.push((z, sc.prob));
        if k == 0 {
            first_finals = finals;
        }
    }
    match options.objective {
        Objective::Shrinkage => {
            b.model
                .add_con("knapsack", zs.clone(), Sense::Ge, 1.0 - options.epsilon);
            b.model.objective = first_finals.into_iter().map(|j| (j, 1.0)).collect();
        }
        Objective::Probability => {
            b.model.sense = ObjSense::Maximize;
            b.model.objective = zs;
        }
    }
    b.model.layout = Some(b.layout(set.len()));
    b.model.validate()?;
    Ok(b.model)
}

struct Builder<'a> {
    p: &'a ParamBundle,
    o: &'a BuildOptions,
    model: MilpModel,
    c_vars: Vec<Vec<usize>>,
    e_vars: Vec<Vec<usize>>,
}

impl<'a> Builder<'a> {
    fn new(p: &'a ParamBundle, o: &'a BuildOptions, name: &str) -> Result<Self> {
        p.validate()?;
        o.validate(p)?;
        let h = p.grid.h();
        for d in &p.drugs {
            dynamics::require_stable(h, d.xi, RateKind::Pk)?;
        }
        dynamics::require_stable(h, p.tumor.lambda, RateKind::Pd)?;
        Ok(Builder {
            p,
            o,
            model: MilpModel::new(name),
            c_vars: Vec::new(),
            e_vars: Vec::new(),
        })
    }

    fn layout(&self, n_scenarios: usize) -> ChemoLayout {
        ChemoLayout {
            n_drugs: self.p.drugs.len(),
            n_types: self.p.tumor.len(),
            n_steps: self.p.grid.n_steps(),
            n_days: self.p.grid.horizon_days as usize,
            n_scenarios,
        }
    }

    /// Doses, PK, effective concentration and operational constraints.
    fn controls(&mut self) {
        let g = &self.p.grid;
        let n = g.n_steps();
        let h = g.h();
        let vol = g.compartment_volume;
        let spd = g.steps_per_day();
        let days = g.horizon_days as usize;
        let m = &mut self.model;
        for (d, drug) in self.p.drugs.iter().enumerate() {
            let cap = drug.conc_cap(vol);
            let u: Vec<usize> = (0..n)
                .map(|s| m.add_var(names::u(d, s), VarKind::Continuous, 0.0, f64::INFINITY))
                .collect();
            let c: Vec<usize> = (0..=n)
                .map(|s| m.add_var(names::c(d, s), VarKind::Continuous, 0.0, f64::INFINITY))
                .collect();
            let e: Vec<usize> = (0..=n)
                .map(|s| m.add_var(names::e(d, s), VarKind::Continuous, 0.0, f64::INFINITY))
                .collect();
            m.add_con(format!("pk_init_d{d}"), vec![(c[0], 1.0)], Sense::Eq, 0.0);
            for s in 0..n {
                m.add_con(
                    format!("pk_d{d}_s{s}"),
                    vec![(c[s + 1], 1.0), (c[s], -(1.0 - h * drug.xi)), (u[s], -1.0 / vol)],
                    Sense::Eq,
                    0.0,
                );
            }
            for s in 0..=n {
                m.add_con(format!("cmax_d{d}_s{s}"), vec![(c[s], 1.0)], Sense::Le, cap);
                if drug.beta_eff == 0.0 {
                    m.add_con(format!("eff_d{d}_s{s}"), vec![(e[s], 1.0), (c[s], -1.0)], Sense::Eq, 0.0);
                } else if s == 0 {
                    m.add_con(format!("eff_d{d}_s{s}"), vec![(e[s], 1.0)], Sense::Eq, 0.0);
                } else {
                    let z = m.add_var(names::ze(d, s), VarKind::Binary, 0.0, 1.0);
                    m.add_con(
                        format!("eff_lo_d{d}_s{s}"),
                        vec![(e[s], 1.0), (c[s], -1.0)],
                        Sense::Ge,
                        -drug.beta_eff,
                    );
                    m.add_con(format!("eff_on_d{d}_s{s}"), vec![(e[s], 1.0), (z, -cap)], Sense::Le, 0.0);
                    m.add_con(
                        format!("eff_hi_d{d}_s{s}"),
                        vec![(e[s], 1.0), (c[s], -1.0), (z, cap)],
                        Sense::Le,
                        cap - drug.beta_eff,
                    );
                }
            }
            let step_cap = drug.max_step_dose(g);
            for s in 0..n {
                m.add_con(format!("rate_d{d}_s{s}"), vec![(u[s], 1.0)], Sense::Le, step_cap);
                if drug.route == Route::Oral {
                    let pill = drug.pill_mass.expect("validated oral drug");
                    if g.is_meal_step(s) {
                        let max_pills = (step_cap / pill + 1e-9).floor();
                        let z = m.add_var(names::zpill(d, s), VarKind::Integer, 0.0, max_pills);
                        m.add_con(format!("pill_d{d}_s{s}"), vec![(u[s], 1.0), (z, -pill)], Sense::Eq, 0.0);
                    } else {
                        m.add_con(format!("pill_d{d}_s{s}"), vec![(u[s], 1.0)], Sense::Eq, 0.0);
                    }
                }
            }
            let daily = drug.max_daily_dose(g);
            match drug.rest_days {
                None => {
                    for day in 0..days {
                        let terms = (day * spd..(day + 1) * spd).map(|s| (u[s], 1.0)).collect();
                        m.add_con(format!("daily_d{d}_m{day}"), terms, Sense::Le, daily);
                    }
                }
                Some(rest) => {
                    let zr: Vec<usize> = (0..days)
                        .map(|day| m.add_var(names::zrest(d, day), VarKind::Binary, 0.0, 1.0))
                        .collect();
                    for day in 0..days {
                        let mut terms: Vec<(usize, f64)> = (day * spd..(day + 1) * spd).map(|s| (u[s], 1.0)).collect();
                        terms.push((zr[day], daily));
                        m.add_con(format!("daily_d{d}_m{day}"), terms, Sense::Le, daily);
                        let span = (rest as usize).min(days - 1 - day);
                        if span > 0 {
                            let terms = (0..=span).map(|l| (zr[day + l], -1.0)).collect();
                            m.add_con(format!("rest_d{d}_m{day}"), terms, Sense::Le, 1.0 - (span + 1) as f64);
                        }
                    }
                }
            }
            self.c_vars.push(c);
            self.e_vars.push(e);
        }
    }

    /// Daily white blood cell dynamics, toxicity bounds and the bilinear block.
    fn wbc(&mut self) {
        let g = &self.p.grid;
        let w = &self.p.wbc;
        let spd = g.steps_per_day();
        let days = g.horizon_days as usize;
        let tau = w.delay_days as usize;
        let n_w0 = w.n_w0 / WBC_SCALE;
        let beta_w = w.beta_w() / WBC_SCALE;
        let m = &mut self.model;
        let nw: Vec<usize> = (0..=days)
            .map(|day| m.add_var(names::nw(day), VarKind::Continuous, 0.0, n_w0))
            .collect();
        m.add_con("wbc_init", vec![(nw[0], 1.0)], Sense::Eq, n_w0);
        for day in 0..=days {
            let neu = m.add_var(format!("Nneu_m{day}"), VarKind::Continuous, 0.0, f64::INFINITY);
            let lym = m.add_var(format!("Nlym_m{day}"), VarKind::Continuous, 0.0, f64::INFINITY);
            m.add_con(format!("neu_def_m{day}"), vec![(neu, 1.0), (nw[day], -w.theta_neu)], Sense::Eq, 0.0);
            m.add_con(format!("lym_def_m{day}"), vec![(lym, 1.0), (nw[day], -w.theta_lym)], Sense::Eq, 0.0);
            m.add_con(format!("neutropenia_m{day}"), vec![(neu, 1.0)], Sense::Ge, w.beta_neu / WBC_SCALE);
            m.add_con(format!("lymphopenia_m{day}"), vec![(lym, 1.0)], Sense::Ge, w.beta_lym / WBC_SCALE);
        }
        let lagged_days = days.saturating_sub(tau);
        let mut cday = vec![Vec::new(); self.p.drugs.len()];
        for (d, cd) in cday.iter_mut().enumerate() {
            for day in 0..lagged_days {
                let v = m.add_var(names::cday(d, day), VarKind::Continuous, 0.0, f64::INFINITY);
                let mut terms = vec![(v, 1.0)];
                match self.o.sampling {
                    WbcSampling::DayStart => terms.push((self.c_vars[d][day * spd], -1.0)),
                    WbcSampling::DayAverage => {
                        terms.extend((day * spd..(day + 1) * spd).map(|s| (self.c_vars[d][s], -1.0 / spd as f64)))
                    }
                }
                m.add_con(format!("cday_d{d}_m{day}"), terms, Sense::Eq, 0.0);
                cd.push(v);
            }
        }
        // Before treatment starts the lagged concentration is zero, so for
        // days < tau the column is absent and its terms drop out.
        for day in 0..days {
            let lagc: Vec<Option<usize>> = (0..self.p.drugs.len())
                .map(|d| day.checked_sub(tau).map(|lag| cday[d][lag]))
                .collect();
            let cterm = |c: Option<usize>, coef: f64| c.map(|c| (c, coef));
            let bvars: Vec<usize> = (0..self.p.drugs.len())
                .map(|d| m.add_var(format!("B_d{d}_m{day}"), VarKind::Continuous, 0.0, f64::INFINITY))
                .collect();
            let mut terms = vec![(nw[day + 1], 1.0), (nw[day], -(1.0 - w.turnover))];
            for (d, drug) in self.p.drugs.iter().enumerate() {
                terms.push((bvars[d], drug.eta_w));
            }
            m.add_con(format!("wbc_m{day}"), terms, Sense::Eq, w.production / WBC_SCALE);
            if self.p.drugs.is_empty() {
                continue;
            }
            match self.o.bilinear {
                Bilinear::McCormick => {
                    for (d, drug) in self.p.drugs.iter().enumerate() {
                        let (b, c, n) = (bvars[d], lagc[d], nw[day]);
                        let cap = drug.conc_cap(g.compartment_volume);
                        let tag = format!("d{d}_m{day}");
                        let rows = [
                            (vec![Some((b, 1.0)), cterm(c, -beta_w)], Sense::Ge, 0.0),
                            (vec![Some((b, 1.0)), cterm(c, -n_w0), Some((n, -cap))], Sense::Ge, -n_w0 * cap),
                            (vec![Some((b, 1.0)), cterm(c, -n_w0)], Sense::Le, 0.0),
                            (vec![Some((b, 1.0)), cterm(c, -beta_w), Some((n, -cap))], Sense::Le, -beta_w * cap),
                        ];
                        for (i, (t, sense, rhs)) in rows.into_iter().enumerate() {
                            m.add_con(format!("mc{}_{tag}", i + 1), t.into_iter().flatten().collect(), sense, rhs);
                        }
                    }
                }
                Bilinear::Discrete { levels, width } => {
                    let width = width / WBC_SCALE;
                    let level = |k: usize| beta_w + k as f64 * width;
                    let z: Vec<usize> = (0..=levels)
                        .map(|k| m.add_var(format!("Zw_m{day}_k{k}"), VarKind::Binary, 0.0, 1.0))
                        .collect();
                    m.add_con(format!("lvl_one_m{day}"), z.iter().map(|&v| (v, 1.0)).collect(), Sense::Eq, 1.0);
                    let mut near: Vec<(usize, f64)> = vec![(nw[day], 1.0)];
                    near.extend(z.iter().enumerate().map(|(k, &v)| (v, -level(k))));
                    m.add_con(format!("lvl_hi_m{day}"), near.clone(), Sense::Le, width / 2.0);
                    m.add_con(format!("lvl_lo_m{day}"), near, Sense::Ge, -width / 2.0);
                    for (d, drug) in self.p.drugs.iter().enumerate() {
                        let cap = drug.conc_cap(g.compartment_volume);
                        let c = lagc[d];
                        let v: Vec<usize> = (0..=levels)
                            .map(|k| m.add_var(format!("V_d{d}_m{day}_k{k}"), VarKind::Continuous, 0.0, f64::INFINITY))
                            .collect();
                        let mut def = vec![(bvars[d], 1.0)];
                        def.extend(v.iter().enumerate().map(|(k, &vk)| (vk, -level(k))));
                        m.add_con(format!("bdef_d{d}_m{day}"), def, Sense::Eq, 0.0);
                        if self.o.tighten_levels {
                            let mut sum: Vec<(usize, f64)> = v.iter().map(|&vk| (vk, 1.0)).collect();
                            sum.extend(cterm(c, -1.0));
                            m.add_con(format!("vsum_d{d}_m{day}"), sum, Sense::Eq, 0.0);
                        }
                        // V = Z * C over C in [0, cap], Z binary
                        for k in 0..=levels {
                            let tag = format!("d{d}_m{day}_k{k}");
                            let rows = [
                                (vec![Some((v[k], 1.0))], Sense::Ge, 0.0),
                                (vec![Some((v[k], 1.0)), Some((z[k], -cap))], Sense::Le, 0.0),
                                (vec![Some((v[k], 1.0)), cterm(c, -1.0)], Sense::Le, 0.0),
                                (vec![Some((v[k], 1.0)), cterm(c, -1.0), Some((z[k], -cap))], Sense::Ge, -cap),
                            ];
                            for (i, (t, sense, rhs)) in rows.into_iter().enumerate() {
                                m.add_con(format!("v{}_{tag}", i + 1), t.into_iter().flatten().collect(), sense, rhs);
                            }
                        }
                    }
                }
            }
        }
    }

    /// PD recursion for one initial state; returns the final-step variables.
    fn pd_block(&mut self, scenario: Option<usize>, init: &[(f64, f64)]) -> Vec<usize> {
        let g = &self.p.grid;
        let n = g.n_steps();
        let h = g.h();
        let lambda = self.p.tumor.lambda;
        let eta = dynamics::kill_matrix(&self.p.tumor, &self.p.drugs);
        let m = &mut self.model;
        let name = |q: usize, s: usize| match scenario {
            None => names::p(q, s),
            Some(k) => names::pk(k, q, s),
        };
        let tag = scenario.map(|k| format!("k{k}_")).unwrap_or_default();
        let mut finals = Vec::new();
        for (q, &(p0, p_inf)) in init.iter().enumerate() {
            let p: Vec<usize> = (0..=n)
                .map(|s| m.add_var(name(q, s), VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY))
                .collect();
            m.add_con(format!("pd_init_{tag}q{q}"), vec![(p[0], 1.0)], Sense::Eq, p0);
            for s in 0..n {
                let t = g.time(s);
                let mut terms = vec![(p[s + 1], 1.0), (p[s], -(1.0 - h * lambda))];
                for (d, drug) in self.p.drugs.iter().enumerate() {
                    let coef = h * eta[d][q] * (-drug.rho * t).exp();
                    if coef != 0.0 {
                        terms.push((self.e_vars[d][s], coef));
                    }
                }
                m.add_con(format!("pd_{tag}q{q}_s{s}"), terms, Sense::Eq, h * lambda * p_inf);
            }
            finals.push(p[n]);
        }
        finals
    }
}

/// Dose schedule and model states decoded from a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPlan {
    /// `[d][s]` grams for s in 0..S.
    pub doses: Vec<Vec<f64>>,
    pub concentration: Vec<Vec<f64>>,
    pub effective: Vec<Vec<f64>>,
    /// `[q][s]`; for chance-constrained models these are the most likely scenario's.
    pub log_pops: Vec<Vec<f64>>,
    /// Daily counts in cells/m^3.
    pub wbc: Vec<f64>,
    /// Indices of scenarios whose surgical target is selected.
    pub selected_scenarios: Vec<usize>,
}

impl TreatmentPlan {
    pub fn zero(params: &ParamBundle) -> TreatmentPlan {
        let n = params.grid.n_steps();
        TreatmentPlan {
            doses: vec![vec![0.0; n]; params.drugs.len()],
            concentration: Vec::new(),
            effective: Vec::new(),
            log_pops: Vec::new(),
            wbc: Vec::new(),
            selected_scenarios: Vec::new(),
        }
    }

    pub fn simulate(&self, params: &ParamBundle, sampling: WbcSampling) -> Result<Simulation> {
        dynamics::simulate_all(params, &self.doses, sampling)
    }

    /// Daily dose totals `[d][day]` in grams.
    pub fn daily_totals(&self, spd: usize) -> Vec<Vec<f64>> {
        self.doses.iter().map(|u| u.chunks(spd).map(|c| c.iter().sum()).collect()).collect()
    }

    /// CSV with one row per step: `step,t_days,<drug>_g...`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, params: &ParamBundle) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "t_days".to_string()];
        header.extend(params.drugs.iter().map(|d| format!("{}_g", d.name)));
        out.write_record(&header)?;
        for s in 0..params.grid.n_steps() {
            let mut row = vec![s.to_string(), format!("{}", params.grid.time(s))];
            row.extend(self.doses.iter().map(|u| format!("{}", u[s])));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dose schedule written by [`TreatmentPlan::write_csv`].
    pub fn read_csv<R: std::io::Read>(r: R, params: &ParamBundle) -> Result<TreatmentPlan> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let cols: Vec<usize> = params
            .drugs
            .iter()
            .map(|d| {
                let want = format!("{}_g", d.name);
                header
                    .iter()
                    .position(|h| h == want)
                    .ok_or_else(|| Error::invariant("plan", format!("missing column `{want}`")))
            })
            .collect::<Result<_>>()?;
        let mut plan = TreatmentPlan::zero(params);
        let n = params.grid.n_steps();
        let mut rows = 0;
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            if i >= n {
                return Err(Error::LengthMismatch {
                    what: "plan rows",
                    expected: n,
                    actual: i + 1,
                });
            }
            for (d, &c) in cols.iter().enumerate() {
                let field = rec.get(c).unwrap_or("");
                plan.doses[d][i] = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invariant("plan", format!("row {}: bad dose `{field}`", i + 2)))?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::LengthMismatch {
                what: "plan rows",
                expected: n,
                actual: rows,
            });
        }
        Ok(plan)
    }
}

/// Decodes a solution of a model built by this module. Integer variables must
/// be within 1e-6 of an integer; pill doses are rebuilt from rounded counts.
pub fn extract_plan(model: &MilpModel, params: &ParamBundle, solution: &HashMap<String, f64>) -> Result<TreatmentPlan> {
    let layout = model
        .layout
        .as_ref()
        .ok_or_else(|| Error::Model("model has no chemotherapy layout".into()))?;
    for v in &model.variables {
        let Some(&x) = solution.get(&v.name) else {
            return Err(Error::Model(format!("solution is missing variable {}", v.name)));
        };
        if v.kind != VarKind::Continuous && (x - x.round()).abs() > 1e-6 {
            return Err(Error::Model(format!("variable {} = {x} violates integrality", v.name)));
        }
    }
    let get = |n: String| solution[&n];
    let n = layout.n_steps;
    let mut doses = Vec::new();
    let mut concentration = Vec::new();
    let mut effective = Vec::new();
    for (d, drug) in params.drugs.iter().enumerate().take(layout.n_drugs) {
        let u: Vec<f64> = (0..n)
            .map(|s| match drug.pill_mass {
                Some(pill) => solution
                    .get(&names::zpill(d, s))
                    .map(|z| z.round() * pill)
                    .unwrap_or(0.0),
                None => get(names::u(d, s)).max(0.0),
            })
            .collect();
        doses.push(u);
        concentration.push((0..=n).map(|s| get(names::c(d, s))).collect());
        effective.push((0..=n).map(|s| get(names::e(d, s))).collect());
    }
    let log_pops = (0..layout.n_types)
        .map(|q| {
            (0..=n)
                .map(|s| {
                    if layout.n_scenarios == 0 {
                        get(names::p(q, s))
                    } else {
                        get(names::pk(0, q, s))
                    }
                })
                .collect()
        })
        .collect();
    let wbc = (0..=layout.n_days).map(|m| get(names::nw(m)) * WBC_SCALE).collect();
    let selected_scenarios = (0..layout.n_scenarios)
        .filter(|&k| get(names::zsurg(k)) > 0.5)
        .collect();
    Ok(TreatmentPlan {
        doses,
        concentration,
        effective,
        log_pops,
        wbc,
        selected_scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_params;

    #[test]
    fn drug_free_model_has_no_controls() {
        let p = default_params().without_drugs();
        let m = build_deterministic(&p, &BuildOptions::new(&p)).unwrap();
        assert_eq!(m.stats().integers, 0);
        assert!(m.var("U_d0_s0").is_none());
    }

    #[test]
    fn unstable_step_refused() {
        let mut p = default_params();
        p.drugs[2].xi = 20.0;
        p.grid = p.grid.with_step_minutes(240).unwrap();
        assert!(matches!(
            build_deterministic(&p, &BuildOptions::new(&p)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn inconsistent_levels_refused() {
        let p = default_params();
        let o = BuildOptions::new(&p).with_bilinear(Bilinear::Discrete { levels: 20, width: 1e11 });
        assert!(build_deterministic(&p, &o).is_err());
    }

    #[test]
    fn pills_only_at_meals() {
        let mut p = default_params();
        p.grid = p.grid.with_step_minutes(240).unwrap();
        let m = build_deterministic(&p, &BuildOptions::new(&p)).unwrap();
        let pills: Vec<usize> = (0..p.grid.n_steps()).filter(|&s| m.var(&names::zpill(0, s)).is_some()).collect();
        assert_eq!(pills, p.grid.meal_steps());
    }

    #[test]
    fn listing_mentions_objective() {
        let p = default_params().without_drugs();
        let mut p = p;
        p.grid = p.grid.with_horizon(1).with_step_minutes(720).unwrap();
        let m = build_deterministic(&p, &BuildOptions::new(&p)).unwrap();
        let text = m.to_string();
        assert!(text.starts_with("minimize: 1 P_q0_s2 + 1 P_q1_s2"));
        assert!(text.contains("pd_q0_s0:"));
    }
}
