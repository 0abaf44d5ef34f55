use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chemoplan::analysis::{
    compare_configurations, fraction_grid, min_neutrophils, regularize_plan, sensitivity_sweep, write_comparison_csv,
    write_sweep_csv, Backend, ConfigSpec, SweepTarget,
};
use chemoplan::calibration::{calibrate_kill_effect, default_regimens, load_regimens, CalibrationOptions};
use chemoplan::dynamics::{write_trajectories_csv, Trajectory};
use chemoplan::scenarios::{
    cluster_scenarios, simulate_branching, write_populations_csv, BranchingConfig, ClusterOptions, Normalization,
};
use chemoplan::solver::{solve_builtin, solve_external, write_mps, BuiltinLimits, ExternalOptions, SOLVER_ENV};
use chemoplan::transcription::{build_chance_constrained, build_deterministic, extract_plan};
use chemoplan::validate::run_all;
use chemoplan::{
    default_params, default_scenarios, load_params, Bilinear, BuildOptions, MilpModel, Objective, ParamBundle,
    ScenarioSet, Simulation, SolveStatus, TreatmentPlan, WbcSampling,
};

#[derive(Parser)]
#[command(name = "chemoplan", version, about = "Combination chemotherapy planning with mixed-integer programs")]
struct Cli {
    /// Parameter file (TOML); the shipped breast cancer set when omitted.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 2021)]
    seed: u64,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate PK, PD and white blood cell dynamics for a dose plan.
    Simulate(SimulateArgs),
    /// Generate heterogeneity scenarios from the branching process.
    Scenarios(ScenarioArgs),
    /// Fit kill effects to clinical response rates.
    Calibrate(CalibrateArgs),
    /// Write the planning model as MPS.
    Build(BuildArgs),
    /// Build and solve the planning model.
    Solve(SolveArgs),
    /// Sensitivity sweep over one parameter.
    Sweep(SweepArgs),
    /// Solve the deterministic model under several discretizations.
    Compare(CompareArgs),
    /// Turn an optimal plan into a constant daily oral pattern.
    Regularize(RegularizeArgs),
    /// Run the property suites.
    Validate,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dose plan CSV as written by `solve`; zero doses when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Drop every drug from the parameter set.
    #[arg(long)]
    no_drugs: bool,
    #[arg(long)]
    h_minutes: Option<u32>,
    #[arg(long, value_enum, default_value_t = SamplingArg::DayStart)]
    sampling: SamplingArg,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 30)]
    generations: u32,
    #[arg(long, default_value_t = 10_000)]
    replications: usize,
    /// Mutation probability into each resistant type.
    #[arg(long, default_value_t = 0.005)]
    mutation: f64,
    /// Number of clusters.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value_t = NormArg::Raw)]
    normalization: NormArg,
    /// k-means++ starts.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Also write the replication matrix.
    #[arg(long)]
    populations: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Regimen file (TOML); the shipped trials when omitted.
    #[arg(long)]
    regimens: Option<PathBuf>,
    /// Restrict to these drugs.
    #[arg(long)]
    drug: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0.10)]
    sigma_frac: f64,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Step length in minutes; must divide a day.
    #[arg(long)]
    h_minutes: Option<u32>,
    #[arg(long, value_enum, default_value_t = BilinearArg::Discrete)]
    bilinear: BilinearArg,
    /// Discretization levels of the white blood cell count.
    #[arg(long, default_value_t = 20)]
    levels: usize,
    #[arg(long, value_enum, default_value_t = SamplingArg::DayStart)]
    sampling: SamplingArg,
    /// Omit the valid equality tying level products to the concentration.
    #[arg(long)]
    no_tighten: bool,
    /// Chance-constrained model over heterogeneity scenarios.
    #[arg(long)]
    chance: bool,
    /// Scenario CSV; the shipped set when omitted.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Operable tumor size (cells).
    #[arg(long, default_value_t = 0.4e9)]
    n_surg: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Shrinkage)]
    objective: ObjectiveArg,
}

#[derive(Args, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = SolverArg::External)]
    solver: SolverArg,
    /// External solver command template with {mps} and {sol} placeholders.
    #[arg(long, env = SOLVER_ENV)]
    solver_cmd: Option<String>,
    /// Seconds.
    #[arg(long, default_value_t = 1800.0)]
    time_limit: f64,
    /// Relative MIP gap.
    #[arg(long, default_value_t = 1e-4)]
    gap: f64,
    /// Keep solver files here.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// `xi:<drug>`, `eta0:<drug>`, `eta_w:<drug>`, `rho:<drug>`, `max_dose:<drug>` or `neutropenia`.
    #[arg(long)]
    target: String,
    /// Comma separated fractions; 0.8 to 1.2 by 0.1 when omitted.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Configurations `<minutes>:<levels>` or `<minutes>:mccormick`.
    #[arg(long, value_delimiter = ',', default_value = "240:20,240:mccormick")]
    configs: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RegularizeArgs {
    /// Dose plan CSV as written by `solve`.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    h_minutes: Option<u32>,
    /// Dose on every day, ignoring the plan's rest days.
    #[arg(long)]
    drop_rest_days: bool,
    #[arg(long, value_enum, default_value_t = SamplingArg::DayStart)]
    sampling: SamplingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    DayStart,
    DayAverage,
}

impl From<SamplingArg> for WbcSampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::DayStart => WbcSampling::DayStart,
            SamplingArg::DayAverage => WbcSampling::DayAverage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Log,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum BilinearArg {
    Discrete,
    Mccormick,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Shrinkage,
    Probability,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    External,
    Builtin,
}

enum Outcome {
    Done,
    Infeasible,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => {
            eprintln!("error: model is infeasible");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let params = match &cli.params {
        Some(p) => load_params(p).with_context(|| format!("loading {}", p.display()))?,
        None => default_params(),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::Simulate(a) => simulate(params, out, a),
        Cmd::Scenarios(a) => scenarios(&params, out, cli.seed, a),
        Cmd::Calibrate(a) => calibrate(params, out, cli.seed, a),
        Cmd::Build(a) => {
            let (p, model) = build(params, &a.model)?;
            let path = out.join(format!("{}.mps", model.name));
            write_mps(&model, &path)?;
            let s = model.stats();
            println!(
                "{}: {} constraints, {} variables ({} integer, {} binary), h = {} min",
                path.display(),
                s.constraints,
                s.variables,
                s.integers,
                s.binaries,
                p.grid.step_minutes
            );
            Ok(Outcome::Done)
        }
        Cmd::Solve(a) => solve(params, out, a),
        Cmd::Sweep(a) => sweep(params, out, a),
        Cmd::Compare(a) => compare(params, out, a),
        Cmd::Regularize(a) => regularize(params, out, a),
        Cmd::Validate => {
            let reports = run_all(&params, cli.seed);
            let mut failed = 0;
            for r in &reports {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} property suites failed", reports.len());
            }
            Ok(Outcome::Done)
        }
    }
}

fn with_step(mut params: ParamBundle, h_minutes: Option<u32>) -> Result<ParamBundle> {
    if let Some(h) = h_minutes {
        params.grid = params.grid.with_step_minutes(h)?;
    }
    Ok(params)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_simulation(out: &Path, sim: &Simulation) -> Result<()> {
    let conc: Vec<&Trajectory> = sim.concentration.iter().collect();
    if !conc.is_empty() {
        write_trajectories_csv(create(&out.join("concentration.csv"))?, &conc)?;
    }
    let times = sim.log_pops[0].times.clone();
    let total: Vec<f64> = (0..times.len()).map(|s| sim.log_pops.iter().map(|t| t.values[s]).sum()).collect();
    let total = Trajectory::new("sum", "ln cells", times, total);
    let mut pops: Vec<&Trajectory> = sim.log_pops.iter().collect();
    pops.push(&total);
    write_trajectories_csv(create(&out.join("log_pops.csv"))?, &pops)?;
    sim.wbc.write_csv(create(&out.join("wbc.csv"))?)?;
    Ok(())
}

fn simulate(params: ParamBundle, out: &Path, a: SimulateArgs) -> Result<Outcome> {
    let mut params = with_step(params, a.h_minutes)?;
    if a.no_drugs {
        params = params.without_drugs();
    }
    let plan = match &a.plan {
        Some(path) => TreatmentPlan::read_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?, &params)?,
        None => TreatmentPlan::zero(&params),
    };
    let sim = plan.simulate(&params, a.sampling.into())?;
    write_simulation(out, &sim)?;
    println!(
        "final objective {:.4} (sum of log-populations), {:.4e} cells; minimum white blood cells {:.4e}/m^3",
        sim.final_objective(),
        sim.final_cells(),
        sim.wbc.min()
    );
    Ok(Outcome::Done)
}

fn scenarios(params: &ParamBundle, out: &Path, seed: u64, a: ScenarioArgs) -> Result<Outcome> {
    let labels: Vec<String> = params.tumor.cell_types.iter().map(|c| c.name.clone()).collect();
    let config = BranchingConfig {
        generations: a.generations,
        replications: a.replications,
        mutation_probs: vec![a.mutation; labels.len().saturating_sub(1)],
        seed,
    };
    let pops = simulate_branching(&config)?;
    if a.populations {
        write_populations_csv(create(&out.join("populations.csv"))?, &labels, &pops)?;
    }
    let set = cluster_scenarios(
        &pops,
        labels,
        ClusterOptions {
            k: a.k,
            seed,
            normalization: match a.normalization {
                NormArg::Log => Normalization::Log,
                NormArg::Raw => Normalization::Raw,
            },
            restarts: a.restarts,
        },
    )?;
    let path = out.join("scenarios.csv");
    set.write_csv(create(&path)?)?;
    println!("{}: {} scenarios, dominant probability {:.4}", path.display(), set.len(), set.scenarios[0].prob);
    Ok(Outcome::Done)
}

fn calibrate(mut params: ParamBundle, out: &Path, seed: u64, a: CalibrateArgs) -> Result<Outcome> {
    let regimens = match &a.regimens {
        Some(p) => load_regimens(p)?,
        None => default_regimens(),
    };
    let opts = CalibrationOptions {
        trials: a.trials,
        sigma_frac: a.sigma_frac,
        seed,
        ..CalibrationOptions::default()
    };
    let mut table = csv::Writer::from_writer(create(&out.join("calibration.csv"))?);
    table.write_record(["drug", "eta0", "delta", "response_rate", "target_response_rate", "iterations"])?;
    for spec in regimens.iter().filter(|r| a.drug.is_empty() || a.drug.contains(&r.drug)) {
        let d = params
            .drug_index(&spec.drug)
            .with_context(|| format!("regimen drug `{}` is not in the parameter set", spec.drug))?;
        let mut drug = params.drugs[d].clone();
        drug.rho = 0.0;
        let cal = calibrate_kill_effect(spec, &drug, &params.tumor, &params.grid, &opts)?;
        println!(
            "{}: eta0 = {:.4e} m^3/g/day (response {:.3}, target {:.3})",
            spec.drug, cal.eta, cal.response_rate, spec.response_rate
        );
        table.write_record([
            spec.drug.clone(),
            cal.eta.to_string(),
            cal.delta.to_string(),
            cal.response_rate.to_string(),
            spec.response_rate.to_string(),
            cal.iterations.to_string(),
        ])?;
        params.drugs[d].eta0 = cal.eta;
    }
    table.flush()?;
    fs::write(out.join("params_calibrated.toml"), params.to_toml_string())?;
    Ok(Outcome::Done)
}

fn load_scenarios(path: &Option<PathBuf>) -> Result<ScenarioSet> {
    Ok(match path {
        Some(p) => ScenarioSet::load_csv(p).with_context(|| format!("loading {}", p.display()))?,
        None => default_scenarios(),
    })
}

fn options_for(p: &ParamBundle, a: &ModelArgs) -> BuildOptions {
    let mut o = BuildOptions::new(p).with_bilinear(match a.bilinear {
        BilinearArg::Discrete => Bilinear::discrete(p, a.levels),
        BilinearArg::Mccormick => Bilinear::McCormick,
    });
    o.sampling = a.sampling.into();
    o.tighten_levels = !a.no_tighten;
    o.objective = match a.objective {
        ObjectiveArg::Shrinkage => Objective::Shrinkage,
        ObjectiveArg::Probability => Objective::Probability,
    };
    o
}

fn build(params: ParamBundle, a: &ModelArgs) -> Result<(ParamBundle, MilpModel)> {
    let p = with_step(params, a.h_minutes)?;
    let mut o = options_for(&p, a);
    let model = if a.chance {
        o = o.with_scenarios(load_scenarios(&a.scenarios)?, a.epsilon, a.n_surg);
        build_chance_constrained(&p, &o)?
    } else {
        build_deterministic(&p, &o)?
    };
    Ok((p, model))
}

fn backend(a: &BackendArgs) -> Backend {
    match a.solver {
        SolverArg::Builtin => Backend::Builtin(BuiltinLimits::default()),
        SolverArg::External => {
            let mut o = ExternalOptions {
                time_limit: a.time_limit,
                mip_gap: a.gap,
                work_dir: a.work_dir.clone(),
                ..ExternalOptions::default()
            };
            if let Some(cmd) = &a.solver_cmd {
                o.command = cmd.clone();
            }
            Backend::External(o)
        }
    }
}

fn solve(params: ParamBundle, out: &Path, a: SolveArgs) -> Result<Outcome> {
    let (p, model) = build(params, &a.model)?;
    let result = match backend(&a.backend) {
        Backend::Builtin(l) => solve_builtin(&model, l)?,
        Backend::External(o) => solve_external(&model, &o)?,
    };
    result.write_solution(&model, create(&out.join("solution.sol"))?)?;
    println!(
        "status {}, objective {:.6}, gap {:.2e}, {:.1} s",
        result.status, result.objective, result.gap, result.runtime
    );
    if result.status == SolveStatus::Infeasible {
        return Ok(Outcome::Infeasible);
    }
    if !result.has_assignment() {
        bail!("solver returned status {} without a solution", result.status);
    }
    let mut report = String::new();
    if let Some(f) = &result.feasibility {
        report.push_str(&format!(
            "tolerance {:e}\nmax violation {:e}\nviolations {}\n",
            f.tolerance,
            f.max_violation,
            f.violations.len()
        ));
        for (name, v) in &f.violations {
            report.push_str(&format!("{name} {v:e}\n"));
        }
    }
    let plan = extract_plan(&model, &p, &result.assignment)?;
    plan.write_csv(create(&out.join("plan.csv"))?, &p)?;
    let sim = plan.simulate(&p, a.model.sampling.into())?;
    write_simulation(out, &sim)?;
    report.push_str(&format!(
        "model minimum neutrophils {:e}\nsimulated minimum neutrophils {:e}\n",
        min_neutrophils(&p, &plan.wbc),
        min_neutrophils(&p, &sim.wbc.values)
    ));
    if a.model.chance {
        report.push_str(&format!("selected scenarios {:?}\n", plan.selected_scenarios));
    }
    fs::write(out.join("feasibility.txt"), &report)?;
    print!("{report}");
    if result.feasibility.as_ref().is_some_and(|f| !f.is_feasible()) {
        bail!("solution violates the model; see {}", out.join("feasibility.txt").display());
    }
    Ok(Outcome::Done)
}

fn sweep(params: ParamBundle, out: &Path, a: SweepArgs) -> Result<Outcome> {
    let target: SweepTarget = a.target.parse()?;
    let p = with_step(params, a.model.h_minutes)?;
    let fractions = if a.fractions.is_empty() {
        fraction_grid(0.8, 1.2, 0.1)
    } else {
        a.fractions.clone()
    };
    let model_args = a.model.clone();
    let points = sensitivity_sweep(&p, &target, &fractions, &|q: &ParamBundle| options_for(q, &model_args), &backend(&a.backend));
    let path = out.join(format!("sweep_{}.csv", target.to_string().replace(':', "_")));
    write_sweep_csv(create(&path)?, &target, &points)?;
    for pt in &points {
        println!("{:>6} {:>12.6} {}", pt.fraction, pt.objective, pt.status);
    }
    Ok(Outcome::Done)
}

fn compare(params: ParamBundle, out: &Path, a: CompareArgs) -> Result<Outcome> {
    let configs = a
        .configs
        .iter()
        .map(|c| {
            let (h, b) = c.split_once(':').with_context(|| format!("bad configuration `{c}`"))?;
            Ok(ConfigSpec {
                step_minutes: h.parse().with_context(|| format!("bad step in `{c}`"))?,
                levels: match b {
                    "mccormick" => None,
                    k => Some(k.parse().with_context(|| format!("bad levels in `{c}`"))?),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_configurations(&params, &configs, &backend(&a.backend));
    write_comparison_csv(create(&out.join("comparison.csv"))?, &rows)?;
    for r in &rows {
        println!("{:<28} {:>12.6} {:>10} {:>8.1} s", r.config.to_string(), r.objective, r.status, r.runtime);
    }
    Ok(Outcome::Done)
}

fn regularize(params: ParamBundle, out: &Path, a: RegularizeArgs) -> Result<Outcome> {
    let p = with_step(params, a.h_minutes)?;
    let plan = TreatmentPlan::read_csv(
        File::open(&a.plan).with_context(|| format!("opening {}", a.plan.display()))?,
        &p,
    )?;
    let r = regularize_plan(&plan, &p, a.sampling.into(), !a.drop_rest_days)?;
    r.plan.write_csv(create(&out.join("regulated_plan.csv"))?, &p)?;
    println!(
        "optimal {:.4}, regulated {:.4}, diameter change {:+.3} mm, minimum neutrophils {:.4e}",
        r.base_objective, r.regulated_objective, r.diameter_delta_mm, r.min_neutrophils
    );
    if !r.is_feasible() {
        for v in &r.violations {
            eprintln!("violation: {v}");
        }
        bail!("regulated plan breaks {} limit(s)", r.violations.len());
    }
    Ok(Outcome::Done)
}
