use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{attach_report, mps, SolveResult, SolveStatus};
use crate::error::{Error, Result};
use crate::transcription::MilpModel;

/// Environment variable holding the default solver command template.
pub const SOLVER_ENV: &str = "CHEMOPLAN_SOLVER";

/// HiGHS adapter shipped with the crate; written next to the MPS file when the
/// template uses `{highs_adapter}`.
const HIGHS_ADAPTER: &str = include_str!("../../scripts/highs_solve.py");
const BUILTIN_TEMPLATE: &str = "python3 {highs_adapter} {mps} {sol} --time-limit {time_limit} --gap {gap}";

#[derive(Debug, Clone)]
pub struct ExternalOptions {
    /// Shell command with `{mps}` and `{sol}` placeholders; `{time_limit}`,
    /// `{gap}` and `{highs_adapter}` are optional.
    pub command: String,
    /// Seconds handed to the solver.
    pub time_limit: f64,
    pub mip_gap: f64,
    /// Keeps the MPS, solution and log files here instead of a temp dir.
    pub work_dir: Option<std::path::PathBuf>,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions {
            command: default_solver_command(),
            time_limit: 1800.0,
            mip_gap: 1e-4,
            work_dir: None,
        }
    }
}

/// `$CHEMOPLAN_SOLVER` if set, otherwise the bundled HiGHS adapter.
pub fn default_solver_command() -> String {
    std::env::var(SOLVER_ENV).unwrap_or_else(|_| BUILTIN_TEMPLATE.to_string())
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

/// Writes the model as MPS, runs the solver command and parses its solution file.
pub fn solve_external(model: &MilpModel, opts: &ExternalOptions) -> Result<SolveResult> {
    if !opts.command.contains("{mps}") || !opts.command.contains("{sol}") {
        return Err(Error::Solver("solver command needs {mps} and {sol} placeholders".into()));
    }
    let tmp;
    let dir = match &opts.work_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mps_path = dir.join(format!("{}.mps", model.name));
    let sol_path = dir.join(format!("{}.sol", model.name));
    let log_path = dir.join(format!("{}.log", model.name));
    let _ = fs::remove_file(&sol_path);
    mps::write_mps(model, &mps_path)?;
    let mut cmd = opts
        .command
        .replace("{mps}", &quote(&mps_path))
        .replace("{sol}", &quote(&sol_path))
        .replace("{time_limit}", &format!("{}", opts.time_limit))
        .replace("{gap}", &format!("{}", opts.mip_gap));
    if cmd.contains("{highs_adapter}") {
        let adapter = dir.join("highs_solve.py");
        fs::write(&adapter, HIGHS_ADAPTER)?;
        cmd = cmd.replace("{highs_adapter}", &quote(&adapter));
    }
    log::info!("running external solver: {cmd}");
    let start = Instant::now();
    let log_file = fs::File::create(&log_path)?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .stdin(Stdio::null())
        .stdout(log_file.try_clone()?)
        .stderr(log_file)
        .spawn()?;
    let hard_limit = Duration::from_secs_f64(opts.time_limit * 1.5 + 60.0);
    let exit = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if start.elapsed() > hard_limit {
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    let runtime = start.elapsed().as_secs_f64();
    let text = fs::read_to_string(&sol_path).ok();
    let Some(text) = text else {
        if exit.is_none() {
            return Ok(SolveResult::empty(SolveStatus::Limit, runtime));
        }
        let tail: String = fs::read_to_string(&log_path).unwrap_or_default().lines().rev().take(20).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        return Err(Error::Solver(format!("solver exited with {:?} and wrote no solution:\n{tail}", exit.and_then(|e| e.code()))));
    };
    let parsed = parse_solution(&text)?;
    let status = match (parsed.status, exit) {
        (_, None) => SolveStatus::Limit,
        (Some(s), _) => s,
        (None, _) if parsed.assignment.is_empty() => {
            return Err(Error::Solver("solution file has neither status nor values".into()))
        }
        (None, _) => SolveStatus::Optimal,
    };
    let objective = match parsed.objective {
        Some(o) => o,
        None if !parsed.assignment.is_empty() => {
            let x: Vec<f64> = model
                .variables
                .iter()
                .map(|v| parsed.assignment.get(&v.name).copied().unwrap_or(0.0))
                .collect();
            model.objective_value(&x)
        }
        None => f64::NAN,
    };
    Ok(attach_report(
        model,
        SolveResult {
            status,
            objective,
            assignment: parsed.assignment,
            gap: parsed.gap.unwrap_or(if status == SolveStatus::Optimal { 0.0 } else { f64::NAN }),
            runtime,
            feasibility: None,
        },
    ))
}

#[derive(Debug, Clone, Default)]
pub struct ParsedSolution {
    pub status: Option<SolveStatus>,
    pub objective: Option<f64>,
    pub gap: Option<f64>,
    pub assignment: HashMap<String, f64>,
}

/// Parses `name value` lines; `=obj=`, `=status=` and `=gap=` are records.
pub fn parse_solution(text: &str) -> Result<ParsedSolution> {
    let mut out = ParsedSolution::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(key), Some(val), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Solver(format!("solution line {}: expected `name value`", i + 1)));
        };
        let num = || {
            val.parse::<f64>()
                .map_err(|_| Error::Solver(format!("solution line {}: bad number `{val}`", i + 1)))
        };
        match key {
            "=status=" => out.status = Some(val.parse().map_err(Error::Solver)?),
            "=obj=" => out.objective = Some(num()?),
            "=gap=" => out.gap = Some(num()?),
            name => {
                out.assignment.insert(name.to_string(), num()?);
            }
        }
    }
    Ok(out)
}
