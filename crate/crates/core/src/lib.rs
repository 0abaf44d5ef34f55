//! Combination chemotherapy planning: PK/PD simulation, MILP transcription,
//! solvers, heterogeneity scenarios, calibration and analysis.

pub mod analysis;
pub mod calibration;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod scenarios;
pub mod solver;
pub mod transcription;
pub mod validate;

pub use domain::{
    cells_to_diameter, default_params, default_scenarios, load_params, CellType, DrugParams, ParamBundle, Route,
    Scenario, ScenarioSet, TimeGrid, TumorParams, WbcParams,
};
pub use dynamics::{Simulation, Trajectory, WbcSampling};
pub use error::{Error, Result};
pub use solver::{SolveResult, SolveStatus};
pub use transcription::{Bilinear, BuildOptions, MilpModel, Objective, TreatmentPlan};
