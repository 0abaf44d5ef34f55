//! Domain types shared by every module: drug, tumor and white blood cell
//! parameters, the time grid, heterogeneity scenarios, and the parameter
//! file loader.
//!
//! Parameter files are TOML. See `params/breast_cancer.toml` for the shipped
//! reference set; every quantity there carries its unit in a comment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shipped reference parameters.
pub const DEFAULT_PARAMS: &str = include_str!("../params/breast_cancer.toml");
/// Shipped reference heterogeneity scenarios (log-populations and probabilities).
pub const DEFAULT_SCENARIOS: &str = include_str!("../params/scenarios_table3.csv");
/// Shipped calibration regimens.
pub const DEFAULT_REGIMENS: &str = include_str!("../params/regimens.toml");

const MINUTES_PER_DAY: u32 = 24 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Oral,
    Intravenous,
}

/// Pharmacokinetic, pharmacodynamic and operational parameters of one drug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugParams {
    pub name: String,
    pub route: Route,
    /// Elimination rate (1/day).
    pub xi: f64,
    /// Fractional kill effect on non-resistant cells (m^3/g/day).
    pub eta0: f64,
    /// Fractional kill effect on white blood cells (m^3/g/day).
    pub eta_w: f64,
    /// Multiplier applied to `eta0` for the cell type resistant to this drug.
    #[serde(default = "default_resistant_factor")]
    pub resistant_factor: f64,
    /// Temporal resistance (1/day).
    pub rho: f64,
    /// Effectiveness threshold (g/m^3).
    pub beta_eff: f64,
    /// Maximum drug mass in the effect compartment (g).
    pub beta_conc: f64,
    /// Oral: max per administration (g/m^2). Intravenous: max infusion (g/m^2/hour).
    pub beta_rate: f64,
    /// Maximum cumulative daily dose (g/m^2).
    pub beta_cum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pill_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_days: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_days: Option<u32>,
}

fn default_resistant_factor() -> f64 {
    0.25
}

impl DrugParams {
    pub fn is_oral(&self) -> bool {
        self.route == Route::Oral
    }

    /// Concentration cap in g/m^3.
    pub fn conc_cap(&self, volume: f64) -> f64 {
        self.beta_conc / volume
    }

    /// Largest mass (g) that may be given in one grid step.
    pub fn max_step_dose(&self, grid: &TimeGrid) -> f64 {
        match self.route {
            Route::Oral => self.beta_rate * grid.body_surface,
            Route::Intravenous => self.beta_rate * grid.body_surface * grid.step_hours(),
        }
    }

    /// Largest mass (g) that may be given in one day.
    pub fn max_daily_dose(&self, grid: &TimeGrid) -> f64 {
        self.beta_cum * grid.body_surface
    }

    /// Kill effect on a cell type given whether that type resists this drug.
    pub fn eta_for(&self, resistant: bool) -> f64 {
        if resistant {
            self.resistant_factor * self.eta0
        } else {
            self.eta0
        }
    }

    fn validate(&self) -> Result<()> {
        let f = |n: &str| format!("drug.{}.{n}", self.name);
        positive(&f("xi"), self.xi)?;
        non_negative(&f("eta0"), self.eta0)?;
        non_negative(&f("eta_w"), self.eta_w)?;
        non_negative(&f("resistant_factor"), self.resistant_factor)?;
        non_negative(&f("rho"), self.rho)?;
        non_negative(&f("beta_eff"), self.beta_eff)?;
        positive(&f("beta_conc"), self.beta_conc)?;
        positive(&f("beta_rate"), self.beta_rate)?;
        positive(&f("beta_cum"), self.beta_cum)?;
        match (self.route, self.pill_mass) {
            (Route::Oral, Some(m)) => positive(&f("pill_mass"), m)?,
            (Route::Oral, None) => {
                return Err(Error::invariant(f("pill_mass"), "oral drugs need a pill mass"))
            }
            (Route::Intravenous, Some(_)) => {
                return Err(Error::invariant(
                    f("pill_mass"),
                    "intravenous drugs have no pill mass",
                ))
            }
            (Route::Intravenous, None) => {}
        }
        Ok(())
    }
}

/// One tumor cell type and its population bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellType {
    pub name: String,
    /// Name of the drug this type resists, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resistant_to: Option<String>,
    /// Initial population (cells).
    pub n0: f64,
    /// Asymptotic population limit (cells).
    pub n_inf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorParams {
    /// Gompertz shape parameter (1/day).
    pub lambda: f64,
    #[serde(rename = "cell_type")]
    pub cell_types: Vec<CellType>,
}

impl TumorParams {
    pub fn len(&self) -> usize {
        self.cell_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_types.is_empty()
    }

    /// Initial log-population of each type.
    pub fn log_n0(&self) -> Vec<f64> {
        self.cell_types.iter().map(|c| c.n0.ln()).collect()
    }

    /// Log of the asymptotic limit of each type.
    pub fn log_n_inf(&self) -> Vec<f64> {
        self.cell_types.iter().map(|c| c.n_inf.ln()).collect()
    }

    /// Replaces initial populations, keeping each type's `n_inf / n0` ratio.
    pub fn with_initial(&self, n0: &[f64]) -> TumorParams {
        let mut out = self.clone();
        for (c, &n) in out.cell_types.iter_mut().zip(n0) {
            let ratio = c.n_inf / c.n0;
            c.n0 = n;
            c.n_inf = n * ratio;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        positive("tumor.lambda", self.lambda)?;
        if self.cell_types.is_empty() {
            return Err(Error::invariant("tumor.cell_type", "at least one cell type required"));
        }
        for c in &self.cell_types {
            positive(&format!("tumor.{}.n0", c.name), c.n0)?;
            if !(c.n_inf > c.n0) {
                return Err(Error::invariant(
                    format!("tumor.{}.n_inf", c.name),
                    format!("must exceed n0 = {}", c.n0),
                ));
            }
        }
        Ok(())
    }
}

/// White blood cell dynamics and toxicity thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbcParams {
    /// Initial count (cells/m^3).
    pub n_w0: f64,
    /// Production rate (cells/m^3/day).
    pub production: f64,
    /// Turnover rate (1/day).
    pub turnover: f64,
    /// Delay before drugs affect white blood cells (days).
    pub delay_days: u32,
    pub theta_neu: f64,
    pub theta_lym: f64,
    /// Neutropenia threshold (cells/m^3).
    pub beta_neu: f64,
    /// Lymphocytopenia threshold (cells/m^3).
    pub beta_lym: f64,
}

impl WbcParams {
    /// Lower bound on the total count implied by the two toxicity thresholds.
    pub fn beta_w(&self) -> f64 {
        (self.beta_neu / self.theta_neu).min(self.beta_lym / self.theta_lym)
    }

    /// Total count at which neutropenia or lymphocytopenia is first reached.
    pub fn toxicity_floor(&self) -> f64 {
        (self.beta_neu / self.theta_neu).max(self.beta_lym / self.theta_lym)
    }

    fn validate(&self) -> Result<()> {
        positive("wbc.n_w0", self.n_w0)?;
        positive("wbc.turnover", self.turnover)?;
        positive("wbc.production", self.production)?;
        let steady = self.turnover * self.n_w0;
        if ((self.production - steady) / steady).abs() > 1e-9 {
            return Err(Error::invariant(
                "wbc.production",
                format!("must equal turnover * n_w0 = {steady}"),
            ));
        }
        positive("wbc.theta_neu", self.theta_neu)?;
        positive("wbc.theta_lym", self.theta_lym)?;
        if self.theta_neu + self.theta_lym > 1.0 {
            return Err(Error::invariant("wbc.theta_lym", "theta_neu + theta_lym must be <= 1"));
        }
        positive("wbc.beta_neu", self.beta_neu)?;
        positive("wbc.beta_lym", self.beta_lym)?;
        if !(self.beta_w() < self.n_w0) {
            return Err(Error::invariant("wbc.beta_neu", "implied lower bound must be below n_w0"));
        }
        Ok(())
    }
}

/// Discretization of the planning horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon_days: u32,
    pub step_minutes: u32,
    /// Hour offsets of the three daily meal times.
    pub meal_hours: Vec<f64>,
    /// Effect compartment volume (m^3).
    pub compartment_volume: f64,
    /// Body surface area (m^2).
    pub body_surface: f64,
    /// White blood cell lag in days; filled from `wbc.delay_days` on load.
    #[serde(skip)]
    pub wbc_lag_days: u32,
}

impl TimeGrid {
    pub fn steps_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.step_minutes) as usize
    }

    /// Number of steps S; grid points are 0..=S.
    pub fn n_steps(&self) -> usize {
        self.horizon_days as usize * self.steps_per_day()
    }

    /// Step length in days.
    pub fn h(&self) -> f64 {
        f64::from(self.step_minutes) / f64::from(MINUTES_PER_DAY)
    }

    pub fn step_hours(&self) -> f64 {
        f64::from(self.step_minutes) / 60.0
    }

    /// Time of grid point `s` in days.
    pub fn time(&self, s: usize) -> f64 {
        s as f64 * self.h()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps()).map(|s| self.time(s)).collect()
    }

    /// Day index (0-based) containing step `s`; step S belongs to no day.
    pub fn day_of(&self, s: usize) -> usize {
        s / self.steps_per_day()
    }

    pub fn day_start(&self, day: usize) -> usize {
        day * self.steps_per_day()
    }

    pub fn day_steps(&self, day: usize) -> std::ops::Range<usize> {
        let spd = self.steps_per_day();
        day * spd..(day + 1) * spd
    }

    /// Within-day step offsets of the meal times, snapped down to the grid
    /// and deduplicated.
    pub fn meal_offsets(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .meal_hours
            .iter()
            .map(|&hr| ((hr * 60.0) / f64::from(self.step_minutes)).floor() as usize)
            .collect();
        v.dedup();
        v
    }

    pub fn is_meal_step(&self, s: usize) -> bool {
        s < self.n_steps() && self.meal_offsets().contains(&(s % self.steps_per_day()))
    }

    /// All meal steps over the horizon, in increasing order.
    pub fn meal_steps(&self) -> Vec<usize> {
        let offsets = self.meal_offsets();
        (0..self.horizon_days as usize)
            .flat_map(|d| offsets.iter().map(move |o| d * self.steps_per_day() + o))
            .collect()
    }

    /// Same grid with a different step length.
    pub fn with_step_minutes(&self, step_minutes: u32) -> Result<TimeGrid> {
        let g = TimeGrid {
            step_minutes,
            ..self.clone()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_horizon(&self, horizon_days: u32) -> TimeGrid {
        TimeGrid {
            horizon_days,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_days == 0 {
            return Err(Error::invariant("grid.horizon_days", "must be positive"));
        }
        if self.step_minutes == 0 || MINUTES_PER_DAY % self.step_minutes != 0 {
            return Err(Error::invariant(
                "grid.step_minutes",
                "must divide one day (1440 minutes) exactly",
            ));
        }
        if self.meal_hours.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invariant("grid.meal_hours", "must be strictly increasing"));
        }
        if self.meal_hours.iter().any(|&m| !(0.0..24.0).contains(&m)) {
            return Err(Error::invariant("grid.meal_hours", "must lie within [0, 24)"));
        }
        positive("grid.compartment_volume", self.compartment_volume)?;
        positive("grid.body_surface", self.body_surface)?;
        Ok(())
    }
}

/// Full validated parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub grid: TimeGrid,
    pub tumor: TumorParams,
    pub wbc: WbcParams,
    #[serde(rename = "drug", default)]
    pub drugs: Vec<DrugParams>,
}

impl ParamBundle {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<ParamBundle> {
        let mut bundle: ParamBundle = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        bundle.grid.wbc_lag_days = bundle.wbc.delay_days;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("parameter bundle is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.tumor.validate()?;
        self.wbc.validate()?;
        for (i, d) in self.drugs.iter().enumerate() {
            d.validate()?;
            if self.drugs[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::invariant(format!("drug.{}", d.name), "duplicate name"));
            }
        }
        for c in &self.tumor.cell_types {
            if let Some(r) = &c.resistant_to {
                if !self.drugs.iter().any(|d| &d.name == r) {
                    return Err(Error::invariant(
                        format!("tumor.{}.resistant_to", c.name),
                        format!("unknown drug `{r}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Kill effect of drug `d` on cell type `q` (m^3/g/day).
    pub fn eta(&self, d: usize, q: usize) -> f64 {
        let drug = &self.drugs[d];
        let resistant = self.tumor.cell_types[q].resistant_to.as_deref() == Some(drug.name.as_str());
        drug.eta_for(resistant)
    }

    pub fn drug_index(&self, name: &str) -> Option<usize> {
        self.drugs.iter().position(|d| d.name == name)
    }

    /// Same bundle without any drugs (and without resistance references).
    pub fn without_drugs(&self) -> ParamBundle {
        let mut b = self.clone();
        b.drugs.clear();
        for c in &mut b.tumor.cell_types {
            c.resistant_to = None;
        }
        b
    }
}

/// Loads and validates a parameter file.
pub fn load_params(path: impl AsRef<Path>) -> Result<ParamBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    ParamBundle::from_toml_str(&text, path)
}

/// The shipped reference parameters.
pub fn default_params() -> ParamBundle {
    ParamBundle::from_toml_str(DEFAULT_PARAMS, Path::new("breast_cancer.toml"))
        .expect("shipped parameters are valid")
}

/// Diameter (mm) of a spherical tumor with `n` cells at constant density,
/// anchored at 1e9 cells = 25 mm.
pub fn cells_to_diameter(n: f64) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::invariant("n", "cell count must be positive"));
    }
    Ok(25.0 * (n / 1e9).cbrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Log-population per cell type.
    pub log_pops: Vec<f64>,
    pub prob: f64,
}

impl Scenario {
    pub fn total_cells(&self) -> f64 {
        self.log_pops.iter().map(|p| p.exp()).sum()
    }
}

/// Heterogeneity scenarios sorted by decreasing probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub labels: Vec<String>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    /// Validates and sorts (stable, so equal probabilities keep input order).
    pub fn new(labels: Vec<String>, mut scenarios: Vec<Scenario>) -> Result<ScenarioSet> {
        if scenarios.is_empty() {
            return Err(Error::invariant("scenarios", "at least one scenario required"));
        }
        let total: f64 = scenarios.iter().map(|s| s.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invariant(
                "scenarios.probability",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        for s in &scenarios {
            if s.log_pops.len() != labels.len() {
                return Err(Error::LengthMismatch {
                    what: "scenario log-populations",
                    expected: labels.len(),
                    actual: s.log_pops.len(),
                });
            }
            if s.log_pops.iter().any(|p| !p.is_finite()) || !(s.prob >= 0.0) {
                return Err(Error::invariant("scenarios", "log-populations must be finite"));
            }
        }
        scenarios.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Ok(ScenarioSet { labels, scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Probability-weighted mean count per cell type.
    pub fn mean_counts(&self) -> Vec<f64> {
        let total: f64 = self.scenarios.iter().map(|s| s.prob).sum();
        (0..self.labels.len())
            .map(|q| {
                self.scenarios
                    .iter()
                    .map(|s| s.prob * s.log_pops[q].exp())
                    .sum::<f64>()
                    / total
            })
            .collect()
    }

    /// Reads the CSV layout: one column per cell type, then `probability`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<ScenarioSet> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let n = headers.len();
        if n < 2 {
            return Err(Error::invariant("scenarios", "need at least one type column and probability"));
        }
        let labels = headers.iter().take(n - 1).map(str::to_string).collect();
        let mut scenarios = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invariant(format!("scenarios row {}", i + 1), e.to_string()))?;
            scenarios.push(Scenario {
                log_pops: vals[..n - 1].to_vec(),
                prob: vals[n - 1],
            });
        }
        ScenarioSet::new(labels, scenarios)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<ScenarioSet> {
        ScenarioSet::from_csv_reader(fs::File::open(path)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.labels.clone();
        header.push("probability".into());
        w.write_record(&header)?;
        for s in &self.scenarios {
            let mut row: Vec<String> = s.log_pops.iter().map(|v| format!("{v:.6}")).collect();
            row.push(format!("{}", s.prob));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The shipped reference scenarios.
pub fn default_scenarios() -> ScenarioSet {
    ScenarioSet::from_csv_reader(DEFAULT_SCENARIOS.as_bytes()).expect("shipped scenarios are valid")
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invariant(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invariant(field, format!("must be non-negative, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_drug_values() {
        let p = default_params();
        let xi: Vec<f64> = p.drugs.iter().map(|d| d.xi).collect();
        assert_eq!(xi, vec![0.6, 0.2, 0.8]);
        assert_eq!(p.wbc.beta_neu, 2.5e12);
        assert_eq!(p.grid.wbc_lag_days, 5);
        assert!((p.drugs[1].conc_cap(p.grid.compartment_volume) - 11.333_333).abs() < 1e-5);
    }

    #[test]
    fn zero_lambda_is_rejected() {
        let text = DEFAULT_PARAMS.replace("lambda = 7.0e-4", "lambda = 0.0");
        match ParamBundle::from_toml_str(&text, Path::new("x.toml")) {
            Err(Error::Invariant { field, .. }) => assert_eq!(field, "tumor.lambda"),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "[grid]\nhorizon_days = 21\nstep_minutes = \"sixty\"\n";
        match ParamBundle::from_toml_str(text, Path::new("bad.toml")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unsteady_wbc_production_rejected() {
        let text = DEFAULT_PARAMS.replace("production = 1.2e12", "production = 1.3e12");
        assert!(ParamBundle::from_toml_str(&text, Path::new("x.toml")).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let p = default_params();
        let again = ParamBundle::from_toml_str(&p.to_toml_string(), Path::new("rt.toml")).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn diameter_anchor_points() {
        assert!((cells_to_diameter(1e9).unwrap() - 25.0).abs() < 1e-12);
        assert!((cells_to_diameter(8e9).unwrap() - 50.0).abs() < 1e-12);
        let d = cells_to_diameter(0.4e9).unwrap();
        assert!((d - 18.42).abs() < 5e-3 && d < 20.0);
        assert!(cells_to_diameter(0.0).is_err());
        assert!(cells_to_diameter(-3.0).is_err());
    }

    #[test]
    fn grid_meals_snap_to_steps() {
        let g = default_params().grid;
        assert_eq!(g.n_steps(), 504);
        assert_eq!(g.meal_offsets(), vec![8, 13, 19]);
        let g4 = g.with_step_minutes(240).unwrap();
        assert_eq!(g4.n_steps(), 126);
        assert_eq!(g4.meal_offsets(), vec![2, 3, 4]);
        assert!(g.with_step_minutes(7 * 60).is_err());
    }

    #[test]
    fn shipped_initial_state_matches_scenario_means() {
        let p = default_params();
        let means = default_scenarios().mean_counts();
        for (c, m) in p.tumor.cell_types.iter().zip(means) {
            assert!((c.n0 / m - 1.0).abs() < 1e-9, "{} vs {}", c.n0, m);
            assert!((c.n_inf / c.n0 - 1000.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scenarios_sorted_and_normalized() {
        let s = default_scenarios();
        assert_eq!(s.len(), 10);
        assert!(s.scenarios.windows(2).all(|w| w[0].prob >= w[1].prob));
        let bad = Scenario { log_pops: vec![1.0], prob: 0.5 };
        assert!(ScenarioSet::new(vec!["a".into()], vec![bad]).is_err());
    }

    #[test]
    fn kill_effect_resistance_rule() {
        let p = default_params();
        // docetaxel on the docetaxel-resistant type
        assert!((p.eta(1, 2) - 0.25 * 8.0e-3).abs() < 1e-15);
        assert_eq!(p.eta(1, 0), 8.0e-3);
        assert_eq!(p.eta(1, 1), 8.0e-3);
    }
}
