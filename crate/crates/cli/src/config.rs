//! TOML analysis configuration.
//!
//! Every section except `format` is optional. A minimal estimation config:
//!
//! ```toml
//! format = "miv-config/1"
//!
//! [data]
//! outcome = "y"
//! response = "r"
//! instruments = ["interviewer_age"]
//! covariates = ["age", "income"]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use miv_core::crossfit::CrossfitOptions;
use miv_core::influence::IfForm;
use miv_core::learners::LearnerConfig;
use miv_core::nuisance::{MarginalizationMode, TrimPolicy};
use miv_core::simulation::{ClampPolicy, DgpFamily, DgpParams, DgpSpec, EstimatorKind};
use miv_core::FunctionalSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_FORMAT: &str = "miv-config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub functional: FunctionalConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            data: None,
            functional: FunctionalConfig::default(),
            estimation: EstimationConfig::default(),
            learner: LearnerConfig::default(),
            simulation: None,
        }
    }
}

/// How a raw instrument column becomes levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discretize {
    /// Quartile bins for numeric columns with more than four distinct values,
    /// one level per value otherwise.
    #[default]
    Auto,
    Categorical,
    Quartile,
}

/// How several instrument columns are turned into analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentMode {
    /// One instrument whose levels are the observed combinations.
    #[default]
    Product,
    /// A separate analysis for each instrument column.
    PerInstrument,
}

/// What to do with an outcome recorded on a row whose response flag is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomePolicy {
    #[default]
    Error,
    /// Drop the value and report the rows as a warning.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub outcome: String,
    pub response: String,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Per-instrument rule; columns not listed use [`Discretize::Auto`].
    #[serde(default)]
    pub discretize: BTreeMap<String, Discretize>,
    #[serde(default)]
    pub instrument_mode: InstrumentMode,
    #[serde(default)]
    pub outcome_under_nonresponse: OutcomePolicy,
}

impl DataConfig {
    pub fn rule(&self, column: &str) -> Discretize {
        self.discretize.get(column).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.instruments.is_empty() {
            return Err(CliError::Config(
                "at least one instrument column is required".into(),
            ));
        }
        let mut seen = BTreeMap::new();
        let roles = [("outcome", &self.outcome), ("response", &self.response)]
            .into_iter()
            .chain(self.instruments.iter().map(|c| ("instrument", c)))
            .chain(self.covariates.iter().map(|c| ("covariate", c)));
        for (role, col) in roles {
            if col.is_empty() {
                return Err(CliError::Config(format!("empty {role} column name")));
            }
            if let Some(prev) = seen.insert(col.clone(), role) {
                return Err(CliError::Config(format!(
                    "column '{col}' is used both as {prev} and as {role}"
                )));
            }
        }
        if let Some(col) = self
            .discretize
            .keys()
            .find(|c| !self.instruments.contains(c))
        {
            return Err(CliError::Config(format!(
                "discretize rule given for '{col}', which is not an instrument column"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    #[default]
    Mean,
    Quantile {
        q: f64,
    },
}

impl FunctionalConfig {
    /// The spec at `psi = 0`; quantiles get their `psi` from the solver.
    pub fn spec(&self) -> CliResult<FunctionalSpec> {
        match *self {
            FunctionalConfig::Mean => Ok(FunctionalSpec::mean()),
            FunctionalConfig::Quantile { q } => Ok(FunctionalSpec::quantile(q, 0.0)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub mode: MarginalizationMode,
    pub trim: TrimPolicy,
    pub winsorize: Option<f64>,
    pub form: Option<IfForm>,
    /// Grid size of the quantile root search.
    pub grid_points: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        let cf = CrossfitOptions::default();
        Self {
            folds: cf.folds,
            repetitions: cf.repetitions,
            seed: cf.seed,
            ci_level: cf.ci_level,
            mode: cf.mode,
            trim: cf.policy,
            winsorize: cf.winsorize,
            form: cf.form,
            grid_points: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub design: DgpFamily,
    /// Coefficients for `design = "custom"`.
    pub params: Option<DgpParams>,
    pub clamp_policy: ClampPolicy,
    /// Sample sizes of the Monte Carlo study, one block per size.
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Draws used for the brute-force truth.
    pub oracle_draws: usize,
    /// Skips the oracle and uses this truth instead.
    pub truth: Option<f64>,
    pub robustness_n: usize,
    pub robustness_replications: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            design: DgpFamily::BinarySec51,
            params: None,
            clamp_policy: ClampPolicy::default(),
            sizes: vec![1000],
            replications: 300,
            seed: 1,
            estimators: vec![EstimatorKind::IdPlugIn, EstimatorKind::IfCrossfit],
            oracle_draws: 10_000_000,
            truth: None,
            robustness_n: 100_000,
            robustness_replications: 4,
        }
    }
}

impl SimulationConfig {
    pub fn dgp(&self, n: usize) -> CliResult<DgpSpec> {
        let spec = match (self.design, &self.params) {
            (DgpFamily::Custom, Some(p)) => DgpSpec::custom(p.clone(), n, self.seed),
            (DgpFamily::Custom, None) => {
                return Err(CliError::Config(
                    "design = \"custom\" needs a [simulation.params] table".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(CliError::Config(
                    "[simulation.params] is only read for design = \"custom\"".into(),
                ))
            }
            (family, None) => DgpSpec::new(family, n, self.seed)?,
        };
        spec.params.validate()?;
        Ok(spec.with_clamp(self.clamp_policy))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(CliError::Config(
                "sizes must be a non-empty list of positive integers".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(CliError::Config("no estimators requested".into()));
        }
        self.dgp(self.sizes[0]).map(|_| ())
    }
}

/// Values given on the command line; each replaces its config counterpart.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    /// Cross-fitting repetitions for `estimate`, Monte Carlo replications otherwise.
    pub reps: Option<usize>,
    pub ci_level: Option<f64>,
    pub trim: Option<TrimPolicy>,
    /// `Some(None)` switches winsorizing off.
    pub winsorize: Option<Option<f64>>,
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.format != CONFIG_FORMAT {
            return Err(CliError::Config(format!(
                "unsupported config format '{}', expected '{CONFIG_FORMAT}'",
                self.format
            )));
        }
        if let Some(d) = &self.data {
            d.validate()?;
        }
        if let Some(s) = &self.simulation {
            s.validate()?;
        }
        self.functional.spec()?;
        if self.estimation.grid_points < 2 {
            return Err(CliError::Config("grid_points must be at least 2".into()));
        }
        self.crossfit_options().validate()?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides, reps_are_crossfit: bool) -> CliResult<()> {
        if let Some(seed) = o.seed {
            self.estimation.seed = seed;
            if let Some(s) = &mut self.simulation {
                s.seed = seed;
            }
        }
        if let Some(k) = o.folds {
            self.estimation.folds = k;
        }
        if let Some(r) = o.reps {
            if reps_are_crossfit {
                self.estimation.repetitions = r;
            } else {
                let sim = self
                    .simulation
                    .get_or_insert_with(SimulationConfig::default);
                sim.replications = r;
                sim.robustness_replications = r;
            }
        }
        if let Some(c) = o.ci_level {
            self.estimation.ci_level = c;
        }
        if let Some(t) = o.trim {
            self.estimation.trim = t;
        }
        if let Some(w) = o.winsorize {
            self.estimation.winsorize = w;
        }
        self.validate()
    }

    pub fn crossfit_options(&self) -> CrossfitOptions {
        let e = &self.estimation;
        CrossfitOptions {
            folds: e.folds,
            repetitions: e.repetitions,
            seed: e.seed,
            ci_level: e.ci_level,
            mode: e.mode,
            policy: e.trim,
            form: e.form,
            winsorize: e.winsorize,
            learner: self.learner,
        }
    }

    pub fn data(&self) -> CliResult<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Config("the config has no [data] section".into()))
    }

    pub fn simulation(&self) -> SimulationConfig {
        self.simulation.clone().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_cfg() -> DataConfig {
        DataConfig {
            outcome: "y".into(),
            response: "r".into(),
            instruments: vec!["z".into()],
            covariates: vec!["x1".into()],
            discretize: BTreeMap::new(),
            instrument_mode: InstrumentMode::Product,
            outcome_under_nonresponse: OutcomePolicy::Error,
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = AnalysisConfig::from_toml(
            r#"
format = "miv-config/1"
[data]
outcome = "y"
response = "r"
instruments = ["z"]
[learner]
basis_df = 1
"#,
        )
        .unwrap();
        assert_eq!(cfg.learner.basis_df, 1);
        assert_eq!(
            cfg.learner.ridge_lambda,
            LearnerConfig::default().ridge_lambda
        );
        assert_eq!(cfg.estimation.folds, 5);
        assert_eq!(cfg.estimation.repetitions, 11);
        assert_eq!(cfg.functional, FunctionalConfig::Mean);
        assert_eq!(cfg.data().unwrap().rule("z"), Discretize::Auto);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = AnalysisConfig {
            data: Some(data_cfg()),
            simulation: Some(SimulationConfig::default()),
            functional: FunctionalConfig::Quantile { q: 0.25 },
            ..Default::default()
        };
        cfg.estimation.winsorize = Some(4.0);
        let back = AnalysisConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(AnalysisConfig::from_toml("format = \"miv-config/0\"").is_err());
        assert!(AnalysisConfig::from_toml("format = \"miv-config/1\"\nfoo = 1").is_err());
        let mut d = data_cfg();
        d.covariates.push("z".into());
        assert!(d.validate().is_err());
        let mut d = data_cfg();
        d.instruments.clear();
        assert!(d.validate().is_err());
        let mut d = data_cfg();
        d.discretize.insert("x1".into(), Discretize::Quartile);
        assert!(d.validate().is_err());
        let q = "format = \"miv-config/1\"\n[functional]\nkind = \"quantile\"\nq = 1.5";
        assert!(AnalysisConfig::from_toml(q).is_err());
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut cfg = AnalysisConfig::default();
        let o = Overrides {
            seed: Some(9),
            folds: Some(3),
            reps: Some(7),
            ci_level: Some(0.9),
            trim: Some(TrimPolicy::Drop),
            winsorize: Some(Some(3.0)),
        };
        cfg.apply(&o, true).unwrap();
        let cf = cfg.crossfit_options();
        assert_eq!((cf.seed, cf.folds, cf.repetitions), (9, 3, 7));
        assert_eq!(cf.policy, TrimPolicy::Drop);
        assert_eq!(cf.winsorize, Some(3.0));
        assert!(cfg
            .apply(
                &Overrides {
                    folds: Some(1),
                    ..Default::default()
                },
                true
            )
            .is_err());
        let mut cfg = AnalysisConfig::default();
        cfg.apply(
            &Overrides {
                reps: Some(20),
                ..Default::default()
            },
            false,
        )
        .unwrap();
        assert_eq!(cfg.simulation().replications, 20);
        assert_eq!(cfg.estimation.repetitions, 11);
    }

    #[test]
    fn custom_design_needs_params() {
        let mut s = SimulationConfig {
            design: DgpFamily::Custom,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        s.params = Some(DgpParams::binary_sec51());
        s.validate().unwrap();
    }
}
