use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt_nuisance, Scenario};
use super::dgp::{gen_dgp, DgpSpec};
use super::oracle::OracleNuisance;
use crate::binary::beta_id_binary;
use crate::crossfit::{crossfit_report, CrossfitOptions};
use crate::error::{MivError, Result};
use crate::general::{beta_id_general, collect_terms, variance_if};
use crate::influence::{aggregate, IfForm};
use crate::model::FunctionalSpec;
use crate::nuisance::{fit_nuisance_set, Diagnostics, TrimPolicy};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Plug-in with nuisances fitted once on the full sample.
    IdPlugIn,
    /// Plug-in averaged over held-out folds, median over repetitions.
    IdCrossfit,
    /// Cross-fitted influence-function estimator with median adjustment.
    IfCrossfit,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::IdPlugIn => "beta_ID",
            EstimatorKind::IdCrossfit => "beta_ID (cross-fit)",
            EstimatorKind::IfCrossfit => "beta_IF",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub crossfit: CrossfitOptions,
    pub estimators: Vec<EstimatorKind>,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            crossfit: CrossfitOptions::default(),
            estimators: vec![EstimatorKind::IdPlugIn, EstimatorKind::IfCrossfit],
        }
    }
}

/// Bias, variance and MSE against the truth over successful replications.
///
/// `variance` divides by the number of replications, so that
/// `mse = bias^2 + variance` holds exactly in real arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub estimates: Vec<f64>,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    /// Share of confidence intervals covering the truth (interval estimators only).
    pub coverage: Option<f64>,
    /// Confidence interval of every replication (interval estimators only).
    pub intervals: Option<Vec<(f64, f64)>>,
    /// Median-adjusted variance estimate of every replication.
    pub variance_estimates: Option<Vec<f64>>,
    /// Mean of the median-adjusted variance estimates.
    pub mean_variance_estimate: Option<f64>,
    /// Mean over replications of the median per-repetition variance estimate.
    pub mean_unadjusted_variance: Option<f64>,
}

impl EstimatorSummary {
    pub fn from_estimates(
        estimator: EstimatorKind,
        estimates: Vec<f64>,
        truth: f64,
        intervals: Option<&[(f64, f64)]>,
    ) -> Self {
        let n = estimates.len() as f64;
        let m = estimates.iter().sum::<f64>() / n;
        let variance = estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / n;
        let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n;
        let coverage = intervals.map(|iv| {
            iv.iter()
                .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
                .count() as f64
                / n
        });
        Self {
            estimator,
            estimates,
            bias: m - truth,
            variance,
            mse,
            coverage,
            intervals: intervals.map(<[_]>::to_vec),
            variance_estimates: None,
            mean_variance_estimate: None,
            mean_unadjusted_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub truth: f64,
    pub truth_se: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub failures: Vec<ReplicationFailure>,
    pub mean_clamp_fraction: f64,
    pub diagnostics: Diagnostics,
}

impl MonteCarloReport {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == kind)
    }
}

struct Replication {
    values: Vec<f64>,
    /// `(ci, adjusted variance, unadjusted variance)` of the IF estimator.
    interval: Option<((f64, f64), f64, f64)>,
    clamp_fraction: f64,
    diagnostics: Diagnostics,
}

fn one_replication(
    dgp: &DgpSpec,
    r: usize,
    spec: &FunctionalSpec,
    opts: &MonteCarloOptions,
) -> Result<Replication> {
    let data = gen_dgp(&dgp.clone().with_seed(derive_seed(dgp.seed, &[r as u64])))?;
    let table = &data.table;
    let mut cf_opts = opts.crossfit;
    cf_opts.seed = derive_seed(opts.crossfit.seed, &[r as u64, 1]);
    let needs_cf = opts
        .estimators
        .iter()
        .any(|e| matches!(e, EstimatorKind::IdCrossfit | EstimatorKind::IfCrossfit));
    let cf = if needs_cf {
        Some(crossfit_report(table, spec, &cf_opts)?)
    } else {
        None
    };
    let mut diagnostics = cf
        .as_ref()
        .map(|c| c.beta.diagnostics.clone())
        .unwrap_or_default();
    let mut values = Vec::with_capacity(opts.estimators.len());
    let mut interval = None;
    for kind in &opts.estimators {
        match kind {
            EstimatorKind::IdPlugIn => {
                let ns = fit_nuisance_set(table, spec, &cf_opts.learner, cf_opts.mode)?;
                diagnostics.merge(&ns.diagnostics);
                let form = cf_opts
                    .form
                    .unwrap_or_else(|| IfForm::for_levels(table.levels));
                let est = match form {
                    IfForm::Binary => beta_id_binary(table, &ns, cf_opts.policy)?,
                    IfForm::General => beta_id_general(table, &ns, cf_opts.policy)?,
                };
                diagnostics.merge(&est.diagnostics);
                values.push(est.value);
            }
            EstimatorKind::IdCrossfit => values.push(cf.as_ref().expect("computed").plug_in),
            EstimatorKind::IfCrossfit => {
                let b = &cf.as_ref().expect("computed").beta;
                values.push(b.estimate);
                interval = Some((b.ci, b.std_error.powi(2), b.unadjusted_std_error.powi(2)));
            }
        }
    }
    Ok(Replication {
        values,
        interval,
        clamp_fraction: data.clamp_fraction(),
        diagnostics,
    })
}

/// Replication `r` draws its data from `derive_seed(dgp.seed, [r])` and its
/// fold splits from `derive_seed(opts.crossfit.seed, [r, 1])`, so it does not
/// depend on the other replications. Failed replications are listed in the
/// report and excluded from the summaries.
pub fn run_monte_carlo(
    dgp: &DgpSpec,
    truth: f64,
    truth_se: f64,
    replications: usize,
    spec: &FunctionalSpec,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloReport> {
    if replications < 2 {
        return Err(MivError::Config(
            "at least 2 replications are needed".into(),
        ));
    }
    if opts.estimators.is_empty() {
        return Err(MivError::Config("no estimators requested".into()));
    }
    opts.crossfit.validate()?;
    let results: Vec<Result<Replication>> = (0..replications)
        .into_par_iter()
        .map(|r| one_replication(dgp, r, spec, opts))
        .collect();

    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => ok.push(rep),
            Err(e) => failures.push(ReplicationFailure {
                replication: r,
                error: e.to_string(),
            }),
        }
    }
    if ok.is_empty() {
        return Err(MivError::Generation(format!(
            "all {replications} replications failed; first error: {}",
            failures[0].error
        )));
    }
    let mut diagnostics = Diagnostics::default();
    for rep in &ok {
        diagnostics.merge(&rep.diagnostics);
    }
    let estimators = opts
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let estimates: Vec<f64> = ok.iter().map(|rep| rep.values[k]).collect();
            if kind == EstimatorKind::IfCrossfit {
                let iv: Vec<_> = ok
                    .iter()
                    .map(|rep| rep.interval.expect("IF interval"))
                    .collect();
                let cis: Vec<(f64, f64)> = iv.iter().map(|v| v.0).collect();
                let mut s = EstimatorSummary::from_estimates(kind, estimates, truth, Some(&cis));
                let m = iv.len() as f64;
                s.mean_variance_estimate = Some(iv.iter().map(|v| v.1).sum::<f64>() / m);
                s.variance_estimates = Some(iv.iter().map(|v| v.1).collect());
                s.mean_unadjusted_variance = Some(iv.iter().map(|v| v.2).sum::<f64>() / m);
                s
            } else {
                EstimatorSummary::from_estimates(kind, estimates, truth, None)
            }
        })
        .collect();
    Ok(MonteCarloReport {
        dgp: dgp.clone(),
        replications,
        truth,
        truth_se,
        estimators,
        failures,
        mean_clamp_fraction: ok.iter().map(|r| r.clamp_fraction).sum::<f64>() / ok.len() as f64,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOutcome {
    pub scenario: Scenario,
    pub form: IfForm,
    pub estimates: Vec<f64>,
    pub bias: f64,
    /// Standard error of `bias`: influence-function variances of the
    /// replications combined with the error of the truth itself.
    pub mc_se: f64,
}

impl RobustnessOutcome {
    pub fn z_score(&self) -> f64 {
        self.bias / self.mc_se
    }
}

/// Evaluates the influence-function estimator with true nuisances corrupted
/// per scenario on `replications` fresh samples of size `dgp.n`.
pub fn run_robustness(
    dgp: &DgpSpec,
    scenarios: &[Scenario],
    replications: usize,
    truth: f64,
    truth_se: f64,
) -> Result<Vec<RobustnessOutcome>> {
    if replications < 1 {
        return Err(MivError::Config("at least 1 replication is needed".into()));
    }
    let spec = FunctionalSpec::mean();
    let default_form = IfForm::for_levels(dgp.params.levels());
    let per_rep: Vec<Result<Vec<(f64, f64)>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let data = gen_dgp(&dgp.clone().with_seed(derive_seed(dgp.seed, &[r as u64])))?;
            scenarios
                .par_iter()
                .map(|s| {
                    let ns = corrupt_nuisance(OracleNuisance::new(dgp, &spec)?, &s.components())?;
                    let mut diag = Diagnostics::default();
                    let form = s.form().unwrap_or(default_form);
                    let terms =
                        collect_terms(&data.table, &ns, &spec, form, TrimPolicy::Floor, &mut diag)?;
                    let (est, centered) = aggregate(&terms, None, &mut diag)?;
                    Ok((est, variance_if(&centered)?))
                })
                .collect()
        })
        .collect();
    let per_rep: Vec<Vec<(f64, f64)>> = per_rep.into_iter().collect::<Result<_>>()?;
    let m = replications as f64;
    Ok(scenarios
        .iter()
        .enumerate()
        .map(|(k, &scenario)| {
            let estimates: Vec<f64> = per_rep.iter().map(|v| v[k].0).collect();
            let var_sum: f64 = per_rep.iter().map(|v| v[k].1).sum();
            RobustnessOutcome {
                scenario,
                form: scenario.form().unwrap_or(default_form),
                bias: estimates.iter().sum::<f64>() / m - truth,
                estimates,
                mc_se: (var_sum / (m * m) + truth_se * truth_se).sqrt(),
            }
        })
        .collect())
}
