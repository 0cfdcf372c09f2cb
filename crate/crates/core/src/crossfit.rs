//! K-fold cross-fitting of the influence-function estimator and the median
//! adjustment over repeated sample splits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
use crate::general::{population_from_terms, variance_if, PopulationEstimate};
use crate::influence::{aggregate, row_terms, IfForm, RowTerms};
use crate::learners::LearnerConfig;
use crate::model::{FunctionalSpec, ObservationTable};
use crate::nuisance::{fit_nuisance_set, Diagnostics, MarginalizationMode, Nuisance, TrimPolicy};
use crate::rng::stream;
use crate::stats::{median, normal_critical};

const FOLD_STREAM: u64 = 0xF01D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of every row.
    pub assignments: Vec<usize>,
    pub seed: u64,
    pub repetition: u64,
}

impl FoldPlan {
    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn rows_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

/// Random balanced partition of `0..n` into `k` folds, fixed by `(seed, repetition)`.
pub fn make_folds(n: usize, k: usize, seed: u64, repetition: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(MivError::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(MivError::Config(format!("{n} rows cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[repetition, FOLD_STREAM]));
    let mut assignments = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignments[row] = pos % k;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
        repetition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossfitOptions {
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub mode: MarginalizationMode,
    pub policy: TrimPolicy,
    /// `None` picks the binary form for two levels and the general form otherwise.
    pub form: Option<IfForm>,
    /// Winsorize influence values at `k` interquartile ranges.
    pub winsorize: Option<f64>,
    pub learner: LearnerConfig,
}

impl Default for CrossfitOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            repetitions: 11,
            seed: 20_250_101,
            ci_level: 0.95,
            mode: MarginalizationMode::Marginalize,
            policy: TrimPolicy::Floor,
            form: None,
            winsorize: None,
            learner: LearnerConfig::default(),
        }
    }
}

impl CrossfitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(MivError::Config("folds must be at least 2".into()));
        }
        if self.repetitions < 1 {
            return Err(MivError::Config("repetitions must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(MivError::Config("ci_level must lie in (0, 1)".into()));
        }
        if let Some(k) = self.winsorize {
            if !(k > 0.0) {
                return Err(MivError::Config(
                    "winsorize multiplier must be positive".into(),
                ));
            }
        }
        self.learner.validate()
    }
}

/// Per-row terms from one cross-fitting pass, in row order.
#[derive(Debug, Clone)]
pub struct CrossfitTerms {
    /// `(row index, terms)`; rows dropped by the trim policy are absent.
    pub rows: Vec<(usize, RowTerms)>,
    pub diagnostics: Diagnostics,
}

impl CrossfitTerms {
    pub fn terms(&self) -> Vec<RowTerms> {
        self.rows.iter().map(|(_, t)| *t).collect()
    }

    /// Cross-fitted plug-in: mean of `delta` over incomplete cases.
    pub fn plug_in(&self) -> Result<f64> {
        let d: Vec<f64> = self
            .rows
            .iter()
            .filter(|(_, t)| !t.r)
            .map(|(_, t)| t.delta)
            .collect();
        if d.is_empty() {
            return Err(MivError::NoIncompleteCases);
        }
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }
}

fn check_training(table: &ObservationTable, train: &[usize], fold: usize) -> Result<()> {
    let mut level_seen = vec![false; table.levels];
    let (mut ones, mut zeros) = (0, 0);
    for &i in train {
        level_seen[table.z[i]] = true;
        if table.r[i] {
            ones += 1;
        } else {
            zeros += 1;
        }
    }
    if let Some(level) = level_seen.iter().position(|s| !s) {
        return Err(MivError::Fold {
            fold,
            reason: format!("training complement has no rows with instrument level {level}"),
        });
    }
    if ones == 0 || zeros == 0 {
        return Err(MivError::Fold {
            fold,
            reason: format!(
                "training complement lacks R={}",
                if ones == 0 { 1 } else { 0 }
            ),
        });
    }
    Ok(())
}

/// Runs the fold loop with a caller-supplied fitting routine, which receives
/// the training row indices of each fold. Folds are processed in parallel
/// and reassembled in row order.
pub fn crossfit_terms_with<N, F>(
    table: &ObservationTable,
    spec: &FunctionalSpec,
    plan: &FoldPlan,
    form: IfForm,
    policy: TrimPolicy,
    fit: F,
) -> Result<CrossfitTerms>
where
    N: Nuisance,
    F: Fn(usize, &[usize]) -> Result<(N, Diagnostics)> + Sync,
{
    let per_fold: Vec<Result<(Vec<(usize, RowTerms)>, Diagnostics)>> = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let train = plan.rows_outside(fold);
            check_training(table, &train, fold)?;
            let (ns, mut diag) = fit(fold, &train)?;
            let mut out = Vec::new();
            for i in plan.rows_in(fold) {
                let row = table.row(i);
                let eval = ns.evaluate(row.x);
                if let Some(t) = row_terms(form, &row, &eval, spec, policy, &mut diag)? {
                    out.push((i, t));
                }
            }
            Ok((out, diag))
        })
        .collect();
    let mut rows = Vec::with_capacity(table.n());
    let mut diagnostics = Diagnostics::default();
    for res in per_fold {
        let (r, d) = res?;
        rows.extend(r);
        diagnostics.merge(&d);
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(CrossfitTerms { rows, diagnostics })
}

/// Cross-fitting with the built-in learners for one repetition.
pub fn crossfit_terms(
    table: &ObservationTable,
    spec: &FunctionalSpec,
    opts: &CrossfitOptions,
    repetition: u64,
) -> Result<CrossfitTerms> {
    opts.validate()?;
    let plan = make_folds(table.n(), opts.folds, opts.seed, repetition)?;
    let form = opts
        .form
        .unwrap_or_else(|| IfForm::for_levels(table.levels));
    crossfit_terms_with(table, spec, &plan, form, opts.policy, |fold, train| {
        let sub = table.subset(train);
        let ns = fit_nuisance_set(&sub, spec, &opts.learner, opts.mode).map_err(|e| match e {
            MivError::Fit(reason) => MivError::Fold { fold, reason },
            other => other,
        })?;
        let diag = ns.diagnostics.clone();
        Ok((ns, diag))
    })
}

/// Result of one cross-fitting repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub estimate: f64,
    pub variance: f64,
    pub plug_in: f64,
    pub population: Option<PopulationEstimate>,
    pub diagnostics: Diagnostics,
}

pub fn summarize_terms(cf: &CrossfitTerms, winsorize: Option<f64>) -> Result<RepetitionResult> {
    let mut diagnostics = cf.diagnostics.clone();
    let terms = cf.terms();
    let (estimate, centered) = aggregate(&terms, winsorize, &mut diagnostics)?;
    let variance = variance_if(&centered)?;
    Ok(RepetitionResult {
        estimate,
        variance,
        plug_in: cf.plug_in()?,
        population: population_from_terms(&terms, estimate).ok(),
        diagnostics,
    })
}

/// Estimate and variance of the nonrespondent functional from one repetition.
pub fn crossfit_estimate(
    table: &ObservationTable,
    spec: &FunctionalSpec,
    opts: &CrossfitOptions,
    repetition: u64,
) -> Result<RepetitionResult> {
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let cf = crossfit_terms(table, spec, opts, repetition)?;
    summarize_terms(&cf, opts.winsorize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianAdjusted {
    pub estimate: f64,
    pub variance: f64,
    pub std_error: f64,
    pub ci: (f64, f64),
    /// Median of the per-repetition variances, without the split-dispersion term.
    pub unadjusted_variance: f64,
}

/// Median over repetitions of the estimates, with variance
/// `median_s(variance_s + (estimate_s - median)^2)`.
pub fn median_adjust(results: &[(f64, f64)], ci_level: f64) -> Result<MedianAdjusted> {
    if results.is_empty() {
        return Err(MivError::Config(
            "median adjustment over zero repetitions".into(),
        ));
    }
    let estimates: Vec<f64> = results.iter().map(|r| r.0).collect();
    let point = median(&estimates);
    let inflated: Vec<f64> = results
        .iter()
        .map(|(e, v)| v + (e - point).powi(2))
        .collect();
    let variance = median(&inflated);
    let unadjusted_variance = median(&results.iter().map(|r| r.1).collect::<Vec<_>>());
    let std_error = variance.max(0.0).sqrt();
    let half = normal_critical(ci_level) * std_error;
    Ok(MedianAdjusted {
        estimate: point,
        variance,
        std_error,
        ci: (point - half, point + half),
        unadjusted_variance,
    })
}

/// Final estimate with its inputs and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_level: f64,
    pub ci: (f64, f64),
    pub unadjusted_std_error: f64,
    pub n: usize,
    pub n0: usize,
    /// `(estimate, variance)` of every repetition, in repetition order.
    pub per_repetition: Vec<(f64, f64)>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    fn build(
        pairs: Vec<(f64, f64)>,
        ci_level: f64,
        n: usize,
        n0: usize,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let adj = median_adjust(&pairs, ci_level)?;
        Ok(Self {
            estimate: adj.estimate,
            std_error: adj.std_error,
            ci_level,
            ci: adj.ci,
            unadjusted_std_error: adj.unadjusted_variance.max(0.0).sqrt(),
            n,
            n0,
            per_repetition: pairs,
            diagnostics,
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfitOutput {
    /// Nonrespondent functional `E[h(Y; psi) | R = 0]`.
    pub beta: EstimateReport,
    /// Whole-population moment `E[h(Y; psi)]`.
    pub population: Option<EstimateReport>,
    /// Median over repetitions of the cross-fitted plug-in estimate.
    pub plug_in: f64,
}

/// All repetitions of cross-fitting followed by the median adjustment.
pub fn crossfit_report(
    table: &ObservationTable,
    spec: &FunctionalSpec,
    opts: &CrossfitOptions,
) -> Result<CrossfitOutput> {
    opts.validate()?;
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let reps: Vec<Result<RepetitionResult>> = (0..opts.repetitions as u64)
        .into_par_iter()
        .map(|rep| crossfit_estimate(table, spec, opts, rep))
        .collect();
    let reps: Vec<RepetitionResult> = reps.into_iter().collect::<Result<_>>()?;
    let mut diagnostics = Diagnostics::default();
    if opts.repetitions % 2 == 0 {
        diagnostics
            .warnings
            .push("even number of repetitions; the median averages the two middle splits".into());
    }
    for r in &reps {
        diagnostics.merge(&r.diagnostics);
    }
    let pairs: Vec<(f64, f64)> = reps.iter().map(|r| (r.estimate, r.variance)).collect();
    let beta = EstimateReport::build(pairs, opts.ci_level, table.n(), table.n0(), diagnostics)?;
    let population = if reps.iter().all(|r| r.population.is_some()) {
        let pairs = reps
            .iter()
            .map(|r| {
                let p = r.population.as_ref().expect("checked");
                (p.estimate, p.variance)
            })
            .collect();
        Some(EstimateReport::build(
            pairs,
            opts.ci_level,
            table.n(),
            table.n0(),
            Diagnostics::default(),
        )?)
    } else {
        None
    };
    let plug_in = median(&reps.iter().map(|r| r.plug_in).collect::<Vec<_>>());
    Ok(CrossfitOutput {
        beta,
        population,
        plug_in,
    })
}
