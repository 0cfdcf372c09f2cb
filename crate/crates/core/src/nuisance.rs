//! Nuisance functions `pi_z(x)`, `rho_z(x)`, `mu_z(x)`, the scalar `pi0`, and
//! the contrasts derived from them.
//!
//! Estimators only see the [`Nuisance`] trait: fitted learners, brute-force
//! truths from a simulation design, and deliberately corrupted versions all
//! implement it. A nuisance set is evaluated once per covariate vector into a
//! [`NuisanceEval`] holding every level, from which the contrasts are read.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
pub use crate::learners::LearnerConfig;
use crate::learners::{
    fit_linear, fit_logistic, fit_multinomial, LinearFit, LogisticFit, MultinomialFit, PolyBasis,
};
use crate::model::{response_moment, FunctionalSpec, ObservationTable};

/// Predicted probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]`.
pub const PROB_CLIP: f64 = 1e-6;
pub const DEFAULT_EPS_DEN: f64 = 1e-6;
/// Levels with fewer training rows fall back to the pooled model.
pub const MIN_LEVEL_ROWS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginalizationMode {
    /// `pi(x)` and `mu(x)` are `sum_z rho_z(x) * (.)`.
    #[default]
    Marginalize,
    /// `pi(x)` and `mu(x)` come from their own regressions.
    Direct,
}

/// What to do when a denominator falls below `eps_den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrimPolicy {
    /// Replace the denominator by `eps_den` with its sign kept.
    #[default]
    Floor,
    /// Exclude the row from the average.
    Drop,
    /// Fail with [`MivError::DenominatorFloor`].
    Strict,
}

/// Counters reported alongside every estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub floor_hits: usize,
    pub dropped_rows: usize,
    pub probability_clips: usize,
    pub winsorized: usize,
    pub nonconverged_fits: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.floor_hits += other.floor_hits;
        self.dropped_rows += other.dropped_rows;
        self.probability_clips += other.probability_clips;
        self.winsorized += other.winsorized;
        self.nonconverged_fits += other.nonconverged_fits;
        for w in &other.warnings {
            if !self.warnings.contains(w) {
                self.warnings.push(w.clone());
            }
        }
    }
}

/// Applies the trim policy to a denominator. `Ok(None)` means "drop the row".
pub fn guard_denominator(
    value: f64,
    eps: f64,
    policy: TrimPolicy,
    what: &'static str,
    diag: &mut Diagnostics,
) -> Result<Option<f64>> {
    if value.abs() >= eps {
        return Ok(Some(value));
    }
    match policy {
        TrimPolicy::Strict => Err(MivError::DenominatorFloor {
            what,
            value,
            floor: eps,
        }),
        TrimPolicy::Floor => {
            diag.floor_hits += 1;
            Ok(Some(if value < 0.0 { -eps } else { eps }))
        }
        TrimPolicy::Drop => {
            diag.floor_hits += 1;
            Ok(None)
        }
    }
}

/// All nuisance values at one covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEval {
    /// `P(R = 1 | Z = z, X = x)` per level.
    pub pi_z: Vec<f64>,
    /// `P(Z = z | X = x)` per level.
    pub rho: Vec<f64>,
    /// `E[R h(Y; psi) | Z = z, X = x]` per level.
    pub mu_z: Vec<f64>,
    /// Separately modelled `P(R = 1 | X = x)`, when not marginalized.
    pub pi_direct: Option<f64>,
    /// Separately modelled `E[R h | X = x]`, when not marginalized.
    pub mu_direct: Option<f64>,
    /// Scalar `P(R = 0)`.
    pub pi0: f64,
    pub eps_den: f64,
    /// Number of predictions clipped while building this evaluation.
    pub clips: usize,
}

impl NuisanceEval {
    pub fn levels(&self) -> usize {
        self.pi_z.len()
    }

    pub fn pi_marg(&self) -> f64 {
        self.pi_direct
            .unwrap_or_else(|| self.rho.iter().zip(&self.pi_z).map(|(r, p)| r * p).sum())
    }

    pub fn mu_marg(&self) -> f64 {
        self.mu_direct
            .unwrap_or_else(|| self.rho.iter().zip(&self.mu_z).map(|(r, m)| r * m).sum())
    }

    pub fn delta_r(&self, z: usize) -> f64 {
        self.pi_z[z] - self.pi_marg()
    }

    pub fn delta_y(&self, z: usize) -> f64 {
        self.mu_z[z] - self.mu_marg()
    }

    /// `delta^Y(z, x) / delta^R(z, x)`; errors when the denominator is below the floor.
    pub fn delta(&self, z: usize) -> Result<f64> {
        let den = self.delta_r(z);
        if den.abs() < self.eps_den {
            return Err(MivError::DenominatorFloor {
                what: "delta_r",
                value: den,
                floor: self.eps_den,
            });
        }
        Ok(self.delta_y(z) / den)
    }
}

/// A set of nuisance functions that can be evaluated at any covariate vector.
pub trait Nuisance: Send + Sync {
    fn levels(&self) -> usize;
    fn mode(&self) -> MarginalizationMode;
    fn evaluate(&self, x: &[f64]) -> NuisanceEval;

    fn pi_z(&self, z: usize, x: &[f64]) -> f64 {
        self.evaluate(x).pi_z[z]
    }
    fn rho_z(&self, z: usize, x: &[f64]) -> f64 {
        self.evaluate(x).rho[z]
    }
    fn mu_z(&self, z: usize, x: &[f64]) -> f64 {
        self.evaluate(x).mu_z[z]
    }
    fn pi_marg(&self, x: &[f64]) -> f64 {
        self.evaluate(x).pi_marg()
    }
    fn mu_marg(&self, x: &[f64]) -> f64 {
        self.evaluate(x).mu_marg()
    }
    fn delta_r(&self, z: usize, x: &[f64]) -> f64 {
        self.evaluate(x).delta_r(z)
    }
    fn delta_y(&self, z: usize, x: &[f64]) -> f64 {
        self.evaluate(x).delta_y(z)
    }
    fn delta(&self, z: usize, x: &[f64]) -> Result<f64> {
        self.evaluate(x).delta(z)
    }
}

/// Nuisance set defined by a closure; used for known truths and test fixtures.
pub struct FnNuisance<F> {
    levels: usize,
    mode: MarginalizationMode,
    f: F,
}

impl<F> FnNuisance<F>
where
    F: Fn(&[f64]) -> NuisanceEval + Send + Sync,
{
    pub fn new(levels: usize, mode: MarginalizationMode, f: F) -> Self {
        Self { levels, mode, f }
    }
}

impl<F> Nuisance for FnNuisance<F>
where
    F: Fn(&[f64]) -> NuisanceEval + Send + Sync,
{
    fn levels(&self) -> usize {
        self.levels
    }
    fn mode(&self) -> MarginalizationMode {
        self.mode
    }
    fn evaluate(&self, x: &[f64]) -> NuisanceEval {
        (self.f)(x)
    }
}

fn clip_probability(p: f64, clips: &mut usize) -> f64 {
    if p < PROB_CLIP {
        *clips += 1;
        PROB_CLIP
    } else if p > 1.0 - PROB_CLIP {
        *clips += 1;
        1.0 - PROB_CLIP
    } else {
        p
    }
}

#[derive(Debug, Clone)]
enum LevelModels<M> {
    Stratified(Vec<M>),
    /// One model on `[basis(x), level indicators, level indicators * x]`.
    Pooled(M),
}

/// Nuisance set estimated from a training table with the built-in learners.
#[derive(Debug, Clone)]
pub struct FittedNuisance {
    levels: usize,
    p: usize,
    mode: MarginalizationMode,
    eps_den: f64,
    pi0: f64,
    basis: PolyBasis,
    pi_models: LevelModels<LogisticFit>,
    rho_model: MultinomialFit,
    mu_models: LevelModels<LinearFit>,
    pi_direct: Option<LogisticFit>,
    mu_direct: Option<LinearFit>,
    cfg: LearnerConfig,
    /// Fit-time counters (non-converged fits, warnings).
    pub diagnostics: Diagnostics,
}

fn pooled_features(basis: &PolyBasis, levels: usize, x: &[f64], z: usize) -> Vec<f64> {
    let mut f = basis.features(x);
    let std = basis.standardize(x);
    for level in 1..levels {
        f.push(f64::from(u8::from(z == level)));
    }
    for level in 1..levels {
        let on = f64::from(u8::from(z == level));
        f.extend(std.iter().map(|v| on * v));
    }
    f
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

impl FittedNuisance {
    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    pub fn eps_den(&self) -> f64 {
        self.eps_den
    }

    pub fn with_eps_den(mut self, eps_den: f64) -> Self {
        self.eps_den = eps_den;
        self
    }

    pub fn basis(&self) -> &PolyBasis {
        &self.basis
    }

    pub fn uses_pooled_models(&self) -> bool {
        matches!(self.pi_models, LevelModels::Pooled(_))
    }

    /// Refits only the outcome regressions for a new moment function,
    /// keeping the response and instrument models.
    pub fn refit_outcome(&self, train: &ObservationTable, spec: &FunctionalSpec) -> Result<Self> {
        let mut out = self.clone();
        let (mu_models, mu_direct) = fit_outcome_models(
            train,
            spec,
            &self.basis,
            &self.cfg,
            self.mode,
            matches!(self.pi_models, LevelModels::Pooled(_)),
        )?;
        out.mu_models = mu_models;
        out.mu_direct = mu_direct;
        Ok(out)
    }
}

fn fit_outcome_models(
    train: &ObservationTable,
    spec: &FunctionalSpec,
    basis: &PolyBasis,
    cfg: &LearnerConfig,
    mode: MarginalizationMode,
    pooled: bool,
) -> Result<(LevelModels<LinearFit>, Option<LinearFit>)> {
    let n = train.n();
    let target: Vec<f64> = train
        .rows()
        .map(|row| response_moment(spec, &row))
        .collect();
    let mu_models = if pooled {
        let design = matrix_from_rows(
            train
                .rows()
                .map(|row| pooled_features(basis, train.levels, row.x, row.z))
                .collect(),
        );
        LevelModels::Pooled(fit_linear(&design, &target, cfg)?)
    } else {
        let mut fits = Vec::with_capacity(train.levels);
        for level in 0..train.levels {
            let idx: Vec<usize> = (0..n).filter(|&i| train.z[i] == level).collect();
            let design = basis.design(&train.x, train.p, &idx);
            let y: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
            fits.push(fit_linear(&design, &y, cfg)?);
        }
        LevelModels::Stratified(fits)
    };
    let mu_direct = match mode {
        MarginalizationMode::Marginalize => None,
        MarginalizationMode::Direct => {
            let all: Vec<usize> = (0..n).collect();
            Some(fit_linear(
                &basis.design(&train.x, train.p, &all),
                &target,
                cfg,
            )?)
        }
    };
    Ok((mu_models, mu_direct))
}

/// Fits `pi_z`, `rho_z`, `mu_z` and `pi0` on `train`.
///
/// `pi_z` and `mu_z` are fitted separately within each instrument level
/// unless some level has fewer than [`MIN_LEVEL_ROWS`] rows, in which case a
/// single pooled model with level indicators and level-by-covariate terms is
/// used. `mu_z` regresses `R * h(Y; psi)` with zero targets for nonrespondents.
pub fn fit_nuisance_set(
    train: &ObservationTable,
    spec: &FunctionalSpec,
    cfg: &LearnerConfig,
    mode: MarginalizationMode,
) -> Result<FittedNuisance> {
    cfg.validate()?;
    let n = train.n();
    if n == 0 {
        return Err(MivError::Fit("empty training set".into()));
    }
    let levels = train.levels;
    if levels < 2 {
        return Err(MivError::Fit(
            "the instrument needs at least two levels".into(),
        ));
    }
    let counts = train.level_counts();
    if let Some(level) = counts.iter().position(|&c| c == 0) {
        return Err(MivError::Fit(format!(
            "instrument level {level} has no rows in the training set"
        )));
    }
    let mut diagnostics = Diagnostics::default();
    for level in 0..levels {
        let responders = (0..n)
            .filter(|&i| train.z[i] == level && train.r[i])
            .count();
        if responders == 0 || responders == counts[level] {
            diagnostics.warnings.push(format!(
                "instrument level {level} has only {} rows in training",
                if responders == 0 { "R=0" } else { "R=1" }
            ));
        }
    }

    let basis = PolyBasis::fit(&train.x, train.p, cfg.basis_df)?;
    let pooled = counts.iter().any(|&c| c < MIN_LEVEL_ROWS);
    if pooled {
        diagnostics.warnings.push(format!(
            "a level has fewer than {MIN_LEVEL_ROWS} rows; using pooled response and outcome models"
        ));
    }

    let mut track = |fit: &LogisticFit| {
        if !fit.converged {
            diagnostics.nonconverged_fits += 1;
        }
    };

    let pi_models = if pooled {
        let design = matrix_from_rows(
            train
                .rows()
                .map(|row| pooled_features(&basis, levels, row.x, row.z))
                .collect(),
        );
        let fit = fit_logistic(&design, &train.r, cfg)?;
        track(&fit);
        LevelModels::Pooled(fit)
    } else {
        let mut fits = Vec::with_capacity(levels);
        for level in 0..levels {
            let idx: Vec<usize> = (0..n).filter(|&i| train.z[i] == level).collect();
            let design = basis.design(&train.x, train.p, &idx);
            let labels: Vec<bool> = idx.iter().map(|&i| train.r[i]).collect();
            let fit = fit_logistic(&design, &labels, cfg)?;
            track(&fit);
            fits.push(fit);
        }
        LevelModels::Stratified(fits)
    };

    let all: Vec<usize> = (0..n).collect();
    let full_design = basis.design(&train.x, train.p, &all);
    let pi_direct = match mode {
        MarginalizationMode::Marginalize => None,
        MarginalizationMode::Direct => {
            let fit = fit_logistic(&full_design, &train.r, cfg)?;
            track(&fit);
            Some(fit)
        }
    };

    let rho_model = fit_multinomial(&full_design, &train.z, levels, cfg)?;
    if !rho_model.converged {
        diagnostics.nonconverged_fits += 1;
    }

    let (mu_models, mu_direct) = fit_outcome_models(train, spec, &basis, cfg, mode, pooled)?;

    let pi0 = train.n0() as f64 / n as f64;
    Ok(FittedNuisance {
        levels,
        p: train.p,
        mode,
        eps_den: DEFAULT_EPS_DEN,
        pi0,
        basis,
        pi_models,
        rho_model,
        mu_models,
        pi_direct,
        mu_direct,
        cfg: *cfg,
        diagnostics,
    })
}

impl Nuisance for FittedNuisance {
    fn levels(&self) -> usize {
        self.levels
    }

    fn mode(&self) -> MarginalizationMode {
        self.mode
    }

    fn evaluate(&self, x: &[f64]) -> NuisanceEval {
        debug_assert_eq!(x.len(), self.p);
        let features = self.basis.features(x);
        let mut clips = 0;
        let pi_z = (0..self.levels)
            .map(|z| {
                let raw = match &self.pi_models {
                    LevelModels::Stratified(fits) => fits[z].predict(&features),
                    LevelModels::Pooled(fit) => {
                        fit.predict(&pooled_features(&self.basis, self.levels, x, z))
                    }
                };
                clip_probability(raw, &mut clips)
            })
            .collect();
        let mut rho: Vec<f64> = self
            .rho_model
            .predict(&features)
            .into_iter()
            .map(|p| clip_probability(p, &mut clips))
            .collect();
        let total: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|r| *r /= total);
        let mu_z = (0..self.levels)
            .map(|z| match &self.mu_models {
                LevelModels::Stratified(fits) => fits[z].predict(&features),
                LevelModels::Pooled(fit) => {
                    fit.predict(&pooled_features(&self.basis, self.levels, x, z))
                }
            })
            .collect();
        let pi_direct = self
            .pi_direct
            .as_ref()
            .map(|fit| clip_probability(fit.predict(&features), &mut clips));
        let mu_direct = self.mu_direct.as_ref().map(|fit| fit.predict(&features));
        NuisanceEval {
            pi_z,
            rho,
            mu_z,
            pi_direct,
            mu_direct,
            pi0: self.pi0,
            eps_den: self.eps_den,
            clips,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn fixed_eval(
        pi_z: Vec<f64>,
        rho: Vec<f64>,
        mu_z: Vec<f64>,
        pi0: f64,
    ) -> NuisanceEval {
        NuisanceEval {
            pi_z,
            rho,
            mu_z,
            pi_direct: None,
            mu_direct: None,
            pi0,
            eps_den: DEFAULT_EPS_DEN,
            clips: 0,
        }
    }

    #[test]
    fn derived_contrasts_binary_example() {
        let e = fixed_eval(vec![0.4, 0.8], vec![0.5, 0.5], vec![0.1, 0.3], 0.3);
        assert!((e.pi_marg() - 0.6).abs() < 1e-15);
        assert!((e.delta_r(1) - 0.2).abs() < 1e-15);
        assert!((e.delta_r(0) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_outcome_contrast_gives_zero_ratio() {
        let e = fixed_eval(vec![0.4, 0.8], vec![0.3, 0.7], vec![0.2, 0.2], 0.3);
        assert!(e.delta(0).unwrap().abs() < 1e-15);
        assert!(e.delta(1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn constant_response_hits_the_floor() {
        let e = fixed_eval(vec![0.5, 0.5], vec![0.3, 0.7], vec![0.2, 0.4], 0.3);
        assert!(matches!(e.delta(0), Err(MivError::DenominatorFloor { .. })));
        assert!(matches!(e.delta(1), Err(MivError::DenominatorFloor { .. })));
    }

    #[test]
    fn guard_policies() {
        let mut d = Diagnostics::default();
        assert_eq!(
            guard_denominator(0.5, 1e-6, TrimPolicy::Strict, "x", &mut d).unwrap(),
            Some(0.5)
        );
        assert_eq!(
            guard_denominator(-1e-9, 1e-6, TrimPolicy::Floor, "x", &mut d).unwrap(),
            Some(-1e-6)
        );
        assert_eq!(
            guard_denominator(1e-9, 1e-6, TrimPolicy::Drop, "x", &mut d).unwrap(),
            None
        );
        assert!(guard_denominator(0.0, 1e-6, TrimPolicy::Strict, "x", &mut d).is_err());
        assert_eq!(d.floor_hits, 2);
    }

    fn probs(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn marginal_contrasts_average_to_zero(
            raw_rho in proptest::collection::vec(0.01..1.0f64, 2..6),
            seed in 0u64..1000,
        ) {
            let l = raw_rho.len();
            let rho = probs(&raw_rho);
            let pi: Vec<f64> = (0..l).map(|z| 0.05 + 0.9 * (((seed + 7 * z as u64) % 97) as f64 / 97.0)).collect();
            let mu: Vec<f64> = (0..l).map(|z| ((seed * 3 + z as u64) % 13) as f64 - 6.0).collect();
            let e = fixed_eval(pi, rho.clone(), mu, 0.2);
            let sr: f64 = (0..l).map(|z| rho[z] * e.delta_r(z)).sum();
            let sy: f64 = (0..l).map(|z| rho[z] * e.delta_y(z)).sum();
            prop_assert!(sr.abs() < 1e-10);
            prop_assert!(sy.abs() < 1e-10);
        }

        #[test]
        fn binary_contrast_identity(r1 in 0.01..0.99f64, p0 in 0.01..0.99f64, p1 in 0.01..0.99f64) {
            // delta^R(Z=1, x) = (pi_1 - pi_0) * P(Z = 0 | x)
            let e = fixed_eval(vec![p0, p1], vec![1.0 - r1, r1], vec![0.0, 0.0], 0.3);
            prop_assert!((e.delta_r(1) - (p1 - p0) * (1.0 - r1)).abs() < 1e-12);
        }
    }
}
