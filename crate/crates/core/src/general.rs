//! Estimators for a general discrete instrument. Contrasts are taken between
//! each level and the marginal over levels, so every quantity depends on
//! `(z, x)`.

use serde::{Deserialize, Serialize};

use crate::binary::Estimate;
use crate::error::{MivError, Result};
use crate::influence::{aggregate, row_terms, IfForm, RowTerms};
use crate::learners::LearnerConfig;
use crate::model::{evaluate_h, response_moment, FunctionalSpec, ObservationTable, Row};
use crate::nuisance::{
    fit_nuisance_set, guard_denominator, Diagnostics, MarginalizationMode, Nuisance, NuisanceEval,
    TrimPolicy,
};

/// `g(z, x) = (1 - pi_z(x)) / (pi0 * delta^R(z, x))`, strict about the floor.
pub fn g_value(eval: &NuisanceEval, z: usize) -> Result<f64> {
    let mut scratch = Diagnostics::default();
    Ok(g_guarded(eval, z, TrimPolicy::Strict, &mut scratch)?.expect("strict never drops"))
}

fn g_guarded(
    eval: &NuisanceEval,
    z: usize,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<f64>> {
    let Some(dr) = guard_denominator(eval.delta_r(z), eval.eps_den, policy, "delta_r(z, x)", diag)?
    else {
        return Ok(None);
    };
    let Some(pi0) = guard_denominator(eval.pi0, eval.eps_den, policy, "pi0", diag)? else {
        return Ok(None);
    };
    Ok(Some((1.0 - eval.pi_z[z]) / (pi0 * dr)))
}

/// Per-level weights `g(z, x)` and their `rho`-weighted average `g(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralIfWeights {
    pub g_zx: Vec<f64>,
    pub g_x: f64,
}

pub fn if_weights(
    eval: &NuisanceEval,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<GeneralIfWeights>> {
    let mut g_zx = Vec::with_capacity(eval.levels());
    for z in 0..eval.levels() {
        match g_guarded(eval, z, policy, diag)? {
            Some(g) => g_zx.push(g),
            None => return Ok(None),
        }
    }
    let g_x = eval.rho.iter().zip(&g_zx).map(|(r, g)| r * g).sum();
    Ok(Some(GeneralIfWeights { g_zx, g_x }))
}

fn delta_guarded(
    eval: &NuisanceEval,
    z: usize,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<f64>> {
    Ok(
        guard_denominator(eval.delta_r(z), eval.eps_den, policy, "delta_r(z, x)", diag)?
            .map(|den| eval.delta_y(z) / den),
    )
}

/// Mean of `delta(Z, X)` over the incomplete cases.
pub fn beta_id_general<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    policy: TrimPolicy,
) -> Result<Estimate> {
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let mut diag = Diagnostics::default();
    let mut sum = 0.0;
    let mut used = 0;
    for row in table.rows().filter(|r| !r.r) {
        let eval = ns.evaluate(row.x);
        diag.probability_clips += eval.clips;
        match delta_guarded(&eval, row.z, policy, &mut diag)? {
            Some(d) => {
                sum += d;
                used += 1;
            }
            None => diag.dropped_rows += 1,
        }
    }
    if used == 0 {
        return Err(MivError::WeakIdentification(
            "every incomplete case was dropped by the denominator floor".into(),
        ));
    }
    Ok(Estimate {
        value: sum / used as f64,
        used,
        diagnostics: diag,
    })
}

pub(crate) fn if_terms_general(
    row: &Row<'_>,
    eval: &NuisanceEval,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<RowTerms>> {
    let Some(w) = if_weights(eval, policy, diag)? else {
        diag.dropped_rows += 1;
        return Ok(None);
    };
    let Some(delta) = delta_guarded(eval, row.z, policy, diag)? else {
        diag.dropped_rows += 1;
        return Ok(None);
    };
    let pi0 =
        guard_denominator(eval.pi0, eval.eps_den, policy, "pi0", diag)?.unwrap_or(eval.eps_den);
    let rh = response_moment(spec, row);
    let r = f64::from(u8::from(row.r));
    let z = row.z;
    let residual = rh - eval.mu_z[z] - delta * (r - eval.pi_z[z]);
    Ok(Some(RowTerms {
        aug: (w.g_zx[z] - w.g_x) * residual,
        delta,
        r: row.r,
        rh,
        pi0,
    }))
}

/// Centered influence function at one row, evaluated at `beta`.
pub fn if_value_general(
    row: &Row<'_>,
    eval: &NuisanceEval,
    beta: f64,
    spec: &FunctionalSpec,
) -> Result<f64> {
    let mut scratch = Diagnostics::default();
    let terms = if_terms_general(row, eval, spec, TrimPolicy::Strict, &mut scratch)?
        .expect("strict never drops");
    Ok(terms.centered(beta))
}

/// Evaluates the per-row terms of either closed form over a whole table.
pub fn collect_terms<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    spec: &FunctionalSpec,
    form: IfForm,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Vec<RowTerms>> {
    let mut terms = Vec::with_capacity(table.n());
    for row in table.rows() {
        let eval = ns.evaluate(row.x);
        if let Some(t) = row_terms(form, &row, &eval, spec, policy, diag)? {
            terms.push(t);
        }
    }
    Ok(terms)
}

/// Sample mean of the uncentered influence function over all rows.
pub fn beta_if_general<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
) -> Result<Estimate> {
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let mut diag = Diagnostics::default();
    let terms = collect_terms(table, ns, spec, IfForm::General, policy, &mut diag)?;
    let (value, _) = aggregate(&terms, None, &mut diag)?;
    Ok(Estimate {
        value,
        used: terms.len(),
        diagnostics: diag,
    })
}

/// `n^-2 * sum phi_i^2` for centered influence-function values.
pub fn variance_if(phi: &[f64]) -> Result<f64> {
    if phi.is_empty() {
        return Err(MivError::Config(
            "variance of an empty influence vector".into(),
        ));
    }
    let n = phi.len() as f64;
    Ok(phi.iter().map(|v| v * v).sum::<f64>() / (n * n))
}

/// Estimate of the whole-population moment `E[h(Y; psi)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub estimate: f64,
    pub variance: f64,
    /// Complete-case mean of `h`.
    pub alpha: f64,
    /// Nonrespondent functional.
    pub beta: f64,
    /// `P(R = 1)` in the sample.
    pub p_respond: f64,
}

/// Centered influence function of `P(R=1) alpha + pi0 beta` for one row.
pub fn population_if_value(
    terms: &RowTerms,
    alpha: f64,
    beta: f64,
    p_respond: f64,
    pi0: f64,
) -> f64 {
    let r = f64::from(u8::from(terms.r));
    let h_minus_alpha = if terms.r { terms.rh - alpha } else { 0.0 };
    pi0 * terms.aug
        + alpha * (r - p_respond)
        + beta * (1.0 - r - pi0)
        + r * h_minus_alpha
        + (1.0 - r) * (terms.delta - beta)
}

/// Combines complete-case mean and nonrespondent functional from row terms.
pub fn population_from_terms(terms: &[RowTerms], beta: f64) -> Result<PopulationEstimate> {
    let n = terms.len() as f64;
    let responders: Vec<&RowTerms> = terms.iter().filter(|t| t.r).collect();
    if responders.is_empty() {
        return Err(MivError::DataContract("no complete cases".into()));
    }
    if responders.len() == terms.len() {
        return Err(MivError::NoIncompleteCases);
    }
    let alpha = responders.iter().map(|t| t.rh).sum::<f64>() / responders.len() as f64;
    let p_respond = responders.len() as f64 / n;
    let pi0 = 1.0 - p_respond;
    let phi: Vec<f64> = terms
        .iter()
        .map(|t| population_if_value(t, alpha, beta, p_respond, pi0))
        .collect();
    Ok(PopulationEstimate {
        estimate: p_respond * alpha + pi0 * beta,
        variance: variance_if(&phi)?,
        alpha,
        beta,
        p_respond,
    })
}

pub fn population_mean_if<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
) -> Result<PopulationEstimate> {
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let mut diag = Diagnostics::default();
    let terms = collect_terms(table, ns, spec, IfForm::General, policy, &mut diag)?;
    let (beta, _) = aggregate(&terms, None, &mut diag)?;
    population_from_terms(&terms, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub grid_points: usize,
    pub tol: f64,
    pub mode: MarginalizationMode,
    pub policy: TrimPolicy,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            grid_points: 64,
            tol: 1e-6,
            mode: MarginalizationMode::Marginalize,
            policy: TrimPolicy::Floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSolution {
    pub psi: f64,
    /// `(psi, estimated population moment)` at every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Solves `P(R=1) alpha(psi) + pi0 beta(psi) = 0` for `h = 1{y >= psi} - q`.
///
/// The moment is evaluated on a grid over the observed outcome range, with
/// the outcome regressions refitted at every grid point, and the root of the
/// piecewise-linear interpolant is located by bisection.
pub fn solve_functional(
    table: &ObservationTable,
    cfg: &LearnerConfig,
    q: f64,
    opts: &SolveOptions,
) -> Result<QuantileSolution> {
    let base = FunctionalSpec::quantile(q, 0.0)?;
    let mut observed: Vec<f64> = table.y.iter().flatten().copied().collect();
    observed.sort_by(f64::total_cmp);
    observed.dedup();
    if observed.len() < 2 {
        return Err(MivError::WeakIdentification(
            "need at least two distinct observed outcomes".into(),
        ));
    }
    if opts.grid_points < 2 {
        return Err(MivError::Config("grid_points must be at least 2".into()));
    }
    let lo = observed[0];
    let hi = observed[observed.len() - 1];
    let step = (hi - lo) / (opts.grid_points - 1) as f64;
    let mut psis: Vec<f64> = (0..opts.grid_points)
        .map(|i| lo + step * i as f64)
        .collect();
    // just above the largest outcome every h equals -q
    psis.push(hi + step.max(f64::EPSILON * hi.abs().max(1.0)) * 1e-6);

    let n = table.n() as f64;
    let n0 = table.n0();
    let p_respond = (table.n() - n0) as f64 / n;
    let responders: Vec<f64> = table.y.iter().flatten().copied().collect();
    let alpha = |spec: &FunctionalSpec| {
        responders.iter().map(|&y| evaluate_h(spec, y)).sum::<f64>() / responders.len() as f64
    };

    let form = IfForm::for_levels(table.levels);
    let mut fitted = None;
    let mut grid = Vec::with_capacity(psis.len());
    for &psi in &psis {
        let spec = base.with_psi(psi);
        let moment = if n0 == 0 {
            alpha(&spec)
        } else {
            let ns = match &fitted {
                None => fit_nuisance_set(table, &spec, cfg, opts.mode)?,
                Some(prev) => crate::nuisance::FittedNuisance::refit_outcome(prev, table, &spec)?,
            };
            let mut diag = Diagnostics::default();
            let terms = collect_terms(table, &ns, &spec, form, opts.policy, &mut diag)?;
            let (beta, _) = aggregate(&terms, None, &mut diag)?;
            fitted = Some(ns);
            p_respond * alpha(&spec) + (1.0 - p_respond) * beta
        };
        grid.push((psi, moment));
    }

    let Some(k) = grid.windows(2).position(|w| w[0].1 > 0.0 && w[1].1 <= 0.0) else {
        return Err(MivError::WeakIdentification(
            "estimated moment does not change sign over the observed outcome range".into(),
        ));
    };
    let (a, fa) = grid[k];
    let (b, fb) = grid[k + 1];
    let interp = |psi: f64| fa + (fb - fa) * (psi - a) / (b - a);
    let (mut left, mut right) = (a, b);
    while right - left > opts.tol {
        let mid = 0.5 * (left + right);
        if interp(mid) > 0.0 {
            left = mid;
        } else {
            right = mid;
        }
    }
    Ok(QuantileSolution {
        psi: 0.5 * (left + right),
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binary::if_value_binary;
    use crate::nuisance::tests::fixed_eval;
    use proptest::prelude::*;

    #[test]
    fn g_examples() {
        // pi_z = 0.8, pi0 = 0.2, delta^R = 0.5  ->  0.2 / 0.1 = 2
        let mut e = fixed_eval(vec![0.8, 0.3], vec![0.5, 0.5], vec![0.0, 0.0], 0.2);
        e.pi_direct = Some(0.3);
        assert!((g_value(&e, 0).unwrap() - 2.0).abs() < 1e-12);
        let mut e = fixed_eval(vec![1.0 - 1e-6, 0.3], vec![0.5, 0.5], vec![0.0, 0.0], 0.2);
        e.pi_direct = Some(0.3);
        assert!(g_value(&e, 0).unwrap().abs() < 1e-4);
        let e = fixed_eval(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.0, 0.0], 0.2);
        assert!(matches!(
            g_value(&e, 0),
            Err(MivError::DenominatorFloor { .. })
        ));
    }

    #[test]
    fn theorem_worked_example() {
        // g(Z,x) - g(x) = 1, R = 1, h = 2, mu(Z,x) = 1, delta = 2, pi(Z,x) = 0.7
        let residual: f64 = 2.0 - 1.0 - 2.0 * (1.0 - 0.7);
        assert!(((1.5 - 0.5) * residual - 0.4).abs() < 1e-12);
    }

    #[test]
    fn variance_examples() {
        assert!((variance_if(&[1.0, -1.0, 0.0, 0.0]).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(variance_if(&[0.0; 5]).unwrap(), 0.0);
        assert!(variance_if(&[]).is_err());
    }

    #[test]
    fn plug_in_general_mean() {
        let t = ObservationTable::new(
            vec![0.0, 1.0, 2.0],
            1,
            vec![0, 1, 0],
            2,
            vec![false, false, true],
            vec![None, None, Some(3.0)],
        )
        .unwrap();
        let ns =
            crate::nuisance::FnNuisance::new(2, MarginalizationMode::Marginalize, |x: &[f64]| {
                // delta(z, x) = 0.5 + x
                let d = 0.5 + x[0];
                fixed_eval(vec![0.2, 0.6], vec![0.5, 0.5], vec![0.0, 0.4 * d], 0.6)
            });
        let est = beta_id_general(&t, &ns, TrimPolicy::Strict).unwrap();
        assert!((est.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_mixture_population_estimate() {
        let terms: Vec<RowTerms> = [true, false, true, false]
            .iter()
            .map(|&r| RowTerms {
                aug: 0.0,
                delta: 2.0,
                r,
                rh: if r { 2.0 } else { 0.0 },
                pi0: 0.5,
            })
            .collect();
        let pop = population_from_terms(&terms, 2.0).unwrap();
        assert!((pop.estimate - 2.0).abs() < 1e-15);
        assert!(pop.variance.abs() < 1e-15);
    }

    fn probs(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn weights_average_out_over_levels(
            raw_rho in proptest::collection::vec(0.05..1.0f64, 2..6),
            raw_pi in proptest::collection::vec(0.05..0.95f64, 6),
        ) {
            let l = raw_rho.len();
            let rho = probs(&raw_rho);
            let pi: Vec<f64> = raw_pi[..l].to_vec();
            let e = fixed_eval(pi, rho.clone(), vec![0.0; l], 0.3);
            let mut d = Diagnostics::default();
            if let Some(w) = if_weights(&e, TrimPolicy::Drop, &mut d).unwrap() {
                let direct: f64 = (0..l).map(|z| rho[z] * w.g_zx[z]).sum();
                prop_assert!((direct - w.g_x).abs() <= 1e-12 * w.g_x.abs().max(1.0));
                let centered: f64 = (0..l).map(|z| rho[z] * (w.g_zx[z] - w.g_x)).sum();
                let scale = w.g_zx.iter().map(|g| g.abs()).fold(1.0, f64::max);
                prop_assert!(centered.abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn general_form_reduces_to_binary(
            rho1 in 0.05..0.95f64,
            p0 in 0.05..0.95f64,
            p1 in 0.05..0.95f64,
            m0 in -2.0..2.0f64,
            m1 in -2.0..2.0f64,
            pi0 in 0.05..0.95f64,
            z in 0usize..2,
            y in proptest::option::of(-3.0..3.0f64),
            beta in -2.0..2.0f64,
        ) {
            prop_assume!((p1 - p0).abs() > 0.02);
            let e = fixed_eval(vec![p0, p1], vec![1.0 - rho1, rho1], vec![m0, m1], pi0);
            let x = [0.0];
            let row = Row { x: &x, z, r: y.is_some(), y };
            let spec = FunctionalSpec::mean();
            let b = if_value_binary(&row, &e, beta, &spec).unwrap();
            let g = if_value_general(&row, &e, beta, &spec).unwrap();
            prop_assert!((b - g).abs() < 1e-10 * b.abs().max(1.0), "{} vs {}", b, g);
        }
    }
}
