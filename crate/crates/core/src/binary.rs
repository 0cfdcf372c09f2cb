//! Estimators for a two-level instrument: the plug-in identification
//! estimator and the influence-function estimator, with contrasts taken
//! between the two arms.

use crate::error::{MivError, Result};
use crate::influence::{aggregate, RowTerms};
use crate::model::{response_moment, FunctionalSpec, ObservationTable, Row};
use crate::nuisance::{guard_denominator, Diagnostics, Nuisance, NuisanceEval, TrimPolicy};

/// Point estimate with the counters collected while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Rows that entered the average.
    pub used: usize,
    pub diagnostics: Diagnostics,
}

fn require_binary(levels: usize) -> Result<()> {
    if levels != 2 {
        return Err(MivError::Config(format!(
            "binary-instrument estimator called with {levels} levels"
        )));
    }
    Ok(())
}

/// Single-arm Wald ratio `(mu_1 - mu_0) / (pi_1 - pi_0)` at one covariate vector.
pub fn wald_ratio_binary(eval: &NuisanceEval) -> Result<f64> {
    let mut scratch = Diagnostics::default();
    wald_ratio_guarded(eval, TrimPolicy::Strict, &mut scratch)
        .map(|v| v.expect("strict never drops"))
}

fn wald_ratio_guarded(
    eval: &NuisanceEval,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<f64>> {
    let den = eval.pi_z[1] - eval.pi_z[0];
    Ok(
        guard_denominator(den, eval.eps_den, policy, "pi_1 - pi_0", diag)?
            .map(|den| (eval.mu_z[1] - eval.mu_z[0]) / den),
    )
}

/// Mean of the Wald ratio over the incomplete cases.
pub fn beta_id_binary<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    policy: TrimPolicy,
) -> Result<Estimate> {
    require_binary(ns.levels())?;
    let mut diag = Diagnostics::default();
    let mut sum = 0.0;
    let mut used = 0;
    for row in table.rows().filter(|r| !r.r) {
        let eval = ns.evaluate(row.x);
        diag.probability_clips += eval.clips;
        match wald_ratio_guarded(&eval, policy, &mut diag)? {
            Some(d) => {
                sum += d;
                used += 1;
            }
            None => diag.dropped_rows += 1,
        }
    }
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
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

/// Influence-function pieces for a binary instrument.
pub(crate) fn if_terms_binary(
    row: &Row<'_>,
    eval: &NuisanceEval,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<RowTerms>> {
    require_binary(eval.levels())?;
    let eps = eval.eps_den;
    let Some(delta_r) = guard_denominator(
        eval.pi_z[1] - eval.pi_z[0],
        eps,
        policy,
        "pi_1 - pi_0",
        diag,
    )?
    else {
        diag.dropped_rows += 1;
        return Ok(None);
    };
    let Some(rho) = guard_denominator(eval.rho[row.z], eps, policy, "rho_Z", diag)? else {
        diag.dropped_rows += 1;
        return Ok(None);
    };
    let Some(pi0) = guard_denominator(eval.pi0, eps, policy, "pi0", diag)? else {
        diag.dropped_rows += 1;
        return Ok(None);
    };
    let delta = (eval.mu_z[1] - eval.mu_z[0]) / delta_r;
    let rh = response_moment(spec, row);
    let r = f64::from(u8::from(row.r));
    let sign = if row.z == 1 { 1.0 } else { -1.0 };
    let weight = sign / rho * (1.0 - eval.pi_marg()) / (pi0 * delta_r);
    let residual = rh - r * delta - eval.mu_z[0] + eval.pi_z[0] * delta;
    Ok(Some(RowTerms {
        aug: weight * residual,
        delta,
        r: row.r,
        rh,
        pi0,
    }))
}

/// Centered influence function at one row, evaluated at `beta`.
pub fn if_value_binary(
    row: &Row<'_>,
    eval: &NuisanceEval,
    beta: f64,
    spec: &FunctionalSpec,
) -> Result<f64> {
    let mut scratch = Diagnostics::default();
    let terms = if_terms_binary(row, eval, spec, TrimPolicy::Strict, &mut scratch)?
        .expect("strict never drops");
    Ok(terms.centered(beta))
}

/// Sample mean of the uncentered influence function over all rows.
pub fn beta_if_binary<N: Nuisance + ?Sized>(
    table: &ObservationTable,
    ns: &N,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
) -> Result<Estimate> {
    require_binary(ns.levels())?;
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let mut diag = Diagnostics::default();
    let mut terms = Vec::with_capacity(table.n());
    for row in table.rows() {
        let eval = ns.evaluate(row.x);
        diag.probability_clips += eval.clips;
        if let Some(t) = if_terms_binary(&row, &eval, spec, policy, &mut diag)? {
            terms.push(t);
        }
    }
    let (value, _) = aggregate(&terms, None, &mut diag)?;
    Ok(Estimate {
        value,
        used: terms.len(),
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::tests::fixed_eval;
    use crate::nuisance::{FnNuisance, MarginalizationMode};

    fn row(x: &[f64], z: usize, y: Option<f64>) -> Row<'_> {
        Row {
            x,
            z,
            r: y.is_some(),
            y,
        }
    }

    /// pi(x) = 0.5, pi0 = 0.25, pi_1 - pi_0 = 0.4, delta = 1.5.
    fn example_eval() -> NuisanceEval {
        fixed_eval(vec![0.3, 0.7], vec![0.5, 0.5], vec![0.3, 0.9], 0.25)
    }

    #[test]
    fn wald_ratio_examples() {
        let e = fixed_eval(vec![0.4, 0.7], vec![0.5, 0.5], vec![0.3, 0.6], 0.2);
        assert!((wald_ratio_binary(&e).unwrap() - 1.0).abs() < 1e-12);
        let e = fixed_eval(vec![0.4, 0.7], vec![0.5, 0.5], vec![0.3, 0.3], 0.2);
        assert_eq!(wald_ratio_binary(&e).unwrap(), 0.0);
        let e = fixed_eval(vec![0.4, 0.4], vec![0.5, 0.5], vec![0.3, 0.6], 0.2);
        assert!(matches!(
            wald_ratio_binary(&e),
            Err(MivError::DenominatorFloor { .. })
        ));
    }

    #[test]
    fn influence_value_worked_examples() {
        // The worked example fixes pi_{z=0}(x) = 0.4 inside the bracket while
        // pi(x) = 0.5 and pi_1 - pi_0 = 0.4; evaluate the closed form directly.
        let rho1: f64 = 0.5;
        let pi_x = 0.5;
        let pi0 = 0.25;
        let dr = 0.4;
        let delta = 1.5;
        let mu0 = 0.3;
        let pi_arm0 = 0.4;
        let beta = 1.0;
        let bracket = 2.0 - delta - mu0 + pi_arm0 * delta;
        let first = (1.0 / rho1) * (1.0 - pi_x) / (pi0 * dr) * bracket;
        assert!((first - 8.0).abs() < 1e-12);
        let bracket0 = -mu0 + pi_arm0 * delta;
        let v0 = (-1.0 / rho1) * (1.0 - pi_x) / (pi0 * dr) * bracket0 + (delta - beta) / pi0;
        assert!((v0 + 1.0).abs() < 1e-12);

        // Same pieces through the implementation. pi_{z=0} = 0.4 with contrast
        // 0.4 forces pi_1 = 0.8; rho = 0.5 then gives pi(x) = 0.6, so pin
        // pi(x) = 0.5 through the direct marginal.
        let mut e = fixed_eval(vec![0.4, 0.8], vec![0.5, 0.5], vec![0.3, 0.9], 0.25);
        e.pi_direct = Some(0.5);
        let x = [0.0];
        let v1 = if_value_binary(&row(&x, 1, Some(2.0)), &e, 1.0, &FunctionalSpec::mean()).unwrap();
        assert!((v1 - 8.0).abs() < 1e-12, "{v1}");
        let v0 = if_value_binary(&row(&x, 0, None), &e, 1.0, &FunctionalSpec::mean()).unwrap();
        assert!((v0 + 1.0).abs() < 1e-12, "{v0}");
    }

    #[test]
    fn influence_value_vanishes_when_both_terms_do() {
        // bracket for a nonrespondent in arm 0: -mu_0 + pi_0 * delta = 0
        let e = example_eval();
        let delta = wald_ratio_binary(&e).unwrap();
        let mut e2 = e.clone();
        e2.mu_z = vec![e.pi_z[0] * delta, e.pi_z[0] * delta + 0.6];
        let d2 = wald_ratio_binary(&e2).unwrap();
        let v = if_value_binary(&row(&[0.0], 0, None), &e2, d2, &FunctionalSpec::mean()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    fn table_with(z: Vec<usize>, y: Vec<Option<f64>>) -> ObservationTable {
        let n = z.len();
        ObservationTable::new(
            (0..n).map(|i| i as f64).collect(),
            1,
            z,
            2,
            y.iter().map(Option::is_some).collect(),
            y,
        )
        .unwrap()
    }

    #[test]
    fn plug_in_is_mean_over_incomplete_cases() {
        let t = table_with(
            vec![0, 1, 0, 1, 0],
            vec![Some(1.0), Some(2.0), None, None, None],
        );
        // delta(x) = 1 + (x - 2) on rows 2, 3, 4
        let ns = FnNuisance::new(2, MarginalizationMode::Marginalize, |x: &[f64]| {
            fixed_eval(
                vec![0.2, 0.7],
                vec![0.5, 0.5],
                vec![0.0, 0.5 * (x[0] - 1.0)],
                0.6,
            )
        });
        let est = beta_id_binary(&t, &ns, TrimPolicy::Floor).unwrap();
        assert!((est.value - 2.0).abs() < 1e-12);
        assert_eq!(est.used, 3);
    }

    #[test]
    fn no_incomplete_cases_is_an_error() {
        let t = table_with(vec![0, 1], vec![Some(1.0), Some(2.0)]);
        let ns = FnNuisance::new(2, MarginalizationMode::Marginalize, |_: &[f64]| {
            fixed_eval(vec![0.2, 0.7], vec![0.5, 0.5], vec![0.0, 0.5], 0.6)
        });
        assert_eq!(
            beta_id_binary(&t, &ns, TrimPolicy::Floor).unwrap_err(),
            MivError::NoIncompleteCases
        );
        assert_eq!(
            beta_if_binary(&t, &ns, &FunctionalSpec::mean(), TrimPolicy::Floor).unwrap_err(),
            MivError::NoIncompleteCases
        );
    }

    #[test]
    fn single_nonrespondent_row() {
        let t = table_with(vec![0, 1], vec![None, Some(1.0)]);
        let mut t1 = t.subset(&[0]);
        t1.z = vec![0];
        // pi0 = n0 / n = 1 on the one-row table; zero augmentation via rho weights
        let ns = FnNuisance::new(2, MarginalizationMode::Marginalize, |_: &[f64]| {
            // pi(x) = 1 - 1e-12 makes the weight (1 - pi) vanish.
            let mut e = fixed_eval(vec![0.1, 0.55], vec![0.5, 0.5], vec![0.0, 0.81], 1.0);
            e.pi_direct = Some(1.0);
            e
        });
        let est = beta_if_binary(&t1, &ns, &FunctionalSpec::mean(), TrimPolicy::Floor).unwrap();
        assert!((est.value - 1.8).abs() < 1e-12, "{}", est.value);
    }

    #[test]
    fn equals_plug_in_when_augmentation_vanishes() {
        let t = table_with(
            vec![0, 1, 0, 1, 0, 1],
            vec![Some(1.0), Some(2.0), None, None, Some(0.5), None],
        );
        let ns = FnNuisance::new(2, MarginalizationMode::Direct, |x: &[f64]| {
            let mut e = fixed_eval(vec![0.2, 0.7], vec![0.5, 0.5], vec![0.0, 0.1 * x[0]], 0.5);
            e.pi_direct = Some(1.0);
            e
        });
        let id = beta_id_binary(&t, &ns, TrimPolicy::Floor).unwrap();
        let ifb = beta_if_binary(&t, &ns, &FunctionalSpec::mean(), TrimPolicy::Floor).unwrap();
        assert!((id.value - ifb.value).abs() < 1e-12);
    }

    #[test]
    fn drop_policy_excludes_weak_rows() {
        let t = table_with(vec![0, 1, 0, 1], vec![None, None, Some(1.0), None]);
        let ns = FnNuisance::new(2, MarginalizationMode::Marginalize, |x: &[f64]| {
            let gap = if x[0] < 0.5 { 0.0 } else { 0.5 };
            fixed_eval(vec![0.2, 0.2 + gap], vec![0.5, 0.5], vec![0.0, gap], 0.75)
        });
        let dropped = beta_id_binary(&t, &ns, TrimPolicy::Drop).unwrap();
        assert_eq!(dropped.used, 2);
        assert_eq!(dropped.diagnostics.floor_hits, 1);
        assert!((dropped.value - 1.0).abs() < 1e-12);
        let floored = beta_id_binary(&t, &ns, TrimPolicy::Floor).unwrap();
        assert_eq!(floored.used, 3);
        assert!(beta_id_binary(&t, &ns, TrimPolicy::Strict).is_err());
    }
}
