//! Per-row influence-function terms shared by the binary and general
//! estimators and by cross-fitting.

use serde::{Deserialize, Serialize};

use crate::binary::if_terms_binary;
use crate::error::{MivError, Result};
use crate::general::if_terms_general;
use crate::model::{FunctionalSpec, Row};
use crate::nuisance::{Diagnostics, NuisanceEval, TrimPolicy};
use crate::stats::quantile_sorted;

/// Which closed form of the influence function to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfForm {
    /// Two-level instrument, contrasts taken between the two arms.
    Binary,
    /// Any discrete instrument, contrasts taken against the marginal.
    General,
}

impl IfForm {
    pub fn for_levels(levels: usize) -> Self {
        if levels == 2 {
            IfForm::Binary
        } else {
            IfForm::General
        }
    }
}

/// Pieces of the influence function at one row.
///
/// The uncentered summand is `aug + (1 - R) / pi0 * delta`; the centered
/// influence function subtracts `(1 - R) / pi0 * beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerms {
    /// Augmentation (weighted residual) term.
    pub aug: f64,
    /// Wald-type ratio at this row.
    pub delta: f64,
    pub r: bool,
    /// `R * h(Y; psi)`.
    pub rh: f64,
    /// `P(R = 0)` used for this row (fold-specific under cross-fitting).
    pub pi0: f64,
}

impl RowTerms {
    fn nonresponse_weight(&self) -> f64 {
        if self.r {
            0.0
        } else {
            1.0 / self.pi0
        }
    }

    pub fn uncentered(&self) -> f64 {
        self.aug + self.nonresponse_weight() * self.delta
    }

    pub fn centered(&self, beta: f64) -> f64 {
        self.aug + self.nonresponse_weight() * (self.delta - beta)
    }
}

/// `Ok(None)` when the trim policy drops the row.
pub fn row_terms(
    form: IfForm,
    row: &Row<'_>,
    eval: &NuisanceEval,
    spec: &FunctionalSpec,
    policy: TrimPolicy,
    diag: &mut Diagnostics,
) -> Result<Option<RowTerms>> {
    diag.probability_clips += eval.clips;
    match form {
        IfForm::Binary => if_terms_binary(row, eval, spec, policy, diag),
        IfForm::General => if_terms_general(row, eval, spec, policy, diag),
    }
}

/// Clamps values outside `[Q1 - k IQR, Q3 + k IQR]`; returns how many moved.
pub fn winsorize(values: &mut [f64], k: f64) -> usize {
    if values.len() < 4 {
        return 0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    let mut moved = 0;
    for v in values.iter_mut() {
        if *v < lo {
            *v = lo;
            moved += 1;
        } else if *v > hi {
            *v = hi;
            moved += 1;
        }
    }
    moved
}

/// Averages the uncentered summands, optionally winsorizing them first.
/// Returns the estimate together with the centered values at that estimate.
pub fn aggregate(
    terms: &[RowTerms],
    winsorize_k: Option<f64>,
    diag: &mut Diagnostics,
) -> Result<(f64, Vec<f64>)> {
    if terms.is_empty() {
        return Err(MivError::WeakIdentification(
            "every row was dropped by the denominator floor".into(),
        ));
    }
    let mut summands: Vec<f64> = terms.iter().map(RowTerms::uncentered).collect();
    if let Some(k) = winsorize_k {
        diag.winsorized += winsorize(&mut summands, k);
    }
    let estimate = summands.iter().sum::<f64>() / summands.len() as f64;
    let centered = terms
        .iter()
        .zip(&summands)
        .map(|(t, s)| s - t.uncentered() + t.centered(estimate))
        .collect();
    Ok((estimate, centered))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winsorize_clamps_outliers_only() {
        let mut v: Vec<f64> = (0..20).map(f64::from).collect();
        v.push(1e6);
        let moved = winsorize(&mut v, 1.5);
        assert_eq!(moved, 1);
        assert!(v[20] < 1e6);
        assert_eq!(v[3], 3.0);
    }

    #[test]
    fn centered_and_uncentered_differ_by_weighted_beta() {
        let t = RowTerms {
            aug: 0.5,
            delta: 2.0,
            r: false,
            rh: 0.0,
            pi0: 0.25,
        };
        assert_eq!(t.uncentered(), 0.5 + 8.0);
        assert_eq!(t.centered(1.0), 0.5 + 4.0);
        let responder = RowTerms { r: true, ..t };
        assert_eq!(responder.uncentered(), responder.centered(123.0));
    }
}
