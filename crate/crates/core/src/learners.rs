//! Deterministic regression learners on a polynomial basis: ridge logistic,
//! ridge multinomial (softmax) and ridge least squares.
//!
//! All learners treat column 0 of the design as the intercept and leave it
//! unpenalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
use crate::stats::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Highest power of each standardized covariate in the basis.
    pub basis_df: usize,
    pub ridge_lambda: f64,
    pub max_irls_iter: usize,
    pub irls_tol: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            basis_df: 2,
            ridge_lambda: 1e-3,
            max_irls_iter: 100,
            irls_tol: 1e-8,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.basis_df < 1 {
            return Err(MivError::Config("basis_df must be at least 1".into()));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(MivError::Config("ridge_lambda must be non-negative".into()));
        }
        if self.max_irls_iter < 1 {
            return Err(MivError::Config("max_irls_iter must be at least 1".into()));
        }
        if !(self.irls_tol > 0.0) {
            return Err(MivError::Config("irls_tol must be positive".into()));
        }
        Ok(())
    }
}

/// `[1, x_1, x_1^2, .., x_1^df, x_2, .., x_p^df]` for an already standardized `x`.
pub fn expand_basis(x: &[f64], df: usize) -> Result<Vec<f64>> {
    if df < 1 {
        return Err(MivError::Config("basis degree must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(1 + x.len() * df);
    out.push(1.0);
    for &v in x {
        let mut power = 1.0;
        for _ in 0..df {
            power *= v;
            out.push(power);
        }
    }
    Ok(out)
}

/// Polynomial basis with standardization parameters taken from training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub df: usize,
}

impl PolyBasis {
    /// `x` is row-major with `p` columns.
    pub fn fit(x: &[f64], p: usize, df: usize) -> Result<Self> {
        if df < 1 {
            return Err(MivError::Config("basis degree must be at least 1".into()));
        }
        let n = if p == 0 { 0 } else { x.len() / p };
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        if n > 0 {
            for j in 0..p {
                let m = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (x[i * p + j] - m).powi(2)).sum::<f64>() / n as f64;
                center[j] = m;
                if var > 0.0 {
                    scale[j] = var.sqrt();
                }
            }
        }
        Ok(Self { center, scale, df })
    }

    pub fn width(&self) -> usize {
        1 + self.center.len() * self.df
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        expand_basis(&self.standardize(x), self.df).expect("degree checked at fit")
    }

    /// Design matrix for the listed rows of a row-major matrix.
    pub fn design(&self, x: &[f64], p: usize, rows: &[usize]) -> DMatrix<f64> {
        let d = self.width();
        let mut m = DMatrix::zeros(rows.len(), d);
        for (r, &i) in rows.iter().enumerate() {
            let f = self.features(&x[i * p..(i + 1) * p]);
            for (c, v) in f.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn predict(&self, features: &[f64]) -> f64 {
        logistic(dot(&self.coef, features))
    }
}

fn dot(coef: &DVector<f64>, features: &[f64]) -> f64 {
    coef.iter().zip(features).map(|(a, b)| a * b).sum()
}

fn penalty_diag(d: usize, lambda: f64) -> DVector<f64> {
    let mut v = DVector::from_element(d, lambda);
    if d > 0 {
        v[0] = 0.0;
    }
    v
}

fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    if lambda == 0.0 {
        return Err(MivError::Fit(
            "singular normal equations; set ridge_lambda > 0".into(),
        ));
    }
    let scale = a.diagonal().amax().max(1.0);
    for i in 0..a.nrows() {
        a[(i, i)] += 1e-10 * scale;
    }
    a.cholesky()
        .map(|ch| ch.solve(b))
        .ok_or_else(|| MivError::Fit("normal equations are not positive definite".into()))
}

fn logistic_objective(
    x: &DMatrix<f64>,
    y: &[bool],
    beta: &DVector<f64>,
    pen: &DVector<f64>,
) -> f64 {
    let eta = x * beta;
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + exp(e)) computed without overflow
            let softplus = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            if yi {
                e - softplus
            } else {
                -softplus
            }
        })
        .sum();
    ll - beta
        .iter()
        .zip(pen.iter())
        .map(|(b, l)| l * b * b)
        .sum::<f64>()
}

/// Ridge-penalized logistic regression by Newton/IRLS with step halving.
///
/// Maximizes `sum log-lik - lambda * |coef[1..]|^2`.
pub fn fit_logistic(
    features: &DMatrix<f64>,
    labels: &[bool],
    cfg: &LearnerConfig,
) -> Result<LogisticFit> {
    let (n, d) = features.shape();
    if n != labels.len() {
        return Err(MivError::Fit(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    let ones = labels.iter().filter(|&&l| l).count();
    if cfg.ridge_lambda == 0.0 && (ones == 0 || ones == n) {
        return Err(MivError::Fit(
            "only one class present; the unpenalized likelihood has no maximizer (set ridge_lambda > 0)".into(),
        ));
    }
    let pen = penalty_diag(d, cfg.ridge_lambda);
    let mut beta = DVector::zeros(d);
    let mut obj = logistic_objective(features, labels, &beta, &pen);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_irls_iter {
        iterations += 1;
        let eta = features * &beta;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..n {
            let p = logistic(eta[i]);
            let w = (p * (1.0 - p)).max(1e-12);
            let resid = if labels[i] { 1.0 - p } else { -p };
            let row = features.row(i);
            for a in 0..d {
                let xa = row[a];
                grad[a] += xa * resid;
                for b in a..d {
                    hess[(a, b)] += w * xa * row[b];
                }
            }
        }
        for a in 0..d {
            grad[a] -= 2.0 * pen[a] * beta[a];
            hess[(a, a)] += 2.0 * pen[a];
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = solve_spd(hess, &grad, cfg.ridge_lambda)?;
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_obj = logistic_objective(features, labels, &candidate, &pen);
        while cand_obj < obj - 1e-12 * obj.abs().max(1.0) && t > 1e-6 {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_obj = logistic_objective(features, labels, &candidate, &pen);
        }
        let change = (&candidate - &beta).amax();
        beta = candidate;
        obj = cand_obj;
        if change < cfg.irls_tol {
            converged = true;
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(MivError::Fit("logistic coefficients diverged".into()));
    }
    Ok(LogisticFit {
        coef: beta,
        converged,
        iterations,
    })
}

/// Softmax regression with the last class as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// `d x (L - 1)`; column `k` holds the log-odds coefficients of class `k`
    /// against class `L - 1`.
    pub coef: DMatrix<f64>,
    pub classes: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl MultinomialFit {
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let k = self.classes - 1;
        let eta: Vec<f64> = (0..k)
            .map(|c| {
                self.coef
                    .column(c)
                    .iter()
                    .zip(features)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        softmax_with_reference(&eta)
    }
}

fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut out: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
    out.push((-m).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn multinomial_objective(
    x: &DMatrix<f64>,
    classes: &[usize],
    beta: &DMatrix<f64>,
    pen: &DVector<f64>,
) -> f64 {
    let eta = x * beta;
    let k = beta.ncols();
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        let m = (0..k).map(|c| eta[(i, c)]).fold(0.0_f64, f64::max);
        let lse = m + ((-m).exp() + (0..k).map(|c| (eta[(i, c)] - m).exp()).sum::<f64>()).ln();
        let own = if classes[i] < k {
            eta[(i, classes[i])]
        } else {
            0.0
        };
        ll += own - lse;
    }
    let mut p = 0.0;
    for c in 0..k {
        for j in 0..beta.nrows() {
            p += pen[j] * beta[(j, c)].powi(2);
        }
    }
    ll - p
}

/// Ridge-penalized softmax regression fitted by full Newton steps.
pub fn fit_multinomial(
    features: &DMatrix<f64>,
    classes: &[usize],
    levels: usize,
    cfg: &LearnerConfig,
) -> Result<MultinomialFit> {
    let (n, d) = features.shape();
    if levels < 2 {
        return Err(MivError::Fit(
            "multinomial model needs at least 2 classes".into(),
        ));
    }
    if n != classes.len() {
        return Err(MivError::Fit(format!(
            "{n} feature rows but {} class labels",
            classes.len()
        )));
    }
    let mut counts = vec![0usize; levels];
    for &c in classes {
        if c >= levels {
            return Err(MivError::Fit(format!("class {c} outside 0..{levels}")));
        }
        counts[c] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        if cfg.ridge_lambda == 0.0 {
            return Err(MivError::Fit(format!(
                "class {missing} absent; the unpenalized likelihood has no maximizer (set ridge_lambda > 0)"
            )));
        }
    }
    let k = levels - 1;
    let dim = k * d;
    let pen = penalty_diag(d, cfg.ridge_lambda);
    let mut beta = DMatrix::zeros(d, k);
    let mut obj = multinomial_objective(features, classes, &beta, &pen);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_irls_iter {
        iterations += 1;
        let eta = features * &beta;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        let mut eta_row = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                eta_row[c] = eta[(i, c)];
            }
            let prob = softmax_with_reference(&eta_row);
            let row = features.row(i);
            for a in 0..k {
                let resid = f64::from(u8::from(classes[i] == a)) - prob[a];
                for j in 0..d {
                    grad[a * d + j] += row[j] * resid;
                }
                for b in a..k {
                    let w = if a == b {
                        prob[a] * (1.0 - prob[a])
                    } else {
                        -prob[a] * prob[b]
                    };
                    for j in 0..d {
                        let wj = w * row[j];
                        let start = if a == b { j } else { 0 };
                        for l in start..d {
                            hess[(a * d + j, b * d + l)] += wj * row[l];
                        }
                    }
                }
            }
        }
        for a in 0..k {
            for j in 0..d {
                let idx = a * d + j;
                grad[idx] -= 2.0 * pen[j] * beta[(j, a)];
                hess[(idx, idx)] += 2.0 * pen[j];
            }
        }
        for r in 0..dim {
            for c in 0..r {
                hess[(r, c)] = hess[(c, r)];
            }
        }
        let step_vec = solve_spd(hess, &grad, cfg.ridge_lambda)?;
        let step = DMatrix::from_fn(d, k, |j, a| step_vec[a * d + j]);
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_obj = multinomial_objective(features, classes, &candidate, &pen);
        while cand_obj < obj - 1e-12 * obj.abs().max(1.0) && t > 1e-6 {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_obj = multinomial_objective(features, classes, &candidate, &pen);
        }
        let change = (&candidate - &beta).amax();
        beta = candidate;
        obj = cand_obj;
        if change < cfg.irls_tol {
            converged = true;
            break;
        }
    }
    Ok(MultinomialFit {
        coef: beta,
        classes: levels,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coef: DVector<f64>,
}

impl LinearFit {
    pub fn predict(&self, features: &[f64]) -> f64 {
        dot(&self.coef, features)
    }
}

/// Ridge least squares: `(X'X + lambda D) coef = X'y`, intercept unpenalized.
pub fn fit_linear(
    features: &DMatrix<f64>,
    targets: &[f64],
    cfg: &LearnerConfig,
) -> Result<LinearFit> {
    let (n, d) = features.shape();
    if n != targets.len() {
        return Err(MivError::Fit(format!(
            "{n} feature rows but {} targets",
            targets.len()
        )));
    }
    if cfg.ridge_lambda == 0.0 && n < d {
        return Err(MivError::Fit(format!(
            "{n} rows for {d} coefficients; set ridge_lambda > 0"
        )));
    }
    let y = DVector::from_column_slice(targets);
    let mut gram = features.transpose() * features;
    for j in 1..d {
        gram[(j, j)] += cfg.ridge_lambda;
    }
    let rhs = features.transpose() * y;
    if cfg.ridge_lambda == 0.0 {
        // rank check: relative pivot size in the Cholesky factor
        let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE);
        let ch = gram
            .clone()
            .cholesky()
            .ok_or_else(|| MivError::Fit("rank-deficient design; set ridge_lambda > 0".into()))?;
        let l = ch.l();
        if (0..d).any(|j| l[(j, j)].powi(2) < 1e-12 * scale) {
            return Err(MivError::Fit(
                "rank-deficient design; set ridge_lambda > 0".into(),
            ));
        }
        return Ok(LinearFit {
            coef: ch.solve(&rhs),
        });
    }
    Ok(LinearFit {
        coef: solve_spd(gram, &rhs, cfg.ridge_lambda)?,
    })
}
