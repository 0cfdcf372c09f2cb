use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{chunk_lengths, draw_chunk, ClampPolicy, DgpParams, DgpSpec, P0_CAP};
use crate::error::{MivError, Result};
use crate::model::{evaluate_h, FunctionalKind, FunctionalSpec};
use crate::nuisance::{MarginalizationMode, Nuisance, NuisanceEval, DEFAULT_EPS_DEN};
use crate::stats::{quantile_sorted, sample_variance};

const QUAD_POINTS: usize = 256;
const QUANTILE_BATCHES: usize = 20;

/// Brute-force truth `E[h(Y; psi) | R = 0]` from latent-complete draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBeta {
    /// For quantile functionals, the root `psi` of `E[h(Y; psi) | R = 0] = 0`.
    pub beta: f64,
    pub mc_se: f64,
    pub draws: usize,
    pub incomplete: usize,
    /// Share of draws whose nonresponse probability was clamped.
    pub clamp_fraction: f64,
}

#[derive(Default)]
struct ChunkStats {
    count: usize,
    mean: f64,
    m2: f64,
    clamped: usize,
    ys: Vec<f64>,
}

impl ChunkStats {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    fn merge(&mut self, o: ChunkStats) {
        if o.count > 0 {
            let total = (self.count + o.count) as f64;
            let d = o.mean - self.mean;
            self.mean += d * o.count as f64 / total;
            self.m2 += o.m2 + d * d * self.count as f64 * o.count as f64 / total;
            self.count += o.count;
        }
        self.clamped += o.clamped;
        self.ys.extend(o.ys);
    }
}

/// Draws `draws` latent-complete records (without materializing them all) and
/// averages `h` over the nonrespondents. Quantile functionals return the
/// empirical root instead, with a batch-means standard error.
pub fn oracle_beta(
    dgp: &DgpSpec,
    draws: usize,
    seed: u64,
    spec: &FunctionalSpec,
) -> Result<OracleBeta> {
    if draws < 100_000 {
        return Err(MivError::Config(format!(
            "oracle needs at least 1e5 draws, got {draws}"
        )));
    }
    dgp.params.validate()?;
    let quantile = match spec.kind {
        FunctionalKind::Quantile { q } => Some(q),
        _ => None,
    };
    let per_chunk: Vec<Result<ChunkStats>> = chunk_lengths(draws)
        .into_par_iter()
        .enumerate()
        .map(|(c, len)| {
            let (records, _) = draw_chunk(&dgp.params, dgp.clamp_policy, seed, c, len)?;
            let mut s = ChunkStats::default();
            for l in &records {
                s.clamped += usize::from(l.clamped);
                if !l.r {
                    if quantile.is_some() {
                        s.ys.push(l.y);
                        s.count += 1;
                    } else {
                        s.push(evaluate_h(spec, l.y));
                    }
                }
            }
            Ok(s)
        })
        .collect();
    let mut total = ChunkStats::default();
    for s in per_chunk {
        total.merge(s?);
    }
    if total.count == 0 {
        return Err(MivError::NoIncompleteCases);
    }
    let clamp_fraction = total.clamped as f64 / draws as f64;
    let (beta, mc_se) = match quantile {
        None => (
            total.mean,
            (total.m2 / (total.count as f64 - 1.0)).sqrt() / (total.count as f64).sqrt(),
        ),
        Some(q) => {
            // h = 1{Y >= psi} - q has its root at the (1 - q) quantile
            let level = 1.0 - q;
            let batch = total.ys.len() / QUANTILE_BATCHES;
            let batch_q: Vec<f64> = (0..QUANTILE_BATCHES)
                .filter(|_| batch >= 2)
                .map(|b| {
                    let mut v = total.ys[b * batch..(b + 1) * batch].to_vec();
                    v.sort_by(f64::total_cmp);
                    quantile_sorted(&v, level)
                })
                .collect();
            let mut all = total.ys;
            all.sort_by(f64::total_cmp);
            let se = if batch_q.len() > 1 {
                (sample_variance(&batch_q) / batch_q.len() as f64).sqrt()
            } else {
                f64::NAN
            };
            (quantile_sorted(&all, level), se)
        }
    };
    Ok(OracleBeta {
        beta,
        mc_se,
        draws,
        incomplete: total.count,
        clamp_fraction,
    })
}

/// True nuisances of a design in closed form (mean functional only).
///
/// Expectations over the latent factor are exact: with
/// `P(R = 0 | z, U, x) = min(exp(a + b U), cap)` the moments split at the
/// clamping threshold into truncated exponential moments of `U`.
#[derive(Debug, Clone)]
pub struct OracleNuisance {
    params: DgpParams,
    cap: f64,
    psi: f64,
    pi0: f64,
}

impl OracleNuisance {
    pub fn new(dgp: &DgpSpec, spec: &FunctionalSpec) -> Result<Self> {
        dgp.params.validate()?;
        if !matches!(spec.kind, FunctionalKind::Mean) {
            return Err(MivError::Config(format!(
                "closed-form nuisances are available for the mean only, not {}",
                spec.label()
            )));
        }
        let cap = match dgp.clamp_policy {
            ClampPolicy::ClampToOneMinusEps => P0_CAP,
            ClampPolicy::AsPrintedError => 1.0,
            ClampPolicy::RejectInvalid => return Err(MivError::Config(
                "rejection changes the covariate law; closed-form nuisances need the clamp policy"
                    .into(),
            )),
        };
        let mut ns = Self {
            params: dgp.params.clone(),
            cap,
            psi: spec.psi,
            pi0: f64::NAN,
        };
        ns.pi0 = integrate_x(|x| 1.0 - ns.evaluate(x).pi_marg());
        Ok(ns)
    }

    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    /// `E[P(R = 0 | z, U, x) exp(t U)]` where the log-probability is `a + b U`.
    fn nonresponse_moment(&self, a: f64, t: f64) -> f64 {
        let law = &self.params.latent;
        let b = self.params.selection_u;
        let ln_cap = self.cap.ln();
        if b == 0.0 {
            return a.exp().min(self.cap) * law.exp_moment(t);
        }
        let threshold = (ln_cap - a) / b;
        let (inf, sup) = (f64::NEG_INFINITY, f64::INFINITY);
        if b < 0.0 {
            self.cap * law.partial_exp_moment(t, inf, threshold)
                + a.exp() * law.partial_exp_moment(t + b, threshold, sup)
        } else {
            self.cap * law.partial_exp_moment(t, threshold, sup)
                + a.exp() * law.partial_exp_moment(t + b, inf, threshold)
        }
    }
}

impl Nuisance for OracleNuisance {
    fn levels(&self) -> usize {
        self.params.levels()
    }

    fn mode(&self) -> MarginalizationMode {
        MarginalizationMode::Direct
    }

    fn evaluate(&self, x: &[f64]) -> NuisanceEval {
        let p = &self.params;
        let levels = p.levels();
        let gamma = p.outcome_u;
        let scale = p.outcome_scale[0] + p.outcome_scale[1] * x[0] + p.outcome_scale[2] * x[1];
        let ey = p.latent.exp_moment(gamma);
        let base = p.alpha_u(0.0, x);
        let mut pi_z = Vec::with_capacity(levels);
        let mut mu_z = Vec::with_capacity(levels);
        let mut rho = Vec::with_capacity(levels);
        for z in 0..levels {
            let a = p.alpha_z(z, x) + base;
            let pz = 1.0 - self.nonresponse_moment(a, 0.0);
            let ry = scale * (ey - self.nonresponse_moment(a, gamma));
            pi_z.push(pz);
            mu_z.push(ry - self.psi * pz);
            rho.push(p.rho(z, x));
        }
        let pi_m = rho.iter().zip(&pi_z).map(|(r, v)| r * v).sum();
        let mu_m = rho.iter().zip(&mu_z).map(|(r, v)| r * v).sum();
        NuisanceEval {
            pi_z,
            rho,
            mu_z,
            pi_direct: Some(pi_m),
            mu_direct: Some(mu_m),
            pi0: self.pi0,
            eps_den: DEFAULT_EPS_DEN,
            clips: 0,
        }
    }
}

/// Midpoint rule over the unit square.
fn integrate_x(f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
    let h = 1.0 / QUAD_POINTS as f64;
    let rows: Vec<f64> = (0..QUAD_POINTS)
        .into_par_iter()
        .map(|i| {
            (0..QUAD_POINTS)
                .map(|j| f(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]))
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() * h * h
}

/// The value `E[delta(Z, X) | R = 0]` that the estimators target under the
/// true nuisances. It equals the oracle truth when the selection model holds
/// exactly and drifts from it when clamping breaks the multiplicative form.
pub fn identified_beta(ns: &OracleNuisance) -> f64 {
    let num = integrate_x(|x| {
        let e = ns.evaluate(x);
        (0..e.levels())
            .map(|z| e.rho[z] * (1.0 - e.pi_z[z]) * e.delta_y(z) / e.delta_r(z))
            .sum()
    });
    num / ns.pi0
}
