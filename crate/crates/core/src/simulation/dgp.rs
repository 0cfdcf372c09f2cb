use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
use crate::model::{InstrumentEncoding, ObservationTable};
use crate::rng::stream;
use crate::stats::logistic;

/// Largest nonresponse probability kept by [`ClampPolicy::ClampToOneMinusEps`].
pub const P0_CAP: f64 = 1.0 - 1e-9;

pub(crate) const CHUNK: usize = 8192;
const GEN_STREAM: u64 = 0xD6F;
const MAX_REJECTIONS_PER_ROW: usize = 1000;

/// Handling of draws where `exp{alpha_z + alpha_u}` exceeds one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampPolicy {
    #[default]
    ClampToOneMinusEps,
    /// Redraw the whole record.
    RejectInvalid,
    /// Fail on the first invalid draw.
    AsPrintedError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum LatentLaw {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl LatentLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            LatentLaw::Normal { sd, .. } if !(sd > 0.0) => {
                Err(MivError::Config("latent sd must be positive".into()))
            }
            LatentLaw::Uniform { lo, hi } if !(hi > lo) => {
                Err(MivError::Config("latent uniform needs lo < hi".into()))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatentLaw::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            LatentLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
        }
    }

    /// `E[exp(t U) 1{a < U <= b}]`; infinite bounds are allowed.
    pub fn partial_exp_moment(&self, t: f64, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match *self {
            LatentLaw::Normal { mean, sd } => {
                let shift = mean + t * sd * sd;
                let cdf = |v: f64| {
                    if v == f64::INFINITY {
                        1.0
                    } else if v == f64::NEG_INFINITY {
                        0.0
                    } else {
                        crate::stats::normal_cdf((v - shift) / sd)
                    }
                };
                (t * mean + 0.5 * t * t * sd * sd).exp() * (cdf(b) - cdf(a))
            }
            LatentLaw::Uniform { lo, hi } => {
                let (a, b) = (a.max(lo), b.min(hi));
                if b <= a {
                    return 0.0;
                }
                if t.abs() < 1e-12 {
                    (b - a) / (hi - lo)
                } else {
                    ((t * b).exp() - (t * a).exp()) / (t * (hi - lo))
                }
            }
        }
    }

    pub fn exp_moment(&self, t: f64) -> f64 {
        self.partial_exp_moment(t, f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Coefficients of a design with two `U(0, 1)` covariates and binary instruments.
///
/// Every linear predictor is written on `(1, x1, x2)`:
/// - instrument k: `P(Z_k = 1 | X) = logistic(instruments[k] . (1, x))`;
/// - selection: `log P(R = 0 | Z, U, X) = alpha_z(Z, X) + alpha_u(U, X)` with
///   `alpha_z = sum_k Z_k * selection_z[k] . (1, x)` and
///   `alpha_u = selection_base . (1, x) + selection_u * U`;
/// - outcome: `Y = (outcome_scale . (1, x)) * exp(outcome_u * U) + N(0, noise_sd^2)`.
///
/// The instrument level is the binary number `Z_1 Z_2 ... Z_K`, so for two
/// instruments the levels are (0,0), (0,1), (1,0), (1,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub instruments: Vec<[f64; 3]>,
    pub selection_base: [f64; 3],
    pub selection_u: f64,
    pub selection_z: Vec<[f64; 3]>,
    pub latent: LatentLaw,
    pub outcome_scale: [f64; 3],
    pub outcome_u: f64,
    pub noise_sd: f64,
}

fn lin(c: &[f64; 3], x: &[f64]) -> f64 {
    c[0] + c[1] * x[0] + c[2] * x[1]
}

impl DgpParams {
    pub fn binary_sec51() -> Self {
        Self {
            instruments: vec![[-1.0, 1.0, 1.0]],
            selection_base: [0.0, -1.0, -1.0],
            selection_u: -0.25,
            selection_z: vec![[1.0, 1.0, 1.0]],
            latent: LatentLaw::Normal { mean: 4.0, sd: 0.5 },
            outcome_scale: [0.0, 1.0, 1.0],
            outcome_u: 1.0 / 6.0,
            noise_sd: 0.5,
        }
    }

    /// Two binary instruments with the selection exponent exactly as printed,
    /// `(1/4){8 + x1 - x2 - U + Z1(-1 - x1 - x2) + Z2(8 + x1 - x2)}`, which
    /// exceeds zero everywhere.
    pub fn general_sec52_as_printed() -> Self {
        Self {
            instruments: vec![[-0.25, 0.25, 0.25], [0.0, 0.25, -0.25]],
            selection_base: [2.0, 0.25, -0.25],
            selection_u: -0.25,
            selection_z: vec![[-0.25, -0.25, -0.25], [2.0, 0.25, -0.25]],
            latent: LatentLaw::Uniform { lo: 0.0, hi: 1.0 },
            outcome_scale: [0.0, 1.0, 1.0],
            outcome_u: 1.0 / 6.0,
            noise_sd: 0.5,
        }
    }

    /// The two-instrument design with the leading intercept 8 replaced by -8:
    /// `(1/4){-8 + x1 - x2 - U + Z1(-1 - x1 - x2) + Z2(8 + x1 - x2)}`.
    /// The exponent still exceeds zero on part of the `Z2 = 1` region.
    pub fn general_sec52() -> Self {
        Self {
            selection_base: [-2.0, 0.25, -0.25],
            ..Self::general_sec52_as_printed()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() || self.instruments.len() > 8 {
            return Err(MivError::Config(
                "between 1 and 8 binary instruments are supported".into(),
            ));
        }
        if self.selection_z.len() != self.instruments.len() {
            return Err(MivError::Config(format!(
                "{} instrument models but {} selection terms",
                self.instruments.len(),
                self.selection_z.len()
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(MivError::Config("noise_sd must be non-negative".into()));
        }
        self.latent.validate()
    }

    pub fn levels(&self) -> usize {
        1 << self.instruments.len()
    }

    /// Bit of instrument `k` in level `z`.
    pub fn bit(&self, z: usize, k: usize) -> bool {
        (z >> (self.instruments.len() - 1 - k)) & 1 == 1
    }

    /// `P(Z = z | X = x)` as a product of the instrument probabilities.
    pub fn rho(&self, z: usize, x: &[f64]) -> f64 {
        self.instruments
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let p = logistic(lin(c, x));
                if self.bit(z, k) {
                    p
                } else {
                    1.0 - p
                }
            })
            .product()
    }

    pub fn alpha_z(&self, z: usize, x: &[f64]) -> f64 {
        self.selection_z
            .iter()
            .enumerate()
            .filter(|(k, _)| self.bit(z, *k))
            .map(|(_, c)| lin(c, x))
            .sum()
    }

    pub fn alpha_u(&self, u: f64, x: &[f64]) -> f64 {
        lin(&self.selection_base, x) + self.selection_u * u
    }

    pub fn log_p0(&self, z: usize, u: f64, x: &[f64]) -> f64 {
        self.alpha_z(z, x) + self.alpha_u(u, x)
    }

    pub fn outcome_mean(&self, u: f64, x: &[f64]) -> f64 {
        lin(&self.outcome_scale, x) * (self.outcome_u * u).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpFamily {
    BinarySec51,
    GeneralSec52,
    GeneralSec52AsPrinted,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: DgpFamily,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub clamp_policy: ClampPolicy,
    pub params: DgpParams,
}

impl DgpSpec {
    pub fn new(family: DgpFamily, n: usize, seed: u64) -> Result<Self> {
        let params = match family {
            DgpFamily::BinarySec51 => DgpParams::binary_sec51(),
            DgpFamily::GeneralSec52 => DgpParams::general_sec52(),
            DgpFamily::GeneralSec52AsPrinted => DgpParams::general_sec52_as_printed(),
            DgpFamily::Custom => {
                return Err(MivError::Config(
                    "custom designs are built with DgpSpec::custom".into(),
                ))
            }
        };
        Ok(Self {
            family,
            n,
            seed,
            clamp_policy: ClampPolicy::default(),
            params,
        })
    }

    pub fn binary_sec51(n: usize, seed: u64) -> Self {
        Self::new(DgpFamily::BinarySec51, n, seed).expect("built-in family")
    }

    pub fn general_sec52(n: usize, seed: u64) -> Self {
        Self::new(DgpFamily::GeneralSec52, n, seed).expect("built-in family")
    }

    pub fn custom(params: DgpParams, n: usize, seed: u64) -> Self {
        Self {
            family: DgpFamily::Custom,
            n,
            seed,
            clamp_policy: ClampPolicy::default(),
            params,
        }
    }

    pub fn with_clamp(mut self, policy: ClampPolicy) -> Self {
        self.clamp_policy = policy;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One latent-complete draw; the outcome is kept even when `r` is false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRecord {
    pub x: [f64; 2],
    pub z: usize,
    pub u: f64,
    pub y: f64,
    /// `P(R = 0 | Z, U, X)` after the clamp policy.
    pub p0: f64,
    pub r: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub table: ObservationTable,
    pub latent: Vec<LatentRecord>,
    pub clamped: usize,
    pub rejected: usize,
}

impl SimulatedData {
    pub fn clamp_fraction(&self) -> f64 {
        self.clamped as f64 / self.latent.len() as f64
    }
}

fn draw_record(
    params: &DgpParams,
    policy: ClampPolicy,
    rng: &mut ChaCha8Rng,
    rejected: &mut usize,
) -> Result<LatentRecord> {
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| MivError::Config(e.to_string()))?;
    let mut attempts = 0;
    loop {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        let mut z = 0;
        for c in &params.instruments {
            z = (z << 1) | usize::from(rng.gen::<f64>() < logistic(lin(c, &x)));
        }
        let u = params.latent.sample(rng);
        let raw = params.log_p0(z, u, &x).exp();
        let (p0, clamped) = match policy {
            ClampPolicy::ClampToOneMinusEps => (raw.min(P0_CAP), raw > P0_CAP),
            ClampPolicy::AsPrintedError if raw > 1.0 => {
                return Err(MivError::Generation(format!(
                    "P(R=0) = {raw:.4} > 1 at z={z}, u={u:.4}, x=({:.4}, {:.4})",
                    x[0], x[1]
                )))
            }
            ClampPolicy::RejectInvalid if raw > 1.0 => {
                *rejected += 1;
                attempts += 1;
                if attempts > MAX_REJECTIONS_PER_ROW {
                    return Err(MivError::Generation(format!(
                        "{MAX_REJECTIONS_PER_ROW} consecutive draws had P(R=0) > 1; the design is invalid almost everywhere"
                    )));
                }
                continue;
            }
            _ => (raw, false),
        };
        let r = rng.gen::<f64>() >= p0;
        let y = params.outcome_mean(u, &x) + noise.sample(rng);
        return Ok(LatentRecord {
            x,
            z,
            u,
            y,
            p0,
            r,
            clamped,
        });
    }
}

/// Draws rows `[chunk * CHUNK, chunk * CHUNK + len)`; each chunk has its own stream.
pub(crate) fn draw_chunk(
    params: &DgpParams,
    policy: ClampPolicy,
    seed: u64,
    chunk: usize,
    len: usize,
) -> Result<(Vec<LatentRecord>, usize)> {
    let mut rng = stream(seed, &[GEN_STREAM, chunk as u64]);
    let mut rejected = 0;
    let records = (0..len)
        .map(|_| draw_record(params, policy, &mut rng, &mut rejected))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, rejected))
}

pub(crate) fn chunk_lengths(n: usize) -> Vec<usize> {
    (0..n.div_ceil(CHUNK))
        .map(|c| CHUNK.min(n - c * CHUNK))
        .collect()
}

fn encoding(params: &DgpParams) -> InstrumentEncoding {
    let k = params.instruments.len();
    InstrumentEncoding {
        columns: (1..=k).map(|i| format!("Z{i}")).collect(),
        labels: (0..params.levels())
            .map(|z| {
                (0..k)
                    .map(|j| u8::from(params.bit(z, j)).to_string())
                    .collect()
            })
            .collect(),
    }
}

/// Draws `spec.n` rows. The result depends only on `(params, policy, seed, n)`.
pub fn gen_dgp(spec: &DgpSpec) -> Result<SimulatedData> {
    spec.params.validate()?;
    if spec.n == 0 {
        return Err(MivError::Config("n must be at least 1".into()));
    }
    let chunks: Vec<Result<(Vec<LatentRecord>, usize)>> = chunk_lengths(spec.n)
        .into_par_iter()
        .enumerate()
        .map(|(c, len)| draw_chunk(&spec.params, spec.clamp_policy, spec.seed, c, len))
        .collect();
    let mut latent = Vec::with_capacity(spec.n);
    let mut rejected = 0;
    for c in chunks {
        let (records, rej) = c?;
        latent.extend(records);
        rejected += rej;
    }
    let clamped = latent.iter().filter(|l| l.clamped).count();
    let table = ObservationTable::new(
        latent.iter().flat_map(|l| l.x).collect(),
        2,
        latent.iter().map(|l| l.z).collect(),
        spec.params.levels(),
        latent.iter().map(|l| l.r).collect(),
        latent.iter().map(|l| l.r.then_some(l.y)).collect(),
    )?
    .with_encoding(encoding(&spec.params));
    Ok(SimulatedData {
        table,
        latent,
        clamped,
        rejected,
    })
}

pub fn gen_binary_dgp(n: usize, seed: u64, policy: ClampPolicy) -> Result<SimulatedData> {
    gen_dgp(&DgpSpec::binary_sec51(n, seed).with_clamp(policy))
}

pub fn gen_general_dgp(n: usize, seed: u64, policy: ClampPolicy) -> Result<SimulatedData> {
    gen_dgp(&DgpSpec::general_sec52(n, seed).with_clamp(policy))
}
