//! The five commands. Each returns a JSON report and a plain-text summary;
//! both embed the resolved configuration and contain no timestamps, so two
//! runs with the same inputs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use miv_core::crossfit::{crossfit_report, EstimateReport};
use miv_core::general::{solve_functional, SolveOptions};
use miv_core::model::FunctionalKind;
use miv_core::rng::derive_seed;
use miv_core::simulation::{
    oracle_beta, run_monte_carlo, run_robustness, DgpFamily, DgpSpec, MonteCarloOptions,
    MonteCarloReport, Scenario,
};
use miv_core::{validate_table, FunctionalSpec, MivError, ObservationTable};
use serde::Serialize;

use crate::config::{AnalysisConfig, FunctionalConfig};
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest_analyses, Ingested};

pub const REPORT_FORMAT: &str = "miv-report/1";
/// Stream label separating the oracle draws from the replication data.
const ORACLE_STREAM: u64 = 0x0AC1E;
/// Agreement is recorded when the oracle lies this close to the stated truth.
pub const STATED_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub json: String,
    pub text: String,
}

fn render<T: Serialize>(report: &T, text: String) -> Rendered {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    Rendered { json, text }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub label: String,
    pub rows: usize,
    pub respondents: usize,
}

fn level_summaries(table: &ObservationTable) -> Vec<LevelSummary> {
    let mut out: Vec<LevelSummary> = (0..table.levels)
        .map(|z| LevelSummary {
            level: z,
            label: table
                .encoding
                .as_ref()
                .map(|e| e.describe(z))
                .unwrap_or_else(|| z.to_string()),
            rows: 0,
            respondents: 0,
        })
        .collect();
    for row in table.rows() {
        out[row.z].rows += 1;
        out[row.z].respondents += usize::from(row.r);
    }
    out
}

fn write_levels(s: &mut String, levels: &[LevelSummary]) {
    writeln!(
        s,
        "  {:>5}  {:<32} {:>8} {:>10}",
        "level", "instrument", "rows", "responded"
    )
    .unwrap();
    for l in levels {
        writeln!(
            s,
            "  {:>5}  {:<32} {:>8} {:>10}",
            l.level, l.label, l.rows, l.respondents
        )
        .unwrap();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisResult {
    pub instruments: Vec<String>,
    pub n: usize,
    pub n0: usize,
    pub levels: Vec<LevelSummary>,
    pub functional: String,
    /// Solved `psi` for quantile functionals.
    pub psi: Option<f64>,
    /// `E[h(Y; psi) | R = 0]`.
    pub beta: EstimateReport,
    /// `E[h(Y; psi)]` over the whole population.
    pub population: Option<EstimateReport>,
    /// Cross-fitted identification estimate, median over repetitions.
    pub plug_in: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateOutput {
    pub format: &'static str,
    pub command: &'static str,
    pub data_file: String,
    pub config: AnalysisConfig,
    pub analyses: Vec<AnalysisResult>,
}

fn resolve_spec(
    cfg: &AnalysisConfig,
    table: &ObservationTable,
) -> CliResult<(FunctionalSpec, Option<f64>)> {
    match cfg.functional {
        FunctionalConfig::Mean => Ok((FunctionalSpec::mean(), None)),
        FunctionalConfig::Quantile { q } => {
            let opts = SolveOptions {
                grid_points: cfg.estimation.grid_points,
                mode: cfg.estimation.mode,
                policy: cfg.estimation.trim,
                ..SolveOptions::default()
            };
            let sol = solve_functional(table, &cfg.learner, q, &opts)?;
            Ok((FunctionalSpec::quantile(q, sol.psi)?, Some(sol.psi)))
        }
    }
}

fn estimate_one(cfg: &AnalysisConfig, ing: Ingested) -> CliResult<AnalysisResult> {
    let table = &ing.table;
    if table.n0() == 0 {
        return Err(MivError::NoIncompleteCases.into());
    }
    let (spec, psi) = resolve_spec(cfg, table)?;
    let out = crossfit_report(table, &spec, &cfg.crossfit_options())?;
    let mut warnings = ing.warnings;
    warnings.extend(out.beta.diagnostics.warnings.iter().cloned());
    Ok(AnalysisResult {
        instruments: ing.instruments,
        n: table.n(),
        n0: table.n0(),
        levels: level_summaries(table),
        functional: spec.label(),
        psi,
        beta: out.beta,
        population: out.population,
        plug_in: out.plug_in,
        warnings,
    })
}

fn write_estimate(s: &mut String, name: &str, e: &EstimateReport) {
    writeln!(
        s,
        "  {name:<12} {:>12.6} {:>12.6}   [{:.6}, {:.6}]",
        e.estimate, e.std_error, e.ci.0, e.ci.1
    )
    .unwrap();
}

/// Cross-fitted estimate of the nonrespondent and population functionals.
pub fn cmd_estimate(cfg: &AnalysisConfig, data: &Path) -> CliResult<Rendered> {
    let analyses = ingest_analyses(data, cfg.data()?)?
        .into_iter()
        .map(|ing| estimate_one(cfg, ing))
        .collect::<CliResult<Vec<_>>>()?;
    let out = EstimateOutput {
        format: REPORT_FORMAT,
        command: "estimate",
        data_file: data.display().to_string(),
        config: cfg.clone(),
        analyses,
    };
    let mut s = String::new();
    let e = &cfg.estimation;
    writeln!(s, "miv estimate  data={}", out.data_file).unwrap();
    writeln!(
        s,
        "folds={} repetitions={} seed={} ci_level={} trim={:?} winsorize={:?}",
        e.folds, e.repetitions, e.seed, e.ci_level, e.trim, e.winsorize
    )
    .unwrap();
    for a in &out.analyses {
        writeln!(s).unwrap();
        writeln!(
            s,
            "instrument {}: n={} nonrespondents={} levels={}",
            a.instruments.join(" x "),
            a.n,
            a.n0,
            a.levels.len()
        )
        .unwrap();
        write_levels(&mut s, &a.levels);
        let psi = a.psi.map(|p| format!(" psi={p:.6}")).unwrap_or_default();
        writeln!(s, "functional {}{psi}", a.functional).unwrap();
        writeln!(
            s,
            "  {:<12} {:>12} {:>12}   {:.0}% CI",
            "target",
            "estimate",
            "std.err",
            a.beta.ci_level * 100.0
        )
        .unwrap();
        write_estimate(&mut s, "R=0", &a.beta);
        if let Some(p) = &a.population {
            write_estimate(&mut s, "population", p);
        }
        writeln!(s, "  {:<12} {:>12.6}", "plug-in R=0", a.plug_in).unwrap();
        let d = &a.beta.diagnostics;
        writeln!(
            s,
            "diagnostics: floor_hits={} dropped_rows={} probability_clips={} winsorized={} nonconverged_fits={}",
            d.floor_hits, d.dropped_rows, d.probability_clips, d.winsorized, d.nonconverged_fits
        )
        .unwrap();
        for w in &a.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
    }
    Ok(render(&out, s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateAnalysis {
    pub instruments: Vec<String>,
    pub n: usize,
    pub n0: usize,
    pub levels: Vec<LevelSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateOutput {
    pub format: &'static str,
    pub command: &'static str,
    pub data_file: String,
    pub config: AnalysisConfig,
    pub analyses: Vec<ValidateAnalysis>,
}

/// Ingests the data and reports its shape; contract violations are errors.
pub fn cmd_validate(cfg: &AnalysisConfig, data: &Path) -> CliResult<Rendered> {
    let mut analyses = Vec::new();
    for ing in ingest_analyses(data, cfg.data()?)? {
        let violations = validate_table(&ing.table);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(CliError::Data(msg.join("; ")));
        }
        let mut warnings = ing.warnings;
        if ing.table.n0() == 0 {
            warnings.push("no nonrespondents; estimate will fail".into());
        }
        analyses.push(ValidateAnalysis {
            instruments: ing.instruments,
            n: ing.table.n(),
            n0: ing.table.n0(),
            levels: level_summaries(&ing.table),
            warnings,
        });
    }
    let out = ValidateOutput {
        format: REPORT_FORMAT,
        command: "validate",
        data_file: data.display().to_string(),
        config: cfg.clone(),
        analyses,
    };
    let mut s = format!("miv validate  data={}\n", out.data_file);
    for a in &out.analyses {
        writeln!(
            s,
            "instrument {}: n={} nonrespondents={} levels={}",
            a.instruments.join(" x "),
            a.n,
            a.n0,
            a.levels.len()
        )
        .unwrap();
        write_levels(&mut s, &a.levels);
        for w in &a.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
    }
    writeln!(s, "ok").unwrap();
    Ok(render(&out, s))
}

/// Published truth of a built-in design, if any.
pub fn stated_truth(family: DgpFamily) -> Option<f64> {
    match family {
        DgpFamily::BinarySec51 => Some(1.8),
        DgpFamily::GeneralSec52 | DgpFamily::GeneralSec52AsPrinted => Some(1.07),
        DgpFamily::Custom => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutput {
    pub format: &'static str,
    pub command: &'static str,
    pub config: AnalysisConfig,
    pub dgp: DgpSpec,
    pub functional: String,
    pub draws: usize,
    pub seed: u64,
    pub beta: f64,
    pub mc_se: f64,
    pub incomplete: usize,
    pub clamp_fraction: f64,
    pub stated_value: Option<f64>,
    /// Whether the oracle lies within [`STATED_TOLERANCE`] of the stated value.
    pub agrees_with_stated: Option<bool>,
}

fn oracle_seed(cfg: &AnalysisConfig) -> u64 {
    derive_seed(cfg.simulation().seed, &[ORACLE_STREAM])
}

/// Brute-force truth for the configured design.
pub fn cmd_oracle(cfg: &AnalysisConfig) -> CliResult<Rendered> {
    let sim = cfg.simulation();
    let dgp = sim.dgp(sim.oracle_draws)?;
    let spec = cfg.functional.spec()?;
    let seed = oracle_seed(cfg);
    let o = oracle_beta(&dgp, sim.oracle_draws, seed, &spec)?;
    let stated_value =
        stated_truth(dgp.family).filter(|_| matches!(spec.kind, FunctionalKind::Mean));
    let out = OracleOutput {
        format: REPORT_FORMAT,
        command: "oracle",
        config: cfg.clone(),
        functional: spec.label(),
        draws: o.draws,
        seed,
        beta: o.beta,
        mc_se: o.mc_se,
        incomplete: o.incomplete,
        clamp_fraction: o.clamp_fraction,
        stated_value,
        agrees_with_stated: stated_value.map(|p| (o.beta - p).abs() <= STATED_TOLERANCE),
        dgp,
    };
    let mut s = format!(
        "miv oracle  design={:?} functional={} draws={} seed={}\n",
        out.dgp.family, out.functional, out.draws, out.seed
    );
    writeln!(s, "beta = {:.6} (MC s.e. {:.6})", out.beta, out.mc_se).unwrap();
    writeln!(
        s,
        "nonrespondents = {}  clamp fraction = {:.4} ({:?})",
        out.incomplete, out.clamp_fraction, out.dgp.clamp_policy
    )
    .unwrap();
    if let (Some(p), Some(ok)) = (out.stated_value, out.agrees_with_stated) {
        let verdict = if ok { "agrees with" } else { "differs from" };
        writeln!(
            s,
            "{verdict} the stated truth {p} (difference {:+.4}, tolerance {STATED_TOLERANCE})",
            out.beta - p
        )
        .unwrap();
    }
    Ok(render(&out, s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub value: f64,
    pub mc_se: f64,
    /// `"oracle"` or `"config"`.
    pub source: &'static str,
    pub draws: Option<usize>,
    pub clamp_fraction: Option<f64>,
}

fn resolve_truth(cfg: &AnalysisConfig, spec: &FunctionalSpec) -> CliResult<Truth> {
    let sim = cfg.simulation();
    if let Some(value) = sim.truth {
        return Ok(Truth {
            value,
            mc_se: 0.0,
            source: "config",
            draws: None,
            clamp_fraction: None,
        });
    }
    let dgp = sim.dgp(sim.oracle_draws)?;
    let o = oracle_beta(&dgp, sim.oracle_draws, oracle_seed(cfg), spec)?;
    Ok(Truth {
        value: o.beta,
        mc_se: o.mc_se,
        source: "oracle",
        draws: Some(o.draws),
        clamp_fraction: Some(o.clamp_fraction),
    })
}

fn mean_only(cfg: &AnalysisConfig, command: &str) -> CliResult<FunctionalSpec> {
    match cfg.functional {
        FunctionalConfig::Mean => Ok(FunctionalSpec::mean()),
        _ => Err(CliError::Config(format!(
            "{command} supports the mean functional only"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateOutput {
    pub format: &'static str,
    pub command: &'static str,
    pub config: AnalysisConfig,
    pub truth: Truth,
    pub studies: Vec<MonteCarloReport>,
}

/// Monte Carlo study at every configured sample size, laid out like the
/// published simulation tables.
pub fn cmd_simulate(cfg: &AnalysisConfig) -> CliResult<Rendered> {
    let spec = mean_only(cfg, "simulate")?;
    let sim = cfg.simulation();
    let truth = resolve_truth(cfg, &spec)?;
    let opts = MonteCarloOptions {
        crossfit: cfg.crossfit_options(),
        estimators: sim.estimators.clone(),
    };
    let studies = sim
        .sizes
        .iter()
        .map(|&n| {
            let dgp = sim.dgp(n)?;
            Ok(run_monte_carlo(
                &dgp,
                truth.value,
                truth.mc_se,
                sim.replications,
                &spec,
                &opts,
            )?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out = SimulateOutput {
        format: REPORT_FORMAT,
        command: "simulate",
        config: cfg.clone(),
        truth,
        studies,
    };
    let mut s = format!(
        "miv simulate  design={:?} replications={} truth={:.6} ({})\n",
        sim.design, sim.replications, out.truth.value, out.truth.source
    );
    writeln!(
        s,
        "{:>7}  {:<20} {:>10} {:>10} {:>10} {:>9} {:>9}",
        "n", "estimator", "bias", "var", "mse", "coverage", "failed"
    )
    .unwrap();
    for study in &out.studies {
        for e in &study.estimators {
            let cov = e
                .coverage
                .map(|c| format!("{:.1}%", 100.0 * c))
                .unwrap_or_else(|| "-".into());
            writeln!(
                s,
                "{:>7}  {:<20} {:>10.5} {:>10.6} {:>10.6} {:>9} {:>9}",
                study.dgp.n,
                e.estimator.label(),
                e.bias,
                e.variance,
                e.mse,
                cov,
                study.failures.len()
            )
            .unwrap();
        }
        if study.mean_clamp_fraction > 0.0 {
            writeln!(
                s,
                "{:>7}  mean clamp fraction {:.4}",
                study.dgp.n, study.mean_clamp_fraction
            )
            .unwrap();
        }
    }
    Ok(render(&out, s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub scenario: Scenario,
    pub corrupted: Vec<String>,
    pub bias: f64,
    pub mc_se: f64,
    pub z: f64,
    pub expects_unbiased: bool,
    /// `|z| <= 3` for scenarios expected unbiased, `|z| > 5` for the control.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessOutput {
    pub format: &'static str,
    pub command: &'static str,
    pub config: AnalysisConfig,
    pub dgp: DgpSpec,
    pub replications: usize,
    pub truth: Truth,
    pub rows: Vec<RobustnessRow>,
}

/// Scenario grid for a design: the three unbiased scenarios of its instrument
/// type followed by the all-corrupted control.
pub fn scenarios_for(levels: usize) -> Vec<Scenario> {
    let mut s = if levels == 2 {
        Scenario::BINARY.to_vec()
    } else {
        Scenario::GENERAL.to_vec()
    };
    s.push(Scenario::AllCorrupted);
    s
}

/// Misspecification grid evaluated with closed-form nuisances.
pub fn cmd_robustness(cfg: &AnalysisConfig) -> CliResult<Rendered> {
    let spec = mean_only(cfg, "robustness")?;
    let sim = cfg.simulation();
    let truth = resolve_truth(cfg, &spec)?;
    let dgp = sim.dgp(sim.robustness_n)?;
    let scenarios = scenarios_for(dgp.params.levels());
    let outcomes = run_robustness(
        &dgp,
        &scenarios,
        sim.robustness_replications,
        truth.value,
        truth.mc_se,
    )?;
    let rows = outcomes
        .iter()
        .map(|o| {
            let z = o.z_score();
            let expects_unbiased = o.scenario.expects_unbiased();
            RobustnessRow {
                scenario: o.scenario,
                corrupted: o
                    .scenario
                    .components()
                    .iter()
                    .map(|c| format!("{c:?}"))
                    .collect(),
                bias: o.bias,
                mc_se: o.mc_se,
                z,
                expects_unbiased,
                pass: if expects_unbiased {
                    z.abs() <= 3.0
                } else {
                    z.abs() > 5.0
                },
            }
        })
        .collect();
    let out = RobustnessOutput {
        format: REPORT_FORMAT,
        command: "robustness",
        config: cfg.clone(),
        replications: sim.robustness_replications,
        truth,
        rows,
        dgp,
    };
    let mut s = format!(
        "miv robustness  design={:?} n={} replications={} truth={:.6} ({})\n",
        out.dgp.family, out.dgp.n, out.replications, out.truth.value, out.truth.source
    );
    writeln!(
        s,
        "{:<24} {:<28} {:>10} {:>9} {:>8}  {}",
        "scenario", "corrupted", "bias", "mc s.e.", "z", "result"
    )
    .unwrap();
    for r in &out.rows {
        let expect = if r.expects_unbiased {
            "|z| <= 3"
        } else {
            "|z| > 5"
        };
        writeln!(
            s,
            "{:<24} {:<28} {:>10.5} {:>9.5} {:>8.2}  {} ({expect})",
            format!("{:?}", r.scenario),
            r.corrupted.join(","),
            r.bias,
            r.mc_se,
            r.z,
            if r.pass { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    Ok(render(&out, s))
}
