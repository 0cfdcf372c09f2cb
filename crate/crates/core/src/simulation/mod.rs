//! Data-generating processes from the simulation studies, brute-force
//! truths, closed-form true nuisances, deliberate misspecification, and the
//! Monte Carlo driver.

mod corrupt;
mod dgp;
mod montecarlo;
mod oracle;

pub use corrupt::{
    corrupt_nuisance, Component, Corrupted, Scenario, CORRUPT_LOGIT, CORRUPT_SHIFT, CORRUPT_SHRINK,
};
pub use dgp::{
    gen_binary_dgp, gen_dgp, gen_general_dgp, ClampPolicy, DgpFamily, DgpParams, DgpSpec,
    LatentLaw, LatentRecord, SimulatedData, P0_CAP,
};
pub use montecarlo::{
    run_monte_carlo, run_robustness, EstimatorKind, EstimatorSummary, MonteCarloOptions,
    MonteCarloReport, RobustnessOutcome,
};
pub use oracle::{identified_beta, oracle_beta, OracleBeta, OracleNuisance};
