use serde::{Deserialize, Serialize};

use crate::error::{MivError, Result};
use crate::influence::IfForm;
use crate::nuisance::{MarginalizationMode, Nuisance, NuisanceEval};

/// Logit-scale tilt applied to the instrument law.
pub const CORRUPT_LOGIT: f64 = 0.7;
/// Factor applied to `pi_z(x) - pi(x)` on every level but the first.
pub const CORRUPT_SHRINK: f64 = 0.5;
/// Level shift applied to the outcome regression and to `delta`.
pub const CORRUPT_SHIFT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PiZ,
    RhoZ,
    MuZ,
    PiMarg,
    Delta,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::PiZ,
        Component::RhoZ,
        Component::MuZ,
        Component::PiMarg,
        Component::Delta,
    ];
}

/// Nuisance set with some components replaced by wrong versions.
///
/// The set is parameterized by `(pi_z, pi(x), rho_z, delta_z, a_z)` with
/// `a_z = mu_z - delta_z * pi_z`, and the outcome regressions are rebuilt
/// from these so that the ratio read off the corrupted set is exactly the
/// (possibly corrupted) `delta`:
///
/// - `pi_z`: distance to `pi(x)` halved on every level except level 0, so
///   no contrast changes sign;
/// - `rho_z`: tilted by `exp(0.7 * (2z/(L-1) - 1))`, then renormalized;
/// - `pi_marg`: replaced by the average of the level probabilities under the tilted law;
/// - `mu_z`: `a_z` shifted by `+0.3`;
/// - `delta`: shifted by `+0.3`.
pub struct Corrupted<N> {
    source: N,
    which: Vec<Component>,
}

/// Errors when `which` asks for a component the source derives rather than models.
pub fn corrupt_nuisance<N: Nuisance>(ns: N, which: &[Component]) -> Result<Corrupted<N>> {
    if ns.mode() == MarginalizationMode::Marginalize {
        if let Some(c) = which
            .iter()
            .find(|c| matches!(c, Component::PiMarg | Component::Delta))
        {
            return Err(MivError::Config(format!(
                "{c:?} is derived from the other components in marginalize mode; use direct mode to corrupt it"
            )));
        }
    }
    let mut which = which.to_vec();
    which.sort_by_key(|c| *c as u8);
    which.dedup();
    Ok(Corrupted { source: ns, which })
}

fn tilt(rho: &[f64]) -> Vec<f64> {
    let l = rho.len();
    let w: Vec<f64> = rho
        .iter()
        .enumerate()
        .map(|(z, r)| r * (CORRUPT_LOGIT * (2.0 * z as f64 / (l - 1) as f64 - 1.0)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

impl<N: Nuisance> Corrupted<N> {
    pub fn components(&self) -> &[Component] {
        &self.which
    }

    fn has(&self, c: Component) -> bool {
        self.which.contains(&c)
    }
}

impl<N: Nuisance> Nuisance for Corrupted<N> {
    fn levels(&self) -> usize {
        self.source.levels()
    }

    fn mode(&self) -> MarginalizationMode {
        if self.which.is_empty() {
            self.source.mode()
        } else {
            MarginalizationMode::Direct
        }
    }

    fn evaluate(&self, x: &[f64]) -> NuisanceEval {
        let src = self.source.evaluate(x);
        if self.which.is_empty() {
            return src;
        }
        let levels = src.levels();
        let pi = src.pi_marg();
        let mu = src.mu_marg();
        let delta: Vec<f64> = (0..levels)
            .map(|z| src.delta_y(z) / src.delta_r(z))
            .collect();
        let a: Vec<f64> = (0..levels)
            .map(|z| src.mu_z[z] - delta[z] * src.pi_z[z])
            .collect();

        let rho = if self.has(Component::RhoZ) {
            tilt(&src.rho)
        } else {
            src.rho.clone()
        };
        let pi_z: Vec<f64> = if self.has(Component::PiZ) {
            src.pi_z
                .iter()
                .enumerate()
                .map(|(z, &p)| {
                    if z == 0 {
                        p
                    } else {
                        pi + CORRUPT_SHRINK * (p - pi)
                    }
                })
                .collect()
        } else {
            src.pi_z.clone()
        };
        let pi_m = if self.has(Component::PiMarg) {
            tilt(&src.rho).iter().zip(&pi_z).map(|(r, p)| r * p).sum()
        } else {
            pi
        };

        let rebuild = [
            Component::PiZ,
            Component::PiMarg,
            Component::MuZ,
            Component::Delta,
        ]
        .iter()
        .any(|&c| self.has(c));
        let (mu_z, mu_m) = if rebuild {
            let shift = if self.has(Component::MuZ) { 1.0 } else { 0.0 } * CORRUPT_SHIFT;
            let d_shift = if self.has(Component::Delta) { 1.0 } else { 0.0 } * CORRUPT_SHIFT;
            let d: Vec<f64> = delta.iter().map(|v| v + d_shift).collect();
            let mu_z = (0..levels).map(|z| a[z] + shift + d[z] * pi_z[z]).collect();
            let mu_m = (0..levels)
                .map(|z| src.rho[z] * (a[z] + shift + d[z] * pi_m))
                .sum();
            (mu_z, mu_m)
        } else {
            (src.mu_z.clone(), mu)
        };

        NuisanceEval {
            pi_z,
            rho,
            mu_z,
            pi_direct: Some(pi_m),
            mu_direct: Some(mu_m),
            pi0: src.pi0,
            eps_den: src.eps_den,
            clips: src.clips,
        }
    }
}

/// Misspecification scenarios under which the influence function stays unbiased,
/// plus the control in which every component is wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Two levels: `delta` and arm 0 correct.
    BinaryDeltaArm,
    /// Two levels: `delta^R`, `rho`, `pi(x)` correct.
    BinaryResponse,
    /// Two levels: `delta` and `rho` correct.
    BinaryDeltaRho,
    /// `delta`, `mu(x)`, `pi(x)` correct.
    GeneralDeltaMarginals,
    /// `pi(z, x)` and `rho` correct.
    GeneralResponse,
    /// `delta` and `rho` correct.
    GeneralDeltaRho,
    AllCorrupted,
}

impl Scenario {
    pub const BINARY: [Scenario; 3] = [
        Scenario::BinaryDeltaArm,
        Scenario::BinaryResponse,
        Scenario::BinaryDeltaRho,
    ];
    pub const GENERAL: [Scenario; 3] = [
        Scenario::GeneralDeltaMarginals,
        Scenario::GeneralResponse,
        Scenario::GeneralDeltaRho,
    ];

    pub fn components(&self) -> Vec<Component> {
        use Component::*;
        match self {
            Scenario::BinaryDeltaArm => vec![PiZ, RhoZ, PiMarg],
            Scenario::GeneralDeltaMarginals => vec![PiZ, RhoZ],
            Scenario::BinaryResponse | Scenario::GeneralResponse => vec![MuZ, Delta],
            Scenario::BinaryDeltaRho | Scenario::GeneralDeltaRho => vec![PiZ, PiMarg, MuZ],
            Scenario::AllCorrupted => Component::ALL.to_vec(),
        }
    }

    /// Influence-function form the scenario is stated for; `None` for the control.
    pub fn form(&self) -> Option<IfForm> {
        match self {
            Scenario::BinaryDeltaArm | Scenario::BinaryResponse | Scenario::BinaryDeltaRho => {
                Some(IfForm::Binary)
            }
            Scenario::AllCorrupted => None,
            _ => Some(IfForm::General),
        }
    }

    pub fn expects_unbiased(&self) -> bool {
        *self != Scenario::AllCorrupted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FunctionalSpec;
    use crate::simulation::{DgpSpec, OracleNuisance};
    use proptest::prelude::*;

    fn oracle(dgp: &DgpSpec) -> OracleNuisance {
        OracleNuisance::new(dgp, &FunctionalSpec::mean()).unwrap()
    }

    #[test]
    fn empty_subset_is_identity() {
        let dgp = DgpSpec::general_sec52(0, 0);
        let c = corrupt_nuisance(oracle(&dgp), &[]).unwrap();
        let src = oracle(&dgp);
        for x in [[0.3, 0.4], [0.9, 0.05]] {
            assert_eq!(c.evaluate(&x), src.evaluate(&x));
        }
    }

    #[test]
    fn marginalize_sources_refuse_derived_components() {
        use crate::nuisance::FnNuisance;
        let f = FnNuisance::new(2, MarginalizationMode::Marginalize, |_x: &[f64]| {
            crate::nuisance::tests::fixed_eval(vec![0.8, 0.6], vec![0.5, 0.5], vec![0.8, 0.9], 0.3)
        });
        assert!(matches!(
            corrupt_nuisance(f, &[Component::PiMarg]),
            Err(MivError::Config(_))
        ));
    }

    #[test]
    fn uncorrupted_delta_is_preserved() {
        let dgp = DgpSpec::general_sec52(0, 0);
        let src = oracle(&dgp);
        for s in [Scenario::GeneralDeltaMarginals, Scenario::GeneralDeltaRho] {
            let c = corrupt_nuisance(oracle(&dgp), &s.components()).unwrap();
            let x = [0.4, 0.7];
            let (e, t) = (c.evaluate(&x), src.evaluate(&x));
            for z in 0..4 {
                assert!((e.delta(z).unwrap() - t.delta(z).unwrap()).abs() < 1e-9);
            }
            assert!(e
                .pi_z
                .iter()
                .zip(&t.pi_z)
                .any(|(a, b)| (a - b).abs() > 1e-3));
        }
    }

    #[test]
    fn arm_zero_kept_in_binary_scenario() {
        let dgp = DgpSpec::binary_sec51(0, 0);
        let src = oracle(&dgp);
        let c = corrupt_nuisance(oracle(&dgp), &Scenario::BinaryDeltaArm.components()).unwrap();
        let x = [0.25, 0.6];
        let (e, t) = (c.evaluate(&x), src.evaluate(&x));
        assert!((e.pi_z[0] - t.pi_z[0]).abs() < 1e-15);
        assert!((e.mu_z[0] - t.mu_z[0]).abs() < 1e-12);
        assert!((e.pi_z[1] - t.pi_z[1]).abs() > 1e-3);
        let wald = |v: &NuisanceEval| (v.mu_z[1] - v.mu_z[0]) / (v.pi_z[1] - v.pi_z[0]);
        assert!((wald(&e) - wald(&t)).abs() < 1e-9);
    }

    #[test]
    fn shifted_delta_is_read_back() {
        let dgp = DgpSpec::general_sec52(0, 0);
        let src = oracle(&dgp);
        let c = corrupt_nuisance(oracle(&dgp), &[Component::Delta]).unwrap();
        let x = [0.5, 0.5];
        let (e, t) = (c.evaluate(&x), src.evaluate(&x));
        for z in 0..4 {
            assert!((e.delta(z).unwrap() - t.delta(z).unwrap() - CORRUPT_SHIFT).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn corrupted_rho_still_sums_to_one(x1 in 0.0..1.0f64, x2 in 0.0..1.0f64, mask in 0u8..32) {
            let dgp = DgpSpec::general_sec52(0, 0);
            let which: Vec<Component> = Component::ALL.iter().enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1).map(|(_, c)| *c).collect();
            let c = corrupt_nuisance(oracle(&dgp), &which).unwrap();
            let e = c.evaluate(&[x1, x2]);
            prop_assert!((e.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(e.pi_z.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }
}
