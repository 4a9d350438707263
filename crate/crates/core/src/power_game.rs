//! Energy-efficiency utility, target SINR and Nash-equilibrium power control.
//!
//! Each user maximizes its utility, the ratio of goodput to transmit power:
//! `u_k = R (L/M) f(gamma_k) / p_k`, with the packet-success approximation
//! `f(gamma) = (1 - e^{-gamma})^M`. The utility-maximizing operating point is
//! the target SINR `gamma_bar` solving `f(gamma) = gamma f'(gamma)`; the
//! best-response power is `min(gamma_bar I_k, P_max)` where `I_k` is the
//! user's effective interference. Six non-cooperative games are supported:
//! power-only, power+receiver and power+receiver+codes, each with linear or
//! widely-linear detection. Power-only games keep matched filters. Every
//! game admits a unique equilibrium; the code-optimizing widely-linear game
//! with `K <= 2N` ends interference-free, where each user transmits exactly
//! `gamma_bar N0 / h_k^2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use serde::{Deserialize, Serialize};

use crate::code_game::{CodeGame, IterationSchedule};
use crate::error::{Error, Result};
use crate::receivers::{
    hermitian_cholesky, linear_mmse, sinr_linear, sinr_wl_from_set, wl_mmse, LinearReceiver,
    WlReceiver,
};
use crate::scenario::{
    augmented_covariance_from_set, covariance, AugmentedSet, Scenario, SpreadingMatrix,
};
use crate::Detection;

// ---------------------------------------------------------------------------
// Utility and target SINR
// ---------------------------------------------------------------------------

/// Packet and rate parameters entering the utility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UtilityConfig {
    /// Symbols per packet (`M`).
    pub packet_len: usize,
    /// Information symbols per packet (`L <= M`).
    pub info_len: usize,
    /// Transmission rate in bit/s (`R`). Rescales every utility uniformly.
    pub rate: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            packet_len: 120,
            info_len: 120,
            rate: 1e5,
        }
    }
}

impl UtilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.info_len == 0 || self.info_len > self.packet_len {
            return Err(Error::Validation(format!(
                "info_len must lie in [1, packet_len], got {} vs {}",
                self.info_len, self.packet_len
            )));
        }
        if !(self.rate > 0.0) {
            return Err(Error::Validation("rate must be positive".into()));
        }
        Ok(())
    }

    /// `R L / M`, the throughput prefactor of the utility.
    pub fn throughput_scale(&self) -> f64 {
        self.rate * self.info_len as f64 / self.packet_len as f64
    }
}

/// Packet-success efficiency `f(gamma) = (1 - e^{-gamma})^M`: increasing,
/// S-shaped, `f(0) = 0`, approaching one for large SINR.
pub fn efficiency(gamma: f64, packet_len: usize) -> f64 {
    debug_assert!(gamma >= 0.0);
    (1.0 - (-gamma).exp()).powi(packet_len as i32)
}

fn efficiency_derivative(gamma: f64, packet_len: usize) -> f64 {
    let m = packet_len as f64;
    let e = (-gamma).exp();
    m * (1.0 - e).powi(packet_len as i32 - 1) * e
}

/// Utility-maximizing SINR target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSinr {
    pub gamma_bar: f64,
}

/// Solves `f(gamma) = gamma f'(gamma)` for the packet-success efficiency,
/// which reduces to `e^gamma = 1 + M gamma`. The positive root is unique;
/// `M = 1` degenerates to `gamma = 0` and is rejected.
pub fn solve_target_sinr(packet_len: usize) -> Result<TargetSinr> {
    if packet_len < 2 {
        return Err(Error::Validation(
            "target-SINR equation degenerates for packets shorter than 2 symbols".into(),
        ));
    }
    let m = packet_len as f64;
    let g = |x: f64| x.exp() - 1.0 - m * x;
    // g < 0 just right of zero and grows without bound: bracket and bisect.
    let mut lo = 1e-9;
    let mut hi = 2.0 * m.ln() + 10.0;
    debug_assert!(g(lo) < 0.0 && g(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    let gamma_bar = 0.5 * (lo + hi);
    let residual = efficiency(gamma_bar, packet_len)
        - gamma_bar * efficiency_derivative(gamma_bar, packet_len);
    if residual.abs() >= 1e-10 {
        return Err(Error::NoConvergence {
            context: "solve_target_sinr",
            iterations: 200,
        });
    }
    Ok(TargetSinr { gamma_bar })
}

/// Energy efficiency in bit/Joule: `R (L/M) f(gamma) / p`.
pub fn utility(power: f64, gamma: f64, config: &UtilityConfig) -> Result<f64> {
    config.validate()?;
    if !(power > 0.0) {
        return Err(Error::Validation(format!(
            "utility needs positive power, got {power}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Validation(format!("negative SINR {gamma}")));
    }
    Ok(config.throughput_scale() * efficiency(gamma, config.packet_len) / power)
}

// ---------------------------------------------------------------------------
// Effective interference and best response
// ---------------------------------------------------------------------------

/// Effective interference of user `k` under linear detection: the quantity
/// `I_k` such that the output SINR equals `p_k / I_k`. Independent of the
/// user's own power and of any positive receiver scaling.
pub fn effective_interference_linear(
    scenario: &Scenario,
    codes: &SpreadingMatrix,
    receiver: &LinearReceiver,
    k: usize,
) -> Result<f64> {
    let d = receiver.vector();
    let h_sq = scenario.gain(k) * scenario.gain(k);
    let desired = d.dotc(&codes.code(k)).norm_sqr();
    if desired <= 0.0 {
        return Err(Error::Validation(format!(
            "user {k}: receiver is orthogonal to the desired signature"
        )));
    }
    let mut num = 2.0 * scenario.noise_psd() * d.norm_squared();
    for i in 0..scenario.n_users() {
        if i != k {
            num += scenario.received_power(i) * d.dotc(&codes.code(i)).norm_sqr();
        }
    }
    Ok(num / (h_sq * desired))
}

/// Effective interference of user `k` under widely-linear detection.
pub fn effective_interference_wl(
    scenario: &Scenario,
    aug: &AugmentedSet,
    receiver: &WlReceiver,
    k: usize,
) -> Result<f64> {
    let d = receiver.vector();
    let h_sq = scenario.gain(k) * scenario.gain(k);
    let desired = d.dotc(&aug.signature(k)).norm_sqr();
    if desired <= 0.0 {
        return Err(Error::Validation(format!(
            "user {k}: receiver is orthogonal to the desired signature"
        )));
    }
    let mut num = 2.0 * scenario.noise_psd() * d.norm_squared();
    for i in 0..scenario.n_users() {
        if i != k {
            num += scenario.augmented_received_power(i) * d.dotc(&aug.signature(i)).norm_sqr();
        }
    }
    Ok(num / (2.0 * h_sq * desired))
}

/// Utility-maximizing power for effective interference `i_k`:
/// `min(gamma_bar * i_k, p_max)`.
pub fn best_response_power(i_k: f64, gamma_bar: f64, p_max: f64) -> f64 {
    (gamma_bar * i_k).min(p_max)
}

/// Best utility reachable by scanning `points` powers in `(0, p_max]` at
/// fixed effective interference. Used to probe equilibria for profitable
/// unilateral deviations.
pub fn scan_power_deviation(
    i_k: f64,
    p_max: f64,
    config: &UtilityConfig,
    points: usize,
) -> (f64, f64) {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for j in 1..=points {
        let p = p_max * j as f64 / points as f64;
        let u = config.throughput_scale() * efficiency(p / i_k, config.packet_len) / p;
        if u > best.1 {
            best = (p, u);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Game variants and outcomes
// ---------------------------------------------------------------------------

/// The six supported non-cooperative energy-efficiency games: adjustable
/// power (P), power+receiver (PR) or power+receiver+codes (PRC), combined
/// with linear or widely-linear detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GameVariant {
    #[serde(rename = "P-linear")]
    PowerLinear,
    #[serde(rename = "PR-linear")]
    PowerReceiverLinear,
    #[serde(rename = "PRC-linear")]
    PowerReceiverCodesLinear,
    #[serde(rename = "P-WL")]
    PowerWl,
    #[serde(rename = "PR-WL")]
    PowerReceiverWl,
    #[serde(rename = "PRC-WL")]
    PowerReceiverCodesWl,
}

impl GameVariant {
    pub const ALL: [GameVariant; 6] = [
        GameVariant::PowerLinear,
        GameVariant::PowerReceiverLinear,
        GameVariant::PowerReceiverCodesLinear,
        GameVariant::PowerWl,
        GameVariant::PowerReceiverWl,
        GameVariant::PowerReceiverCodesWl,
    ];

    pub fn detection(&self) -> Detection {
        match self {
            GameVariant::PowerLinear
            | GameVariant::PowerReceiverLinear
            | GameVariant::PowerReceiverCodesLinear => Detection::Linear,
            _ => Detection::WidelyLinear,
        }
    }

    /// Power-only games keep matched filters; the rest adapt MMSE receivers.
    pub fn adapts_receiver(&self) -> bool {
        !matches!(self, GameVariant::PowerLinear | GameVariant::PowerWl)
    }

    pub fn adapts_codes(&self) -> bool {
        matches!(
            self,
            GameVariant::PowerReceiverCodesLinear | GameVariant::PowerReceiverCodesWl
        )
    }
}

impl fmt::Display for GameVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GameVariant::PowerLinear => "P-linear",
            GameVariant::PowerReceiverLinear => "PR-linear",
            GameVariant::PowerReceiverCodesLinear => "PRC-linear",
            GameVariant::PowerWl => "P-WL",
            GameVariant::PowerReceiverWl => "PR-WL",
            GameVariant::PowerReceiverCodesWl => "PRC-WL",
        };
        write!(f, "{s}")
    }
}

impl FromStr for GameVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P-linear" => Ok(GameVariant::PowerLinear),
            "PR-linear" => Ok(GameVariant::PowerReceiverLinear),
            "PRC-linear" => Ok(GameVariant::PowerReceiverCodesLinear),
            "P-WL" => Ok(GameVariant::PowerWl),
            "PR-WL" => Ok(GameVariant::PowerReceiverWl),
            "PRC-WL" => Ok(GameVariant::PowerReceiverCodesWl),
            other => Err(Error::Validation(format!("unknown game variant '{other}'"))),
        }
    }
}

/// Round budget and stopping thresholds for the synchronous best-response
/// rounds.
#[derive(Debug, Clone, Copy)]
pub struct GameSchedule {
    pub max_rounds: usize,
    /// Largest relative per-round power change accepted at convergence.
    pub power_tol: f64,
    /// Largest per-round code movement (angle) accepted at convergence, for
    /// code-adapting variants.
    pub code_tol: f64,
}

impl Default for GameSchedule {
    fn default() -> Self {
        Self {
            max_rounds: 10_000,
            power_tol: 1e-8,
            code_tol: 1e-7,
        }
    }
}

/// Equilibrium quantities of one user.
#[derive(Debug, Clone, Copy)]
pub struct UserOutcome {
    pub power: f64,
    pub sinr: f64,
    pub mse: f64,
    pub utility: f64,
    pub at_max_power: bool,
}

/// Result of a full game run.
#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub variant: GameVariant,
    pub users: Vec<UserOutcome>,
    pub rounds: usize,
    pub converged: bool,
    /// Final spreading codes (equal to the input codes unless the variant
    /// adapts them).
    pub codes: SpreadingMatrix,
}

impl GameOutcome {
    pub fn mean_utility(&self) -> f64 {
        self.users.iter().map(|u| u.utility).sum::<f64>() / self.users.len() as f64
    }

    pub fn mean_power(&self) -> f64 {
        self.users.iter().map(|u| u.power).sum::<f64>() / self.users.len() as f64
    }

    pub fn mean_sinr(&self) -> f64 {
        self.users.iter().map(|u| u.sinr).sum::<f64>() / self.users.len() as f64
    }

    pub fn fraction_at_max(&self) -> f64 {
        self.users.iter().filter(|u| u.at_max_power).count() as f64 / self.users.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Game engine
// ---------------------------------------------------------------------------

enum VariantState {
    Linear { codes: SpreadingMatrix },
    Wl { aug: AugmentedSet },
}

/// Effective interference of every user when each employs its own MMSE
/// receiver for the current powers and codes, through one Cholesky
/// factorization: with `q_k = s_k^H Cov^{-1} s_k` and weight `c_k`, the MMSE
/// SINR is `c_k q_k / (1 - c_k q_k)`.
fn mmse_interference(scenario: &Scenario, state: &VariantState) -> Vec<f64> {
    let k_users = scenario.n_users();
    let mut out = Vec::with_capacity(k_users);
    match state {
        VariantState::Wl { aug } => {
            let ma = augmented_covariance_from_set(scenario, aug);
            let chol = hermitian_cholesky(&ma);
            let solved = chol.solve(aug.matrix());
            for k in 0..k_users {
                let q = aug.matrix().column(k).dotc(&solved.column(k)).re;
                let c = scenario.augmented_received_power(k);
                let gamma = (c * q) / (1.0 - c * q);
                out.push(scenario.power(k) / gamma);
            }
        }
        VariantState::Linear { codes } => {
            let m = covariance(scenario, codes).expect("dimensions validated at entry");
            let chol = hermitian_cholesky(&m);
            let solved = chol.solve(codes.matrix());
            for k in 0..k_users {
                let q = codes.matrix().column(k).dotc(&solved.column(k)).re;
                let c = scenario.received_power(k);
                let gamma = (c * q) / (1.0 - c * q);
                out.push(scenario.power(k) / gamma);
            }
        }
    }
    out
}

/// Effective interference of every user under fixed matched filters, from
/// precomputed squared cross-correlations.
fn matched_interference(
    scenario: &Scenario,
    cross: &DMatrix<f64>,
    detection: Detection,
) -> Vec<f64> {
    let k_users = scenario.n_users();
    let mut out = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let h_sq = scenario.gain(k) * scenario.gain(k);
        let mut num = 2.0 * scenario.noise_psd();
        for i in 0..k_users {
            if i != k {
                let w = match detection {
                    Detection::Linear => scenario.received_power(i),
                    Detection::WidelyLinear => scenario.augmented_received_power(i),
                };
                num += w * cross[(k, i)];
            }
        }
        let denom = match detection {
            Detection::Linear => h_sq,
            Detection::WidelyLinear => 2.0 * h_sq,
        };
        out.push(num / denom);
    }
    out
}

/// Runs one energy-efficiency game to its Nash equilibrium with synchronous
/// best-response rounds: code-adapting variants perform one code/receiver
/// sweep per round, receiver-adapting variants refresh every MMSE filter,
/// then all users update their powers simultaneously.
///
/// `codes0` provides the fixed codes of non-code-adapting variants and the
/// starting point of code-adapting ones; initial powers are taken from the
/// scenario.
pub fn run_ee_game(
    scenario: &Scenario,
    codes0: &SpreadingMatrix,
    variant: GameVariant,
    utility_config: &UtilityConfig,
    schedule: &GameSchedule,
) -> Result<GameOutcome> {
    utility_config.validate()?;
    let gamma_bar = solve_target_sinr(utility_config.packet_len)?.gamma_bar;
    let k_users = scenario.n_users();
    let detection = variant.detection();

    let mut powers = scenario.powers().to_vec();
    let mut sc = scenario.clone();
    let mut code_game = if variant.adapts_codes() {
        Some(CodeGame::new(&sc, codes0, detection)?)
    } else {
        None
    };

    // Fixed matched-filter cross-correlations for the power-only games.
    let matched_cross = if !variant.adapts_receiver() {
        let mut cross = DMatrix::<f64>::zeros(k_users, k_users);
        match detection {
            Detection::Linear => {
                for i in 0..k_users {
                    for j in 0..k_users {
                        cross[(i, j)] = codes0.code(i).dotc(&codes0.code(j)).norm_sqr();
                    }
                }
            }
            Detection::WidelyLinear => {
                let aug = AugmentedSet::from_codes(&sc, codes0)?;
                for i in 0..k_users {
                    for j in 0..k_users {
                        cross[(i, j)] = aug.signature(i).dotc(&aug.signature(j)).norm_sqr();
                    }
                }
            }
        }
        Some(cross)
    } else {
        None
    };

    let mut converged = false;
    let mut rounds = 0;
    let mut best_residual = f64::INFINITY;
    let mut best_residual_round = 0;
    while rounds < schedule.max_rounds {
        rounds += 1;
        sc = sc.with_powers(powers.clone())?;

        // Code-adapting variants re-solve the code/receiver subgame at the
        // current powers (warm-started from the previous round), with the
        // noisy escape enabled so the subgame lands on its global optimum,
        // which is unique at the Gram level. Interleaving single sweeps
        // instead can lock the joint dynamics into a limit cycle when many
        // capped users share a scarce signal space.
        let codes_settled = if let Some(game) = code_game.as_mut() {
            game.set_powers(powers.clone())?;
            let inner = IterationSchedule {
                max_sweeps: 200,
                tol: schedule.code_tol,
                perturbation_eps: 1e-4,
                record_trace: false,
                noise_seed: rounds as u64,
            };
            game.run(&inner)?.converged
        } else {
            true
        };

        let interference = if let Some(cross) = &matched_cross {
            matched_interference(&sc, cross, detection)
        } else {
            let state = match (&code_game, detection) {
                (Some(game), Detection::WidelyLinear) => VariantState::Wl {
                    aug: game.augmented(),
                },
                (Some(game), Detection::Linear) => VariantState::Linear { codes: game.codes() },
                (None, Detection::WidelyLinear) => VariantState::Wl {
                    aug: AugmentedSet::from_codes(&sc, codes0)?,
                },
                (None, Detection::Linear) => VariantState::Linear {
                    codes: codes0.clone(),
                },
            };
            mmse_interference(&sc, &state)
        };

        // Convergence is judged on the undamped best-response residual. The
        // first rounds apply the pure best response; if the joint dynamics
        // have not settled after many rounds (capped overloaded systems can
        // ping-pong between code regroupings), a geometric average breaks
        // the cycle without moving any fixed point.
        let damped = rounds > 200;
        let mut max_rel_change = 0.0_f64;
        for k in 0..k_users {
            let target = best_response_power(interference[k], gamma_bar, sc.max_power(k));
            max_rel_change =
                max_rel_change.max((target - powers[k]).abs() / powers[k].max(1e-300));
            powers[k] = if damped {
                (powers[k] * target).sqrt().min(sc.max_power(k))
            } else {
                target
            };
        }

        if max_rel_change < schedule.power_tol && codes_settled {
            converged = true;
            break;
        }
        // Overloaded capped systems can wedge at a discontinuity of the
        // code-regrouping map, where no pure best-response equilibrium is
        // attracting. Give up once the residual has stopped improving.
        if max_rel_change < best_residual {
            best_residual = max_rel_change;
            best_residual_round = rounds;
        } else if rounds > 1200 && rounds - best_residual_round > 600 {
            break;
        }
    }

    // Final per-user quantities at the equilibrium powers.
    sc = sc.with_powers(powers.clone())?;
    let final_codes = code_game
        .as_ref()
        .map(|g| g.codes())
        .unwrap_or_else(|| codes0.clone());
    let mut users = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let sinr = match (variant.adapts_receiver(), detection) {
            (true, Detection::WidelyLinear) => {
                let d = wl_mmse(&sc, &final_codes, k)?;
                let aug = AugmentedSet::from_codes(&sc, &final_codes)?;
                sinr_wl_from_set(&sc, &aug, &d, k)?
            }
            (true, Detection::Linear) => {
                let d = linear_mmse(&sc, &final_codes, k)?;
                sinr_linear(&sc, &final_codes, &d, k)?
            }
            (false, Detection::WidelyLinear) => {
                let aug = AugmentedSet::from_codes(&sc, &final_codes)?;
                let d = WlReceiver::new(aug.signature(k))?;
                sinr_wl_from_set(&sc, &aug, &d, k)?
            }
            (false, Detection::Linear) => {
                let d = LinearReceiver::new(final_codes.code(k))?;
                sinr_linear(&sc, &final_codes, &d, k)?
            }
        };
        let power = powers[k];
        users.push(UserOutcome {
            power,
            sinr,
            mse: 1.0 / (1.0 + sinr),
            utility: utility(power, sinr, utility_config)?,
            at_max_power: power >= sc.max_power(k),
        });
    }

    Ok(GameOutcome {
        variant,
        users,
        rounds,
        converged,
        codes: final_codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_codes, CodeKind};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GAMMA_BAR_120: f64 = 6.689236490525919; // root of e^g = 1 + 120 g

    #[test]
    fn efficiency_reference_values() {
        assert_eq!(efficiency(0.0, 120), 0.0);
        assert!((efficiency(50.0, 120) - 1.0).abs() < 1e-12);
        // High-precision evaluation of (1 - e^{-6.689})^120.
        assert!((efficiency(6.689, 120) - 0.8611933724091176).abs() < 1e-12);
        // Increasing in gamma.
        let mut prev = -1.0;
        for i in 0..60 {
            let v = efficiency(i as f64 * 0.25, 120);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn target_sinr_reference_values() {
        let t = solve_target_sinr(120).unwrap();
        assert!((t.gamma_bar - 6.689).abs() < 1e-3);
        assert!((10.0 * t.gamma_bar.log10() - 8.25).abs() < 0.01);
        assert!((t.gamma_bar - GAMMA_BAR_120).abs() < 1e-9);

        let t2 = solve_target_sinr(2).unwrap();
        assert!((t2.gamma_bar - 1.2564312086261697).abs() < 1e-9);

        assert!(solve_target_sinr(1).is_err());
    }

    #[test]
    fn target_sinr_root_is_unique_sign_change() {
        // e^g - 1 - M g changes sign exactly once on (0, inf).
        for m in [2usize, 10, 120, 1000] {
            let root = solve_target_sinr(m).unwrap().gamma_bar;
            let g = |x: f64| x.exp() - 1.0 - m as f64 * x;
            let mut sign_changes = 0;
            let mut prev = g(1e-9);
            let mut x = 1e-9;
            while x < root * 4.0 {
                x *= 1.07;
                let cur = g(x);
                if prev.signum() != cur.signum() {
                    sign_changes += 1;
                }
                prev = cur;
            }
            assert_eq!(sign_changes, 1, "M={m}");
        }
    }

    #[test]
    fn utility_reference_behavior() {
        let config = UtilityConfig::default();
        assert_eq!(utility(1.0, 0.0, &config).unwrap(), 0.0);
        let u1 = utility(1.0, 5.0, &config).unwrap();
        let u2 = utility(2.0, 5.0, &config).unwrap();
        assert!((u1 - 2.0 * u2).abs() < 1e-9 * u1);
        // Linear in R L / M.
        let double_rate = UtilityConfig {
            rate: 2e5,
            ..config
        };
        let ud = utility(1.0, 5.0, &double_rate).unwrap();
        assert!((ud - 2.0 * u1).abs() < 1e-9 * ud);
        assert!(utility(0.0, 1.0, &config).is_err());
    }

    #[test]
    fn best_response_reference_values() {
        assert_eq!(best_response_power(1.0, 2.0, 10.0), 2.0);
        assert_eq!(best_response_power(10.0, 2.0, 10.0), 10.0);
        // Continuity in the interference on a fine grid.
        let mut prev = best_response_power(0.01, 2.0, 10.0);
        for j in 1..1000 {
            let i_k = 0.01 + j as f64 * 0.01;
            let cur = best_response_power(i_k, 2.0, 10.0);
            assert!((cur - prev).abs() <= 0.021);
            prev = cur;
        }
    }

    #[test]
    fn effective_interference_matches_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for trial in 0..10u64 {
            let n = 4;
            let k_users = 6;
            let codes =
                generate_codes(n, k_users, CodeKind::ComplexGaussianNormalized, trial).unwrap();
            let powers: Vec<f64> = (0..k_users).map(|_| rng.gen_range(0.2..2.0)).collect();
            let gains: Vec<f64> = (0..k_users).map(|_| rng.gen_range(0.3..1.5)).collect();
            let phases: Vec<f64> = (0..k_users).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sc = Scenario::new(n, powers, gains, phases, 0.2, vec![10.0; k_users]).unwrap();
            let aug = AugmentedSet::from_codes(&sc, &codes).unwrap();
            for k in 0..k_users {
                let d = wl_mmse(&sc, &codes, k).unwrap();
                let i_k = effective_interference_wl(&sc, &aug, &d, k).unwrap();
                let gamma = sinr_wl_from_set(&sc, &aug, &d, k).unwrap();
                assert!((gamma * i_k - sc.power(k)).abs() < 1e-10 * sc.power(k));
                // Scaling the receiver leaves I_k unchanged.
                let scaled = WlReceiver::new(d.vector() * Complex64::new(3.0, 0.0)).unwrap();
                let i_scaled = effective_interference_wl(&sc, &aug, &scaled, k).unwrap();
                assert!((i_k - i_scaled).abs() < 1e-12 * i_k);

                let dl = linear_mmse(&sc, &codes, k).unwrap();
                let il = effective_interference_linear(&sc, &codes, &dl, k).unwrap();
                let gl = sinr_linear(&sc, &codes, &dl, k).unwrap();
                assert!((gl * il - sc.power(k)).abs() < 1e-10 * sc.power(k));
            }
        }
    }

    #[test]
    fn orthogonal_wl_interference_is_noise_only() {
        // d_a = s_a with orthogonal augmented signatures: I_k = N0 / h_k^2.
        let sc = Scenario::new(
            2,
            vec![1.0, 1.0],
            vec![2.0, 0.5],
            vec![0.0, 0.0],
            0.3,
            vec![10.0; 2],
        )
        .unwrap();
        let eye = DMatrix::<Complex64>::identity(2, 2);
        let codes = SpreadingMatrix::new(eye).unwrap();
        let aug = AugmentedSet::from_codes(&sc, &codes).unwrap();
        for k in 0..2 {
            let d = WlReceiver::new(aug.signature(k)).unwrap();
            let i_k = effective_interference_wl(&sc, &aug, &d, k).unwrap();
            let expect = sc.noise_psd() / (sc.gain(k) * sc.gain(k));
            assert!((i_k - expect).abs() < 1e-14 * expect.max(1.0));
        }
    }

    #[test]
    fn separability_utility_decreases_in_interference() {
        let config = UtilityConfig::default();
        let p = 0.5;
        let mut prev = f64::INFINITY;
        for j in 1..50 {
            let i_k = 0.01 * j as f64;
            let u = config.throughput_scale() * efficiency(p / i_k, config.packet_len) / p;
            assert!(u <= prev);
            prev = u;
        }
    }

    fn reference_scenario(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
        noise: f64,
        p_max: f64,
    ) -> Scenario {
        let gains: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
        let phases: Vec<f64> = (0..k)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        Scenario::new(n, vec![p_max; k], gains, phases, noise, vec![p_max; k]).unwrap()
    }

    #[test]
    fn single_user_games_reach_closed_forms() {
        // K=1: WL games give p* = gamma_bar N0 / h^2; linear games double it.
        let noise = 2.5e-10;
        let h = 1.3;
        let sc = Scenario::new(3, vec![1.0], vec![h], vec![0.7], noise, vec![1.0]).unwrap();
        let codes = generate_codes(3, 1, CodeKind::Binary, 1).unwrap();
        let config = UtilityConfig::default();
        let schedule = GameSchedule::default();
        for variant in GameVariant::ALL {
            let outcome = run_ee_game(&sc, &codes, variant, &config, &schedule).unwrap();
            assert!(outcome.converged, "{variant} did not converge");
            let expect = match variant.detection() {
                Detection::WidelyLinear => GAMMA_BAR_120 * noise / (h * h),
                Detection::Linear => 2.0 * GAMMA_BAR_120 * noise / (h * h),
            };
            let got = outcome.users[0].power;
            assert!(
                (got - expect).abs() < 1e-9 * expect,
                "{variant}: power {got} vs {expect}"
            );
            assert!((outcome.users[0].sinr - GAMMA_BAR_120).abs() < 1e-6 * GAMMA_BAR_120);
            assert!(!outcome.users[0].at_max_power);
        }
    }

    #[test]
    fn code_optimizing_wl_game_reaches_interference_free_equilibrium() {
        // K <= 2N with generous caps: every user lands exactly on
        // p* = gamma_bar N0 / h_k^2 at the target SINR.
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let n = 3;
        let k = 5;
        let noise = 2.5e-10;
        let sc = reference_scenario(&mut rng, n, k, noise, 1.0);
        let codes = generate_codes(n, k, CodeKind::Binary, 9).unwrap();
        let config = UtilityConfig::default();
        let outcome = run_ee_game(
            &sc,
            &codes,
            GameVariant::PowerReceiverCodesWl,
            &config,
            &GameSchedule::default(),
        )
        .unwrap();
        assert!(outcome.converged);
        for (k_idx, user) in outcome.users.iter().enumerate() {
            let expect = GAMMA_BAR_120 * noise / (sc.gain(k_idx) * sc.gain(k_idx));
            assert!(
                (user.power - expect).abs() < 1e-6 * expect,
                "user {k_idx}: {} vs {expect}",
                user.power
            );
            assert!((user.sinr - GAMMA_BAR_120).abs() < 1e-6 * GAMMA_BAR_120);
            assert!(!user.at_max_power);
        }
    }

    #[test]
    fn variant_utility_ordering_on_average() {
        // Monte-Carlo mean utilities: PRC-WL >= PR-WL >= PR-linear >= P-linear.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let config = UtilityConfig::default();
        let schedule = GameSchedule::default();
        let mut sums = [0.0_f64; 4];
        let variants = [
            GameVariant::PowerReceiverCodesWl,
            GameVariant::PowerReceiverWl,
            GameVariant::PowerReceiverLinear,
            GameVariant::PowerLinear,
        ];
        for trial in 0..20u64 {
            let sc = reference_scenario(&mut rng, 4, 6, 2.5e-10, 1.0);
            let codes = generate_codes(4, 6, CodeKind::Binary, 1000 + trial).unwrap();
            for (i, &v) in variants.iter().enumerate() {
                let outcome = run_ee_game(&sc, &codes, v, &config, &schedule).unwrap();
                sums[i] += outcome.mean_utility();
            }
        }
        assert!(
            sums[0] >= sums[1] && sums[1] >= sums[2] && sums[2] >= sums[3],
            "utility ordering violated: {sums:?}"
        );
    }

    #[test]
    fn no_profitable_unilateral_power_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let config = UtilityConfig::default();
        let schedule = GameSchedule::default();
        for trial in 0..3u64 {
            let n = 3;
            let k_users = 5;
            let sc = reference_scenario(&mut rng, n, k_users, 2.5e-10, 1e-7);
            let codes = generate_codes(n, k_users, CodeKind::Binary, 300 + trial).unwrap();
            for variant in GameVariant::ALL {
                let outcome = run_ee_game(&sc, &codes, variant, &config, &schedule).unwrap();
                let sc_final = sc
                    .with_powers(outcome.users.iter().map(|u| u.power).collect())
                    .unwrap();
                for k in 0..k_users {
                    let i_k = sc_final.power(k) / outcome.users[k].sinr;
                    let (_, best_u) =
                        scan_power_deviation(i_k, sc_final.max_power(k), &config, 1000);
                    let achieved = outcome.users[k].utility;
                    assert!(
                        best_u <= achieved * (1.0 + 1e-9),
                        "{variant}: user {k} could gain {best_u} over {achieved}"
                    );
                }
            }
        }
    }

    #[test]
    fn equilibrium_is_unique_across_initializations() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let config = UtilityConfig::default();
        let schedule = GameSchedule::default();
        let n = 3;
        let k_users = 5;
        let base = reference_scenario(&mut rng, n, k_users, 2.5e-10, 1.0);
        let codes = generate_codes(n, k_users, CodeKind::Binary, 77).unwrap();
        for variant in [
            GameVariant::PowerReceiverWl,
            GameVariant::PowerReceiverCodesWl,
        ] {
            let mut reference: Option<Vec<f64>> = None;
            let mut reference_gram: Option<DMatrix<Complex64>> = None;
            for _ in 0..3 {
                let init: Vec<f64> = (0..k_users).map(|_| rng.gen_range(1e-12..1.0)).collect();
                let sc = base.with_powers(init).unwrap();
                let outcome = run_ee_game(&sc, &codes, variant, &config, &schedule).unwrap();
                assert!(outcome.converged);
                let powers: Vec<f64> = outcome.users.iter().map(|u| u.power).collect();
                if let Some(ref expect) = reference {
                    for (got, want) in powers.iter().zip(expect) {
                        assert!(
                            (got - want).abs() < 1e-6 * want.max(1e-300),
                            "{variant}: {got} vs {want}"
                        );
                    }
                } else {
                    reference = Some(powers);
                }
                // Spreading-code uniqueness is meant through the Gram matrix.
                if variant.adapts_codes() {
                    let aug = AugmentedSet::from_codes(&base, &outcome.codes).unwrap();
                    let gram = aug.matrix().adjoint() * aug.matrix();
                    if let Some(ref expect) = reference_gram {
                        assert!((&gram - expect).norm() < 1e-5);
                    } else {
                        reference_gram = Some(gram);
                    }
                }
            }
        }
    }

    #[test]
    fn capped_users_fall_short_of_target() {
        // Tight power caps: some users saturate and miss gamma_bar, everyone
        // else hits it.
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let config = UtilityConfig::default();
        let schedule = GameSchedule::default();
        let n = 3;
        let k_users = 9; // heavy load for the linear receiver
        let sc = reference_scenario(&mut rng, n, k_users, 2.5e-10, 3e-9);
        let codes = generate_codes(n, k_users, CodeKind::Binary, 5).unwrap();
        let outcome = run_ee_game(
            &sc,
            &codes,
            GameVariant::PowerReceiverLinear,
            &config,
            &schedule,
        )
        .unwrap();
        assert!(outcome.converged);
        let mut saw_capped = false;
        for user in &outcome.users {
            if user.at_max_power {
                saw_capped = true;
                assert!(user.sinr < GAMMA_BAR_120);
            } else {
                assert!((user.sinr - GAMMA_BAR_120).abs() < 1e-6 * GAMMA_BAR_120);
            }
        }
        assert!(saw_capped, "expected at least one capped user");
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in GameVariant::ALL {
            let s = v.to_string();
            assert_eq!(GameVariant::from_str(&s).unwrap(), v);
        }
        assert!(GameVariant::from_str("bogus").is_err());
    }
}
