//! Transceiver optimization library for the uplink of a synchronous DS/CDMA
//! network with widely-linear (WL) detection.
//!
//! The received chip-rate vector is a superposition of `K` users, each with a
//! unit-norm spreading code, a complex flat-fading channel and a transmit
//! power, plus white Gaussian noise. Because the information symbols are
//! real (BPSK-like), the received signal is improper and a WL receiver that
//! jointly processes the data and their complex conjugate outperforms any
//! strictly linear filter. This crate models that system and solves several
//! non-cooperative optimization problems defined on it:
//!
//! - [`scenario`] — physical scenario (powers, channels, noise), spreading
//!   codes, augmented conjugate-structured signatures and the covariance
//!   matrices every other module consumes.
//! - [`receivers`] — linear and WL MMSE receive filters together with SINR
//!   and MSE evaluators for arbitrary receivers.
//! - [`code_game`] — best-response spreading-code/receiver iterations (linear
//!   and WL), fixed-point structure analysis, correlation metrics, oversized
//!   users, sum-capacity and total-MSE evaluation.
//! - [`power_game`] — energy-efficiency utility, the target-SINR equation and
//!   Nash-equilibrium computation for power / power+receiver /
//!   power+receiver+code games in both detection modes.
//! - [`lsa`] — large-system (random-matrix) prediction of powers, SINRs and
//!   utilities without running the games.
//!
//! All quantities are in SI units (watts, W/Hz); decibel conversions are left
//! to callers.

pub mod code_game;
pub mod error;
pub mod lsa;
pub mod power_game;
pub mod receivers;
pub mod scenario;

pub use error::{Error, Result};
pub use scenario::{
    AugmentedSet, AugmentedSignature, CodeKind, PowerDiagonal, Scenario, ScenarioConfig,
    SpreadingMatrix,
};

/// Detection structure at the access point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Detection {
    /// Conventional linear filtering of the received vector.
    Linear,
    /// Widely-linear filtering of the received vector and its conjugate.
    WidelyLinear,
}

impl std::fmt::Display for Detection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Detection::Linear => write!(f, "linear"),
            Detection::WidelyLinear => write!(f, "wl"),
        }
    }
}
