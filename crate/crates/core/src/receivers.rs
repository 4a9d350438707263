//! Linear and widely-linear MMSE receivers plus SINR/MSE evaluators.
//!
//! Receivers are returned unnormalized exactly as the closed forms state;
//! every consumer treats them as rays, and both SINR evaluators are invariant
//! to positive scaling. Covariance solves go through a Cholesky
//! factorization rather than explicit inversion; the noise floor `2 N0 I`
//! keeps the systems well conditioned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scenario::{augmented_covariance_from_set, covariance, AugmentedSet, Scenario, SpreadingMatrix};

/// Receive filter for one user under linear detection (`N`-vector).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReceiver {
    d: DVector<Complex64>,
}

impl LinearReceiver {
    pub fn new(d: DVector<Complex64>) -> Result<Self> {
        if d.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Validation("receiver has non-finite entries".into()));
        }
        Ok(Self { d })
    }

    pub fn vector(&self) -> &DVector<Complex64> {
        &self.d
    }
}

/// Receive filter for one user under widely-linear detection (`2N`-vector,
/// logically the stack of the direct and the conjugate branch filters).
#[derive(Debug, Clone, PartialEq)]
pub struct WlReceiver {
    d: DVector<Complex64>,
}

impl WlReceiver {
    pub fn new(d: DVector<Complex64>) -> Result<Self> {
        if d.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Validation("receiver has non-finite entries".into()));
        }
        Ok(Self { d })
    }

    pub fn vector(&self) -> &DVector<Complex64> {
        &self.d
    }
}

pub(crate) fn hermitian_cholesky(m: &DMatrix<Complex64>) -> Cholesky<Complex64, Dyn> {
    // The covariance matrices handled here are >= 2 N0 I by construction, so
    // the factorization cannot fail on valid inputs.
    Cholesky::new(m.clone()).expect("covariance matrix must be positive definite")
}

/// SINR-maximizing linear receiver `d_k = sqrt(p_k) h_k e^{j phi_k} M^{-1} s_k`.
pub fn linear_mmse(scenario: &Scenario, codes: &SpreadingMatrix, k: usize) -> Result<LinearReceiver> {
    let m = covariance(scenario, codes)?;
    let chol = hermitian_cholesky(&m);
    let mut d = chol.solve(&codes.code(k));
    let w = Complex64::from_polar(scenario.power(k).sqrt() * scenario.gain(k), scenario.phase(k));
    d *= w;
    LinearReceiver::new(d)
}

/// SINR-maximizing widely-linear receiver
/// `d_{k,a} = sqrt(2 p_k) h_k M_a^{-1} s_{k,a}`.
pub fn wl_mmse(scenario: &Scenario, codes: &SpreadingMatrix, k: usize) -> Result<WlReceiver> {
    let aug = AugmentedSet::from_codes(scenario, codes)?;
    let ma = augmented_covariance_from_set(scenario, &aug);
    let chol = hermitian_cholesky(&ma);
    let mut d = chol.solve(&aug.signature(k));
    let w = Complex64::new((2.0 * scenario.power(k)).sqrt() * scenario.gain(k), 0.0);
    d *= w;
    WlReceiver::new(d)
}

/// Output SINR of an arbitrary linear receiver:
/// `p_k h_k^2 |d^H s_k|^2 / (2 N0 ||d||^2 + sum_{i!=k} p_i h_i^2 |d^H s_i|^2)`.
pub fn sinr_linear(
    scenario: &Scenario,
    codes: &SpreadingMatrix,
    receiver: &LinearReceiver,
    k: usize,
) -> Result<f64> {
    let d = receiver.vector();
    if codes.n_chips() != d.len() {
        return Err(Error::Dimension {
            context: "sinr_linear receiver",
            expected: codes.n_chips(),
            actual: d.len(),
        });
    }
    let norm_sq = d.norm_squared();
    if norm_sq == 0.0 {
        return Err(Error::Validation("zero receiver".into()));
    }
    let mut interference = 2.0 * scenario.noise_psd() * norm_sq;
    let mut signal = 0.0;
    for i in 0..scenario.n_users() {
        let proj = d.dotc(&codes.code(i)).norm_sqr();
        if i == k {
            signal = scenario.received_power(i) * proj;
        } else {
            interference += scenario.received_power(i) * proj;
        }
    }
    Ok(signal / interference)
}

/// Output SINR of an arbitrary widely-linear receiver (augmented model):
/// `2 p_k h_k^2 |d_a^H s_{k,a}|^2 / (2 N0 ||d_a||^2 + sum_{i!=k} 2 p_i h_i^2 |d_a^H s_{i,a}|^2)`.
pub fn sinr_wl(
    scenario: &Scenario,
    codes: &SpreadingMatrix,
    receiver: &WlReceiver,
    k: usize,
) -> Result<f64> {
    let aug = AugmentedSet::from_codes(scenario, codes)?;
    sinr_wl_from_set(scenario, &aug, receiver, k)
}

/// Same as [`sinr_wl`] but reusing an already-built augmented set.
pub fn sinr_wl_from_set(
    scenario: &Scenario,
    aug: &AugmentedSet,
    receiver: &WlReceiver,
    k: usize,
) -> Result<f64> {
    let d = receiver.vector();
    if aug.matrix().nrows() != d.len() {
        return Err(Error::Dimension {
            context: "sinr_wl receiver",
            expected: aug.matrix().nrows(),
            actual: d.len(),
        });
    }
    let norm_sq = d.norm_squared();
    if norm_sq == 0.0 {
        return Err(Error::Validation("zero receiver".into()));
    }
    let mut interference = 2.0 * scenario.noise_psd() * norm_sq;
    let mut signal = 0.0;
    for i in 0..scenario.n_users() {
        let proj = d.dotc(&aug.signature(i)).norm_sqr();
        if i == k {
            signal = scenario.augmented_received_power(i) * proj;
        } else {
            interference += scenario.augmented_received_power(i) * proj;
        }
    }
    Ok(signal / interference)
}

/// MSE of the MMSE-receiver decision statistic as a function of the achieved
/// SINR: `1 / (1 + gamma)`. Strictly decreasing, so minimizing the MSE and
/// maximizing the SINR pick the same argument.
pub fn mse_wl(gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Validation(format!(
            "SINR must be nonnegative, got {gamma}"
        )));
    }
    Ok(1.0 / (1.0 + gamma))
}
