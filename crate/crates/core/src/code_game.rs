//! Non-cooperative spreading-code/receiver best-response iterations and
//! fixed-point analysis.
//!
//! Each user alternately replaces its receive filter with the MMSE filter for
//! the current interference and its spreading code with the normalized
//! receiver, in a sequential (Gauss-Seidel) sweep over the users. The
//! widely-linear variant iterates on augmented signatures and monotonically
//! decreases the widely-linear total weighted squared correlation (WL-TWSC);
//! the linear variant does the same for the plain TWSC. At every fixed point
//! the signatures are eigenvectors of the received covariance; the stable
//! fixed point attains the correlation lower bound, with oversized users
//! receiving interference-free channels and the remaining users generalized
//! Welch-bound-equality sequences. Suboptimal fixed points are unstable, so
//! a small random perturbation applied when progress stalls lets the
//! iteration escape them.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::receivers::hermitian_cholesky;
use crate::scenario::{
    augmented_covariance_from_set, conjugate_defect, covariance, AugmentedSet, PowerDiagonal,
    Scenario, SpreadingMatrix, CONJUGATE_TOL,
};
use crate::Detection;

/// Relative eigenvalue gap above which two eigenvalues are treated as
/// belonging to distinct groups of a fixed-point partition.
const EIGEN_GROUP_GAP: f64 = 1e-6;

/// Relative distance from the correlation lower bound below which a state is
/// treated as globally optimal (used only to gate the noisy escape).
const OPTIMUM_REL_GAP: f64 = 1e-5;

/// Relative per-sweep decrease of the correlation objective below which the
/// iteration counts as stalled.
const STALL_REL_DECREASE: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Schedule and report types
// ---------------------------------------------------------------------------

/// Iteration budget and convergence/escape policy for a code-game run.
#[derive(Debug, Clone)]
pub struct IterationSchedule {
    /// Hard cap on full sweeps over the users.
    pub max_sweeps: usize,
    /// Convergence threshold on the sweep-to-sweep signature distance.
    pub tol: f64,
    /// Magnitude of the noisy update used to escape unstable fixed points;
    /// zero disables the escape entirely.
    pub perturbation_eps: f64,
    /// Record a per-sweep trace row in the report.
    pub record_trace: bool,
    /// Seed of the escape-perturbation stream.
    pub noise_seed: u64,
}

impl Default for IterationSchedule {
    fn default() -> Self {
        Self {
            max_sweeps: 5000,
            tol: 1e-9,
            perturbation_eps: 1e-4,
            record_trace: false,
            noise_seed: 0,
        }
    }
}

impl IterationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Validation("schedule tol must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Validation("max_sweeps must be >= 1".into()));
        }
        if !(self.perturbation_eps >= 0.0) {
            return Err(Error::Validation("perturbation_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// One per-sweep trace record.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub sweep: usize,
    pub wl_twsc: f64,
    pub twsc: f64,
    /// Extreme eigenvalues of the Gram matrix of the active variant
    /// (augmented signatures for WL, spreading codes for linear).
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub metric_d: f64,
}

/// Signatures sharing one eigenvalue of the weighted outer product
/// `S_a A S_a^H` at a fixed point.
#[derive(Debug, Clone)]
pub struct EigenGroup {
    pub lambda: f64,
    /// Users whose signatures are eigenvectors for this eigenvalue.
    pub users: Vec<usize>,
    /// Eigenvalue multiplicity (dimension of the eigenspace).
    pub multiplicity: usize,
}

/// Converged state of a code-game run plus its eigenstructure and figures of
/// merit.
#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub codes: SpreadingMatrix,
    /// Eigenvalues of `S_a A S_a^H`, sorted in descending order (length `2N`).
    pub eigenvalues: Vec<f64>,
    pub partition: Vec<EigenGroup>,
    pub wl_twsc: f64,
    pub tmmse: f64,
    pub c_sum: f64,
    pub sweeps_used: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Receiver/signature pair produced by one intermediate step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Unnormalized MMSE receiver of the updated user (dimension `2N` for WL,
    /// `N` for linear).
    pub receiver: DVector<Complex64>,
    /// The user's new unit-norm signature (augmented for WL, code for linear).
    pub signature: DVector<Complex64>,
}

// ---------------------------------------------------------------------------
// Correlation objectives
// ---------------------------------------------------------------------------

/// Widely-linear total weighted squared correlation:
/// `sum_ij p_i p_j h_i^2 h_j^2 |s_{i,a}^H s_{j,a}|^2`, never below
/// `tr(A^2)/4`.
pub fn wl_twsc(codes: &SpreadingMatrix, scenario: &Scenario) -> Result<f64> {
    let aug = AugmentedSet::from_codes(scenario, codes)?;
    Ok(wl_twsc_from_set(&aug, scenario))
}

pub(crate) fn wl_twsc_from_set(aug: &AugmentedSet, scenario: &Scenario) -> f64 {
    let k = scenario.n_users();
    let mut acc = 0.0;
    for i in 0..k {
        let si = aug.matrix().column(i);
        let wi = scenario.augmented_received_power(i);
        acc += 0.25 * wi * wi; // |s^H s|^2 = 1 on the diagonal
        for j in (i + 1)..k {
            let wj = scenario.augmented_received_power(j);
            let c = si.dotc(&aug.matrix().column(j)).norm_sqr();
            acc += 2.0 * 0.25 * wi * wj * c;
        }
    }
    acc
}

/// Linear total weighted squared correlation:
/// `sum_ij p_i p_j h_i^2 h_j^2 |s_i^H s_j|^2`.
pub fn twsc(codes: &SpreadingMatrix, scenario: &Scenario) -> Result<f64> {
    if codes.n_users() != scenario.n_users() || codes.n_chips() != scenario.processing_gain() {
        return Err(Error::Dimension {
            context: "twsc",
            expected: scenario.n_users(),
            actual: codes.n_users(),
        });
    }
    let k = scenario.n_users();
    let mut acc = 0.0;
    for i in 0..k {
        let si = codes.matrix().column(i);
        let wi = scenario.received_power(i);
        acc += wi * wi;
        for j in (i + 1)..k {
            let wj = scenario.received_power(j);
            let c = si.dotc(&codes.matrix().column(j)).norm_sqr();
            acc += 2.0 * wi * wj * c;
        }
    }
    Ok(acc)
}

/// Distance between two signature sets: the largest per-user angle
/// `arccos(s'_k^H s''_k)`. Defined only on conjugate-structured sets, where
/// the inner products are real; other inputs are rejected.
pub fn metric_d(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            context: "metric_d",
            expected: a.ncols(),
            actual: b.ncols(),
        });
    }
    let mut worst: f64 = 0.0;
    for k in 0..a.ncols() {
        let ca = a.column(k).into_owned();
        let cb = b.column(k).into_owned();
        if conjugate_defect(&ca) > CONJUGATE_TOL || conjugate_defect(&cb) > CONJUGATE_TOL {
            return Err(Error::Validation(format!(
                "metric_d: column {k} is not conjugate-structured"
            )));
        }
        let ip = ca.dotc(&cb);
        if ip.im.abs() > CONJUGATE_TOL {
            return Err(Error::Validation(format!(
                "metric_d: inner product of column {k} is not real ({:.3e})",
                ip.im
            )));
        }
        // arccos(Re ip) evaluated through the chord/half-angle form, which
        // stays accurate where acos loses all resolution (angles ~1e-8).
        let chord = (&ca - &cb).norm();
        let anti = (&ca + &cb).norm();
        worst = worst.max(2.0 * chord.atan2(anti));
    }
    Ok(worst)
}

/// Phase-invariant analog of [`metric_d`] used to judge convergence of the
/// linear iteration, whose update rotates every code by its channel phase.
fn metric_angle_phase_invariant(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..a.ncols() {
        let ca = a.column(k).into_owned();
        let cb = b.column(k).into_owned();
        let ip = ca.dotc(&cb);
        let mag = ip.norm();
        // Align the phase before taking the chord so the angle is measured
        // between rays rather than vectors.
        let aligned = if mag > 0.0 {
            &cb * (ip.conj() / Complex64::new(mag, 0.0))
        } else {
            cb.clone()
        };
        let chord = (&ca - &aligned).norm();
        let anti = (&ca + &aligned).norm();
        worst = worst.max(2.0 * chord.atan2(anti));
    }
    worst
}

// ---------------------------------------------------------------------------
// Oversized users and optimal spectra
// ---------------------------------------------------------------------------

/// Indices of oversized users for received powers `powers` and signal
/// dimension `m` (`N` for linear processing, `2N` for widely-linear), in
/// descending power order.
///
/// A user is oversized when its power exceeds the total power of strictly
/// weaker users divided by the dimensions left after removing users at least
/// as strong. The check runs in descending power order and stops at the
/// first non-oversized user; users at the global minimum power are never
/// oversized.
pub fn detect_oversized(powers: &[f64], m: usize) -> Vec<usize> {
    assert!(m >= 1, "dimension must be >= 1");
    assert!(
        powers.iter().all(|&p| p > 0.0),
        "received powers must be positive"
    );
    let mut order: Vec<usize> = (0..powers.len()).collect();
    order.sort_by(|&a, &b| powers[b].partial_cmp(&powers[a]).unwrap().then(a.cmp(&b)));
    let global_min = powers.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut oversized = Vec::new();
    for &idx in &order {
        let p = powers[idx];
        if p <= global_min {
            break;
        }
        let weaker_sum: f64 = powers.iter().filter(|&&q| q < p).sum();
        let at_least = powers.iter().filter(|&&q| q >= p).count();
        let denom = m as f64 - at_least as f64;
        if denom <= 0.0 || p <= weaker_sum / denom {
            break;
        }
        oversized.push(idx);
    }
    oversized
}

/// Eigenvalue profile of the optimal signature allocation over `m`
/// dimensions: each oversized user keeps its own received power on a private
/// dimension, the remaining power is spread evenly over the remaining
/// dimensions. For `K <= m` this is the padded sorted power vector. The
/// result sums to the total received power and is majorized by every
/// feasible spectrum.
pub fn optimal_eigenvalue_profile(powers: &[f64], m: usize) -> Vec<f64> {
    let k = powers.len();
    let mut profile = Vec::with_capacity(m);
    if k <= m {
        let mut sorted = powers.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        profile.extend_from_slice(&sorted);
        profile.resize(m, 0.0);
        return profile;
    }
    let oversized = detect_oversized(powers, m);
    let mut top: Vec<f64> = oversized.iter().map(|&i| powers[i]).collect();
    top.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let rest_sum: f64 = (0..k)
        .filter(|i| !oversized.contains(i))
        .map(|i| powers[i])
        .sum();
    let rest_dims = m - oversized.len();
    profile.extend_from_slice(&top);
    profile.extend(std::iter::repeat(rest_sum / rest_dims as f64).take(rest_dims));
    profile
}

/// Figures of merit computed from a weighted-correlation spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityMetrics {
    /// Sum capacity `sum_i ln(1 + lambda_i / 2 N0)` (nats).
    pub c_sum: f64,
    /// Total MMSE `K - sum_i lambda_i / (lambda_i + 2 N0)`.
    pub tmmse: f64,
    /// WL-TWSC `sum_i lambda_i^2 / 4`.
    pub wl_twsc: f64,
}

/// Evaluates sum capacity, total MMSE and WL-TWSC from the eigenvalues of
/// `S_a A S_a^H`. Eigenvalues below `-1e-9 * scale` are rejected; small
/// negative values from finite-precision eigensolves are clamped to zero.
pub fn capacity_metrics(
    eigenvalues: &[f64],
    noise_psd: f64,
    k_users: usize,
) -> Result<CapacityMetrics> {
    let scale = eigenvalues.iter().fold(1.0_f64, |m, &e| m.max(e.abs()));
    let two_n0 = 2.0 * noise_psd;
    let mut c_sum = 0.0;
    let mut tmmse = k_users as f64;
    let mut quad = 0.0;
    for &raw in eigenvalues {
        if raw < -1e-9 * scale {
            return Err(Error::Validation(format!(
                "negative eigenvalue {raw} in capacity_metrics"
            )));
        }
        let lambda = raw.max(0.0);
        c_sum += (1.0 + lambda / two_n0).ln();
        tmmse -= lambda / (lambda + two_n0);
        quad += lambda * lambda;
    }
    Ok(CapacityMetrics {
        c_sum,
        tmmse,
        wl_twsc: 0.25 * quad,
    })
}

/// Sum capacities of three systems sharing the same received powers: the
/// processing-gain-`N` system with widely-linear detection, a `2N`-chip
/// system with unconstrained complex codes and linear detection, and a
/// `2N`-chip real-coded system (whose capacity carries the usual 1/2 factor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumCapacities {
    pub wl: f64,
    pub complex_2n: f64,
    pub real_2n: f64,
}

/// Evaluates the three sum capacities at their respective optimal signature
/// allocations. All three systems have `2N` signal dimensions available, so
/// the widely-linear system gives up nothing against unconstrained complex
/// codes and achieves exactly twice the real-coded capacity.
pub fn sum_capacity_comparison(scenario: &Scenario) -> SumCapacities {
    let pd = PowerDiagonal::from(scenario);
    let two_n = 2 * scenario.processing_gain();
    let two_n0 = 2.0 * scenario.noise_psd();
    let profile = optimal_eigenvalue_profile(&pd.a_sq, two_n);
    let wl: f64 = profile.iter().map(|&l| (1.0 + l / two_n0).ln()).sum();

    // Unconstrained complex codes over 2N chips: for K <= 2N the optimum is
    // any orthonormal set, evaluated through the diagonal closed form;
    // beyond that the optimal spectrum coincides with the profile above.
    let complex_2n = if scenario.n_users() <= two_n {
        pd.a_sq.iter().map(|&a| (1.0 + a / two_n0).ln()).sum()
    } else {
        optimal_eigenvalue_profile(&pd.a_sq, two_n)
            .iter()
            .map(|&l| (1.0 + l / two_n0).ln())
            .sum()
    };

    // Real codes over 2N chips share the same optimal spectrum; their sum
    // capacity is defined with a factor 1/2.
    let real_2n = 0.5
        * optimal_eigenvalue_profile(&pd.a_sq, two_n)
            .iter()
            .map(|&l| (1.0 + l / two_n0).ln())
            .sum::<f64>();

    SumCapacities {
        wl,
        complex_2n,
        real_2n,
    }
}

// ---------------------------------------------------------------------------
// Code perturbation
// ---------------------------------------------------------------------------

/// Rotates every spreading code by a random angle of at most `eps` in its
/// stacked real/imaginary representation. The augmented-domain distance
/// between the original and perturbed sets is bounded by `eps`, columns stay
/// unit-norm and remain embeddable as augmented signatures.
pub fn perturb_codes(codes: &SpreadingMatrix, eps: f64, seed: u64) -> Result<SpreadingMatrix> {
    if !(eps > 0.0) {
        return Err(Error::Validation("perturbation eps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_codes_with(codes, eps, &mut rng)
}

fn perturb_codes_with(
    codes: &SpreadingMatrix,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SpreadingMatrix> {
    let n = codes.n_chips();
    let mut out = codes.matrix().clone();
    for k in 0..codes.n_users() {
        // Real representation of the code: [Re s; Im s], unit norm.
        let mut r = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            r[i] = out[(i, k)].re;
            r[n + i] = out[(i, k)].im;
        }
        // Random unit tangent direction.
        let mut u = DVector::<f64>::from_fn(2 * n, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        let proj = r.dot(&u);
        u -= &r * proj;
        let norm = u.norm();
        if norm < 1e-12 {
            continue; // vanishing tangent draw; leave the code unchanged
        }
        u /= norm;
        let theta = eps * rng.gen_range(0.0..=1.0);
        let rotated = &r * theta.cos() + &u * theta.sin();
        for i in 0..n {
            out[(i, k)] = Complex64::new(rotated[i], rotated[n + i]);
        }
    }
    SpreadingMatrix::new(out)
}

// ---------------------------------------------------------------------------
// Iteration engine
// ---------------------------------------------------------------------------

/// Best-response iteration state for one scenario, detection mode and code
/// set.
#[derive(Debug, Clone)]
pub struct CodeGame {
    scenario: Scenario,
    detection: Detection,
    /// Current codes, `N x K`.
    codes: DMatrix<Complex64>,
    /// Current augmented signatures, `2N x K` (maintained for both variants).
    aug: DMatrix<Complex64>,
    /// Active-domain covariance (`2N x 2N` for WL, `N x N` for linear).
    cov: DMatrix<Complex64>,
    sweeps_done: usize,
}

impl CodeGame {
    pub fn new(
        scenario: &Scenario,
        codes0: &SpreadingMatrix,
        detection: Detection,
    ) -> Result<Self> {
        let aug = AugmentedSet::from_codes(scenario, codes0)?;
        let cov = match detection {
            Detection::WidelyLinear => augmented_covariance_from_set(scenario, &aug),
            Detection::Linear => covariance(scenario, codes0)?,
        };
        Ok(Self {
            scenario: scenario.clone(),
            detection,
            codes: codes0.matrix().clone(),
            aug: aug.matrix().clone(),
            cov,
            sweeps_done: 0,
        })
    }

    pub fn detection(&self) -> Detection {
        self.detection
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps_done
    }

    /// Replaces the transmit powers (the power-control games interleave
    /// power updates with code sweeps). The covariance is rebuilt at the
    /// start of the next sweep.
    pub fn set_powers(&mut self, powers: Vec<f64>) -> Result<()> {
        self.scenario = self.scenario.with_powers(powers)?;
        Ok(())
    }

    pub fn codes(&self) -> SpreadingMatrix {
        SpreadingMatrix::new(self.codes.clone()).expect("iteration preserves unit norms")
    }

    pub fn augmented(&self) -> AugmentedSet {
        AugmentedSet::new(self.aug.clone()).expect("iteration preserves conjugate structure")
    }

    fn rebuild_covariance(&mut self) {
        let n = self.scenario.processing_gain();
        let k = self.scenario.n_users();
        match self.detection {
            Detection::WidelyLinear => {
                let mut m = DMatrix::<Complex64>::identity(2 * n, 2 * n)
                    * Complex64::new(2.0 * self.scenario.noise_psd(), 0.0);
                for u in 0..k {
                    let s = self.aug.column(u).into_owned();
                    m.gerc(
                        Complex64::new(self.scenario.augmented_received_power(u), 0.0),
                        &s,
                        &s,
                        Complex64::new(1.0, 0.0),
                    );
                }
                self.cov = m;
            }
            Detection::Linear => {
                let mut m = DMatrix::<Complex64>::identity(n, n)
                    * Complex64::new(2.0 * self.scenario.noise_psd(), 0.0);
                for u in 0..k {
                    let s = self.codes.column(u).into_owned();
                    m.gerc(
                        Complex64::new(self.scenario.received_power(u), 0.0),
                        &s,
                        &s,
                        Complex64::new(1.0, 0.0),
                    );
                }
                self.cov = m;
            }
        }
    }

    /// One intermediate step: replace user `k`'s receiver with its MMSE
    /// filter for the current interference and its signature with the
    /// normalized receiver. Returns the new receiver/signature pair.
    pub fn step_user(&mut self, k: usize) -> StepOutcome {
        let n = self.scenario.processing_gain();
        match self.detection {
            Detection::WidelyLinear => {
                let old = self.aug.column(k).into_owned();
                let chol = hermitian_cholesky(&self.cov);
                let x = chol.solve(&old);
                let scale = (2.0 * self.scenario.power(k)).sqrt() * self.scenario.gain(k);
                let receiver = &x * Complex64::new(scale, 0.0);
                let mut sig = x;
                let norm = sig.norm();
                sig /= Complex64::new(norm, 0.0);
                // Re-symmetrize: the solve preserves conjugate structure only
                // up to rounding, which would otherwise accumulate.
                for i in 0..n {
                    let avg = 0.5 * (sig[i] + sig[n + i].conj());
                    sig[i] = avg;
                    sig[n + i] = avg.conj();
                }
                let norm = sig.norm();
                sig /= Complex64::new(norm, 0.0);

                let w = Complex64::new(self.scenario.augmented_received_power(k), 0.0);
                self.cov.gerc(-w, &old, &old, Complex64::new(1.0, 0.0));
                self.cov.gerc(w, &sig, &sig, Complex64::new(1.0, 0.0));
                self.aug.set_column(k, &sig);
                let rot = Complex64::from_polar(2.0_f64.sqrt(), -self.scenario.phase(k));
                for i in 0..n {
                    self.codes[(i, k)] = sig[i] * rot;
                }
                StepOutcome {
                    receiver,
                    signature: sig,
                }
            }
            Detection::Linear => {
                let old = self.codes.column(k).into_owned();
                let chol = hermitian_cholesky(&self.cov);
                let x = chol.solve(&old);
                let w = Complex64::from_polar(
                    self.scenario.power(k).sqrt() * self.scenario.gain(k),
                    self.scenario.phase(k),
                );
                let receiver = &x * w;
                let mut code = &x * Complex64::from_polar(1.0, self.scenario.phase(k));
                let norm = code.norm();
                code /= Complex64::new(norm, 0.0);

                let dw = Complex64::new(self.scenario.received_power(k), 0.0);
                self.cov.gerc(-dw, &old, &old, Complex64::new(1.0, 0.0));
                self.cov.gerc(dw, &code, &code, Complex64::new(1.0, 0.0));
                self.codes.set_column(k, &code);
                let aug_col =
                    crate::scenario::build_augmented_signature(&code, self.scenario.phase(k))
                        .expect("normalized code embeds cleanly");
                self.aug.set_column(k, aug_col.vector());
                StepOutcome {
                    receiver,
                    signature: code,
                }
            }
        }
    }

    /// One full sweep over all users. Returns the signature distance between
    /// the state before and after the sweep.
    pub fn sweep(&mut self) -> f64 {
        self.rebuild_covariance();
        let before_aug = self.aug.clone();
        let before_codes = self.codes.clone();
        for k in 0..self.scenario.n_users() {
            self.step_user(k);
        }
        self.sweeps_done += 1;
        match self.detection {
            Detection::WidelyLinear => {
                metric_d(&before_aug, &self.aug).expect("iterates stay conjugate-structured")
            }
            Detection::Linear => metric_angle_phase_invariant(&before_codes, &self.codes),
        }
    }

    /// Correlation objective of the active variant.
    pub fn objective(&self) -> f64 {
        match self.detection {
            Detection::WidelyLinear => wl_twsc_from_set(&self.augmented(), &self.scenario),
            Detection::Linear => twsc(&self.codes(), &self.scenario).expect("dimensions fixed"),
        }
    }

    /// Global minimum of the active variant's correlation objective,
    /// evaluated from the optimal eigenvalue profile.
    pub fn objective_optimum(&self) -> f64 {
        let pd = PowerDiagonal::from(&self.scenario);
        match self.detection {
            Detection::WidelyLinear => {
                let profile =
                    optimal_eigenvalue_profile(&pd.a_sq, 2 * self.scenario.processing_gain());
                0.25 * profile.iter().map(|l| l * l).sum::<f64>()
            }
            Detection::Linear => {
                let profile =
                    optimal_eigenvalue_profile(&pd.d_sq, self.scenario.processing_gain());
                profile.iter().map(|l| l * l).sum::<f64>()
            }
        }
    }

    /// Extreme eigenvalues of the active variant's Gram matrix
    /// (`S_a^H S_a` for WL, `S^H S` for linear).
    pub fn gram_eigen_extremes(&self) -> (f64, f64) {
        let gram = match self.detection {
            Detection::WidelyLinear => self.aug.adjoint() * &self.aug,
            Detection::Linear => self.codes.adjoint() * &self.codes,
        };
        let eigs = gram.symmetric_eigenvalues();
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for e in eigs.iter() {
            min = min.min(*e);
            max = max.max(*e);
        }
        (min, max)
    }

    /// Eigenvalues of `S_a A S_a^H`, sorted in descending order.
    pub fn weighted_eigenvalues(&self) -> Vec<f64> {
        let mut eigs: Vec<f64> = self
            .weighted_outer_product()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eigs
    }

    fn weighted_outer_product(&self) -> DMatrix<Complex64> {
        let two_n = 2 * self.scenario.processing_gain();
        let mut w = DMatrix::<Complex64>::zeros(two_n, two_n);
        for u in 0..self.scenario.n_users() {
            let s = self.aug.column(u).into_owned();
            w.gerc(
                Complex64::new(self.scenario.augmented_received_power(u), 0.0),
                &s,
                &s,
                Complex64::new(1.0, 0.0),
            );
        }
        w
    }

    /// Applies the noisy escape update to the current codes.
    fn perturb(&mut self, eps: f64, rng: &mut ChaCha8Rng) {
        let codes = self.codes();
        let perturbed =
            perturb_codes_with(&codes, eps, rng).expect("perturbation preserves validity");
        self.codes = perturbed.matrix().clone();
        let aug = AugmentedSet::from_codes(&self.scenario, &perturbed)
            .expect("perturbed codes embed cleanly");
        self.aug = aug.matrix().clone();
    }

    /// Runs sweeps until the signature distance between consecutive sweeps
    /// drops below `schedule.tol`, escaping stalled suboptimal states with
    /// noisy updates when enabled.
    pub fn run(&mut self, schedule: &IterationSchedule) -> Result<FixedPointReport> {
        schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.noise_seed);
        let optimum = self.objective_optimum();
        let mut trace = Vec::new();
        let mut prev_objective = f64::INFINITY;
        let mut converged = false;

        for sweep in 1..=schedule.max_sweeps {
            let metric = self.sweep();
            let objective = self.objective();
            if schedule.record_trace {
                let (lmin, lmax) = self.gram_eigen_extremes();
                trace.push(TraceRow {
                    sweep,
                    wl_twsc: wl_twsc_from_set(&self.augmented(), &self.scenario),
                    twsc: twsc(&self.codes(), &self.scenario)?,
                    lambda_min: lmin,
                    lambda_max: lmax,
                    metric_d: metric,
                });
            }
            let at_optimum =
                objective - optimum <= OPTIMUM_REL_GAP * optimum.max(f64::MIN_POSITIVE);
            let stalled =
                prev_objective - objective < STALL_REL_DECREASE * objective.max(f64::MIN_POSITIVE);
            prev_objective = objective;

            if metric < schedule.tol {
                if schedule.perturbation_eps > 0.0 && !at_optimum {
                    self.perturb(schedule.perturbation_eps, &mut rng);
                    prev_objective = f64::INFINITY;
                } else {
                    converged = true;
                    break;
                }
            } else if stalled && schedule.perturbation_eps > 0.0 && !at_optimum {
                self.perturb(schedule.perturbation_eps, &mut rng);
                prev_objective = f64::INFINITY;
            }
        }

        self.report(converged, trace)
    }

    fn report(&self, converged: bool, trace: Vec<TraceRow>) -> Result<FixedPointReport> {
        let eigenvalues = self.weighted_eigenvalues();
        let metrics = capacity_metrics(
            &eigenvalues,
            self.scenario.noise_psd(),
            self.scenario.n_users(),
        )?;
        Ok(FixedPointReport {
            codes: self.codes(),
            partition: self.partition(&eigenvalues),
            wl_twsc: wl_twsc_from_set(&self.augmented(), &self.scenario),
            tmmse: metrics.tmmse,
            c_sum: metrics.c_sum,
            sweeps_used: self.sweeps_done,
            converged,
            trace,
            eigenvalues,
        })
    }

    /// Groups the spectrum of `S_a A S_a^H` by relative gaps and assigns each
    /// user to the group nearest its Rayleigh quotient.
    fn partition(&self, eigenvalues: &[f64]) -> Vec<EigenGroup> {
        let scale = eigenvalues.first().cloned().unwrap_or(1.0).max(1e-300);
        let mut groups: Vec<(f64, usize)> = Vec::new(); // (sum, count)
        for &l in eigenvalues {
            match groups.last_mut() {
                Some((sum, count))
                    if (*sum / *count as f64 - l).abs() <= EIGEN_GROUP_GAP * scale =>
                {
                    *sum += l;
                    *count += 1;
                }
                _ => groups.push((l, 1)),
            }
        }
        let mut out: Vec<EigenGroup> = groups
            .iter()
            .map(|&(sum, count)| EigenGroup {
                lambda: sum / count as f64,
                users: Vec::new(),
                multiplicity: count,
            })
            .collect();
        // The Rayleigh quotient of each signature against the weighted outer
        // product picks its eigenvalue group.
        let w = self.weighted_outer_product();
        for u in 0..self.scenario.n_users() {
            let s = self.aug.column(u).into_owned();
            let rho = s.dotc(&(&w * &s)).re;
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (g, group) in out.iter().enumerate() {
                let dist = (group.lambda - rho).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best = g;
                }
            }
            out[best].users.push(u);
        }
        out
    }
}

/// Runs the best-response iteration from `codes0` to a fixed point and
/// analyzes the result.
pub fn run_to_fixed_point(
    scenario: &Scenario,
    codes0: &SpreadingMatrix,
    schedule: &IterationSchedule,
    detection: Detection,
) -> Result<FixedPointReport> {
    let mut game = CodeGame::new(scenario, codes0, detection)?;
    game.run(schedule)
}
