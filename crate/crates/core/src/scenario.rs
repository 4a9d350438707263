//! Physical scenario, spreading codes, augmented signatures and covariance
//! constructors.
//!
//! A scenario fixes the user count `K`, the processing gain `N`, per-user
//! transmit powers, real channel amplitudes `h_k`, channel phases `phi_k`,
//! the noise level and per-user power caps. Spreading codes are unit-norm
//! complex `N`-vectors. For widely-linear processing each code/phase pair is
//! embedded into a `2N`-dimensional *augmented signature*
//! `[s e^{j phi}; s* e^{-j phi}] / sqrt(2)`, whose lower half is the complex
//! conjugate of the upper half. Covariance matrices of the received vector
//! (and of its augmented counterpart) are assembled from these quantities.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm tolerance accepted when validating unit-norm inputs.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Tolerance on the conjugate-symmetry defect accepted when validating
/// augmented vectors.
pub const CONJUGATE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Static description of the uplink: user powers, channels, noise and caps.
///
/// Immutable after construction; power-control code produces updated copies
/// through [`Scenario::with_powers`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    n_users: usize,
    processing_gain: usize,
    /// Transmit powers, watts.
    powers: Vec<f64>,
    /// Real channel amplitudes `h_k > 0`.
    gains: Vec<f64>,
    /// Channel phases, radians.
    phases: Vec<f64>,
    /// One-sided noise level `N0`, W/Hz. The chip-rate noise covariance is
    /// `2 N0 I`.
    noise_psd: f64,
    /// Per-user maximum transmit powers, watts.
    max_powers: Vec<f64>,
}

impl Scenario {
    /// Builds a scenario, validating every invariant.
    pub fn new(
        processing_gain: usize,
        powers: Vec<f64>,
        gains: Vec<f64>,
        phases: Vec<f64>,
        noise_psd: f64,
        max_powers: Vec<f64>,
    ) -> Result<Self> {
        let n_users = powers.len();
        if n_users == 0 {
            return Err(Error::Validation("scenario needs at least one user".into()));
        }
        if processing_gain == 0 {
            return Err(Error::Validation("processing gain must be >= 1".into()));
        }
        for (name, v) in [("gains", &gains), ("phases", &phases), ("max_powers", &max_powers)] {
            if v.len() != n_users {
                return Err(Error::Dimension {
                    context: "Scenario::new",
                    expected: n_users,
                    actual: v.len(),
                });
            }
            let _ = name;
        }
        if !(noise_psd > 0.0) {
            return Err(Error::Validation(format!(
                "noise_psd must be positive, got {noise_psd}"
            )));
        }
        for k in 0..n_users {
            if !(powers[k] > 0.0 && powers[k] <= max_powers[k]) {
                return Err(Error::Validation(format!(
                    "user {k}: power {} outside (0, {}]",
                    powers[k], max_powers[k]
                )));
            }
            if !(gains[k] > 0.0) {
                return Err(Error::Validation(format!(
                    "user {k}: channel amplitude must be positive, got {}",
                    gains[k]
                )));
            }
            if !phases[k].is_finite() {
                return Err(Error::Validation(format!("user {k}: non-finite phase")));
            }
        }
        Ok(Self {
            n_users,
            processing_gain,
            powers,
            gains,
            phases,
            noise_psd,
            max_powers,
        })
    }

    /// Convenience constructor for unit channels and zero phases.
    pub fn with_unit_channels(
        processing_gain: usize,
        powers: Vec<f64>,
        noise_psd: f64,
        max_power: f64,
    ) -> Result<Self> {
        let k = powers.len();
        Scenario::new(
            processing_gain,
            powers,
            vec![1.0; k],
            vec![0.0; k],
            noise_psd,
            vec![max_power; k],
        )
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn processing_gain(&self) -> usize {
        self.processing_gain
    }

    pub fn power(&self, k: usize) -> f64 {
        self.powers[k]
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn gain(&self, k: usize) -> f64 {
        self.gains[k]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn phase(&self, k: usize) -> f64 {
        self.phases[k]
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn noise_psd(&self) -> f64 {
        self.noise_psd
    }

    pub fn max_power(&self, k: usize) -> f64 {
        self.max_powers[k]
    }

    pub fn max_powers(&self) -> &[f64] {
        &self.max_powers
    }

    /// Received power `p_k h_k^2` seen by a linear receiver.
    pub fn received_power(&self, k: usize) -> f64 {
        self.powers[k] * self.gains[k] * self.gains[k]
    }

    /// Received power `2 p_k h_k^2` of the augmented (widely-linear) model.
    pub fn augmented_received_power(&self, k: usize) -> f64 {
        2.0 * self.received_power(k)
    }

    /// Copy of the scenario with replaced transmit powers.
    pub fn with_powers(&self, powers: Vec<f64>) -> Result<Self> {
        Scenario::new(
            self.processing_gain,
            powers,
            self.gains.clone(),
            self.phases.clone(),
            self.noise_psd,
            self.max_powers.clone(),
        )
    }
}

/// Diagonal received-power weights of the two signal models: `d_k^2 = p_k
/// h_k^2` for linear processing and `a_k^2 = 2 p_k h_k^2` for the augmented
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDiagonal {
    pub a_sq: Vec<f64>,
    pub d_sq: Vec<f64>,
}

impl From<&Scenario> for PowerDiagonal {
    fn from(sc: &Scenario) -> Self {
        let d_sq: Vec<f64> = (0..sc.n_users()).map(|k| sc.received_power(k)).collect();
        let a_sq = d_sq.iter().map(|d| 2.0 * d).collect();
        PowerDiagonal { a_sq, d_sq }
    }
}

// ---------------------------------------------------------------------------
// Spreading codes
// ---------------------------------------------------------------------------

/// Distribution used to draw spreading codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeKind {
    /// Antipodal chips, every entry in `{-1/sqrt(N), +1/sqrt(N)}`.
    Binary,
    /// Circular complex Gaussian entries, column renormalized to unit norm.
    ComplexGaussianNormalized,
}

/// `N x K` matrix of unit-norm spreading codes, one column per user.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadingMatrix {
    m: DMatrix<Complex64>,
}

impl SpreadingMatrix {
    /// Wraps a matrix after checking that every column has unit norm.
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        if m.ncols() == 0 || m.nrows() == 0 {
            return Err(Error::Validation("empty spreading matrix".into()));
        }
        for k in 0..m.ncols() {
            let norm = m.column(k).norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Validation(format!(
                    "spreading code {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    pub fn n_chips(&self) -> usize {
        self.m.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.m.ncols()
    }

    pub fn code(&self, k: usize) -> DVector<Complex64> {
        self.m.column(k).into_owned()
    }

    /// Replaces column `k`, renormalizing it to unit norm.
    pub fn set_code(&mut self, k: usize, code: &DVector<Complex64>) -> Result<()> {
        if code.len() != self.m.nrows() {
            return Err(Error::Dimension {
                context: "SpreadingMatrix::set_code",
                expected: self.m.nrows(),
                actual: code.len(),
            });
        }
        let norm = code.norm();
        if norm == 0.0 {
            return Err(Error::Validation("zero spreading code".into()));
        }
        self.m.set_column(k, &(code / Complex64::new(norm, 0.0)));
        Ok(())
    }
}

/// Draws a random `N x K` spreading matrix, deterministic per seed.
pub fn generate_codes(n: usize, k: usize, kind: CodeKind, seed: u64) -> Result<SpreadingMatrix> {
    if n == 0 || k == 0 {
        return Err(Error::Validation(
            "generate_codes needs n >= 1 and k >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::<Complex64>::zeros(n, k);
    match kind {
        CodeKind::Binary => {
            let chip = 1.0 / (n as f64).sqrt();
            for col in 0..k {
                for row in 0..n {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    m[(row, col)] = Complex64::new(sign * chip, 0.0);
                }
            }
        }
        CodeKind::ComplexGaussianNormalized => {
            for col in 0..k {
                for row in 0..n {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    m[(row, col)] = Complex64::new(re, im);
                }
                let norm = m.column(col).norm();
                let scale = Complex64::new(1.0 / norm, 0.0);
                let scaled = m.column(col) * scale;
                m.set_column(col, &scaled);
            }
        }
    }
    SpreadingMatrix::new(m)
}

// ---------------------------------------------------------------------------
// Augmented signatures
// ---------------------------------------------------------------------------

/// Unit-norm `2N`-vector whose lower half is the conjugate of the upper half.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSignature {
    v: DVector<Complex64>,
}

impl AugmentedSignature {
    /// Validates conjugate structure and unit norm of a raw vector.
    pub fn new(v: DVector<Complex64>) -> Result<Self> {
        if v.len() % 2 != 0 || v.is_empty() {
            return Err(Error::Validation(
                "augmented signature length must be even and positive".into(),
            ));
        }
        let defect = conjugate_defect(&v);
        if defect > CONJUGATE_TOL {
            return Err(Error::Validation(format!(
                "vector is not conjugate-structured (defect {defect:.3e})"
            )));
        }
        let norm = v.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "augmented signature has norm {norm}, expected 1"
            )));
        }
        Ok(Self { v })
    }

    pub fn vector(&self) -> &DVector<Complex64> {
        &self.v
    }

    /// Upper `N` entries, equal to `s e^{j phi} / sqrt(2)`.
    pub fn upper(&self) -> DVector<Complex64> {
        let n = self.v.len() / 2;
        self.v.rows(0, n).into_owned()
    }
}

/// Largest entrywise deviation of the lower half from the conjugate of the
/// upper half.
pub fn conjugate_defect(v: &DVector<Complex64>) -> f64 {
    let n = v.len() / 2;
    (0..n)
        .map(|i| (v[n + i] - v[i].conj()).norm())
        .fold(0.0, f64::max)
}

/// Embeds a unit-norm code and a channel phase into the augmented domain:
/// `[s e^{j phi}; s* e^{-j phi}] / sqrt(2)`.
pub fn build_augmented_signature(s: &DVector<Complex64>, phi: f64) -> Result<AugmentedSignature> {
    let norm = s.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!(
            "code must have unit norm, got {norm}"
        )));
    }
    let n = s.len();
    let rot = Complex64::from_polar(1.0, phi);
    let scale = 1.0 / 2.0_f64.sqrt();
    let mut v = DVector::<Complex64>::zeros(2 * n);
    for i in 0..n {
        let upper = s[i] * rot * scale;
        v[i] = upper;
        v[n + i] = upper.conj();
    }
    AugmentedSignature::new(v)
}

/// `2N x K` matrix of augmented signatures (all columns conjugate-structured
/// with unit norm).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    m: DMatrix<Complex64>,
}

impl AugmentedSet {
    /// Wraps a raw matrix after validating every column.
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        for k in 0..m.ncols() {
            AugmentedSignature::new(m.column(k).into_owned())?;
        }
        Ok(Self { m })
    }

    /// Embeds every spreading code of `codes` with the scenario phases.
    pub fn from_codes(scenario: &Scenario, codes: &SpreadingMatrix) -> Result<Self> {
        check_dimensions(scenario, codes)?;
        let n = scenario.processing_gain();
        let k = scenario.n_users();
        let mut m = DMatrix::<Complex64>::zeros(2 * n, k);
        for u in 0..k {
            let sig = build_augmented_signature(&codes.code(u), scenario.phase(u))?;
            m.set_column(u, sig.vector());
        }
        Ok(Self { m })
    }

    /// Recovers the spreading codes by stripping phases from the upper halves.
    pub fn to_codes(&self, scenario: &Scenario) -> Result<SpreadingMatrix> {
        let n = self.m.nrows() / 2;
        let k = self.m.ncols();
        if k != scenario.n_users() || n != scenario.processing_gain() {
            return Err(Error::Dimension {
                context: "AugmentedSet::to_codes",
                expected: scenario.n_users(),
                actual: k,
            });
        }
        let sqrt2 = Complex64::new(2.0_f64.sqrt(), 0.0);
        let mut m = DMatrix::<Complex64>::zeros(n, k);
        for u in 0..k {
            let rot = Complex64::from_polar(1.0, -scenario.phase(u));
            for i in 0..n {
                m[(i, u)] = self.m[(i, u)] * rot * sqrt2;
            }
        }
        SpreadingMatrix::new(m)
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    pub fn signature(&self, k: usize) -> DVector<Complex64> {
        self.m.column(k).into_owned()
    }
}

// ---------------------------------------------------------------------------
// Covariance constructors
// ---------------------------------------------------------------------------

fn check_dimensions(scenario: &Scenario, codes: &SpreadingMatrix) -> Result<()> {
    if codes.n_users() != scenario.n_users() {
        return Err(Error::Dimension {
            context: "codes vs scenario users",
            expected: scenario.n_users(),
            actual: codes.n_users(),
        });
    }
    if codes.n_chips() != scenario.processing_gain() {
        return Err(Error::Dimension {
            context: "codes vs processing gain",
            expected: scenario.processing_gain(),
            actual: codes.n_chips(),
        });
    }
    Ok(())
}

/// Covariance of the received vector:
/// `M = sum_k p_k h_k^2 s_k s_k^H + 2 N0 I_N`. Hermitian positive definite
/// with minimum eigenvalue at least `2 N0`.
pub fn covariance(scenario: &Scenario, codes: &SpreadingMatrix) -> Result<DMatrix<Complex64>> {
    check_dimensions(scenario, codes)?;
    let n = scenario.processing_gain();
    let mut m = DMatrix::<Complex64>::identity(n, n) * Complex64::new(2.0 * scenario.noise_psd(), 0.0);
    for k in 0..scenario.n_users() {
        let w = Complex64::new(scenario.received_power(k), 0.0);
        let s = codes.code(k);
        m.gerc(w, &s, &s, Complex64::new(1.0, 0.0));
    }
    Ok(m)
}

/// Pseudo-covariance of the received vector:
/// `M' = sum_k p_k h_k^2 e^{2j phi_k} s_k s_k^T` (complex symmetric, not
/// Hermitian).
pub fn pseudo_covariance(
    scenario: &Scenario,
    codes: &SpreadingMatrix,
) -> Result<DMatrix<Complex64>> {
    check_dimensions(scenario, codes)?;
    let n = scenario.processing_gain();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for k in 0..scenario.n_users() {
        let w = Complex64::from_polar(scenario.received_power(k), 2.0 * scenario.phase(k));
        let s = codes.code(k);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += w * s[i] * s[j];
            }
        }
    }
    Ok(m)
}

/// Covariance of the augmented received vector:
/// `M_a = sum_k 2 p_k h_k^2 s_{k,a} s_{k,a}^H + 2 N0 I_{2N}`, equal to the
/// block matrix `[M M'; M'* M*]`.
pub fn augmented_covariance(
    scenario: &Scenario,
    codes: &SpreadingMatrix,
) -> Result<DMatrix<Complex64>> {
    let aug = AugmentedSet::from_codes(scenario, codes)?;
    Ok(augmented_covariance_from_set(scenario, &aug))
}

/// Same as [`augmented_covariance`] but from an existing augmented set.
pub fn augmented_covariance_from_set(scenario: &Scenario, aug: &AugmentedSet) -> DMatrix<Complex64> {
    let two_n = aug.matrix().nrows();
    let mut m =
        DMatrix::<Complex64>::identity(two_n, two_n) * Complex64::new(2.0 * scenario.noise_psd(), 0.0);
    for k in 0..aug.matrix().ncols() {
        let w = Complex64::new(scenario.augmented_received_power(k), 0.0);
        let s = aug.signature(k);
        m.gerc(w, &s, &s, Complex64::new(1.0, 0.0));
    }
    m
}

// ---------------------------------------------------------------------------
// Scenario generation
// ---------------------------------------------------------------------------

/// Parameters of a randomly generated single-cell scenario.
///
/// Users are dropped uniformly at random in a distance ring around the access
/// point; the complex channel of a user at distance `d` is a zero-mean
/// circular complex Gaussian with variance `d^{-decay_exponent}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub users: usize,
    pub processing_gain: usize,
    /// Noise level `N0` in W/Hz.
    pub noise_psd: f64,
    /// Common maximum transmit power in watts.
    pub p_max: f64,
    /// Minimum and maximum user distance from the access point, meters.
    pub distance_range: (f64, f64),
    /// Channel-variance decay exponent: variance = `d^{-decay_exponent}`.
    /// 1.5 reproduces a `d^{-3/2}` law, 3.0 a `d^{-3}` law.
    pub decay_exponent: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            users: 10,
            processing_gain: 11,
            noise_psd: 2.5e-10,
            p_max: 1.0,
            distance_range: (10.0, 500.0),
            decay_exponent: 1.5,
        }
    }
}

/// Draws a scenario from the configured distributions, deterministic per
/// seed. Initial transmit powers are set to `p_max`.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    let (d_min, d_max) = config.distance_range;
    if !(d_min > 0.0 && d_max >= d_min) {
        return Err(Error::Validation(format!(
            "invalid distance range [{d_min}, {d_max}]"
        )));
    }
    if config.users == 0 || config.processing_gain == 0 {
        return Err(Error::Validation("users and processing gain must be >= 1".into()));
    }
    if !(config.p_max > 0.0) {
        return Err(Error::Validation("p_max must be positive".into()));
    }
    if !(config.decay_exponent > 0.0) {
        return Err(Error::Validation("decay exponent must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gains = Vec::with_capacity(config.users);
    let mut phases = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        let d: f64 = if d_max > d_min {
            rng.gen_range(d_min..d_max)
        } else {
            d_min
        };
        let g = sample_complex_gaussian(&mut rng, d.powf(-config.decay_exponent));
        gains.push(g.norm());
        phases.push(g.arg());
    }
    Scenario::new(
        config.processing_gain,
        vec![config.p_max; config.users],
        gains,
        phases,
        config.noise_psd,
        vec![config.p_max; config.users],
    )
}

/// One draw of a zero-mean circular complex Gaussian with `E|g|^2 = variance`.
pub fn sample_complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let sigma = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(sigma * re, sigma * im)
}
