//! Two-mode polarization algebra over the {H, V} basis.
//!
//! This module is the exact reference layer of the toolkit: rotated channel
//! eigenstates, polarization density matrices, and the waveplate measurement
//! bases are all evaluated with explicit complex arithmetic. Closed-form
//! expressions elsewhere in the crate are validated against these routines.
//!
//! All operations are pure functions of their inputs; every value is
//! immutable after construction and safe to share across threads.

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// States produced by this module are unit norm to well below this bound;
/// user-supplied measurement states are rejected beyond it.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("polarization degree p must lie in [-1, 1], got {0}")]
    PolarizationOutOfRange(f64),
    #[error("measurement state must be unit norm, got |M|^2 = {0}")]
    NotNormalized(f64),
}

/// Rotation θ and phase shift φ accumulated between the emitter and the
/// analyzer (fibre and other birefringent optics), in radians.
///
/// Any real angles are accepted here; fitted results are reduced to the
/// canonical ranges θ ∈ [0, π], φ ∈ (−π, π] by [`crate::fssfit::canonicalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub theta: f64,
    pub phi: f64,
}

impl ChannelParams {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Identity channel: no rotation, no phase.
    pub fn identity() -> Self {
        Self::new(0.0, 0.0)
    }
}

/// Which retarder sits in front of the fixed linear polarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WaveplateKind {
    Qwp,
    Hwp,
}

impl std::fmt::Display for WaveplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WaveplateKind::Qwp => write!(f, "QWP"),
            WaveplateKind::Hwp => write!(f, "HWP"),
        }
    }
}

impl std::str::FromStr for WaveplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "QWP" => Ok(WaveplateKind::Qwp),
            "HWP" => Ok(WaveplateKind::Hwp),
            other => Err(format!("unknown waveplate kind {other:?} (expected QWP or HWP)")),
        }
    }
}

/// A waveplate of the given kind at angle χ to the polarizer axis.
///
/// Both measurement states are π-periodic in χ, so χ is stored reduced
/// modulo π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveplateSetting {
    pub kind: WaveplateKind,
    chi: f64,
}

impl WaveplateSetting {
    pub fn new(kind: WaveplateKind, chi: f64) -> Self {
        Self { kind, chi: chi.rem_euclid(PI) }
    }

    pub fn qwp(chi: f64) -> Self {
        Self::new(WaveplateKind::Qwp, chi)
    }

    pub fn hwp(chi: f64) -> Self {
        Self::new(WaveplateKind::Hwp, chi)
    }

    /// Waveplate angle reduced to [0, π).
    pub fn chi(&self) -> f64 {
        self.chi
    }
}

/// A pure polarization state as complex amplitudes on {H, V}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub h: Complex64,
    pub v: Complex64,
}

impl JonesVector {
    pub fn new(h: Complex64, v: Complex64) -> Self {
        Self { h, v }
    }

    pub fn horizontal() -> Self {
        Self::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
    }

    pub fn vertical() -> Self {
        Self::new(Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0))
    }

    /// Inner product ⟨self|other⟩ (conjugate-linear in `self`).
    pub fn inner(&self, other: &JonesVector) -> Complex64 {
        self.h.conj() * other.h + self.v.conj() * other.v
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.norm_sqr() + self.v.norm_sqr()
    }

    /// |⟨self|other⟩|², the projection probability between pure states.
    pub fn overlap(&self, other: &JonesVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// Outer product |self⟩⟨self| as a 2×2 matrix on {H, V}.
    pub fn outer(&self) -> Matrix2<Complex64> {
        Matrix2::new(
            self.h * self.h.conj(),
            self.h * self.v.conj(),
            self.v * self.h.conj(),
            self.v * self.v.conj(),
        )
    }

    /// True when the two states differ only by a global phase.
    pub fn equals_up_to_phase(&self, other: &JonesVector, tol: f64) -> bool {
        let n = self.norm_sqr() * other.norm_sqr();
        if n == 0.0 {
            return false;
        }
        (self.overlap(other) / n - 1.0).abs() < tol
    }
}

/// Source eigenaxis whose channel-rotated image is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenAxis {
    H,
    V,
}

/// Image of the H or V eigenstate after the birefringent channel.
///
/// The H axis maps to cos(θ/2)|H⟩ + sin(θ/2)e^{iφ}|V⟩ and the V axis to
/// sin(θ/2)|H⟩ − cos(θ/2)e^{iφ}|V⟩; the two images stay orthonormal for
/// every channel.
pub fn rotated_eigenstate(axis: EigenAxis, ch: &ChannelParams) -> JonesVector {
    let half = 0.5 * ch.theta;
    let phase = Complex64::from_polar(1.0, ch.phi);
    match axis {
        EigenAxis::H => JonesVector::new(half.cos().into(), phase * half.sin()),
        EigenAxis::V => JonesVector::new(half.sin().into(), -phase * half.cos()),
    }
}

/// Measurement state selected by a rotating waveplate in front of a fixed
/// horizontal polarizer.
///
/// QWP: (1/√2)(i + cos 2χ)|H⟩ + (1/√2) sin 2χ|V⟩.
/// HWP: cos 2χ|H⟩ + sin 2χ|V⟩.
pub fn measurement_state(wp: WaveplateSetting) -> JonesVector {
    let two_chi = 2.0 * wp.chi();
    match wp.kind {
        WaveplateKind::Qwp => {
            let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
            JonesVector::new(
                Complex64::new(two_chi.cos(), 1.0) * inv_sqrt2,
                Complex64::new(two_chi.sin() * inv_sqrt2, 0.0),
            )
        }
        WaveplateKind::Hwp => {
            JonesVector::new(two_chi.cos().into(), two_chi.sin().into())
        }
    }
}

/// Projection weights (α₁, α₂) of a unit-norm measurement state onto the two
/// channel eigenstate images. They always sum to one.
pub fn projection_weights(
    m: &JonesVector,
    ch: &ChannelParams,
) -> Result<(f64, f64), OpticsError> {
    let n = m.norm_sqr();
    if (n - 1.0).abs() > NORM_TOL {
        return Err(OpticsError::NotNormalized(n));
    }
    let a1 = m.overlap(&rotated_eigenstate(EigenAxis::H, ch));
    let a2 = m.overlap(&rotated_eigenstate(EigenAxis::V, ch));
    Ok((a1, a2))
}

/// A 2×2 polarization density matrix over {H, V}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolDensity {
    pub m: Matrix2<Complex64>,
}

impl PolDensity {
    pub fn trace(&self) -> Complex64 {
        self.m[(0, 0)] + self.m[(1, 1)]
    }

    /// ⟨state|ρ|state⟩; real for Hermitian ρ.
    pub fn expectation(&self, state: &JonesVector) -> f64 {
        let row0 = self.m[(0, 0)] * state.h + self.m[(0, 1)] * state.v;
        let row1 = self.m[(1, 0)] * state.h + self.m[(1, 1)] * state.v;
        (state.h.conj() * row0 + state.v.conj() * row1).re
    }

    /// Eigenvalues of the Hermitian matrix, descending.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.trace().re;
        let det = (self.m[(0, 0)] * self.m[(1, 1)] - self.m[(0, 1)] * self.m[(1, 0)]).re;
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        (0.5 * tr + disc, 0.5 * tr - disc)
    }

    /// Largest absolute deviation from ρ = ρ†.
    pub fn hermiticity_error(&self) -> f64 {
        let d01 = self.m[(0, 1)] - self.m[(1, 0)].conj();
        let d00 = self.m[(0, 0)].im.abs();
        let d11 = self.m[(1, 1)].im.abs();
        d01.norm().max(d00).max(d11)
    }
}

/// Density matrix of the doublet emission after the channel: the two
/// rotated eigenstates mixed with weights (1±p)/2.
pub fn propagate_density(p: f64, ch: &ChannelParams) -> Result<PolDensity, OpticsError> {
    if !(-1.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(OpticsError::PolarizationOutOfRange(p));
    }
    let b1 = rotated_eigenstate(EigenAxis::H, ch);
    let b2 = rotated_eigenstate(EigenAxis::V, ch);
    let w1 = Complex64::new(0.5 * (1.0 + p), 0.0);
    let w2 = Complex64::new(0.5 * (1.0 - p), 0.0);
    Ok(PolDensity { m: b1.outer() * w1 + b2.outer() * w2 })
}
