//! Exciton doublet source model and the measurement forward model.
//!
//! A neutral-exciton doublet with splitting `s` emits two orthogonally
//! polarized lines at ε ± s/2 with populations (1±p)/2. After the
//! birefringent channel and a rotating waveplate + fixed polarizer, the
//! spectrometer sees an intensity-weighted line whose centroid deviates
//! from ε by an amount ΔE(χ) that encodes (s, θ, φ, p).
//!
//! [`observed_energy`] evaluates that centroid through explicit Jones
//! projections and is the reference path; [`delta_e_qwp`] is the
//! trigonometric closed form, validated against the reference everywhere.

use crate::optics::{
    measurement_state, projection_weights, ChannelParams, OpticsError, WaveplateKind,
    WaveplateSetting,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transmitted-intensity threshold below which a centroid is undefined.
pub const DARK_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    /// The polarizer extinguishes all populated emission; no centroid exists.
    #[error("dark measurement: transmitted intensity {denom:.3e} is below {DARK_THRESHOLD:.0e}")]
    DarkMeasurement { denom: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

/// Source physics of one dot: mean energy ε (μeV offset from a reference
/// line position held elsewhere in meV), splitting s (μeV, sign encodes
/// which eigenstate is higher), and polarization degree p.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitonDoublet {
    pub epsilon: f64,
    pub s: f64,
    pub p: f64,
}

impl ExcitonDoublet {
    pub fn new(epsilon: f64, s: f64, p: f64) -> Result<Self, ModelError> {
        if !(-1.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(OpticsError::PolarizationOutOfRange(p).into());
        }
        Ok(Self { epsilon, s, p })
    }

    /// Energy of the line polarized along the H eigenaxis, μeV.
    pub fn e_h(&self) -> f64 {
        self.epsilon + 0.5 * self.s
    }

    /// Energy of the line polarized along the V eigenaxis, μeV.
    pub fn e_v(&self) -> f64 {
        self.epsilon - 0.5 * self.s
    }
}

/// One point of a measured (or simulated) centroid-deviation curve:
/// waveplate angle χ, deviation ΔE from the mean energy, and its 1σ
/// uncertainty, both in μeV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FssCurvePoint {
    pub chi: f64,
    pub delta_e: f64,
    pub sigma: f64,
}

/// Closed-form projection-weight difference α₁ − α₂ for a QWP at angle χ:
/// ½(cos θ(1 + cos 4χ) + sin θ sin 4χ cos φ − 2 sin θ sin 2χ sin φ).
pub fn alpha_difference(ch: &ChannelParams, chi: f64) -> f64 {
    let (st, ct) = ch.theta.sin_cos();
    let (sp, cp) = ch.phi.sin_cos();
    0.5 * (ct * (1.0 + (4.0 * chi).cos()) + st * (4.0 * chi).sin() * cp
        - 2.0 * st * (2.0 * chi).sin() * sp)
}

/// Closed-form projection-weight difference for an HWP at angle χ:
/// cos θ cos 4χ + sin θ sin 4χ cos φ.
pub fn alpha_difference_hwp(ch: &ChannelParams, chi: f64) -> f64 {
    let (st, ct) = ch.theta.sin_cos();
    ct * (4.0 * chi).cos() + st * (4.0 * chi).sin() * ch.phi.cos()
}

/// Centroid deviation from ε given a projection-weight difference d:
/// (s/2)(d + p)/(1 + p·d). Fails when the transmitted intensity vanishes.
pub fn deviation_from_weight_difference(s: f64, p: f64, d: f64) -> Result<f64, ModelError> {
    let denom = 1.0 + p * d;
    if denom <= DARK_THRESHOLD {
        return Err(ModelError::DarkMeasurement { denom });
    }
    Ok(0.5 * s * (d + p) / denom)
}

/// Intensity-weighted line energy at the spectrometer (μeV, same offset
/// convention as `d.epsilon`), evaluated through explicit Jones projections.
///
/// This generic path is valid for both waveplates and is the reference the
/// closed forms are tested against.
pub fn observed_energy(
    d: &ExcitonDoublet,
    ch: &ChannelParams,
    wp: WaveplateSetting,
) -> Result<f64, ModelError> {
    let m = measurement_state(wp);
    let (a1, a2) = projection_weights(&m, ch)?;
    Ok(d.epsilon + deviation_from_weight_difference(d.s, d.p, a1 - a2)?)
}

/// Closed-form centroid deviation ΔE(χ) for the QWP method.
pub fn delta_e_qwp(d: &ExcitonDoublet, ch: &ChannelParams, chi: f64) -> Result<f64, ModelError> {
    deviation_from_weight_difference(d.s, d.p, alpha_difference(ch, chi))
}

/// Centroid deviation ΔE(χ) for the HWP method, via the generic
/// projection path. For p = 0 and φ = 0 this reduces to (s/2)cos(4χ − θ).
pub fn delta_e_hwp(d: &ExcitonDoublet, ch: &ChannelParams, chi: f64) -> Result<f64, ModelError> {
    Ok(observed_energy(d, ch, WaveplateSetting::hwp(chi))? - d.epsilon)
}

/// Projection-weight difference computed through explicit Jones algebra;
/// the independent route used to validate the closed forms.
pub fn alpha_difference_via_jones(
    kind: WaveplateKind,
    ch: &ChannelParams,
    chi: f64,
) -> Result<f64, OpticsError> {
    let m = measurement_state(WaveplateSetting::new(kind, chi));
    let (a1, a2) = projection_weights(&m, ch)?;
    Ok(a1 - a2)
}

/// Noiseless forward curve for a scan of waveplate angles; `sigma` is
/// attached to every point (use 1.0 for unweighted synthetic curves).
pub fn forward_curve(
    d: &ExcitonDoublet,
    ch: &ChannelParams,
    kind: WaveplateKind,
    chis: &[f64],
    sigma: f64,
) -> Result<Vec<FssCurvePoint>, ModelError> {
    chis.iter()
        .map(|&chi| {
            let delta_e = match kind {
                WaveplateKind::Qwp => delta_e_qwp(d, ch, chi)?,
                WaveplateKind::Hwp => delta_e_hwp(d, ch, chi)?,
            };
            Ok(FssCurvePoint { chi, delta_e, sigma })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn doublet(s: f64, p: f64) -> ExcitonDoublet {
        ExcitonDoublet::new(0.0, s, p).unwrap()
    }

    #[test]
    fn line_positions_split_symmetrically() {
        let d = ExcitonDoublet::new(10.0, 40.0, 0.0).unwrap();
        assert_abs_diff_eq!(d.e_h(), 30.0);
        assert_abs_diff_eq!(d.e_v(), -10.0);
    }

    #[test]
    fn alpha_difference_identity_channel() {
        let ch = ChannelParams::identity();
        assert_abs_diff_eq!(alpha_difference(&ch, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(alpha_difference(&ch, PI / 4.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_difference_matches_jones_hand_case() {
        let ch = ChannelParams::new(PI / 2.0, PI / 2.0);
        let chi = 22.5_f64.to_radians();
        let closed = alpha_difference(&ch, chi);
        let jones = alpha_difference_via_jones(WaveplateKind::Qwp, &ch, chi).unwrap();
        assert_abs_diff_eq!(closed, -std::f64::consts::SQRT_2 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(closed, jones, epsilon = 1e-12);
    }

    #[test]
    fn fully_polarized_doublet_sits_at_upper_line() {
        let d = doublet(64.0, 1.0);
        let ch = ChannelParams::new(0.9, -0.4);
        let e = observed_energy(&d, &ch, WaveplateSetting::qwp(0.35)).unwrap();
        assert_abs_diff_eq!(e, 32.0, epsilon = 1e-10);
    }

    #[test]
    fn pure_first_mode_projection_shifts_by_weighted_half_splitting() {
        let d = doublet(100.0, 0.2);
        let e = observed_energy(&d, &ChannelParams::identity(), WaveplateSetting::qwp(0.0))
            .unwrap();
        assert_abs_diff_eq!(e, 50.0, epsilon = 1e-10);
    }

    #[test]
    fn unpolarized_identity_channel_qwp_amplitude() {
        let d = doublet(235.0, 0.0);
        let e = observed_energy(&d, &ChannelParams::identity(), WaveplateSetting::qwp(0.0))
            .unwrap();
        assert_abs_diff_eq!(e, 117.5, epsilon = 1e-10);
    }

    #[test]
    fn circular_projection_zeroes_the_shift() {
        let d = doublet(29.0, 0.0);
        assert_abs_diff_eq!(
            delta_e_qwp(&d, &ChannelParams::identity(), PI / 4.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn hwp_identity_channel_values() {
        let d = doublet(49.0, 0.0);
        let ch = ChannelParams::identity();
        assert_abs_diff_eq!(delta_e_hwp(&d, &ch, 0.0).unwrap(), 24.5, epsilon = 1e-10);
        assert_abs_diff_eq!(delta_e_hwp(&d, &ch, PI / 8.0).unwrap(), 0.0, epsilon = 1e-10);
        // Peak-to-peak equals the splitting for φ = 0.
        let max = (0..360)
            .map(|i| delta_e_hwp(&d, &ch, i as f64 * PI / 360.0).unwrap())
            .fold(f64::MIN, f64::max);
        let min = (0..360)
            .map(|i| delta_e_hwp(&d, &ch, i as f64 * PI / 360.0).unwrap())
            .fold(f64::MAX, f64::min);
        assert_abs_diff_eq!(max - min, 49.0, epsilon = 1e-9);
    }

    #[test]
    fn dark_measurement_is_detected() {
        // p = -1 populates only the V-image line; at χ = 0 on the identity
        // channel the polarizer selects the orthogonal mode exactly.
        let d = doublet(50.0, -1.0);
        let err = observed_energy(&d, &ChannelParams::identity(), WaveplateSetting::qwp(0.0));
        assert!(matches!(err, Err(ModelError::DarkMeasurement { .. })));
    }

    #[test]
    fn closed_form_matches_jones_reference_on_grid() {
        for &p in &[-0.3, 0.0, 0.3] {
            let d = doublet(100.0, p);
            for i in 0..20 {
                let theta = i as f64 * PI / 19.0;
                for j in 0..20 {
                    let phi = -PI + (j as f64 + 0.5) * 2.0 * PI / 20.0;
                    let ch = ChannelParams::new(theta, phi);
                    for k in 0..36 {
                        let chi = k as f64 * PI / 36.0;
                        let closed = delta_e_qwp(&d, &ch, chi).unwrap();
                        let generic =
                            observed_energy(&d, &ch, WaveplateSetting::qwp(chi)).unwrap();
                        assert_abs_diff_eq!(closed, generic, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn hwp_closed_weight_difference_matches_jones() {
        for i in 0..15 {
            let ch = ChannelParams::new(0.1 + i as f64 * 0.4, -2.9 + i as f64 * 0.37);
            for k in 0..24 {
                let chi = k as f64 * PI / 24.0;
                let closed = alpha_difference_hwp(&ch, chi);
                let jones =
                    alpha_difference_via_jones(WaveplateKind::Hwp, &ch, chi).unwrap();
                assert_abs_diff_eq!(closed, jones, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn curve_is_pi_periodic_in_chi(
            theta in 0.0..PI,
            phi in -3.1..3.1f64,
            chi in 0.0..PI,
            s in 5.0..250.0f64,
            p in -0.3..0.3f64,
            qwp in proptest::bool::ANY,
        ) {
            let d = doublet(s, p);
            let ch = ChannelParams::new(theta, phi);
            let kind = if qwp { WaveplateKind::Qwp } else { WaveplateKind::Hwp };
            let f = |x: f64| match kind {
                WaveplateKind::Qwp => delta_e_qwp(&d, &ch, x).unwrap(),
                WaveplateKind::Hwp => delta_e_hwp(&d, &ch, x).unwrap(),
            };
            prop_assert!((f(chi) - f(chi + PI)).abs() < 1e-9);
        }

        #[test]
        fn unpolarized_swing_is_bounded_by_splitting(
            theta in 0.0..PI,
            phi in -3.1..3.1f64,
            s in 5.0..250.0f64,
        ) {
            let d = doublet(s, 0.0);
            let ch = ChannelParams::new(theta, phi);
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for k in 0..144 {
                let v = delta_e_qwp(&d, &ch, k as f64 * PI / 144.0).unwrap();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            prop_assert!(hi - lo <= s + 1e-9);
        }

        #[test]
        fn deviation_scales_linearly_in_s(
            theta in 0.0..PI,
            phi in -3.1..3.1f64,
            chi in 0.0..PI,
            s in 5.0..120.0f64,
            p in -0.3..0.3f64,
            k in 0.25..4.0f64,
        ) {
            let ch = ChannelParams::new(theta, phi);
            let base = delta_e_qwp(&doublet(s, p), &ch, chi).unwrap();
            let scaled = delta_e_qwp(&doublet(k * s, p), &ch, chi).unwrap();
            prop_assert!((scaled - k * base).abs() < 1e-9 * k.max(1.0));
        }

        #[test]
        fn sign_flip_symmetry_leaves_curve_unchanged(
            theta in 0.0..PI,
            phi in -3.1..3.1f64,
            chi in 0.0..PI,
            s in 5.0..250.0f64,
            p in -0.3..0.3f64,
        ) {
            let ch = ChannelParams::new(theta, phi);
            let flipped = ChannelParams::new(theta + PI, phi);
            let a = delta_e_qwp(&doublet(s, p), &ch, chi).unwrap();
            let b = delta_e_qwp(&doublet(-s, -p), &flipped, chi).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * s.max(1.0));
        }

        #[test]
        fn forward_points_respect_half_splitting_bound(
            theta in 0.0..PI,
            phi in -3.1..3.1f64,
            s in 5.0..250.0f64,
            p in -0.3..0.3f64,
        ) {
            let d = doublet(s, p);
            let ch = ChannelParams::new(theta, phi);
            let chis: Vec<f64> = (0..36).map(|i| i as f64 * PI / 36.0).collect();
            let curve = forward_curve(&d, &ch, WaveplateKind::Qwp, &chis, 1.0).unwrap();
            for pt in curve {
                prop_assert!(pt.delta_e.abs() <= 0.5 * s.abs() + 3.0 * pt.sigma);
            }
        }
    }
}
