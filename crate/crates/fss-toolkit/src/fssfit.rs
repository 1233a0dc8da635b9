//! The inverse problem: fit measured centroid-deviation curves ΔE(χ) to
//! recover splitting s, channel rotation θ and phase φ, polarization degree
//! p, and the mean energy, with uncertainties from the fit covariance.
//!
//! The QWP model is multimodal in the angles, so fits multi-start from a
//! coarse 5×5 (θ, φ) grid; the HWP model (φ pinned to 0; a half-wave plate
//! cannot separate rotation from phase) starts from a θ comb over [0, 2π).
//! Results are reduced to a canonical parameter region via the exact model
//! symmetries, so equivalent solutions compare equal.
//!
//! Parameter order everywhere: [s, θ, φ, p, offset].

use crate::exciton::FssCurvePoint;
use crate::optics::WaveplateKind;
use crate::optim::{covariance_from_jtj, levmar, LeastSquaresProblem, LevMarFit, LevMarOptions};
use crate::peakfit::CentroidRow;
use crate::rng::{derive_seed, rng_from_seed};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

pub const N_PARAMS: usize = 5;

#[derive(Debug, Error)]
pub enum FssFitError {
    #[error("underdetermined scan: {n_points} points spanning {span_deg:.1}° (need >= 8 points over >= 90°)")]
    Underdetermined { n_points: usize, span_deg: f64 },
    #[error("point {index} has non-positive sigma {sigma}")]
    NonPositiveSigma { index: usize, sigma: f64 },
    #[error("no start converged to a usable fit")]
    NoFit,
    #[error("need at least 100 Monte-Carlo trials, got {0}")]
    TooFewTrials(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Model parameters without the energy offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub s: f64,
    pub theta: f64,
    pub phi: f64,
    pub p: f64,
}

/// A centroid-deviation curve ready for fitting. `reference_mev` anchors the
/// μeV deviations to an absolute energy; the fitted offset refines it.
#[derive(Debug, Clone, PartialEq)]
pub struct FssCurve {
    pub kind: WaveplateKind,
    pub reference_mev: f64,
    pub points: Vec<FssCurvePoint>,
}

impl FssCurve {
    pub fn new(kind: WaveplateKind, reference_mev: f64, points: Vec<FssCurvePoint>) -> Self {
        Self { kind, reference_mev, points }
    }

    /// Build a curve from a centroid table: deviations are taken about the
    /// mean converged centroid, and unconverged rows are dropped.
    pub fn from_centroids(rows: &[CentroidRow]) -> Option<Self> {
        let used: Vec<&CentroidRow> = rows.iter().filter(|r| r.converged).collect();
        if used.is_empty() {
            return None;
        }
        let kind = used[0].kind;
        let reference_mev =
            used.iter().map(|r| r.centroid_mev).sum::<f64>() / used.len() as f64;
        let points = used
            .iter()
            .map(|r| FssCurvePoint {
                chi: r.chi_deg.to_radians(),
                delta_e: (r.centroid_mev - reference_mev) * 1000.0,
                sigma: r.centroid_sigma_uev.max(1e-6),
            })
            .collect();
        Some(Self { kind, reference_mev, points })
    }
}

/// Weight difference D(χ) and its (∂θ, ∂φ) partials for either model.
fn weight_difference(kind: WaveplateKind, theta: f64, phi: f64, chi: f64) -> (f64, f64, f64) {
    let (st, ct) = theta.sin_cos();
    match kind {
        WaveplateKind::Qwp => {
            let (sp, cp) = phi.sin_cos();
            let c4 = (4.0 * chi).cos();
            let s4 = (4.0 * chi).sin();
            let s2 = (2.0 * chi).sin();
            let d = 0.5 * (ct * (1.0 + c4) + st * s4 * cp - 2.0 * st * s2 * sp);
            let d_theta = 0.5 * (-st * (1.0 + c4) + ct * s4 * cp - 2.0 * ct * s2 * sp);
            let d_phi = 0.5 * (-st * s4 * sp - 2.0 * st * s2 * cp);
            (d, d_theta, d_phi)
        }
        WaveplateKind::Hwp => {
            // φ is not identifiable through a half-wave plate; the fit model
            // pins it to zero and θ absorbs the sinusoid phase.
            let _ = (st, ct);
            let u = 4.0 * chi - theta;
            (u.cos(), u.sin(), 0.0)
        }
    }
}

/// Model prediction (s/2)(D + p)/(1 + pD) + offset.
pub fn model_delta_e(kind: WaveplateKind, params: &ModelParams, offset: f64, chi: f64) -> f64 {
    let (d, _, _) = weight_difference(kind, params.theta, params.phi, chi);
    0.5 * params.s * (d + params.p) / (1.0 + params.p * d) + offset
}

struct CurveProblem<'a> {
    kind: WaveplateKind,
    points: &'a [FssCurvePoint],
    /// Fixed full-vector entries ([s, θ, φ, p, offset]); None = free.
    fixed: [Option<f64>; N_PARAMS],
    free_idx: Vec<usize>,
}

impl<'a> CurveProblem<'a> {
    fn new(kind: WaveplateKind, points: &'a [FssCurvePoint], fixed: [Option<f64>; N_PARAMS]) -> Self {
        let free_idx = (0..N_PARAMS).filter(|i| fixed[*i].is_none()).collect();
        Self { kind, points, fixed, free_idx }
    }

    fn expand(&self, free: &[f64]) -> [f64; N_PARAMS] {
        let mut full = [0.0; N_PARAMS];
        let mut j = 0;
        for i in 0..N_PARAMS {
            full[i] = match self.fixed[i] {
                Some(v) => v,
                None => {
                    let v = free[j];
                    j += 1;
                    v
                }
            };
        }
        full
    }

    fn shrink(&self, full: &[f64; N_PARAMS]) -> Vec<f64> {
        self.free_idx.iter().map(|&i| full[i]).collect()
    }
}

impl LeastSquaresProblem for CurveProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.points.len()
    }
    fn n_params(&self) -> usize {
        self.free_idx.len()
    }
    fn residuals(&self, params: &[f64], out: &mut [f64]) {
        let [s, theta, phi, p, offset] = self.expand(params);
        for (i, pt) in self.points.iter().enumerate() {
            let (d, _, _) = weight_difference(self.kind, theta, phi, pt.chi);
            let m = 0.5 * s * (d + p) / (1.0 + p * d) + offset;
            out[i] = (m - pt.delta_e) / pt.sigma;
        }
    }
    fn jacobian(&self, params: &[f64], out: &mut DMatrix<f64>) {
        let [s, theta, phi, p, _offset] = self.expand(params);
        for (i, pt) in self.points.iter().enumerate() {
            let (d, d_theta, d_phi) = weight_difference(self.kind, theta, phi, pt.chi);
            let denom = 1.0 + p * d;
            let g = (d + p) / denom;
            let g_d = (1.0 - p * p) / (denom * denom);
            let g_p = (1.0 - d * d) / (denom * denom);
            let full = [
                0.5 * g,
                0.5 * s * g_d * d_theta,
                0.5 * s * g_d * d_phi,
                0.5 * s * g_p,
                1.0,
            ];
            for (j, &idx) in self.free_idx.iter().enumerate() {
                out[(i, j)] = full[idx] / pt.sigma;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Fit the polarization degree; otherwise it is held at `fixed_p`.
    pub fit_p: bool,
    pub fixed_p: f64,
    pub max_iter: usize,
    /// Seed for Monte-Carlo resampling.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { fit_p: false, fixed_p: 0.0, max_iter: 200, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FssFitResult {
    pub model: WaveplateKind,
    /// Splitting, μeV (canonical: >= 0).
    pub s: f64,
    /// Channel rotation, rad (canonical: [0, π] for QWP, [0, 2π) for HWP).
    pub theta: f64,
    /// Channel phase, rad, in (−π, π]; identically 0 for HWP fits.
    pub phi: f64,
    pub p: f64,
    /// Fitted offset of the mean energy from the curve reference, μeV.
    pub offset_uev: f64,
    /// Absolute mean energy, meV.
    pub epsilon_mev: f64,
    /// 1σ uncertainties for [s, θ, φ, p, offset].
    pub sigmas: [f64; N_PARAMS],
    pub covariance: [[f64; N_PARAMS]; N_PARAMS],
    pub chi2_reduced: f64,
    pub n_points: usize,
    pub converged: bool,
    /// False when s is within 2σ of zero ("splitting unresolved").
    pub s_resolved: bool,
}

impl FssFitResult {
    /// Dipole / eigenaxis orientation in the lab frame, rad, folded to [0, π).
    pub fn dipole_angle(&self) -> f64 {
        (0.5 * self.theta).rem_euclid(PI)
    }

    pub fn params(&self) -> ModelParams {
        ModelParams { s: self.s, theta: self.theta, phi: self.phi, p: self.p }
    }
}

fn wrap_phi(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI);
    if w == 0.0 {
        PI
    } else {
        w - PI
    }
}

/// Reduce parameters to the canonical region using the exact model
/// symmetries; predictions are unchanged. Idempotent.
///
/// QWP: s ≥ 0, θ ∈ [0, π], φ ∈ (−π, π], via (s,θ,p) → (−s,θ+π,−p) and the
/// reflection (θ,φ) → (2π−θ, φ+π). HWP: s ≥ 0, θ ∈ [0, 2π) (the reflection
/// is unavailable with φ pinned, so the full θ circle stays distinct).
pub fn canonicalize(kind: WaveplateKind, raw: ModelParams) -> ModelParams {
    canonicalize_with_signs(kind, raw).0
}

/// Canonicalization plus the induced sign flips of [s, θ, φ, p, offset]
/// differentials (for transforming covariances alongside).
pub fn canonicalize_with_signs(
    kind: WaveplateKind,
    raw: ModelParams,
) -> (ModelParams, [f64; N_PARAMS]) {
    let mut q = raw;
    let mut signs = [1.0; N_PARAMS];
    if q.s < 0.0 {
        q.s = -q.s;
        q.theta += PI;
        q.p = -q.p;
        signs[0] = -signs[0];
        signs[3] = -signs[3];
    }
    q.theta = q.theta.rem_euclid(2.0 * PI);
    if kind == WaveplateKind::Qwp && q.theta > PI {
        q.theta = 2.0 * PI - q.theta;
        q.phi += PI;
        signs[1] = -signs[1];
    }
    q.phi = wrap_phi(q.phi);
    (q, signs)
}

fn check_preconditions(curve: &FssCurve) -> Result<(), FssFitError> {
    let n = curve.points.len();
    let (lo, hi) = curve
        .points
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.chi), hi.max(p.chi)));
    let span = hi - lo;
    if n < 8 || span < PI / 2.0 - 1e-9 {
        return Err(FssFitError::Underdetermined { n_points: n, span_deg: span.to_degrees() });
    }
    for (index, p) in curve.points.iter().enumerate() {
        if !(p.sigma > 0.0) {
            return Err(FssFitError::NonPositiveSigma { index, sigma: p.sigma });
        }
    }
    Ok(())
}

fn starts_for(kind: WaveplateKind) -> Vec<(f64, f64)> {
    match kind {
        WaveplateKind::Qwp => {
            let mut v = Vec::with_capacity(25);
            for i in 0..5 {
                let theta = (i as f64 + 0.5) * PI / 5.0;
                for j in 0..5 {
                    let phi = -PI + (j as f64 + 0.5) * 2.0 * PI / 5.0;
                    v.push((theta, phi));
                }
            }
            v
        }
        WaveplateKind::Hwp => (0..10)
            .map(|i| ((i as f64 + 0.5) * 2.0 * PI / 10.0, 0.0))
            .collect(),
    }
}

fn fixed_vector(kind: WaveplateKind, opts: &FitOptions) -> [Option<f64>; N_PARAMS] {
    let mut fixed = [None; N_PARAMS];
    if kind == WaveplateKind::Hwp {
        fixed[2] = Some(0.0);
    }
    if !opts.fit_p {
        fixed[3] = Some(opts.fixed_p);
    }
    fixed
}

struct Candidate {
    fit: LevMarFit,
    canonical: ModelParams,
    signs: [f64; N_PARAMS],
    offset: f64,
}

/// Fit a centroid-deviation curve with the model matching `curve.kind`.
pub fn fit_scan(curve: &FssCurve, opts: &FitOptions) -> Result<FssFitResult, FssFitError> {
    check_preconditions(curve)?;
    let kind = curve.kind;
    let problem = CurveProblem::new(kind, &curve.points, fixed_vector(kind, opts));
    let lm_opts = LevMarOptions { max_iter: opts.max_iter, ..Default::default() };

    let ptp = {
        let (lo, hi) = curve
            .points
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.delta_e), hi.max(p.delta_e)));
        (hi - lo).max(1e-3)
    };
    let mean = curve.points.iter().map(|p| p.delta_e).sum::<f64>() / curve.points.len() as f64;

    let mut best: Option<Candidate> = None;
    for (theta0, phi0) in starts_for(kind) {
        let full0 = [ptp, theta0, phi0, opts.fixed_p, mean];
        let x0 = problem.shrink(&full0);
        let fit = levmar(&problem, &x0, &lm_opts);
        if !fit.converged || !fit.cost.is_finite() {
            continue;
        }
        let [s, theta, phi, p, offset] = problem.expand(&fit.params);
        let (canonical, signs) = canonicalize_with_signs(kind, ModelParams { s, theta, phi, p });
        let candidate = Candidate { fit, canonical, signs, offset };
        best = Some(match best {
            None => candidate,
            Some(incumbent) => {
                let better = candidate.fit.cost < incumbent.fit.cost - 1e-12;
                let tie = (candidate.fit.cost - incumbent.fit.cost).abs() <= 1e-12;
                let tiebreak = tie
                    && (candidate.canonical.theta < incumbent.canonical.theta - 1e-12
                        || ((candidate.canonical.theta - incumbent.canonical.theta).abs()
                            <= 1e-12
                            && candidate.canonical.phi.abs() < incumbent.canonical.phi.abs()));
                if better || tiebreak {
                    candidate
                } else {
                    incumbent
                }
            }
        });
    }
    let won = best.ok_or(FssFitError::NoFit)?;
    Ok(result_from_candidate(curve, opts, &problem, won))
}

fn result_from_candidate(
    curve: &FssCurve,
    _opts: &FitOptions,
    problem: &CurveProblem<'_>,
    won: Candidate,
) -> FssFitResult {
    let n = curve.points.len();
    let k_free = problem.free_idx.len();
    let dof = (n as f64 - k_free as f64).max(1.0);
    let chi2_reduced = won.fit.cost / dof;
    let cov_free = covariance_from_jtj(&won.fit.jtj, chi2_reduced);

    let mut covariance = [[0.0; N_PARAMS]; N_PARAMS];
    for (a, &ia) in problem.free_idx.iter().enumerate() {
        for (b, &ib) in problem.free_idx.iter().enumerate() {
            covariance[ia][ib] = won.signs[ia] * won.signs[ib] * cov_free[(a, b)];
        }
    }
    let mut sigmas = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        sigmas[i] = covariance[i][i].max(0.0).sqrt();
    }

    let q = won.canonical;
    FssFitResult {
        model: curve.kind,
        s: q.s,
        theta: q.theta,
        phi: if curve.kind == WaveplateKind::Hwp { 0.0 } else { q.phi },
        p: q.p,
        offset_uev: won.offset,
        epsilon_mev: curve.reference_mev + won.offset / 1000.0,
        sigmas,
        covariance,
        chi2_reduced,
        n_points: n,
        converged: true,
        s_resolved: q.s > 2.0 * sigmas[0],
    }
}

/// Fit with the quarter-wave-plate model (the curve must be a QWP scan).
pub fn fit_qwp_scan(curve: &FssCurve, opts: &FitOptions) -> Result<FssFitResult, FssFitError> {
    debug_assert_eq!(curve.kind, WaveplateKind::Qwp);
    fit_scan(curve, opts)
}

/// Fit with the half-wave-plate model: ΔE = (s/2)(p + cos(4χ−θ))/(1 + p cos(4χ−θ)).
pub fn fit_hwp_scan(curve: &FssCurve, opts: &FitOptions) -> Result<FssFitResult, FssFitError> {
    debug_assert_eq!(curve.kind, WaveplateKind::Hwp);
    fit_scan(curve, opts)
}

/// Empirical parameter spreads from parametric resampling of the curve
/// noise about the best fit.
#[derive(Debug, Clone)]
pub struct McSpread {
    /// Sample standard deviation of each refitted parameter
    /// ([s, θ, φ, p, offset]) over the trials.
    pub empirical_sigmas: [f64; N_PARAMS],
    /// Covariance-based sigmas of the base fit, for comparison.
    pub covariance_sigmas: [f64; N_PARAMS],
    pub n_trials: usize,
    pub base: FssFitResult,
}

/// Resample curve noise (Gaussian, per-point σ), refit each trial from the
/// base solution, and report the empirical 1σ spread per parameter.
pub fn fit_uncertainty_mc(
    curve: &FssCurve,
    opts: &FitOptions,
    n_trials: usize,
) -> Result<McSpread, FssFitError> {
    if n_trials < 100 {
        return Err(FssFitError::TooFewTrials(n_trials));
    }
    let base = fit_scan(curve, opts)?;
    let kind = curve.kind;
    let base_params = base.params();
    let predicted: Vec<f64> = curve
        .points
        .iter()
        .map(|pt| model_delta_e(kind, &base_params, base.offset_uev, pt.chi))
        .collect();

    let problem = CurveProblem::new(kind, &curve.points, fixed_vector(kind, opts));
    let full0 = [base.s, base.theta, base.phi, base.p, base.offset_uev];
    let x0 = problem.shrink(&full0);
    let lm_opts = LevMarOptions { max_iter: opts.max_iter, ..Default::default() };

    let trials: Vec<[f64; N_PARAMS]> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(opts.seed, t as u64));
            let resampled: Vec<FssCurvePoint> = curve
                .points
                .iter()
                .zip(&predicted)
                .map(|(pt, &m)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    FssCurvePoint { chi: pt.chi, delta_e: m + pt.sigma * z, sigma: pt.sigma }
                })
                .collect();
            let trial_problem =
                CurveProblem::new(kind, &resampled, fixed_vector(kind, opts));
            let fit = levmar(&trial_problem, &x0, &lm_opts);
            let [s, theta, phi, p, offset] = trial_problem.expand(&fit.params);
            let (q, _) = canonicalize_with_signs(kind, ModelParams { s, theta, phi, p });
            [q.s, q.theta, q.phi, q.p, offset]
        })
        .collect();

    let mut empirical_sigmas = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        let mean = trials.iter().map(|t| t[i]).sum::<f64>() / n_trials as f64;
        let var = trials.iter().map(|t| (t[i] - mean).powi(2)).sum::<f64>()
            / (n_trials as f64 - 1.0);
        empirical_sigmas[i] = var.sqrt();
    }
    Ok(McSpread {
        empirical_sigmas,
        covariance_sigmas: base.sigmas,
        n_trials,
        base,
    })
}

/// One dot's fit serialized for downstream tooling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FssFitRecord {
    pub dot_id: String,
    pub model: WaveplateKind,
    #[serde(rename = "s_ueV")]
    pub s_uev: f64,
    #[serde(rename = "s_sigma_ueV")]
    pub s_sigma_uev: f64,
    pub theta_rad: f64,
    pub phi_rad: f64,
    pub p: f64,
    #[serde(rename = "epsilon_meV")]
    pub epsilon_mev: f64,
    pub chi2_reduced: f64,
    pub n_points: usize,
    pub converged: bool,
    pub s_resolved: bool,
    pub dipole_rad: f64,
    /// Which centroid-extraction strategy produced the fitted curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_mode: Option<String>,
}

impl FssFitRecord {
    pub fn from_result(dot_id: impl Into<String>, r: &FssFitResult) -> Self {
        Self {
            dot_id: dot_id.into(),
            model: r.model,
            s_uev: r.s,
            s_sigma_uev: r.sigmas[0],
            theta_rad: r.theta,
            phi_rad: r.phi,
            p: r.p,
            epsilon_mev: r.epsilon_mev,
            chi2_reduced: r.chi2_reduced,
            n_points: r.n_points,
            converged: r.converged,
            s_resolved: r.s_resolved,
            dipole_rad: r.dipole_angle(),
            centroid_mode: None,
        }
    }
}

pub fn write_fit_records(path: &Path, records: &[FssFitRecord]) -> Result<(), FssFitError> {
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_fit_records(path: &Path) -> Result<Vec<FssFitRecord>, FssFitError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
