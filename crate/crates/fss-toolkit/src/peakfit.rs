//! Line-shape fits extracting spectral centroids.
//!
//! Centroids of unresolved doublets shift with the transmitted line weights
//! well below the instrument resolution; a weighted least-squares fit of a
//! single symmetric profile recovers that shift to a small fraction of a
//! pixel. Resolved doublets are fitted with two profiles sharing one width,
//! and [`extract_scan_centroids`] picks the right strategy per scan,
//! recording which one was used.
//!
//! Pixel weights are 1/max(counts, 1), the counting-statistics
//! approximation for CCD data. When the line shape is `Voigt` the fit model
//! is the 50/50 pseudo-Voigt approximation (centroid-exact for symmetric
//! lines).

use crate::optics::WaveplateKind;
use crate::optim::{covariance_from_jtj, levmar, LeastSquaresProblem, LevMarFit, LevMarOptions};
use crate::spectra::{LineShape, Spectrum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PeakFitError {
    #[error("spectrum has {0} pixels; at least 16 are required")]
    TooFewPixels(usize),
    #[error("no significant peak: max is {excess:.3} counts above background (need {needed:.3})")]
    NoPeak { excess: f64, needed: f64 },
    #[error("doublet unresolved: found {n_maxima} usable maxima and no initial centers were supplied; fit a single peak instead")]
    Unresolved { n_maxima: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Result of a single-profile fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFitResult {
    /// Fitted line position, meV.
    pub centroid: f64,
    /// 1σ uncertainty of the centroid, μeV.
    pub centroid_sigma: f64,
    /// Fitted FWHM, μeV.
    pub fwhm: f64,
    /// Peak height above background, counts.
    pub amplitude: f64,
    /// Constant background level, counts.
    pub background: f64,
    /// RMS weighted residual.
    pub residual_norm: f64,
    pub converged: bool,
}

/// Controls for the damped least-squares iteration.
#[derive(Debug, Clone, Copy)]
pub struct FitControls {
    pub max_iter: usize,
}

impl Default for FitControls {
    fn default() -> Self {
        Self { max_iter: 200 }
    }
}

// Height-normalized profile value and partials wrt (center, fwhm).
fn shape_value(shape: LineShape, t: f64, w: f64) -> f64 {
    match shape {
        LineShape::Lorentzian => {
            let u = 2.0 * t / w;
            1.0 / (1.0 + u * u)
        }
        LineShape::Gaussian => {
            let k = 4.0 * std::f64::consts::LN_2;
            (-k * t * t / (w * w)).exp()
        }
        LineShape::Voigt => {
            0.5 * shape_value(LineShape::Lorentzian, t, w)
                + 0.5 * shape_value(LineShape::Gaussian, t, w)
        }
    }
}

/// (value, ∂/∂center, ∂/∂fwhm) of the height-normalized profile at x with
/// center c and width w (t = x − c).
fn shape_partials(shape: LineShape, t: f64, w: f64) -> (f64, f64, f64) {
    match shape {
        LineShape::Lorentzian => {
            let u = 2.0 * t / w;
            let denom = 1.0 + u * u;
            let v = 1.0 / denom;
            let dv_du = -2.0 * u / (denom * denom);
            // du/dc = -2/w, du/dw = -u/w.
            (v, dv_du * (-2.0 / w), dv_du * (-u / w))
        }
        LineShape::Gaussian => {
            let k = 4.0 * std::f64::consts::LN_2;
            let v = (-k * t * t / (w * w)).exp();
            (v, v * 2.0 * k * t / (w * w), v * 2.0 * k * t * t / (w * w * w))
        }
        LineShape::Voigt => {
            let (lv, lc, lw) = shape_partials(LineShape::Lorentzian, t, w);
            let (gv, gc, gw) = shape_partials(LineShape::Gaussian, t, w);
            (0.5 * (lv + gv), 0.5 * (lc + gc), 0.5 * (lw + gw))
        }
    }
}

/// Positions in μeV relative to the spectrum's central energy, plus weights.
struct FitData {
    x: Vec<f64>,
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
    origin_mev: f64,
}

impl FitData {
    fn new(sp: &Spectrum) -> Self {
        let origin_mev = 0.5
            * (sp.pixel_energies[0] + sp.pixel_energies[sp.pixel_energies.len() - 1]);
        let x = sp
            .pixel_energies
            .iter()
            .map(|e| (e - origin_mev) * 1000.0)
            .collect();
        let sqrt_w = sp.counts.iter().map(|c| (1.0 / c.max(1.0)).sqrt()).collect();
        Self { x, y: sp.counts.clone(), sqrt_w, origin_mev }
    }
}

struct SinglePeakProblem<'a> {
    data: &'a FitData,
    shape: LineShape,
}

impl LeastSquaresProblem for SinglePeakProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.data.x.len()
    }
    fn n_params(&self) -> usize {
        4
    }
    // params: [amplitude, center, fwhm, background]
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let (amp, c, w, bg) = (p[0], p[1], p[2].abs().max(1e-6), p[3]);
        for (i, (&x, (&y, &sw))) in
            self.data.x.iter().zip(self.data.y.iter().zip(&self.data.sqrt_w)).enumerate()
        {
            out[i] = (amp * shape_value(self.shape, x - c, w) + bg - y) * sw;
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut DMatrix<f64>) {
        let (amp, c, w) = (p[0], p[1], p[2].abs().max(1e-6));
        for (i, (&x, &sw)) in self.data.x.iter().zip(&self.data.sqrt_w).enumerate() {
            let (v, dc, dw) = shape_partials(self.shape, x - c, w);
            out[(i, 0)] = v * sw;
            out[(i, 1)] = amp * dc * sw;
            out[(i, 2)] = amp * dw * sw * p[2].signum();
            out[(i, 3)] = sw;
        }
    }
}

struct DoublePeakProblem<'a> {
    data: &'a FitData,
    shape: LineShape,
}

impl LeastSquaresProblem for DoublePeakProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.data.x.len()
    }
    fn n_params(&self) -> usize {
        6
    }
    // params: [amp1, c1, amp2, c2, fwhm, background]
    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let w = p[4].abs().max(1e-6);
        for (i, (&x, (&y, &sw))) in
            self.data.x.iter().zip(self.data.y.iter().zip(&self.data.sqrt_w)).enumerate()
        {
            let m = p[0] * shape_value(self.shape, x - p[1], w)
                + p[2] * shape_value(self.shape, x - p[3], w)
                + p[5];
            out[i] = (m - y) * sw;
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut DMatrix<f64>) {
        let w = p[4].abs().max(1e-6);
        for (i, (&x, &sw)) in self.data.x.iter().zip(&self.data.sqrt_w).enumerate() {
            let (v1, dc1, dw1) = shape_partials(self.shape, x - p[1], w);
            let (v2, dc2, dw2) = shape_partials(self.shape, x - p[3], w);
            out[(i, 0)] = v1 * sw;
            out[(i, 1)] = p[0] * dc1 * sw;
            out[(i, 2)] = v2 * sw;
            out[(i, 3)] = p[2] * dc2 * sw;
            out[(i, 4)] = (p[0] * dw1 + p[2] * dw2) * sw * p[4].signum();
            out[(i, 5)] = sw;
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// (background estimate, robust noise scale, significance threshold check).
fn detect_peak(sp: &Spectrum) -> Result<(f64, f64), PeakFitError> {
    if sp.counts.len() < 16 {
        return Err(PeakFitError::TooFewPixels(sp.counts.len()));
    }
    let mut v = sp.counts.clone();
    let bg = median(&mut v);
    let mut dev: Vec<f64> = sp.counts.iter().map(|c| (c - bg).abs()).collect();
    let mad_sigma = 1.4826 * median(&mut dev);
    let max = sp.counts.iter().cloned().fold(f64::MIN, f64::max);
    let excess = max - bg;
    let needed = 5.0 * mad_sigma;
    // Noiseless spectra have a vanishing noise scale; any clear maximum
    // qualifies there, but an exactly flat spectrum never does.
    if excess <= needed || excess <= 1e3 * f64::EPSILON * max.abs().max(1.0) {
        return Err(PeakFitError::NoPeak { excess, needed });
    }
    Ok((bg, mad_sigma))
}

fn moment_width_uev(data: &FitData, bg: f64, c0: f64) -> f64 {
    let mut m0 = 0.0;
    let mut m2 = 0.0;
    for (&x, &y) in data.x.iter().zip(&data.y) {
        let v = (y - bg).max(0.0);
        m0 += v;
        m2 += v * (x - c0) * (x - c0);
    }
    if m0 <= 0.0 {
        return 1.0;
    }
    2.3548 * (m2 / m0).sqrt()
}

fn dispersion_uev(sp: &Spectrum) -> f64 {
    ((sp.pixel_energies[1] - sp.pixel_energies[0]) * 1000.0).abs()
}

/// Fit one profile plus a constant background.
pub fn fit_single_peak(sp: &Spectrum, shape: LineShape) -> Result<PeakFitResult, PeakFitError> {
    fit_single_peak_with(sp, shape, &FitControls::default())
}

pub fn fit_single_peak_with(
    sp: &Spectrum,
    shape: LineShape,
    controls: &FitControls,
) -> Result<PeakFitResult, PeakFitError> {
    let (bg0, _) = detect_peak(sp)?;
    let data = FitData::new(sp);
    let (imax, &ymax) = data
        .y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let c0 = data.x[imax];
    let disp = dispersion_uev(sp);
    let span = disp * sp.counts.len() as f64;
    let w0 = moment_width_uev(&data, bg0, c0).clamp(2.0 * disp, 0.25 * span);
    let x0 = [ymax - bg0, c0, w0, bg0];

    let problem = SinglePeakProblem { data: &data, shape };
    let fit = levmar(
        &problem,
        &x0,
        &LevMarOptions { max_iter: controls.max_iter, ..Default::default() },
    );
    Ok(single_result_from_fit(sp, &data, &fit))
}

fn single_result_from_fit(sp: &Spectrum, data: &FitData, fit: &LevMarFit) -> PeakFitResult {
    let n = data.x.len();
    let dof = (n as f64 - 4.0).max(1.0);
    let chi2_reduced = fit.cost / dof;
    let cov = covariance_from_jtj(&fit.jtj, chi2_reduced);
    let centroid = data.origin_mev + fit.params[1] / 1000.0;
    let (lo, hi) = sp.energy_span_mev();
    let in_span = centroid >= lo && centroid <= hi;
    PeakFitResult {
        centroid,
        centroid_sigma: cov[(1, 1)].max(0.0).sqrt().max(1e-12),
        fwhm: fit.params[2].abs(),
        amplitude: fit.params[0],
        background: fit.params[3],
        residual_norm: (fit.cost / n as f64).sqrt(),
        converged: fit.converged && in_span,
    }
}

/// Local maxima of a lightly smoothed spectrum, tallest first.
fn smoothed_maxima(sp: &Spectrum, bg: f64, noise: f64) -> Vec<usize> {
    let n = sp.counts.len();
    let half = 2usize;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            sp.counts[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mut maxima: Vec<usize> = (1..n - 1)
        .filter(|&i| {
            smooth[i] > smooth[i - 1]
                && smooth[i] >= smooth[i + 1]
                && smooth[i] - bg > 5.0 * noise
                && smooth[i] - bg > 1e3 * f64::EPSILON * smooth[i].abs().max(1.0)
        })
        .collect();
    maxima.sort_by(|&a, &b| smooth[b].partial_cmp(&smooth[a]).unwrap());
    // Collapse plateaus/shoulders closer than a few pixels.
    let mut picked: Vec<usize> = Vec::new();
    for i in maxima {
        if picked.iter().all(|&j| i.abs_diff(j) > 3) {
            picked.push(i);
        }
    }
    picked
}

/// Simultaneous two-profile fit with a shared width; lines are returned
/// ordered by energy. Supply `initial_centers` (meV) for doublets without
/// two detectable maxima.
pub fn fit_double_peak(
    sp: &Spectrum,
    shape: LineShape,
    initial_centers: Option<(f64, f64)>,
) -> Result<(PeakFitResult, PeakFitResult), PeakFitError> {
    fit_double_peak_with(sp, shape, initial_centers, &FitControls::default())
}

pub fn fit_double_peak_with(
    sp: &Spectrum,
    shape: LineShape,
    initial_centers: Option<(f64, f64)>,
    controls: &FitControls,
) -> Result<(PeakFitResult, PeakFitResult), PeakFitError> {
    let (bg0, noise) = detect_peak(sp)?;
    let data = FitData::new(sp);
    let disp = dispersion_uev(sp);

    let (c1_uev, c2_uev) = match initial_centers {
        Some((a, b)) => (
            (a - data.origin_mev) * 1000.0,
            (b - data.origin_mev) * 1000.0,
        ),
        None => {
            let maxima = smoothed_maxima(sp, bg0, noise);
            if maxima.len() < 2 {
                return Err(PeakFitError::Unresolved { n_maxima: maxima.len() });
            }
            (data.x[maxima[0]], data.x[maxima[1]])
        }
    };

    let height_near = |c: f64| -> f64 {
        let i = data
            .x
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - c).abs().partial_cmp(&(b.1 - c).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        (data.y[i] - bg0).max(1e-6)
    };
    let span = disp * sp.counts.len() as f64;
    let w0 = (c2_uev - c1_uev)
        .abs()
        .max(moment_width_uev(&data, bg0, 0.5 * (c1_uev + c2_uev)) / 2.0)
        .clamp(2.0 * disp, 0.25 * span);
    let x0 = [height_near(c1_uev), c1_uev, height_near(c2_uev), c2_uev, w0 / 2.0, bg0];

    let problem = DoublePeakProblem { data: &data, shape };
    let fit = levmar(
        &problem,
        &x0,
        &LevMarOptions { max_iter: controls.max_iter, ..Default::default() },
    );

    let n = data.x.len();
    let dof = (n as f64 - 6.0).max(1.0);
    let cov = covariance_from_jtj(&fit.jtj, fit.cost / dof);
    let (lo, hi) = sp.energy_span_mev();
    let make = |amp_idx: usize, c_idx: usize| -> PeakFitResult {
        let centroid = data.origin_mev + fit.params[c_idx] / 1000.0;
        PeakFitResult {
            centroid,
            centroid_sigma: cov[(c_idx, c_idx)].max(0.0).sqrt().max(1e-12),
            fwhm: fit.params[4].abs(),
            amplitude: fit.params[amp_idx],
            background: fit.params[5],
            residual_norm: (fit.cost / n as f64).sqrt(),
            converged: fit.converged && centroid >= lo && centroid <= hi,
        }
    };
    let first = make(0, 1);
    let second = make(2, 3);
    if first.centroid <= second.centroid {
        Ok((first, second))
    } else {
        Ok((second, first))
    }
}

/// Two-line fit reduced to a single blended observable: the
/// amplitude-weighted mean position (equal widths make amplitude weighting
/// equivalent to area weighting) with a delta-method uncertainty.
fn weighted_centroid_of_double(
    sp: &Spectrum,
    shape: LineShape,
    initial_centers: (f64, f64),
    controls: &FitControls,
) -> Result<PeakFitResult, PeakFitError> {
    let (bg0, _) = detect_peak(sp)?;
    let data = FitData::new(sp);
    let c1_uev = (initial_centers.0 - data.origin_mev) * 1000.0;
    let c2_uev = (initial_centers.1 - data.origin_mev) * 1000.0;
    let disp = dispersion_uev(sp);
    let span = disp * sp.counts.len() as f64;
    let height_near = |c: f64| -> f64 {
        let i = data
            .x
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - c).abs().partial_cmp(&(b.1 - c).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        (data.y[i] - bg0).max(1e-6)
    };
    let w0 = ((c2_uev - c1_uev).abs() / 2.0).clamp(2.0 * disp, 0.25 * span);
    let x0 = [height_near(c1_uev), c1_uev, height_near(c2_uev), c2_uev, w0, bg0];
    let problem = DoublePeakProblem { data: &data, shape };
    let fit = levmar(
        &problem,
        &x0,
        &LevMarOptions { max_iter: controls.max_iter, ..Default::default() },
    );

    let a1 = fit.params[0];
    let a2 = fit.params[2];
    let (c1, c2) = (fit.params[1], fit.params[3]);
    let w = fit.params[4].abs();
    let total = a1 + a2;
    // A collapsed or sign-degenerate solution is not a usable two-line fit.
    if !(a1 > 0.0) || !(a2 > 0.0) || total <= 0.0 || (c1 - c2).abs() < 0.5 * w {
        return Err(PeakFitError::Unresolved { n_maxima: 1 });
    }

    let centroid_uev = (a1 * c1 + a2 * c2) / total;
    let n = data.x.len();
    let dof = (n as f64 - 6.0).max(1.0);
    let cov = covariance_from_jtj(&fit.jtj, fit.cost / dof);
    // Delta method over (a1, c1, a2, c2).
    let g = [
        (c1 - centroid_uev) / total,
        a1 / total,
        (c2 - centroid_uev) / total,
        a2 / total,
    ];
    let idx = [0usize, 1, 2, 3];
    let mut var = 0.0;
    for (gi, &i) in g.iter().zip(&idx) {
        for (gj, &j) in g.iter().zip(&idx) {
            var += gi * gj * cov[(i, j)];
        }
    }
    let centroid = data.origin_mev + centroid_uev / 1000.0;
    let (lo, hi) = sp.energy_span_mev();
    Ok(PeakFitResult {
        centroid,
        centroid_sigma: var.max(0.0).sqrt().max(1e-12),
        fwhm: w,
        amplitude: total,
        background: fit.params[5],
        residual_norm: (fit.cost / n as f64).sqrt(),
        converged: fit.converged && centroid >= lo && centroid <= hi,
    })
}

/// Which extraction strategy produced a scan's centroid table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidMode {
    /// One profile per spectrum; centroid of the (possibly blended) line.
    BlendedSingle,
    /// Two profiles per spectrum; amplitude-weighted mean of the two lines.
    TwoLineWeighted,
}

impl std::fmt::Display for CentroidMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CentroidMode::BlendedSingle => write!(f, "blended-single"),
            CentroidMode::TwoLineWeighted => write!(f, "two-line-weighted"),
        }
    }
}

/// One row of a centroid table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidRow {
    pub chi_deg: f64,
    pub kind: WaveplateKind,
    #[serde(rename = "centroid_meV")]
    pub centroid_mev: f64,
    #[serde(rename = "centroid_sigma_ueV")]
    pub centroid_sigma_uev: f64,
    #[serde(rename = "fwhm_ueV")]
    pub fwhm_uev: f64,
    pub converged: bool,
}

/// Centroid table for a scan plus extraction metadata.
#[derive(Debug, Clone)]
pub struct ScanCentroids {
    pub rows: Vec<CentroidRow>,
    pub mode: CentroidMode,
    /// Spectra skipped because no significant peak was found.
    pub n_skipped: usize,
}

/// Extract one centroid per spectrum, switching to two-line fits when the
/// centroid swing across the scan indicates a resolved doublet.
pub fn extract_scan_centroids(
    spectra: &[Spectrum],
    shape: LineShape,
    controls: &FitControls,
) -> Result<ScanCentroids, PeakFitError> {
    let mut rows = Vec::with_capacity(spectra.len());
    let mut singles: Vec<Option<PeakFitResult>> = Vec::with_capacity(spectra.len());
    let mut n_skipped = 0usize;
    for sp in spectra {
        match fit_single_peak_with(sp, shape, controls) {
            Ok(res) => {
                singles.push(Some(res));
                rows.push(row_from_result(sp, &res));
            }
            Err(PeakFitError::NoPeak { .. }) => {
                singles.push(None);
                n_skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Ok(ScanCentroids { rows, mode: CentroidMode::BlendedSingle, n_skipped });
    }

    let centroids: Vec<f64> = rows.iter().map(|r| r.centroid_mev).collect();
    let c_min = centroids.iter().cloned().fold(f64::MAX, f64::min);
    let c_max = centroids.iter().cloned().fold(f64::MIN, f64::max);
    let swing_uev = (c_max - c_min) * 1000.0;
    let mut fwhms: Vec<f64> = rows.iter().map(|r| r.fwhm_uev).collect();
    let fwhm_med = median(&mut fwhms);

    // Small swing: the doublet stays blended and single-profile centroids
    // already track the weighted line position.
    if swing_uev <= 0.9 * fwhm_med {
        return Ok(ScanCentroids { rows, mode: CentroidMode::BlendedSingle, n_skipped });
    }

    // Large swing: the single-profile centroid rails toward whichever line
    // dominates; refit each spectrum with two lines anchored at the extreme
    // centroids and blend them by amplitude.
    let anchors = (c_min, c_max);
    let mut used_two_line = false;
    let mut out = Vec::with_capacity(rows.len());
    for (single, sp) in singles.iter().zip(spectra) {
        let Some(single) = single else { continue };
        match weighted_centroid_of_double(sp, shape, anchors, controls) {
            Ok(res) => {
                used_two_line = true;
                out.push(row_from_result(sp, &res));
            }
            Err(_) => out.push(row_from_result(sp, single)),
        }
    }
    if used_two_line {
        Ok(ScanCentroids { rows: out, mode: CentroidMode::TwoLineWeighted, n_skipped })
    } else {
        Ok(ScanCentroids { rows, mode: CentroidMode::BlendedSingle, n_skipped })
    }
}

fn row_from_result(sp: &Spectrum, res: &PeakFitResult) -> CentroidRow {
    CentroidRow {
        chi_deg: sp.chi.to_degrees(),
        kind: sp.kind,
        centroid_mev: res.centroid,
        centroid_sigma_uev: res.centroid_sigma,
        fwhm_uev: res.fwhm,
        converged: res.converged,
    }
}

/// Write a centroid table as CSV (`chi_deg, kind, centroid_meV,
/// centroid_sigma_ueV, fwhm_ueV, converged`).
pub fn write_centroid_table(path: &Path, rows: &[CentroidRow]) -> Result<(), PeakFitError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_centroid_table(path: &Path) -> Result<Vec<CentroidRow>, PeakFitError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<CentroidRow>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exciton::{observed_energy, ExcitonDoublet};
    use crate::optics::{ChannelParams, WaveplateSetting};
    use crate::spectra::{
        angle_scan, line_profile, synthesize_scan, NoiseModel, SpectrometerConfig,
    };
    use approx::assert_abs_diff_eq;

    fn cfg() -> SpectrometerConfig {
        SpectrometerConfig::default()
    }

    fn spectrum_with_weights(
        c: &SpectrometerConfig,
        s_uev: f64,
        w1: f64,
        w2: f64,
        scale: f64,
    ) -> Spectrum {
        let e1 = c.center_energy_mev + s_uev / 2000.0;
        let e2 = c.center_energy_mev - s_uev / 2000.0;
        let p1 = line_profile(e1, c).unwrap();
        let p2 = line_profile(e2, c).unwrap();
        let counts: Vec<f64> = p1
            .iter()
            .zip(&p2)
            .map(|(a, b)| scale * (w1 * a + w2 * b))
            .collect();
        Spectrum {
            pixel_energies: c.pixel_energies(),
            counts,
            chi: 0.0,
            kind: WaveplateKind::Qwp,
        }
    }

    #[test]
    fn noiseless_lorentzian_self_fit_is_exact() {
        let c = SpectrometerConfig { instrument_fwhm_uev: 0.0, ..cfg() };
        let sp = spectrum_with_weights(&c, 0.0, 0.5, 0.5, 2e4);
        let res = fit_single_peak(&sp, LineShape::Lorentzian).unwrap();
        assert!(res.converged);
        assert_abs_diff_eq!(res.centroid, c.center_energy_mev, epsilon = 1e-8);
        assert_abs_diff_eq!(res.fwhm, c.line_fwhm_uev, epsilon = 1e-4);
        assert!(res.residual_norm < 1e-8);
    }

    #[test]
    fn noiseless_gaussian_self_fit_recovers_quadrature_width() {
        let c = SpectrometerConfig {
            shape: LineShape::Gaussian,
            line_fwhm_uev: 30.0,
            instrument_fwhm_uev: 40.0,
            ..cfg()
        };
        let sp = spectrum_with_weights(&c, 0.0, 1.0, 0.0, 1e4);
        let res = fit_single_peak(&sp, LineShape::Gaussian).unwrap();
        assert!(res.converged);
        assert_abs_diff_eq!(res.centroid, c.center_energy_mev, epsilon = 1e-7);
        assert_abs_diff_eq!(res.fwhm, 50.0, epsilon = 0.05);
        assert_abs_diff_eq!(res.amplitude / 1e4, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn symmetric_blended_doublet_centroid_is_mean_energy() {
        let c = SpectrometerConfig { line_fwhm_uev: 30.0, ..cfg() };
        let sp = spectrum_with_weights(&c, 20.0, 0.5, 0.5, 1e4);
        let res = fit_single_peak(&sp, LineShape::Lorentzian).unwrap();
        assert_abs_diff_eq!(res.centroid, c.center_energy_mev, epsilon = 1e-4);
    }

    #[test]
    fn blended_centroid_is_monotonic_in_line_weight() {
        let c = cfg();
        let mut last = f64::MIN;
        for i in 1..10 {
            let w1 = i as f64 / 10.0;
            let sp = spectrum_with_weights(&c, 20.0, w1, 1.0 - w1, 1e4);
            let res = fit_single_peak(&sp, LineShape::Lorentzian).unwrap();
            assert!(res.centroid > last, "w1={w1}: {} <= {last}", res.centroid);
            last = res.centroid;
        }
    }

    #[test]
    fn flat_spectrum_has_no_peak() {
        let c = cfg();
        let sp = Spectrum {
            pixel_energies: c.pixel_energies(),
            counts: vec![0.0; c.n_pixels],
            chi: 0.0,
            kind: WaveplateKind::Qwp,
        };
        assert!(matches!(
            fit_single_peak(&sp, LineShape::Lorentzian),
            Err(PeakFitError::NoPeak { .. })
        ));
    }

    #[test]
    fn short_spectrum_is_rejected() {
        let sp = Spectrum {
            pixel_energies: vec![800.0; 8],
            counts: vec![1.0; 8],
            chi: 0.0,
            kind: WaveplateKind::Qwp,
        };
        assert!(matches!(
            fit_single_peak(&sp, LineShape::Lorentzian),
            Err(PeakFitError::TooFewPixels(8))
        ));
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let sp = spectrum_with_weights(&cfg(), 60.0, 0.7, 0.3, 1e4);
        let res =
            fit_single_peak_with(&sp, LineShape::Lorentzian, &FitControls { max_iter: 1 })
                .unwrap();
        assert!(!res.converged);
    }

    #[test]
    fn resolved_doublet_splitting_recovered() {
        let c = SpectrometerConfig {
            instrument_fwhm_uev: 0.0,
            line_fwhm_uev: 30.0,
            ..cfg()
        };
        let sp = spectrum_with_weights(&c, 235.0, 0.6, 0.4, 1e4);
        let (low, high) = fit_double_peak(&sp, LineShape::Lorentzian, None).unwrap();
        let splitting = (high.centroid - low.centroid) * 1000.0;
        assert_abs_diff_eq!(splitting, 235.0, epsilon = 0.5);
        assert!(low.converged && high.converged);
    }

    #[test]
    fn double_fit_orders_lines_by_energy() {
        let c = SpectrometerConfig { instrument_fwhm_uev: 0.0, ..cfg() };
        let sp = spectrum_with_weights(&c, 200.0, 0.5, 0.5, 1e4);
        let e_lo = c.center_energy_mev - 0.1;
        let e_hi = c.center_energy_mev + 0.1;
        let a = fit_double_peak(&sp, LineShape::Lorentzian, Some((e_lo, e_hi))).unwrap();
        let b = fit_double_peak(&sp, LineShape::Lorentzian, Some((e_hi, e_lo))).unwrap();
        assert!(a.0.centroid < a.1.centroid);
        assert_abs_diff_eq!(a.0.centroid, b.0.centroid, epsilon = 1e-9);
        assert_abs_diff_eq!(a.1.centroid, b.1.centroid, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_doublet_with_centers_stays_at_mean() {
        let c = cfg();
        let sp = spectrum_with_weights(&c, 0.0, 0.5, 0.5, 1e4);
        let centers =
            (c.center_energy_mev - 0.01, c.center_energy_mev + 0.01);
        let (low, high) = fit_double_peak(&sp, LineShape::Lorentzian, Some(centers)).unwrap();
        assert_abs_diff_eq!(low.centroid, c.center_energy_mev, epsilon = 1e-3);
        assert_abs_diff_eq!(high.centroid, c.center_energy_mev, epsilon = 1e-3);
    }

    #[test]
    fn unresolved_doublet_without_centers_errors() {
        let sp = spectrum_with_weights(&cfg(), 20.0, 0.5, 0.5, 1e4);
        assert!(matches!(
            fit_double_peak(&sp, LineShape::Lorentzian, None),
            Err(PeakFitError::Unresolved { .. })
        ));
    }

    #[test]
    fn noisy_blended_centroid_tracks_weighted_energy() {
        // Unresolved doublet, asymmetric weights, counting noise: the fitted
        // centroid follows the weighted line energy to ~2 μeV (1σ).
        let c = cfg();
        let d = ExcitonDoublet::new(0.0, 20.0, 0.6).unwrap();
        let ch = ChannelParams::identity();
        let wp = WaveplateSetting::qwp(0.3);
        let expected_uev = observed_energy(&d, &ch, wp).unwrap();
        let n_seeds = 200;
        let mut errors = Vec::with_capacity(n_seeds);
        for seed in 0..n_seeds {
            let spectra = synthesize_scan(
                &d,
                &ch,
                &[wp],
                &c,
                &NoiseModel::poisson(1e4, seed as u64),
            )
            .unwrap();
            let res = fit_single_peak(&spectra[0], LineShape::Lorentzian).unwrap();
            let centroid_uev = (res.centroid - c.center_energy_mev) * 1000.0;
            errors.push(centroid_uev - expected_uev);
        }
        let mean = errors.iter().sum::<f64>() / n_seeds as f64;
        let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n_seeds as f64).sqrt();
        assert!(rms < 2.0, "rms deviation {rms} μeV exceeds 2 μeV");
        assert!(mean.abs() < 1.0, "bias {mean} μeV");
    }

    #[test]
    fn centroid_estimator_is_unbiased_under_counting_noise() {
        let c = cfg();
        let d = ExcitonDoublet::new(0.0, 20.0, 0.0).unwrap();
        let ch = ChannelParams::identity();
        let wp = WaveplateSetting::qwp(0.25);
        let expected_uev = observed_energy(&d, &ch, wp).unwrap();
        let n_seeds = 500;
        let mut sum = 0.0;
        let mut sigma_sum = 0.0;
        for seed in 0..n_seeds {
            let spectra = synthesize_scan(
                &d,
                &ch,
                &[wp],
                &c,
                &NoiseModel::poisson(1e4, 10_000 + seed as u64),
            )
            .unwrap();
            let res = fit_single_peak(&spectra[0], LineShape::Lorentzian).unwrap();
            sum += (res.centroid - c.center_energy_mev) * 1000.0 - expected_uev;
            sigma_sum += res.centroid_sigma;
        }
        let bias = sum / n_seeds as f64;
        let sigma = sigma_sum / n_seeds as f64;
        assert!(
            bias.abs() < sigma / 5.0,
            "bias {bias} μeV vs mean per-fit sigma {sigma} μeV"
        );
    }

    #[test]
    fn scan_extraction_switches_mode_with_splitting() {
        let c = cfg();
        let ch = ChannelParams::identity();
        let scan = angle_scan(WaveplateKind::Qwp, 0.0, 5.0_f64.to_radians(), 36);

        let small = ExcitonDoublet::new(0.0, 15.0, 0.0).unwrap();
        let spectra = synthesize_scan(&small, &ch, &scan, &c, &NoiseModel::none()).unwrap();
        let out = extract_scan_centroids(&spectra, LineShape::Lorentzian, &Default::default())
            .unwrap();
        assert_eq!(out.mode, CentroidMode::BlendedSingle);
        assert_eq!(out.rows.len(), 36);

        let large = ExcitonDoublet::new(0.0, 200.0, 0.0).unwrap();
        let spectra = synthesize_scan(&large, &ch, &scan, &c, &NoiseModel::none()).unwrap();
        let out = extract_scan_centroids(&spectra, LineShape::Lorentzian, &Default::default())
            .unwrap();
        assert_eq!(out.mode, CentroidMode::TwoLineWeighted);
        // Weighted two-line centroids still track the blended energy.
        for (row, wp) in out.rows.iter().zip(&scan) {
            let expected = observed_energy(&large, &ch, *wp).unwrap();
            let got = (row.centroid_mev - c.center_energy_mev) * 1000.0;
            assert_abs_diff_eq!(got, expected, epsilon = 1.0);
        }
    }

    #[test]
    fn centroid_table_round_trips() {
        let rows = vec![
            CentroidRow {
                chi_deg: 0.0,
                kind: WaveplateKind::Qwp,
                centroid_mev: 800.01,
                centroid_sigma_uev: 0.5,
                fwhm_uev: 41.0,
                converged: true,
            },
            CentroidRow {
                chi_deg: 5.0,
                kind: WaveplateKind::Qwp,
                centroid_mev: 800.02,
                centroid_sigma_uev: 0.6,
                fwhm_uev: 40.0,
                converged: false,
            },
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("centroids.csv");
        write_centroid_table(&path, &rows).unwrap();
        let read = read_centroid_table(&path).unwrap();
        assert_eq!(read, rows);
    }
}
