//! Synthetic spectrometer: renders the transmitted doublet at each waveplate
//! angle as a pixelated, optionally noisy spectrum.
//!
//! Line profiles are unit area on the pixel grid (counts per μeV). Profiles
//! needing a true convolution (Lorentzian-tailed shapes under a Gaussian
//! instrument response) are evaluated on an 8× oversampled grid, convolved,
//! and sampled back at pixel centers; Gaussian-only cases use the exact
//! quadrature-sum width instead.
//!
//! Scans are deterministic for a fixed seed: each spectrum consumes its own
//! ChaCha8 stream derived from (seed, spectrum index), so serial and
//! parallel generation agree bit-exactly.

use crate::exciton::ExcitonDoublet;
use crate::optics::{
    measurement_state, projection_weights, ChannelParams, WaveplateKind, WaveplateSetting,
};
use crate::rng::{derive_seed, rng_from_seed, GENERATOR_ID};
use crate::units::uev_to_mev;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Ratio between the composite FWHM of a Voigt profile and the common FWHM
/// of its Lorentzian and Gaussian components (Olivero–Longbothum).
const VOIGT_EQUAL_COMPONENT_RATIO: f64 = 1.637_587_7;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spectrometer config: {0}")]
    InvalidConfig(String),
    #[error("line center {center_mev} meV is off-grid (allowed {lo}..{hi} meV)")]
    OffGrid { center_mev: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Model(#[from] crate::exciton::ModelError),
    #[error(transparent)]
    Optics(#[from] crate::optics::OpticsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed spectrum file {path}: {message}")]
    Format { path: String, message: String },
}

/// Intrinsic line shape of the emission before the instrument response.
///
/// `Voigt` uses equal-width Lorentzian and Gaussian components scaled so the
/// composite FWHM equals the configured line width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineShape {
    Lorentzian,
    Gaussian,
    Voigt,
}

impl std::fmt::Display for LineShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LineShape::Lorentzian => write!(f, "lorentzian"),
            LineShape::Gaussian => write!(f, "gaussian"),
            LineShape::Voigt => write!(f, "voigt"),
        }
    }
}

impl std::str::FromStr for LineShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lorentzian" => Ok(LineShape::Lorentzian),
            "gaussian" => Ok(LineShape::Gaussian),
            "voigt" => Ok(LineShape::Voigt),
            other => Err(format!("unknown line shape {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrometerConfig {
    /// Absolute energy of the central pixel, meV.
    pub center_energy_mev: f64,
    pub n_pixels: usize,
    /// Energy per pixel, μeV.
    pub dispersion_uev: f64,
    /// FWHM of the Gaussian instrument response, μeV (0 disables it).
    pub instrument_fwhm_uev: f64,
    pub shape: LineShape,
    /// Intrinsic line FWHM, μeV.
    pub line_fwhm_uev: f64,
}

impl Default for SpectrometerConfig {
    fn default() -> Self {
        Self {
            center_energy_mev: 800.0,
            n_pixels: 1024,
            dispersion_uev: 10.0,
            instrument_fwhm_uev: 30.0,
            shape: LineShape::Lorentzian,
            line_fwhm_uev: 20.0,
        }
    }
}

impl SpectrometerConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_pixels < 16 {
            return Err(SynthError::InvalidConfig(format!(
                "n_pixels must be >= 16, got {}",
                self.n_pixels
            )));
        }
        if !(self.dispersion_uev > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "dispersion_uev must be > 0, got {}",
                self.dispersion_uev
            )));
        }
        if !(self.instrument_fwhm_uev >= 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "instrument_fwhm_uev must be >= 0, got {}",
                self.instrument_fwhm_uev
            )));
        }
        if !(self.line_fwhm_uev > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "line_fwhm_uev must be > 0, got {}",
                self.line_fwhm_uev
            )));
        }
        Ok(())
    }

    /// Absolute pixel-center energies, meV.
    pub fn pixel_energies(&self) -> Vec<f64> {
        let mid = 0.5 * (self.n_pixels as f64 - 1.0);
        (0..self.n_pixels)
            .map(|i| self.center_energy_mev + uev_to_mev((i as f64 - mid) * self.dispersion_uev))
            .collect()
    }

    /// Full grid span, μeV.
    pub fn span_uev(&self) -> f64 {
        self.n_pixels as f64 * self.dispersion_uev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Poisson,
    /// Signal-independent Gaussian noise with σ = √peak_counts.
    GaussianAdditive,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Poisson => write!(f, "poisson"),
            NoiseKind::GaussianAdditive => write!(f, "gaussianadditive"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Expected counts at the maximum of a fully transmitted line; also the
    /// overall intensity scale of noiseless spectra (0 leaves them unit
    /// area). Must be > 0 when noise is enabled.
    pub peak_counts: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self { kind: NoiseKind::None, peak_counts: 1e4, seed: 0 }
    }

    pub fn poisson(peak_counts: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Poisson, peak_counts, seed }
    }

    pub fn gaussian(peak_counts: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::GaussianAdditive, peak_counts, seed }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.kind != NoiseKind::None && !(self.peak_counts > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "peak_counts must be > 0 with noise enabled, got {}",
                self.peak_counts
            )));
        }
        Ok(())
    }
}

/// One pixelated spectrum at a fixed waveplate setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Pixel-center energies, meV (ascending).
    pub pixel_energies: Vec<f64>,
    /// Nonnegative counts per pixel.
    pub counts: Vec<f64>,
    /// Waveplate angle, radians.
    pub chi: f64,
    pub kind: WaveplateKind,
}

impl Spectrum {
    /// Intensity-weighted mean energy, meV.
    pub fn centroid(&self) -> f64 {
        let total: f64 = self.counts.iter().sum();
        let weighted: f64 =
            self.pixel_energies.iter().zip(&self.counts).map(|(e, c)| e * c).sum();
        weighted / total
    }

    pub fn total_counts(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn energy_span_mev(&self) -> (f64, f64) {
        (self.pixel_energies[0], *self.pixel_energies.last().unwrap())
    }
}

fn lorentzian_unit_area(x_uev: f64, fwhm_uev: f64) -> f64 {
    let u = 2.0 * x_uev / fwhm_uev;
    2.0 / (std::f64::consts::PI * fwhm_uev) / (1.0 + u * u)
}

fn gaussian_unit_area(x_uev: f64, fwhm_uev: f64) -> f64 {
    let sigma = fwhm_uev / (8.0 * std::f64::consts::LN_2).sqrt();
    (-0.5 * (x_uev / sigma) * (x_uev / sigma)).exp()
        / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Lorentzian core FWHM and Gaussian kernel FWHM equivalent to the
/// configured intrinsic shape plus instrument response.
fn decompose_profile(cfg: &SpectrometerConfig) -> (Option<f64>, f64) {
    let instr = cfg.instrument_fwhm_uev;
    match cfg.shape {
        LineShape::Gaussian => {
            (None, (cfg.line_fwhm_uev.powi(2) + instr.powi(2)).sqrt())
        }
        LineShape::Lorentzian => (Some(cfg.line_fwhm_uev), instr),
        LineShape::Voigt => {
            let comp = cfg.line_fwhm_uev / VOIGT_EQUAL_COMPONENT_RATIO;
            (Some(comp), (comp.powi(2) + instr.powi(2)).sqrt())
        }
    }
}

/// Unit-area profile of the configured shape convolved with the instrument
/// response, sampled at pixel centers (counts per μeV; grid area exactly 1).
///
/// The line center must lie within ±25% of the grid span from the grid
/// center.
pub fn line_profile(center_mev: f64, cfg: &SpectrometerConfig) -> Result<Vec<f64>, SynthError> {
    cfg.validate()?;
    let offset_uev = (center_mev - cfg.center_energy_mev) * 1000.0;
    let max_off = 0.25 * cfg.span_uev();
    if offset_uev.abs() > max_off {
        let lo = cfg.center_energy_mev - uev_to_mev(max_off);
        let hi = cfg.center_energy_mev + uev_to_mev(max_off);
        return Err(SynthError::OffGrid { center_mev, lo, hi });
    }

    let mid = 0.5 * (cfg.n_pixels as f64 - 1.0);
    let pixel_x =
        |i: usize| (i as f64 - mid) * cfg.dispersion_uev - offset_uev;

    let (lorentz_fwhm, gauss_fwhm) = decompose_profile(cfg);
    let mut values = match (lorentz_fwhm, gauss_fwhm) {
        (None, g) => (0..cfg.n_pixels).map(|i| gaussian_unit_area(pixel_x(i), g)).collect(),
        (Some(l), g) if g <= 0.0 => {
            (0..cfg.n_pixels).map(|i| lorentzian_unit_area(pixel_x(i), l)).collect()
        }
        (Some(l), g) => convolved_samples(cfg, offset_uev, l, g),
    };

    let area: f64 = values.iter().sum::<f64>() * cfg.dispersion_uev;
    for v in &mut values {
        *v /= area;
    }
    Ok(values)
}

/// Lorentzian ⊗ Gaussian on an 8× oversampled grid, sampled back at pixel
/// centers.
fn convolved_samples(
    cfg: &SpectrometerConfig,
    offset_uev: f64,
    lorentz_fwhm: f64,
    gauss_fwhm: f64,
) -> Vec<f64> {
    const OVERSAMPLE: usize = 8;
    let step = cfg.dispersion_uev / OVERSAMPLE as f64;
    let sigma = gauss_fwhm / (8.0 * std::f64::consts::LN_2).sqrt();
    let half_kernel = ((6.0 * sigma / step).ceil() as usize).max(1);
    // Pad so every pixel center has a full kernel's worth of neighbours.
    let pad = half_kernel + OVERSAMPLE;
    let mid = 0.5 * (cfg.n_pixels as f64 - 1.0);

    let n_fine = cfg.n_pixels * OVERSAMPLE + 2 * pad;
    let fine_x = |j: usize| (j as isize - pad as isize) as f64 * step - mid * cfg.dispersion_uev
        - offset_uev;
    let fine: Vec<f64> = (0..n_fine).map(|j| lorentzian_unit_area(fine_x(j), lorentz_fwhm)).collect();

    let mut kernel: Vec<f64> = (0..=2 * half_kernel)
        .map(|k| {
            let x = (k as isize - half_kernel as isize) as f64 * step;
            (-0.5 * (x / sigma) * (x / sigma)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    (0..cfg.n_pixels)
        .map(|i| {
            let j0 = pad + i * OVERSAMPLE;
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * fine[j0 + k - half_kernel])
                .sum()
        })
        .collect()
}

/// Relative intensities of the two doublet lines transmitted at one
/// waveplate setting: ((1+p)/2·α₁, (1−p)/2·α₂).
pub fn line_intensities(
    d: &ExcitonDoublet,
    ch: &ChannelParams,
    wp: WaveplateSetting,
) -> Result<(f64, f64), SynthError> {
    let m = measurement_state(wp);
    let (a1, a2) = projection_weights(&m, ch)?;
    Ok((0.5 * (1.0 + d.p) * a1, 0.5 * (1.0 - d.p) * a2))
}

/// Render the transmitted doublet for every waveplate setting of a scan.
///
/// Noiseless intensities are scaled so the brightest pixel of the whole
/// scan equals `noise.peak_counts` (when > 0); noise is then applied per
/// spectrum from seeds derived as (noise.seed, spectrum index).
pub fn synthesize_scan(
    d: &ExcitonDoublet,
    ch: &ChannelParams,
    scan: &[WaveplateSetting],
    cfg: &SpectrometerConfig,
    noise: &NoiseModel,
) -> Result<Vec<Spectrum>, SynthError> {
    cfg.validate()?;
    noise.validate()?;
    let e_h_mev = cfg.center_energy_mev + uev_to_mev(d.e_h());
    let e_v_mev = cfg.center_energy_mev + uev_to_mev(d.e_v());
    let profile_h = line_profile(e_h_mev, cfg)?;
    let profile_v = line_profile(e_v_mev, cfg)?;
    let energies = cfg.pixel_energies();

    let raw: Vec<Vec<f64>> = scan
        .par_iter()
        .map(|&wp| {
            let (i1, i2) = line_intensities(d, ch, wp)?;
            Ok((0..cfg.n_pixels)
                .map(|px| i1 * profile_h[px] + i2 * profile_v[px])
                .collect())
        })
        .collect::<Result<_, SynthError>>()?;

    let raw_max = raw
        .iter()
        .flat_map(|s| s.iter())
        .cloned()
        .fold(0.0_f64, f64::max);
    let scale = if noise.peak_counts > 0.0 && raw_max > 0.0 {
        noise.peak_counts / raw_max
    } else {
        1.0
    };

    let spectra: Vec<Spectrum> = raw
        .into_par_iter()
        .enumerate()
        .map(|(index, mut counts)| {
            for c in &mut counts {
                *c *= scale;
            }
            apply_noise(&mut counts, noise, index as u64);
            Spectrum {
                pixel_energies: energies.clone(),
                counts,
                chi: scan[index].chi(),
                kind: scan[index].kind,
            }
        })
        .collect();
    Ok(spectra)
}

fn apply_noise(counts: &mut [f64], noise: &NoiseModel, index: u64) {
    match noise.kind {
        NoiseKind::None => {}
        NoiseKind::Poisson => {
            let mut rng = rng_from_seed(derive_seed(noise.seed, index));
            for c in counts.iter_mut() {
                *c = if *c > 1e-12 {
                    Poisson::new(*c).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
            }
        }
        NoiseKind::GaussianAdditive => {
            let mut rng = rng_from_seed(derive_seed(noise.seed, index));
            let sigma = noise.peak_counts.sqrt();
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for c in counts.iter_mut() {
                *c = (*c + normal.sample(&mut rng)).max(0.0);
            }
        }
    }
}

/// Evenly spaced waveplate settings: `n` angles from `start` in steps of
/// `step` (radians).
pub fn angle_scan(kind: WaveplateKind, start: f64, step: f64, n: usize) -> Vec<WaveplateSetting> {
    (0..n).map(|i| WaveplateSetting::new(kind, start + i as f64 * step)).collect()
}

// ---------------------------------------------------------------------------
// Scan bundles on disk: one CSV per spectrum plus a JSON manifest.
// ---------------------------------------------------------------------------

/// Generating parameters echoed into a manifest when the scan is synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanTruth {
    pub doublet: ExcitonDoublet,
    pub channel: ChannelParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub generator: String,
    pub seed: u64,
    pub kind: WaveplateKind,
    pub chi_deg: Vec<f64>,
    pub files: Vec<String>,
    pub spectrometer: SpectrometerConfig,
    pub noise_kind: NoiseKind,
    pub peak_counts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<ScanTruth>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write a scan as `spectrum_###.csv` files plus `manifest.json` under `dir`.
pub fn write_scan_bundle(
    dir: &Path,
    spectra: &[Spectrum],
    cfg: &SpectrometerConfig,
    noise: &NoiseModel,
    truth: Option<ScanTruth>,
) -> Result<ScanManifest, SynthError> {
    std::fs::create_dir_all(dir)?;
    let kind = spectra.first().map(|s| s.kind).unwrap_or(WaveplateKind::Qwp);
    let mut files = Vec::with_capacity(spectra.len());
    let mut chi_deg = Vec::with_capacity(spectra.len());
    for (i, sp) in spectra.iter().enumerate() {
        let name = format!("spectrum_{i:03}.csv");
        write_spectrum_csv(&dir.join(&name), sp, cfg, noise, i as u64)?;
        chi_deg.push(sp.chi.to_degrees());
        files.push(name);
    }
    let manifest = ScanManifest {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        generator: GENERATOR_ID.to_string(),
        seed: noise.seed,
        kind,
        chi_deg,
        files,
        spectrometer: *cfg,
        noise_kind: noise.kind,
        peak_counts: noise.peak_counts,
        truth,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

fn write_spectrum_csv(
    path: &Path,
    sp: &Spectrum,
    cfg: &SpectrometerConfig,
    noise: &NoiseModel,
    index: u64,
) -> Result<(), SynthError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# chi_deg={}", sp.chi.to_degrees())?;
    writeln!(f, "# kind={}", sp.kind)?;
    writeln!(f, "# seed={}", noise.seed)?;
    writeln!(f, "# spectrum_seed={}", derive_seed(noise.seed, index))?;
    writeln!(f, "# generator={GENERATOR_ID}")?;
    writeln!(
        f,
        "# config: center_energy_mev={} n_pixels={} dispersion_uev={} instrument_fwhm_uev={} shape={} line_fwhm_uev={} noise={} peak_counts={}",
        cfg.center_energy_mev,
        cfg.n_pixels,
        cfg.dispersion_uev,
        cfg.instrument_fwhm_uev,
        cfg.shape,
        cfg.line_fwhm_uev,
        noise.kind,
        noise.peak_counts
    )?;
    writeln!(f, "pixel_energy_meV,counts")?;
    for (e, c) in sp.pixel_energies.iter().zip(&sp.counts) {
        writeln!(f, "{e},{c}")?;
    }
    Ok(())
}

/// Read one spectrum CSV (chi and kind come from the `#` header lines).
pub fn read_spectrum_csv(path: &Path) -> Result<Spectrum, SynthError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut chi_deg: Option<f64> = None;
    let mut kind: Option<WaveplateKind> = None;
    let mut pixel_energies = Vec::new();
    let mut counts = Vec::new();
    let mut saw_data_header = false;
    let badly = |message: String| SynthError::Format {
        path: path.display().to_string(),
        message,
    };

    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("chi_deg=") {
                chi_deg =
                    Some(v.trim().parse().map_err(|e| badly(format!("bad chi_deg: {e}")))?);
            } else if let Some(v) = rest.strip_prefix("kind=") {
                kind = Some(v.trim().parse().map_err(badly)?);
            }
            continue;
        }
        if !saw_data_header {
            // Column header row.
            saw_data_header = true;
            continue;
        }
        let mut parts = trimmed.split(',');
        let e: f64 = parts
            .next()
            .ok_or_else(|| badly("missing energy column".into()))?
            .trim()
            .parse()
            .map_err(|e| badly(format!("bad energy value: {e}")))?;
        let c: f64 = parts
            .next()
            .ok_or_else(|| badly("missing counts column".into()))?
            .trim()
            .parse()
            .map_err(|e| badly(format!("bad counts value: {e}")))?;
        pixel_energies.push(e);
        counts.push(c);
    }

    let chi_deg = chi_deg.ok_or_else(|| badly("missing '# chi_deg=' header".into()))?;
    let kind = kind.ok_or_else(|| badly("missing '# kind=' header".into()))?;
    if pixel_energies.is_empty() {
        return Err(badly("no data rows".into()));
    }
    Ok(Spectrum { pixel_energies, counts, chi: chi_deg.to_radians(), kind })
}

/// Read `manifest.json` plus every spectrum it lists.
pub fn read_scan_bundle(dir: &Path) -> Result<(ScanManifest, Vec<Spectrum>), SynthError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: ScanManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let spectra = manifest
        .files
        .iter()
        .map(|f| read_spectrum_csv(&dir.join(f)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, spectra))
}

/// Paths of all files a bundle writes, for byte-level comparisons.
pub fn bundle_files(dir: &Path, manifest: &ScanManifest) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = manifest.files.iter().map(|f| dir.join(f)).collect();
    v.push(dir.join(MANIFEST_FILE));
    v
}
