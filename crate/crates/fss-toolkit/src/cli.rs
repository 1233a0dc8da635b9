//! Batch pipeline driver behind the `fss` binary: `simulate`, `fit`,
//! `stats`, `afm`, and the end-to-end `pipeline` command.
//!
//! Every command is deterministic given (config, seed): work items draw
//! from derived ChaCha8 streams, parallel workers merge in dot order, and
//! outputs carry the resolved configuration and tool version instead of
//! timestamps. Exit codes: 0 success, 2 input/config error, 3 partial
//! analytic failure.

use crate::afm::{
    analyze_map, morphology_summary, read_png_gray16, read_sidecar, read_text_matrix,
    write_dot_table, MorphologySummary, SegmentOptions,
};
use crate::exciton::ExcitonDoublet;
use crate::fssfit::{fit_scan, FitOptions, FssCurve, FssFitRecord, write_fit_records};
use crate::optics::{ChannelParams, WaveplateKind};
use crate::peakfit::{extract_scan_centroids, write_centroid_table, CentroidRow, FitControls};
use crate::rng::{derive_seed, rng_from_seed, GENERATOR_ID};
use crate::spectra::{
    angle_scan, read_scan_bundle, synthesize_scan, write_scan_bundle, LineShape, NoiseKind,
    NoiseModel, ScanTruth, SpectrometerConfig, Spectrum,
};
use crate::stats::{
    improvement_from_means, pearson, summarize_cohorts, write_dot_records, write_histogram_csv,
    write_polar_csv, write_scatter_csv, read_dot_records, histogram, polar_table, Cohort,
    CohortSummary, Correlation, DotRecord, format_summary_line,
};
use crate::units::energy_mev_for_wavelength_nm;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key \"{key}\": {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("analysis failed for {}:\n{}", failures.len(), failures.join("\n"))]
    Analysis { failures: Vec<String> },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Analysis { .. } => 3,
            _ => 2,
        }
    }

    fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config { key: key.to_string(), message: message.into() }
    }
}

// ---------------------------------------------------------------------------
// Declarative run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubletConfig {
    #[serde(rename = "epsilon_ueV", default)]
    pub epsilon_uev: f64,
    #[serde(rename = "s_ueV", default = "default_s")]
    pub s_uev: f64,
    #[serde(default)]
    pub p: f64,
}

fn default_s() -> f64 {
    42.0
}

impl Default for DoubletConfig {
    fn default() -> Self {
        Self { epsilon_uev: 0.0, s_uev: default_s(), p: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default = "default_theta_deg")]
    pub theta_deg: f64,
    #[serde(default = "default_phi_deg")]
    pub phi_deg: f64,
}

fn default_theta_deg() -> f64 {
    35.0
}
fn default_phi_deg() -> f64 {
    20.0
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { theta_deg: default_theta_deg(), phi_deg: default_phi_deg() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_kind")]
    pub kind: WaveplateKind,
    #[serde(default)]
    pub chi_start_deg: f64,
    #[serde(default = "default_chi_step")]
    pub chi_step_deg: f64,
    #[serde(default = "default_n_angles")]
    pub n_angles: usize,
}

fn default_kind() -> WaveplateKind {
    WaveplateKind::Qwp
}
fn default_chi_step() -> f64 {
    5.0
}
fn default_n_angles() -> usize {
    36
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            chi_start_deg: 0.0,
            chi_step_deg: default_chi_step(),
            n_angles: default_n_angles(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    #[serde(default = "default_peak_counts")]
    pub peak_counts: f64,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Poisson
}
fn default_peak_counts() -> f64 {
    1e4
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { kind: default_noise_kind(), peak_counts: default_peak_counts() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Line shape for the peak fits; defaults to the spectrometer shape.
    #[serde(default)]
    pub shape: Option<LineShape>,
    #[serde(default)]
    pub fit_p: bool,
    #[serde(default)]
    pub fixed_p: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    200
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { shape: None, fit_p: false, fixed_p: 0.0, max_iter: default_max_iter() }
    }
}

/// Random cohort of dots for the end-to-end pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DotsConfig {
    #[serde(default = "default_n_dots")]
    pub n_dots: usize,
    #[serde(rename = "s_range_ueV", default = "default_s_range")]
    pub s_range_uev: [f64; 2],
    #[serde(default = "default_theta_range")]
    pub theta_range_deg: [f64; 2],
    #[serde(default = "default_phi_range")]
    pub phi_range_deg: [f64; 2],
    #[serde(default)]
    pub p: f64,
    #[serde(default = "default_wavelength_range")]
    pub wavelength_range_nm: [f64; 2],
    #[serde(default = "default_cohort")]
    pub cohort: String,
    /// Also write every synthetic spectrum bundle to disk (slow for large
    /// cohorts; centroid tables and fits are always written).
    #[serde(default)]
    pub keep_spectra: bool,
}

fn default_n_dots() -> usize {
    8
}
fn default_s_range() -> [f64; 2] {
    [5.0, 250.0]
}
fn default_theta_range() -> [f64; 2] {
    [0.0, 180.0]
}
fn default_phi_range() -> [f64; 2] {
    [-180.0, 180.0]
}
fn default_wavelength_range() -> [f64; 2] {
    [1540.0, 1560.0]
}
fn default_cohort() -> String {
    "DE_InP".to_string()
}

impl Default for DotsConfig {
    fn default() -> Self {
        Self {
            n_dots: default_n_dots(),
            s_range_uev: default_s_range(),
            theta_range_deg: default_theta_range(),
            phi_range_deg: default_phi_range(),
            p: 0.0,
            wavelength_range_nm: default_wavelength_range(),
            cohort: default_cohort(),
            keep_spectra: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(rename = "thresholds_ueV", default = "default_thresholds")]
    pub thresholds_uev: Vec<f64>,
    #[serde(rename = "histogram_bin_ueV", default = "default_bin")]
    pub histogram_bin_uev: f64,
}

fn default_thresholds() -> Vec<f64> {
    vec![40.0]
}
fn default_bin() -> f64 {
    20.0
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { thresholds_uev: default_thresholds(), histogram_bin_uev: default_bin() }
    }
}

/// Versioned declarative configuration for all pipeline commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default)]
    pub doublet: DoubletConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub spectrometer: SpectrometerConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub dots: Option<DotsConfig>,
    #[serde(default)]
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            generator: default_generator(),
            doublet: DoubletConfig::default(),
            channel: ChannelConfig::default(),
            scan: ScanConfig::default(),
            spectrometer: SpectrometerConfig::default(),
            noise: NoiseConfig::default(),
            fit: FitConfig::default(),
            dots: None,
            stats: StatsConfig::default(),
        }
    }
}

fn default_generator() -> String {
    GENERATOR_ID.to_string()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.generator != GENERATOR_ID {
            return Err(CliError::config(
                "generator",
                format!("unknown generator {:?} (only {GENERATOR_ID:?} is available)", self.generator),
            ));
        }
        if !(-1.0..=1.0).contains(&self.doublet.p) {
            return Err(CliError::config(
                "doublet.p",
                format!("polarization degree p must lie in [-1, 1], got {}", self.doublet.p),
            ));
        }
        self.spectrometer
            .validate()
            .map_err(|e| CliError::config("spectrometer", e.to_string()))?;
        if self.noise.kind != NoiseKind::None && !(self.noise.peak_counts > 0.0) {
            return Err(CliError::config(
                "noise.peak_counts",
                format!("must be > 0 with noise enabled, got {}", self.noise.peak_counts),
            ));
        }
        if self.scan.n_angles == 0 {
            return Err(CliError::config("scan.n_angles", "must be at least 1"));
        }
        if self.scan.chi_step_deg == 0.0 && self.scan.n_angles > 1 {
            return Err(CliError::config("scan.chi_step_deg", "must be nonzero"));
        }
        if let Some(dots) = &self.dots {
            if dots.n_dots == 0 {
                return Err(CliError::config("dots.n_dots", "must be at least 1"));
            }
            if dots.s_range_uev[0] > dots.s_range_uev[1] {
                return Err(CliError::config("dots.s_range_ueV", "range is inverted"));
            }
            if !(-1.0..=1.0).contains(&dots.p) {
                return Err(CliError::config(
                    "dots.p",
                    format!("polarization degree p must lie in [-1, 1], got {}", dots.p),
                ));
            }
            if dots.wavelength_range_nm[0] <= 0.0 {
                return Err(CliError::config("dots.wavelength_range_nm", "must be positive"));
            }
        }
        if !(self.stats.histogram_bin_uev > 0.0) {
            return Err(CliError::config("stats.histogram_bin_ueV", "must be > 0"));
        }
        Ok(())
    }

    fn noise_model(&self) -> NoiseModel {
        NoiseModel { kind: self.noise.kind, peak_counts: self.noise.peak_counts, seed: self.seed }
    }

    fn fit_shape(&self) -> LineShape {
        self.fit.shape.unwrap_or(self.spectrometer.shape)
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            fit_p: self.fit.fit_p,
            fixed_p: self.fit.fixed_p,
            max_iter: self.fit.max_iter,
            seed: self.seed,
        }
    }
}

/// Run `f` on a worker pool with `threads` workers (None = rayon default).
/// Results merge deterministically regardless of the pool size.
pub fn with_worker_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Input(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SimulateOutput {
    pub dir: PathBuf,
    pub n_spectra: usize,
}

pub fn cmd_simulate(config: &RunConfig, out_dir: &Path) -> Result<SimulateOutput, CliError> {
    config.validate()?;
    let doublet =
        ExcitonDoublet::new(config.doublet.epsilon_uev, config.doublet.s_uev, config.doublet.p)
            .map_err(|e| CliError::config("doublet.p", e.to_string()))?;
    let channel = ChannelParams::new(
        config.channel.theta_deg.to_radians(),
        config.channel.phi_deg.to_radians(),
    );
    let scan = angle_scan(
        config.scan.kind,
        config.scan.chi_start_deg.to_radians(),
        config.scan.chi_step_deg.to_radians(),
        config.scan.n_angles,
    );
    let noise = config.noise_model();
    let spectra = synthesize_scan(&doublet, &channel, &scan, &config.spectrometer, &noise)
        .map_err(|e| CliError::config("spectrometer", e.to_string()))?;
    std::fs::create_dir_all(out_dir)?;
    write_scan_bundle(
        out_dir,
        &spectra,
        &config.spectrometer,
        &noise,
        Some(ScanTruth { doublet, channel }),
    )
    .map_err(|e| CliError::Input(e.to_string()))?;
    // Echo the resolved config next to the bundle for provenance.
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serializes") + "\n",
    )?;
    Ok(SimulateOutput { dir: out_dir.to_path_buf(), n_spectra: spectra.len() })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct FitOutput {
    pub record: FssFitRecord,
    pub centroid_rows: Vec<CentroidRow>,
    pub fits_path: PathBuf,
}

fn fit_spectra_to_record(
    dot_id: &str,
    spectra: &[Spectrum],
    shape: LineShape,
    opts: &FitOptions,
    max_iter: usize,
) -> Result<(FssFitRecord, Vec<CentroidRow>), String> {
    let centroids =
        extract_scan_centroids(spectra, shape, &FitControls { max_iter })
            .map_err(|e| format!("{dot_id}: peak fitting failed: {e}"))?;
    let curve = FssCurve::from_centroids(&centroids.rows)
        .ok_or_else(|| format!("{dot_id}: no converged centroids"))?;
    let fit = fit_scan(&curve, opts).map_err(|e| format!("{dot_id}: {e}"))?;
    let mut record = FssFitRecord::from_result(dot_id, &fit);
    record.centroid_mode = Some(centroids.mode.to_string());
    Ok((record, centroids.rows))
}

pub fn cmd_fit(
    bundle_dir: &Path,
    out_dir: &Path,
    dot_id: &str,
    shape_override: Option<LineShape>,
    opts: &FitOptions,
) -> Result<FitOutput, CliError> {
    if !bundle_dir.join(crate::spectra::MANIFEST_FILE).exists() {
        return Err(CliError::Input(format!(
            "missing manifest.json in {}",
            bundle_dir.display()
        )));
    }
    let (manifest, spectra) =
        read_scan_bundle(bundle_dir).map_err(|e| CliError::Input(e.to_string()))?;
    let shape = shape_override.unwrap_or(manifest.spectrometer.shape);
    let (record, rows) =
        fit_spectra_to_record(dot_id, &spectra, shape, opts, opts.max_iter)
            .map_err(|msg| CliError::Analysis { failures: vec![msg] })?;
    std::fs::create_dir_all(out_dir)?;
    let centroid_path = out_dir.join("centroids.csv");
    write_centroid_table(&centroid_path, &rows)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let fits_path = out_dir.join("fits.json");
    write_fit_records(&fits_path, std::slice::from_ref(&record))
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(FitOutput { record, centroid_rows: rows, fits_path })
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortComparison {
    pub a: String,
    pub b: String,
    pub ratio: f64,
    pub percent_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub n_records: usize,
    pub cohorts: BTreeMap<String, CohortSummary>,
    pub lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<CohortComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelength_correlation: Option<Correlation>,
}

pub fn cmd_stats(
    records_csv: &Path,
    thresholds: &[f64],
    bin_width_uev: f64,
    out_dir: &Path,
) -> Result<StatsReport, CliError> {
    let records = read_dot_records(records_csv).map_err(|e| CliError::Input(e.to_string()))?;
    if records.is_empty() {
        return Err(CliError::Input(format!("no records in {}", records_csv.display())));
    }
    let report = build_stats_report(&records, thresholds)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    write_scatter_csv(&out_dir.join("scatter.csv"), &records)
        .map_err(|e| CliError::Input(e.to_string()))?;
    for cohort in [Cohort::SkInp, Cohort::DeInp, Cohort::DeGaas, Cohort::Custom] {
        let subset: Vec<&DotRecord> = records.iter().filter(|r| r.cohort == cohort).collect();
        if subset.is_empty() {
            continue;
        }
        let values: Vec<f64> = subset.iter().map(|r| r.s_uev).collect();
        let bins = histogram(&values, bin_width_uev)
            .map_err(|e| CliError::Input(e.to_string()))?;
        write_histogram_csv(
            &out_dir.join(format!("histogram_{}.csv", cohort.label())),
            &bins,
        )
        .map_err(|e| CliError::Input(e.to_string()))?;
        let owned: Vec<DotRecord> = subset.into_iter().cloned().collect();
        let polar = polar_table(&owned);
        if !polar.is_empty() {
            write_polar_csv(&out_dir.join(format!("polar_{}.csv", cohort.label())), &polar)
                .map_err(|e| CliError::Input(e.to_string()))?;
        }
    }
    Ok(report)
}

pub fn build_stats_report(
    records: &[DotRecord],
    thresholds: &[f64],
) -> Result<StatsReport, CliError> {
    let cohorts = summarize_cohorts(records, thresholds);
    let lines: Vec<String> = cohorts
        .iter()
        .map(|(label, summary)| format_summary_line(label, summary))
        .collect();
    let mut comparisons = Vec::new();
    if let (Some(sk), Some(de)) = (cohorts.get("SK_InP"), cohorts.get("DE_InP")) {
        if let Ok(m) = improvement_from_means(sk.mean, de.mean) {
            comparisons.push(CohortComparison {
                a: "SK_InP".into(),
                b: "DE_InP".into(),
                ratio: m.ratio,
                percent_change: m.percent_change,
            });
        }
    }
    let wavelength_correlation = if records.len() >= 3 {
        pearson(&records.iter().map(|r| (r.wavelength_nm, r.s_uev)).collect::<Vec<_>>()).ok()
    } else {
        None
    };
    Ok(StatsReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        n_records: records.len(),
        cohorts,
        lines,
        comparisons,
        wavelength_correlation,
    })
}

// ---------------------------------------------------------------------------
// afm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AfmReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub n_dots: usize,
    pub scan_area_um2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub morphology: Option<MorphologySummary>,
    pub warning: Option<String>,
}

pub fn cmd_afm(
    image: &Path,
    sidecar_path: &Path,
    out_dir: &Path,
    opts: &SegmentOptions,
) -> Result<AfmReport, CliError> {
    if !sidecar_path.exists() {
        return Err(CliError::Input(format!("missing sidecar {}", sidecar_path.display())));
    }
    let sidecar = read_sidecar(sidecar_path).map_err(|e| CliError::Input(e.to_string()))?;
    let is_png = image
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    let map = if is_png {
        read_png_gray16(image, &sidecar)
    } else {
        read_text_matrix(image, &sidecar)
    }
    .map_err(|e| CliError::Input(e.to_string()))?;

    let fits = analyze_map(&map, opts).map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::create_dir_all(out_dir)?;
    write_dot_table(&out_dir.join("dots.csv"), &fits)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let report = AfmReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        n_dots: fits.len(),
        scan_area_um2: map.area_um2(),
        morphology: morphology_summary(&fits, map.area_um2()).ok(),
        warning: if fits.is_empty() { Some("no dots found (flat map?)".into()) } else { None },
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotTruth {
    #[serde(rename = "s_ueV")]
    pub s_uev: f64,
    pub theta_rad: f64,
    pub phi_rad: f64,
    pub p: f64,
    pub wavelength_nm: f64,
    #[serde(rename = "epsilon_meV")]
    pub epsilon_mev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotReport {
    pub dot_id: String,
    pub truth: DotTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FssFitRecord>,
    #[serde(rename = "s_abs_error_ueV", default, skip_serializing_if = "Option::is_none")]
    pub s_abs_error_uev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_dots: usize,
    pub n_fitted: usize,
    #[serde(rename = "n_within_2ueV")]
    pub n_within_2uev: usize,
    #[serde(rename = "fraction_within_2ueV")]
    pub fraction_within_2uev: f64,
    #[serde(rename = "max_abs_error_ueV")]
    pub max_abs_error_uev: Option<f64>,
    pub cohorts: BTreeMap<String, CohortSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub generator: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dots: Vec<DotReport>,
    pub summary: PipelineSummary,
}

/// Simulate a cohort of dots, fit every scan, and aggregate statistics into
/// one report. Per-dot work runs on the active worker pool; the merge order
/// is fixed by dot index, so the report is byte-identical for any pool size.
pub fn cmd_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineReport, CliError> {
    config.validate()?;
    let dots_cfg = config.dots.clone().unwrap_or_default();
    let shape = config.fit_shape();
    let fit_opts = config.fit_options();

    std::fs::create_dir_all(out_dir)?;
    let dots_dir = out_dir.join("dots");
    std::fs::create_dir_all(&dots_dir)?;

    let indices: Vec<usize> = (0..dots_cfg.n_dots).collect();
    let reports: Vec<(DotReport, Option<(PathBuf, Vec<CentroidRow>)>)> = indices
        .par_iter()
        .map(|&i| run_one_dot(config, &dots_cfg, shape, &fit_opts, i, &dots_dir))
        .collect();

    // Deterministic writes after the parallel section, in dot order.
    let mut dot_reports = Vec::with_capacity(reports.len());
    for (report, centroids) in reports {
        if let Some((path, rows)) = centroids {
            write_centroid_table(&path, &rows).map_err(|e| CliError::Input(e.to_string()))?;
        }
        dot_reports.push(report);
    }

    let records: Vec<DotRecord> = dot_reports
        .iter()
        .filter_map(|d| {
            d.fit.as_ref().map(|f| DotRecord {
                dot_id: d.dot_id.clone(),
                cohort: Cohort::parse(&dots_cfg.cohort),
                wavelength_nm: d.truth.wavelength_nm,
                s_uev: f.s_uev,
                s_sigma_uev: f.s_sigma_uev,
                dipole_rad: Some(f.dipole_rad),
                model: f.model,
            })
        })
        .collect();
    if !records.is_empty() {
        write_dot_records(&out_dir.join("records.csv"), &records)
            .map_err(|e| CliError::Input(e.to_string()))?;
    }

    let errors: Vec<f64> =
        dot_reports.iter().filter_map(|d| d.s_abs_error_uev).collect();
    let n_within = errors.iter().filter(|e| **e < 2.0).count();
    let summary = PipelineSummary {
        n_dots: dot_reports.len(),
        n_fitted: errors.len(),
        n_within_2uev: n_within,
        fraction_within_2uev: if errors.is_empty() {
            0.0
        } else {
            n_within as f64 / errors.len() as f64
        },
        max_abs_error_uev: errors.iter().cloned().fold(None, |acc, e| {
            Some(acc.map_or(e, |a: f64| a.max(e)))
        }),
        cohorts: summarize_cohorts(&records, &config.stats.thresholds_uev),
    };

    let report = PipelineReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        generator: config.generator.clone(),
        seed: config.seed,
        config: config.clone(),
        dots: dot_reports,
        summary,
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;

    let failures: Vec<String> = report
        .dots
        .iter()
        .filter_map(|d| d.error.as_ref().map(|e| format!("{} ({e})", d.dot_id)))
        .collect();
    if !failures.is_empty() {
        return Err(CliError::Analysis { failures });
    }
    Ok(report)
}

fn run_one_dot(
    config: &RunConfig,
    dots_cfg: &DotsConfig,
    shape: LineShape,
    fit_opts: &FitOptions,
    index: usize,
    dots_dir: &Path,
) -> (DotReport, Option<(PathBuf, Vec<CentroidRow>)>) {
    let dot_id = format!("dot_{index:03}");
    let mut rng = rng_from_seed(derive_seed(config.seed, index as u64));
    let s = rng.gen_range(dots_cfg.s_range_uev[0]..=dots_cfg.s_range_uev[1]);
    let theta = rng
        .gen_range(dots_cfg.theta_range_deg[0]..=dots_cfg.theta_range_deg[1])
        .to_radians();
    let phi = rng
        .gen_range(dots_cfg.phi_range_deg[0]..=dots_cfg.phi_range_deg[1])
        .to_radians();
    let wavelength = rng
        .gen_range(dots_cfg.wavelength_range_nm[0]..=dots_cfg.wavelength_range_nm[1]);
    let center_mev = energy_mev_for_wavelength_nm(wavelength);

    let truth = DotTruth {
        s_uev: s,
        theta_rad: theta,
        phi_rad: phi,
        p: dots_cfg.p,
        wavelength_nm: wavelength,
        epsilon_mev: center_mev,
    };

    let doublet = match ExcitonDoublet::new(0.0, s, dots_cfg.p) {
        Ok(d) => d,
        Err(e) => {
            return (
                DotReport {
                    dot_id,
                    truth,
                    fit: None,
                    s_abs_error_uev: None,
                    error: Some(format!("simulate stage: {e}")),
                },
                None,
            )
        }
    };
    let channel = ChannelParams::new(theta, phi);
    let scan = angle_scan(
        config.scan.kind,
        config.scan.chi_start_deg.to_radians(),
        config.scan.chi_step_deg.to_radians(),
        config.scan.n_angles,
    );
    let cfg = SpectrometerConfig { center_energy_mev: center_mev, ..config.spectrometer };
    let noise = NoiseModel {
        kind: config.noise.kind,
        peak_counts: config.noise.peak_counts,
        seed: derive_seed(config.seed, 1_000_000 + index as u64),
    };

    let spectra = match synthesize_scan(&doublet, &channel, &scan, &cfg, &noise) {
        Ok(s) => s,
        Err(e) => {
            return (
                DotReport {
                    dot_id,
                    truth,
                    fit: None,
                    s_abs_error_uev: None,
                    error: Some(format!("simulate stage: {e}")),
                },
                None,
            )
        }
    };
    if dots_cfg.keep_spectra {
        let dir = dots_dir.join(&dot_id);
        let _ = std::fs::create_dir_all(&dir);
        let _ = write_scan_bundle(
            &dir,
            &spectra,
            &cfg,
            &noise,
            Some(ScanTruth { doublet, channel }),
        );
    }

    match fit_spectra_to_record(&dot_id, &spectra, shape, fit_opts, config.fit.max_iter) {
        Ok((record, rows)) => {
            let err = (record.s_uev - s).abs();
            let centroid_path = dots_dir.join(format!("{dot_id}_centroids.csv"));
            (
                DotReport {
                    dot_id,
                    truth,
                    fit: Some(record),
                    s_abs_error_uev: Some(err),
                    error: None,
                },
                Some((centroid_path, rows)),
            )
        }
        Err(msg) => (
            DotReport {
                dot_id,
                truth,
                fit: None,
                s_abs_error_uev: None,
                error: Some(format!("fit stage: {msg}")),
            },
            None,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn out_of_range_polarization_names_the_key() {
        let mut config = RunConfig::default();
        config.doublet.p = 1.5;
        let err = config.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains('p'), "message should cite p: {msg}");
        assert!(msg.contains("1.5"));
    }

    #[test]
    fn unknown_generator_is_rejected() {
        let mut config = RunConfig::default();
        config.generator = "mt19937".into();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("generator"));
    }

    #[test]
    fn config_json_round_trips() {
        let config = RunConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.seed, config.seed);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let text = r#"{"schema_version": 1, "sseed": 3}"#;
        let parsed: Result<RunConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }
}
