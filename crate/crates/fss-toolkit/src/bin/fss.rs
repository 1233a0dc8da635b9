//! Batch command-line driver: simulate polarization-resolved scans, fit
//! them, aggregate cohort statistics, and analyze AFM topography.

use clap::{Args, Parser, Subcommand};
use fss_toolkit::afm::SegmentOptions;
use fss_toolkit::cli::{
    cmd_afm, cmd_fit, cmd_pipeline, cmd_simulate, cmd_stats, with_worker_pool, CliError,
    RunConfig,
};
use fss_toolkit::fssfit::FitOptions;
use fss_toolkit::spectra::LineShape;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fss",
    version,
    about = "Quantum-dot fine-structure-splitting measurement toolkit"
)]
struct Cli {
    /// Worker pool size (default: number of processors).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration (schema_version 1).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a waveplate scan and write it as a CSV bundle + manifest.
    Simulate(ConfigArgs),
    /// Fit a scan bundle: per-spectrum centroids, then the ΔE(χ) model.
    Fit {
        /// Directory containing manifest.json and spectrum CSVs.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Identifier recorded in the fit output.
        #[arg(long, default_value = "dot_000")]
        dot_id: String,
        /// Peak-fit line shape (defaults to the bundle's shape).
        #[arg(long)]
        shape: Option<String>,
        /// Fit the polarization degree instead of holding it fixed.
        #[arg(long)]
        fit_p: bool,
        /// Value of p when held fixed.
        #[arg(long, default_value_t = 0.0)]
        fixed_p: f64,
    },
    /// Cohort statistics from a dot-record CSV.
    Stats {
        /// CSV: dot_id, cohort, wavelength_nm, s_ueV, s_sigma_ueV, dipole_rad, model.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Splitting thresholds (μeV) for fraction-below reporting.
        #[arg(long = "threshold-uev", default_values_t = vec![40.0])]
        thresholds_uev: Vec<f64>,
        /// Histogram bin width, μeV.
        #[arg(long, default_value_t = 20.0)]
        bin_width_uev: f64,
    },
    /// Segment an AFM height map and fit dot ellipses.
    Afm {
        /// Height map: 16-bit grayscale PNG or plain-text matrix.
        #[arg(long)]
        image: PathBuf,
        /// JSON sidecar with pixel_size_nm and the height scale.
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Detection threshold in background sigmas.
        #[arg(long, default_value_t = 5.0)]
        threshold_sigma: f64,
        /// Minimum dot area in pixels.
        #[arg(long, default_value_t = 20)]
        min_area: usize,
    },
    /// End-to-end: simulate a dot cohort, fit every scan, aggregate stats.
    Pipeline(ConfigArgs),
}

fn parse_shape(s: &str) -> Result<LineShape, CliError> {
    s.parse().map_err(|e: String| CliError::Input(e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    match cli.command {
        Command::Simulate(args) => {
            let config = args.load()?;
            let out = with_worker_pool(threads, || cmd_simulate(&config, &args.out))??;
            println!("wrote {} spectra + manifest to {}", out.n_spectra, out.dir.display());
        }
        Command::Fit { bundle, out, dot_id, shape, fit_p, fixed_p } => {
            let shape = shape.as_deref().map(parse_shape).transpose()?;
            let opts = FitOptions { fit_p, fixed_p, ..Default::default() };
            let result = with_worker_pool(threads, || {
                cmd_fit(&bundle, &out, &dot_id, shape, &opts)
            })??;
            let r = &result.record;
            println!(
                "{}: model {} s = {:.2} ± {:.2} μeV  θ = {:.1}°  φ = {:.1}°  p = {:.3}  (χ²_red {:.3}, {} points) -> {}",
                r.dot_id,
                r.model,
                r.s_uev,
                r.s_sigma_uev,
                r.theta_rad.to_degrees(),
                r.phi_rad.to_degrees(),
                r.p,
                r.chi2_reduced,
                r.n_points,
                result.fits_path.display()
            );
        }
        Command::Stats { records, out, thresholds_uev, bin_width_uev } => {
            let report = cmd_stats(&records, &thresholds_uev, bin_width_uev, &out)?;
            for line in &report.lines {
                println!("{line}");
            }
            for c in &report.comparisons {
                println!(
                    "{} / {}: ratio {:.2} ({:.0}% change)",
                    c.a, c.b, c.ratio, c.percent_change
                );
            }
            if let Some(corr) = &report.wavelength_correlation {
                println!(
                    "wavelength correlation: r = {:.3} (p = {:.3}, n = {})",
                    corr.r, corr.p_value, corr.n
                );
            }
        }
        Command::Afm { image, sidecar, out, threshold_sigma, min_area } => {
            let opts = SegmentOptions { threshold_sigma, min_area_px: min_area };
            let report = cmd_afm(&image, &sidecar, &out, &opts)?;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            match &report.morphology {
                Some(m) => println!(
                    "{} dots on {:.2} μm² (density {:.2e} cm⁻²), mean aspect ratio {:.2}",
                    report.n_dots, report.scan_area_um2, m.density_per_cm2, m.mean_aspect_ratio
                ),
                None => println!("0 dots on {:.2} μm²", report.scan_area_um2),
            }
        }
        Command::Pipeline(args) => {
            let config = args.load()?;
            let report = with_worker_pool(threads, || cmd_pipeline(&config, &args.out))??;
            println!(
                "{} dots: {} fitted, {}/{} within 2 μeV (max error {:.3} μeV) -> {}",
                report.summary.n_dots,
                report.summary.n_fitted,
                report.summary.n_within_2uev,
                report.summary.n_fitted,
                report.summary.max_abs_error_uev.unwrap_or(f64::NAN),
                args.out.join("report.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
