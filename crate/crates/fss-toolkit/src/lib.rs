//! Simulation, fitting, and statistics toolkit for measuring the exciton
//! fine-structure splitting (FSS) of single quantum dots from
//! polarization-resolved spectroscopy.
//!
//! The toolkit covers the full measurement chain:
//!
//! 1. [`optics`] — exact two-mode polarization algebra: Jones vectors,
//!    density matrices, the birefringent channel, and the rotating
//!    quarter-/half-wave-plate measurement bases.
//! 2. [`exciton`] — the exciton doublet source model and the forward model
//!    for the spectrometer centroid shift `ΔE(χ)` as a waveplate rotates.
//! 3. [`spectra`] — a synthetic spectrometer that renders the transmitted
//!    doublet as pixelated, noisy spectra with a seeded, portable RNG.
//! 4. [`peakfit`] — line-shape fits that extract centroids, including
//!    sub-resolution centroid shifts of unresolved doublets.
//! 5. [`fssfit`] — the inverse problem: weighted least-squares fits of
//!    measured `ΔE(χ)` curves recovering splitting, channel rotation and
//!    phase, polarization degree, and mean energy with uncertainties.
//! 6. [`stats`] — cohort statistics over per-dot results (means, spreads,
//!    threshold fractions, wavelength correlation, histograms, polar tables).
//! 7. [`afm`] — AFM topography analysis: dot segmentation and
//!    moment-based ellipse fits for aspect-ratio/orientation statistics.
//! 8. [`cli`] — the batch pipeline driver behind the `fss` binary
//!    (`simulate`, `fit`, `stats`, `afm`, `pipeline`).
//!
//! Conventions: angles are radians throughout the library (the CLI speaks
//! degrees), splittings and energy shifts are μeV, absolute line positions
//! are meV, and every stochastic step is reproducible from a single 64-bit
//! seed. See the `examples/` directory for one runnable program per
//! capability.

pub mod afm;
pub mod cli;
pub mod exciton;
pub mod fssfit;
pub mod optics;
pub mod optim;
pub mod peakfit;
pub mod rng;
pub mod spectra;
pub mod stats;
pub mod units;

pub use exciton::{ExcitonDoublet, FssCurvePoint};
pub use fssfit::{FitOptions, FssCurve, FssFitResult};
pub use optics::{ChannelParams, JonesVector, PolDensity, WaveplateKind, WaveplateSetting};
pub use peakfit::PeakFitResult;
pub use spectra::{LineShape, NoiseModel, SpectrometerConfig, Spectrum};
pub use stats::{CohortSummary, DotRecord};
