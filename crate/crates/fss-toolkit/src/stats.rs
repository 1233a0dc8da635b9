//! Population statistics over per-dot fit results: cohort summaries,
//! threshold fractions, growth-method comparisons, wavelength correlation,
//! and histogram/polar tables for external plotting.

use crate::optics::WaveplateKind;
use crate::rng::rng_from_seed;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("degenerate correlation input: {0} has zero variance")]
    DegenerateVariance(&'static str),
    #[error("bin width must be positive, got {0}")]
    NonPositiveBinWidth(f64),
    #[error("baseline mean must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("record {row}: {message}")]
    BadRecord { row: usize, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Growth/material cohorts compared in the analysis; unrecognized labels
/// are grouped under `Custom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cohort {
    SkInp,
    DeInp,
    DeGaas,
    Custom,
}

impl Cohort {
    pub fn label(&self) -> &'static str {
        match self {
            Cohort::SkInp => "SK_InP",
            Cohort::DeInp => "DE_InP",
            Cohort::DeGaas => "DE_GaAs",
            Cohort::Custom => "custom",
        }
    }

    /// Never fails: unknown labels become `Custom`.
    pub fn parse(s: &str) -> Self {
        match s {
            "SK_InP" => Cohort::SkInp,
            "DE_InP" => Cohort::DeInp,
            "DE_GaAs" => Cohort::DeGaas,
            _ => Cohort::Custom,
        }
    }
}

impl Serialize for Cohort {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Cohort {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Cohort::parse(&String::deserialize(d)?))
    }
}

/// One quantum dot's analysis result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotRecord {
    pub dot_id: String,
    pub cohort: Cohort,
    pub wavelength_nm: f64,
    #[serde(rename = "s_ueV")]
    pub s_uev: f64,
    #[serde(rename = "s_sigma_ueV")]
    pub s_sigma_uev: f64,
    /// Dipole orientation, rad; reported modulo π.
    pub dipole_rad: Option<f64>,
    pub model: WaveplateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    #[serde(rename = "threshold_ueV")]
    pub threshold_uev: f64,
    pub fraction: f64,
}

/// Sample statistics of one cohort's splittings (μeV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean, std/√n.
    pub sem: f64,
    /// Sample standard deviation (n−1 denominator); 0 with
    /// `single_sample = true` when n = 1.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub fraction_below: Vec<ThresholdFraction>,
    /// Spread statistics are undefined for a single record.
    pub single_sample: bool,
}

/// Mean, sample standard deviation, and SEM of a cohort.
pub fn summarize(values: &[f64]) -> Result<CohortSummary, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyCohort);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let (std, single_sample) = if n == 1 {
        (0.0, true)
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (var.sqrt(), false)
    };
    let sem = std / (n as f64).sqrt();
    Ok(CohortSummary {
        n,
        mean,
        sem,
        std,
        min: values.iter().cloned().fold(f64::MAX, f64::min),
        max: values.iter().cloned().fold(f64::MIN, f64::max),
        fraction_below: Vec::new(),
        single_sample,
    })
}

/// Summary with `fraction_below` evaluated at the given thresholds.
pub fn summarize_with_thresholds(
    values: &[f64],
    thresholds: &[f64],
) -> Result<CohortSummary, StatsError> {
    let mut summary = summarize(values)?;
    summary.fraction_below = thresholds
        .iter()
        .map(|&t| {
            Ok(ThresholdFraction { threshold_uev: t, fraction: fraction_below(values, t)? })
        })
        .collect::<Result<_, StatsError>>()?;
    Ok(summary)
}

/// Fraction of values strictly below the threshold.
pub fn fraction_below(values: &[f64], threshold: f64) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyCohort);
    }
    Ok(values.iter().filter(|v| **v < threshold).count() as f64 / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementMetrics {
    /// a / b of the compared means.
    pub ratio: f64,
    /// (a − b)/b × 100.
    pub percent_change: f64,
}

/// Compare two cohort means (`a` against the baseline `b`).
pub fn improvement_from_means(a_mean: f64, b_mean: f64) -> Result<ImprovementMetrics, StatsError> {
    if !(b_mean > 0.0) {
        return Err(StatsError::NonPositiveBaseline(b_mean));
    }
    Ok(ImprovementMetrics {
        ratio: a_mean / b_mean,
        percent_change: (a_mean - b_mean) / b_mean * 100.0,
    })
}

pub fn improvement_metrics(
    a: &CohortSummary,
    b: &CohortSummary,
) -> Result<ImprovementMetrics, StatsError> {
    improvement_from_means(a.mean, b.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided significance from the t statistic with n−2 dof.
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation between emission wavelength and splitting.
pub fn wavelength_correlation(records: &[DotRecord]) -> Result<Correlation, StatsError> {
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.wavelength_nm, r.s_uev)).collect();
    pearson(&pairs)
}

/// Pearson correlation of arbitrary (x, y) pairs with a t-test p-value.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<Correlation, StatsError> {
    let n = pairs.len();
    if n < 3 {
        return Err(StatsError::TooFewRecords { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(StatsError::DegenerateVariance("x"));
    }
    if syy <= 0.0 {
        return Err(StatsError::DegenerateVariance("y"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let dof = nf - 2.0;
    let p_value = if (1.0 - r * r) < 1e-15 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { r, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    #[serde(rename = "lo_ueV")]
    pub lo: f64,
    #[serde(rename = "hi_ueV")]
    pub hi: f64,
    pub count: usize,
}

/// Left-closed bins [k·w, (k+1)·w) starting at zero and covering the data.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<HistogramBin>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyCohort);
    }
    if !(bin_width > 0.0) {
        return Err(StatsError::NonPositiveBinWidth(bin_width));
    }
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let n_bins = ((max / bin_width).floor() as usize) + 1;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|k| HistogramBin { lo: k as f64 * bin_width, hi: (k + 1) as f64 * bin_width, count: 0 })
        .collect();
    for &v in values {
        let k = ((v / bin_width).floor() as usize).min(n_bins - 1);
        bins[k].count += 1;
    }
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    /// Dipole angle folded to [0, π), rad.
    pub angle_rad: f64,
    #[serde(rename = "s_ueV")]
    pub s_uev: f64,
}

/// (dipole angle mod π, splitting) pairs for polar plots; records without a
/// dipole angle are skipped.
pub fn polar_table(records: &[DotRecord]) -> Vec<PolarPoint> {
    records
        .iter()
        .filter_map(|r| {
            r.dipole_rad
                .map(|a| PolarPoint { angle_rad: a.rem_euclid(PI), s_uev: r.s_uev })
        })
        .collect()
}

/// Splittings of every record in the given cohort.
pub fn cohort_values(records: &[DotRecord], cohort: Cohort) -> Vec<f64> {
    records.iter().filter(|r| r.cohort == cohort).map(|r| r.s_uev).collect()
}

/// Per-cohort summaries keyed by cohort label, in stable order.
pub fn summarize_cohorts(
    records: &[DotRecord],
    thresholds: &[f64],
) -> BTreeMap<String, CohortSummary> {
    let mut out = BTreeMap::new();
    for cohort in [Cohort::SkInp, Cohort::DeInp, Cohort::DeGaas, Cohort::Custom] {
        let values = cohort_values(records, cohort);
        if let Ok(summary) = summarize_with_thresholds(&values, thresholds) {
            out.insert(cohort.label().to_string(), summary);
        }
    }
    out
}

/// Human-readable one-liner: `SK_InP: 176 ± 9 μeV (n=43)` with integer μeV
/// rounding.
pub fn format_summary_line(label: &str, s: &CohortSummary) -> String {
    if s.single_sample {
        format!("{label}: {:.0} μeV (n=1, spread undefined)", s.mean)
    } else {
        format!("{label}: {:.0} ± {:.0} μeV (n={})", s.mean, s.sem, s.n)
    }
}

/// Draw a cohort whose *sample* mean and sample standard deviation equal the
/// targets exactly, with support above `lower` (values are redrawn, then the
/// sample is affinely restandardized until the bound holds).
pub fn synthetic_cohort(mean: f64, std: f64, n: usize, lower: f64, seed: u64) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![mean];
    }
    let mut rng = rng_from_seed(seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = mean + std * z;
            if x >= lower {
                return x;
            }
        }
    };
    let mut xs: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
    for _round in 0..300 {
        standardize_exact(&mut xs, mean, std);
        let bad: Vec<usize> =
            (0..n).filter(|&i| xs[i] < lower).collect();
        if bad.is_empty() {
            return xs;
        }
        for i in bad {
            xs[i] = draw(&mut rng);
        }
    }
    standardize_exact(&mut xs, mean, std);
    for x in &mut xs {
        *x = x.max(lower);
    }
    xs
}

fn standardize_exact(xs: &mut [f64], mean: f64, std: f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 0.0 {
        return;
    }
    let k = std / sd;
    for x in xs.iter_mut() {
        *x = mean + (*x - m) * k;
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const DOT_CSV_HEADER: [&str; 7] =
    ["dot_id", "cohort", "wavelength_nm", "s_ueV", "s_sigma_ueV", "dipole_rad", "model"];

pub fn write_dot_records(path: &Path, records: &[DotRecord]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DOT_CSV_HEADER)?;
    for r in records {
        w.write_record(&[
            r.dot_id.clone(),
            r.cohort.label().to_string(),
            r.wavelength_nm.to_string(),
            r.s_uev.to_string(),
            r.s_sigma_uev.to_string(),
            r.dipole_rad.map(|v| v.to_string()).unwrap_or_default(),
            r.model.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dot_records(path: &Path) -> Result<Vec<DotRecord>, StatsError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2; // header is line 1
        let field = |j: usize| -> Result<&str, StatsError> {
            rec.get(j).ok_or(StatsError::BadRecord {
                row,
                message: format!("missing column {}", DOT_CSV_HEADER[j]),
            })
        };
        let parse_f64 = |j: usize| -> Result<f64, StatsError> {
            field(j)?.trim().parse().map_err(|e| StatsError::BadRecord {
                row,
                message: format!("bad {}: {e}", DOT_CSV_HEADER[j]),
            })
        };
        let dipole = field(5)?.trim();
        out.push(DotRecord {
            dot_id: field(0)?.to_string(),
            cohort: Cohort::parse(field(1)?.trim()),
            wavelength_nm: parse_f64(2)?,
            s_uev: parse_f64(3)?,
            s_sigma_uev: parse_f64(4)?,
            dipole_rad: if dipole.is_empty() {
                None
            } else {
                Some(dipole.parse().map_err(|e| StatsError::BadRecord {
                    row,
                    message: format!("bad dipole_rad: {e}"),
                })?)
            },
            model: field(6)?.trim().parse().map_err(|message| StatsError::BadRecord {
                row,
                message,
            })?,
        });
    }
    Ok(out)
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lo_ueV", "hi_ueV", "count"])?;
    for b in bins {
        w.write_record(&[b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_polar_csv(path: &Path, points: &[PolarPoint]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["angle_rad", "s_ueV"])?;
    for p in points {
        w.write_record(&[p.angle_rad.to_string(), p.s_uev.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter of (wavelength, splitting) per record, for correlation plots.
pub fn write_scatter_csv(path: &Path, records: &[DotRecord]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dot_id", "cohort", "wavelength_nm", "s_ueV"])?;
    for r in records {
        w.write_record(&[
            r.dot_id.clone(),
            r.cohort.label().to_string(),
            r.wavelength_nm.to_string(),
            r.s_uev.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn two_value_summary_by_hand() {
        let s = summarize(&[10.0, 20.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 15.0);
        assert_abs_diff_eq!(s.std, 50.0_f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.sem, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn single_record_is_flagged() {
        let s = summarize(&[42.0]).unwrap();
        assert_eq!(s.n, 1);
        assert_abs_diff_eq!(s.mean, 42.0);
        assert_eq!(s.std, 0.0);
        assert!(s.single_sample);
        assert_eq!(format_summary_line("DE_InP", &s), "DE_InP: 42 μeV (n=1, spread undefined)");
    }

    #[test]
    fn empty_cohort_is_an_error() {
        assert!(matches!(summarize(&[]), Err(StatsError::EmptyCohort)));
    }

    #[test]
    fn exact_moment_cohort_reproduces_reported_numbers() {
        let xs = synthetic_cohort(176.0, 58.8, 43, 0.0, 7);
        let s = summarize(&xs).unwrap();
        assert_relative_eq!(s.mean, 176.0, epsilon = 1e-9);
        assert_relative_eq!(s.std, 58.8, epsilon = 1e-9);
        assert_abs_diff_eq!(s.sem, 58.8 / 43.0_f64.sqrt(), epsilon = 1e-9);
        assert_eq!(format_summary_line("SK_InP", &s), "SK_InP: 176 ± 9 μeV (n=43)");
        assert!(xs.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn fraction_below_examples() {
        assert_abs_diff_eq!(fraction_below(&[50.0, 60.0, 70.0], 40.0).unwrap(), 0.0);
        assert_abs_diff_eq!(fraction_below(&[10.0, 50.0], f64::INFINITY).unwrap(), 1.0);
        assert_abs_diff_eq!(fraction_below(&[10.0, 50.0, 70.0], 50.0).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn improvement_examples() {
        let fss = improvement_from_means(176.0, 42.0).unwrap();
        assert!(fss.ratio > 4.0);
        assert_relative_eq!(fss.ratio, 4.19, epsilon = 0.01);

        let symmetry = improvement_from_means(0.91, 0.53).unwrap();
        assert_relative_eq!(symmetry.percent_change, 71.7, epsilon = 0.05);
        assert_eq!(format!("{:.0}%", symmetry.percent_change), "72%");

        let same = improvement_from_means(42.0, 42.0).unwrap();
        assert_abs_diff_eq!(same.ratio, 1.0);
        assert_abs_diff_eq!(same.percent_change, 0.0);

        assert!(matches!(
            improvement_from_means(1.0, 0.0),
            Err(StatsError::NonPositiveBaseline(_))
        ));
    }

    fn record(wavelength: f64, s: f64) -> DotRecord {
        DotRecord {
            dot_id: "d".into(),
            cohort: Cohort::DeInp,
            wavelength_nm: wavelength,
            s_uev: s,
            s_sigma_uev: 1.0,
            dipole_rad: None,
            model: WaveplateKind::Qwp,
        }
    }

    #[test]
    fn perfect_correlations_hit_plus_minus_one() {
        let up: Vec<DotRecord> = (0..10).map(|i| record(1500.0 + i as f64, i as f64)).collect();
        let c = wavelength_correlation(&up).unwrap();
        assert_abs_diff_eq!(c.r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.p_value, 0.0, epsilon = 1e-12);

        let down: Vec<DotRecord> =
            (0..10).map(|i| record(1500.0 + i as f64, -(i as f64))).collect();
        let c = wavelength_correlation(&down).unwrap();
        assert_abs_diff_eq!(c.r, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn independent_draws_have_small_correlation_usually() {
        let mut ok = 0;
        let n_seeds = 100;
        for seed in 0..n_seeds {
            let mut rng = rng_from_seed(seed);
            let records: Vec<DotRecord> = (0..100)
                .map(|_| record(rng.gen_range(880.0..920.0), rng.gen_range(5.0..90.0)))
                .collect();
            if wavelength_correlation(&records).unwrap().r.abs() < 0.2 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/{n_seeds} seeds below |r| = 0.2");
    }

    #[test]
    fn degenerate_variance_is_rejected() {
        let records: Vec<DotRecord> = (0..5).map(|i| record(1550.0, i as f64)).collect();
        assert!(matches!(
            wavelength_correlation(&records),
            Err(StatsError::DegenerateVariance("x"))
        ));
    }

    #[test]
    fn histogram_examples() {
        let bins = histogram(&[5.0, 15.0, 25.0], 10.0).unwrap();
        assert_eq!(bins.len(), 3);
        assert!(bins.iter().all(|b| b.count == 1));

        let one = histogram(&[5.0, 15.0, 25.0], 100.0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].count, 3);

        assert!(matches!(
            histogram(&[1.0], 0.0),
            Err(StatsError::NonPositiveBinWidth(_))
        ));
    }

    #[test]
    fn polar_angles_fold_modulo_pi() {
        let mut r = record(1550.0, 20.0);
        r.dipole_rad = Some(PI + 0.3);
        let table = polar_table(&[r]);
        assert_eq!(table.len(), 1);
        assert_abs_diff_eq!(table[0].angle_rad, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn dot_records_round_trip_csv() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("dots.csv");
        let records = vec![
            DotRecord {
                dot_id: "dot_000".into(),
                cohort: Cohort::SkInp,
                wavelength_nm: 1551.2,
                s_uev: 235.0,
                s_sigma_uev: 3.0,
                dipole_rad: Some(0.6),
                model: WaveplateKind::Qwp,
            },
            DotRecord {
                dot_id: "dot_001".into(),
                cohort: Cohort::parse("whatever"),
                wavelength_nm: 903.0,
                s_uev: 31.0,
                s_sigma_uev: 1.0,
                dipole_rad: None,
                model: WaveplateKind::Hwp,
            },
        ];
        write_dot_records(&path, &records).unwrap();
        let read = read_dot_records(&path).unwrap();
        assert_eq!(read, records);
        assert_eq!(read[1].cohort, Cohort::Custom);
    }

    proptest! {
        #[test]
        fn summary_is_permutation_invariant_and_scale_equivariant(
            mut values in proptest::collection::vec(0.1..300.0f64, 2..40),
            k in 0.1..8.0f64,
        ) {
            let base = summarize(&values).unwrap();
            values.reverse();
            let permuted = summarize(&values).unwrap();
            prop_assert!((base.mean - permuted.mean).abs() < 1e-9);
            prop_assert!((base.std - permuted.std).abs() < 1e-9);

            let scaled: Vec<f64> = values.iter().map(|v| k * v).collect();
            let s = summarize(&scaled).unwrap();
            prop_assert!((s.mean - k * base.mean).abs() < 1e-9 * k.max(1.0) * base.mean.max(1.0));
            prop_assert!((s.std - k * base.std).abs() < 1e-7 * k.max(1.0) * base.std.max(1.0));
            prop_assert!((s.sem - s.std / (s.n as f64).sqrt()).abs() < 1e-12 * s.std.max(1.0));
        }

        #[test]
        fn fraction_below_is_monotone_in_threshold(
            values in proptest::collection::vec(0.0..300.0f64, 1..50),
            t1 in 0.0..300.0f64,
            dt in 0.0..100.0f64,
        ) {
            let lo = fraction_below(&values, t1).unwrap();
            let hi = fraction_below(&values, t1 + dt).unwrap();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn histogram_counts_sum_to_n(
            values in proptest::collection::vec(0.0..500.0f64, 1..60),
            width in 0.5..120.0f64,
        ) {
            let bins = histogram(&values, width).unwrap();
            let total: usize = bins.iter().map(|b| b.count).sum();
            prop_assert_eq!(total, values.len());
        }
    }
}
