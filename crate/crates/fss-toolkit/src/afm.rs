//! AFM topography analysis: background-plane removal, dot segmentation, and
//! height-weighted moment ellipse fits for aspect-ratio and elongation
//! statistics.
//!
//! Input maps come from plain-text height matrices (nm) or 16-bit grayscale
//! PNGs with a JSON sidecar giving the pixel size and the height scale per
//! gray level.

use crate::rng::rng_from_seed;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AfmError {
    #[error("empty height map")]
    EmptyMap,
    #[error("pixel size must be positive, got {0}")]
    BadPixelSize(f64),
    #[error("height map contains non-finite values")]
    NonFiniteHeights,
    #[error("ragged text matrix: row {row} has {got} columns, expected {expected}")]
    RaggedMatrix { row: usize, got: usize, expected: usize },
    #[error("region is degenerate (collinear pixels); no ellipse exists")]
    DegenerateRegion,
    #[error("no fits to summarize")]
    NoFits,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("not a 16-bit grayscale image: {0}")]
    NotGray16(String),
    #[error("sidecar error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// A rectangular AFM scan; heights in nm, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub width: usize,
    pub height: usize,
    pub pixel_size_nm: f64,
    pub heights: Vec<f64>,
}

impl HeightMap {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size_nm: f64,
        heights: Vec<f64>,
    ) -> Result<Self, AfmError> {
        if width == 0 || height == 0 || heights.len() != width * height {
            return Err(AfmError::EmptyMap);
        }
        if !(pixel_size_nm > 0.0) {
            return Err(AfmError::BadPixelSize(pixel_size_nm));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(AfmError::NonFiniteHeights);
        }
        Ok(Self { width, height, pixel_size_nm, heights })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.heights[y * self.width + x]
    }

    /// Scan area in μm².
    pub fn area_um2(&self) -> f64 {
        let w_nm = self.width as f64 * self.pixel_size_nm;
        let h_nm = self.height as f64 * self.pixel_size_nm;
        w_nm * h_nm * 1e-6
    }
}

/// JSON sidecar accompanying an image: pixel size plus the mapping from
/// stored values to nm (`height_nm = value * height_scale_nm + height_offset_nm`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sidecar {
    pub pixel_size_nm: f64,
    #[serde(default = "default_height_scale")]
    pub height_scale_nm: f64,
    #[serde(default)]
    pub height_offset_nm: f64,
}

fn default_height_scale() -> f64 {
    1.0
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar, AfmError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Load a whitespace-separated text matrix of heights (already nm, scaled by
/// the sidecar mapping).
pub fn read_text_matrix(path: &Path, sidecar: &Sidecar) -> Result<HeightMap, AfmError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| AfmError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(AfmError::RaggedMatrix {
                    row: i + 1,
                    got: row.len(),
                    expected: first.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(AfmError::EmptyMap);
    }
    let width = rows[0].len();
    let height = rows.len();
    let heights = rows
        .into_iter()
        .flatten()
        .map(|v| v * sidecar.height_scale_nm + sidecar.height_offset_nm)
        .collect();
    HeightMap::new(width, height, sidecar.pixel_size_nm, heights)
}

/// Load a 16-bit grayscale PNG through the sidecar height mapping.
pub fn read_png_gray16(path: &Path, sidecar: &Sidecar) -> Result<HeightMap, AfmError> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(AfmError::NotGray16(format!("{:?}", other.color())));
        }
    };
    let (w, h) = gray.dimensions();
    let heights = gray
        .pixels()
        .map(|p| p.0[0] as f64 * sidecar.height_scale_nm + sidecar.height_offset_nm)
        .collect();
    HeightMap::new(w as usize, h as usize, sidecar.pixel_size_nm, heights)
}

/// Write a height map as a 16-bit grayscale PNG plus matching sidecar;
/// heights are linearly mapped onto the full gray range.
pub fn write_png_gray16(
    png_path: &Path,
    sidecar_path: &Path,
    map: &HeightMap,
) -> Result<Sidecar, AfmError> {
    let lo = map.heights.iter().cloned().fold(f64::MAX, f64::min);
    let hi = map.heights.iter().cloned().fold(f64::MIN, f64::max);
    let scale = if hi > lo { (hi - lo) / 65535.0 } else { 1.0 };
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        map.width as u32,
        map.height as u32,
    );
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = (map.at(x as usize, y as usize) - lo) / scale;
        *px = image::Luma([v.round().clamp(0.0, 65535.0) as u16]);
    }
    img.save(png_path)?;
    let sidecar = Sidecar {
        pixel_size_nm: map.pixel_size_nm,
        height_scale_nm: scale,
        height_offset_nm: lo,
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    /// Threshold in robust background sigmas above the fitted plane.
    pub threshold_sigma: f64,
    /// Regions smaller than this many pixels are discarded.
    pub min_area_px: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { threshold_sigma: 5.0, min_area_px: 20 }
    }
}

/// One segmented dot: member pixels and their heights above the background
/// plane.
#[derive(Debug, Clone)]
pub struct Region {
    /// (x, y) pixel coordinates.
    pub pixels: Vec<(usize, usize)>,
    /// Height above the background plane per pixel, nm.
    pub excess: Vec<f64>,
}

/// Least-squares background plane z = a + b·x + c·y over all pixels.
fn fit_plane(map: &HeightMap) -> (f64, f64, f64) {
    let w = map.width as f64;
    let h = map.height as f64;
    let n = w * h;
    // Centered coordinates make the normal equations diagonal.
    let cx = 0.5 * (w - 1.0);
    let cy = 0.5 * (h - 1.0);
    let mut sz = 0.0;
    let mut sxz = 0.0;
    let mut syz = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for y in 0..map.height {
        for x in 0..map.width {
            let z = map.at(x, y);
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            sz += z;
            sxz += dx * z;
            syz += dy * z;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    let b = if sxx > 0.0 { sxz / sxx } else { 0.0 };
    let c = if syy > 0.0 { syz / syy } else { 0.0 };
    // Centered coordinates: the constant term is just the mean height.
    (sz / n, b, c)
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Subtract the background plane, threshold at `threshold_sigma` robust
/// sigmas, and collect 8-connected regions of at least `min_area_px` pixels.
/// A flat map yields an empty list.
pub fn segment(map: &HeightMap, opts: &SegmentOptions) -> Vec<Region> {
    let (mean, b, c) = fit_plane(map);
    let cx = 0.5 * (map.width as f64 - 1.0);
    let cy = 0.5 * (map.height as f64 - 1.0);
    let excess: Vec<f64> = (0..map.height)
        .flat_map(|y| (0..map.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            map.at(x, y) - (mean + b * (x as f64 - cx) + c * (y as f64 - cy))
        })
        .collect();

    let sigma = 1.4826 * median_of(excess.iter().map(|e| e.abs()).collect());
    let range = excess.iter().cloned().fold(f64::MIN, f64::max)
        - excess.iter().cloned().fold(f64::MAX, f64::min);
    let threshold = (opts.threshold_sigma * sigma).max(1e-9 * range.max(1e-9));

    let idx = |x: usize, y: usize| y * map.width + x;
    let mut visited = vec![false; excess.len()];
    let mut regions = Vec::new();
    for y0 in 0..map.height {
        for x0 in 0..map.width {
            if visited[idx(x0, y0)] || excess[idx(x0, y0)] <= threshold {
                continue;
            }
            // Flood fill over the 8-neighbourhood.
            let mut stack = vec![(x0, y0)];
            visited[idx(x0, y0)] = true;
            let mut pixels = Vec::new();
            let mut heights = Vec::new();
            while let Some((x, y)) = stack.pop() {
                pixels.push((x, y));
                heights.push(excess[idx(x, y)]);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= map.width as i64 || ny >= map.height as i64
                        {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if !visited[idx(nx, ny)] && excess[idx(nx, ny)] > threshold {
                            visited[idx(nx, ny)] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if pixels.len() >= opts.min_area_px {
                regions.push(Region { pixels, excess: heights });
            }
        }
    }
    // Deterministic order: by first pixel in row-major order.
    regions.sort_by_key(|r| {
        r.pixels.iter().map(|&(x, y)| y * map.width + x).min().unwrap_or(0)
    });
    regions
}

/// Ellipse fitted to one dot from height-weighted second moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    pub center_x_nm: f64,
    pub center_y_nm: f64,
    /// Semi-axis along the elongation direction, nm (2√λ_major).
    pub r_major_nm: f64,
    /// Semi-axis across it, nm.
    pub r_minor_nm: f64,
    /// Major-axis direction, rad, modulo π.
    pub angle_rad: f64,
    /// r_minor / r_major ∈ (0, 1].
    pub aspect_ratio: f64,
    /// Peak height above the background plane, nm.
    pub height_nm: f64,
    /// Ellipse area π·r_major·r_minor, nm².
    pub area_nm2: f64,
}

/// Height-weighted moment ellipse of a segmented region.
pub fn fit_ellipse(region: &Region, map: &HeightMap) -> Result<EllipseFit, AfmError> {
    let px = map.pixel_size_nm;
    let mut w_sum = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for (&(x, y), &w) in region.pixels.iter().zip(&region.excess) {
        let w = w.max(0.0);
        w_sum += w;
        mx += w * x as f64;
        my += w * y as f64;
    }
    if w_sum <= 0.0 {
        return Err(AfmError::DegenerateRegion);
    }
    mx /= w_sum;
    my /= w_sum;

    let mut mxx = 0.0;
    let mut myy = 0.0;
    let mut mxy = 0.0;
    for (&(x, y), &w) in region.pixels.iter().zip(&region.excess) {
        let w = w.max(0.0);
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        mxx += w * dx * dx;
        myy += w * dy * dy;
        mxy += w * dx * dy;
    }
    mxx = mxx / w_sum * px * px;
    myy = myy / w_sum * px * px;
    mxy = mxy / w_sum * px * px;

    let half_trace = 0.5 * (mxx + myy);
    let disc = (0.25 * (mxx - myy).powi(2) + mxy * mxy).sqrt();
    let l_major = half_trace + disc;
    let l_minor = half_trace - disc;
    if !(l_major > 0.0) || l_minor <= 1e-9 * l_major {
        return Err(AfmError::DegenerateRegion);
    }
    let angle = 0.5 * (2.0 * mxy).atan2(mxx - myy);
    let r_major = 2.0 * l_major.sqrt();
    let r_minor = 2.0 * l_minor.sqrt();
    let height = region.excess.iter().cloned().fold(f64::MIN, f64::max);
    Ok(EllipseFit {
        center_x_nm: mx * px,
        center_y_nm: my * px,
        r_major_nm: r_major,
        r_minor_nm: r_minor,
        angle_rad: angle.rem_euclid(PI),
        aspect_ratio: r_minor / r_major,
        height_nm: height,
        area_nm2: PI * r_major * r_minor,
    })
}

/// Segment a map and fit every accepted region.
pub fn analyze_map(
    map: &HeightMap,
    opts: &SegmentOptions,
) -> Result<Vec<EllipseFit>, AfmError> {
    segment(map, opts)
        .iter()
        .map(|r| fit_ellipse(r, map))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologySummary {
    pub n: usize,
    pub mean_aspect_ratio: f64,
    pub std_aspect_ratio: f64,
    /// Mean geometric diameter 2√(r_major·r_minor), nm.
    pub mean_diameter_nm: f64,
    /// Elongation-angle histogram over [0°, 180°) in 15° bins.
    pub angle_histogram_deg: Vec<(f64, usize)>,
    /// Dot density from the scan area, cm⁻².
    pub density_per_cm2: f64,
}

/// Cohort statistics of a set of ellipse fits over a scan of the given area.
pub fn morphology_summary(
    fits: &[EllipseFit],
    scan_area_um2: f64,
) -> Result<MorphologySummary, AfmError> {
    if fits.is_empty() {
        return Err(AfmError::NoFits);
    }
    let n = fits.len();
    let ars: Vec<f64> = fits.iter().map(|f| f.aspect_ratio).collect();
    let mean_ar = ars.iter().sum::<f64>() / n as f64;
    let std_ar = if n > 1 {
        (ars.iter().map(|a| (a - mean_ar).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    let mean_diameter =
        fits.iter().map(|f| 2.0 * (f.r_major_nm * f.r_minor_nm).sqrt()).sum::<f64>() / n as f64;
    let bin_deg = 15.0;
    let mut hist = vec![0usize; 12];
    for f in fits {
        let deg = f.angle_rad.to_degrees().rem_euclid(180.0);
        hist[((deg / bin_deg) as usize).min(11)] += 1;
    }
    Ok(MorphologySummary {
        n,
        mean_aspect_ratio: mean_ar,
        std_aspect_ratio: std_ar,
        mean_diameter_nm: mean_diameter,
        angle_histogram_deg: hist
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 * bin_deg, c))
            .collect(),
        density_per_cm2: n as f64 / (scan_area_um2 * 1e-8),
    })
}

/// Specification of one synthetic elliptical Gaussian dot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianDotSpec {
    pub x_nm: f64,
    pub y_nm: f64,
    pub amplitude_nm: f64,
    pub sigma_major_nm: f64,
    pub sigma_minor_nm: f64,
    pub angle_rad: f64,
}

/// Render elliptical Gaussian dots plus white height noise; useful for
/// demonstrations and validation against known morphology.
pub fn render_gaussian_dots(
    width: usize,
    height: usize,
    pixel_size_nm: f64,
    dots: &[GaussianDotSpec],
    noise_sigma_nm: f64,
    seed: u64,
) -> HeightMap {
    let mut rng = rng_from_seed(seed);
    let mut heights = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let px = x as f64 * pixel_size_nm;
            let py = y as f64 * pixel_size_nm;
            let mut z = 0.0;
            for d in dots {
                let (sa, ca) = d.angle_rad.sin_cos();
                let dx = px - d.x_nm;
                let dy = py - d.y_nm;
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                z += d.amplitude_nm
                    * (-0.5 * (u / d.sigma_major_nm).powi(2)
                        - 0.5 * (v / d.sigma_minor_nm).powi(2))
                    .exp();
            }
            if noise_sigma_nm > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                z += noise_sigma_nm * n;
            }
            heights[y * width + x] = z;
        }
    }
    HeightMap { width, height, pixel_size_nm, heights }
}

/// Write per-dot ellipse fits as CSV.
pub fn write_dot_table(path: &Path, fits: &[EllipseFit]) -> Result<(), AfmError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "center_x_nm,center_y_nm,rx_nm,ry_nm,angle_deg,aspect_ratio,height_nm")?;
    for e in fits {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            e.center_x_nm,
            e.center_y_nm,
            e.r_major_nm,
            e.r_minor_nm,
            e.angle_rad.to_degrees(),
            e.aspect_ratio,
            e.height_nm
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn single_dot_map(angle: f64, sigma_major: f64, sigma_minor: f64) -> HeightMap {
        render_gaussian_dots(
            256,
            256,
            4.0,
            &[GaussianDotSpec {
                x_nm: 512.0,
                y_nm: 512.0,
                amplitude_nm: 10.0,
                sigma_major_nm: sigma_major,
                sigma_minor_nm: sigma_minor,
                angle_rad: angle,
            }],
            0.1,
            5,
        )
    }

    #[test]
    fn one_bump_yields_one_region() {
        let map = single_dot_map(0.4, 40.0, 40.0);
        let regions = segment(&map, &SegmentOptions::default());
        assert_eq!(regions.len(), 1);
    }

    #[test]
    fn two_separated_bumps_yield_two_regions() {
        let map = render_gaussian_dots(
            256,
            256,
            4.0,
            &[
                GaussianDotSpec {
                    x_nm: 300.0,
                    y_nm: 300.0,
                    amplitude_nm: 8.0,
                    sigma_major_nm: 30.0,
                    sigma_minor_nm: 30.0,
                    angle_rad: 0.0,
                },
                GaussianDotSpec {
                    x_nm: 740.0,
                    y_nm: 700.0,
                    amplitude_nm: 12.0,
                    sigma_major_nm: 35.0,
                    sigma_minor_nm: 20.0,
                    angle_rad: 1.0,
                },
            ],
            0.1,
            6,
        );
        let regions = segment(&map, &SegmentOptions::default());
        assert_eq!(regions.len(), 2);
    }

    #[test]
    fn flat_map_has_no_regions() {
        let map = HeightMap::new(64, 64, 4.0, vec![3.0; 64 * 64]).unwrap();
        assert!(segment(&map, &SegmentOptions::default()).is_empty());
    }

    #[test]
    fn tilted_background_is_removed() {
        let mut map = single_dot_map(0.0, 40.0, 40.0);
        for y in 0..map.height {
            for x in 0..map.width {
                map.heights[y * map.width + x] += 0.02 * x as f64 - 0.015 * y as f64;
            }
        }
        let regions = segment(&map, &SegmentOptions::default());
        assert_eq!(regions.len(), 1);
    }

    #[test]
    fn circular_bump_has_unit_aspect_ratio() {
        let map = single_dot_map(0.0, 40.0, 40.0);
        let fits = analyze_map(&map, &SegmentOptions::default()).unwrap();
        assert_eq!(fits.len(), 1);
        assert_abs_diff_eq!(fits[0].aspect_ratio, 1.0, epsilon = 0.02);
    }

    #[test]
    fn elongated_bump_recovers_ratio_and_angle() {
        let angle = 30.0_f64.to_radians();
        let map = single_dot_map(angle, 60.0, 30.0);
        let fits = analyze_map(&map, &SegmentOptions::default()).unwrap();
        assert_eq!(fits.len(), 1);
        assert_abs_diff_eq!(fits[0].aspect_ratio, 0.5, epsilon = 0.03);
        assert_abs_diff_eq!(fits[0].angle_rad.to_degrees(), 30.0, epsilon = 2.0);
    }

    #[test]
    fn angle_is_reported_modulo_pi() {
        let angle = 30.0_f64.to_radians();
        let a = single_dot_map(angle, 60.0, 30.0);
        let b = single_dot_map(angle + PI, 60.0, 30.0);
        let fa = analyze_map(&a, &SegmentOptions::default()).unwrap();
        let fb = analyze_map(&b, &SegmentOptions::default()).unwrap();
        assert_abs_diff_eq!(fa[0].angle_rad, fb[0].angle_rad, epsilon = 0.02);
    }

    #[test]
    fn translation_leaves_shape_unchanged() {
        let base = single_dot_map(0.7, 50.0, 30.0);
        let shifted = render_gaussian_dots(
            256,
            256,
            4.0,
            &[GaussianDotSpec {
                x_nm: 650.0,
                y_nm: 380.0,
                amplitude_nm: 10.0,
                sigma_major_nm: 50.0,
                sigma_minor_nm: 30.0,
                angle_rad: 0.7,
            }],
            0.1,
            5,
        );
        let fa = analyze_map(&base, &SegmentOptions::default()).unwrap();
        let fb = analyze_map(&shifted, &SegmentOptions::default()).unwrap();
        assert_abs_diff_eq!(fa[0].aspect_ratio, fb[0].aspect_ratio, epsilon = 0.02);
        assert_abs_diff_eq!(fa[0].r_major_nm, fb[0].r_major_nm, epsilon = 2.0);
        assert_abs_diff_eq!(fa[0].angle_rad, fb[0].angle_rad, epsilon = 0.05);
    }

    #[test]
    fn pixel_size_rescales_axes_not_ratio() {
        let dots = [GaussianDotSpec {
            x_nm: 512.0,
            y_nm: 512.0,
            amplitude_nm: 10.0,
            sigma_major_nm: 50.0,
            sigma_minor_nm: 25.0,
            angle_rad: 0.3,
        }];
        let fine = render_gaussian_dots(256, 256, 4.0, &dots, 0.05, 9);
        let half = GaussianDotSpec { x_nm: 256.0, y_nm: 256.0, ..dots[0] };
        let coarse = render_gaussian_dots(128, 128, 8.0, &[GaussianDotSpec {
            x_nm: 512.0,
            y_nm: 512.0,
            ..dots[0]
        }], 0.05, 9);
        let _ = half;
        let fa = analyze_map(&fine, &SegmentOptions::default()).unwrap();
        let fb = analyze_map(&coarse, &SegmentOptions::default()).unwrap();
        assert_relative_eq!(fa[0].r_major_nm, fb[0].r_major_nm, max_relative = 0.05);
        assert_abs_diff_eq!(fa[0].aspect_ratio, fb[0].aspect_ratio, epsilon = 0.03);
    }

    #[test]
    fn aspect_ratio_is_invariant_under_height_scaling() {
        let mut map = single_dot_map(0.5, 55.0, 30.0);
        let fa = analyze_map(&map, &SegmentOptions::default()).unwrap();
        for h in &mut map.heights {
            *h *= 3.0;
        }
        let fb = analyze_map(&map, &SegmentOptions::default()).unwrap();
        assert_abs_diff_eq!(fa[0].aspect_ratio, fb[0].aspect_ratio, epsilon = 1e-3);
    }

    #[test]
    fn rotation_equivariance_via_resampling() {
        // Rotate the height field by 25° with bilinear resampling; the
        // fitted angle should follow and the ratio should not move.
        let beta = 25.0_f64.to_radians();
        let base_angle = 10.0_f64.to_radians();
        let src = single_dot_map(base_angle, 60.0, 30.0);
        let mut rotated = HeightMap::new(256, 256, 4.0, vec![0.0; 256 * 256]).unwrap();
        let (sb, cb) = beta.sin_cos();
        let c = 127.5;
        for y in 0..256usize {
            for x in 0..256usize {
                // Inverse rotation about the map center.
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let sx = cb * dx + sb * dy + c;
                let sy = -sb * dx + cb * dy + c;
                let x0 = sx.floor();
                let y0 = sy.floor();
                if x0 < 0.0 || y0 < 0.0 || x0 >= 255.0 || y0 >= 255.0 {
                    continue;
                }
                let (xi, yi) = (x0 as usize, y0 as usize);
                let fx = sx - x0;
                let fy = sy - y0;
                let v = src.at(xi, yi) * (1.0 - fx) * (1.0 - fy)
                    + src.at(xi + 1, yi) * fx * (1.0 - fy)
                    + src.at(xi, yi + 1) * (1.0 - fx) * fy
                    + src.at(xi + 1, yi + 1) * fx * fy;
                rotated.heights[y * 256 + x] = v;
            }
        }
        let fa = analyze_map(&src, &SegmentOptions::default()).unwrap();
        let fb = analyze_map(&rotated, &SegmentOptions::default()).unwrap();
        let expected = (fa[0].angle_rad + beta).rem_euclid(PI);
        let diff = (fb[0].angle_rad - expected + PI / 2.0).rem_euclid(PI) - PI / 2.0;
        assert!(diff.abs().to_degrees() < 2.0, "angle off by {}°", diff.to_degrees());
        assert_abs_diff_eq!(fa[0].aspect_ratio, fb[0].aspect_ratio, epsilon = 0.03);
    }

    #[test]
    fn collinear_region_is_degenerate() {
        let mut heights = vec![0.0; 128 * 128];
        for y in 40..80 {
            heights[y * 128 + 64] = 10.0;
        }
        let map = HeightMap::new(128, 128, 4.0, heights).unwrap();
        let regions = segment(&map, &SegmentOptions::default());
        assert_eq!(regions.len(), 1);
        assert!(matches!(fit_ellipse(&regions[0], &map), Err(AfmError::DegenerateRegion)));
    }

    #[test]
    fn twelve_dots_on_two_micron_scan_report_expected_density() {
        let mut dots = Vec::new();
        let mut rng = rng_from_seed(21);
        use rand::Rng;
        for i in 0..12 {
            let gx = (i % 4) as f64;
            let gy = (i / 4) as f64;
            dots.push(GaussianDotSpec {
                x_nm: 280.0 + gx * 480.0 + rng.gen_range(-40.0..40.0),
                y_nm: 340.0 + gy * 640.0 + rng.gen_range(-40.0..40.0),
                amplitude_nm: rng.gen_range(6.0..12.0),
                sigma_major_nm: 40.0,
                sigma_minor_nm: 21.2,
                angle_rad: rng.gen_range(0.0..PI),
            });
        }
        let map = render_gaussian_dots(512, 512, 2000.0 / 512.0, &dots, 0.1, 3);
        let fits = analyze_map(&map, &SegmentOptions::default()).unwrap();
        assert_eq!(fits.len(), 12);
        let summary = morphology_summary(&fits, map.area_um2()).unwrap();
        assert_relative_eq!(summary.density_per_cm2, 3e8, max_relative = 1e-6);
    }

    #[test]
    fn morphology_summary_tracks_population_targets() {
        let mut rng = rng_from_seed(33);
        use rand::Rng;
        let mut dots = Vec::new();
        for i in 0..24 {
            let ar = (0.91 + 0.05 * rng.gen_range(-1.0..1.0_f64)).min(1.0);
            let major = rng.gen_range(35.0..45.0);
            dots.push(GaussianDotSpec {
                x_nm: 150.0 + (i % 5) as f64 * 390.0,
                y_nm: 170.0 + (i / 5) as f64 * 390.0,
                amplitude_nm: 10.0,
                sigma_major_nm: major,
                sigma_minor_nm: major * ar,
                angle_rad: rng.gen_range(0.0..PI),
            });
        }
        let map = render_gaussian_dots(512, 512, 4.0, &dots, 0.08, 12);
        let fits = analyze_map(&map, &SegmentOptions::default()).unwrap();
        assert_eq!(fits.len(), 24);
        let summary = morphology_summary(&fits, map.area_um2()).unwrap();
        assert_abs_diff_eq!(summary.mean_aspect_ratio, 0.91, epsilon = 0.02);
    }

    #[test]
    fn single_fit_summary_is_that_fit() {
        let map = single_dot_map(0.2, 45.0, 30.0);
        let fits = analyze_map(&map, &SegmentOptions::default()).unwrap();
        let summary = morphology_summary(&fits, map.area_um2()).unwrap();
        assert_abs_diff_eq!(summary.mean_aspect_ratio, fits[0].aspect_ratio, epsilon = 1e-12);
        assert_eq!(summary.n, 1);
    }

    #[test]
    fn text_matrix_and_png_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let map = single_dot_map(0.9, 40.0, 28.0);

        let png = tmp.path().join("scan.png");
        let side = tmp.path().join("scan.json");
        write_png_gray16(&png, &side, &map).unwrap();
        let sidecar = read_sidecar(&side).unwrap();
        let reread = read_png_gray16(&png, &sidecar).unwrap();
        assert_eq!(reread.width, map.width);
        let fa = analyze_map(&map, &SegmentOptions::default()).unwrap();
        let fb = analyze_map(&reread, &SegmentOptions::default()).unwrap();
        assert_abs_diff_eq!(fa[0].aspect_ratio, fb[0].aspect_ratio, epsilon = 0.01);

        let txt = tmp.path().join("scan.txt");
        let mut body = String::new();
        for y in 0..map.height {
            let row: Vec<String> =
                (0..map.width).map(|x| format!("{:.5}", map.at(x, y))).collect();
            body.push_str(&row.join(" "));
            body.push('\n');
        }
        std::fs::write(&txt, body).unwrap();
        let from_text = read_text_matrix(
            &txt,
            &Sidecar { pixel_size_nm: 4.0, height_scale_nm: 1.0, height_offset_nm: 0.0 },
        )
        .unwrap();
        let fc = analyze_map(&from_text, &SegmentOptions::default()).unwrap();
        assert_abs_diff_eq!(fa[0].aspect_ratio, fc[0].aspect_ratio, epsilon = 0.01);
    }
}
