//! Energy/wavelength conversions and the unit conventions used throughout.
//!
//! Splittings, centroid shifts, line widths, and dispersion are μeV;
//! absolute line positions and spectrometer grids are meV; wavelengths nm.

/// hc in eV·nm, so that E[eV] = 1239.842 / λ[nm].
pub const EV_NM: f64 = 1239.842;

pub fn energy_mev_for_wavelength_nm(lambda_nm: f64) -> f64 {
    EV_NM / lambda_nm * 1000.0
}

pub fn wavelength_nm_for_energy_mev(energy_mev: f64) -> f64 {
    EV_NM / (energy_mev / 1000.0)
}

pub fn uev_to_mev(uev: f64) -> f64 {
    uev / 1000.0
}

pub fn mev_to_uev(mev: f64) -> f64 {
    mev * 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn telecom_band_round_trip() {
        let e = energy_mev_for_wavelength_nm(1550.0);
        assert_relative_eq!(e, 799.898, epsilon = 1e-2);
        assert_relative_eq!(wavelength_nm_for_energy_mev(e), 1550.0, epsilon = 1e-9);
    }
}
