//! Near-field spherical-wave channel between a uniform linear BS array and
//! a uniform linear user array under single-path free-space propagation.
//!
//! Entry `(n2, n1)` of the channel is `exp(-j 2π r/λ) / r`, where `r` is the
//! exact distance between BS antenna `n1` and user antenna `n2`. Antenna
//! indices are 1-based and the element offsets are `n·d`, so the first
//! element of each array sits one spacing away from the array origin.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default carrier wavelength (30 GHz).
pub const DEFAULT_WAVELENGTH: f64 = 0.01;

/// Array and user placement. Lengths are in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemGeometry {
    pub n_bs_antennas: usize,
    pub n_user_antennas: usize,
    pub antenna_spacing: f64,
    pub wavelength: f64,
    /// Distance between the first user antenna and the first BS antenna.
    pub range: f64,
    pub transmit_angle: f64,
    pub relative_angle: f64,
}

impl SystemGeometry {
    /// Default arrays (1024 BS antennas, single-antenna user) at half-wavelength spacing.
    pub fn xl_mimo(range: f64, transmit_angle: f64, relative_angle: f64) -> Self {
        SystemGeometry {
            n_bs_antennas: 1024,
            n_user_antennas: 1,
            antenna_spacing: DEFAULT_WAVELENGTH / 2.0,
            wavelength: DEFAULT_WAVELENGTH,
            range,
            transmit_angle,
            relative_angle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bs_antennas == 0 || self.n_user_antennas == 0 {
            return Err(Error::InvalidGeometry("antenna counts must be at least 1".into()));
        }
        let finite = [
            self.antenna_spacing,
            self.wavelength,
            self.range,
            self.transmit_angle,
            self.relative_angle,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGeometry("non-finite parameter".into()));
        }
        if self.antenna_spacing < 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "antenna spacing {} must not be negative",
                self.antenna_spacing
            )));
        }
        if self.wavelength <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "wavelength {} must be positive",
                self.wavelength
            )));
        }
        if self.range <= 0.0 {
            return Err(Error::InvalidGeometry(format!("range {} must be positive", self.range)));
        }
        let guard = self.min_range();
        if self.range <= guard {
            return Err(Error::InvalidGeometry(format!(
                "range {} must exceed (N1 + N2)·d = {guard}",
                self.range
            )));
        }
        Ok(())
    }

    /// Smallest admissible range, `(N1 + N2)·d`.
    pub fn min_range(&self) -> f64 {
        (self.n_bs_antennas + self.n_user_antennas) as f64 * self.antenna_spacing
    }

    /// BS aperture `(N1 - 1)·d`.
    pub fn aperture(&self) -> f64 {
        (self.n_bs_antennas.saturating_sub(1)) as f64 * self.antenna_spacing
    }

    fn check_indices(&self, n1: usize, n2: usize) -> Result<()> {
        if n1 == 0 || n1 > self.n_bs_antennas {
            return Err(Error::IndexOutOfRange { index: n1, max: self.n_bs_antennas });
        }
        if n2 == 0 || n2 > self.n_user_antennas {
            return Err(Error::IndexOutOfRange { index: n2, max: self.n_user_antennas });
        }
        Ok(())
    }
}

/// Complex `N2 × N1` channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: Array2<Complex64>,
    pub geometry: SystemGeometry,
}

impl ChannelMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }
}

/// Distance from BS antenna `n1` to user antenna `n2` (both 1-based), using
/// the expanded closed form of the law of cosines.
pub fn pairwise_distance(geometry: &SystemGeometry, n1: usize, n2: usize) -> Result<f64> {
    geometry.validate()?;
    geometry.check_indices(n1, n2)?;
    distance_unchecked(geometry, n1, n2)
}

fn distance_unchecked(g: &SystemGeometry, n1: usize, n2: usize) -> Result<f64> {
    let r = g.range;
    let d1 = n1 as f64 * g.antenna_spacing;
    let d2 = n2 as f64 * g.antenna_spacing;
    let (theta, phi) = (g.transmit_angle, g.relative_angle);
    let radicand = r * r
        + d1 * d1
        + d2 * d2
        + 2.0 * (r * d2 * (theta + phi).sin() - r * d1 * theta.sin() - d1 * d2 * phi.cos());
    if radicand <= 0.0 || !radicand.is_finite() {
        return Err(Error::DegenerateGeometry { n1, n2, radicand });
    }
    Ok(radicand.sqrt())
}

fn entry_from_distance(distance: f64, wavelength: f64) -> Complex64 {
    Complex64::from_polar(1.0 / distance, -2.0 * PI * distance / wavelength)
}

/// Single channel coefficient `exp(-j 2π r/λ) / r` for the pair `(n1, n2)`.
pub fn channel_entry(geometry: &SystemGeometry, n1: usize, n2: usize) -> Result<Complex64> {
    let r = pairwise_distance(geometry, n1, n2)?;
    Ok(entry_from_distance(r, geometry.wavelength))
}

/// Full deterministic `N2 × N1` channel for one geometry.
pub fn channel_matrix(geometry: &SystemGeometry) -> Result<ChannelMatrix> {
    geometry.validate()?;
    let (n1_count, n2_count) = (geometry.n_bs_antennas, geometry.n_user_antennas);
    let mut entries = Array2::zeros((n2_count, n1_count));
    for ((row, col), value) in entries.indexed_iter_mut() {
        let r = distance_unchecked(geometry, col + 1, row + 1)?;
        *value = entry_from_distance(r, geometry.wavelength);
    }
    Ok(ChannelMatrix { entries, geometry: *geometry })
}

/// Near-field boundary `2 D² / λ` with BS aperture `D = (N1 - 1)·d`.
pub fn rayleigh_distance(geometry: &SystemGeometry) -> Result<f64> {
    geometry.validate()?;
    let aperture = geometry.aperture();
    Ok(2.0 * aperture * aperture / geometry.wavelength)
}
