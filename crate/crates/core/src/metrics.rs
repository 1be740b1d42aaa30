//! Figures of merit: SINDR, the sum-rate lower bound, far-field radiation
//! patterns and energy efficiency.

use std::f64::consts::PI;
use std::io::Write;

use crate::bussgang::{decompose, distortion_factors, BussgangDecomposition};
use crate::channel::{los_channel, ChannelSet};
use crate::numerics::{quadratic_form, watts_to_dbm};
use crate::pa::PaArrayModel;
use crate::{Complex, ComplexMatrix, ComplexVector, Error, Result};

/// Scenario parameters in linear units (watts, Hz, bits per channel use).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub n0: f64,
    pub rho_tot: f64,
    pub rho_tot_max: Option<f64>,
    pub bandwidth: f64,
    pub r0: Option<f64>,
}

impl ScenarioConfig {
    pub fn new(n0: f64, rho_tot: f64) -> Self {
        ScenarioConfig {
            n0,
            rho_tot,
            rho_tot_max: None,
            bandwidth: 1.0,
            r0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("N0", self.n0)?;
        positive("rho_tot", self.rho_tot)?;
        positive("bandwidth", self.bandwidth)?;
        if let Some(max) = self.rho_tot_max {
            positive("rho_tot_max", max)?;
            if self.rho_tot > max {
                return Err(Error::invalid("rho_tot exceeds rho_tot_max"));
            }
        }
        if let Some(r0) = self.r0 {
            positive("R0", r0)?;
        }
        Ok(())
    }
}

/// Real part of a Hermitian quadratic form, with tiny negative rounding
/// residue clamped to zero.
fn distortion_power(c_e: &ComplexMatrix, h: &ComplexVector) -> Result<f64> {
    let q = quadratic_form(c_e, h).re;
    if q >= 0.0 {
        return Ok(q);
    }
    let trace: f64 = (0..c_e.nrows()).map(|b| c_e[(b, b)].re).sum();
    if q < -1e-10 * trace * h.norm_squared() {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: q,
            trace,
        });
    }
    Ok(0.0)
}

/// Effective channel `h_u^T G P`, one entry per stream.
fn effective_row(dec: &BussgangDecomposition, h: &ComplexMatrix, p: &ComplexMatrix, u: usize) -> Vec<Complex> {
    let hg: Vec<Complex> = (0..h.nrows()).map(|b| h[(b, u)] * dec.gain[b]).collect();
    (0..p.ncols())
        .map(|r| (0..p.nrows()).map(|b| hg[b] * p[(b, r)]).sum())
        .collect()
}

/// SINDR of user `u` (zero-based).
pub fn sindr(dec: &BussgangDecomposition, h: &ChannelSet, p: &ComplexMatrix, n0: f64, u: usize) -> Result<f64> {
    if u >= h.users() {
        return Err(Error::invalid(format!("user {u} out of range for U = {}", h.users())));
    }
    let row = effective_row(dec, &h.h, p, u);
    let signal = row[u].norm_sqr();
    let interference: f64 = row
        .iter()
        .enumerate()
        .filter(|&(r, _)| r != u)
        .map(|(_, a)| a.norm_sqr())
        .sum();
    let dist = distortion_power(&dec.c_e, &h.h.column(u).into_owned())?;
    Ok(signal / (interference + dist + n0))
}

pub fn sindr_all(dec: &BussgangDecomposition, h: &ChannelSet, p: &ComplexMatrix, n0: f64) -> Result<Vec<f64>> {
    (0..h.users()).map(|u| sindr(dec, h, p, n0, u)).collect()
}

/// `sum_u log2(1 + SINDR_u)` in bits per channel use.
pub fn sum_rate(dec: &BussgangDecomposition, h: &ChannelSet, p: &ComplexMatrix, n0: f64) -> Result<f64> {
    Ok(sindr_all(dec, h, p, n0)?.iter().map(|s| (1.0 + s).log2()).sum())
}

/// Decomposes and evaluates the sum rate in one go.
pub fn sum_rate_for(pa: &PaArrayModel, h: &ChannelSet, p: &ComplexMatrix, n0: f64) -> Result<f64> {
    sum_rate(&decompose(pa, p), h, p, n0)
}

/// Radiated linear and distortion power per LoS angle.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiationPattern {
    pub angles: Vec<f64>,
    pub rho_lin: Vec<f64>,
    pub rho_dist: Vec<f64>,
}

impl RadiationPattern {
    /// CSV with columns `angle_deg, rho_lin_dbm, rho_dist_dbm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "angle_deg,rho_lin_dbm,rho_dist_dbm")?;
        for ((a, l), d) in self.angles.iter().zip(&self.rho_lin).zip(&self.rho_dist) {
            writeln!(w, "{},{},{}", a.to_degrees(), watts_to_dbm(*l), watts_to_dbm(*d))?;
        }
        Ok(())
    }
}

/// 1 degree resolution over `[0, 360)`, in radians.
pub fn default_angle_grid() -> Vec<f64> {
    (0..360).map(|d| d as f64 * PI / 180.0).collect()
}

pub fn radiation_pattern(dec: &BussgangDecomposition, p: &ComplexMatrix, angles: &[f64]) -> Result<RadiationPattern> {
    if angles.is_empty() {
        return Err(Error::invalid("angle grid is empty"));
    }
    let b = p.nrows();
    let gp = ComplexMatrix::from_fn(b, p.ncols(), |i, j| dec.gain[i] * p[(i, j)]);
    // Distortion power per angle as a sum of squared inner products with the
    // factors of C_e; the plain quadratic form loses most digits near nulls.
    let factors = distortion_factors(dec, p);
    let mut rho_lin = Vec::with_capacity(angles.len());
    let mut rho_dist = Vec::with_capacity(angles.len());
    for &psi in angles {
        let h = los_channel(psi, b);
        rho_lin.push((h.transpose() * &gp).norm_squared());
        let ht = h.transpose();
        rho_dist.push(factors.iter().map(|f| (&ht * f).norm_squared()).sum());
    }
    Ok(RadiationPattern {
        angles: angles.to_vec(),
        rho_lin,
        rho_dist,
    })
}

/// `W R / rho_cons` in bits per joule.
pub fn energy_efficiency(bandwidth: f64, rate: f64, consumed: f64) -> Result<f64> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    if !(consumed > 0.0) {
        return Err(Error::ZeroConsumedPower);
    }
    Ok(bandwidth * rate / consumed)
}
