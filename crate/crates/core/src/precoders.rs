//! Conventional linear precoders (MRT, ZF) and the analytic zero-distortion
//! single-user precoder. All constructors return unnormalized directions;
//! the caller applies one of the normalizations in [`crate::bussgang`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::numerics::{pseudo_inverse, singular_value_range};
use crate::pa::PaArrayModel;
use crate::{Complex, ComplexMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecoderKind {
    Mrt,
    Zf,
    ZeroDist,
    Dab,
    EeDab,
    Custom,
}

impl PrecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecoderKind::Mrt => "mrt",
            PrecoderKind::Zf => "zf",
            PrecoderKind::ZeroDist => "zero_dist",
            PrecoderKind::Dab => "dab",
            PrecoderKind::EeDab => "ee_dab",
            PrecoderKind::Custom => "custom",
        }
    }
}

impl std::fmt::Display for PrecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `B x U` precoding matrix tagged with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingMatrix {
    pub matrix: ComplexMatrix,
    pub kind: PrecoderKind,
    /// Set when the precoder carries no linear gain towards its user (the
    /// zero-distortion construction with identical PAs).
    pub degenerate: bool,
}

impl PrecodingMatrix {
    pub fn new(matrix: ComplexMatrix, kind: PrecoderKind) -> Self {
        PrecodingMatrix {
            matrix,
            kind,
            degenerate: false,
        }
    }

    pub fn with_matrix(&self, matrix: ComplexMatrix) -> Self {
        PrecodingMatrix {
            matrix,
            kind: self.kind,
            degenerate: self.degenerate,
        }
    }
}

/// Matched filter: column `u` is `conj(h_u) / ||h_u||`.
pub fn mrt(h: &ChannelSet) -> Result<PrecodingMatrix> {
    let mut p = h.h.map(|z| z.conj());
    for u in 0..p.ncols() {
        let norm = p.column(u).norm();
        if norm == 0.0 {
            return Err(Error::ZeroChannel { user: u });
        }
        p.column_mut(u).unscale_mut(norm);
    }
    Ok(PrecodingMatrix::new(p, PrecoderKind::Mrt))
}

/// Zero forcing `pinv(H^T)` with columns rescaled so that `H^T P` is the
/// identity up to one common factor, then scaled to unit Frobenius norm.
pub fn zf(h: &ChannelSet, rcond: f64) -> Result<PrecodingMatrix> {
    let ht = h.h.transpose();
    let (smallest, largest) = singular_value_range(&ht);
    if largest == 0.0 || smallest <= rcond * largest {
        return Err(Error::RankDeficient { smallest, largest });
    }
    let mut p = pseudo_inverse(&ht, rcond)?;
    let norm = p.norm();
    p.unscale_mut(norm);
    Ok(PrecodingMatrix::new(p, PrecoderKind::Zf))
}

fn pair_entry(beta_a: Complex, beta_b: Complex, psi: f64) -> Result<Complex> {
    if beta_a == Complex::new(0.0, 0.0) || beta_b == Complex::new(0.0, 0.0) {
        return Err(Error::invalid(
            "zero-distortion precoding needs nonzero third-order coefficients",
        ));
    }
    let ratio = beta_a / beta_b;
    let mag = ratio.norm().cbrt();
    Ok(Complex::from_polar(mag, PI * psi.cos() + PI + ratio.arg()))
}

/// Two-antenna precoder nulling the third-order distortion at angle `psi`.
pub fn zero_distortion_pair(pa: &PaArrayModel, psi: f64) -> Result<PrecodingMatrix> {
    if pa.antennas() != 2 {
        return Err(Error::invalid(format!(
            "zero_distortion_pair needs B = 2, got {}",
            pa.antennas()
        )));
    }
    zero_distortion_array(pa, psi)
}

/// Pairwise construction over antennas `(1,2), (3,4), ...`; every pair
/// cancels its own distortion at `psi`.
pub fn zero_distortion_array(pa: &PaArrayModel, psi: f64) -> Result<PrecodingMatrix> {
    let b = pa.antennas();
    if b % 2 != 0 {
        return Err(Error::invalid(format!(
            "zero-distortion precoding needs an even number of antennas, got {b}"
        )));
    }
    let mut p = ComplexMatrix::zeros(b, 1);
    let mut all_equal = true;
    for i in (0..b).step_by(2) {
        let (ma, mb) = (pa.model(i), pa.model(i + 1));
        p[(i, 0)] = Complex::new(1.0, 0.0);
        p[(i + 1, 0)] = pair_entry(ma.beta_odd(1), mb.beta_odd(1), psi)?;
        all_equal &= ma.odd() == mb.odd();
    }
    let mut out = PrecodingMatrix::new(p, PrecoderKind::ZeroDist);
    out.degenerate = all_equal;
    if all_equal {
        log::warn!("zero-distortion precoder with identical PAs also nulls the linear signal");
    }
    Ok(out)
}
