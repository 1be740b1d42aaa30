//! Downlink channel generation for a half-wavelength uniform linear array:
//! plane-wave LoS channels, the sparse geometric mmWave model, path loss and
//! imperfect-CSIT corruption.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{circular_gaussian, db_to_linear, linear_to_db};
use crate::{Complex, ComplexMatrix, ComplexVector, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModel {
    LineOfSight,
    Geometric,
}

/// Channel matrix `H` (B x U, one user per column) with generation metadata.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub h: ComplexMatrix,
    pub model: ChannelModel,
    /// Angles of departure per user and path, radians.
    pub aods: Vec<Vec<f64>>,
    /// User distances in meters (empty for LoS channels).
    pub distances: Vec<f64>,
}

impl ChannelSet {
    pub fn new(
        h: ComplexMatrix,
        model: ChannelModel,
        aods: Vec<Vec<f64>>,
        distances: Vec<f64>,
    ) -> Result<Self> {
        if h.ncols() == 0 || h.nrows() < h.ncols() {
            return Err(Error::invalid(format!(
                "channel must satisfy B >= U >= 1, got B={} U={}",
                h.nrows(),
                h.ncols()
            )));
        }
        Ok(ChannelSet {
            h,
            model,
            aods,
            distances,
        })
    }

    /// Single-path LoS users at the given angles (radians).
    pub fn line_of_sight(angles: &[f64], antennas: usize) -> Result<Self> {
        let mut h = ComplexMatrix::zeros(antennas, angles.len());
        for (u, &psi) in angles.iter().enumerate() {
            h.set_column(u, &los_channel(psi, antennas));
        }
        ChannelSet::new(
            h,
            ChannelModel::LineOfSight,
            angles.iter().map(|&a| vec![a]).collect(),
            Vec::new(),
        )
    }

    pub fn antennas(&self) -> usize {
        self.h.nrows()
    }

    pub fn users(&self) -> usize {
        self.h.ncols()
    }
}

/// Plane-wave channel `[h]_b = exp(-j pi (b-1) cos psi)`.
pub fn los_channel(psi: f64, antennas: usize) -> ComplexVector {
    let step = -PI * psi.cos();
    ComplexVector::from_iterator(
        antennas,
        (0..antennas).map(|b| Complex::from_polar(1.0, step * b as f64)),
    )
}

/// Unit-norm array response, `los_channel(psi, B) / sqrt(B)`.
pub fn steering_vector(psi: f64, antennas: usize) -> ComplexVector {
    los_channel(psi, antennas) / Complex::new((antennas as f64).sqrt(), 0.0)
}

/// nLoS 28 GHz path loss in dB at distance `d` meters.
pub fn path_loss_db(d: f64) -> f64 {
    -72.0 - 29.2 * d.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_path: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub carrier_hz: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_path: 4,
            d_min: 5.0,
            d_max: 40.0,
            carrier_hz: 28e9,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_path < 1 {
            return Err(Error::invalid("n_path must be at least 1"));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::invalid(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Area-uniform distance on the annulus `[d_min, d_max]`.
    pub fn distance_from_uniform(&self, u: f64) -> f64 {
        (self.d_min * self.d_min + u * (self.d_max * self.d_max - self.d_min * self.d_min)).sqrt()
    }
}

/// Channel of one user from explicit path gains and angles:
/// `h = sqrt(B / N_path) * sum_l zeta_l a(psi_l)`.
pub fn multipath_channel(gains: &[Complex], angles: &[f64], antennas: usize) -> ComplexVector {
    assert_eq!(gains.len(), angles.len());
    let scale = (antennas as f64 / gains.len() as f64).sqrt();
    let mut h = ComplexVector::zeros(antennas);
    for (&zeta, &psi) in gains.iter().zip(angles) {
        h += steering_vector(psi, antennas) * zeta;
    }
    h * Complex::new(scale, 0.0)
}

/// Draws a geometric channel. Per user the draw order is: distance, then
/// (angle, gain) for each path.
pub fn geometric_channel<R: Rng + ?Sized>(
    cfg: &GeometryConfig,
    antennas: usize,
    users: usize,
    rng: &mut R,
) -> Result<ChannelSet> {
    cfg.validate()?;
    let mut h = ComplexMatrix::zeros(antennas, users);
    let mut aods = Vec::with_capacity(users);
    let mut distances = Vec::with_capacity(users);
    for u in 0..users {
        let d = cfg.distance_from_uniform(rng.random::<f64>());
        let gamma_sq = db_to_linear(path_loss_db(d));
        let mut angles = Vec::with_capacity(cfg.n_path);
        let mut gains = Vec::with_capacity(cfg.n_path);
        for _ in 0..cfg.n_path {
            angles.push(rng.random::<f64>() * PI);
            gains.push(circular_gaussian(rng, gamma_sq));
        }
        h.set_column(u, &multipath_channel(&gains, &angles, antennas));
        aods.push(angles);
        distances.push(d);
    }
    ChannelSet::new(h, ChannelModel::Geometric, aods, distances)
}

/// Imperfect CSIT: `sqrt(1 - tau^2) h + tau v`, `v ~ CN(0, ||h||^2 / B)`.
pub fn corrupt_csit<R: Rng + ?Sized>(
    h: &ComplexVector,
    tau: f64,
    rng: &mut R,
) -> Result<ComplexVector> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if tau == 0.0 {
        return Ok(h.clone());
    }
    let var = h.norm_squared() / h.len() as f64;
    let keep = (1.0 - tau * tau).sqrt();
    Ok(h.map(|x| x * keep + circular_gaussian(rng, var) * tau))
}

/// Applies [`corrupt_csit`] to every user of `h`, column by column.
pub fn corrupt_channel_matrix<R: Rng + ?Sized>(
    h: &ComplexMatrix,
    tau: f64,
    rng: &mut R,
) -> Result<ComplexMatrix> {
    let mut out = h.clone();
    for u in 0..h.ncols() {
        let col = corrupt_csit(&h.column(u).into_owned(), tau, rng)?;
        out.set_column(u, &col);
    }
    Ok(out)
}

/// Average SNR in dB, `gamma_avg^2 * rho_tot / N0`.
pub fn snr_avg_db(rho_tot: f64, n0: f64, gamma_avg_sq: f64) -> f64 {
    linear_to_db(gamma_avg_sq * rho_tot / n0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dbm_to_watts, RngStream};

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    #[test]
    fn los_broadside_is_all_ones() {
        let h = los_channel(deg(90.0), 4);
        for z in h.iter() {
            assert!((z - Complex::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn los_endfire_alternates() {
        let h = los_channel(0.0, 2);
        assert!((h[0] - Complex::new(1.0, 0.0)).norm() < 1e-15);
        assert!((h[1] - Complex::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn los_phase_increment() {
        let h = los_channel(deg(100.0), 16);
        let want = -PI * deg(100.0).cos();
        assert!((want - 0.5455).abs() < 1e-4);
        for b in 0..16 {
            assert!((h[b].norm() - 1.0).abs() < 1e-15);
        }
        for b in 1..16 {
            let inc = (h[b] / h[b - 1]).arg();
            assert!((inc - want).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_vector_values() {
        let a = steering_vector(deg(90.0), 4);
        assert!(a.iter().all(|z| (z - Complex::new(0.5, 0.0)).norm() < 1e-15));
        let a = steering_vector(deg(60.0), 2);
        let s = 1.0 / 2f64.sqrt();
        assert!((a[0] - Complex::new(s, 0.0)).norm() < 1e-15);
        assert!((a[1] - Complex::new(0.0, -s)).norm() < 1e-12);
        for psi in [0.1, 1.0, 2.5] {
            assert!((steering_vector(psi, 7).norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn path_loss_values() {
        assert_eq!(path_loss_db(1.0), -72.0);
        assert!((path_loss_db(10.0) + 101.2).abs() < 1e-12);
        assert!((path_loss_db(19.8) + 110.0).abs() < 0.2);
    }

    #[test]
    fn single_path_collapses_to_los() {
        let gamma = 1e-5;
        let psi = deg(37.0);
        let h = multipath_channel(&[Complex::new(gamma, 0.0)], &[psi], 8);
        let want = los_channel(psi, 8) * Complex::new(gamma, 0.0);
        assert!((h - want).norm() < 1e-18);
    }

    #[test]
    fn geometric_energy_matches_path_loss() {
        // Fix the distance so gamma_u is known: d_min ~= d_max.
        let cfg = GeometryConfig {
            d_min: 10.0,
            d_max: 10.0 + 1e-9,
            ..GeometryConfig::default()
        };
        let b = 16;
        let gamma_sq = db_to_linear(path_loss_db(10.0));
        let mut rng = RngStream::new(5, 0).rng();
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| geometric_channel(&cfg, b, 1, &mut rng).unwrap().h.norm_squared())
            .sum::<f64>()
            / draws as f64;
        let want = b as f64 * gamma_sq;
        assert!(((mean - want) / want).abs() < 0.05, "{mean} vs {want}");
    }

    #[test]
    fn geometric_is_deterministic() {
        let cfg = GeometryConfig::default();
        let s = RngStream::new(11, 3);
        let a = geometric_channel(&cfg, 32, 4, &mut s.rng()).unwrap();
        let b = geometric_channel(&cfg, 32, 4, &mut s.rng()).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.distances, b.distances);
        assert!(a.distances.iter().all(|d| (5.0..=40.0).contains(d)));
    }

    #[test]
    fn geometry_validation() {
        let mut cfg = GeometryConfig::default();
        cfg.d_min = 50.0;
        assert!(cfg.validate().is_err());
        cfg = GeometryConfig::default();
        cfg.n_path = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_set_requires_b_ge_u() {
        assert!(ChannelSet::line_of_sight(&[0.1, 0.2, 0.3], 2).is_err());
        assert!(ChannelSet::line_of_sight(&[], 2).is_err());
    }

    #[test]
    fn csit_perfect() {
        let h = los_channel(0.3, 8);
        let mut rng = RngStream::new(1, 0).rng();
        assert_eq!(corrupt_csit(&h, 0.0, &mut rng).unwrap(), h);
        assert!(corrupt_csit(&h, 1.5, &mut rng).is_err());
    }

    #[test]
    fn csit_full_error_is_uncorrelated() {
        let h = los_channel(0.7, 16);
        let mut rng = RngStream::new(2, 0).rng();
        let draws = 10_000;
        let mut corr = Complex::new(0.0, 0.0);
        let mut energy = 0.0;
        for _ in 0..draws {
            let e = corrupt_csit(&h, 1.0, &mut rng).unwrap();
            corr += h.dotc(&e);
            energy += e.norm_squared();
        }
        let rho = corr.norm() / (h.norm() * (energy).sqrt() * (draws as f64).sqrt());
        assert!(rho <= 0.03, "correlation {rho}");
    }

    #[test]
    fn csit_preserves_expected_energy() {
        let mut rng = RngStream::new(3, 0).rng();
        let h = geometric_channel(&GeometryConfig::default(), 32, 1, &mut rng)
            .unwrap()
            .h
            .column(0)
            .into_owned();
        let tau = 0.1f64.sqrt();
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| corrupt_csit(&h, tau, &mut rng).unwrap().norm_squared())
            .sum::<f64>()
            / draws as f64;
        let want = h.norm_squared();
        assert!(((mean - want) / want).abs() < 0.03);
    }

    #[test]
    fn snr_avg_values() {
        assert!(snr_avg_db(1.0, 1.0, 1.0).abs() < 1e-12);
        let s = snr_avg_db(dbm_to_watts(43.0), dbm_to_watts(-85.0), 1e-11);
        assert!((s - 18.0).abs() < 1e-9);
        // Inversion: pick N0 for 25 dB.
        let n0 = dbm_to_watts(43.0) * 1e-11 / db_to_linear(25.0);
        assert!((snr_avg_db(dbm_to_watts(43.0), n0, 1e-11) - 25.0).abs() < 1e-9);
    }
}
