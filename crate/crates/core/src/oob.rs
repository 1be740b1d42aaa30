//! OFDM transmission through the PA array and out-of-band emission
//! analysis from averaged periodograms.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::numerics::circular_gaussian;
use crate::pa::PaArrayModel;
use crate::{Complex, ComplexMatrix, Error, Result};

const PSD_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfdmConfig {
    pub n_fft: usize,
    /// Occupied subcarrier indices relative to DC, in `[-n_fft/2, n_fft/2)`.
    pub occupied: Vec<i64>,
    pub n_symbols: usize,
    /// Hz from DC to the outermost occupied subcarrier.
    pub one_sided_bandwidth: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        OfdmConfig {
            n_fft: 1024,
            occupied: (-150..=150).filter(|&k| k != 0).collect(),
            n_symbols: 200,
            one_sided_bandwidth: 2.25e6,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        let half = (self.n_fft / 2) as i64;
        if self.n_fft < 2 || self.n_symbols == 0 {
            return Err(Error::invalid("OFDM needs n_fft >= 2 and n_symbols >= 1"));
        }
        if let Some(k) = self.occupied.iter().find(|&&k| k == 0 || k < -half || k >= half) {
            return Err(Error::invalid(format!("subcarrier {k} is DC or outside the FFT")));
        }
        Ok(())
    }

    fn bin(&self, k: i64) -> usize {
        k.rem_euclid(self.n_fft as i64) as usize
    }

    /// Outermost occupied subcarrier index (0 when nothing is occupied).
    pub fn band_edge(&self) -> i64 {
        self.occupied.iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    /// Subcarrier index of each bin after the DC-centering shift.
    pub fn shifted_indices(&self) -> Vec<i64> {
        let half = (self.n_fft / 2) as i64;
        (0..self.n_fft as i64).map(|i| i - half).collect()
    }

    /// Frequencies of the shifted bins relative to the one-sided bandwidth,
    /// so the band edge sits at +-1.
    pub fn normalized_frequencies(&self) -> Vec<f64> {
        let edge = self.band_edge().max(1) as f64;
        self.shifted_indices().iter().map(|&k| k as f64 / edge).collect()
    }
}

/// Per-antenna time-domain streams, `n_symbols * n_fft` samples each. The
/// inverse FFT is unitary, so antenna `b` carries `[P P^H]_bb |occ| / n_fft`.
pub fn ofdm_generate<R: Rng + ?Sized>(cfg: &OfdmConfig, p: &ComplexMatrix, rng: &mut R) -> Result<Vec<Vec<Complex>>> {
    cfg.validate()?;
    let (nb, nu) = p.shape();
    let n = cfg.n_fft;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut streams = vec![Vec::with_capacity(n * cfg.n_symbols); nb];
    let mut freq = vec![vec![Complex::new(0.0, 0.0); n]; nb];
    for _ in 0..cfg.n_symbols {
        for f in freq.iter_mut() {
            f.fill(Complex::new(0.0, 0.0));
        }
        for &k in &cfg.occupied {
            let s: Vec<Complex> = (0..nu).map(|_| circular_gaussian(rng, 1.0)).collect();
            let bin = cfg.bin(k);
            for (b, f) in freq.iter_mut().enumerate() {
                f[bin] = (0..nu).map(|u| p[(b, u)] * s[u]).sum();
            }
        }
        for (f, out) in freq.iter_mut().zip(streams.iter_mut()) {
            ifft.process(f);
            out.extend(f.iter().map(|z| z * scale));
        }
    }
    Ok(streams)
}

/// Averaged rectangular-window periodogram over `n_avg` consecutive blocks,
/// DC-centered and in dB relative to its maximum.
pub fn psd_estimate(samples: &[Complex], n_fft: usize, n_avg: usize) -> Result<Vec<f64>> {
    let needed = n_fft * n_avg;
    if n_fft == 0 || n_avg == 0 {
        return Err(Error::invalid("n_fft and n_avg must be positive"));
    }
    if samples.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: samples.len(),
        });
    }
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut acc = vec![0.0; n_fft];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for block in samples[..needed].chunks_exact(n_fft) {
        buf.copy_from_slice(block);
        fft.process(&mut buf);
        for (a, z) in acc.iter_mut().zip(&buf) {
            *a += z.norm_sqr();
        }
    }
    acc.rotate_right(n_fft / 2);
    let peak = acc.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(vec![10.0 * PSD_FLOOR.log10(); n_fft]);
    }
    Ok(acc.iter().map(|&a| 10.0 * (a / peak).max(PSD_FLOOR).log10()).collect())
}

fn mean_db(psd_db: &[f64], keep: impl Fn(i64) -> bool, cfg: &OfdmConfig) -> f64 {
    let (sum, count) =
        psd_db.iter().zip(cfg.shifted_indices()).filter(|(_, k)| keep(*k)).fold((0.0, 0usize), |(s, n), (d, _)| {
            (s + 10f64.powf(d / 10.0), n + 1)
        });
    if count == 0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (sum / count as f64).max(PSD_FLOOR).log10()
}

/// Mean PSD (dB) over every bin beyond the band edge.
pub fn out_of_band_level(psd_db: &[f64], cfg: &OfdmConfig) -> f64 {
    let edge = cfg.band_edge();
    mean_db(psd_db, |k| k.abs() > edge, cfg)
}

/// Mean PSD (dB) over the adjacent band: one bandwidth beyond each edge.
pub fn shoulder_level(psd_db: &[f64], cfg: &OfdmConfig) -> f64 {
    let edge = cfg.band_edge();
    mean_db(psd_db, |k| k.abs() > edge && k.abs() <= 2 * edge, cfg)
}

/// Runs the OFDM signal through every PA (even-order terms included) and
/// returns the antenna with the highest out-of-band level with its PSD.
pub fn worst_antenna_psd<R: Rng + ?Sized>(
    pa: &PaArrayModel,
    p: &ComplexMatrix,
    cfg: &OfdmConfig,
    rng: &mut R,
) -> Result<(usize, Vec<f64>)> {
    if pa.antennas() != p.nrows() {
        return Err(Error::invalid("PA array and precoder disagree on B"));
    }
    let streams = ofdm_generate(cfg, p, rng)?;
    let psds = streams
        .par_iter()
        .zip(pa.models().par_iter())
        .map(|(x, m)| {
            let y: Vec<Complex> = x.iter().map(|&z| m.apply(z)).collect();
            psd_estimate(&y, cfg.n_fft, cfg.n_symbols)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0;
    let mut level = f64::NEG_INFINITY;
    for (b, psd) in psds.iter().enumerate() {
        let l = out_of_band_level(psd, cfg);
        if l > level {
            level = l;
            worst = b;
        }
    }
    Ok((worst, psds.into_iter().nth(worst).expect("at least one antenna")))
}

/// CSV with columns `freq_normalized, psd_db`.
pub fn write_psd_csv<W: Write>(psd_db: &[f64], cfg: &OfdmConfig, mut w: W) -> std::io::Result<()> {
    writeln!(w, "freq_normalized,psd_db")?;
    for (f, d) in cfg.normalized_frequencies().iter().zip(psd_db) {
        writeln!(w, "{f},{d}")?;
    }
    Ok(())
}
