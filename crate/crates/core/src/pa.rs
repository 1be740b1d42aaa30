//! Memoryless polynomial power-amplifier models.
//!
//! Each antenna's PA maps its input sample through
//! `f(x) = sum_k beta_{2k+1} x |x|^{2k}`, optionally extended with even-order
//! terms `beta_{2m} x |x|^{2m-1}`. Even-order terms only enter time-domain
//! simulation; every Gaussian-input analytic quantity uses the odd terms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{
    dbm_to_watts, factorial, poly_positive_real_roots, watts_to_dbm, RealPolynomial,
    ROOT_IMAG_TOL,
};
use crate::{Complex, Error, Result};

/// Upper end of the input-variance range probed for monotone output power.
pub const SIGMA_SQ_PROBE_MAX: f64 = 100.0;

/// One antenna's PA.
#[derive(Debug, Clone, PartialEq)]
pub struct PaModel {
    odd: Vec<Complex>,
    even: Vec<Complex>,
    eta_max: f64,
    rho_max: f64,
    validity_limit: f64,
}

impl PaModel {
    /// `odd = [beta_1, beta_3, ...]`, `even = [beta_2, beta_4, ...]`,
    /// `rho_max` in watts.
    pub fn new(odd: Vec<Complex>, even: Vec<Complex>, eta_max: f64, rho_max: f64) -> Result<Self> {
        if odd.is_empty() || odd[0] == Complex::new(0.0, 0.0) {
            return Err(Error::invalid("beta_1 must be nonzero"));
        }
        if !(eta_max > 0.0 && eta_max <= 1.0) {
            return Err(Error::invalid(format!("eta_max must lie in (0, 1], got {eta_max}")));
        }
        if !(rho_max > 0.0) {
            return Err(Error::invalid(format!("rho_max must be positive, got {rho_max}")));
        }
        if odd.iter().chain(&even).any(|b| !b.re.is_finite() || !b.im.is_finite()) {
            return Err(Error::invalid("non-finite PA coefficient"));
        }
        let mut model = PaModel {
            odd,
            even,
            eta_max,
            rho_max,
            validity_limit: SIGMA_SQ_PROBE_MAX,
        };
        let slope = model.output_power_poly().derivative();
        if let Some(&first) = poly_positive_real_roots(&slope, ROOT_IMAG_TOL).first() {
            model.validity_limit = first.min(SIGMA_SQ_PROBE_MAX);
        }
        Ok(model)
    }

    /// Third-order model `beta_1 x + beta_3 x |x|^2`, unit efficiency and
    /// a 1 kW limit; handy for in-band studies that ignore consumption.
    pub fn cubic(beta1: Complex, beta3: Complex) -> Self {
        PaModel::new(vec![beta1, beta3], Vec::new(), 1.0, 1e3).expect("valid cubic model")
    }

    pub fn linear(beta1: Complex) -> Self {
        PaModel::cubic(beta1, Complex::new(0.0, 0.0))
    }

    pub fn with_power_model(self, eta_max: f64, rho_max: f64) -> Result<Self> {
        PaModel::new(self.odd, self.even, eta_max, rho_max)
    }

    pub fn with_even(self, even: Vec<Complex>) -> Result<Self> {
        PaModel::new(self.odd, even, self.eta_max, self.rho_max)
    }

    /// Nonlinearity order K; the polynomial has degree 2K+1.
    pub fn order(&self) -> usize {
        self.odd.len() - 1
    }

    pub fn odd(&self) -> &[Complex] {
        &self.odd
    }

    pub fn even(&self) -> &[Complex] {
        &self.even
    }

    /// `beta_{2k+1}`, zero beyond the model order.
    pub fn beta_odd(&self, k: usize) -> Complex {
        self.odd.get(k).copied().unwrap_or_default()
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    /// Largest input variance up to which output power is still increasing.
    pub fn validity_limit(&self) -> f64 {
        self.validity_limit
    }

    fn padded(&self, order: usize) -> PaModel {
        let mut m = self.clone();
        m.odd.resize(order + 1, Complex::new(0.0, 0.0));
        m
    }

    /// Applies the PA to one sample, including even-order terms.
    pub fn apply(&self, x: Complex) -> Complex {
        let r = x.norm();
        let r2 = r * r;
        let mut out = Complex::new(0.0, 0.0);
        let mut pow = 1.0;
        for &b in &self.odd {
            out += b * x * pow;
            pow *= r2;
        }
        let mut pow = r;
        for &b in &self.even {
            out += b * x * pow;
            pow *= r2;
        }
        out
    }

    /// Output power as a polynomial in the input variance:
    /// `E|f(x)|^2 = sum_m c_m (sigma^2)^m`, `x ~ CN(0, sigma^2)`, with
    /// `c_m = m! sum_{k+k'=m-1} Re(beta_k conj(beta_k'))`.
    pub fn output_power_poly(&self) -> RealPolynomial {
        let k_max = self.order();
        let mut c = vec![0.0; 2 * k_max + 2];
        for (k, bk) in self.odd.iter().enumerate() {
            for (kk, bkk) in self.odd.iter().enumerate() {
                let m = k + kk + 1;
                c[m] += (bk * bkk.conj()).re * factorial(m);
            }
        }
        RealPolynomial::new(c)
    }

    /// `E|f(x)|^2` for `x ~ CN(0, sigma_sq)` (odd terms only).
    pub fn output_power(&self, sigma_sq: f64) -> f64 {
        self.output_power_poly().eval(sigma_sq)
    }

    /// Consumed power `sqrt(rho_tx rho_max) / eta_max`.
    pub fn consumed_power(&self, rho_tx: f64) -> Result<f64> {
        if rho_tx > self.rho_max * (1.0 + 1e-9) {
            return Err(Error::ConstraintViolation {
                antenna: 0,
                rho_tx,
                rho_max: self.rho_max,
            });
        }
        Ok(self.consumed_power_unchecked(rho_tx))
    }

    pub(crate) fn consumed_power_unchecked(&self, rho_tx: f64) -> f64 {
        (rho_tx.max(0.0) * self.rho_max).sqrt() / self.eta_max
    }
}

/// The B per-antenna PAs of the array. All models share one order.
#[derive(Debug, Clone, PartialEq)]
pub struct PaArrayModel {
    models: Vec<PaModel>,
}

impl PaArrayModel {
    /// Pads lower-order models with zero coefficients to the common order.
    pub fn new(models: Vec<PaModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("PA array needs at least one antenna"));
        }
        let order = models.iter().map(PaModel::order).max().unwrap_or(0);
        let models = models.iter().map(|m| m.padded(order)).collect();
        Ok(PaArrayModel { models })
    }

    pub fn uniform(model: PaModel, antennas: usize) -> Self {
        PaArrayModel {
            models: vec![model; antennas],
        }
    }

    /// Bundled ten-antenna array with distinct third-order distortion
    /// profiles (eta_max = 0.55, rho_max = 25 dBm).
    pub fn table_one() -> Self {
        let records: Vec<PaRecord> =
            serde_json::from_str(TABLE_ONE_JSON).expect("bundled fixture parses");
        PaArrayModel::from_records(&records).expect("bundled fixture is valid")
    }

    pub fn from_records(records: &[PaRecord]) -> Result<Self> {
        PaArrayModel::new(records.iter().map(PaRecord::to_model).collect::<Result<_>>()?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<PaRecord> = serde_json::from_str(text)?;
        PaArrayModel::from_records(&records)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        PaArrayModel::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_records(&self) -> Vec<PaRecord> {
        self.models.iter().map(PaRecord::from_model).collect()
    }

    pub fn antennas(&self) -> usize {
        self.models.len()
    }

    pub fn order(&self) -> usize {
        self.models[0].order()
    }

    pub fn models(&self) -> &[PaModel] {
        &self.models
    }

    pub fn model(&self, b: usize) -> &PaModel {
        &self.models[b]
    }

    /// True when every amplifier is linear (no odd term above beta_1).
    pub fn is_linear(&self) -> bool {
        self.models
            .iter()
            .all(|m| m.odd[1..].iter().all(|b| *b == Complex::new(0.0, 0.0)))
    }

    pub fn rho_max_total(&self) -> f64 {
        self.models.iter().map(PaModel::rho_max).sum()
    }

    /// Per-antenna output powers for per-antenna input variances.
    pub fn output_powers(&self, sigma_sq: &[f64]) -> Vec<f64> {
        self.models
            .iter()
            .zip(sigma_sq)
            .map(|(m, &s)| m.output_power(s))
            .collect()
    }

    /// Total consumed power; fails on the first antenna over its limit.
    pub fn consumed_power_total(&self, per_antenna_tx: &[f64]) -> Result<f64> {
        assert_eq!(per_antenna_tx.len(), self.models.len());
        let mut total = 0.0;
        for (b, (m, &rho)) in self.models.iter().zip(per_antenna_tx).enumerate() {
            total += m.consumed_power(rho).map_err(|e| match e {
                Error::ConstraintViolation { rho_tx, rho_max, .. } => Error::ConstraintViolation {
                    antenna: b,
                    rho_tx,
                    rho_max,
                },
                other => other,
            })?;
        }
        Ok(total)
    }

    #[cfg(test)]
    pub(crate) fn consumed_power_total_unchecked(&self, per_antenna_tx: &[f64]) -> f64 {
        self.models
            .iter()
            .zip(per_antenna_tx)
            .map(|(m, &rho)| m.consumed_power_unchecked(rho))
            .sum()
    }
}

/// File representation of one PA. Coefficients are `[re, im]` pairs and the
/// power limit is in dBm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaRecord {
    pub beta_odd: Vec<[f64; 2]>,
    #[serde(default)]
    pub beta_even: Vec<[f64; 2]>,
    pub eta_max: f64,
    pub rho_max_dbm: f64,
}

impl PaRecord {
    pub fn to_model(&self) -> Result<PaModel> {
        let c = |v: &[[f64; 2]]| v.iter().map(|p| Complex::new(p[0], p[1])).collect();
        PaModel::new(
            c(&self.beta_odd),
            c(&self.beta_even),
            self.eta_max,
            dbm_to_watts(self.rho_max_dbm),
        )
    }

    pub fn from_model(m: &PaModel) -> Self {
        let c = |v: &[Complex]| v.iter().map(|z| [z.re, z.im]).collect();
        PaRecord {
            beta_odd: c(&m.odd),
            beta_even: c(&m.even),
            eta_max: m.eta_max,
            rho_max_dbm: watts_to_dbm(m.rho_max),
        }
    }
}

const TABLE_ONE_JSON: &str = include_str!("../fixtures/table_one.json");
