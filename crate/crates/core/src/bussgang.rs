//! Bussgang decomposition `f(P s) = G P s + e` of the PA array output for
//! Gaussian symbols `s ~ CN(0, I_U)`.
//!
//! With `C_x = P P^H` and per-antenna input variances `sigma_b^2 = [C_x]_bb`:
//!
//! ```text
//! G_bb = sum_k (k+1)! beta_{2k+1}^(b) sigma_b^{2k}
//! C_e  = sum_{k>=1} L_k (C_x . |C_x|^{2k}) L_k^H
//! L_k  = 1/sqrt(k+1) sum_{l=k}^{K} C(l,k) (l+1)! A_{2l+1} diag(C_x)^{l-k}
//! ```
//!
//! where `.` is the entrywise product. `L_k` is diagonal, so every term is an
//! entrywise scaling of `C_x . |C_x|^{2k}`.

use rand::Rng;

use crate::numerics::{
    binomial, factorial, poly_positive_real_roots, sample_circular_gaussian, RealPolynomial,
    ROOT_IMAG_TOL,
};
use crate::pa::PaArrayModel;
use crate::{Complex, ComplexMatrix, Error, Result};

/// Gain, distortion covariance, input covariance and output covariance for
/// one `(PaArrayModel, P)` pair.
#[derive(Debug, Clone)]
pub struct BussgangDecomposition {
    /// Diagonal of `G`.
    pub gain: Vec<Complex>,
    pub c_e: ComplexMatrix,
    pub c_x: ComplexMatrix,
    pub c_z: ComplexMatrix,
    /// Diagonals of `L_1, ..., L_K`.
    pub weights: Vec<Vec<Complex>>,
}

impl BussgangDecomposition {
    /// Per-antenna output powers `[C_z]_bb`.
    pub fn output_powers(&self) -> Vec<f64> {
        (0..self.c_z.nrows()).map(|b| self.c_z[(b, b)].re).collect()
    }

    pub fn total_output_power(&self) -> f64 {
        self.output_powers().iter().sum()
    }

    /// Checks that `C_e` is positive semidefinite. Eigenvalues in
    /// `[-1e-10 tr(C_e), 0)` are clipped to zero; anything more negative is
    /// an error.
    pub fn validated(mut self) -> Result<Self> {
        let trace: f64 = (0..self.c_e.nrows()).map(|b| self.c_e[(b, b)].re).sum();
        if trace == 0.0 {
            return Ok(self);
        }
        let eig = self.c_e.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min >= 0.0 {
            return Ok(self);
        }
        if min < -1e-10 * trace {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min,
                trace,
            });
        }
        let clipped = eig.eigenvalues.map(|v| Complex::new(v.max(0.0), 0.0));
        let q = &eig.eigenvectors;
        let repaired = q * ComplexMatrix::from_diagonal(&clipped) * q.adjoint();
        self.c_z += &repaired - &self.c_e;
        self.c_e = repaired;
        Ok(self)
    }
}

fn input_variances(c_x: &ComplexMatrix) -> Vec<f64> {
    (0..c_x.nrows()).map(|b| c_x[(b, b)].re).collect()
}

fn gain_from_variances(pa: &PaArrayModel, sigma_sq: &[f64]) -> Vec<Complex> {
    pa.models()
        .iter()
        .zip(sigma_sq)
        .map(|(m, &s)| {
            let mut g = Complex::new(0.0, 0.0);
            let mut pow = 1.0;
            for k in 0..=m.order() {
                g += m.beta_odd(k) * (factorial(k + 1) * pow);
                pow *= s;
            }
            g
        })
        .collect()
}

/// Diagonal of `L_k` for `k = 1..=K`; `out[k-1][b]`.
fn distortion_weights(pa: &PaArrayModel, sigma_sq: &[f64]) -> Vec<Vec<Complex>> {
    let order = pa.order();
    (1..=order)
        .map(|k| {
            let norm = 1.0 / ((k + 1) as f64).sqrt();
            pa.models()
                .iter()
                .zip(sigma_sq)
                .map(|(m, &s)| {
                    let mut acc = Complex::new(0.0, 0.0);
                    for l in k..=order {
                        acc += m.beta_odd(l)
                            * (binomial(l, k) * factorial(l + 1) * s.powi((l - k) as i32));
                    }
                    acc * norm
                })
                .collect()
        })
        .collect()
}

fn distortion_from_covariance(pa: &PaArrayModel, c_x: &ComplexMatrix) -> ComplexMatrix {
    let weights = distortion_weights(pa, &input_variances(c_x));
    distortion_from_weights(&weights, c_x)
}

fn distortion_from_weights(weights: &[Vec<Complex>], c_x: &ComplexMatrix) -> ComplexMatrix {
    let n = c_x.nrows();
    let mut c_e = ComplexMatrix::zeros(n, n);
    if weights.is_empty() {
        return c_e;
    }
    for j in 0..n {
        for i in 0..n {
            let c = c_x[(i, j)];
            let mag_sq = c.norm_sqr();
            let mut pow = mag_sq;
            let mut acc = Complex::new(0.0, 0.0);
            for w in weights {
                acc += w[i] * w[j].conj() * pow;
                pow *= mag_sq;
            }
            c_e[(i, j)] = acc * c;
        }
    }
    c_e
}

fn check_dims(pa: &PaArrayModel, p: &ComplexMatrix) {
    assert_eq!(
        pa.antennas(),
        p.nrows(),
        "PA array has {} antennas but the precoder has {} rows",
        pa.antennas(),
        p.nrows()
    );
}

/// Diagonal of the Bussgang gain matrix `G(P)`.
pub fn bussgang_gain(pa: &PaArrayModel, p: &ComplexMatrix) -> Vec<Complex> {
    check_dims(pa, p);
    let sigma_sq: Vec<f64> = p.row_iter().map(|r| r.norm_squared()).collect();
    gain_from_variances(pa, &sigma_sq)
}

/// Distortion covariance `C_e(P)`.
pub fn distortion_covariance(pa: &PaArrayModel, p: &ComplexMatrix) -> ComplexMatrix {
    check_dims(pa, p);
    distortion_from_covariance(pa, &(p * p.adjoint()))
}

pub fn decompose(pa: &PaArrayModel, p: &ComplexMatrix) -> BussgangDecomposition {
    check_dims(pa, p);
    let c_x = p * p.adjoint();
    let sigma_sq = input_variances(&c_x);
    let gain = gain_from_variances(pa, &sigma_sq);
    let weights = distortion_weights(pa, &sigma_sq);
    let c_e = distortion_from_weights(&weights, &c_x);
    let n = c_x.nrows();
    let mut c_z = c_e.clone();
    for j in 0..n {
        for i in 0..n {
            c_z[(i, j)] += gain[i] * c_x[(i, j)] * gain[j].conj();
        }
    }
    BussgangDecomposition {
        gain,
        c_e,
        c_x,
        c_z,
        weights,
    }
}

/// Factors `F_k` with `C_e = sum_k F_k F_k^H`. Row `i` of `F_k` is
/// `l_k,i p_i^(x(k+1)) x conj(p_i)^(xk)` (Kronecker powers of the row of
/// `P`), so `F_k` has `U^(2k+1)` columns.
pub fn distortion_factors(dec: &BussgangDecomposition, p: &ComplexMatrix) -> Vec<ComplexMatrix> {
    let (b, u) = p.shape();
    dec.weights
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let k = idx + 1;
            let cols = u.pow((2 * k + 1) as u32);
            let mut f = ComplexMatrix::zeros(b, cols);
            for i in 0..b {
                let mut row = vec![w[i]];
                for t in 0..(2 * k + 1) {
                    let conj = t > k;
                    let mut next = Vec::with_capacity(row.len() * u);
                    for &r in &row {
                        for c in 0..u {
                            let z = p[(i, c)];
                            next.push(r * if conj { z.conj() } else { z });
                        }
                    }
                    row = next;
                }
                for (c, z) in row.into_iter().enumerate() {
                    f[(i, c)] = z;
                }
            }
            f
        })
        .collect()
}

/// Total output power `tr C_z(sqrt(xi) P)` as a polynomial in `xi`, minus
/// `target`. Only per-antenna variances matter for the trace.
fn scaled_power_poly(pa: &PaArrayModel, sigma_sq: &[f64], target: f64) -> RealPolynomial {
    let mut coeffs = vec![0.0; 2 * pa.order() + 2];
    coeffs[0] = -target;
    for (m, &s) in pa.models().iter().zip(sigma_sq) {
        let poly = m.output_power_poly();
        let mut pow = 1.0;
        for (k, &c) in poly.coeffs().iter().enumerate() {
            if k > 0 {
                coeffs[k] += c * pow;
            }
            pow *= s;
        }
    }
    RealPolynomial::new(coeffs)
}

/// Smallest positive `xi` with `poly(xi) = 0` on the ascending branch.
fn solve_scaling(poly: &RealPolynomial, target: f64) -> Result<f64> {
    let roots = poly_positive_real_roots(poly, ROOT_IMAG_TOL);
    let peak = poly_positive_real_roots(&poly.derivative(), ROOT_IMAG_TOL)
        .first()
        .copied();
    let max_reachable = peak.map_or(f64::INFINITY, |x| poly.eval(x) + target);
    match roots.first() {
        Some(&xi) if peak.is_none_or(|pk| xi <= pk * (1.0 + 1e-9)) => Ok(xi),
        _ => Err(Error::Saturated {
            requested: target,
            max_reachable,
        }),
    }
}

/// Finds `alpha > 0` with `E||f(alpha P s)||^2 = rho_tot` and returns it
/// with `alpha P`.
pub fn normalize_total_power(
    pa: &PaArrayModel,
    p: &ComplexMatrix,
    rho_tot: f64,
) -> Result<(f64, ComplexMatrix)> {
    check_dims(pa, p);
    if !(rho_tot > 0.0) {
        return Err(Error::invalid(format!("rho_tot must be positive, got {rho_tot}")));
    }
    let sigma_sq: Vec<f64> = p.row_iter().map(|r| r.norm_squared()).collect();
    if sigma_sq.iter().all(|&s| s == 0.0) {
        return Err(Error::invalid("cannot normalize a zero precoder"));
    }
    let poly = scaled_power_poly(pa, &sigma_sq, rho_tot);
    let xi = solve_scaling(&poly, rho_tot)?;
    let scaled_sigma: Vec<f64> = sigma_sq.iter().map(|s| s * xi).collect();
    if pa
        .models()
        .iter()
        .zip(&scaled_sigma)
        .any(|(m, &s)| s > m.validity_limit())
    {
        log::warn!("normalized precoder drives an antenna past its monotone output range");
    }
    let alpha = xi.sqrt();
    Ok((alpha, p * Complex::new(alpha, 0.0)))
}

/// Scales down every row whose output power exceeds its `rho_max`, so that
/// it sits exactly at the limit. Feasible rows are returned untouched.
pub fn normalize_per_antenna(pa: &PaArrayModel, p: &ComplexMatrix) -> ComplexMatrix {
    check_dims(pa, p);
    let mut out = p.clone();
    for (b, m) in pa.models().iter().enumerate() {
        let sigma_sq = p.row(b).norm_squared();
        let rho_max = m.rho_max();
        if m.output_power(sigma_sq) <= rho_max {
            continue;
        }
        let poly = scaled_power_poly(&PaArrayModel::uniform(m.clone(), 1), &[sigma_sq], rho_max);
        let mut xi = match solve_scaling(&poly, rho_max) {
            Ok(xi) => xi,
            Err(_) => {
                // Output power starts at zero and is continuous, so a root on
                // the ascending branch below sigma_sq always exists; bisect.
                bisect_scaling(|x| m.output_power(x * sigma_sq) - rho_max)
            }
        };
        while m.output_power(xi * sigma_sq) > rho_max {
            xi *= 1.0 - 4.0 * f64::EPSILON;
        }
        let alpha = Complex::new(xi.sqrt(), 0.0);
        for u in 0..out.ncols() {
            out[(b, u)] *= alpha;
        }
    }
    out
}

fn bisect_scaling(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Empirical decomposition from simulated symbols.
#[derive(Debug, Clone)]
pub struct MonteCarloBussgang {
    pub gain: Vec<Complex>,
    pub c_e: ComplexMatrix,
    /// `||E[x e^H]||_F`.
    pub cross: f64,
    pub c_x: ComplexMatrix,
    /// `E[x y^H]`.
    pub xy: ComplexMatrix,
}

/// Estimates `G`, `C_e` and the input-distortion cross-correlation by
/// pushing `n` draws of `s ~ CN(0, I_U)` through the odd-order PA array.
pub fn mc_oracle<R: Rng + ?Sized>(
    pa: &PaArrayModel,
    p: &ComplexMatrix,
    n: usize,
    rng: &mut R,
) -> MonteCarloBussgang {
    check_dims(pa, p);
    let b = p.nrows();
    let mut r_yy = ComplexMatrix::zeros(b, b);
    let mut r_yx = ComplexMatrix::zeros(b, b);
    let mut r_xx = ComplexMatrix::zeros(b, b);
    let odd_only: Vec<_> = pa
        .models()
        .iter()
        .map(|m| m.clone().with_even(Vec::new()).expect("valid model"))
        .collect();
    for _ in 0..n {
        let s = sample_circular_gaussian(p.ncols(), 1.0, rng);
        let x = p * s;
        let y: Vec<Complex> = x.iter().zip(&odd_only).map(|(&xb, m)| m.apply(xb)).collect();
        for j in 0..b {
            let xj = x[j].conj();
            let yj = y[j].conj();
            for i in 0..b {
                r_yy[(i, j)] += y[i] * yj;
                r_yx[(i, j)] += y[i] * xj;
                r_xx[(i, j)] += x[i] * xj;
            }
        }
    }
    let inv_n = Complex::new(1.0 / n as f64, 0.0);
    r_yy *= inv_n;
    r_yx *= inv_n;
    r_xx *= inv_n;
    let gain: Vec<Complex> = (0..b).map(|i| r_yx[(i, i)] / r_xx[(i, i)].re).collect();
    let g = ComplexMatrix::from_diagonal(&nalgebra::DVector::from_vec(gain.clone()));
    let r_xy = r_yx.adjoint();
    let c_e = &r_yy - &r_yx * g.adjoint() - &g * &r_xy + &g * &r_xx * g.adjoint();
    let cross = (&r_xy - &r_xx * g.adjoint()).norm();
    MonteCarloBussgang {
        gain,
        c_e,
        cross,
        c_x: r_xx,
        xy: r_xy,
    }
}
