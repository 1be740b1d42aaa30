//! Complex linear algebra kernels, real-root polynomial solving, unit
//! conversions and reproducible random streams.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Complex = nalgebra::Complex<f64>;
pub type ComplexMatrix = DMatrix<Complex>;
pub type ComplexVector = DVector<Complex>;

/// Default imaginary-part tolerance used when classifying polynomial roots.
pub const ROOT_IMAG_TOL: f64 = 1e-9;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

/// True when `a` is Hermitian to within `1e-12 * max(1, ||a||_F)`.
pub fn is_hermitian(a: &ComplexMatrix) -> bool {
    if !a.is_square() {
        return false;
    }
    let tol = 1e-12 * a.norm().max(1.0);
    let n = a.nrows();
    (0..n).all(|i| (i..n).all(|j| (a[(i, j)] - a[(j, i)].conj()).norm() <= tol))
}

/// Real quadratic form `v^T A v^*` for Hermitian `A`, returned with its
/// imaginary residue so callers can check it.
pub(crate) fn quadratic_form(a: &ComplexMatrix, v: &ComplexVector) -> Complex {
    let n = v.len();
    let mut acc = Complex::new(0.0, 0.0);
    for j in 0..n {
        let vj = v[j].conj();
        let mut col = Complex::new(0.0, 0.0);
        for i in 0..n {
            col += v[i] * a[(i, j)];
        }
        acc += col * vj;
    }
    acc
}

/// Moore-Penrose pseudo-inverse via the SVD. Singular values below
/// `rcond * sigma_max` are treated as zero.
pub fn pseudo_inverse(a: &ComplexMatrix, rcond: f64) -> Result<ComplexMatrix> {
    if a.is_empty() {
        return Err(Error::invalid("pseudo-inverse of an empty matrix"));
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Err(Error::RankZero);
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let cutoff = rcond * sigma_max;
    let mut out = ComplexMatrix::zeros(a.ncols(), a.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k * inv * u_k^H, with v_k = row k of v_t, conjugated
        for i in 0..a.ncols() {
            let vik = v_t[(k, i)].conj() * inv;
            for j in 0..a.nrows() {
                out[(i, j)] += vik * u[(j, k)].conj();
            }
        }
    }
    Ok(out)
}

/// Smallest and largest singular values.
pub(crate) fn singular_value_range(a: &ComplexMatrix) -> (f64, f64) {
    let s = a.clone().singular_values();
    (s.min(), s.max())
}

/// Real polynomial with coefficients in ascending degree order.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPolynomial {
    coeffs: Vec<f64>,
}

impl RealPolynomial {
    /// Builds a polynomial, trimming trailing coefficients below `1e-300`.
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && coeffs.last().is_some_and(|c| c.abs() < 1e-300) {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        RealPolynomial { coeffs }
    }

    /// Monic polynomial with the given roots.
    pub fn from_roots(roots: &[f64]) -> Self {
        let mut c = vec![1.0];
        for &r in roots {
            let mut next = vec![0.0; c.len() + 1];
            for (i, &ci) in c.iter().enumerate() {
                next[i + 1] += ci;
                next[i] -= r * ci;
            }
            c = next;
        }
        RealPolynomial::new(c)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> RealPolynomial {
        if self.coeffs.len() == 1 {
            return RealPolynomial::new(vec![0.0]);
        }
        RealPolynomial::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &c)| k as f64 * c)
                .collect(),
        )
    }

    fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

/// All positive real roots of `p`, ascending and deduplicated within `tol`.
///
/// Candidates come from the eigenvalues of the companion matrix and are
/// polished with Newton steps on the real polynomial. A root is kept only if
/// `|p(xi)| <= 1e-8 * max|c| * max(1, xi)^degree`.
pub fn poly_positive_real_roots(p: &RealPolynomial, tol: f64) -> Vec<f64> {
    let n = p.degree();
    if n == 0 {
        return Vec::new();
    }
    let c = p.coeffs();
    let lead = c[n];
    let candidates: Vec<(f64, f64)> = if n == 1 {
        vec![(-c[0] / lead, 0.0)]
    } else {
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            companion[(i, n - 1)] = -c[i] / lead;
        }
        balance(&mut companion);
        companion
            .complex_eigenvalues()
            .iter()
            .map(|z| (z.re, z.im))
            .collect()
    };

    let dp = p.derivative();
    let scale = p.max_abs_coeff();
    let mut roots: Vec<f64> = Vec::new();
    for (re, im) in candidates {
        if im.abs() > tol * (1.0 + re.abs()) || re <= tol {
            continue;
        }
        let mut x = re;
        let mut fx = p.eval(x);
        for _ in 0..60 {
            let d = dp.eval(x);
            if d == 0.0 || fx == 0.0 {
                break;
            }
            let next = x - fx / d;
            let fnext = p.eval(next);
            if !next.is_finite() || fnext.abs() >= fx.abs() {
                break;
            }
            x = next;
            fx = fnext;
        }
        if x <= tol {
            continue;
        }
        let bound = 1e-8 * scale * x.max(1.0).powi(n as i32);
        if fx.abs() <= bound {
            roots.push(x);
        }
    }
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() <= tol * (1.0 + b.abs()));
    roots
}

/// Parlett-Reinsch diagonal similarity balancing, in place.
fn balance(a: &mut DMatrix<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                let inv = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= inv;
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

/// Splittable reproducible random stream.
///
/// A stream is a ChaCha8 generator seeded from `master_seed` and positioned on
/// its independent `stream_id` sub-sequence, so the output depends only on the
/// pair, never on thread scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Independent child stream for a labelled purpose (channel draw,
    /// optimizer initializations, ...). Keeps the stream id.
    pub fn fork(&self, label: u64) -> RngStream {
        RngStream {
            master_seed: splitmix64(self.master_seed ^ splitmix64(label)),
            stream_id: self.stream_id,
        }
    }
}

/// One draw from `CN(0, variance)`.
pub fn circular_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(s * re, s * im)
}

/// `n` i.i.d. draws from `CN(0, variance)`.
pub fn sample_circular_gaussian<R: Rng + ?Sized>(
    n: usize,
    variance: f64,
    rng: &mut R,
) -> ComplexVector {
    ComplexVector::from_iterator(n, (0..n).map(|_| circular_gaussian(rng, variance)))
}

/// Matrix with i.i.d. `CN(0, variance)` entries, filled column by column.
pub fn sample_gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    variance: f64,
    rng: &mut R,
) -> ComplexMatrix {
    ComplexMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| circular_gaussian(rng, variance)),
    )
}
