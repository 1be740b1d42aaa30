//! Sum-rate and consumed-power gradients, distortion-aware beamforming
//! (projected gradient ascent on the sum rate), its energy-efficient
//! two-stage variant, and the power-control sweep.
//!
//! Gradients follow `grad f = df/dRe(P) + j df/dIm(P)`, which equals
//! `2 df/dP^*`; the step `P + mu grad` ascends.

use std::f64::consts::LN_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bussgang::{decompose, normalize_per_antenna, normalize_total_power};
use crate::channel::ChannelSet;
use crate::metrics::{sum_rate, sum_rate_for, ScenarioConfig};
use crate::numerics::{sample_gaussian_matrix, RngStream};
use crate::pa::PaArrayModel;
use crate::precoders::{mrt, zf, PrecoderKind, PrecodingMatrix};
use crate::{Complex, ComplexMatrix, Error, Result};

const ZF_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    ClosedForm,
    Numeric,
    /// Closed form for third-order amplifiers, numeric otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerConstraint {
    TotalPower,
    PerAntenna,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mu0: f64,
    pub iterations: usize,
    pub n_inits: usize,
    /// Finite-difference step relative to `||P||_F / sqrt(BU)`.
    pub delta: f64,
    pub gradient_mode: GradientMode,
    /// An initialization stops once its step size falls below this.
    pub mu_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mu0: 0.1,
            iterations: 50,
            n_inits: 20,
            delta: 1e-6,
            gradient_mode: GradientMode::Auto,
            mu_floor: 1e-12,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0) || self.iterations == 0 || self.n_inits == 0 || !(self.delta > 0.0) {
            return Err(Error::invalid(
                "optimizer needs mu0 > 0, iterations >= 1, n_inits >= 1 and delta > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub mu: f64,
    pub accepted: bool,
}

/// Iteration history of one optimizer call. `runs` holds one record list per
/// initialization; `best_run` indexes the one that produced `final_p`.
#[derive(Debug, Clone)]
pub struct OptimizerTrace {
    pub kind: PrecoderKind,
    pub runs: Vec<Vec<TraceRecord>>,
    pub best_run: usize,
    pub final_p: ComplexMatrix,
    pub final_objective: f64,
}

impl OptimizerTrace {
    pub fn records(&self) -> &[TraceRecord] {
        &self.runs[self.best_run]
    }

    /// Best objective reached by any initialization up to each iteration,
    /// padded with the last value when runs stop early.
    pub fn best_so_far(&self, iterations: usize) -> Vec<f64> {
        (0..=iterations)
            .map(|i| {
                self.runs
                    .iter()
                    .map(|run| run[i.min(run.len() - 1)].objective)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// CSV with columns `iter, objective, mu, accepted` for the best run.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,objective,mu,accepted")?;
        for r in self.records() {
            writeln!(w, "{},{},{},{}", r.iter, r.objective, r.mu, r.accepted)?;
        }
        Ok(())
    }
}

/// Trace of the two-stage energy-efficient optimizer.
#[derive(Debug, Clone)]
pub struct EeTrace {
    /// Stage 1: per-antenna constrained sum-rate ascent.
    pub s1: OptimizerTrace,
    /// Stage 2: consumed power (watts) per iteration.
    pub s2: Vec<TraceRecord>,
    pub final_rate: f64,
    pub final_consumed: f64,
}

/// Step size for a relative perturbation `rel` of an average entry of `p`.
pub fn absolute_delta(p: &ComplexMatrix, rel: f64) -> f64 {
    let norm = p.norm();
    if norm == 0.0 {
        rel
    } else {
        rel * norm / ((p.nrows() * p.ncols()) as f64).sqrt()
    }
}

fn finite_difference<F>(f: F, p: &ComplexMatrix, delta: f64, central: bool) -> Result<ComplexMatrix>
where
    F: Fn(&ComplexMatrix) -> Result<f64>,
{
    let base = if central { 0.0 } else { f(p)? };
    let mut grad = ComplexMatrix::zeros(p.nrows(), p.ncols());
    let mut work = p.clone();
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            let orig = work[(i, j)];
            let mut part = [0.0; 2];
            for (k, dir) in [Complex::new(delta, 0.0), Complex::new(0.0, delta)].into_iter().enumerate() {
                work[(i, j)] = orig + dir;
                let plus = f(&work)?;
                part[k] = if central {
                    work[(i, j)] = orig - dir;
                    (plus - f(&work)?) / (2.0 * delta)
                } else {
                    (plus - base) / delta
                };
            }
            work[(i, j)] = orig;
            grad[(i, j)] = Complex::new(part[0], part[1]);
        }
    }
    Ok(grad)
}

/// Forward-difference sum-rate gradient; `delta` is the absolute step.
pub fn grad_sum_rate_numeric(
    pa: &PaArrayModel,
    h: &ChannelSet,
    p: &ComplexMatrix,
    n0: f64,
    delta: f64,
) -> Result<ComplexMatrix> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    finite_difference(|q| sum_rate_for(pa, h, q, n0), p, delta, false)
}

/// Central-difference sum-rate gradient, used as a reference.
pub fn grad_sum_rate_central(
    pa: &PaArrayModel,
    h: &ChannelSet,
    p: &ComplexMatrix,
    n0: f64,
    delta: f64,
) -> Result<ComplexMatrix> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    finite_difference(|q| sum_rate_for(pa, h, q, n0), p, delta, true)
}

/// Closed-form sum-rate gradient for third-order (or linear) amplifiers.
///
/// With `g_b = beta1_b + 2 beta3_b sigma_b^2` and `a_ur = sum_b h_bu g_b P_br`:
///
/// ```text
/// d|a_ur|^2/dP*_bs = 4 P_bs Re(a_ur^* h_bu beta3_b P_br) + [r = s] a_ur h_bu^* g_b^*
/// dD_u/dP*         = 2 (2 diag(w^*) |C|^2 diag(w) P + diag(w) C.C diag(w^*) P)
/// ```
///
/// where `D_u = h_u^T C_e h_u^*`, `w = h_u . beta3` and `C = P P^H`.
pub fn grad_sum_rate_closed(
    pa: &PaArrayModel,
    h: &ChannelSet,
    p: &ComplexMatrix,
    n0: f64,
) -> Result<ComplexMatrix> {
    if pa.order() > 1 {
        return Err(Error::UnsupportedOrder { order: pa.order() });
    }
    let (nb, nu) = p.shape();
    let hm = &h.h;
    let beta3: Vec<Complex> = pa.models().iter().map(|m| m.beta_odd(1)).collect();
    let g: Vec<Complex> = pa
        .models()
        .iter()
        .zip(p.row_iter())
        .map(|(m, row)| m.beta_odd(0) + m.beta_odd(1) * (2.0 * row.norm_squared()))
        .collect();
    let hg = ComplexMatrix::from_fn(nb, nu, |b, u| hm[(b, u)] * g[b]);
    let a = hg.transpose() * p;
    let c = p * p.adjoint();
    let m1 = c.map(|z| Complex::new(z.norm_sqr(), 0.0));
    let m2 = c.map(|z| z * z);

    let mut v = vec![0.0; nb];
    let mut grad = ComplexMatrix::zeros(nb, nu);
    let mut dist_coef = Vec::with_capacity(nu);
    for u in 0..nu {
        let w: Vec<Complex> = (0..nb).map(|b| hm[(b, u)] * beta3[b]).collect();
        let mut dist = Complex::new(0.0, 0.0);
        for j in 0..nb {
            for i in 0..nb {
                let z = c[(i, j)];
                dist += w[i] * w[j].conj() * z * z.norm_sqr();
            }
        }
        let dist = (2.0 * dist.re).max(0.0);
        let signal = a[(u, u)].norm_sqr();
        let interference: f64 = (0..nu).filter(|&r| r != u).map(|r| a[(u, r)].norm_sqr()).sum();
        let d = interference + dist + n0;
        let coef_sig = 1.0 / ((signal + d) * LN_2);
        let coef_den = -signal / (d * (signal + d) * LN_2);
        for r in 0..nu {
            let coef = if r == u { coef_sig } else { coef_den };
            let aur = a[(u, r)];
            for b in 0..nb {
                v[b] += coef * (aur.conj() * hm[(b, u)] * beta3[b] * p[(b, r)]).re;
                grad[(b, r)] += aur * hm[(b, u)].conj() * g[b].conj() * coef;
            }
        }
        dist_coef.push((coef_den, w));
    }
    for b in 0..nb {
        for s in 0..nu {
            grad[(b, s)] += p[(b, s)] * (4.0 * v[b]);
        }
    }
    for (coef, w) in dist_coef {
        if beta3.iter().all(|z| *z == Complex::new(0.0, 0.0)) {
            break;
        }
        let wp = ComplexMatrix::from_fn(nb, nu, |b, s| w[b] * p[(b, s)]);
        let wcp = ComplexMatrix::from_fn(nb, nu, |b, s| w[b].conj() * p[(b, s)]);
        let t1 = &m1 * &wp;
        let t2 = &m2 * &wcp;
        for b in 0..nb {
            for s in 0..nu {
                let term = w[b].conj() * t1[(b, s)] * 2.0 + w[b] * t2[(b, s)];
                grad[(b, s)] += term * (2.0 * coef);
            }
        }
    }
    Ok(grad * Complex::new(2.0, 0.0))
}

fn rate_gradient(
    pa: &PaArrayModel,
    h: &ChannelSet,
    p: &ComplexMatrix,
    n0: f64,
    cfg: &OptimizerConfig,
) -> Result<ComplexMatrix> {
    let closed = match cfg.gradient_mode {
        GradientMode::ClosedForm => true,
        GradientMode::Numeric => false,
        GradientMode::Auto => pa.order() <= 1,
    };
    if closed {
        grad_sum_rate_closed(pa, h, p, n0)
    } else {
        grad_sum_rate_numeric(pa, h, p, n0, absolute_delta(p, cfg.delta))
    }
}

/// Forward-difference gradient of the total consumed power, with powers
/// taken from the analytic per-antenna output power. Only row `b` changes
/// when entry `(b, u)` is perturbed, so only that row is re-evaluated.
pub fn grad_consumed_numeric(pa: &PaArrayModel, p: &ComplexMatrix, delta: f64) -> Result<ComplexMatrix> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let mut grad = ComplexMatrix::zeros(p.nrows(), p.ncols());
    for (b, m) in pa.models().iter().enumerate() {
        let row = p.row(b);
        let sigma_sq = row.norm_squared();
        if sigma_sq == 0.0 {
            return Err(Error::ZeroRow { antenna: b });
        }
        let base = m.consumed_power_unchecked(m.output_power(sigma_sq));
        for u in 0..p.ncols() {
            let z = row[u];
            let others = sigma_sq - z.norm_sqr();
            let re = Complex::new(z.re + delta, z.im).norm_sqr() + others;
            let im = Complex::new(z.re, z.im + delta).norm_sqr() + others;
            let dre = m.consumed_power_unchecked(m.output_power(re)) - base;
            let dim = m.consumed_power_unchecked(m.output_power(im)) - base;
            grad[(b, u)] = Complex::new(dre / delta, dim / delta);
        }
    }
    Ok(grad)
}

fn consumed_power(pa: &PaArrayModel, p: &ComplexMatrix) -> Result<f64> {
    let rho: Vec<f64> = pa
        .models()
        .iter()
        .zip(p.row_iter())
        .map(|(m, r)| m.output_power(r.norm_squared()))
        .collect();
    pa.consumed_power_total(&rho)
}

fn project(pa: &PaArrayModel, p: &ComplexMatrix, constraint: PowerConstraint, rho_tot: f64) -> Result<ComplexMatrix> {
    match constraint {
        PowerConstraint::TotalPower => Ok(normalize_total_power(pa, p, rho_tot)?.1),
        PowerConstraint::PerAntenna => Ok(normalize_per_antenna(pa, p)),
    }
}

fn initial_point(
    pa: &PaArrayModel,
    p0: &ComplexMatrix,
    constraint: PowerConstraint,
    rho_tot: f64,
) -> Result<ComplexMatrix> {
    match constraint {
        PowerConstraint::TotalPower => project(pa, p0, constraint, rho_tot),
        PowerConstraint::PerAntenna => {
            let scaled = normalize_total_power(pa, p0, pa.rho_max_total())?.1;
            Ok(normalize_per_antenna(pa, &scaled))
        }
    }
}

/// One run of the projected gradient ascent from a feasible start.
fn ascend(
    pa: &PaArrayModel,
    h: &ChannelSet,
    cfg: &OptimizerConfig,
    scenario: &ScenarioConfig,
    constraint: PowerConstraint,
    start: ComplexMatrix,
) -> Result<(ComplexMatrix, f64, Vec<TraceRecord>)> {
    let n0 = scenario.n0;
    let mut p = start;
    let mut rate = sum_rate_for(pa, h, &p, n0)?;
    let mut mu = cfg.mu0;
    let mut records = vec![TraceRecord {
        iter: 0,
        objective: rate,
        mu,
        accepted: true,
    }];
    for iter in 1..=cfg.iterations {
        let grad = rate_gradient(pa, h, &p, n0, cfg)?;
        let step = &p + &grad * Complex::new(mu, 0.0);
        let candidate = project(pa, &step, constraint, scenario.rho_tot)
            .ok()
            .and_then(|c| sum_rate(&decompose(pa, &c), h, &c, n0).ok().map(|r| (c, r)));
        let accepted = match candidate {
            Some((c, r)) if r > rate => {
                p = c;
                rate = r;
                mu = cfg.mu0;
                true
            }
            _ => {
                mu *= 0.5;
                false
            }
        };
        records.push(TraceRecord {
            iter,
            objective: rate,
            mu,
            accepted,
        });
        if mu < cfg.mu_floor {
            break;
        }
    }
    Ok((p, rate, records))
}

/// Distortion-aware beamforming: projected gradient ascent on the sum rate
/// from normalized MRT, normalized ZF and random starts. The best final
/// point wins; ties go to the earlier initialization.
pub fn dab(
    pa: &PaArrayModel,
    h: &ChannelSet,
    cfg: &OptimizerConfig,
    scenario: &ScenarioConfig,
    constraint: PowerConstraint,
    stream: &RngStream,
) -> Result<(PrecodingMatrix, OptimizerTrace)> {
    dab_with_inits(pa, h, cfg, scenario, constraint, stream, &[])
}

/// [`dab`] with additional starting directions placed after MRT and ZF.
pub fn dab_with_inits(
    pa: &PaArrayModel,
    h: &ChannelSet,
    cfg: &OptimizerConfig,
    scenario: &ScenarioConfig,
    constraint: PowerConstraint,
    stream: &RngStream,
    extra: &[ComplexMatrix],
) -> Result<(PrecodingMatrix, OptimizerTrace)> {
    cfg.validate()?;
    let (nb, nu) = h.h.shape();
    let mut starts = vec![mrt(h)?.matrix];
    if cfg.n_inits >= 2 {
        match zf(h, ZF_RCOND) {
            Ok(z) => starts.push(z.matrix),
            Err(e) => log::warn!("ZF initialization skipped: {e}"),
        }
    }
    starts.extend(extra.iter().cloned());
    let n_random = cfg.n_inits.saturating_sub(starts.len());
    for k in 0..n_random {
        let mut rng = stream.fork(k as u64).rng();
        starts.push(sample_gaussian_matrix(nb, nu, 1.0, &mut rng));
    }

    let mut best: Option<(ComplexMatrix, f64, usize)> = None;
    let mut runs = Vec::with_capacity(starts.len());
    for (idx, p0) in starts.iter().enumerate() {
        let start = initial_point(pa, p0, constraint, scenario.rho_tot)?;
        let (p, rate, records) = ascend(pa, h, cfg, scenario, constraint, start)?;
        runs.push(records);
        if best.as_ref().is_none_or(|(_, r, _)| rate > *r) {
            best = Some((p, rate, idx));
        }
    }
    let (p, rate, best_run) = best.expect("at least one initialization");
    let trace = OptimizerTrace {
        kind: PrecoderKind::Dab,
        runs,
        best_run,
        final_p: p.clone(),
        final_objective: rate,
    };
    Ok((PrecodingMatrix::new(p, PrecoderKind::Dab), trace))
}

/// Energy-efficient DAB. Stage 1 maximizes the sum rate under per-antenna
/// limits; stage 2 descends on the consumed power, accepting only decreases,
/// until the rate would drop below `R0` or the iteration budget runs out.
pub fn ee_dab(
    pa: &PaArrayModel,
    h: &ChannelSet,
    cfg: &OptimizerConfig,
    scenario: &ScenarioConfig,
    stream: &RngStream,
) -> Result<(PrecodingMatrix, EeTrace)> {
    let r0 = scenario
        .r0
        .ok_or_else(|| Error::invalid("EE-DAB needs a target rate R0"))?;
    let n0 = scenario.n0;
    let (s1, s1_trace) = dab(pa, h, cfg, scenario, PowerConstraint::PerAntenna, stream)?;
    let mut p = s1.matrix;
    let mut rate = s1_trace.final_objective;
    if rate < r0 {
        return Err(Error::RateUnreachable {
            target: r0,
            achieved: rate,
        });
    }
    let mut consumed = consumed_power(pa, &p)?;
    let mut mu = cfg.mu0;
    let mut records = vec![TraceRecord {
        iter: 0,
        objective: consumed,
        mu,
        accepted: true,
    }];
    for iter in 1..=cfg.iterations {
        let grad = grad_consumed_numeric(pa, &p, absolute_delta(&p, cfg.delta))?;
        let candidate = normalize_per_antenna(pa, &(&p - &grad * Complex::new(mu, 0.0)));
        let trial = consumed_power(pa, &candidate)?;
        let accepted = trial < consumed;
        if accepted {
            let trial_rate = sum_rate_for(pa, h, &candidate, n0)?;
            if trial_rate < r0 {
                break;
            }
            p = candidate;
            consumed = trial;
            rate = trial_rate;
            mu = cfg.mu0;
        } else {
            mu *= 0.5;
        }
        records.push(TraceRecord {
            iter,
            objective: consumed,
            mu,
            accepted,
        });
        if mu < cfg.mu_floor {
            break;
        }
    }
    let trace = EeTrace {
        s1: s1_trace,
        s2: records,
        final_rate: rate,
        final_consumed: consumed,
    };
    Ok((PrecodingMatrix::new(p, PrecoderKind::EeDab), trace))
}

/// Sum rate over a total-power grid for one precoder family, with and
/// without power control.
#[derive(Debug, Clone)]
pub struct PowerControlCurve {
    pub kind: PrecoderKind,
    pub rho_grid: Vec<f64>,
    /// Rate at exactly `rho_grid[i]`; `None` when that power is unreachable.
    pub full_power: Vec<Option<f64>>,
    /// Best rate over `rho_grid[..=i]`.
    pub with_control: Vec<Option<f64>>,
    /// Power achieving `with_control[i]`.
    pub best_rho: Vec<Option<f64>>,
}

impl PowerControlCurve {
    fn from_rates(kind: PrecoderKind, rho_grid: &[f64], full_power: Vec<Option<f64>>) -> Self {
        let mut with_control = Vec::with_capacity(full_power.len());
        let mut best_rho = Vec::with_capacity(full_power.len());
        let mut best: Option<(f64, f64)> = None;
        for (&rho, r) in rho_grid.iter().zip(&full_power) {
            if let Some(r) = *r {
                if best.is_none_or(|(b, _)| r > b) {
                    best = Some((r, rho));
                }
            }
            with_control.push(best.map(|b| b.0));
            best_rho.push(best.map(|b| b.1));
        }
        PowerControlCurve {
            kind,
            rho_grid: rho_grid.to_vec(),
            full_power,
            with_control,
            best_rho,
        }
    }
}

/// Rates for MRT, ZF and DAB at every grid power (watts, ascending). DAB is
/// re-optimized at each power.
pub fn power_control_sweep(
    pa: &PaArrayModel,
    h: &ChannelSet,
    cfg: &OptimizerConfig,
    n0: f64,
    rho_grid: &[f64],
    stream: &RngStream,
) -> Result<Vec<PowerControlCurve>> {
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("power grid must be strictly increasing"));
    }
    let directions = [mrt(h)?, zf(h, ZF_RCOND)?];
    let mut curves = Vec::new();
    for dir in &directions {
        let rates = rho_grid
            .iter()
            .map(|&rho| match normalize_total_power(pa, &dir.matrix, rho) {
                Ok((_, p)) => sum_rate_for(pa, h, &p, n0).map(Some),
                Err(Error::Saturated { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        curves.push(PowerControlCurve::from_rates(dir.kind, rho_grid, rates));
    }
    let dab_rates = rho_grid
        .iter()
        .map(|&rho| {
            let scenario = ScenarioConfig::new(n0, rho);
            match dab(pa, h, cfg, &scenario, PowerConstraint::TotalPower, stream) {
                Ok((_, t)) => Ok(Some(t.final_objective)),
                Err(Error::Saturated { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    curves.push(PowerControlCurve::from_rates(PrecoderKind::Dab, rho_grid, dab_rates));
    Ok(curves)
}
