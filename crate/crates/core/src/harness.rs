//! Monte-Carlo experiment harness: JSON configuration, per-realization
//! work items on a rayon pool, long-format result tables, aggregates and
//! CDFs, and the run manifest.
//!
//! Realization `r` draws everything from `RngStream::new(master_seed, r)`,
//! and results are merged in realization order, so output does not depend
//! on the worker count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bussgang::{decompose, normalize_total_power};
use crate::channel::{corrupt_channel_matrix, geometric_channel, ChannelModel, ChannelSet, GeometryConfig};
use crate::metrics::{default_angle_grid, radiation_pattern, sum_rate_for, ScenarioConfig};
use crate::numerics::{db_to_linear, dbm_to_watts, linear_to_db, sample_gaussian_matrix, watts_to_dbm, RngStream};
use crate::oob::{out_of_band_level, shoulder_level, worst_antenna_psd, write_psd_csv, OfdmConfig};
use crate::optimize::{
    absolute_delta, dab, dab_with_inits, ee_dab, grad_sum_rate_central, grad_sum_rate_closed,
    power_control_sweep, OptimizerConfig, PowerConstraint, TraceRecord,
};
use crate::pa::{PaArrayModel, PaModel, PaRecord};
use crate::precoders::{mrt, zero_distortion_array, zf, PrecoderKind};
use crate::{ComplexMatrix, Error, Result};

const ZF_RCOND: f64 = 1e-10;
const CDF_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Pattern,
    RateCdf,
    SnrSweep,
    PowerControl,
    EeCdf,
    Convergence,
    OobPsd,
    Gradcheck,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Pattern => "pattern",
            ExperimentKind::RateCdf => "rate_cdf",
            ExperimentKind::SnrSweep => "snr_sweep",
            ExperimentKind::PowerControl => "power_control",
            ExperimentKind::EeCdf => "ee_cdf",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::OobPsd => "oob_psd",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }
}

/// Where the PA coefficients come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PaSpec {
    /// The ten heterogeneous amplifiers of the bundled fixture.
    TableOne,
    /// One model copied to every antenna.
    Uniform(PaRecord),
    /// One record per antenna.
    Records { records: Vec<PaRecord> },
    /// JSON file holding a list of records.
    File { path: PathBuf },
}

impl Default for PaSpec {
    fn default() -> Self {
        PaSpec::Uniform(PaRecord {
            beta_odd: vec![[1.0, 0.0], [-0.049, -0.023]],
            beta_even: vec![],
            eta_max: 0.55,
            rho_max_dbm: 25.0,
        })
    }
}

impl PaSpec {
    pub fn build(&self, antennas: usize) -> Result<PaArrayModel> {
        let pa = match self {
            PaSpec::TableOne => PaArrayModel::table_one(),
            PaSpec::Uniform(r) => PaArrayModel::uniform(r.to_model()?, antennas),
            PaSpec::Records { records } => PaArrayModel::from_records(records)?,
            PaSpec::File { path } => PaArrayModel::from_json_file(path)?,
        };
        if pa.antennas() != antennas {
            return Err(Error::invalid(format!(
                "PA specification has {} amplifiers but the experiment uses B = {antennas}",
                pa.antennas()
            )));
        }
        Ok(pa)
    }
}

/// Scenario parameters at the configuration boundary (dBm, dB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n0_dbm: Option<f64>,
    pub rho_tot_dbm: Option<f64>,
    pub rho_tot_max_dbm: Option<f64>,
    pub bandwidth_hz: f64,
    pub r0: Option<f64>,
    /// Average path gain used to turn an average SNR into a noise power.
    pub gamma_avg_sq_db: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n0_dbm: None,
            rho_tot_dbm: None,
            rho_tot_max_dbm: None,
            bandwidth_hz: 1.0,
            r0: None,
            gamma_avg_sq_db: -110.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub model: ChannelModel,
    pub geometry: GeometryConfig,
    /// Fixed LoS user angles; when absent LoS angles are drawn uniformly
    /// from `[0, 180)` degrees per realization.
    pub angles_deg: Option<Vec<f64>>,
    /// CSIT error level; precoders see the corrupted channel.
    pub tau: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            model: ChannelModel::Geometric,
            geometry: GeometryConfig::default(),
            angles_deg: None,
            tau: 0.0,
        }
    }
}

fn one() -> usize {
    1
}

/// A complete experiment description. `sweep` is the swept parameter of the
/// experiment: average SNR in dB (`rate_cdf`), SNR in dB (`snr_sweep`),
/// total power in dBm (`power_control`, `convergence`), per-antenna limit in
/// dBm (`oob_psd`) or target rate (`ee_cdf`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub antennas: usize,
    pub users: usize,
    #[serde(default)]
    pub pa: PaSpec,
    #[serde(default)]
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "one")]
    pub n_realizations: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub precoders: Option<Vec<PrecoderKind>>,
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub ofdm: OfdmConfig,
    /// Adds the zero-distortion direction to the DAB starting points
    /// (single-user, even B only).
    #[serde(default)]
    pub dab_zero_dist_init: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, antennas: usize, users: usize) -> Self {
        ExperimentConfig {
            experiment,
            antennas,
            users,
            pa: PaSpec::default(),
            scenario: ScenarioSpec::default(),
            channel: ChannelSpec::default(),
            optimizer: OptimizerConfig::default(),
            n_realizations: 1,
            master_seed: 0,
            output: None,
            precoders: None,
            sweep: Vec::new(),
            ofdm: OfdmConfig::default(),
            dab_zero_dist_init: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.antennas < self.users {
            return Err(Error::invalid(format!(
                "need B >= U >= 1, got B={} U={}",
                self.antennas, self.users
            )));
        }
        if self.n_realizations == 0 {
            return Err(Error::invalid("n_realizations must be at least 1"));
        }
        self.optimizer.validate()?;
        self.channel.geometry.validate()?;
        if !(0.0..=1.0).contains(&self.channel.tau) {
            return Err(Error::invalid("tau must lie in [0, 1]"));
        }
        if let Some(a) = &self.channel.angles_deg {
            if a.len() != self.users {
                return Err(Error::invalid("angles_deg needs one angle per user"));
            }
        }
        let s = &self.scenario;
        let need = |v: Option<f64>, name: &str| {
            v.map(|_| ()).ok_or_else(|| {
                Error::invalid(format!("{} experiments need scenario.{name}", self.experiment.as_str()))
            })
        };
        match self.experiment {
            ExperimentKind::Pattern | ExperimentKind::SnrSweep => need(s.rho_tot_dbm, "rho_tot_dbm")?,
            ExperimentKind::RateCdf => {
                need(s.rho_tot_dbm, "rho_tot_dbm")?;
                if self.sweep.is_empty() {
                    need(s.n0_dbm, "n0_dbm")?;
                }
            }
            ExperimentKind::PowerControl | ExperimentKind::OobPsd => need(s.n0_dbm, "n0_dbm")?,
            ExperimentKind::EeCdf => {
                need(s.n0_dbm, "n0_dbm")?;
                if self.sweep.is_empty() {
                    need(s.r0, "r0")?;
                }
            }
            ExperimentKind::Convergence => {
                need(s.n0_dbm, "n0_dbm")?;
                if self.sweep.is_empty() {
                    need(s.rho_tot_dbm, "rho_tot_dbm")?;
                }
            }
            ExperimentKind::Gradcheck => {}
        }
        if matches!(self.experiment, ExperimentKind::PowerControl | ExperimentKind::OobPsd | ExperimentKind::SnrSweep)
            && self.sweep.is_empty()
        {
            return Err(Error::invalid(format!("{} experiments need a sweep grid", self.experiment.as_str())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Infeasible,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub realization: usize,
    pub precoder: String,
    pub metric: String,
    pub param: Option<f64>,
    pub value: f64,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub precoder: String,
    pub metric: String,
    pub param: Option<f64>,
    pub n_ok: usize,
    pub n_infeasible: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfRow {
    pub precoder: String,
    pub metric: String,
    pub param: Option<f64>,
    pub x: f64,
    pub cdf: f64,
}

fn fmt_param(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

/// Long-format results, one row per (realization, precoder, metric, param).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

type GroupKey = (String, String, Option<u64>);

impl ResultTable {
    fn groups(&self) -> BTreeMap<GroupKey, (Option<f64>, Vec<&ResultRow>)> {
        let mut out: BTreeMap<GroupKey, (Option<f64>, Vec<&ResultRow>)> = BTreeMap::new();
        for r in &self.rows {
            // Order params numerically; the bit pattern of a positive float
            // sorts like the float, so flip negatives.
            let key = r.param.map(|p| {
                let bits = p.to_bits();
                if p < 0.0 {
                    !bits
                } else {
                    bits | (1 << 63)
                }
            });
            out.entry((r.precoder.clone(), r.metric.clone(), key))
                .or_insert_with(|| (r.param, Vec::new()))
                .1
                .push(r);
        }
        out
    }

    /// Values of feasible rows for one group, in realization order.
    pub fn values(&self, precoder: &str, metric: &str, param: Option<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.precoder == precoder && r.metric == metric && r.param == param && r.status == RowStatus::Ok)
            .map(|r| r.value)
            .collect()
    }

    /// Value per realization for one group; `None` marks infeasible rows.
    pub fn by_realization(&self, precoder: &str, metric: &str, param: Option<f64>) -> BTreeMap<usize, Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.precoder == precoder && r.metric == metric && r.param == param)
            .map(|r| (r.realization, (r.status == RowStatus::Ok).then_some(r.value)))
            .collect()
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        self.groups()
            .into_iter()
            .map(|((precoder, metric, _), (param, rows))| {
                let ok: Vec<f64> = rows.iter().filter(|r| r.status == RowStatus::Ok).map(|r| r.value).collect();
                AggregateRow {
                    precoder,
                    metric,
                    param,
                    n_ok: ok.len(),
                    n_infeasible: rows.len() - ok.len(),
                    mean: mean(&ok),
                    median: median(&ok),
                }
            })
            .collect()
    }

    /// Empirical CDF of every group on an even grid spanning its values.
    pub fn cdfs(&self) -> Vec<CdfRow> {
        let mut out = Vec::new();
        for ((precoder, metric, _), (param, rows)) in self.groups() {
            let ok: Vec<f64> = rows.iter().filter(|r| r.status == RowStatus::Ok).map(|r| r.value).collect();
            if ok.is_empty() {
                continue;
            }
            let lo = ok.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ok.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let grid: Vec<f64> = (0..CDF_POINTS)
                .map(|i| if hi > lo { lo + (hi - lo) * i as f64 / (CDF_POINTS - 1) as f64 } else { lo })
                .collect();
            let cdf = empirical_cdf(&ok, &grid).expect("nonempty values");
            for (x, c) in grid.into_iter().zip(cdf) {
                out.push(CdfRow {
                    precoder: precoder.clone(),
                    metric: metric.clone(),
                    param,
                    x,
                    cdf: c,
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("realization,precoder,metric,param,value,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.realization,
                r.precoder,
                r.metric,
                fmt_param(r.param),
                r.value,
                r.status.as_str()
            );
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from("precoder,metric,param,n_ok,n_infeasible,mean,median\n");
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                a.precoder,
                a.metric,
                fmt_param(a.param),
                a.n_ok,
                a.n_infeasible,
                a.mean,
                a.median
            );
        }
        s
    }

    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("precoder,metric,param,x,cdf\n");
        for c in self.cdfs() {
            let _ = writeln!(s, "{},{},{},{},{}", c.precoder, c.metric, fmt_param(c.param), c.x, c.cdf);
        }
        s
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fraction of `values` at or below each grid point.
pub fn empirical_cdf(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("empirical CDF of an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(grid
        .iter()
        .map(|&g| sorted.partition_point(|&v| v <= g) as f64 / n)
        .collect())
}

/// Peak of a sampled curve, refined by a parabola through the largest
/// sample and its neighbours.
pub fn interpolated_peak(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let (i, _) = y
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if i == 0 || i + 1 >= y.len() || !y[i - 1].is_finite() || !y[i + 1].is_finite() {
        return Some((x[i], y[i]));
    }
    let (x0, x1, x2) = (x[i - 1], x[i], x[i + 1]);
    let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    if a >= 0.0 {
        return Some((x1, y1));
    }
    let xv = -b / (2.0 * a);
    let c = y1 - a * x1 * x1 - b * x1;
    Some((xv, a * xv * xv + b * xv + c))
}

/// Everything an experiment produced, before it touches the filesystem.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub table: ResultTable,
    /// Experiment-specific files: name and contents.
    pub files: Vec<(String, String)>,
}

impl ExperimentOutput {
    pub fn manifest(&self) -> Result<String> {
        let manifest = serde_json::json!({
            "crate": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": self.config.experiment.as_str(),
            "master_seed": self.config.master_seed,
            "config": self.config,
        });
        Ok(serde_json::to_string_pretty(&manifest)? + "\n")
    }

    /// Writes `results.csv`, `aggregates.csv`, `cdf.csv`, the experiment
    /// files and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = vec![
            ("results.csv".to_string(), self.table.to_csv()),
            ("aggregates.csv".to_string(), self.table.aggregates_csv()),
            ("cdf.csv".to_string(), self.table.cdf_csv()),
        ];
        files.extend(self.files.iter().cloned());
        files.push(("manifest.json".to_string(), self.manifest()?));
        let mut written = Vec::with_capacity(files.len());
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Shared, read-only state of one experiment.
struct Context {
    cfg: ExperimentConfig,
    pa: PaArrayModel,
}

#[derive(Default)]
struct RealizationOutput {
    rows: Vec<ResultRow>,
    /// Per-iteration series keyed by file stem, averaged across realizations.
    series: Vec<(String, Vec<TraceRecord>)>,
    /// Files taken from realization 0 only.
    files: Vec<(String, String)>,
}

impl RealizationOutput {
    fn push(&mut self, realization: usize, precoder: &str, metric: &str, param: Option<f64>, value: Option<f64>) {
        self.rows.push(ResultRow {
            realization,
            precoder: precoder.to_string(),
            metric: metric.to_string(),
            param,
            value: value.unwrap_or(f64::NAN),
            status: if value.is_some() { RowStatus::Ok } else { RowStatus::Infeasible },
        });
    }
}

fn is_infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::Saturated { .. } | Error::RateUnreachable { .. } | Error::ConstraintViolation { .. }
    )
}

/// Maps infeasibility errors to `None`, propagating everything else.
fn feasible<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if is_infeasible(&e) => {
            log::debug!("infeasible: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

impl Context {
    fn rho_tot(&self) -> f64 {
        dbm_to_watts(self.cfg.scenario.rho_tot_dbm.expect("validated"))
    }

    fn n0(&self) -> f64 {
        dbm_to_watts(self.cfg.scenario.n0_dbm.expect("validated"))
    }

    fn precoders(&self, default: &[PrecoderKind]) -> Vec<PrecoderKind> {
        self.cfg.precoders.clone().unwrap_or_else(|| default.to_vec())
    }

    fn draw_channel(&self, rng: &mut impl Rng) -> Result<ChannelSet> {
        let (b, u) = (self.cfg.antennas, self.cfg.users);
        match self.cfg.channel.model {
            ChannelModel::LineOfSight => {
                let angles: Vec<f64> = match &self.cfg.channel.angles_deg {
                    Some(a) => a.iter().map(|d| d.to_radians()).collect(),
                    None => (0..u).map(|_| PI * rng.random::<f64>()).collect(),
                };
                ChannelSet::line_of_sight(&angles, b)
            }
            ChannelModel::Geometric => geometric_channel(&self.cfg.channel.geometry, b, u, rng),
        }
    }

    /// True channel and the transmitter's estimate of it.
    fn channels(&self, stream: &RngStream) -> Result<(ChannelSet, ChannelSet)> {
        let h = self.draw_channel(&mut stream.rng())?;
        let tau = self.cfg.channel.tau;
        if tau == 0.0 {
            return Ok((h.clone(), h));
        }
        let est = corrupt_channel_matrix(&h.h, tau, &mut stream.fork(1).rng())?;
        let est = ChannelSet::new(est, h.model, h.aods.clone(), h.distances.clone())?;
        Ok((h, est))
    }

    fn zero_dist_direction(&self, h: &ChannelSet) -> Result<ComplexMatrix> {
        if h.users() != 1 || h.model != ChannelModel::LineOfSight {
            return Err(Error::invalid("zero-distortion precoding needs a single LoS user"));
        }
        Ok(zero_distortion_array(&self.pa, h.aods[0][0])?.matrix)
    }

    /// Normalized precoder of the given kind under a total-power target.
    fn design(&self, kind: PrecoderKind, h: &ChannelSet, scenario: &ScenarioConfig, stream: &RngStream) -> Result<ComplexMatrix> {
        let direction = match kind {
            PrecoderKind::Mrt => mrt(h)?.matrix,
            PrecoderKind::Zf => zf(h, ZF_RCOND)?.matrix,
            PrecoderKind::ZeroDist => self.zero_dist_direction(h)?,
            PrecoderKind::Dab => {
                let extra = if self.cfg.dab_zero_dist_init && h.users() == 1 && self.pa.antennas() % 2 == 0 {
                    vec![self.zero_dist_direction(h)?]
                } else {
                    Vec::new()
                };
                let dab_stream = stream.fork(2);
                let (p, _) = dab_with_inits(
                    &self.pa,
                    h,
                    &self.cfg.optimizer,
                    scenario,
                    PowerConstraint::TotalPower,
                    &dab_stream,
                    &extra,
                )?;
                return Ok(p.matrix);
            }
            other => return Err(Error::invalid(format!("precoder {other} cannot be designed for a fixed total power"))),
        };
        Ok(normalize_total_power(&self.pa, &direction, scenario.rho_tot)?.1)
    }
}

fn run_pattern(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, est) = ctx.channels(stream)?;
    let scenario = ScenarioConfig::new(ctx.cfg.scenario.n0_dbm.map_or(1.0, dbm_to_watts), ctx.rho_tot());
    let default = if h.users() == 1 && ctx.pa.antennas() % 2 == 0 {
        vec![PrecoderKind::Mrt, PrecoderKind::ZeroDist]
    } else {
        vec![PrecoderKind::Mrt, PrecoderKind::Zf]
    };
    let grid = default_angle_grid();
    for kind in ctx.precoders(&default) {
        let Some(p) = feasible(ctx.design(kind, &est, &scenario, stream))? else {
            out.push(r, kind.as_str(), "rho_lin_user_dbm", None, None);
            continue;
        };
        let dec = decompose(&ctx.pa, &p);
        let pattern = radiation_pattern(&dec, &p, &grid)?;
        let ratio: Vec<f64> = pattern
            .rho_dist
            .iter()
            .zip(&pattern.rho_lin)
            .filter(|(_, &l)| l > 0.0)
            .map(|(d, l)| d / l)
            .collect();
        let (lo, hi) = ratio.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        out.push(r, kind.as_str(), "dist_to_lin_spread", None, Some(if hi > 0.0 { (hi - lo) / hi } else { 0.0 }));
        for u in 0..h.users() {
            let at = radiation_pattern(&dec, &p, &[h.aods[u][0]])?;
            out.push(r, kind.as_str(), "rho_lin_user_dbm", Some(u as f64), Some(watts_to_dbm(at.rho_lin[0])));
            out.push(r, kind.as_str(), "rho_dist_user_dbm", Some(u as f64), Some(watts_to_dbm(at.rho_dist[0])));
        }
        if ctx.cfg.scenario.n0_dbm.is_some() {
            out.push(r, kind.as_str(), "sum_rate", None, Some(sum_rate_for(&ctx.pa, &h, &p, scenario.n0)?));
        }
        if r == 0 {
            let mut buf = Vec::new();
            pattern.write_csv(&mut buf)?;
            out.files.push((format!("pattern_{}.csv", kind.as_str()), String::from_utf8(buf).expect("utf8")));
        }
    }
    Ok(out)
}

/// Sum rates of every precoder for each noise level of the sweep.
fn run_rates(ctx: &Context, r: usize, stream: &RngStream, noise: &[(f64, f64)], default: &[PrecoderKind]) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, est) = ctx.channels(stream)?;
    let kinds = ctx.precoders(default);
    for &(param, n0) in noise {
        let scenario = ScenarioConfig::new(n0, ctx.rho_tot());
        for &kind in &kinds {
            let rate = match feasible(ctx.design(kind, &est, &scenario, stream))? {
                Some(p) => Some(sum_rate_for(&ctx.pa, &h, &p, n0)?),
                None => None,
            };
            out.push(r, kind.as_str(), "sum_rate", Some(param), rate);
        }
    }
    Ok(out)
}

fn run_rate_cdf(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let gamma = db_to_linear(ctx.cfg.scenario.gamma_avg_sq_db);
    let rho = ctx.rho_tot();
    let noise: Vec<(f64, f64)> = if ctx.cfg.sweep.is_empty() {
        let n0 = ctx.n0();
        vec![(linear_to_db(gamma * rho / n0), n0)]
    } else {
        ctx.cfg.sweep.iter().map(|&snr| (snr, gamma * rho / db_to_linear(snr))).collect()
    };
    run_rates(ctx, r, stream, &noise, &[PrecoderKind::Mrt, PrecoderKind::Zf, PrecoderKind::Dab])
}

fn run_snr_sweep(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let rho = ctx.rho_tot();
    let noise: Vec<(f64, f64)> = ctx.cfg.sweep.iter().map(|&snr| (snr, rho / db_to_linear(snr))).collect();
    let default = if ctx.cfg.users == 1 && ctx.cfg.antennas % 2 == 0 && ctx.cfg.channel.model == ChannelModel::LineOfSight {
        vec![PrecoderKind::Mrt, PrecoderKind::ZeroDist, PrecoderKind::Dab]
    } else {
        vec![PrecoderKind::Mrt, PrecoderKind::Zf, PrecoderKind::Dab]
    };
    run_rates(ctx, r, stream, &noise, &default)
}

fn run_power_control(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, est) = ctx.channels(stream)?;
    let grid: Vec<f64> = ctx.cfg.sweep.iter().map(|&d| dbm_to_watts(d)).collect();
    let n0 = ctx.n0();
    // Precoders are designed on the estimate; the sweep only needs rates on
    // the true channel when the two coincide.
    if ctx.cfg.channel.tau != 0.0 {
        return Err(Error::invalid("power_control does not support imperfect CSIT"));
    }
    let _ = est;
    let curves = power_control_sweep(&ctx.pa, &h, &ctx.cfg.optimizer, n0, &grid, &stream.fork(2))?;
    for curve in curves {
        for (i, &dbm) in ctx.cfg.sweep.iter().enumerate() {
            out.push(r, curve.kind.as_str(), "sum_rate_full", Some(dbm), curve.full_power[i]);
            out.push(r, curve.kind.as_str(), "sum_rate_control", Some(dbm), curve.with_control[i]);
        }
    }
    Ok(out)
}

/// Smallest total power (dBm, to 0.01 dB) at which `rate_at` reaches `r0`,
/// searched below `hi_dbm`. Returns the precoder and rate found there.
fn scale_to_rate<F>(mut rate_at: F, r0: f64, hi_dbm: f64) -> Result<Option<(f64, ComplexMatrix, f64)>>
where
    F: FnMut(f64) -> Result<Option<(ComplexMatrix, f64)>>,
{
    let Some((mut p_hi, mut r_hi)) = rate_at(dbm_to_watts(hi_dbm))? else {
        return Ok(None);
    };
    if r_hi < r0 {
        return Ok(None);
    }
    let mut hi = hi_dbm;
    let mut lo = hi_dbm - 10.0;
    loop {
        match rate_at(dbm_to_watts(lo))? {
            Some((p, rate)) if rate >= r0 => {
                hi = lo;
                p_hi = p;
                r_hi = rate;
                lo -= 10.0;
                if lo < hi_dbm - 200.0 {
                    return Ok(Some((hi, p_hi, r_hi)));
                }
            }
            _ => break,
        }
    }
    while hi - lo > 0.01 {
        let mid = 0.5 * (lo + hi);
        match rate_at(dbm_to_watts(mid))? {
            Some((p, rate)) if rate >= r0 => {
                hi = mid;
                p_hi = p;
                r_hi = rate;
            }
            _ => lo = mid,
        }
    }
    Ok(Some((hi, p_hi, r_hi)))
}

fn consumed(pa: &PaArrayModel, p: &ComplexMatrix) -> Result<f64> {
    let rho: Vec<f64> = p.row_iter().enumerate().map(|(b, row)| pa.model(b).output_power(row.norm_squared())).collect();
    pa.consumed_power_total(&rho)
}

fn run_ee_cdf(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, est) = ctx.channels(stream)?;
    let n0 = ctx.n0();
    let targets = if ctx.cfg.sweep.is_empty() {
        vec![ctx.cfg.scenario.r0.expect("validated")]
    } else {
        ctx.cfg.sweep.clone()
    };
    let hi_dbm = watts_to_dbm(ctx.pa.rho_max_total());
    let kinds = ctx.precoders(&[PrecoderKind::EeDab, PrecoderKind::Dab, PrecoderKind::Zf]);
    for r0 in targets {
        let mut scenario = ScenarioConfig::new(n0, ctx.pa.rho_max_total());
        scenario.r0 = Some(r0);
        for &kind in &kinds {
            let found = match kind {
                PrecoderKind::EeDab => feasible(ee_dab(&ctx.pa, &est, &ctx.cfg.optimizer, &scenario, &stream.fork(2)))?
                    .map(|(p, _)| {
                        let s1 = p.matrix;
                        let total = decompose(&ctx.pa, &s1).total_output_power();
                        (watts_to_dbm(total), s1)
                    }),
                _ => scale_to_rate(
                    |rho| {
                        let sc = ScenarioConfig::new(n0, rho);
                        Ok(feasible(ctx.design(kind, &est, &sc, stream))?
                            .map(|p| {
                                let rate = sum_rate_for(&ctx.pa, &est, &p, n0)?;
                                Ok::<_, Error>((p, rate))
                            })
                            .transpose()?)
                    },
                    r0,
                    hi_dbm,
                )?
                .map(|(dbm, p, _)| (dbm, p)),
            };
            let (rate, power, tot) = match &found {
                Some((dbm, p)) => {
                    let rate = sum_rate_for(&ctx.pa, &h, p, n0)?;
                    (Some(rate), feasible(consumed(&ctx.pa, p))?, Some(*dbm))
                }
                None => (None, None, None),
            };
            out.push(r, kind.as_str(), "consumed_power_w", Some(r0), power);
            out.push(r, kind.as_str(), "sum_rate", Some(r0), rate);
            out.push(r, kind.as_str(), "rho_tot_dbm", Some(r0), tot);
        }
    }
    Ok(out)
}

fn pad_series(records: &[TraceRecord], iterations: usize) -> Vec<TraceRecord> {
    (0..=iterations)
        .map(|i| {
            let last = records[i.min(records.len() - 1)];
            TraceRecord { iter: i, ..last }
        })
        .collect()
}

fn run_convergence(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, _) = ctx.channels(stream)?;
    let n0 = ctx.n0();
    let iters = ctx.cfg.optimizer.iterations;
    let powers = if ctx.cfg.sweep.is_empty() {
        vec![ctx.cfg.scenario.rho_tot_dbm.expect("validated")]
    } else {
        ctx.cfg.sweep.clone()
    };
    for dbm in powers {
        let scenario = ScenarioConfig::new(n0, dbm_to_watts(dbm));
        let Some((_, trace)) = feasible(dab(&ctx.pa, &h, &ctx.cfg.optimizer, &scenario, PowerConstraint::TotalPower, &stream.fork(2)))? else {
            out.push(r, "dab", &format!("objective@{dbm}"), None, None);
            continue;
        };
        let best = trace.best_so_far(iters);
        let run = pad_series(trace.records(), iters);
        let series: Vec<TraceRecord> = run
            .iter()
            .zip(&best)
            .map(|(rec, &b)| TraceRecord { objective: b, ..*rec })
            .collect();
        for rec in &series {
            out.push(r, "dab", &format!("objective@{dbm}"), Some(rec.iter as f64), Some(rec.objective));
        }
        out.series.push((format!("trace_dab_{dbm}"), series));
    }
    if let Some(r0) = ctx.cfg.scenario.r0 {
        let mut scenario = ScenarioConfig::new(n0, ctx.pa.rho_max_total());
        scenario.r0 = Some(r0);
        match feasible(ee_dab(&ctx.pa, &h, &ctx.cfg.optimizer, &scenario, &stream.fork(2)))? {
            Some((_, trace)) => {
                let series = pad_series(&trace.s2, iters);
                for rec in &series {
                    out.push(r, "ee_dab", "consumed_power_w", Some(rec.iter as f64), Some(rec.objective));
                }
                out.series.push(("trace_ee_dab".to_string(), series));
            }
            None => out.push(r, "ee_dab", "consumed_power_w", None, None),
        }
    }
    Ok(out)
}

fn with_limit(pa: &PaArrayModel, rho_max: f64) -> Result<PaArrayModel> {
    PaArrayModel::new(
        pa.models()
            .iter()
            .map(|m| m.clone().with_power_model(m.eta_max(), rho_max))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn run_oob_psd(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, est) = ctx.channels(stream)?;
    let n0 = ctx.n0();
    for &dbm in &ctx.cfg.sweep {
        let pa = with_limit(&ctx.pa, dbm_to_watts(dbm))?;
        let scenario = ScenarioConfig::new(n0, pa.rho_max_total());
        let (p, _) = dab(&pa, &est, &ctx.cfg.optimizer, &scenario, PowerConstraint::PerAntenna, &stream.fork(2))?;
        let (worst, psd) = worst_antenna_psd(&pa, &p.matrix, &ctx.cfg.ofdm, &mut stream.fork(3).rng())?;
        out.push(r, "dab", "shoulder_db", Some(dbm), Some(shoulder_level(&psd, &ctx.cfg.ofdm)));
        out.push(r, "dab", "oob_db", Some(dbm), Some(out_of_band_level(&psd, &ctx.cfg.ofdm)));
        out.push(r, "dab", "worst_antenna", Some(dbm), Some(worst as f64));
        out.push(r, "dab", "sum_rate", Some(dbm), Some(sum_rate_for(&pa, &h, &p.matrix, n0)?));

        // Same precoder through ideal linear amplifiers.
        let linear = PaArrayModel::new(pa.models().iter().map(|m| PaModel::linear(m.beta_odd(0))).collect())?;
        let (_, lin_psd) = worst_antenna_psd(&linear, &p.matrix, &ctx.cfg.ofdm, &mut stream.fork(3).rng())?;
        out.push(r, "linear_pa", "shoulder_db", Some(dbm), Some(shoulder_level(&lin_psd, &ctx.cfg.ofdm)));
        out.push(r, "linear_pa", "oob_db", Some(dbm), Some(out_of_band_level(&lin_psd, &ctx.cfg.ofdm)));
        if r == 0 {
            let mut buf = Vec::new();
            write_psd_csv(&psd, &ctx.cfg.ofdm, &mut buf)?;
            out.files.push((format!("psd_dab_{dbm}.csv"), String::from_utf8(buf).expect("utf8")));
        }
    }
    Ok(out)
}

/// Relative Frobenius error between the closed-form and central-difference
/// sum-rate gradients at a random normalized precoder.
pub fn gradient_check(pa: &PaArrayModel, h: &ChannelSet, n0: f64, rho_tot: f64, rng: &mut impl Rng) -> Result<f64> {
    let p0 = sample_gaussian_matrix(h.antennas(), h.users(), 1.0, rng);
    let (_, p) = normalize_total_power(pa, &p0, rho_tot)?;
    let closed = grad_sum_rate_closed(pa, h, &p, n0)?;
    let central = grad_sum_rate_central(pa, h, &p, n0, absolute_delta(&p, 1e-5))?;
    Ok((&closed - &central).norm() / central.norm())
}

fn run_gradcheck(ctx: &Context, r: usize, stream: &RngStream) -> Result<RealizationOutput> {
    let mut out = RealizationOutput::default();
    let (h, _) = ctx.channels(stream)?;
    let n0 = ctx.cfg.scenario.n0_dbm.map_or(dbm_to_watts(-85.0), dbm_to_watts);
    let rho = ctx.cfg.scenario.rho_tot_dbm.map_or(dbm_to_watts(30.0), dbm_to_watts);
    let err = gradient_check(&ctx.pa, &h, n0, rho, &mut stream.fork(4).rng())?;
    out.push(r, "dab", "grad_rel_error", None, Some(err));
    Ok(out)
}

fn series_csv(series: &[Vec<TraceRecord>]) -> String {
    let mut s = String::from("iter,objective,mu,accepted\n");
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        let n = series.len() as f64;
        let obj = series.iter().map(|v| v[i].objective).sum::<f64>() / n;
        let mu = series.iter().map(|v| v[i].mu).sum::<f64>() / n;
        let acc = series.iter().filter(|v| v[i].accepted).count() as f64 / n;
        let _ = writeln!(s, "{i},{obj},{mu},{acc}");
    }
    s
}

/// Runs every realization of `cfg`, on `threads` workers when given.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let ctx = Context {
        pa: cfg.pa.build(cfg.antennas)?,
        cfg: cfg.clone(),
    };
    let run: fn(&Context, usize, &RngStream) -> Result<RealizationOutput> = match cfg.experiment {
        ExperimentKind::Pattern => run_pattern,
        ExperimentKind::RateCdf => run_rate_cdf,
        ExperimentKind::SnrSweep => run_snr_sweep,
        ExperimentKind::PowerControl => run_power_control,
        ExperimentKind::EeCdf => run_ee_cdf,
        ExperimentKind::Convergence => run_convergence,
        ExperimentKind::OobPsd => run_oob_psd,
        ExperimentKind::Gradcheck => run_gradcheck,
    };
    let work = || {
        (0..cfg.n_realizations)
            .into_par_iter()
            .map(|r| run(&ctx, r, &RngStream::new(cfg.master_seed, r as u64)))
            .collect::<Result<Vec<_>>>()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut table = ResultTable::default();
    let mut files = Vec::new();
    let mut series: BTreeMap<String, Vec<Vec<TraceRecord>>> = BTreeMap::new();
    for res in results {
        table.rows.extend(res.rows);
        files.extend(res.files);
        for (name, s) in res.series {
            series.entry(name).or_default().push(s);
        }
    }
    for (name, s) in series {
        files.push((format!("{name}.csv"), series_csv(&s)));
    }
    Ok(ExperimentOutput {
        config: cfg.clone(),
        table,
        files,
    })
}
