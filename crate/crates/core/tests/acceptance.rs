//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! `cargo test --test acceptance -- 7 8` runs a subset. Failing criteria
//! are reported but only abort the run (nonzero exit) when
//! `ACCEPTANCE_STRICT=1` is set; a panic always aborts.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mimodab::bussgang::{bussgang_gain, decompose, mc_oracle, normalize_total_power};
use mimodab::channel::{geometric_channel, ChannelModel, ChannelSet, GeometryConfig};
use mimodab::harness::{
    gradient_check, interpolated_peak, mean, median, run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutput,
    PaSpec,
};
use mimodab::metrics::{default_angle_grid, radiation_pattern, sum_rate_for, ScenarioConfig};
use mimodab::numerics::{dbm_to_watts, sample_gaussian_matrix, RngStream};
use mimodab::optimize::{dab, ee_dab, OptimizerConfig, PowerConstraint};
use mimodab::pa::{PaArrayModel, PaModel, PaRecord};
use mimodab::precoders::{mrt, zero_distortion_array};
use mimodab::{Complex, ComplexMatrix};
use rand::Rng;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn c(re: f64, im: f64) -> Complex {
    Complex::new(re, im)
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_json_file(&configs_dir().join(name)).expect("bundled config")
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

fn random_cubic_array(b: usize, rng: &mut impl Rng) -> PaArrayModel {
    PaArrayModel::new(
        (0..b)
            .map(|_| {
                PaModel::cubic(
                    c(0.9 + 0.2 * rng.random::<f64>(), 0.1 * (rng.random::<f64>() - 0.5)),
                    c(-0.02 - 0.06 * rng.random::<f64>(), -0.04 * rng.random::<f64>()),
                )
            })
            .collect(),
    )
    .expect("valid models")
}

fn paper_cubic(b: usize) -> PaArrayModel {
    PaArrayModel::uniform(
        PaModel::cubic(c(1.0, 0.0), c(-0.049, -0.023))
            .with_power_model(0.55, dbm_to_watts(25.0))
            .expect("valid power model"),
        b,
    )
}

/// Mean of one group per sweep point, in sweep order.
fn curve(out: &ExperimentOutput, precoder: &str, metric: &str) -> Vec<f64> {
    out.config
        .sweep
        .iter()
        .map(|&x| mean(&out.table.values(precoder, metric, Some(x))))
        .collect()
}

fn fmt_curve(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn bussgang_monte_carlo() -> Outcome {
    let start = Instant::now();
    let (mut worst_ce, mut worst_cross) = (0.0f64, 0.0f64);
    for i in 0..20u64 {
        let stream = RngStream::new(101, i);
        let mut rng = stream.rng();
        let pa = random_cubic_array(8, &mut rng);
        let p0 = sample_gaussian_matrix(8, 2, 1.0, &mut rng);
        let (_, p) = normalize_total_power(&pa, &p0, 8.0 * (0.5 + rng.random::<f64>())).expect("reachable power");
        let dec = decompose(&pa, &p);
        let mc = mc_oracle(&pa, &p, 1_000_000, &mut stream.fork(1).rng());
        let g = ComplexMatrix::from_diagonal(&nalgebra::DVector::from_vec(bussgang_gain(&pa, &p)));
        let linear = &mc.c_x * g.adjoint();
        worst_ce = worst_ce.max((&mc.c_e - &dec.c_e).norm() / dec.c_e.norm());
        worst_cross = worst_cross.max((&mc.xy - &linear).norm() / linear.norm());
    }
    let t = start.elapsed();
    Outcome::new(
        worst_ce <= 0.02 && worst_cross <= 0.01 && within(t, 60),
        format!("max C_e error {worst_ce:.4}, max cross-correlation {worst_cross:.4}, {:.1} s", t.as_secs_f64()),
    )
}

fn gradient_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let stream = RngStream::new(202, i);
        let mut rng = stream.rng();
        let b = rng.random_range(2..=16);
        let u = rng.random_range(1..=b.min(4));
        let pa = random_cubic_array(b, &mut rng);
        let h = geometric_channel(&GeometryConfig::default(), b, u, &mut rng).expect("channel");
        let n0 = dbm_to_watts(-85.0 + 10.0 * rng.random::<f64>());
        let rho = dbm_to_watts(30.0 + 13.0 * rng.random::<f64>());
        worst = worst.max(gradient_check(&pa, &h, n0, rho, &mut stream.fork(1).rng()).expect("gradients"));
    }
    let t = start.elapsed();
    Outcome::new(
        worst <= 1e-5 && within(t, 60),
        format!("max relative error {worst:.2e} over 50 instances, {:.1} s", t.as_secs_f64()),
    )
}

fn normalization_exactness() -> Outcome {
    let (mut worst_tr, mut worst_diag) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let mut rng = RngStream::new(303, i).rng();
        let b = rng.random_range(1..=16);
        let u = rng.random_range(1..=4);
        let pa = random_cubic_array(b, &mut rng);
        let rho = b as f64 * (0.1 + 2.0 * rng.random::<f64>());
        let p0 = sample_gaussian_matrix(b, u, 1.0, &mut rng);
        let (_, p) = normalize_total_power(&pa, &p0, rho).expect("reachable power");
        let dec = decompose(&pa, &p);
        worst_tr = worst_tr.max((dec.c_z.trace().re - rho).abs() / rho);
        for bb in 0..b {
            let direct = pa.model(bb).output_power(p.row(bb).norm_squared());
            worst_diag = worst_diag.max((dec.c_z[(bb, bb)].re - direct).abs() / direct);
        }
    }
    Outcome::new(
        worst_tr <= 1e-10 && worst_diag <= 1e-10,
        format!("max trace error {worst_tr:.1e}, max diagonal error {worst_diag:.1e}"),
    )
}

fn mrt_steers_distortion() -> Outcome {
    let pa = PaArrayModel::uniform(PaModel::cubic(c(0.98, 0.0), c(-0.02, -0.01)), 16);
    let h = ChannelSet::line_of_sight(&[100f64.to_radians()], 16).expect("channel");
    let (_, p) = normalize_total_power(&pa, &mrt(&h).expect("mrt").matrix, dbm_to_watts(43.0)).expect("power");
    let pattern = radiation_pattern(&decompose(&pa, &p), &p, &default_angle_grid()).expect("pattern");
    let ratio: Vec<f64> = pattern.rho_dist.iter().zip(&pattern.rho_lin).map(|(d, l)| d / l).collect();
    let hi = ratio.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratio.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = (hi - lo) / hi;
    Outcome::new(spread <= 1e-9, format!("distortion/linear ratio spread {spread:.2e} over 360 angles"))
}

fn zero_distortion_gap() -> Outcome {
    let pa = PaArrayModel::table_one();
    let psi = 100f64.to_radians();
    let h = ChannelSet::line_of_sight(&[psi], 10).expect("channel");
    let rho = dbm_to_watts(43.0);
    let (_, p_mrt) = normalize_total_power(&pa, &mrt(&h).expect("mrt").matrix, rho).expect("power");
    let zd = zero_distortion_array(&pa, psi).expect("zero-distortion");
    let (_, p_zd) = normalize_total_power(&pa, &zd.matrix, rho).expect("power");
    let at = |p: &ComplexMatrix| radiation_pattern(&decompose(&pa, p), p, &[psi]).expect("pattern");
    let (m, z) = (at(&p_mrt), at(&p_zd));
    let null = z.rho_dist[0] / m.rho_lin[0];
    let gap = 10.0 * (m.rho_lin[0] / z.rho_lin[0]).log10();
    Outcome::new(
        null <= 1e-12 && (gap - 25.0).abs() <= 3.0,
        format!("distortion at user {null:.1e} of MRT linear power, array-gain gap {gap:.2} dB"),
    )
}

fn los_snr_trend() -> Outcome {
    let start = Instant::now();
    let out = run_experiment(&load("snr_sweep.json"), None).expect("snr sweep");
    let t = start.elapsed();
    let snr = &out.config.sweep;
    let mrt = curve(&out, "mrt", "sum_rate");
    let zd = curve(&out, "zero_dist", "sum_rate");
    let dab = curve(&out, "dab", "sum_rate");
    let i40 = snr.iter().position(|&s| s == 40.0).expect("40 dB point");
    let i50 = snr.iter().position(|&s| s == 50.0).expect("50 dB point");
    let mrt_gain = mrt[i50] - mrt[i40];
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    let dominates = dab.iter().zip(mrt.iter().zip(&zd)).all(|(d, (m, z))| *d >= m.max(*z));
    Outcome::new(
        mrt_gain <= 0.1 && increasing(&zd) && increasing(&dab) && dominates && within(t, 600),
        format!(
            "MRT 40->50 dB gain {mrt_gain:.4}; zero-dist increasing {}; DAB increasing {}; DAB dominates {dominates}; {:.1} s",
            increasing(&zd),
            increasing(&dab),
            t.as_secs_f64()
        ),
    )
}

fn rate_cdf_ordering() -> Outcome {
    let start = Instant::now();
    let out = run_experiment(&load("rate_cdf.json"), None).expect("rate cdf");
    let t = start.elapsed();
    let med = |k: &str, snr: f64| median(&out.table.values(k, "sum_rate", Some(snr)));
    let (dab_lo, mrt_lo) = (med("dab", -15.0), med("mrt", -15.0));
    let low_gap = (dab_lo - mrt_lo) / mrt_lo;
    let (dab_hi, zf_hi, mrt_hi) = (med("dab", 25.0), med("zf", 25.0), med("mrt", 25.0));
    let ordered = dab_hi > zf_hi && zf_hi > mrt_hi;
    Outcome::new(
        low_gap <= 0.01 && ordered && within(t, 1800),
        format!(
            "-15 dB: median DAB {dab_lo:.4} vs MRT {mrt_lo:.4} ({:.2}% above); 25 dB medians DAB {dab_hi:.3} > ZF {zf_hi:.3} > MRT {mrt_hi:.3}: {ordered}; {:.1} s",
            100.0 * low_gap,
            t.as_secs_f64()
        ),
    )
}

fn power_control_peaks() -> Outcome {
    let start = Instant::now();
    let out = run_experiment(&load("power_control.json"), None).expect("power control");
    let t = start.elapsed();
    let grid = &out.config.sweep;
    let expected = [("mrt", 38.2), ("zf", 39.7), ("dab", 40.5)];
    let mut peaks = Vec::new();
    let mut shape_ok = true;
    let mut control_ok = true;
    let mut notes = Vec::new();
    for (kind, target) in expected {
        let full = curve(&out, kind, "sum_rate_full");
        let (x, _) = interpolated_peak(grid, &full).expect("nonempty curve");
        let i = full
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("nonempty curve");
        let unimodal = full[..=i].windows(2).all(|w| w[1] >= w[0])
            && full[i..].windows(2).all(|w| w[1] <= w[0])
            && i + 1 < full.len();
        shape_ok &= unimodal;
        // Power control per realization: non-decreasing and above full power.
        let by_full = |x: f64| out.table.by_realization(kind, "sum_rate_full", Some(x));
        let by_ctrl = |x: f64| out.table.by_realization(kind, "sum_rate_control", Some(x));
        let mut prev: BTreeMap<usize, f64> = BTreeMap::new();
        for &x in grid {
            let (f, cdata) = (by_full(x), by_ctrl(x));
            for (r, v) in cdata {
                let Some(v) = v else {
                    control_ok = false;
                    continue;
                };
                if f[&r].is_some_and(|fv| v < fv) || prev.get(&r).is_some_and(|&p| v < p) {
                    control_ok = false;
                }
                prev.insert(r, v);
            }
        }
        notes.push(format!("{kind} peak {x:.2} dBm (expected {target}){}", if unimodal { "" } else { " not unimodal" }));
        peaks.push((x, target));
    }
    let ordered = peaks[0].0 < peaks[1].0 && peaks[1].0 < peaks[2].0;
    let located = peaks.iter().all(|(x, target)| (x - target).abs() <= 1.5);
    Outcome::new(
        shape_ok && ordered && located && control_ok,
        format!(
            "{}; ordering {ordered}; within 1.5 dB {located}; power control monotone and dominant {control_ok}; {:.1} s",
            notes.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn consumed_power_ordering() -> Outcome {
    let start = Instant::now();
    let out = run_experiment(&load("ee_cdf.json"), None).expect("ee cdf");
    let t = start.elapsed();
    let r0 = out.config.scenario.r0;
    let get = |k: &str| out.table.by_realization(k, "consumed_power_w", r0);
    let (ee, da, zf) = (get("ee_dab"), get("dab"), get("zf"));
    let mut feasible = 0;
    let mut violations = Vec::new();
    for (r, e) in &ee {
        if let (Some(e), Some(d), Some(z)) = (e, da[r], zf[r]) {
            feasible += 1;
            if !(*e <= d && d <= z) {
                violations.push(format!("#{r}: EE-DAB {e:.2} W, DAB {d:.2} W, ZF {z:.2} W"));
            }
        }
    }
    let n = out.config.n_realizations;
    Outcome::new(
        feasible > 0 && violations.is_empty() && within(t, 3600),
        format!(
            "{feasible}/{n} realizations feasible for all three; violations: {}; {:.1} s",
            if violations.is_empty() { "none".to_string() } else { violations.join("; ") },
            t.as_secs_f64()
        ),
    )
}

fn algorithm_invariants() -> Outcome {
    let cfg = OptimizerConfig::default();
    let mut steps = 0usize;
    let mut decreases = 0usize;
    for i in 0..10u64 {
        let stream = RngStream::new(1010, i);
        let pa = paper_cubic(16);
        let h = geometric_channel(&GeometryConfig::default(), 16, 4, &mut stream.rng()).expect("channel");
        let constraint = if i % 2 == 0 { PowerConstraint::TotalPower } else { PowerConstraint::PerAntenna };
        let scenario = ScenarioConfig::new(dbm_to_watts(-85.0), pa.rho_max_total());
        let (_, trace) = dab(&pa, &h, &cfg, &scenario, constraint, &stream.fork(2)).expect("dab");
        for run in &trace.runs {
            for w in run.windows(2) {
                steps += 1;
                if w[1].objective < w[0].objective {
                    decreases += 1;
                }
            }
        }
    }
    let (mut ee_runs, mut unreachable, mut s2_increases, mut violations) = (0, 0, 0, 0);
    for i in 0..10u64 {
        let stream = RngStream::new(1011, i);
        let pa = paper_cubic(32);
        let h = geometric_channel(&GeometryConfig::default(), 32, 4, &mut stream.rng()).expect("channel");
        let mut scenario = ScenarioConfig::new(dbm_to_watts(-85.0), pa.rho_max_total());
        scenario.r0 = Some(20.0);
        let (p, trace) = match ee_dab(&pa, &h, &cfg, &scenario, &stream.fork(2)) {
            Ok(v) => v,
            Err(mimodab::Error::RateUnreachable { .. }) => {
                unreachable += 1;
                continue;
            }
            Err(e) => panic!("EE-DAB failed: {e}"),
        };
        ee_runs += 1;
        s2_increases += trace.s2.windows(2).filter(|w| w[1].objective > w[0].objective).count();
        let rate = sum_rate_for(&pa, &h, &p.matrix, scenario.n0).expect("rate");
        let over = p
            .matrix
            .row_iter()
            .enumerate()
            .any(|(b, row)| pa.model(b).output_power(row.norm_squared()) > pa.model(b).rho_max() + 1e-12);
        if rate < 20.0 || over {
            violations += 1;
        }
    }
    Outcome::new(
        decreases == 0 && ee_runs > 0 && s2_increases == 0 && violations == 0,
        format!(
            "DAB: {decreases} decreases in {steps} steps; EE-DAB: {ee_runs} runs ({unreachable} unreachable), {s2_increases} power increases, {violations} constraint violations"
        ),
    )
}

fn oob_shoulder_trend() -> Outcome {
    let start = Instant::now();
    let out = run_experiment(&load("oob_psd.json"), None).expect("oob psd");
    let t = start.elapsed();
    let shoulders = curve(&out, "dab", "shoulder_db");
    let monotone = shoulders.windows(2).all(|w| w[1] >= w[0]);
    let linear_worst = out
        .config
        .sweep
        .iter()
        .flat_map(|&x| out.table.values("linear_pa", "shoulder_db", Some(x)))
        .fold(f64::NEG_INFINITY, f64::max);
    Outcome::new(
        monotone && linear_worst <= -60.0 && out.config.n_realizations >= 5 && within(t, 300),
        format!(
            "mean DAB shoulder [{}] dB at rho_max {:?} dBm; linear PA shoulder at most {linear_worst:.1} dB; {:.1} s",
            fmt_curve(&shoulders),
            out.config.sweep,
            t.as_secs_f64()
        ),
    )
}

fn small_configs() -> Vec<ExperimentConfig> {
    let quick = OptimizerConfig {
        iterations: 4,
        n_inits: 3,
        ..OptimizerConfig::default()
    };
    let mut out = Vec::new();
    let mut pattern = ExperimentConfig::new(ExperimentKind::Pattern, 10, 1);
    pattern.pa = PaSpec::TableOne;
    pattern.scenario.rho_tot_dbm = Some(43.0);
    pattern.channel.model = ChannelModel::LineOfSight;
    pattern.n_realizations = 3;
    out.push(pattern);

    let mut rate = ExperimentConfig::new(ExperimentKind::RateCdf, 8, 2);
    rate.scenario.rho_tot_dbm = Some(43.0);
    rate.sweep = vec![-15.0, 25.0];
    rate.channel.tau = 0.1f64.sqrt();
    out.push(rate);

    let mut snr = ExperimentConfig::new(ExperimentKind::SnrSweep, 6, 1);
    snr.pa = PaSpec::Uniform(PaRecord::from_model(&PaModel::cubic(c(1.0, 0.0), c(-0.049, -0.023))));
    snr.scenario.rho_tot_dbm = Some(40.0);
    snr.channel.model = ChannelModel::LineOfSight;
    snr.sweep = vec![0.0, 20.0, 40.0];
    out.push(snr);

    let mut pc = ExperimentConfig::new(ExperimentKind::PowerControl, 8, 2);
    pc.scenario.n0_dbm = Some(-85.0);
    pc.sweep = vec![36.0, 40.0, 44.0];
    out.push(pc);

    let mut ee = ExperimentConfig::new(ExperimentKind::EeCdf, 16, 2);
    ee.scenario.n0_dbm = Some(-85.0);
    ee.sweep = vec![10.0, 15.0];
    out.push(ee);

    let mut conv = ExperimentConfig::new(ExperimentKind::Convergence, 8, 2);
    conv.scenario.n0_dbm = Some(-85.0);
    conv.scenario.r0 = Some(8.0);
    conv.sweep = vec![35.0, 43.0];
    out.push(conv);

    let mut oob = ExperimentConfig::new(ExperimentKind::OobPsd, 8, 1);
    oob.scenario.n0_dbm = Some(30.0);
    oob.channel.model = ChannelModel::LineOfSight;
    oob.sweep = vec![20.0, 30.0];
    oob.ofdm.n_symbols = 20;
    out.push(oob);

    let mut grad = ExperimentConfig::new(ExperimentKind::Gradcheck, 8, 3);
    grad.pa = PaSpec::Uniform(PaRecord::from_model(&PaModel::cubic(c(1.0, 0.0), c(-0.049, -0.023))));
    out.push(grad);

    for (i, cfg) in out.iter_mut().enumerate() {
        cfg.optimizer = quick;
        cfg.master_seed = 1200 + i as u64;
        cfg.n_realizations = cfg.n_realizations.max(4);
    }
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().expect("temp dir");
    let mut mismatches = Vec::new();
    let configs = small_configs();
    for cfg in &configs {
        let mut outputs = Vec::new();
        for threads in [1usize, 4] {
            let dir = root.path().join(format!("{}_{threads}", cfg.experiment.as_str()));
            let files = run_experiment(cfg, Some(threads)).expect("experiment").write_to(&dir).expect("write");
            let contents: Vec<(String, Vec<u8>)> = files
                .iter()
                .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f).unwrap()))
                .collect();
            outputs.push(contents);
        }
        if outputs[0] != outputs[1] {
            mismatches.push(cfg.experiment.as_str());
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!(
            "{} experiment kinds compared at 1 and 4 threads; differing: {}",
            configs.len(),
            if mismatches.is_empty() { "none".to_string() } else { mismatches.join(", ") }
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(u32, &str, Check); 12] = [
        (1, "bussgang_monte_carlo", bussgang_monte_carlo),
        (2, "gradient_equivalence", gradient_equivalence),
        (3, "normalization_exactness", normalization_exactness),
        (4, "mrt_steers_distortion", mrt_steers_distortion),
        (5, "zero_distortion_gap", zero_distortion_gap),
        (6, "los_snr_trend", los_snr_trend),
        (7, "rate_cdf_ordering", rate_cdf_ordering),
        (8, "power_control_peaks", power_control_peaks),
        (9, "consumed_power_ordering", consumed_power_ordering),
        (10, "algorithm_invariants", algorithm_invariants),
        (11, "oob_shoulder_trend", oob_shoulder_trend),
        (12, "determinism", determinism),
    ];
    // libtest flags such as --nocapture may be forwarded; ignore them.
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = check();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {}", outcome.detail);
        if !outcome.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
        return ExitCode::SUCCESS;
    }
    println!("acceptance: failing criteria {failed:?}");
    if strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
