//! Reproduction harness for the brushless-DC-motor study: motor-family
//! sampling, meta-dataset construction, method comparison, non-deteriorating
//! tests, sensitivity grids, meta-dataset-size sweeps, and the high-noise
//! stability-constraint study.

use crate::error::{Error, Result};
use crate::lti::{self, poly_mul, Basis, TransferFunction};
use crate::metadesign::{
    build_iv_objective, materialize_meta_controller, solve_meta, DesignConfig, MetaDataset,
    MetaEntry, MetaWeights,
};
use crate::signals::{self, derive_seed, Dataset};
use crate::vrft::{self, low_freq_weighting, EntryConfig, StabilitySpec, VrftProblem};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

pub const SAMPLE_TIME: f64 = 0.02;
pub const P1: f64 = 0.9975;
pub const KAPPA_RANGE: (f64, f64) = (1.0, 5.75);
pub const P2_RANGE: (f64, f64) = (0.0, 0.9);

/// The target closed-loop behavior used throughout the benchmark.
pub fn reference_model() -> TransferFunction {
    TransferFunction::new(vec![0.0, 0.0609], vec![1.0, -0.9391], SAMPLE_TIME).unwrap()
}

/// Motor family member `kappa q^-2 / ((1 - p1 q^-1)(1 - p2 q^-1))`.
pub fn motor_tf(kappa: f64, p2: f64) -> TransferFunction {
    TransferFunction::new(
        vec![0.0, 0.0, kappa],
        poly_mul(&[1.0, -P1], &[1.0, -p2]),
        SAMPLE_TIME,
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Motor {
    pub kappa: f64,
    pub p2: f64,
}

impl Motor {
    pub fn tf(&self) -> TransferFunction {
        motor_tf(self.kappa, self.p2)
    }
}

/// Uniform draw from the family.
pub fn sample_motor(rng: &mut ChaCha12Rng) -> Motor {
    Motor {
        kappa: rng.gen_range(KAPPA_RANGE.0..KAPPA_RANGE.1),
        p2: rng.gen_range(P2_RANGE.0..P2_RANGE.1),
    }
}

/// Largest pairwise H2 distance over the family corner set.
pub fn family_similarity_level() -> Result<f64> {
    let corners = [
        motor_tf(KAPPA_RANGE.0, P2_RANGE.0),
        motor_tf(KAPPA_RANGE.0, P2_RANGE.1),
        motor_tf(KAPPA_RANGE.1, P2_RANGE.0),
        motor_tf(KAPPA_RANGE.1, P2_RANGE.1),
    ];
    let mut eps = 0.0f64;
    for i in 0..corners.len() {
        for j in i + 1..corners.len() {
            eps = eps.max(lti::norm_h2(&corners[i].sub(&corners[j]), 4096)?);
        }
    }
    Ok(eps)
}

/// Monte-Carlo mean signal-to-noise ratio (dB) of the open-loop protocol:
/// realized output power against realized noise power, averaged over
/// sampled motors.
pub fn mean_snr_db(
    n_motors: usize,
    t: usize,
    input_std: f64,
    noise_std: f64,
    master_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(master_seed, "snr"));
    let mut acc = 0.0;
    for _ in 0..n_motors {
        let motor = sample_motor(&mut rng);
        let u: Vec<f64> = (0..t)
            .map(|_| input_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let v: Vec<f64> = (0..t)
            .map(|_| noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let y0 = lti::simulate(&motor.tf(), &u)?;
        let ps: f64 = y0.iter().map(|x| x * x).sum();
        let pn: f64 = v.iter().map(|x| x * x).sum();
        acc += 10.0 * (ps / pn).log10();
    }
    Ok(acc / n_motors as f64)
}

/// Benchmark protocol constants and tunables.
#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub master_seed: u64,
    /// Open-loop record length (11 s at 20 ms).
    pub t: usize,
    pub input_std: f64,
    pub noise_std: f64,
    /// Closed-loop test: step amplitude and horizon (3 s).
    pub step_amplitude: f64,
    pub test_horizon: usize,
    pub test_noise_std: f64,
    pub n_meta: usize,
    pub n_new: usize,
    /// Noise repetitions per new motor; medians are taken across them.
    pub reps: usize,
    /// Saturation value used for diverged runs and capped averages.
    pub error_cap: f64,
    pub lambda_j: f64,
    pub lambda_s: f64,
    pub delta: Option<f64>,
    pub ell: usize,
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            master_seed: 1,
            t: 550,
            input_std: 2.0,
            noise_std: 10.0,
            step_amplitude: 1000.0,
            test_horizon: 150,
            test_noise_std: 10.0,
            n_meta: 10,
            n_new: 10,
            reps: 3,
            error_cap: 250.0,
            lambda_j: 30.0,
            lambda_s: 300.0,
            delta: None,
            ell: 200,
            jobs: 0,
        }
    }
}

impl BenchConfig {
    pub fn reference(&self) -> Vec<f64> {
        vec![self.step_amplitude; self.test_horizon]
    }
}

/// 2-norm of the closed-loop mismatch against the desired response.
/// Diverged (flagged) runs report the saturation cap instead of a number
/// dominated by overflow; they are never dropped.
pub fn matching_error(
    closed: &Dataset,
    m: &TransferFunction,
    reference: &[f64],
    cap: f64,
) -> Result<(f64, bool)> {
    if closed.diverged || closed.len() < reference.len() {
        return Ok((cap, true));
    }
    let desired = lti::simulate(m, reference)?;
    let err = desired
        .iter()
        .zip(&closed.y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if err.is_finite() {
        Ok((err, false))
    } else {
        Ok((cap, true))
    }
}

/// A meta-dataset together with the motors behind its entries.
pub struct BuiltMeta {
    pub meta: MetaDataset,
    pub motors: Vec<Motor>,
    /// How many candidate motors were drawn (rejected entries resample).
    pub draws: usize,
    /// Seconds of experiment data consumed per accepted entry.
    pub experiment_seconds: f64,
}

/// Build `n` meta-dataset entries on the shared input. Candidates whose
/// closed-loop test diverges (or whose tuning fails) are rejected and the
/// motor is redrawn, so every entry stabilizes its own plant.
pub fn build_meta_dataset(u_shared: &[f64], n: usize, cfg: &BenchConfig) -> Result<BuiltMeta> {
    let m = reference_model();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "meta-dataset"));
    let mut entries = Vec::with_capacity(n);
    let mut motors = Vec::with_capacity(n);
    let mut draws = 0usize;
    let reference = cfg.reference();
    while entries.len() < n {
        draws += 1;
        if draws > 40 * n.max(1) {
            return Err(Error::SolverFailure {
                detail: "meta-dataset construction exhausted its retry budget".into(),
            });
        }
        let motor = sample_motor(&mut rng);
        let g = motor.tf();
        let k = entries.len();
        let s_ol = derive_seed(cfg.master_seed, &format!("meta/{k}/ol/{draws}"));
        let s_iv = derive_seed(cfg.master_seed, &format!("meta/{k}/iv/{draws}"));
        let s_cl = derive_seed(cfg.master_seed, &format!("meta/{k}/cl/{draws}"));
        let ol = signals::generate_open_loop(&g, u_shared, cfg.noise_std, s_ol)?;
        let iv = signals::generate_open_loop(&g, u_shared, cfg.noise_std, s_iv)?;
        let entry_cfg = EntryConfig {
            m: m.clone(),
            w: low_freq_weighting(SAMPLE_TIME),
            basis: Basis::Pi,
            stability: Some(StabilitySpec { delta: 0.5, window: cfg.ell }),
            reference: reference.clone(),
            test_noise_std: cfg.test_noise_std,
            test_seed: s_cl,
        };
        match vrft::build_meta_controller_entry(&g, &ol, &iv, &entry_cfg) {
            Ok((controller, closed)) => {
                // The meta-dataset is defined to hold controllers that
                // stabilize their own plants; verify beyond mere
                // non-divergence of the finite test run.
                let (cl_tf, _) = lti::feedback(&controller.to_tf(), &g)?;
                if !lti::is_stable(&cl_tf, lti::STABILITY_TOL)? {
                    continue;
                }
                entries.push(MetaEntry {
                    controller,
                    open_loop: ol,
                    closed_loop: closed,
                    delta_k: 0.5,
                });
                motors.push(motor);
            }
            Err(_) => continue,
        }
    }
    let experiment_seconds =
        2.0 * cfg.t as f64 * SAMPLE_TIME + cfg.test_horizon as f64 * SAMPLE_TIME;
    Ok(BuiltMeta { meta: MetaDataset { entries }, motors, draws, experiment_seconds })
}

/// The tuning methods compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Meta,
    MetaUnregularized,
    CVrft,
    Vrft,
    TrivialUniform,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Meta,
        Method::MetaUnregularized,
        Method::CVrft,
        Method::Vrft,
        Method::TrivialUniform,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Meta => "meta",
            Method::MetaUnregularized => "meta-lambda0",
            Method::CVrft => "c-vrft",
            Method::Vrft => "vrft",
            Method::TrivialUniform => "trivial-uniform",
        }
    }

    /// Number of plant experiments the method consumes at design time.
    pub fn experiment_count(&self) -> usize {
        match self {
            Method::Meta | Method::MetaUnregularized => 2,
            Method::CVrft | Method::Vrft => 2,
            Method::TrivialUniform => 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub motor: usize,
    pub kappa: f64,
    pub p2: f64,
    pub method: &'static str,
    pub rep: usize,
    pub error: f64,
    pub diverged: bool,
    pub solve_ms: f64,
    pub experiment_seconds: f64,
    pub alpha: Option<Vec<f64>>,
    pub ell: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ComparisonReport {
    pub config: BenchConfig,
    pub capped_mean_meta_lambda0: f64,
    pub capped_mean_vrft: f64,
    pub wins_meta_vs_vrft: usize,
    pub wins_meta_vs_trivial: usize,
    pub runs: Vec<RunRecord>,
    /// Per-motor median error per method, reps collapsed.
    pub medians: Vec<(usize, &'static str, f64)>,
    pub similarity_tables: Vec<Vec<f64>>,
    pub performance_table: Vec<f64>,
    pub meta_draws: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Tune a controller by the requested method and run the closed-loop test.
#[allow(clippy::too_many_arguments)]
fn evaluate_method(
    method: Method,
    g: &TransferFunction,
    d_t: &Dataset,
    d_iv: &Dataset,
    meta: &MetaDataset,
    cfg: &BenchConfig,
    lambda: (f64, f64),
    delta: Option<f64>,
    test_seed: u64,
) -> Result<(f64, bool, f64, Option<Vec<f64>>, Option<usize>)> {
    let m = reference_model();
    let started = std::time::Instant::now();
    let (ctf, alpha, ell): (TransferFunction, Option<Vec<f64>>, Option<usize>) = match method {
        Method::Meta | Method::MetaUnregularized => {
            let (lj, ls) = if method == Method::Meta { lambda } else { (0.0, 0.0) };
            let obj = build_iv_objective(
                d_t,
                d_iv,
                meta,
                &m,
                &TransferFunction::unit(SAMPLE_TIME),
                true,
            )?;
            let config =
                DesignConfig { lambda_j: lj, lambda_s: ls, delta, ell: cfg.ell, ..Default::default() };
            let (w, report) = solve_meta(&obj, meta, &config, d_t, &m)?;
            (materialize_meta_controller(meta, &w), Some(w.alpha), report.ell)
        }
        Method::CVrft | Method::Vrft => {
            let stability = if method == Method::CVrft {
                Some(StabilitySpec { delta: 0.5, window: cfg.ell })
            } else {
                None
            };
            let problem = VrftProblem {
                dataset: d_t.clone(),
                dataset_iv: Some(d_iv.clone()),
                m: m.clone(),
                w: TransferFunction::unit(SAMPLE_TIME),
                basis: Basis::Pi,
                stability,
                white_input: true,
            };
            let out = vrft::vrft_tune(&problem)?;
            (out.params.to_tf(), None, out.ell)
        }
        Method::TrivialUniform => {
            let w = MetaWeights::uniform(meta.len());
            (materialize_meta_controller(meta, &w), Some(w.alpha), None)
        }
    };
    let solve_ms = started.elapsed().as_secs_f64() * 1e3;
    let closed =
        signals::simulate_closed_loop(g, &ctf, &cfg.reference(), cfg.test_noise_std, test_seed)?;
    let (err, diverged) = matching_error(&closed, &m, &cfg.reference(), cfg.error_cap)?;
    Ok((err, diverged, solve_ms, alpha, ell))
}

/// Shared excitation for a whole study: one white Gaussian current per
/// master seed, used by the new motor and by every meta-motor.
pub fn shared_input(cfg: &BenchConfig) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "shared-input"));
    (0..cfg.t)
        .map(|_| cfg.input_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Method comparison over freshly sampled new motors.
pub fn run_comparison(cfg: &BenchConfig) -> Result<ComparisonReport> {
    let u = shared_input(cfg);
    let built = build_meta_dataset(&u, cfg.n_meta, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "comparison-motors"));
    let motors: Vec<Motor> = (0..cfg.n_new).map(|_| sample_motor(&mut rng)).collect();

    let mut runs = Vec::new();
    let mut similarity_tables = Vec::new();
    for (mi, motor) in motors.iter().enumerate() {
        let g = motor.tf();
        for rep in 0..cfg.reps {
            let s_ol = derive_seed(cfg.master_seed, &format!("cmp/{mi}/{rep}/ol"));
            let s_iv = derive_seed(cfg.master_seed, &format!("cmp/{mi}/{rep}/iv"));
            let s_cl = derive_seed(cfg.master_seed, &format!("cmp/{mi}/{rep}/cl"));
            let d_t = signals::generate_open_loop(&g, &u, cfg.noise_std, s_ol)?;
            let d_iv = signals::generate_open_loop(&g, &u, cfg.noise_std, s_iv)?;
            if rep == 0 {
                let sims = built
                    .meta
                    .entries
                    .iter()
                    .map(|e| crate::metadesign::similarity_index(&d_t, &e.open_loop))
                    .collect::<Result<Vec<f64>>>()?;
                similarity_tables.push(sims);
            }
            for method in Method::ALL {
                let (err, diverged, solve_ms, alpha, ell) = match evaluate_method(
                    method,
                    &g,
                    &d_t,
                    &d_iv,
                    &built.meta,
                    cfg,
                    (cfg.lambda_j, cfg.lambda_s),
                    cfg.delta,
                    s_cl,
                ) {
                    Ok(out) => out,
                    // A failed tune cannot be deployed; count it like an
                    // unstable run at the cap.
                    Err(_) => (cfg.error_cap, true, 0.0, None, None),
                };
                runs.push(RunRecord {
                    motor: mi,
                    kappa: motor.kappa,
                    p2: motor.p2,
                    method: method.label(),
                    rep,
                    error: err,
                    diverged,
                    solve_ms,
                    experiment_seconds: method.experiment_count() as f64
                        * cfg.t as f64
                        * SAMPLE_TIME,
                    alpha,
                    ell,
                });
            }
        }
    }

    let mut medians = Vec::new();
    let med = |runs: &[RunRecord], mi: usize, method: Method| -> f64 {
        let mut v: Vec<f64> = runs
            .iter()
            .filter(|r| r.motor == mi && r.method == method.label())
            .map(|r| r.error)
            .collect();
        median(&mut v)
    };
    let mut wins_vrft = 0;
    let mut wins_trivial = 0;
    for mi in 0..cfg.n_new {
        let m_meta = med(&runs, mi, Method::Meta);
        if m_meta < med(&runs, mi, Method::Vrft) {
            wins_vrft += 1;
        }
        if m_meta < med(&runs, mi, Method::TrivialUniform) {
            wins_trivial += 1;
        }
        for method in Method::ALL {
            medians.push((mi, method.label(), med(&runs, mi, method)));
        }
    }
    let capped_mean = |label: &str| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.method == label)
            .map(|r| r.error.min(cfg.error_cap))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let m = reference_model();
    let performance_table = built
        .meta
        .entries
        .iter()
        .map(|e| {
            let r = e.closed_loop.reference.as_ref().unwrap();
            let desired = lti::simulate(&m, r)?;
            crate::metadesign::performance_index(&desired, &e.closed_loop)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ComparisonReport {
        config: cfg.clone(),
        capped_mean_meta_lambda0: capped_mean(Method::MetaUnregularized.label()),
        capped_mean_vrft: capped_mean(Method::Vrft.label()),
        wins_meta_vs_vrft: wins_vrft,
        wins_meta_vs_trivial: wins_trivial,
        runs,
        medians,
        similarity_tables,
        performance_table,
        meta_draws: built.draws,
    })
}

#[derive(Debug, Serialize)]
pub struct NonDetRecord {
    pub index: usize,
    pub kappa: f64,
    pub p2: f64,
    pub meta_error: f64,
    pub own_error: f64,
    pub alpha_self: f64,
}

#[derive(Debug, Serialize)]
pub struct NonDetReport {
    pub lambda_s: f64,
    pub lambda_j: f64,
    pub records: Vec<NonDetRecord>,
    pub deteriorations: usize,
}

/// Non-deteriorating study: each new motor equals one meta-motor; the
/// meta-controller's test error is compared with the entry's own recorded
/// closed-loop error under the same test conditions (same seed).
pub fn run_non_deteriorating(cfg: &BenchConfig, lambda_s: f64) -> Result<NonDetReport> {
    let u = shared_input(cfg);
    let built = build_meta_dataset(&u, cfg.n_meta, cfg)?;
    let m = reference_model();
    let mut records = Vec::new();
    for (k, motor) in built.motors.iter().enumerate() {
        let g = motor.tf();
        let s_ol = derive_seed(cfg.master_seed, &format!("nondet/{k}/ol"));
        let s_iv = derive_seed(cfg.master_seed, &format!("nondet/{k}/iv"));
        let d_t = signals::generate_open_loop(&g, &u, cfg.noise_std, s_ol)?;
        let d_iv = signals::generate_open_loop(&g, &u, cfg.noise_std, s_iv)?;
        let obj = build_iv_objective(
            &d_t,
            &d_iv,
            &built.meta,
            &m,
            &TransferFunction::unit(SAMPLE_TIME),
            true,
        )?;
        let config = DesignConfig {
            lambda_j: cfg.lambda_j,
            lambda_s,
            delta: cfg.delta,
            ell: cfg.ell,
            ..Default::default()
        };
        let (w, _) = solve_meta(&obj, &built.meta, &config, &d_t, &m)?;
        let ctf = materialize_meta_controller(&built.meta, &w);
        let test_seed = built.meta.entries[k].closed_loop.seed;
        let closed = signals::simulate_closed_loop(
            &g,
            &ctf,
            &cfg.reference(),
            cfg.test_noise_std,
            test_seed,
        )?;
        let (meta_error, _) = matching_error(&closed, &m, &cfg.reference(), cfg.error_cap)?;
        let (own_error, _) = matching_error(
            &built.meta.entries[k].closed_loop,
            &m,
            &cfg.reference(),
            cfg.error_cap,
        )?;
        records.push(NonDetRecord {
            index: k,
            kappa: motor.kappa,
            p2: motor.p2,
            meta_error,
            own_error,
            alpha_self: w.alpha[k],
        });
    }
    let deteriorations = records
        .iter()
        .filter(|r| r.meta_error > r.own_error * 1.001)
        .count();
    Ok(NonDetReport { lambda_s, lambda_j: cfg.lambda_j, records, deteriorations })
}

#[derive(Debug, Serialize)]
pub struct SensitivityCell {
    pub lambda_s: f64,
    pub lambda_j: f64,
    /// Saturated average over motors and repetitions.
    pub mean_error: f64,
}

#[derive(Debug, Serialize)]
pub struct SensitivityReport {
    pub cells: Vec<SensitivityCell>,
    pub cap: f64,
}

/// Average (saturated) matching error on a grid of regularization penalties.
pub fn run_sensitivity(
    cfg: &BenchConfig,
    lambda_s_grid: &[f64],
    lambda_j_grid: &[f64],
) -> Result<SensitivityReport> {
    let u = shared_input(cfg);
    let built = build_meta_dataset(&u, cfg.n_meta, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "sensitivity-motors"));
    let motors: Vec<Motor> = (0..cfg.n_new).map(|_| sample_motor(&mut rng)).collect();
    let m = reference_model();
    // Pre-build data and objectives once; every grid cell reuses them.
    let mut data = Vec::new();
    for (mi, motor) in motors.iter().enumerate() {
        for rep in 0..cfg.reps {
            let g = motor.tf();
            let s_ol = derive_seed(cfg.master_seed, &format!("sens/{mi}/{rep}/ol"));
            let s_iv = derive_seed(cfg.master_seed, &format!("sens/{mi}/{rep}/iv"));
            let s_cl = derive_seed(cfg.master_seed, &format!("sens/{mi}/{rep}/cl"));
            let d_t = signals::generate_open_loop(&g, &u, cfg.noise_std, s_ol)?;
            let d_iv = signals::generate_open_loop(&g, &u, cfg.noise_std, s_iv)?;
            let obj = build_iv_objective(
                &d_t,
                &d_iv,
                &built.meta,
                &m,
                &TransferFunction::unit(SAMPLE_TIME),
                true,
            )?;
            data.push((g, d_t, obj, s_cl));
        }
    }
    let mut cells = Vec::new();
    for &ls in lambda_s_grid {
        for &lj in lambda_j_grid {
            let mut acc = 0.0;
            for (g, d_t, obj, s_cl) in &data {
                let err = (|| -> Result<f64> {
                    let config = DesignConfig {
                        lambda_j: lj,
                        lambda_s: ls,
                        delta: None,
                        ell: cfg.ell,
                        ..Default::default()
                    };
                    let (w, _) = solve_meta(obj, &built.meta, &config, d_t, &m)?;
                    let ctf = materialize_meta_controller(&built.meta, &w);
                    let closed = signals::simulate_closed_loop(
                        g,
                        &ctf,
                        &cfg.reference(),
                        cfg.test_noise_std,
                        *s_cl,
                    )?;
                    Ok(matching_error(&closed, &m, &cfg.reference(), cfg.error_cap)?.0)
                })()
                .unwrap_or(cfg.error_cap);
                acc += err.min(cfg.error_cap);
            }
            cells.push(SensitivityCell {
                lambda_s: ls,
                lambda_j: lj,
                mean_error: acc / data.len() as f64,
            });
        }
    }
    Ok(SensitivityReport { cells, cap: cfg.error_cap })
}

#[derive(Debug, Serialize)]
pub struct SizeSweepPoint {
    pub n: usize,
    pub mean_error: f64,
}

#[derive(Debug, Serialize)]
pub struct SizeSweepReport {
    pub points: Vec<SizeSweepPoint>,
}

/// Error against meta-dataset size with nested prefixes D_{N-1} in D_N.
pub fn run_size_sweep(cfg: &BenchConfig, n_from: usize, n_to: usize) -> Result<SizeSweepReport> {
    let u = shared_input(cfg);
    let built = build_meta_dataset(&u, n_to, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "size-motors"));
    let motors: Vec<Motor> = (0..cfg.n_new).map(|_| sample_motor(&mut rng)).collect();
    let m = reference_model();
    // The records are independent of N; generate them once.
    let mut data = Vec::new();
    for (mi, motor) in motors.iter().enumerate() {
        for rep in 0..cfg.reps {
            let g = motor.tf();
            let s_ol = derive_seed(cfg.master_seed, &format!("size/{mi}/{rep}/ol"));
            let s_iv = derive_seed(cfg.master_seed, &format!("size/{mi}/{rep}/iv"));
            let s_cl = derive_seed(cfg.master_seed, &format!("size/{mi}/{rep}/cl"));
            let d_t = signals::generate_open_loop(&g, &u, cfg.noise_std, s_ol)?;
            let d_iv = signals::generate_open_loop(&g, &u, cfg.noise_std, s_iv)?;
            data.push((g, d_t, d_iv, s_cl));
        }
    }
    let mut points = Vec::new();
    for n in n_from..=n_to {
        let subset = built.meta.prefix(n);
        let mut acc = 0.0;
        for (g, d_t, d_iv, s_cl) in &data {
            let err = (|| -> Result<f64> {
                let obj = build_iv_objective(
                    d_t,
                    d_iv,
                    &subset,
                    &m,
                    &TransferFunction::unit(SAMPLE_TIME),
                    true,
                )?;
                let config = DesignConfig {
                    lambda_j: cfg.lambda_j,
                    lambda_s: cfg.lambda_s,
                    delta: None,
                    ell: cfg.ell,
                    ..Default::default()
                };
                let (w, _) = solve_meta(&obj, &subset, &config, d_t, &m)?;
                let ctf = materialize_meta_controller(&subset, &w);
                let closed = signals::simulate_closed_loop(
                    g,
                    &ctf,
                    &cfg.reference(),
                    cfg.test_noise_std,
                    *s_cl,
                )?;
                Ok(matching_error(&closed, &m, &cfg.reference(), cfg.error_cap)?.0)
            })()
            .unwrap_or(cfg.error_cap);
            acc += err;
        }
        points.push(SizeSweepPoint { n, mean_error: acc / data.len() as f64 });
    }
    Ok(SizeSweepReport { points })
}

#[derive(Debug, Serialize)]
pub struct StabilityStudyReport {
    pub design_noise_std: f64,
    pub unconstrained_errors: Vec<f64>,
    pub constrained_errors: Vec<f64>,
    pub unconstrained_outliers: usize,
    pub constrained_outliers: usize,
    pub unconstrained_median: f64,
    pub constrained_median: f64,
    pub unconstrained_solve_ms: f64,
    pub constrained_solve_ms: f64,
    /// Max |alpha difference| per run between the two variants.
    pub alpha_gaps: Vec<f64>,
}

/// High-noise study: the meta solve with and without the stability
/// constraint on design data collected at elevated noise, with the
/// meta-dataset kept at the standard noise level. Outliers are runs whose
/// error exceeds 1.5x the variant's own median.
pub fn run_stability_study(
    cfg: &BenchConfig,
    design_noise_std: f64,
    delta: f64,
) -> Result<StabilityStudyReport> {
    let u = shared_input(cfg);
    let built = build_meta_dataset(&u, cfg.n_meta, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.master_seed, "stability-motors"));
    let motors: Vec<Motor> = (0..cfg.n_new).map(|_| sample_motor(&mut rng)).collect();
    let m = reference_model();
    let mut errs_u = Vec::new();
    let mut errs_c = Vec::new();
    let mut alpha_gaps = Vec::new();
    let mut ms_u = 0.0;
    let mut ms_c = 0.0;
    for (mi, motor) in motors.iter().enumerate() {
        let g = motor.tf();
        for rep in 0..cfg.reps {
            let s_ol = derive_seed(cfg.master_seed, &format!("stab/{mi}/{rep}/ol"));
            let s_iv = derive_seed(cfg.master_seed, &format!("stab/{mi}/{rep}/iv"));
            let s_cl = derive_seed(cfg.master_seed, &format!("stab/{mi}/{rep}/cl"));
            let d_t = signals::generate_open_loop(&g, &u, design_noise_std, s_ol)?;
            let d_iv = signals::generate_open_loop(&g, &u, design_noise_std, s_iv)?;
            let obj = build_iv_objective(
                &d_t,
                &d_iv,
                &built.meta,
                &m,
                &TransferFunction::unit(SAMPLE_TIME),
                true,
            )?;
            let mut alphas: Vec<Option<Vec<f64>>> = vec![None, None];
            for (idx, (want_delta, errs, ms)) in [
                (None, &mut errs_u, &mut ms_u),
                (Some(delta), &mut errs_c, &mut ms_c),
            ]
            .into_iter()
            .enumerate()
            {
                let started = std::time::Instant::now();
                let config = DesignConfig {
                    lambda_j: cfg.lambda_j,
                    lambda_s: cfg.lambda_s,
                    delta: want_delta,
                    ell: cfg.ell,
                    ..Default::default()
                };
                let solved = solve_meta(&obj, &built.meta, &config, &d_t, &m);
                *ms += started.elapsed().as_secs_f64() * 1e3;
                let err = match solved {
                    Ok((w, _)) => {
                        alphas[idx] = Some(w.alpha.clone());
                        let ctf = materialize_meta_controller(&built.meta, &w);
                        let closed = signals::simulate_closed_loop(
                            &g,
                            &ctf,
                            &cfg.reference(),
                            cfg.test_noise_std,
                            s_cl,
                        )?;
                        matching_error(&closed, &m, &cfg.reference(), cfg.error_cap)?.0
                    }
                    Err(_) => cfg.error_cap,
                };
                errs.push(err);
            }
            if let (Some(a), Some(b)) = (&alphas[0], &alphas[1]) {
                let gap = a
                    .iter()
                    .zip(b)
                    .fold(0.0f64, |mx, (x, y)| mx.max((x - y).abs()));
                alpha_gaps.push(gap);
            }
        }
    }
    let med_u = median(&mut errs_u.clone());
    let med_c = median(&mut errs_c.clone());
    let out_u = errs_u.iter().filter(|e| **e > 1.5 * med_u).count();
    let out_c = errs_c.iter().filter(|e| **e > 1.5 * med_c).count();
    Ok(StabilityStudyReport {
        design_noise_std,
        unconstrained_errors: errs_u,
        constrained_errors: errs_c,
        unconstrained_outliers: out_u,
        constrained_outliers: out_c,
        unconstrained_median: med_u,
        constrained_median: med_c,
        unconstrained_solve_ms: ms_u,
        constrained_solve_ms: ms_c,
        alpha_gaps,
    })
}

/// Flat CSV of comparison runs.
pub fn write_comparison_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "motor,kappa,p2,method,rep,error,diverged,solve_ms,experiment_seconds")?;
    for r in &report.runs {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.motor,
            r.kappa,
            r.p2,
            r.method,
            r.rep,
            r.error,
            r.diverged,
            r.solve_ms,
            r.experiment_seconds
        )?;
    }
    Ok(())
}

/// Sensitivity heatmap as CSV (one row per grid cell).
pub fn write_sensitivity_csv(report: &SensitivityReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "lambda_s,lambda_j,mean_error")?;
    for c in &report.cells {
        writeln!(f, "{},{},{}", c.lambda_s, c.lambda_j, c.mean_error)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_extreme_is_the_documented_member() {
        let g = motor_tf(1.0, 0.0);
        assert!(g.approx_eq(
            &TransferFunction::new(vec![0.0, 0.0, 1.0], vec![1.0, -0.9975], SAMPLE_TIME).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn sampled_motors_are_stable_with_uniform_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut mean_k = 0.0;
        let mut mean_p2 = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let m = sample_motor(&mut rng);
            mean_k += m.kappa;
            mean_p2 += m.p2;
        }
        mean_k /= n as f64;
        mean_p2 /= n as f64;
        assert!((mean_k - 3.375).abs() / 3.375 < 0.02, "kappa mean {mean_k}");
        assert!((mean_p2 - 0.45).abs() / 0.45 < 0.02, "p2 mean {mean_p2}");
        let m = sample_motor(&mut rng);
        assert!(lti::is_stable(&m.tf(), 1e-9).unwrap());
    }

    #[test]
    fn perfect_matching_gives_zero_error() {
        let m = reference_model();
        let r = vec![1000.0; 150];
        let y_d = lti::simulate(&m, &r).unwrap();
        let fake = Dataset {
            u: vec![0.0; 150],
            y: y_d,
            sample_time: SAMPLE_TIME,
            noise_std: 0.0,
            seed: 0,
            kind: crate::signals::DatasetKind::ClosedLoop,
            reference: Some(r.clone()),
            diverged: false,
        };
        let (err, div) = matching_error(&fake, &m, &r, 250.0).unwrap();
        assert!(err < 1e-10);
        assert!(!div);
    }

    #[test]
    fn diverged_runs_saturate_at_cap() {
        let m = reference_model();
        let r = vec![1000.0; 150];
        let fake = Dataset {
            u: vec![0.0; 10],
            y: vec![1e13; 10],
            sample_time: SAMPLE_TIME,
            noise_std: 0.0,
            seed: 0,
            kind: crate::signals::DatasetKind::ClosedLoop,
            reference: Some(r[..10].to_vec()),
            diverged: true,
        };
        let (err, div) = matching_error(&fake, &m, &r, 250.0).unwrap();
        assert_eq!(err, 250.0);
        assert!(div);
    }

    #[test]
    fn meta_dataset_builder_accepts_stabilizing_entries() {
        let cfg = BenchConfig { n_meta: 3, ..Default::default() };
        let u = shared_input(&cfg);
        let built = build_meta_dataset(&u, 3, &cfg).unwrap();
        assert_eq!(built.meta.len(), 3);
        for (entry, motor) in built.meta.entries.iter().zip(&built.motors) {
            assert!(!entry.closed_loop.diverged);
            let (cl, _) = lti::feedback(&entry.controller.to_tf(), &motor.tf()).unwrap();
            assert!(lti::is_stable(&cl, 1e-9).unwrap());
        }
        for entry in &built.meta.entries {
            assert_eq!(entry.open_loop.u, u);
        }
    }
}
