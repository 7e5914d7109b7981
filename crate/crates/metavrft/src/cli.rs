//! Command-line front end: data generation, one-shot tuning, meta-dataset
//! builds, meta-design solves, and the full experiment suite.
//!
//! Exit codes: 0 success, 1 numerical/solver failure, 2 usage error,
//! 3 i/o error.

use crate::bench::{self, BenchConfig};
use crate::error::{Error, Result};
use crate::lti::{Basis, ControllerParams, TransferFunction};
use crate::metadesign::{
    build_iv_objective, materialize_meta_controller, materialize_params, solve_meta, DesignConfig,
    MetaDataset, MetaEntry,
};
use crate::signals::{self, Dataset};
use crate::vrft::{self, StabilitySpec, VrftProblem};
use clap::{Args, Parser, Subcommand};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "metavrft",
    about = "Data-driven model-reference controller tuning by meta-learning",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an open-loop dataset from a sampled family motor.
    Generate(GenerateArgs),
    /// Tune a single controller by VRFT / c-VRFT from dataset files.
    VrftTune(VrftTuneArgs),
    /// Build a meta-dataset (entries, controllers, closed-loop tests).
    MetaBuild(MetaBuildArgs),
    /// Solve the meta-design problem against dataset files.
    MetaTune(MetaTuneArgs),
    /// Run one of the benchmark experiments end to end.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Plant family (only `dc-motor` is known).
    #[arg(long, default_value = "dc-motor")]
    pub family: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 550)]
    pub t: usize,
    /// Input standard deviation (A).
    #[arg(long, default_value_t = 2.0)]
    pub input_std: f64,
    /// Measurement noise standard deviation (rpm).
    #[arg(long, default_value_t = 10.0)]
    pub noise: f64,
    /// Output CSV path (a JSON sidecar is written next to it).
    #[arg(long, default_value = "dataset.csv")]
    pub out: PathBuf,
    /// Also generate the repeated experiment for the instrument.
    #[arg(long)]
    pub with_iv: bool,
}

#[derive(Args, Debug)]
pub struct VrftTuneArgs {
    /// Open-loop dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Repeated-experiment CSV for the instrumental variable.
    #[arg(long)]
    pub data_iv: Option<PathBuf>,
    /// Stability constraint level; omit for plain VRFT.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub ell: usize,
    /// Use the tuner's low-frequency emphasis weighting instead of W = 1.
    #[arg(long)]
    pub slow_weighting: bool,
    #[arg(long, default_value = "controller.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetaBuildArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 10.0)]
    pub noise: f64,
    /// Output directory for entry files.
    #[arg(long, default_value = "meta")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetaTuneArgs {
    /// Meta-dataset directory produced by `meta-build`.
    #[arg(long)]
    pub meta: PathBuf,
    /// New plant's open-loop dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Repeated experiment CSV.
    #[arg(long)]
    pub data_iv: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub lambda_j: f64,
    #[arg(long, default_value_t = 300.0)]
    pub lambda_s: f64,
    /// Stability level; `none` disables the constraint.
    #[arg(long, default_value = "none")]
    pub delta: String,
    #[arg(long, default_value_t = 200)]
    pub ell: usize,
    /// Screen entries against the new data before solving.
    #[arg(long)]
    pub screen: bool,
    #[arg(long, default_value = "solution.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// One of: comparison, nondet, sensitivity, size, stability.
    pub which: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for reports.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n_meta: usize,
    #[arg(long, default_value_t = 10)]
    pub n_new: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Sensitivity grid for lambda_s (comma separated).
    #[arg(long, default_value = "0,3,30,300,3000,30000")]
    pub ls: String,
    /// Sensitivity grid for lambda_j (comma separated).
    #[arg(long, default_value = "0,3,30,300")]
    pub lj: String,
    /// Worker cap for fan-out (0 = default).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

/// Run the CLI and map error classes onto exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => 3,
                Error::InvalidArgument { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::VrftTune(a) => cmd_vrft_tune(&a),
        Command::MetaBuild(a) => cmd_meta_build(&a),
        Command::MetaTune(a) => cmd_meta_tune(&a),
        Command::Experiment(a) => cmd_experiment(&a),
    }
}

fn env_override(name: &str, current: f64) -> f64 {
    std::env::var(format!("METAVRFT_{name}"))
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(current)
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if a.family != "dc-motor" {
        return Err(Error::InvalidArgument { detail: format!("unknown family '{}'", a.family) });
    }
    let noise = env_override("NOISE_STD", a.noise);
    let mut rng = rand::SeedableRng::seed_from_u64(signals::derive_seed(a.seed, "generate/motor"));
    let motor = bench::sample_motor(&mut rng);
    let u: Vec<f64> = {
        use rand::Rng;
        (0..a.t)
            .map(|_| a.input_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    };
    let d = signals::generate_open_loop(
        &motor.tf(),
        &u,
        noise,
        signals::derive_seed(a.seed, "generate/noise"),
    )?;
    d.write_csv(&a.out)?;
    println!("wrote {} ({} samples, kappa={:.4}, p2={:.4})", a.out.display(), d.len(), motor.kappa, motor.p2);
    if a.with_iv {
        let d2 = signals::generate_open_loop(
            &motor.tf(),
            &u,
            noise,
            signals::derive_seed(a.seed, "generate/noise-iv"),
        )?;
        let iv_path = sibling(&a.out, "_iv");
        d2.write_csv(&iv_path)?;
        println!("wrote {}", iv_path.display());
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn cmd_vrft_tune(a: &VrftTuneArgs) -> Result<()> {
    let dataset = Dataset::read_csv(&a.data)?;
    let dataset_iv = a.data_iv.as_ref().map(|p| Dataset::read_csv(p)).transpose()?;
    let m = bench::reference_model();
    let w = if a.slow_weighting {
        vrft::low_freq_weighting(bench::SAMPLE_TIME)
    } else {
        TransferFunction::unit(bench::SAMPLE_TIME)
    };
    let problem = VrftProblem {
        dataset,
        dataset_iv,
        m,
        w,
        basis: Basis::Pi,
        stability: a.delta.map(|delta| StabilitySpec { delta, window: a.ell }),
        white_input: true,
    };
    let out = vrft::vrft_tune(&problem)?;
    write_json(&a.out, &out.params)?;
    println!(
        "theta = {:?}, ell = {:?}, delta_hat = {:?}",
        out.params.theta, out.ell, out.delta_hat
    );
    Ok(())
}

fn cmd_meta_build(a: &MetaBuildArgs) -> Result<()> {
    let cfg = BenchConfig {
        master_seed: a.seed,
        noise_std: a.noise,
        n_meta: a.n,
        ..Default::default()
    };
    let u = bench::shared_input(&cfg);
    let built = bench::build_meta_dataset(&u, a.n, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for (k, entry) in built.meta.entries.iter().enumerate() {
        entry.open_loop.write_csv(&a.out.join(format!("entry{k}_open.csv")))?;
        entry.closed_loop.write_csv(&a.out.join(format!("entry{k}_closed.csv")))?;
        write_json(&a.out.join(format!("entry{k}_controller.json")), &entry.controller)?;
    }
    write_json(
        &a.out.join("motors.json"),
        &built.motors,
    )?;
    println!("built {} entries into {} ({} draws)", a.n, a.out.display(), built.draws);
    Ok(())
}

fn read_meta_dir(dir: &Path) -> Result<MetaDataset> {
    let mut entries = Vec::new();
    for k in 0.. {
        let open = dir.join(format!("entry{k}_open.csv"));
        if !open.exists() {
            break;
        }
        let open_loop = Dataset::read_csv(&open)?;
        let closed_loop = Dataset::read_csv(&dir.join(format!("entry{k}_closed.csv")))?;
        let text = std::fs::read_to_string(dir.join(format!("entry{k}_controller.json")))?;
        let controller: ControllerParams = serde_json::from_str(&text)?;
        entries.push(MetaEntry { controller, open_loop, closed_loop, delta_k: 0.5 });
    }
    if entries.is_empty() {
        return Err(Error::EmptyMetaDataset);
    }
    Ok(MetaDataset { entries })
}

fn cmd_meta_tune(a: &MetaTuneArgs) -> Result<()> {
    let mut meta = read_meta_dir(&a.meta)?;
    let d_t = Dataset::read_csv(&a.data)?;
    let d_iv = Dataset::read_csv(&a.data_iv)?;
    let m = bench::reference_model();
    let delta = match a.delta.as_str() {
        "none" => None,
        s => Some(s.parse::<f64>().map_err(|_| Error::InvalidArgument {
            detail: format!("bad --delta value '{s}'"),
        })?),
    };
    if a.screen {
        let grid = crate::spectral::SpectralGrid::new(a.ell.min(d_t.len().saturating_sub(1) / 2));
        let kept: Vec<MetaEntry> = meta
            .entries
            .into_iter()
            .filter(|e| {
                crate::spectral::screen_meta_controller(
                    &d_t,
                    &m,
                    &e.controller.to_tf(),
                    e.delta_k,
                    &grid,
                )
                .unwrap_or(false)
            })
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyMetaDataset);
        }
        meta = MetaDataset { entries: kept };
    }
    let obj = build_iv_objective(
        &d_t,
        &d_iv,
        &meta,
        &m,
        &TransferFunction::unit(bench::SAMPLE_TIME),
        true,
    )?;
    let config = DesignConfig {
        lambda_j: env_override("LAMBDA_J", a.lambda_j),
        lambda_s: env_override("LAMBDA_S", a.lambda_s),
        delta,
        ell: a.ell,
        ..Default::default()
    };
    let (weights, report) = solve_meta(&obj, &meta, &config, &d_t, &m)?;
    let solution = serde_json::json!({
        "alpha": weights.alpha,
        "objective": report.objective,
        "objective_raw": report.objective_raw,
        "delta_hat": report.delta_hat,
        "ell": report.ell,
        "active_constraints": report.active_constraints,
        "timings_ms": { "solve": report.timings_ms },
        "similarity": report.similarity,
        "performance": report.performance,
        "config": config,
    });
    std::fs::write(&a.out, serde_json::to_string_pretty(&solution)?)?;
    let ctrl_path = sibling(&a.out, "_controller");
    match materialize_params(&meta, &weights) {
        Some(p) => write_json(&ctrl_path, &p)?,
        None => write_json(&ctrl_path, &materialize_meta_controller(&meta, &weights))?,
    }
    println!(
        "alpha = {:?}\nobjective = {:.6e}, delta_hat = {:?}",
        weights.alpha, report.objective, report.delta_hat
    );
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let cfg = BenchConfig {
        master_seed: a.seed,
        n_meta: a.n_meta,
        n_new: a.n_new,
        reps: a.reps,
        jobs: a.jobs,
        ..Default::default()
    };
    std::fs::create_dir_all(&a.out)?;
    let stamp = format!("{}-seed{}", a.which, a.seed);
    let dir = a.out.join(stamp);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    match a.which.as_str() {
        "comparison" => {
            let report = bench::run_comparison(&cfg)?;
            bench::write_comparison_csv(&report, &dir.join("comparison.csv"))?;
            write_json(&dir.join("comparison.json"), &report)?;
            println!(
                "meta beats vrft on {}/{} motors, trivial on {}/{}; capped means: meta-l0 {:.2}, vrft {:.2}",
                report.wins_meta_vs_vrft,
                cfg.n_new,
                report.wins_meta_vs_trivial,
                cfg.n_new,
                report.capped_mean_meta_lambda0,
                report.capped_mean_vrft
            );
        }
        "nondet" => {
            for ls in [300.0, 3000.0] {
                let report = bench::run_non_deteriorating(&cfg, ls)?;
                write_json(&dir.join(format!("nondet_ls{ls}.json")), &report)?;
                println!("lambda_s = {ls}: {} deteriorations", report.deteriorations);
            }
        }
        "sensitivity" => {
            let parse = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|_| Error::InvalidArgument {
                            detail: format!("bad grid value '{x}'"),
                        })
                    })
                    .collect()
            };
            let report = bench::run_sensitivity(&cfg, &parse(&a.ls)?, &parse(&a.lj)?)?;
            bench::write_sensitivity_csv(&report, &dir.join("sensitivity.csv"))?;
            write_json(&dir.join("sensitivity.json"), &report)?;
            println!("wrote {} cells", report.cells.len());
        }
        "size" => {
            let report = bench::run_size_sweep(&cfg, 2, 15)?;
            write_json(&dir.join("size.json"), &report)?;
            for p in &report.points {
                println!("N = {:2}: mean error {:.2} rpm", p.n, p.mean_error);
            }
        }
        "stability" => {
            let report = bench::run_stability_study(&cfg, 40.0, 0.5)?;
            write_json(&dir.join("stability.json"), &report)?;
            println!(
                "outliers: unconstrained {}, constrained {}; medians {:.1} / {:.1}",
                report.unconstrained_outliers,
                report.constrained_outliers,
                report.unconstrained_median,
                report.constrained_median
            );
        }
        other => {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "unknown experiment '{other}' (expected comparison|nondet|sensitivity|size|stability)"
                ),
            });
        }
    }
    println!("reports in {}", dir.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}
