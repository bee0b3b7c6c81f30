//! Command-line front end: integrator/kernel sampling dumps, experiment
//! training, checkpoint evaluation, and the kernel invariant self-test.

use clap::{Args, Parser, Subcommand, ValueEnum};
use hmcvi::data::Split;
use hmcvi::estimators::nll_table_csv;
use hmcvi::hmc::{simulate_ensemble, HmcConfig, MassBinding};
use hmcvi::leapfrog::{leapfrog_trajectory, write_trajectory_csv, LeapfrogConfig, PhaseState};
use hmcvi::models::load_checkpoint;
use hmcvi::potential::target_by_name;
use hmcvi::training::{evaluate, stream_seed, train, ExperimentConfig, PreparedData};
use hmcvi::{diagnostics, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hmcvi",
    version,
    about = "Gradient-trained chain-augmented variational inference toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dump an integrator trajectory or a transition-kernel ensemble as CSV.
    Sample(SampleArgs),
    /// Train an experiment described by a JSON configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split: bound, acceptance, optional
    /// importance-sampled marginal likelihood.
    Evaluate(EvalArgs),
    /// Run the kernel invariant checks and report one line per check.
    Selftest(SelftestArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SampleMode {
    /// One deterministic integrator trajectory with per-step energies.
    Trajectory,
    /// A population of independent chains snapshotted after each transition.
    Ensemble,
}

#[derive(Args)]
struct SampleArgs {
    /// Built-in target (gauss1d, gauss2d, mixture2, mixture3).
    #[arg(long, default_value = "mixture3")]
    target: String,
    #[arg(long, value_enum, default_value_t = SampleMode::Trajectory)]
    mode: SampleMode,
    /// Integrator step size.
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Trajectory mode: number of integrator steps to record.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Initial position, comma separated (defaults to all ones).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    z0: Option<Vec<f64>>,
    /// Initial velocity, comma separated (trajectory mode; drawn from the
    /// momentum distribution when omitted).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    v0: Option<Vec<f64>>,
    /// Diagonal of the mass matrix M (identity when omitted).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    mass_diag: Option<Vec<f64>>,
    /// Ensemble mode: number of particles.
    #[arg(long, default_value_t = 256)]
    particles: usize,
    /// Ensemble mode: transitions applied to every particle.
    #[arg(long, default_value_t = 10)]
    transitions: usize,
    /// Ensemble mode: leapfrog steps per transition.
    #[arg(long, default_value_t = 4)]
    leapfrog: usize,
    /// Ensemble mode: momentum mixing coefficient in [-1, 1].
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Ensemble mode: drop the accept/reject correction.
    #[arg(long)]
    no_acceptance: bool,
    /// Ensemble mode: standard deviation of the initial position cloud.
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration (JSON; every field of the experiment schema
    /// is addressable, unknown keys are rejected).
    #[arg(long)]
    config: PathBuf,
    /// Directory for metrics.csv, config.json, and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// After training, evaluate the best checkpoint on the test split with
    /// the importance-sampling estimator and write test_report.json.
    #[arg(long)]
    eval_test: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment configuration the checkpoint was trained under (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also estimate the per-datum marginal likelihood by importance
    /// sampling.
    #[arg(long)]
    nll: bool,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-datum estimate table CSV path (requires --nll).
    #[arg(long)]
    nll_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Run only the checks whose name contains this substring.
    #[arg(long)]
    only: Option<String>,
}

fn write_or_stdout(path: Option<&PathBuf>, content: &str) -> hmcvi::Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            fs::write(p, content)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        None => {
            print!("{content}");
            std::io::stdout().flush()?;
            Ok(())
        }
    }
}

fn cmd_sample(args: &SampleArgs) -> hmcvi::Result<i32> {
    let pot = target_by_name(&args.target)?;
    let d = pot.dim();
    let check_dim = |name: &str, v: &[f64]| -> hmcvi::Result<()> {
        if v.len() != d {
            return Err(Error::Config(format!(
                "--{name} has {} entries but target '{}' has dimension {d}",
                v.len(),
                args.target
            )));
        }
        Ok(())
    };
    let binding = match &args.mass_diag {
        Some(m) => {
            check_dim("mass-diag", m)?;
            if m.iter().any(|&x| x <= 0.0) {
                return Err(Error::Config("--mass-diag entries must be positive".into()));
            }
            MassBinding::from_diag(m)
        }
        None => MassBinding::identity_f64(d),
    };
    let z0 = match &args.z0 {
        Some(z) => {
            check_dim("z0", z)?;
            z.clone()
        }
        None => vec![1.0; d],
    };
    // Kept off the streams the kernel derives from the same seed internally.
    let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(args.seed, 90, 0, 0));
    match args.mode {
        SampleMode::Trajectory => {
            let v0 = match &args.v0 {
                Some(v) => {
                    check_dim("v0", v)?;
                    v.clone()
                }
                None => {
                    let eps: Vec<f64> =
                        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    binding.sample(&eps)
                }
            };
            let cfg = LeapfrogConfig::new(args.eps, args.steps, binding.mass_form());
            let records =
                leapfrog_trajectory(pot.as_ref(), &PhaseState::new(z0, v0), &cfg)?;
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &records)?;
            let h0 = records[0].hamiltonian;
            let drift = records
                .iter()
                .map(|r| (r.hamiltonian - h0).abs())
                .fold(0.0, f64::max);
            write_or_stdout(args.out.as_ref(), &String::from_utf8_lossy(&buf))?;
            eprintln!(
                "{} steps on '{}', eps={}, max |H - H0| = {drift:.3e}",
                args.steps, args.target, args.eps
            );
            Ok(0)
        }
        SampleMode::Ensemble => {
            let cfg = HmcConfig::new(
                args.transitions,
                args.eps,
                args.leapfrog,
                args.alpha,
                !args.no_acceptance,
            );
            let init: Vec<Vec<f64>> = (0..args.particles)
                .map(|_| {
                    (0..d)
                        .map(|_| args.init_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let snaps = simulate_ensemble(pot.as_ref(), &init, &binding, &cfg, args.seed)?;
            let mut csv = String::from("step,particle");
            for i in 0..d {
                csv.push_str(&format!(",z{i}"));
            }
            for i in 0..d {
                csv.push_str(&format!(",v{i}"));
            }
            csv.push_str(",potential,kinetic\n");
            for snap in &snaps {
                for p in 0..snap.z.len() {
                    csv.push_str(&format!("{},{p}", snap.step));
                    for x in &snap.z[p] {
                        csv.push_str(&format!(",{x:.17e}"));
                    }
                    for x in &snap.v[p] {
                        csv.push_str(&format!(",{x:.17e}"));
                    }
                    csv.push_str(&format!(
                        ",{:.17e},{:.17e}\n",
                        snap.potential[p], snap.kinetic[p]
                    ));
                }
            }
            write_or_stdout(args.out.as_ref(), &csv)?;
            if let Some(last) = snaps.last() {
                eprintln!(
                    "{} particles after {} transitions on '{}': mean potential {:.4}, dropped {}",
                    last.z.len(),
                    last.step,
                    args.target,
                    last.mean_potential(),
                    last.dropped
                );
            }
            Ok(0)
        }
    }
}

fn load_config(path: &PathBuf) -> hmcvi::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> hmcvi::Result<i32> {
    let cfg = load_config(&args.config)?;
    eprintln!("preparing data for run '{}'", cfg.run_name);
    let data = PreparedData::prepare(&cfg)?;
    let result = train(&cfg, &data, Some(&args.out_dir))?;
    if !result.warm_started.is_empty() {
        eprintln!("warm-started blocks: {}", result.warm_started.join(", "));
    }
    if let Some(last) = result.log.last() {
        eprintln!(
            "final epoch {}: train bound {:.6}, valid bound {:.6}",
            last.epoch, last.train_bound, last.valid_bound
        );
    }
    eprintln!(
        "best valid bound {:.6} at epoch {} (initial {:.6}); {} skipped batches; artifacts in {}",
        result.best_valid,
        result.best_epoch,
        result.init_valid,
        result.total_skipped,
        args.out_dir.display()
    );
    if args.eval_test {
        let report = evaluate(&cfg, &result.best_store, &data, Split::Test, true)?;
        let json = serde_json::to_string_pretty(&report)?;
        let path = args.out_dir.join("test_report.json");
        fs::write(&path, &json)?;
        eprintln!("wrote {}", path.display());
        println!("{json}");
    }
    Ok(0)
}

fn cmd_evaluate(args: &EvalArgs) -> hmcvi::Result<i32> {
    if args.nll_csv.is_some() && !args.nll {
        return Err(Error::Config("--nll-csv needs --nll".into()));
    }
    let cfg = load_config(&args.config)?;
    let (store, meta) = load_checkpoint(&args.checkpoint)?;
    eprintln!(
        "loaded checkpoint {} ({} parameters, meta {})",
        args.checkpoint.display(),
        store.total_len(),
        meta
    );
    let data = PreparedData::prepare(&cfg)?;
    let split = match args.split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&cfg, &store, &data, split, args.nll)?;
    if let (Some(csv_path), Some(nll)) = (args.nll_csv.as_ref(), report.nll.as_ref()) {
        let rows: Vec<(usize, hmcvi::estimators::NllEstimate)> =
            nll.per_datum.iter().copied().enumerate().collect();
        fs::write(csv_path, nll_table_csv(&rows))?;
        eprintln!("wrote {}", csv_path.display());
    }
    write_or_stdout(args.out.as_ref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

fn cmd_selftest(args: &SelftestArgs) -> hmcvi::Result<i32> {
    let checks: Vec<_> = diagnostics::battery()
        .into_iter()
        .filter(|(name, _)| args.only.as_ref().is_none_or(|s| name.contains(s.as_str())))
        .collect();
    if checks.is_empty() {
        return Err(Error::Config(format!(
            "no check matches '{}'",
            args.only.as_deref().unwrap_or("")
        )));
    }
    let mut failures = 0;
    for (_, run) in checks {
        let result = run();
        println!("{result}");
        if !result.pass {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{failures} check(s) FAILED");
        Ok(1)
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
