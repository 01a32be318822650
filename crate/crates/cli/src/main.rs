//! `srom` command-line driver.
//!
//! Every subcommand prints one JSON summary line on stdout; diagnostics go to
//! stderr. Exit codes: 0 success, 2 bad configuration or arguments, 3 data or
//! file problems, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use srom_core::closure::{fit_closure, Regularization};
use srom_core::config::PipelineConfig;
use srom_core::experiments::{self, StudyReport};
use srom_core::fem::{assemble_fem_operators, sample_initial_condition, SnapshotMatrix};
use srom_core::galerkin::assemble_galerkin;
use srom_core::io::{self, Manifest};
use srom_core::pod::{ensemble_pod, PodBasis};
use srom_core::seed::{stream_rng, sub_seed, Stream};
use srom_core::srom::{simulate_deterministic, simulate_ensemble, Provenance, SromModel};
use srom_core::{Result, SromError};

#[derive(Parser)]
#[command(name = "srom", version, about = "Stochastic reduced-order models for viscous Burgers")]
struct Cli {
    /// Pipeline configuration (JSON); built-in desk defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full-order model for the training initial conditions.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_traj: Option<usize>,
    },
    /// Ensemble POD basis of a generated dataset.
    Pod {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        modes: Option<usize>,
        #[arg(long)]
        num_traj: Option<usize>,
    },
    /// Project a dataset onto a basis, subsampled every `gap` steps.
    Project {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gap: Option<usize>,
    },
    /// Fit the closure and noise from projected coefficients.
    Fit {
        /// Coefficient directory written by `project`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `none`, `lcurve` or `fixed:<lambda>`.
        #[arg(long)]
        reg: Option<String>,
    },
    /// Integrate a fitted model from a test initial condition.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Test initial condition index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of stochastic members; deterministic when absent.
        #[arg(long)]
        ensemble: Option<usize>,
        /// Simulated time span; defaults to the configured horizon.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Score a fitted model and its Galerkin part on held-out trajectories.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_test: Option<usize>,
    },
    /// Run a scripted study and write its report directory.
    Study {
        name: StudyName,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a generated training dataset instead of solving it again.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        num_traj: Option<usize>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    basis: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyName {
    PodConvergence,
    EstimatorConvergence,
    Prediction,
    Ensemble,
    Sweep,
    All,
}

impl StudyName {
    fn id(self) -> &'static str {
        match self {
            StudyName::PodConvergence => "pod-convergence",
            StudyName::EstimatorConvergence => "estimator-convergence",
            StudyName::Prediction => "prediction",
            StudyName::Ensemble => "ensemble",
            StudyName::Sweep => "sweep",
            StudyName::All => "all",
        }
    }
}

fn exit_code(err: &SromError) -> u8 {
    match err {
        SromError::Config(_) | SromError::InvalidInput(_) => 2,
        SromError::Io { .. }
        | SromError::Checksum(_)
        | SromError::Incompatible(_)
        | SromError::Format { .. }
        | SromError::DimensionMismatch(_)
        | SromError::Json(_)
        | SromError::Csv(_) => 3,
        SromError::InvalidMesh(_)
        | SromError::SolverDivergence { .. }
        | SromError::Blowup { .. }
        | SromError::Trajectory { .. }
        | SromError::IllPosed(_)
        | SromError::Mesh(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SromError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn parse_reg(text: &str) -> Result<Regularization> {
    match text {
        "none" => Ok(Regularization::None),
        "lcurve" => Ok(Regularization::Lcurve { n_mesh: 100 }),
        _ => text
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|l| *l >= 0.0 && l.is_finite())
            .map(|lambda| Regularization::Fixed { lambda })
            .ok_or_else(|| SromError::InvalidInput(format!("--reg {text:?}: expected none, lcurve or fixed:<λ ≥ 0>"))),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { out, num_traj } => generate(&cfg, &out, num_traj),
        Command::Pod {
            data,
            out,
            modes,
            num_traj,
        } => pod(&cfg, &data, &out, modes, num_traj),
        Command::Project { data, basis, out, gap } => project(&cfg, &data, &basis, &out, gap),
        Command::Fit { data, basis, out, reg } => fit(&cfg, &data, &basis, &out, reg.as_deref()),
        Command::Simulate {
            model,
            out,
            index,
            ensemble,
            horizon,
        } => simulate(&cfg, &model, &out, index, ensemble, horizon),
        Command::Evaluate { model, out, num_test } => evaluate(&cfg, &model, &out, num_test),
        Command::Study {
            name,
            out,
            data,
            num_traj,
        } => study(&cfg, name, &out, data.as_deref(), num_traj),
    }
}

fn generate(cfg: &PipelineConfig, out: &Path, num_traj: Option<usize>) -> Result<serde_json::Value> {
    let n = num_traj.unwrap_or(cfg.data.n_trajectories);
    if n == 0 {
        return Err(SromError::InvalidInput("--num-traj must be positive".into()));
    }
    create_dir(out)?;
    let mut cfg = cfg.clone();
    cfg.data.n_trajectories = n;
    eprintln!("solving {n} trajectories");
    let data = experiments::training_dataset(&cfg)?;
    let names: Vec<String> = (0..n).map(io::snapshot_file_name).collect();
    data.par_iter()
        .zip(&names)
        .try_for_each(|(y, name)| io::write_snapshot(&out.join(name), y))?;
    let mut manifest = Manifest::new("dataset", cfg.dataset_hash(), cfg.data.seed);
    manifest
        .seeds
        .insert("training_ic".into(), sub_seed(cfg.data.seed, Stream::TrainingIc, 0));
    for (m, name) in names.into_iter().enumerate() {
        manifest.add_file(out, name, m)?;
    }
    io::write_manifest(out, &manifest)?;
    io::write_json(&out.join("config.json"), &cfg)?;
    Ok(json!({
        "command": "generate",
        "out": out,
        "n_trajectories": n,
        "n_x": data[0].n_x(),
        "n_t": data[0].n_t(),
        "config_hash": manifest.config_hash,
    }))
}

fn load_dataset(cfg: &PipelineConfig, dir: &Path, num_traj: Option<usize>) -> Result<Vec<SnapshotMatrix>> {
    let manifest = io::verify_manifest(dir, "dataset", Some(&cfg.dataset_hash()))?;
    let mut files = manifest.files;
    files.sort_by_key(|e| e.index);
    let n = num_traj.unwrap_or(files.len());
    if n == 0 || n > files.len() {
        return Err(SromError::InvalidInput(format!(
            "requested {n} trajectories, {} holds {}",
            dir.display(),
            files.len()
        )));
    }
    files[..n].par_iter().map(|e| io::read_snapshot(&dir.join(&e.file))).collect()
}

fn pod(
    cfg: &PipelineConfig,
    data: &Path,
    out: &Path,
    modes: Option<usize>,
    num_traj: Option<usize>,
) -> Result<serde_json::Value> {
    let dataset = load_dataset(cfg, data, num_traj)?;
    let r = modes.unwrap_or(cfg.reduction.r);
    let basis = ensemble_pod(&dataset, r)?;
    create_dir(out)?;
    let path = out.join("basis.srom");
    io::write_basis(&path, &basis)?;
    let total: f64 = basis.eigenvalues.iter().sum();
    let captured: f64 = basis.eigenvalues[..r].iter().sum();
    Ok(json!({
        "command": "pod",
        "basis": path,
        "r": r,
        "n_trajectories": dataset.len(),
        "fingerprint": basis.fingerprint(),
        "energy_fraction": captured / total,
        "eigenvalues": &basis.eigenvalues[..r],
    }))
}

fn project(cfg: &PipelineConfig, data: &Path, basis: &Path, out: &Path, gap: Option<usize>) -> Result<serde_json::Value> {
    let basis = io::read_basis(basis)?;
    let dataset = load_dataset(cfg, data, None)?;
    let gap = gap.unwrap_or(cfg.reduction.gap);
    if gap == 0 {
        return Err(SromError::InvalidInput("--gap must be positive".into()));
    }
    let coeffs = experiments::project_all(&dataset, &basis, gap)?;
    create_dir(out)?;
    let names: Vec<String> = (0..coeffs.len()).map(io::coefficient_file_name).collect();
    coeffs
        .par_iter()
        .zip(&names)
        .try_for_each(|(c, name)| io::write_coefficients(&out.join(name), c))?;
    let mut manifest = Manifest::new("coefficients", cfg.dataset_hash(), cfg.data.seed);
    manifest.basis_fingerprint = Some(basis.fingerprint());
    manifest.gap = Some(gap);
    for (m, name) in names.into_iter().enumerate() {
        manifest.add_file(out, name, m)?;
    }
    io::write_manifest(out, &manifest)?;
    Ok(json!({
        "command": "project",
        "out": out,
        "n_trajectories": coeffs.len(),
        "r": basis.r(),
        "gap": gap,
        "n_t": coeffs[0].n_t(),
    }))
}

fn fit(cfg: &PipelineConfig, data: &Path, basis: &Path, out: &Path, reg: Option<&str>) -> Result<serde_json::Value> {
    let regularization = match reg {
        Some(text) => parse_reg(text)?,
        None => cfg.regression,
    };
    let basis = io::read_basis(basis)?;
    let manifest = io::verify_manifest(data, "coefficients", Some(&cfg.dataset_hash()))?;
    if manifest.basis_fingerprint.as_deref() != Some(basis.fingerprint().as_str()) {
        return Err(SromError::Incompatible(
            "coefficients were projected onto a different basis".into(),
        ));
    }
    let gap = manifest
        .gap
        .ok_or_else(|| SromError::Incompatible("coefficient manifest records no gap".into()))?;
    let mut files = manifest.files.clone();
    files.sort_by_key(|e| e.index);
    let coeffs = files
        .par_iter()
        .map(|e| io::read_coefficients(&data.join(&e.file), gap))
        .collect::<Result<Vec<_>>>()?;
    let fem = assemble_fem_operators(cfg.physics.n_elements)?;
    if fem.n_nodes() != basis.n_x() {
        return Err(SromError::Incompatible("basis does not match the configured mesh".into()));
    }
    let ops = assemble_galerkin(&basis, cfg.physics.nu, &fem)?;
    let fit = fit_closure(&coeffs, &ops, regularization)?;
    let delta = coeffs[0].delta;
    let t_end = coeffs[0].t0 + delta * (coeffs[0].n_t() - 1) as f64;
    let provenance = Provenance {
        nu: cfg.physics.nu,
        n_trajectories: coeffs.len(),
        gap,
        seed: manifest.seed,
        t_start: coeffs[0].t0,
        t_end,
    };
    let model = SromModel::new(delta, ops, fit.params.clone(), basis.fingerprint(), provenance)?;
    create_dir(out)?;
    let model_path = out.join("model.json");
    io::write_model(&model_path, &model)?;
    io::write_json(&out.join("fit_report.json"), &fit.report)?;
    Ok(json!({
        "command": "fit",
        "model": model_path,
        "r": model.r,
        "delta": delta,
        "lambda": fit.report.lambda_used,
        "fit_loss": fit.report.fit_loss,
        "sigma": fit.report.sigma,
        "condition_number": fit.report.condition_number,
    }))
}

fn load_model(args: &ModelArgs) -> Result<(SromModel, PodBasis)> {
    let model = io::read_model(&args.model)?;
    let basis = io::read_basis(&args.basis)?;
    if basis.fingerprint() != model.basis_fingerprint || basis.r() != model.r {
        return Err(SromError::Incompatible(format!(
            "{} was not fitted on {}",
            args.model.display(),
            args.basis.display()
        )));
    }
    Ok((model, basis))
}

fn simulate(
    cfg: &PipelineConfig,
    args: &ModelArgs,
    out: &Path,
    index: usize,
    ensemble: Option<usize>,
    horizon: Option<f64>,
) -> Result<serde_json::Value> {
    let (model, basis) = load_model(args)?;
    let horizon = horizon.unwrap_or(cfg.study.horizon);
    if !(horizon > 0.0) {
        return Err(SromError::InvalidInput("--horizon must be positive".into()));
    }
    let n_steps = (horizon / model.delta).round() as usize;
    let fem = assemble_fem_operators(cfg.physics.n_elements)?;
    if fem.n_nodes() != basis.n_x() {
        return Err(SromError::Incompatible("basis does not match the configured mesh".into()));
    }
    let mut rng = stream_rng(cfg.data.seed, Stream::TestIc, index as u64);
    let u0 = sample_initial_condition(&cfg.initial_condition, &fem, &mut rng)?;
    let a0: Vec<f64> = (0..basis.r())
        .map(|j| basis.mode(j).iter().zip(&u0).map(|(p, u)| p * u).sum())
        .collect();
    create_dir(out)?;
    match ensemble {
        None => {
            let traj = simulate_deterministic(&model, &a0, n_steps)?;
            io::write_trajectory_csv(&out.join("trajectory.csv"), &traj.values, model.delta, 0.0)?;
            io::write_matrix(&out.join("trajectory.srom"), &traj.values, model.delta, 0.0)?;
            Ok(json!({
                "command": "simulate",
                "index": index,
                "n_steps": n_steps,
                "blowup_step": traj.blowup_step,
                "final_norm": traj.values.column(traj.values.ncols() - 1).norm(),
            }))
        }
        Some(n_ens) => {
            if n_ens == 0 {
                return Err(SromError::InvalidInput("--ensemble must be positive".into()));
            }
            let noise_seed = sub_seed(cfg.data.seed, Stream::EnsembleNoise, index as u64);
            let levels = &cfg.study.percentile_levels;
            let ens = simulate_ensemble(&model, &a0, n_steps, n_ens, noise_seed, levels)?;
            if let Some(mean) = &ens.mean {
                io::write_trajectory_csv(&out.join("ensemble_mean.csv"), mean, model.delta, 0.0)?;
                io::write_matrix(&out.join("ensemble_mean.srom"), mean, model.delta, 0.0)?;
            }
            for (q, band) in levels.iter().zip(&ens.percentiles) {
                io::write_trajectory_csv(&out.join(format!("p{q}.csv")), band, model.delta, 0.0)?;
            }
            Ok(json!({
                "command": "simulate",
                "index": index,
                "n_steps": n_steps,
                "ensemble": n_ens,
                "n_invalid": ens.n_invalid,
                "noise_seed": noise_seed,
            }))
        }
    }
}

fn evaluate(cfg: &PipelineConfig, args: &ModelArgs, out: &Path, num_test: Option<usize>) -> Result<serde_json::Value> {
    let (model, basis) = load_model(args)?;
    let n = num_test.unwrap_or(cfg.study.n_test);
    if n == 0 {
        return Err(SromError::InvalidInput("--num-test must be positive".into()));
    }
    let tests = experiments::test_dataset(cfg, n)?;
    let report = experiments::prediction_report(cfg, &model, &basis, &tests, None)?;
    experiments::write_report(out, &report)?;
    Ok(summary_json("evaluate", out, &report))
}

fn summary_json(command: &str, out: &Path, report: &StudyReport) -> serde_json::Value {
    json!({
        "command": command,
        "study": report.study_id,
        "out": out,
        "summary": report.summary,
        "slopes": report.fitted_slopes.iter().map(|(k, v)| (k.clone(), v.slope)).collect::<std::collections::BTreeMap<_, _>>(),
    })
}

fn study(
    cfg: &PipelineConfig,
    name: StudyName,
    out: &Path,
    data: Option<&Path>,
    num_traj: Option<usize>,
) -> Result<serde_json::Value> {
    let mut cfg = cfg.clone();
    let train = match data {
        Some(dir) => load_dataset(&cfg, dir, num_traj)?,
        None => {
            if let Some(n) = num_traj {
                cfg.data.n_trajectories = n;
            }
            eprintln!("solving {} training trajectories", cfg.data.n_trajectories);
            experiments::training_dataset(&cfg)?
        }
    };
    cfg.data.n_trajectories = train.len();
    let run_one = |name: StudyName| -> Result<StudyReport> {
        eprintln!("running {} study", name.id());
        match name {
            StudyName::PodConvergence => experiments::pod_convergence_study(&cfg, &train),
            StudyName::EstimatorConvergence => experiments::estimator_convergence_study(&cfg, &train),
            StudyName::Prediction => experiments::prediction_study(&cfg, &train),
            StudyName::Ensemble => experiments::ensemble_study(&cfg, &train),
            StudyName::Sweep => experiments::spacetime_sweep(&cfg, &train),
            StudyName::All => unreachable!(),
        }
    };
    if let StudyName::All = name {
        let mut all = serde_json::Map::new();
        for n in [
            StudyName::PodConvergence,
            StudyName::EstimatorConvergence,
            StudyName::Prediction,
            StudyName::Ensemble,
            StudyName::Sweep,
        ] {
            let dir = out.join(n.id());
            let report = run_one(n)?;
            experiments::write_report(&dir, &report)?;
            all.insert(n.id().into(), summary_json("study", &dir, &report));
        }
        return Ok(json!({ "command": "study", "studies": all }));
    }
    let report = run_one(name)?;
    experiments::write_report(out, &report)?;
    Ok(summary_json("study", out, &report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reg_parsing() {
        assert_eq!(parse_reg("none").unwrap(), Regularization::None);
        assert_eq!(parse_reg("fixed:0.5").unwrap(), Regularization::Fixed { lambda: 0.5 });
        assert!(matches!(parse_reg("lcurve").unwrap(), Regularization::Lcurve { .. }));
        assert!(parse_reg("fixed:-1").is_err());
        assert!(parse_reg("ridge").is_err());
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&SromError::Config("x".into())), 2);
        assert_eq!(exit_code(&SromError::Checksum("f".into())), 3);
        assert_eq!(exit_code(&SromError::IllPosed("x".into())), 4);
    }
}
