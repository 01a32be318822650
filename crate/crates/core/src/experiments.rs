//! Scripted studies: POD and estimator convergence, prediction accuracy
//! against the G-ROM, stochastic ensembles and the (r, Gap) sweep.
//!
//! Each study returns a [`StudyReport`]; [`write_report`] stores it as a
//! directory holding `report.json` (configuration, slopes, summary values)
//! and one CSV file per table. Column headers read `name [unit]`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::{estimator_errors, fit_closure, ClosureFit, FitReport, Regularization};
use crate::config::PipelineConfig;
use crate::error::{Result, SromError};
use crate::fem::{assemble_fem_operators, generate_dataset, generate_stream, FemOperators, SnapshotMatrix};
use crate::galerkin::{assemble_galerkin, GalerkinOperators};
use crate::io;
use crate::pod::{align_basis, energy_capture, ensemble_pod, pod_errors, project_trajectory, CoefficientTrajectory, PodBasis};
use crate::seed::{sub_seed, Stream};
use crate::srom::{percentile_sorted, simulate_deterministic, simulate_ensemble, Provenance, SromModel};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns
                .iter()
                .map(|(n, u)| Column {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            rows: Vec::new(),
        }
    }

    fn with_columns(name: &str, columns: Vec<Column>) -> Self {
        Self {
            name: name.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Values of the named column, top to bottom.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub study_id: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub tables: Vec<Table>,
    pub fitted_slopes: BTreeMap<String, SlopeFit>,
    /// Scalar results; `None` marks a non-finite value (e.g. a blowup).
    pub summary: BTreeMap<String, Option<f64>>,
    pub fit: Option<FitReport>,
}

impl StudyReport {
    fn new(study_id: &str, config: &PipelineConfig) -> Self {
        Self {
            study_id: study_id.to_string(),
            config: config.clone(),
            seed: config.data.seed,
            tables: Vec::new(),
            fitted_slopes: BTreeMap::new(),
            summary: BTreeMap::new(),
            fit: None,
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied().flatten()
    }

    fn set(&mut self, key: impl Into<String>, value: f64) {
        self.summary.insert(key.into(), value.is_finite().then_some(value));
    }
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    file: String,
    columns: Vec<Column>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    study_id: String,
    seed: u64,
    config: PipelineConfig,
    tables: Vec<TableEntry>,
    fitted_slopes: BTreeMap<String, SlopeFit>,
    summary: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit: Option<FitReport>,
}

fn header_cell(c: &Column) -> String {
    format!("{} [{}]", c.name, c.unit)
}

fn parse_header_cell(cell: &str) -> Option<Column> {
    let open = cell.rfind(" [")?;
    let unit = cell[open + 2..].strip_suffix(']')?;
    Some(Column {
        name: cell[..open].to_string(),
        unit: unit.to_string(),
    })
}

pub fn write_table_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(table.columns.iter().map(header_cell))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| SromError::io(path, e))
}

pub fn read_table_csv(path: &Path, name: &str) -> Result<Table> {
    let mut rd = csv::Reader::from_path(path)?;
    let columns = rd
        .headers()?
        .iter()
        .map(|c| parse_header_cell(c).ok_or_else(|| SromError::format(path, format!("bad header {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::with_columns(name, columns);
    for rec in rd.records() {
        let row = rec?
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| SromError::format(path, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        table.rows.push(row);
    }
    Ok(table)
}

pub fn write_report(dir: &Path, report: &StudyReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SromError::io(dir, e))?;
    for t in &report.tables {
        write_table_csv(&dir.join(t.file_name()), t)?;
    }
    let file = ReportFile {
        study_id: report.study_id.clone(),
        seed: report.seed,
        config: report.config.clone(),
        tables: report
            .tables
            .iter()
            .map(|t| TableEntry {
                name: t.name.clone(),
                file: t.file_name(),
                columns: t.columns.clone(),
            })
            .collect(),
        fitted_slopes: report.fitted_slopes.clone(),
        summary: report.summary.clone(),
        fit: report.fit.clone(),
    };
    io::write_json(&dir.join(REPORT_FILE), &file)
}

pub fn read_report(dir: &Path) -> Result<StudyReport> {
    let file: ReportFile = io::read_json(&dir.join(REPORT_FILE))?;
    let tables = file
        .tables
        .iter()
        .map(|e| {
            let t = read_table_csv(&dir.join(&e.file), &e.name)?;
            if t.columns != e.columns {
                return Err(SromError::format(dir.join(&e.file), "columns disagree with report.json"));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyReport {
        study_id: file.study_id,
        config: file.config,
        seed: file.seed,
        tables,
        fitted_slopes: file.fitted_slopes,
        summary: file.summary,
        fit: file.fit,
    })
}

/// `RMSE(t_l) = ‖â(t_l) − a(t_l)‖` column by column.
pub fn rmse_curve(predicted: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<f64>> {
    if predicted.shape() != reference.shape() {
        return Err(SromError::DimensionMismatch(format!(
            "prediction {:?} vs reference {:?}",
            predicted.shape(),
            reference.shape()
        )));
    }
    Ok(predicted
        .column_iter()
        .zip(reference.column_iter())
        .map(|(p, r)| (p - r).norm())
        .collect())
}

/// Ordinary least squares on `(ln x, ln y)`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(SromError::InvalidInput("need at least 3 (x, y) pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(SromError::InvalidInput("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(SromError::InvalidInput("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Median, quartiles, whiskers at the most extreme points within 1.5·IQR of
/// the box, and the outliers beyond.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(SromError::InvalidInput("no finite values".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile_sorted(&sorted, 25.0);
    let median = percentile_sorted(&sorted, 50.0);
    let q3 = percentile_sorted(&sorted, 75.0);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || sorted.iter().copied().filter(|v| *v >= lo && *v <= hi);
    Ok(BoxplotStats {
        median,
        q1,
        q3,
        whisker_low: inside().fold(f64::INFINITY, f64::min),
        whisker_high: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: sorted.iter().copied().filter(|v| *v < lo || *v > hi).collect(),
    })
}

/// Median in which non-finite entries (blowups) rank above every finite value.
pub fn median_with_blowups(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.iter().map(|v| if v.is_finite() { *v } else { f64::INFINITY }).collect();
    if sorted.is_empty() {
        return f64::NAN;
    }
    sorted.sort_by(f64::total_cmp);
    let pos = 0.5 * (sorted.len() - 1) as f64;
    let (lo, hi) = (sorted[pos.floor() as usize], sorted[pos.ceil() as usize]);
    if hi.is_infinite() {
        f64::INFINITY
    } else {
        0.5 * (lo + hi)
    }
}

/// `⌊10^(1 + 2j/9)⌋` up to `M̄/2`, closed with the `M̄/2` endpoint.
pub fn m_ladder(m_bar: usize) -> Result<Vec<usize>> {
    let top = m_bar / 2;
    let mut ladder: Vec<usize> = (0..)
        .map(|j| 10f64.powf(1.0 + 2.0 * j as f64 / 9.0).floor() as usize)
        .take_while(|&m| m <= top)
        .collect();
    if ladder.last() != Some(&top) && top >= 10 {
        ladder.push(top);
    }
    if ladder.len() < 3 {
        return Err(SromError::InvalidInput(format!(
            "{m_bar} trajectories are too few for a convergence ladder"
        )));
    }
    Ok(ladder)
}

pub fn fem_for(cfg: &PipelineConfig) -> Result<FemOperators> {
    assemble_fem_operators(cfg.physics.n_elements)
}

/// Training trajectories `0..data.n_trajectories` of the configured seed.
pub fn training_dataset(cfg: &PipelineConfig) -> Result<Vec<SnapshotMatrix>> {
    let fem = fem_for(cfg)?;
    generate_dataset(
        &cfg.initial_condition,
        &cfg.fom_settings(),
        &fem,
        cfg.data.n_trajectories,
        cfg.data.seed,
    )
}

/// Held-out FOM runs over the prediction horizon from the test stream.
pub fn test_dataset(cfg: &PipelineConfig, n: usize) -> Result<Vec<SnapshotMatrix>> {
    let fem = fem_for(cfg)?;
    generate_stream(
        &cfg.initial_condition,
        &cfg.horizon_settings(),
        &fem,
        cfg.data.seed,
        Stream::TestIc,
        0..n,
    )
}

fn check_training(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<()> {
    let n_x = cfg.physics.n_elements + 1;
    if train.is_empty() {
        return Err(SromError::InvalidInput("empty training set".into()));
    }
    if let Some(bad) = train.iter().position(|y| y.n_x() != n_x || (y.dt - cfg.physics.dt).abs() > 1e-12) {
        return Err(SromError::Incompatible(format!(
            "training trajectory {bad} does not match the configured mesh or time step"
        )));
    }
    Ok(())
}

/// A fitted S-ROM with its G-ROM baseline.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub basis: PodBasis,
    pub ops: GalerkinOperators,
    pub fit: ClosureFit,
    pub srom: SromModel,
    pub grom: SromModel,
    pub gap: usize,
}

pub fn project_all(train: &[SnapshotMatrix], basis: &PodBasis, gap: usize) -> Result<Vec<CoefficientTrajectory>> {
    train.par_iter().map(|y| project_trajectory(y, basis, gap)).collect()
}

/// Fits the closure on `train` projected onto the first `r` modes of `full_basis`.
pub fn train_model(
    cfg: &PipelineConfig,
    train: &[SnapshotMatrix],
    full_basis: &PodBasis,
    r: usize,
    gap: usize,
    regularization: Regularization,
) -> Result<TrainedModel> {
    let fem = fem_for(cfg)?;
    let basis = full_basis.truncate(r)?;
    let ops = assemble_galerkin(&basis, cfg.physics.nu, &fem)?;
    let coeffs = project_all(train, &basis, gap)?;
    let fit = fit_closure(&coeffs, &ops, regularization)?;
    let delta = gap as f64 * cfg.physics.dt;
    let provenance = Provenance {
        nu: cfg.physics.nu,
        n_trajectories: train.len(),
        gap,
        seed: cfg.data.seed,
        t_start: 0.0,
        t_end: cfg.physics.t_final,
    };
    let fingerprint = basis.fingerprint();
    let srom = SromModel::new(delta, ops.clone(), fit.params.clone(), fingerprint.clone(), provenance.clone())?;
    let grom = SromModel::galerkin_only(delta, ops.clone(), fingerprint, provenance)?;
    Ok(TrainedModel {
        basis,
        ops,
        fit,
        srom,
        grom,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `RMSE(t_l)` over the horizon; `None` on blowup.
    pub rmse: Option<Vec<f64>>,
}

impl Prediction {
    /// Time-averaged RMSE, NaN on blowup.
    pub fn mean(&self) -> f64 {
        match &self.rmse {
            Some(v) => v.iter().sum::<f64>() / v.len() as f64,
            None => f64::NAN,
        }
    }
}

/// Deterministic prediction from the r-mode projection of each test initial
/// condition, scored against the projected FOM.
pub fn predict(model: &SromModel, basis: &PodBasis, tests: &[SnapshotMatrix], gap: usize) -> Result<Vec<Prediction>> {
    tests
        .par_iter()
        .map(|y| {
            let reference = project_trajectory(y, basis, gap)?;
            let n = reference.n_t() - 1;
            let traj = simulate_deterministic(model, reference.state(0), n)?;
            if !traj.is_valid() {
                return Ok(Prediction { rmse: None });
            }
            Ok(Prediction {
                rmse: Some(rmse_curve(&traj.values, &reference.values)?),
            })
        })
        .collect()
}

pub fn pod_convergence_study(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<StudyReport> {
    check_training(cfg, train)?;
    let fem = fem_for(cfg)?;
    let r = cfg.reduction.r;
    let ladder = m_ladder(train.len())?;
    let reference = ensemble_pod(train, r)?;
    let mut report = StudyReport::new("pod-convergence", cfg);

    let mut cols = vec![Column { name: "M".into(), unit: "trajectories".into() }];
    cols.extend((1..=r).map(|j| Column { name: format!("mode_error_{j}"), unit: "L2".into() }));
    cols.extend((1..=r).map(|j| Column { name: format!("eigenvalue_error_{j}"), unit: "energy".into() }));
    let mut errors = Table::with_columns("pod_errors", cols);
    let rungs: Vec<_> = ladder
        .par_iter()
        .map(|&m| {
            let aligned = align_basis(&ensemble_pod(&train[..m], r)?, &reference)?;
            pod_errors(&aligned, &reference, &fem)
        })
        .collect::<Result<_>>()?;
    for (&m, e) in ladder.iter().zip(&rungs) {
        let mut row = vec![m as f64];
        row.extend(&e.mode_l2);
        row.extend(&e.eigenvalue_abs);
        errors.push(row);
    }
    let xs: Vec<f64> = ladder.iter().map(|&m| m as f64).collect();
    for j in 1..=r {
        for (prefix, key) in [("mode_error", "mode"), ("eigenvalue_error", "eigenvalue")] {
            let ys = errors.column(&format!("{prefix}_{j}")).unwrap();
            if let Ok(fit) = fit_loglog_slope(&xs, &ys) {
                report.fitted_slopes.insert(format!("{key}_{j}"), fit);
            }
        }
    }

    let mut eig = Table::new("eigenvalues", &[("j", "-"), ("eigenvalue", "energy")]);
    for (j, v) in reference.eigenvalues.iter().enumerate() {
        eig.push(vec![(j + 1) as f64, *v]);
    }
    let mut capture = Table::new("energy_capture", &[("trajectory", "-"), ("fraction", "-")]);
    let fractions: Vec<f64> = train
        .par_iter()
        .map(|y| energy_capture(y, &reference).map(|c| c.fraction))
        .collect::<Result<_>>()?;
    for (m, f) in fractions.iter().enumerate() {
        capture.push(vec![m as f64, *f]);
    }
    report.set("m_bar", train.len() as f64);
    report.set("min_energy_capture", fractions.iter().copied().fold(f64::INFINITY, f64::min));
    report.set("mean_energy_capture", fractions.iter().sum::<f64>() / fractions.len() as f64);
    let total: f64 = reference.eigenvalues.iter().sum();
    report.set("eigenvalue_energy_fraction", reference.eigenvalues[..r].iter().sum::<f64>() / total);
    report.tables = vec![errors, eig, capture];
    Ok(report)
}

pub fn estimator_convergence_study(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<StudyReport> {
    check_training(cfg, train)?;
    let fem = fem_for(cfg)?;
    let (r, gap) = (cfg.reduction.r, cfg.reduction.gap);
    let reg = cfg.study.estimator_regularization;
    let ladder = m_ladder(train.len())?;
    // one basis from all trajectories for every estimator
    let basis = ensemble_pod(train, r)?;
    let ops = assemble_galerkin(&basis, cfg.physics.nu, &fem)?;
    let coeffs = project_all(train, &basis, gap)?;
    let reference = fit_closure(&coeffs, &ops, reg)?;
    let mut report = StudyReport::new("estimator-convergence", cfg);

    let mut errors = Table::new(
        "estimator_errors",
        &[
            ("M", "trajectories"),
            ("a_tilde_error", "1/time"),
            ("b_tilde_error", "1/(time·coef)"),
            ("sigma_error", "coef/sqrt(time)"),
            ("sigma_norm", "coef/sqrt(time)"),
            ("lambda", "-"),
        ],
    );
    let fits: Vec<ClosureFit> = ladder
        .par_iter()
        .map(|&m| fit_closure(&coeffs[..m], &ops, reg))
        .collect::<Result<_>>()?;
    for (&m, fit) in ladder.iter().zip(&fits) {
        let (ea, eb, es) = estimator_errors(&fit.params, &reference.params)?;
        let norm = fit.params.sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        errors.push(vec![m as f64, ea, eb, es, norm, fit.params.lambda_used]);
    }
    let xs: Vec<f64> = ladder.iter().map(|&m| m as f64).collect();
    for (col, key) in [("a_tilde_error", "a_tilde"), ("b_tilde_error", "b_tilde"), ("sigma_error", "sigma")] {
        if let Ok(fit) = fit_loglog_slope(&xs, &errors.column(col).unwrap()) {
            report.fitted_slopes.insert(key.into(), fit);
        }
    }

    let n_single = cfg.study.n_single.min(train.len());
    let mut cols = vec![
        Column { name: "trajectory".into(), unit: "-".into() },
        Column { name: "sigma_norm".into(), unit: "coef/sqrt(time)".into() },
        Column { name: "fit_loss".into(), unit: "coef²/time²".into() },
    ];
    cols.extend((1..=r).map(|k| Column { name: format!("a_tilde_{k}{k}"), unit: "1/time".into() }));
    let mut singles = Table::with_columns("single_trajectory", cols);
    let single_fits: Vec<ClosureFit> = (0..n_single)
        .into_par_iter()
        .map(|m| fit_closure(&coeffs[m..m + 1], &ops, reg))
        .collect::<Result<_>>()?;
    for (m, fit) in single_fits.iter().enumerate() {
        let norm = fit.params.sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        let mut row = vec![m as f64, norm, fit.params.fit_loss];
        row.extend((0..r).map(|k| fit.params.a_tilde[(k, k)]));
        singles.push(row);
    }
    let top_sigma = *errors.column("sigma_norm").unwrap().last().unwrap();
    let max_single = singles.column("sigma_norm").unwrap().into_iter().fold(0.0, f64::max);
    report.set("sigma_norm_largest_rung", top_sigma);
    report.set("sigma_norm_single_max", max_single);
    report.set("sigma_ratio", top_sigma / max_single);
    report.tables = vec![errors, singles];
    report.fit = Some(reference.report);
    Ok(report)
}

fn a_tilde_table(model: &SromModel) -> Table {
    let r = model.r;
    let mut cols = vec![Column { name: "i".into(), unit: "-".into() }];
    cols.extend((1..=r).map(|j| Column { name: format!("a_tilde_{j}"), unit: "1/time".into() }));
    let mut t = Table::with_columns("a_tilde", cols);
    for i in 0..r {
        let mut row = vec![(i + 1) as f64];
        row.extend(model.closure.a_tilde.row(i).iter());
        t.push(row);
    }
    t
}

fn lcurve_table(fit: &FitReport) -> Option<Table> {
    let curve = fit.lcurve.as_ref()?;
    let mut t = Table::new(
        "lcurve",
        &[("lambda", "-"), ("residual", "coef²/time²"), ("norm", "-"), ("curvature", "-")],
    );
    for i in 0..curve.lambdas.len() {
        t.push(vec![
            curve.lambdas[i],
            curve.residuals[i],
            curve.norms[i],
            curve.curvature[i].unwrap_or(f64::NAN),
        ]);
    }
    Some(t)
}

fn boxplot_row(id: f64, values: &[f64]) -> Vec<f64> {
    let n_blowup = values.iter().filter(|v| !v.is_finite()).count() as f64;
    match boxplot_stats(values) {
        Ok(b) => vec![
            id,
            b.median,
            b.q1,
            b.q3,
            b.whisker_low,
            b.whisker_high,
            b.outliers.len() as f64,
            n_blowup,
        ],
        Err(_) => vec![id, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, 0.0, n_blowup],
    }
}

fn quantiles_over(curves: &[&Vec<f64>], l: usize) -> (f64, f64, f64) {
    let mut v: Vec<f64> = curves.iter().map(|c| c[l]).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    (percentile_sorted(&v, 25.0), percentile_sorted(&v, 50.0), percentile_sorted(&v, 75.0))
}

pub fn prediction_study(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<StudyReport> {
    check_training(cfg, train)?;
    let full = ensemble_pod(train, cfg.reduction.r)?;
    let model = train_model(cfg, train, &full, cfg.reduction.r, cfg.reduction.gap, cfg.regression)?;
    let tests = test_dataset(cfg, cfg.study.n_test)?;
    prediction_report(cfg, &model.srom, &model.basis, &tests, Some(&model.fit.report))
}

/// Prediction tables of `model` against its own Galerkin part on `tests`.
pub fn prediction_report(
    cfg: &PipelineConfig,
    model: &SromModel,
    basis: &PodBasis,
    tests: &[SnapshotMatrix],
    fit: Option<&FitReport>,
) -> Result<StudyReport> {
    if basis.fingerprint() != model.basis_fingerprint {
        return Err(SromError::Incompatible("model was fitted on a different basis".into()));
    }
    let gap = model.provenance.gap;
    let grom_model = SromModel::galerkin_only(
        model.delta,
        model.galerkin.clone(),
        model.basis_fingerprint.clone(),
        model.provenance.clone(),
    )?;
    let srom = predict(model, basis, tests, gap)?;
    let grom = predict(&grom_model, basis, tests, gap)?;
    let mut report = StudyReport::new("prediction", cfg);

    let mut per_traj = Table::new(
        "rmse_per_trajectory",
        &[
            ("test", "-"),
            ("srom_mean_rmse", "coef"),
            ("grom_mean_rmse", "coef"),
            ("srom_blowup", "-"),
            ("grom_blowup", "-"),
        ],
    );
    for (i, (s, g)) in srom.iter().zip(&grom).enumerate() {
        per_traj.push(vec![
            i as f64,
            s.mean(),
            g.mean(),
            s.rmse.is_none() as u8 as f64,
            g.rmse.is_none() as u8 as f64,
        ]);
    }
    let s_means: Vec<f64> = srom.iter().map(Prediction::mean).collect();
    let g_means: Vec<f64> = grom.iter().map(Prediction::mean).collect();

    let mut boxes = Table::new(
        "boxplot",
        &[
            ("model", "0=srom,1=grom"),
            ("median", "coef"),
            ("q1", "coef"),
            ("q3", "coef"),
            ("whisker_low", "coef"),
            ("whisker_high", "coef"),
            ("n_outliers", "-"),
            ("n_blowup", "-"),
        ],
    );
    boxes.push(boxplot_row(0.0, &s_means));
    boxes.push(boxplot_row(1.0, &g_means));

    let mut curves = Table::new(
        "rmse_time",
        &[
            ("t", "time"),
            ("srom_q1", "coef"),
            ("srom_median", "coef"),
            ("srom_q3", "coef"),
            ("grom_q1", "coef"),
            ("grom_median", "coef"),
            ("grom_q3", "coef"),
        ],
    );
    let s_valid: Vec<&Vec<f64>> = srom.iter().filter_map(|p| p.rmse.as_ref()).collect();
    let g_valid: Vec<&Vec<f64>> = grom.iter().filter_map(|p| p.rmse.as_ref()).collect();
    let n_t = s_valid.first().or(g_valid.first()).map_or(0, |c| c.len());
    for l in 0..n_t {
        let (sq1, sm, sq3) = quantiles_over(&s_valid, l);
        let (gq1, gm, gq3) = quantiles_over(&g_valid, l);
        curves.push(vec![l as f64 * model.delta, sq1, sm, sq3, gq1, gm, gq3]);
    }

    let ms = median_with_blowups(&s_means);
    let mg = median_with_blowups(&g_means);
    report.set("median_rmse_srom", ms);
    report.set("median_rmse_grom", mg);
    report.set("median_ratio", ms / mg);
    report.set("n_blowup_srom", s_means.iter().filter(|v| !v.is_finite()).count() as f64);
    report.set("n_blowup_grom", g_means.iter().filter(|v| !v.is_finite()).count() as f64);
    report.set("lambda_used", model.closure.lambda_used);
    let mut tables = vec![per_traj, boxes, curves, a_tilde_table(model)];
    tables.extend(fit.and_then(lcurve_table));
    report.tables = tables;
    report.fit = fit.cloned();
    Ok(report)
}

pub fn ensemble_study(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<StudyReport> {
    check_training(cfg, train)?;
    let full = ensemble_pod(train, cfg.reduction.r)?;
    let model = train_model(cfg, train, &full, cfg.reduction.r, cfg.reduction.gap, cfg.regression)?;
    let s = &cfg.study;
    let tests = test_dataset(cfg, s.ensemble_repetitions)?;
    let levels = &s.percentile_levels;
    let r = model.ops.r;

    let runs: Vec<_> = tests
        .iter()
        .enumerate()
        .map(|(q, y)| {
            let reference = project_trajectory(y, &model.basis, model.gap)?;
            let n = reference.n_t() - 1;
            let noise_seed = sub_seed(cfg.data.seed, Stream::EnsembleNoise, q as u64);
            let ens = simulate_ensemble(&model.srom, reference.state(0), n, s.ensemble_size, noise_seed, levels)?;
            let det = simulate_deterministic(&model.srom, reference.state(0), n)?;
            let ens_rmse = match &ens.mean {
                Some(mean) => rmse_curve(mean, &reference.values)?.iter().sum::<f64>() / (n + 1) as f64,
                None => f64::NAN,
            };
            let det_rmse = if det.is_valid() {
                rmse_curve(&det.values, &reference.values)?.iter().sum::<f64>() / (n + 1) as f64
            } else {
                f64::NAN
            };
            Ok((reference, ens, ens_rmse, det_rmse))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = StudyReport::new("ensemble", cfg);
    let mut reps = Table::new(
        "repetitions",
        &[
            ("repetition", "-"),
            ("ensemble_mean_rmse", "coef"),
            ("deterministic_rmse", "coef"),
            ("n_invalid", "members"),
        ],
    );
    for (q, (_, ens, e, d)) in runs.iter().enumerate() {
        reps.push(vec![q as f64, *e, *d, ens.n_invalid as f64]);
    }

    // bands of the first repetition
    let (reference, ens, _, _) = &runs[0];
    let mut cols = vec![Column { name: "t".into(), unit: "time".into() }];
    for k in 1..=r {
        cols.push(Column { name: format!("fom_{k}"), unit: "coef".into() });
        cols.push(Column { name: format!("mean_{k}"), unit: "coef".into() });
        for q in levels {
            cols.push(Column { name: format!("p{q}_{k}"), unit: "coef".into() });
        }
    }
    let mut bands = Table::with_columns("bands", cols);
    let mut nested = true;
    let mut width0: f64 = 0.0;
    if let Some(mean) = &ens.mean {
        for l in 0..mean.ncols() {
            let mut row = vec![l as f64 * model.srom.delta];
            for k in 0..r {
                row.push(reference.values[(k, l)]);
                row.push(mean[(k, l)]);
                for (i, band) in ens.percentiles.iter().enumerate() {
                    row.push(band[(k, l)]);
                    if i > 0 && ens.percentiles[i - 1][(k, l)] > band[(k, l)] {
                        nested = false;
                    }
                }
                if let (Some(lo), Some(hi)) = (ens.percentiles.first(), ens.percentiles.last()) {
                    if l == 0 {
                        width0 = width0.max(hi[(k, 0)] - lo[(k, 0)]);
                    }
                }
            }
            bands.push(row);
        }
    }
    let e: Vec<f64> = runs.iter().map(|x| x.2).collect();
    let d: Vec<f64> = runs.iter().map(|x| x.3).collect();
    let me = median_with_blowups(&e);
    let md = median_with_blowups(&d);
    report.set("median_ensemble_mean_rmse", me);
    report.set("median_deterministic_rmse", md);
    report.set("median_ratio", me / md);
    report.set("band_width_t0", width0);
    report.set("bands_nested", if nested { 1.0 } else { 0.0 });
    report.set("n_invalid_members", runs.iter().map(|x| x.1.n_invalid).sum::<usize>() as f64);
    report.tables = vec![reps, bands];
    report.fit = Some(model.fit.report.clone());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub r: usize,
    pub gap: usize,
    /// Joint time-and-trajectory average of RMSE; NaN marks a blowup or failed fit.
    pub mean_rmse: f64,
    pub n_blowup: usize,
    pub fit_failed: bool,
    pub lambda: f64,
}

pub fn spacetime_sweep(cfg: &PipelineConfig, train: &[SnapshotMatrix]) -> Result<StudyReport> {
    check_training(cfg, train)?;
    let s = &cfg.study;
    let r_max = s.sweep_r.iter().copied().max().unwrap_or(cfg.reduction.r);
    let full = ensemble_pod(train, r_max)?;
    let tests = test_dataset(cfg, s.n_sweep)?;
    let grid: Vec<(usize, usize)> = s
        .sweep_r
        .iter()
        .flat_map(|&r| s.sweep_gaps.iter().map(move |&g| (r, g)))
        .collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(r, gap)| sweep_cell(cfg, train, &full, &tests, r, gap))
        .collect::<Result<_>>()?;

    let mut report = StudyReport::new("sweep", cfg);
    let mut table = Table::new(
        "sweep",
        &[
            ("r", "modes"),
            ("gap", "steps"),
            ("mean_rmse", "coef"),
            ("n_blowup", "trajectories"),
            ("fit_failed", "-"),
            ("lambda", "-"),
        ],
    );
    for c in &cells {
        table.push(vec![
            c.r as f64,
            c.gap as f64,
            c.mean_rmse,
            c.n_blowup as f64,
            c.fit_failed as u8 as f64,
            c.lambda,
        ]);
    }
    for &r in &s.sweep_r {
        let mut row: Vec<&SweepCell> = cells.iter().filter(|c| c.r == r).collect();
        row.sort_by_key(|c| c.gap);
        report.set(format!("max_stable_gap_r{r}"), max_stable_gap(&row) as f64);
        if let Some(best) = row
            .iter()
            .filter(|c| c.mean_rmse.is_finite())
            .min_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse))
        {
            report.set(format!("argmin_gap_r{r}"), best.gap as f64);
        }
    }
    report.tables = vec![table];
    Ok(report)
}

/// Largest gap whose cell and every smaller gap's cell are stable (0 if none).
pub fn max_stable_gap(sorted_row: &[&SweepCell]) -> usize {
    sorted_row
        .iter()
        .take_while(|c| c.mean_rmse.is_finite())
        .last()
        .map_or(0, |c| c.gap)
}

fn sweep_cell(
    cfg: &PipelineConfig,
    train: &[SnapshotMatrix],
    full: &PodBasis,
    tests: &[SnapshotMatrix],
    r: usize,
    gap: usize,
) -> Result<SweepCell> {
    let model = match train_model(cfg, train, full, r, gap, cfg.regression) {
        Ok(m) => m,
        Err(SromError::IllPosed(_) | SromError::Mesh(_)) => {
            return Ok(SweepCell {
                r,
                gap,
                mean_rmse: f64::NAN,
                n_blowup: 0,
                fit_failed: true,
                lambda: f64::NAN,
            })
        }
        Err(e) => return Err(e),
    };
    let preds = predict(&model.srom, &model.basis, tests, gap)?;
    let n_blowup = preds.iter().filter(|p| p.rmse.is_none()).count();
    let mean_rmse = if n_blowup > 0 {
        f64::NAN
    } else {
        let (sum, count) = preds
            .iter()
            .flat_map(|p| p.rmse.as_ref().unwrap())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        sum / count as f64
    };
    Ok(SweepCell {
        r,
        gap,
        mean_rmse,
        n_blowup,
        fit_failed: false,
        lambda: model.fit.params.lambda_used,
    })
}
