//! Multi-trajectory least-squares inference of the quadratic closure
//! `Ã a + aᵀ B̃ a` and the diagonal noise amplitude `Σ`.
//!
//! Feature layout for a state `a ∈ R^r` (length `r + r(r+1)/2`):
//!
//! ```text
//! ψ = (a_1, …, a_r, a_1a_1, a_2a_1, a_2a_2, a_3a_1, …, a_ra_r)
//! ```
//!
//! i.e. the linear terms followed by `a_i a_i'` for `i' ≤ i` in lexicographic
//! order of `(i, i')`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};
use crate::galerkin::{quadratic_term, GalerkinOperators};
use crate::pod::CoefficientTrajectory;

pub fn n_features(r: usize) -> usize {
    r + r * (r + 1) / 2
}

/// Row of the quadratic monomial `a_i a_i'` (`i' ≤ i`) in the feature vector.
pub fn quadratic_index(r: usize, i: usize, i_prime: usize) -> usize {
    debug_assert!(i_prime <= i);
    r + i * (i + 1) / 2 + i_prime
}

pub fn compute_features(a: &[f64]) -> Vec<f64> {
    let r = a.len();
    let mut psi = Vec::with_capacity(n_features(r));
    psi.extend_from_slice(a);
    for i in 0..r {
        for ip in 0..=i {
            psi.push(a[i] * a[ip]);
        }
    }
    psi
}

/// `F(t_l) = (a(t_{l+1}) − a(t_l))/δ − (A a + aᵀ B a)(t_l)`, one column per step.
pub fn compute_residual_targets(
    traj: &CoefficientTrajectory,
    ops: &GalerkinOperators,
) -> Result<DMatrix<f64>> {
    if traj.r() != ops.r {
        return Err(SromError::DimensionMismatch(format!(
            "trajectory has {} modes, operators have {}",
            traj.r(),
            ops.r
        )));
    }
    if traj.n_t() < 2 || !(traj.delta > 0.0) {
        return Err(SromError::InvalidInput(
            "need at least two samples and a positive time step".into(),
        ));
    }
    let r = traj.r();
    let mut f = DMatrix::zeros(r, traj.n_t() - 1);
    for l in 0..traj.n_t() - 1 {
        let now = traj.state(l);
        let next = traj.state(l + 1);
        let drift = ops.drift(now);
        for k in 0..r {
            f[(k, l)] = (next[k] - now[k]) / traj.delta - drift[k];
        }
    }
    Ok(f)
}

/// Averaged normal equations `A_M c = b_M` of the closure regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub r: usize,
    pub delta: f64,
    /// `n_r × n_r`
    pub normal: DMatrix<f64>,
    /// `n_r × r`
    pub rhs: DMatrix<f64>,
    /// Mean of `F_k²` with the same per-trajectory weighting as `normal`.
    pub mean_sq_target: Vec<f64>,
    pub n_samples: usize,
    pub n_trajectories: usize,
}

impl RegressionSystem {
    pub fn n_features(&self) -> usize {
        self.normal.nrows()
    }
}

struct Partial {
    normal: DMatrix<f64>,
    rhs: DMatrix<f64>,
    mean_sq: Vec<f64>,
    n_samples: usize,
}

impl Partial {
    fn add(mut self, other: Partial) -> Partial {
        self.normal += other.normal;
        self.rhs += other.rhs;
        for (a, b) in self.mean_sq.iter_mut().zip(other.mean_sq) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        self
    }
}

/// Feature matrix `Ψ` (`n_r × (n_t − 1)`) over the steps with a successor.
fn feature_matrix(traj: &CoefficientTrajectory) -> DMatrix<f64> {
    let n = traj.n_t() - 1;
    let nr = n_features(traj.r());
    let mut psi = DMatrix::zeros(nr, n);
    for l in 0..n {
        psi.column_mut(l).copy_from_slice(&compute_features(traj.state(l)));
    }
    psi
}

fn trajectory_partial(traj: &CoefficientTrajectory, ops: &GalerkinOperators) -> Result<Partial> {
    let f = compute_residual_targets(traj, ops)?;
    let psi = feature_matrix(traj);
    let n = f.ncols() as f64;
    let normal = (&psi * psi.transpose()) / n;
    let rhs = (&psi * f.transpose()) / n;
    let mean_sq = f.row_iter().map(|row| row.norm_squared() / n).collect();
    Ok(Partial {
        normal,
        rhs,
        mean_sq,
        n_samples: f.ncols(),
    })
}

fn reduce(trajs: &[CoefficientTrajectory], ops: &GalerkinOperators) -> Result<Partial> {
    match trajs {
        [single] => trajectory_partial(single, ops),
        _ => {
            let (left, right) = trajs.split_at(trajs.len() / 2);
            let (a, b) = rayon::join(|| reduce(left, ops), || reduce(right, ops));
            Ok(a?.add(b?))
        }
    }
}

pub fn accumulate_system(
    trajectories: &[CoefficientTrajectory],
    ops: &GalerkinOperators,
) -> Result<RegressionSystem> {
    let first = trajectories
        .first()
        .ok_or_else(|| SromError::InvalidInput("no trajectories".into()))?;
    for (m, t) in trajectories.iter().enumerate() {
        if t.r() != first.r() || t.r() != ops.r {
            return Err(SromError::DimensionMismatch(format!(
                "trajectory {m} has {} modes, expected {}",
                t.r(),
                ops.r
            )));
        }
        if (t.delta - first.delta).abs() > 1e-12 * first.delta {
            return Err(SromError::InvalidInput(format!(
                "trajectory {m} has time step {}, expected {}",
                t.delta, first.delta
            )));
        }
    }
    let total = reduce(trajectories, ops)?;
    let m = trajectories.len() as f64;
    Ok(RegressionSystem {
        r: ops.r,
        delta: first.delta,
        normal: total.normal / m,
        rhs: total.rhs / m,
        mean_sq_target: total.mean_sq.into_iter().map(|v| v / m).collect(),
        n_samples: total.n_samples,
        n_trajectories: trajectories.len(),
    })
}

/// Eigen-decomposition of the normal matrix with `rhs` rotated into its basis.
#[derive(Debug, Clone)]
pub struct SpectralSystem {
    /// Non-negative eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// `Vᵀ b_M`
    pub beta: DMatrix<f64>,
    pub mean_sq_total: f64,
}

impl SpectralSystem {
    pub fn new(system: &RegressionSystem) -> Result<Self> {
        let sym = (&system.normal + system.normal.transpose()) * 0.5;
        if sym.iter().any(|v| !v.is_finite()) {
            return Err(SromError::IllPosed("normal matrix is not finite".into()));
        }
        let eig = SymmetricEigen::new(sym);
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-10 * max.max(f64::MIN_POSITIVE) {
            return Err(SromError::IllPosed(format!(
                "normal matrix is indefinite (eigenvalue {min:.3e}, max {max:.3e})"
            )));
        }
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let eigenvectors = DMatrix::from_fn(n, n, |row, col| eig.eigenvectors[(row, order[col])]);
        let beta = eigenvectors.transpose() * &system.rhs;
        Ok(Self {
            eigenvalues,
            eigenvectors,
            beta,
            mean_sq_total: system.mean_sq_target.iter().sum(),
        })
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Eigenvalues at or below this are treated as zero by the pseudo-inverse.
    pub fn cutoff(&self) -> f64 {
        self.eigenvalues.len() as f64 * f64::EPSILON * self.max_eigenvalue()
    }

    pub fn condition_number(&self) -> f64 {
        let min = self.eigenvalues.first().copied().unwrap_or(0.0);
        if min > 0.0 {
            self.max_eigenvalue() / min
        } else {
            f64::INFINITY
        }
    }

    fn filter(&self, s: f64, lambda: f64) -> f64 {
        if lambda > 0.0 {
            1.0 / (s + lambda)
        } else if s > self.cutoff() {
            1.0 / s
        } else {
            0.0
        }
    }

    /// `(A_M + λI)⁻¹ b_M`, minimum-norm for `λ = 0`.
    pub fn solve(&self, lambda: f64) -> DMatrix<f64> {
        let mut scaled = self.beta.clone();
        for (i, &s) in self.eigenvalues.iter().enumerate() {
            let w = self.filter(s, lambda);
            scaled.row_mut(i).scale_mut(w);
        }
        &self.eigenvectors * scaled
    }

    /// Frobenius norm of `c_λ`.
    pub fn solution_norm(&self, lambda: f64) -> f64 {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let w = self.filter(s, lambda);
                self.beta.row(i).norm_squared() * w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Unregularised data-space mean squared residual.
    pub fn min_residual(&self) -> f64 {
        let cut = self.cutoff();
        let explained: f64 = self
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > cut)
            .map(|(i, &s)| self.beta.row(i).norm_squared() / s)
            .sum();
        (self.mean_sq_total - explained).max(0.0)
    }

    /// Data-space mean squared residual `ρ(λ) = mean ‖F − ψᵀ c_λ‖²`, written
    /// as the unregularised minimum plus non-negative increments in `λ`.
    pub fn residual(&self, lambda: f64) -> f64 {
        let cut = self.cutoff();
        let mut rho = self.min_residual();
        if lambda <= 0.0 {
            return rho;
        }
        for (i, &s) in self.eigenvalues.iter().enumerate() {
            let beta2 = self.beta.row(i).norm_squared();
            if s > cut {
                rho += beta2 * lambda * lambda / (s * (s + lambda) * (s + lambda));
            } else {
                rho += s * beta2 / ((s + lambda) * (s + lambda)) - 2.0 * beta2 / (s + lambda);
            }
        }
        rho
    }
}

/// Solves `(A_M + λI) c = b_M`; the pseudo-inverse is used when `λ = 0` and
/// `A_M` is singular.
pub fn tikhonov_solve(system: &RegressionSystem, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(SromError::InvalidInput(format!("invalid λ {lambda}")));
    }
    let n = system.n_features();
    let mut shifted = (&system.normal + system.normal.transpose()) * 0.5;
    for i in 0..n {
        shifted[(i, i)] += lambda;
    }
    if let Some(chol) = shifted.cholesky() {
        let l = chol.l_dirty();
        let min_pivot = (0..n).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        let max_pivot = (0..n).map(|i| l[(i, i)]).fold(0.0, f64::max);
        // pivots squared approximate the spectrum; defer to the pseudo-inverse
        // once the matrix is numerically singular
        if min_pivot * min_pivot > n as f64 * f64::EPSILON * max_pivot * max_pivot {
            return Ok(chol.solve(&system.rhs));
        }
    }
    Ok(SpectralSystem::new(system)?.solve(lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionFlag {
    /// Maximum curvature on the mesh.
    Curvature,
    /// Normal matrix spectrum too narrow to build a mesh; the lower bound is returned.
    FlatSpectrum,
    /// `b_M = 0`: nothing to fit, `λ = 0` returned.
    ZeroRhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LCurve {
    pub lambdas: Vec<f64>,
    pub residuals: Vec<f64>,
    pub norms: Vec<f64>,
    /// Curvature at interior mesh points; `None` at the two ends.
    pub curvature: Vec<Option<f64>>,
    pub selected: f64,
    pub selected_index: usize,
    pub flag: SelectionFlag,
}

/// Lower end of the mesh relative to the largest eigenvalue.
pub const LCURVE_FLOOR: f64 = 1e-14;
pub const DEFAULT_MESH: usize = 100;

/// Picks the Tikhonov parameter maximising the curvature of
/// `(log ρ(λ), log ‖c_λ‖)` on a logarithmic mesh spanning the spectrum of `A_M`.
pub fn lcurve_select(system: &RegressionSystem, n_mesh: usize) -> Result<LCurve> {
    let spectral = SpectralSystem::new(system)?;
    lcurve_from_spectral(&spectral, n_mesh)
}

pub fn lcurve_from_spectral(spectral: &SpectralSystem, n_mesh: usize) -> Result<LCurve> {
    if n_mesh < 3 {
        return Err(SromError::Mesh(format!("need at least 3 mesh points, got {n_mesh}")));
    }
    let hi = spectral.max_eigenvalue();
    if !(hi > 0.0) {
        return Err(SromError::Mesh("normal matrix has no positive eigenvalue".into()));
    }
    if spectral.beta.iter().all(|&v| v == 0.0) {
        return Ok(LCurve {
            lambdas: vec![],
            residuals: vec![],
            norms: vec![],
            curvature: vec![],
            selected: 0.0,
            selected_index: 0,
            flag: SelectionFlag::ZeroRhs,
        });
    }
    let lo = spectral.eigenvalues[0].max(LCURVE_FLOOR * hi);
    if hi <= lo * (1.0 + 1e-9) {
        return Ok(LCurve {
            lambdas: vec![lo],
            residuals: vec![spectral.residual(lo)],
            norms: vec![spectral.solution_norm(lo)],
            curvature: vec![None],
            selected: lo,
            selected_index: 0,
            flag: SelectionFlag::FlatSpectrum,
        });
    }
    let (log_lo, log_hi) = (lo.ln(), hi.ln());
    let step = (log_hi - log_lo) / (n_mesh - 1) as f64;
    let lambdas: Vec<f64> = (0..n_mesh)
        .map(|i| {
            if i == n_mesh - 1 {
                hi
            } else {
                (log_lo + step * i as f64).exp()
            }
        })
        .collect();
    let residuals: Vec<f64> = lambdas.iter().map(|&l| spectral.residual(l)).collect();
    let norms: Vec<f64> = lambdas.iter().map(|&l| spectral.solution_norm(l)).collect();
    let xs: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|n| n.ln()).collect();

    let mut curvature = vec![None; n_mesh];
    let mut best: Option<(usize, f64)> = None;
    for i in 1..n_mesh - 1 {
        let pts = [xs[i - 1], xs[i], xs[i + 1], ys[i - 1], ys[i], ys[i + 1]];
        if pts.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let dx = (xs[i + 1] - xs[i - 1]) / (2.0 * step);
        let dy = (ys[i + 1] - ys[i - 1]) / (2.0 * step);
        let ddx = (xs[i + 1] - 2.0 * xs[i] + xs[i - 1]) / (step * step);
        let ddy = (ys[i + 1] - 2.0 * ys[i] + ys[i - 1]) / (step * step);
        let speed = (dx * dx + dy * dy).powf(1.5);
        if !(speed > 0.0) {
            continue;
        }
        let kappa = (dx * ddy - ddx * dy) / speed;
        if !kappa.is_finite() {
            continue;
        }
        curvature[i] = Some(kappa);
        if best.is_none_or(|(_, k)| kappa > k) {
            best = Some((i, kappa));
        }
    }
    let usable = curvature.iter().filter(|c| c.is_some()).count();
    let (index, _) = best
        .filter(|_| usable >= 1)
        .ok_or_else(|| SromError::Mesh("fewer than 3 usable mesh points".into()))?;
    Ok(LCurve {
        selected: lambdas[index],
        selected_index: index,
        lambdas,
        residuals,
        norms,
        curvature,
        flag: SelectionFlag::Curvature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Regularization {
    None,
    Fixed { lambda: f64 },
    Lcurve { n_mesh: usize },
}

/// Learned closure `Ã a + aᵀ B̃ a` and noise amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureParameters {
    /// Acts on the state: `(Ã a)_k = Σ_i Ã[(k, i)] a_i`.
    pub a_tilde: DMatrix<f64>,
    /// `b_tilde[k]` is the symmetric slice `B̃[:, :, k]`.
    pub b_tilde: Vec<DMatrix<f64>>,
    pub sigma: Vec<f64>,
    pub lambda_used: f64,
    pub fit_loss: f64,
}

impl ClosureParameters {
    pub fn zeros(r: usize) -> Self {
        Self {
            a_tilde: DMatrix::zeros(r, r),
            b_tilde: vec![DMatrix::zeros(r, r); r],
            sigma: vec![0.0; r],
            lambda_used: 0.0,
            fit_loss: 0.0,
        }
    }

    pub fn r(&self) -> usize {
        self.a_tilde.nrows()
    }
}

/// Splits the coefficient matrix `c` (`n_r × r`) into `Ã` and symmetric `B̃` slices.
pub fn unpack_coefficients(c: &DMatrix<f64>, r: usize) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let a_tilde = DMatrix::from_fn(r, r, |k, i| c[(i, k)]);
    let b_tilde = (0..r)
        .map(|k| {
            let mut slice = DMatrix::zeros(r, r);
            for i in 0..r {
                for ip in 0..=i {
                    let v = c[(quadratic_index(r, i, ip), k)];
                    if i == ip {
                        slice[(i, i)] = v;
                    } else {
                        slice[(i, ip)] = 0.5 * v;
                        slice[(ip, i)] = 0.5 * v;
                    }
                }
            }
            slice
        })
        .collect();
    (a_tilde, b_tilde)
}

pub fn pack_coefficients(a_tilde: &DMatrix<f64>, b_tilde: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r = a_tilde.nrows();
    let mut c = DMatrix::zeros(n_features(r), r);
    for k in 0..r {
        for i in 0..r {
            c[(i, k)] = a_tilde[(k, i)];
            for ip in 0..=i {
                let s = &b_tilde[k];
                c[(quadratic_index(r, i, ip), k)] = if i == ip {
                    s[(i, i)]
                } else {
                    s[(i, ip)] + s[(ip, i)]
                };
            }
        }
    }
    c
}

/// Per-component mean squared residual of `F ≈ ψᵀ c` over the data, with the
/// per-trajectory weighting of the normal equations.
pub fn data_residuals(
    trajectories: &[CoefficientTrajectory],
    ops: &GalerkinOperators,
    c: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let r = ops.r;
    let per_traj: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| {
            let f = compute_residual_targets(t, ops)?;
            let psi = feature_matrix(t);
            let pred = c.transpose() * psi;
            let n = f.ncols() as f64;
            Ok((0..r)
                .map(|k| (f.row(k) - pred.row(k)).norm_squared() / n)
                .collect())
        })
        .collect::<Result<_>>()?;
    let m = trajectories.len() as f64;
    Ok((0..r)
        .map(|k| per_traj.iter().map(|v| v[k]).sum::<f64>() / m)
        .collect())
}

/// Diagnostic noise estimate from the normal-equation residual `‖A_M c_k − b_k‖`.
pub fn normal_equation_sigma(system: &RegressionSystem, c: &DMatrix<f64>) -> Vec<f64> {
    let res = &system.normal * c - &system.rhs;
    res.column_iter().map(|col| col.norm()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub regularization: Regularization,
    pub lambda_used: f64,
    pub fit_loss: f64,
    pub sigma: Vec<f64>,
    pub condition_number: Option<f64>,
    pub n_samples: usize,
    pub n_trajectories: usize,
    pub lcurve: Option<LCurve>,
}

#[derive(Debug, Clone)]
pub struct ClosureFit {
    pub params: ClosureParameters,
    pub coefficients: DMatrix<f64>,
    pub system: RegressionSystem,
    pub report: FitReport,
}

pub fn fit_closure(
    trajectories: &[CoefficientTrajectory],
    ops: &GalerkinOperators,
    regularization: Regularization,
) -> Result<ClosureFit> {
    let system = accumulate_system(trajectories, ops)?;
    fit_system(system, trajectories, ops, regularization)
}

/// Fit from an already accumulated system (the trajectories are used for the
/// noise estimate only).
pub fn fit_system(
    system: RegressionSystem,
    trajectories: &[CoefficientTrajectory],
    ops: &GalerkinOperators,
    regularization: Regularization,
) -> Result<ClosureFit> {
    let spectral = SpectralSystem::new(&system)?;
    let (lambda, lcurve) = match regularization {
        Regularization::None => (0.0, None),
        Regularization::Fixed { lambda } => (lambda, None),
        Regularization::Lcurve { n_mesh } => {
            let curve = lcurve_from_spectral(&spectral, n_mesh)?;
            (curve.selected, Some(curve))
        }
    };
    let c = tikhonov_solve(&system, lambda)?;
    let residuals = data_residuals(trajectories, ops, &c)?;
    let sigma: Vec<f64> = residuals.iter().map(|v| (system.delta * v).sqrt()).collect();
    let fit_loss = residuals.iter().sum();
    let (a_tilde, b_tilde) = unpack_coefficients(&c, system.r);
    let params = ClosureParameters {
        a_tilde,
        b_tilde,
        sigma: sigma.clone(),
        lambda_used: lambda,
        fit_loss,
    };
    let cond = spectral.condition_number();
    let report = FitReport {
        regularization,
        lambda_used: lambda,
        fit_loss,
        sigma,
        condition_number: cond.is_finite().then_some(cond),
        n_samples: system.n_samples,
        n_trajectories: system.n_trajectories,
        lcurve,
    };
    Ok(ClosureFit {
        params,
        coefficients: c,
        system,
        report,
    })
}

/// Normalised Frobenius errors `(‖ΔÃ‖, ‖ΔB̃‖, ‖ΔΣ‖)`.
pub fn estimator_errors(fit: &ClosureParameters, reference: &ClosureParameters) -> Result<(f64, f64, f64)> {
    let r = fit.r();
    if reference.r() != r {
        return Err(SromError::DimensionMismatch(format!(
            "closure has {r} modes, reference has {}",
            reference.r()
        )));
    }
    let rf = r as f64;
    let ea = (&fit.a_tilde - &reference.a_tilde).norm_squared() / (rf * rf);
    let mut eb = 0.0;
    for k in 0..r {
        for i in 0..r {
            for ip in i..r {
                let d = fit.b_tilde[k][(i, ip)] - reference.b_tilde[k][(i, ip)];
                eb += d * d;
            }
        }
    }
    eb *= 2.0 / (rf * rf * (rf + 1.0));
    let es = fit
        .sigma
        .iter()
        .zip(&reference.sigma)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rf;
    Ok((ea.sqrt(), eb.sqrt(), es.sqrt()))
}

/// Closure contribution `Ã a + aᵀ B̃ a`.
pub fn closure_term(params: &ClosureParameters, a: &[f64]) -> Vec<f64> {
    let lin = &params.a_tilde * nalgebra::DVector::from_column_slice(a);
    let quad = quadratic_term(&params.b_tilde, a);
    lin.iter().zip(quad).map(|(l, q)| l + q).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn traj_from(states: &[Vec<f64>], delta: f64) -> CoefficientTrajectory {
        let r = states[0].len();
        let mut values = DMatrix::zeros(r, states.len());
        for (l, s) in states.iter().enumerate() {
            values.column_mut(l).copy_from_slice(s);
        }
        CoefficientTrajectory {
            values,
            delta,
            gap: 1,
            t0: 0.0,
        }
    }

    fn system_from(normal: DMatrix<f64>, rhs: DMatrix<f64>, mean_sq: Vec<f64>) -> RegressionSystem {
        RegressionSystem {
            r: rhs.ncols(),
            delta: 0.1,
            normal,
            rhs,
            mean_sq_target: mean_sq,
            n_samples: 10,
            n_trajectories: 1,
        }
    }

    #[test]
    fn feature_layout() {
        assert_eq!(compute_features(&[0.0, 0.0]), vec![0.0; 5]);
        assert_eq!(compute_features(&[2.0, 3.0]), vec![2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(n_features(10), 65);
        assert_eq!(compute_features(&[1.0; 10]).len(), 65);
    }

    #[test]
    fn targets_vanish_on_explicit_euler_grom() {
        let mut ops = GalerkinOperators::zeros(2, 0.01);
        ops.a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.0, -1.0]);
        ops.b[0] = DMatrix::from_row_slice(2, 2, &[0.2, -0.1, -0.1, 0.3]);
        ops.b[1] = DMatrix::from_row_slice(2, 2, &[-0.3, 0.05, 0.05, 0.1]);
        let delta = 0.05;
        let mut states = vec![vec![1.0, -0.5]];
        for _ in 0..10 {
            let a = states.last().unwrap().clone();
            let d = ops.drift(&a);
            states.push(a.iter().zip(d).map(|(x, v)| x + delta * v).collect());
        }
        let f = compute_residual_targets(&traj_from(&states, delta), &ops).unwrap();
        assert!(f.amax() < 1e-12);

        let constant = traj_from(&vec![vec![0.7, 0.2]; 3], delta);
        let f = compute_residual_targets(&constant, &ops).unwrap();
        let d = ops.drift(&[0.7, 0.2]);
        for l in 0..2 {
            assert!((f[(0, l)] + d[0]).abs() < 1e-14);
            assert!((f[(1, l)] + d[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_trajectory_gives_zero_system() {
        let ops = GalerkinOperators::zeros(2, 0.01);
        let sys = accumulate_system(&[traj_from(&vec![vec![0.0; 2]; 4], 0.1)], &ops).unwrap();
        assert!(sys.normal.iter().all(|&v| v == 0.0));
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_trajectories_average_out() {
        let ops = GalerkinOperators::zeros(2, 0.01);
        let t = traj_from(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![0.2, 0.3]], 0.1);
        let one = accumulate_system(std::slice::from_ref(&t), &ops).unwrap();
        let two = accumulate_system(&[t.clone(), t], &ops).unwrap();
        assert!((one.normal - two.normal).amax() < 1e-15);
        assert!((one.rhs - two.rhs).amax() < 1e-15);
    }

    #[test]
    fn small_system_matches_dense_least_squares() {
        // r = 2, n_t = 3: two samples with successors
        let mut ops = GalerkinOperators::zeros(2, 0.01);
        ops.a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.3, -2.0]);
        let states = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![0.2, 0.3]];
        let delta = 0.1;
        let sys = accumulate_system(&[traj_from(&states, delta)], &ops).unwrap();
        // brute-force normal equations from the explicit sample list
        let mut design = DMatrix::zeros(2, 5);
        let mut targets = DMatrix::zeros(2, 2);
        for l in 0..2 {
            let a = &states[l];
            let row = [a[0], a[1], a[0] * a[0], a[1] * a[0], a[1] * a[1]];
            for j in 0..5 {
                design[(l, j)] = row[j];
            }
            for k in 0..2 {
                let lin: f64 = (0..2).map(|i| ops.a[(k, i)] * a[i]).sum();
                targets[(l, k)] = (states[l + 1][k] - a[k]) / delta - lin;
            }
        }
        let normal = design.transpose() * &design / 2.0;
        let rhs = design.transpose() * &targets / 2.0;
        assert!((sys.normal - normal).amax() < 1e-12);
        assert!((sys.rhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn mixed_time_steps_rejected() {
        let ops = GalerkinOperators::zeros(1, 0.01);
        let a = traj_from(&[vec![1.0], vec![0.5]], 0.1);
        let b = traj_from(&[vec![1.0], vec![0.5]], 0.2);
        assert!(accumulate_system(&[a, b], &ops).is_err());
    }

    #[test]
    fn tikhonov_closed_forms() {
        let rhs = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let sys = system_from(DMatrix::identity(3, 3), rhs.clone(), vec![10.0]);
        for lambda in [0.0, 0.5, 3.0] {
            let c = tikhonov_solve(&sys, lambda).unwrap();
            assert!((c - &rhs / (1.0 + lambda)).amax() < 1e-14);
        }
        let zero = system_from(DMatrix::identity(3, 3), DMatrix::zeros(3, 1), vec![0.0]);
        assert!(tikhonov_solve(&zero, 2.0).unwrap().iter().all(|&v| v == 0.0));

        let big = 1e6;
        let c = tikhonov_solve(&sys, big).unwrap();
        assert!(c.norm() <= rhs.norm() / big);
    }

    #[test]
    fn singular_system_uses_pseudo_inverse() {
        let normal = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let rhs = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let c = tikhonov_solve(&system_from(normal, rhs, vec![5.0]), 0.0).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12 && (c[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_system_is_rejected() {
        let normal = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let sys = system_from(normal, DMatrix::zeros(2, 1), vec![0.0]);
        assert!(matches!(SpectralSystem::new(&sys), Err(SromError::IllPosed(_))));
    }

    #[test]
    fn lcurve_identity_is_flat() {
        let rhs = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let sys = system_from(DMatrix::identity(2, 2), rhs, vec![3.0]);
        let curve = lcurve_select(&sys, 100).unwrap();
        assert_eq!(curve.flag, SelectionFlag::FlatSpectrum);
        assert!(curve.selected <= curve.lambdas[0]);
        // closed form: c = b/(1+λ), ρ = m − 2|b|²/(1+λ) + |b|²/(1+λ)²
        let rho = 3.0 - 4.0 / 2.0 + 2.0 / 4.0;
        assert!((curve.residuals[0] - rho).abs() < 1e-14);
    }

    #[test]
    fn lcurve_zero_rhs_is_degenerate() {
        let sys = system_from(DMatrix::identity(2, 2) * 2.0, DMatrix::zeros(2, 1), vec![1.0]);
        let curve = lcurve_select(&sys, 50).unwrap();
        assert_eq!(curve.flag, SelectionFlag::ZeroRhs);
        assert_eq!(curve.selected, 0.0);
        assert!(lcurve_select(&sys, 2).is_err());
    }

    fn random_problem(seed: u64, n_feat: usize, n_samp: usize, r: usize) -> RegressionSystem {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // geometrically graded columns make the system ill-conditioned
        let design = DMatrix::from_fn(n_samp, n_feat, |_, j| {
            rng.random_range(-1.0..1.0) * 10f64.powf(-(j as f64) * 0.7)
        });
        let targets = DMatrix::from_fn(n_samp, r, |_, _| rng.random_range(-1.0..1.0));
        let n = n_samp as f64;
        RegressionSystem {
            r,
            delta: 0.1,
            normal: design.transpose() * &design / n,
            rhs: design.transpose() * &targets / n,
            mean_sq_target: targets.column_iter().map(|c| c.norm_squared() / n).collect(),
            n_samples: n_samp,
            n_trajectories: 1,
        }
    }

    #[test]
    fn lcurve_residual_matches_direct_evaluation() {
        let sys = random_problem(3, 6, 40, 2);
        let spectral = SpectralSystem::new(&sys).unwrap();
        for lambda in [1e-6, 1e-3, 0.1] {
            let c = spectral.solve(lambda);
            let direct = spectral.mean_sq_total - 2.0 * (c.transpose() * &sys.rhs).trace()
                + (c.transpose() * &sys.normal * &c).trace();
            assert!((spectral.residual(lambda) - direct).abs() < 1e-10 * direct.max(1e-3));
            assert!((spectral.solution_norm(lambda) - c.norm()).abs() < 1e-10 * c.norm());
        }
    }

    #[test]
    fn lcurve_picks_interior_corner_on_ill_conditioned_problem() {
        let sys = random_problem(5, 8, 60, 1);
        let curve = lcurve_select(&sys, 100).unwrap();
        assert_eq!(curve.flag, SelectionFlag::Curvature);
        assert!(curve.selected >= curve.lambdas[0] && curve.selected <= *curve.lambdas.last().unwrap());
    }

    proptest! {
        #[test]
        fn tikhonov_monotonicity(seed in 0u64..200) {
            let sys = random_problem(seed, 6, 30, 2);
            let curve = lcurve_select(&sys, 40).unwrap();
            for w in curve.norms.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            for w in curve.residuals.windows(2) {
                prop_assert!(w[1] >= w[0] * (1.0 - 1e-12));
            }
        }

        #[test]
        fn pack_unpack_roundtrip(values in prop::collection::vec(-5.0f64..5.0, 27), a in prop::collection::vec(-2.0f64..2.0, 3)) {
            let r = 3;
            let c = DMatrix::from_column_slice(9, 3, &values);
            let (at, bt) = unpack_coefficients(&c, r);
            for s in &bt {
                prop_assert!((s - s.transpose()).amax() == 0.0);
            }
            let back = pack_coefficients(&at, &bt);
            prop_assert!((&back - &c).amax() < 1e-12);
            let params = ClosureParameters { a_tilde: at, b_tilde: bt, sigma: vec![0.0; 3], lambda_used: 0.0, fit_loss: 0.0 };
            let via_slices = closure_term(&params, &a);
            let psi = DMatrix::from_column_slice(9, 1, &compute_features(&a));
            let via_monomials = c.transpose() * psi;
            for k in 0..3 {
                prop_assert!((via_slices[k] - via_monomials[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimator_error_of_single_entry() {
        let r = 4;
        let a = ClosureParameters::zeros(r);
        let mut b = a.clone();
        assert_eq!(estimator_errors(&a, &b).unwrap(), (0.0, 0.0, 0.0));
        b.a_tilde[(2, 1)] = 0.3;
        let (ea, eb, es) = estimator_errors(&b, &a).unwrap();
        assert!((ea - 0.3 / r as f64).abs() < 1e-15);
        assert_eq!((eb, es), (0.0, 0.0));
        assert!(estimator_errors(&a, &ClosureParameters::zeros(3)).is_err());
    }

    #[test]
    fn zero_targets_give_zero_closure() {
        let mut ops = GalerkinOperators::zeros(2, 0.01);
        ops.a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, -1.0]);
        ops.b[0] = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0]);
        ops.b[1] = DMatrix::from_row_slice(2, 2, &[-0.3, 0.0, 0.0, 0.0]);
        let delta = 0.05;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let trajs: Vec<_> = (0..5)
            .map(|_| {
                let mut states = vec![vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]];
                for _ in 0..8 {
                    let a = states.last().unwrap().clone();
                    let d = ops.drift(&a);
                    states.push(a.iter().zip(d).map(|(x, v)| x + delta * v).collect());
                }
                traj_from(&states, delta)
            })
            .collect();
        let fit = fit_closure(&trajs, &ops, Regularization::None).unwrap();
        assert!(fit.params.a_tilde.amax() < 1e-9);
        assert!(fit.params.b_tilde.iter().all(|s| s.amax() < 1e-9));
        assert!(fit.params.sigma.iter().all(|&s| s < 1e-6));
    }
}
