//! Piecewise-linear finite elements and implicit Euler time stepping for the
//! viscous Burgers equation `u_t = ν u_xx − u u_x` on (0, 1) with homogeneous
//! Dirichlet boundary values.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};
use crate::seed::{stream_rng, Stream};

/// Absolute max-norm tolerance on the Newton residual.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Symmetric tridiagonal matrix stored by its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if i + 1 == j {
                self.off[i]
            } else if j + 1 == i {
                self.off[j]
            } else {
                0.0
            }
        })
    }
}

/// Mass and stiffness matrices of interior hat functions on a uniform mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FemOperators {
    pub n_elements: usize,
    pub h: f64,
    pub mass: SymTridiagonal,
    pub stiffness: SymTridiagonal,
}

impl FemOperators {
    /// Number of grid nodes including both boundaries.
    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn n_interior(&self) -> usize {
        self.n_elements - 1
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|j| j as f64 * self.h).collect()
    }

    /// `L²(0,1)` inner product of two nodal vectors (full length, boundaries
    /// included) interpreted as piecewise-linear functions.
    pub fn l2_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let h = self.h;
        u.windows(2)
            .zip(v.windows(2))
            .map(|(a, b)| h / 6.0 * (2.0 * a[0] * b[0] + a[0] * b[1] + a[1] * b[0] + 2.0 * a[1] * b[1]))
            .sum()
    }

    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.l2_inner(u, u).max(0.0).sqrt()
    }

    /// Mass-matrix norm of the interior part of a full nodal vector.
    pub fn mass_norm(&self, u: &[f64]) -> f64 {
        let interior = &u[1..u.len() - 1];
        self.mass.quad_form(interior).max(0.0).sqrt()
    }
}

/// Assembles the exact linear-element mass `h/6·tridiag(1,4,1)` and stiffness
/// `1/h·tridiag(−1,2,−1)` over the interior nodes.
pub fn assemble_fem_operators(n_elements: usize) -> Result<FemOperators> {
    if n_elements < 2 {
        return Err(SromError::InvalidMesh(format!(
            "need at least 2 elements, got {n_elements}"
        )));
    }
    let h = 1.0 / n_elements as f64;
    let n = n_elements - 1;
    let mass = SymTridiagonal {
        diag: vec![4.0 * h / 6.0; n],
        off: vec![h / 6.0; n.saturating_sub(1)],
    };
    let stiffness = SymTridiagonal {
        diag: vec![2.0 / h; n],
        off: vec![-1.0 / h; n.saturating_sub(1)],
    };
    Ok(FemOperators {
        n_elements,
        h,
        mass,
        stiffness,
    })
}

/// Random initial condition `u0(x) = Σ_{k=1..K} (w_k / k) sin(πkx)` with
/// `w_k ~ N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditionSpec {
    pub n_terms: usize,
    pub mean: f64,
    pub std: f64,
}

impl Default for InitialConditionSpec {
    fn default() -> Self {
        Self {
            n_terms: 50,
            mean: 0.5,
            std: 0.2,
        }
    }
}

impl InitialConditionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_terms == 0 {
            return Err(SromError::InvalidInput("n_terms must be >= 1".into()));
        }
        if !(self.std >= 0.0) || !self.std.is_finite() || !self.mean.is_finite() {
            return Err(SromError::InvalidInput(
                "initial-condition mean must be finite and std >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Nodal interpolant of `Σ_k (w_k / k) sin(πkx)`; endpoints are exactly zero.
pub fn initial_condition_from_weights(weights: &[f64], fem: &FemOperators) -> Vec<f64> {
    let n = fem.n_nodes();
    let mut u = vec![0.0; n];
    for (j, uj) in u.iter_mut().enumerate().take(n - 1).skip(1) {
        let x = j as f64 * fem.h;
        *uj = weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let k = (k + 1) as f64;
                w / k * (std::f64::consts::PI * k * x).sin()
            })
            .sum();
    }
    u
}

pub fn sample_initial_condition<R: Rng + ?Sized>(
    spec: &InitialConditionSpec,
    fem: &FemOperators,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let weights: Vec<f64> = (0..spec.n_terms)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spec.mean + spec.std * z
        })
        .collect();
    Ok(initial_condition_from_weights(&weights, fem))
}

/// Full-order solution of one trajectory on the space–time grid.
///
/// Rows are grid nodes (both boundaries included), columns are time instances
/// `t0 + l·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub values: DMatrix<f64>,
    pub dt: f64,
    pub t0: f64,
}

impl SnapshotMatrix {
    pub fn n_x(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, l: usize) -> &[f64] {
        let n = self.n_x();
        &self.values.as_slice()[l * n..(l + 1) * n]
    }

    pub fn time(&self, l: usize) -> f64 {
        self.t0 + l as f64 * self.dt
    }
}

/// Physical and temporal settings of a full-order run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FomSettings {
    pub nu: f64,
    pub dt: f64,
    pub t_final: f64,
}

impl FomSettings {
    /// Number of time steps; rejects a horizon that is not a whole number of steps.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.nu > 0.0) || !(self.dt > 0.0) || !(self.t_final > 0.0) {
            return Err(SromError::InvalidInput(
                "viscosity, time step and horizon must be positive".into(),
            ));
        }
        let ratio = self.t_final / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) || n < 1.0 {
            return Err(SromError::InvalidInput(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.t_final, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// Exact element-wise convection load `N_i = ∫ u_h (u_h)_x φ_i dx`
/// for interior node `i` (full-vector indexing).
#[inline]
fn convection(u: &[f64], i: usize) -> f64 {
    (u[i + 1] - u[i - 1]) * (u[i + 1] + u[i] + u[i - 1]) / 6.0
}

/// Solves a general tridiagonal system by Gaussian elimination with partial
/// pivoting (the LAPACK `gtsv` scheme), overwriting `rhs` with the solution.
/// `sub[i]` couples row `i+1` to column `i`; `sup[i]` couples row `i` to column `i+1`.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> bool {
    let n = diag.len();
    if n == 0 {
        return true;
    }
    let mut d = diag.to_vec();
    let mut du = sup.to_vec();
    // dl[i] is reused as the second superdiagonal of row i after a swap
    let mut dl = sub.to_vec();
    for i in 0..n - 1 {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                return false;
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            rhs[i + 1] -= fact * rhs[i];
            dl[i] = 0.0;
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if i + 1 < n - 1 {
                dl[i] = du[i + 1];
                du[i + 1] = -fact * dl[i];
            } else {
                dl[i] = 0.0;
            }
            du[i] = temp;
            let b = rhs[i];
            rhs[i] = rhs[i + 1];
            rhs[i + 1] = b - fact * rhs[i + 1];
        }
    }
    if d[n - 1] == 0.0 {
        return false;
    }
    rhs[n - 1] /= d[n - 1];
    if n > 1 {
        rhs[n - 2] = (rhs[n - 2] - du[n - 2] * rhs[n - 1]) / d[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        rhs[i] = (rhs[i] - du[i] * rhs[i + 1] - dl[i] * rhs[i + 2]) / d[i];
    }
    true
}

/// One implicit Euler step solved by Newton's method. `prev` and the returned
/// vector are full nodal vectors with zero boundary entries.
fn implicit_step(prev: &[f64], nu: f64, dt: f64, fem: &FemOperators, step: usize) -> Result<Vec<f64>> {
    let n = fem.n_interior();
    let m_d = fem.mass.diag[0] / dt;
    let m_o = fem.mass.off.first().copied().unwrap_or(0.0) / dt;
    let s_d = nu * fem.stiffness.diag[0];
    let s_o = nu * fem.stiffness.off.first().copied().unwrap_or(0.0);

    let mut u = prev.to_vec();
    let mut residual = vec![0.0; n];
    let mut sub = vec![0.0; n.saturating_sub(1)];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n.saturating_sub(1)];
    let mut last_norm = f64::INFINITY;

    for _ in 0..NEWTON_MAX_ITER {
        let mut norm: f64 = 0.0;
        for r in 0..n {
            let i = r + 1;
            let du_l = u[i - 1] - prev[i - 1];
            let du_c = u[i] - prev[i];
            let du_r = u[i + 1] - prev[i + 1];
            let mass_term = m_o * du_l + m_d * du_c + m_o * du_r;
            let diff_term = s_o * u[i - 1] + s_d * u[i] + s_o * u[i + 1];
            residual[r] = mass_term + diff_term + convection(&u, i);
            norm = norm.max(residual[r].abs());
        }
        if !norm.is_finite() {
            return Err(SromError::Blowup { step });
        }
        last_norm = norm;
        if norm <= NEWTON_TOL {
            return Ok(u);
        }
        for r in 0..n {
            let i = r + 1;
            diag[r] = m_d + s_d + (u[i + 1] - u[i - 1]) / 6.0;
            if r > 0 {
                // row r, column r-1
                sub[r - 1] = m_o + s_o - (2.0 * u[i - 1] + u[i]) / 6.0;
            }
            if r + 1 < n {
                sup[r] = m_o + s_o + (2.0 * u[i + 1] + u[i]) / 6.0;
            }
        }
        let mut delta: Vec<f64> = residual.iter().map(|v| -v).collect();
        if !solve_tridiagonal(&sub, &diag, &sup, &mut delta) {
            return Err(SromError::SolverDivergence {
                step,
                residual: norm,
            });
        }
        for r in 0..n {
            u[r + 1] += delta[r];
        }
    }
    Err(SromError::SolverDivergence {
        step,
        residual: last_norm,
    })
}

/// Integrates from `u0` over `[0, t_final]`; column 0 is `u0`.
pub fn solve_fom(u0: &[f64], settings: &FomSettings, fem: &FemOperators) -> Result<SnapshotMatrix> {
    let n_steps = settings.n_steps()?;
    let n_x = fem.n_nodes();
    if u0.len() != n_x {
        return Err(SromError::DimensionMismatch(format!(
            "initial condition has {} entries, mesh has {n_x} nodes",
            u0.len()
        )));
    }
    if u0[0] != 0.0 || u0[n_x - 1] != 0.0 {
        return Err(SromError::InvalidInput(
            "initial condition must vanish at both boundaries".into(),
        ));
    }
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(SromError::Blowup { step: 0 });
    }
    let mut values = DMatrix::zeros(n_x, n_steps + 1);
    values.column_mut(0).copy_from_slice(u0);
    let mut state = u0.to_vec();
    for step in 1..=n_steps {
        state = implicit_step(&state, settings.nu, settings.dt, fem, step)?;
        values.column_mut(step).copy_from_slice(&state);
    }
    Ok(SnapshotMatrix {
        values,
        dt: settings.dt,
        t0: 0.0,
    })
}

/// Samples the initial condition of trajectory `index` in `stream` and solves it.
pub fn simulate_trajectory(
    spec: &InitialConditionSpec,
    settings: &FomSettings,
    fem: &FemOperators,
    seed: u64,
    stream: Stream,
    index: usize,
) -> Result<SnapshotMatrix> {
    let mut rng = stream_rng(seed, stream, index as u64);
    let u0 = sample_initial_condition(spec, fem, &mut rng)?;
    solve_fom(&u0, settings, fem).map_err(|e| SromError::Trajectory {
        trajectory: index,
        source: Box::new(e),
    })
}

/// Training dataset of `n_trajectories` runs; trajectory `m` draws its initial
/// condition from the training sub-stream `(seed, m)`.
pub fn generate_dataset(
    spec: &InitialConditionSpec,
    settings: &FomSettings,
    fem: &FemOperators,
    n_trajectories: usize,
    seed: u64,
) -> Result<Vec<SnapshotMatrix>> {
    generate_stream(spec, settings, fem, seed, Stream::TrainingIc, 0..n_trajectories)
}

/// Runs the trajectories of `indices` from `stream` concurrently, returned in index order.
pub fn generate_stream(
    spec: &InitialConditionSpec,
    settings: &FomSettings,
    fem: &FemOperators,
    seed: u64,
    stream: Stream,
    indices: std::ops::Range<usize>,
) -> Result<Vec<SnapshotMatrix>> {
    if indices.is_empty() {
        return Err(SromError::InvalidInput("need at least one trajectory".into()));
    }
    settings.n_steps()?;
    spec.validate()?;
    indices
        .into_par_iter()
        .map(|m| simulate_trajectory(spec, settings, fem, seed, stream, m))
        .collect()
}
