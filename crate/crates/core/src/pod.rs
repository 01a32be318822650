//! Ensemble proper orthogonal decomposition.
//!
//! Modes are eigenvectors of the trajectory-averaged covariance
//! `K̄ = (1/M) Σ_m Y_m Y_mᵀ / N_t`, orthonormal in the Euclidean inner
//! product on nodal values.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SromError};
use crate::fem::{FemOperators, SnapshotMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerProduct {
    Euclidean,
}

impl InnerProduct {
    pub fn tag(self) -> u8 {
        match self {
            InnerProduct::Euclidean => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(InnerProduct::Euclidean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// `N_x × r`, columns are the modes.
    pub modes: DMatrix<f64>,
    /// All `N_x` covariance eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    pub n_trajectories: usize,
    pub inner_product: InnerProduct,
}

impl PodBasis {
    pub fn n_x(&self) -> usize {
        self.modes.nrows()
    }

    pub fn r(&self) -> usize {
        self.modes.ncols()
    }

    pub fn mode(&self, j: usize) -> &[f64] {
        let n = self.n_x();
        &self.modes.as_slice()[j * n..(j + 1) * n]
    }

    /// Keeps the leading `r` modes.
    pub fn truncate(&self, r: usize) -> Result<PodBasis> {
        if r == 0 || r > self.r() {
            return Err(SromError::InvalidInput(format!(
                "cannot truncate {} modes to {r}",
                self.r()
            )));
        }
        Ok(PodBasis {
            modes: self.modes.columns(0, r).into_owned(),
            eigenvalues: self.eigenvalues.clone(),
            n_trajectories: self.n_trajectories,
            inner_product: self.inner_product,
        })
    }

    /// SHA-256 over the mode and eigenvalue bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n_x() as u64).to_le_bytes());
        hasher.update((self.r() as u64).to_le_bytes());
        for v in self.modes.iter().chain(self.eigenvalues.iter()) {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// `Σ_m Y_m Y_mᵀ / N_t` over `data`, summed by a fixed midpoint-split tree so
/// that the result does not depend on the thread schedule.
fn covariance_sum(data: &[SnapshotMatrix]) -> DMatrix<f64> {
    match data {
        [single] => {
            let y = &single.values;
            (y * y.transpose()) / single.n_t() as f64
        }
        _ => {
            let (left, right) = data.split_at(data.len() / 2);
            let (a, b) = rayon::join(|| covariance_sum(left), || covariance_sum(right));
            a + b
        }
    }
}

/// Averaged covariance `K̄_M` of a dataset.
pub fn averaged_covariance(dataset: &[SnapshotMatrix]) -> Result<DMatrix<f64>> {
    let first = dataset
        .first()
        .ok_or_else(|| SromError::InvalidInput("empty dataset".into()))?;
    let n_x = first.n_x();
    if let Some(bad) = dataset.iter().position(|y| y.n_x() != n_x) {
        return Err(SromError::DimensionMismatch(format!(
            "trajectory {bad} has {} rows, expected {n_x}",
            dataset[bad].n_x()
        )));
    }
    Ok(covariance_sum(dataset) / dataset.len() as f64)
}

/// Flips `v` so that its entry of largest magnitude (first one on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn ensemble_pod(dataset: &[SnapshotMatrix], r: usize) -> Result<PodBasis> {
    let k = averaged_covariance(dataset)?;
    let n_x = k.nrows();
    if r == 0 || r > n_x {
        return Err(SromError::InvalidInput(format!(
            "requested {r} modes from a {n_x}-dimensional space"
        )));
    }
    let eig = SymmetricEigen::new(k);
    let mut order: Vec<usize> = (0..n_x).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut modes = DMatrix::zeros(n_x, r);
    for (j, &src) in order.iter().take(r).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        canonical_sign(&mut v);
        modes.column_mut(j).copy_from_slice(&v);
    }
    Ok(PodBasis {
        modes,
        eigenvalues,
        n_trajectories: dataset.len(),
        inner_product: InnerProduct::Euclidean,
    })
}

/// A basis whose mode signs have been matched to a reference basis.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBasis {
    pub basis: PodBasis,
    pub reference_fingerprint: String,
}

pub fn align_basis(basis: &PodBasis, reference: &PodBasis) -> Result<AlignedBasis> {
    if basis.n_x() != reference.n_x() || basis.r() != reference.r() {
        return Err(SromError::DimensionMismatch(format!(
            "basis {}x{} vs reference {}x{}",
            basis.n_x(),
            basis.r(),
            reference.n_x(),
            reference.r()
        )));
    }
    let mut aligned = basis.clone();
    for j in 0..basis.r() {
        let dot: f64 = basis.mode(j).iter().zip(reference.mode(j)).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            aligned.modes.column_mut(j).neg_mut();
        }
    }
    Ok(AlignedBasis {
        basis: aligned,
        reference_fingerprint: reference.fingerprint(),
    })
}

/// Reduced coefficients `a_i(t_l)` sampled every `gap` full-order steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTrajectory {
    /// `r × n_t`
    pub values: DMatrix<f64>,
    pub delta: f64,
    pub gap: usize,
    pub t0: f64,
}

impl CoefficientTrajectory {
    pub fn r(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.values.ncols()
    }

    pub fn state(&self, l: usize) -> &[f64] {
        let r = self.r();
        &self.values.as_slice()[l * r..(l + 1) * r]
    }
}

pub fn project_trajectory(
    y: &SnapshotMatrix,
    basis: &PodBasis,
    gap: usize,
) -> Result<CoefficientTrajectory> {
    if y.n_x() != basis.n_x() {
        return Err(SromError::DimensionMismatch(format!(
            "snapshot has {} rows, basis has {}",
            y.n_x(),
            basis.n_x()
        )));
    }
    if y.n_t() < 2 {
        return Err(SromError::InvalidInput("need at least two snapshots".into()));
    }
    if gap == 0 || gap > y.n_t() - 1 {
        return Err(SromError::InvalidInput(format!(
            "gap {gap} outside 1..={}",
            y.n_t() - 1
        )));
    }
    let n_t = (y.n_t() - 1) / gap + 1;
    let mut values = DMatrix::zeros(basis.r(), n_t);
    for l in 0..n_t {
        let col = y.column(l * gap);
        for i in 0..basis.r() {
            values[(i, l)] = basis.mode(i).iter().zip(col).map(|(a, b)| a * b).sum();
        }
    }
    Ok(CoefficientTrajectory {
        values,
        delta: gap as f64 * y.dt,
        gap,
        t0: y.t0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCapture {
    pub fraction: f64,
    /// Set when the trajectory has zero energy; the fraction is then 1 by convention.
    pub zero_energy: bool,
}

pub fn energy_capture(y: &SnapshotMatrix, basis: &PodBasis) -> Result<EnergyCapture> {
    if y.n_x() != basis.n_x() {
        return Err(SromError::DimensionMismatch(format!(
            "snapshot has {} rows, basis has {}",
            y.n_x(),
            basis.n_x()
        )));
    }
    let total = y.values.norm_squared();
    if total == 0.0 {
        return Ok(EnergyCapture {
            fraction: 1.0,
            zero_energy: true,
        });
    }
    let coeffs = basis.modes.transpose() * &y.values;
    Ok(EnergyCapture {
        fraction: coeffs.norm_squared() / total,
        zero_energy: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodErrors {
    /// `‖φ_j^M − φ_j^ref‖` in `L²(0,1)` per mode.
    pub mode_l2: Vec<f64>,
    /// `|λ_j^M − λ_j^ref|` per retained mode.
    pub eigenvalue_abs: Vec<f64>,
}

pub fn pod_errors(
    aligned: &AlignedBasis,
    reference: &PodBasis,
    fem: &FemOperators,
) -> Result<PodErrors> {
    if aligned.reference_fingerprint != reference.fingerprint() {
        return Err(SromError::InvalidInput(
            "basis was not aligned against this reference".into(),
        ));
    }
    let basis = &aligned.basis;
    if basis.n_x() != fem.n_nodes() {
        return Err(SromError::DimensionMismatch(format!(
            "basis has {} nodes, mesh has {}",
            basis.n_x(),
            fem.n_nodes()
        )));
    }
    let mode_l2 = (0..basis.r())
        .map(|j| {
            let diff: Vec<f64> = basis
                .mode(j)
                .iter()
                .zip(reference.mode(j))
                .map(|(a, b)| a - b)
                .collect();
            fem.mass_norm(&diff)
        })
        .collect();
    let eigenvalue_abs = (0..basis.r())
        .map(|j| (basis.eigenvalues[j] - reference.eigenvalues[j]).abs())
        .collect();
    Ok(PodErrors {
        mode_l2,
        eigenvalue_abs,
    })
}
