//! Discrete-time stochastic ROM
//!
//! ```text
//! a⁺ = a + [(A + Ã) a + aᵀ (B + B̃) a] δ + √δ Σ ξ
//! ```
//!
//! simulated exactly as a map (no sub-stepping). The G-ROM baseline is the
//! same map with a zero closure and no noise.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::ClosureParameters;
use crate::error::{Result, SromError};
use crate::fem::SnapshotMatrix;
use crate::galerkin::{quadratic_term, GalerkinOperators};
use crate::pod::PodBasis;
use crate::seed::{stream_rng, Stream};

/// States with a larger Euclidean norm count as blown up.
pub const BLOWUP_NORM: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub nu: f64,
    pub n_trajectories: usize,
    pub gap: usize,
    pub seed: u64,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SromModel {
    pub r: usize,
    pub delta: f64,
    pub galerkin: GalerkinOperators,
    pub closure: ClosureParameters,
    pub basis_fingerprint: String,
    pub provenance: Provenance,
    // A + Ã and B + B̃, cached
    linear: DMatrix<f64>,
    quadratic: Vec<DMatrix<f64>>,
}

impl SromModel {
    pub fn new(
        delta: f64,
        galerkin: GalerkinOperators,
        closure: ClosureParameters,
        basis_fingerprint: String,
        provenance: Provenance,
    ) -> Result<Self> {
        let r = galerkin.r;
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(SromError::InvalidInput(format!("time step must be positive, got {delta}")));
        }
        let shapes_ok = galerkin.a.shape() == (r, r)
            && galerkin.b.len() == r
            && galerkin.b.iter().all(|s| s.shape() == (r, r))
            && closure.a_tilde.shape() == (r, r)
            && closure.b_tilde.len() == r
            && closure.b_tilde.iter().all(|s| s.shape() == (r, r))
            && closure.sigma.len() == r;
        if !shapes_ok {
            return Err(SromError::DimensionMismatch(format!(
                "model components disagree on r = {r}"
            )));
        }
        let linear = &galerkin.a + &closure.a_tilde;
        let quadratic = galerkin
            .b
            .iter()
            .zip(&closure.b_tilde)
            .map(|(b, bt)| b + bt)
            .collect();
        Ok(Self {
            r,
            delta,
            galerkin,
            closure,
            basis_fingerprint,
            provenance,
            linear,
            quadratic,
        })
    }

    /// Model without closure: the explicit-Euler G-ROM.
    pub fn galerkin_only(delta: f64, galerkin: GalerkinOperators, basis_fingerprint: String, provenance: Provenance) -> Result<Self> {
        let closure = ClosureParameters::zeros(galerkin.r);
        Self::new(delta, galerkin, closure, basis_fingerprint, provenance)
    }

    /// Drift `(A + Ã) a + aᵀ (B + B̃) a`.
    pub fn drift(&self, a: &[f64]) -> Vec<f64> {
        let lin = &self.linear * DVector::from_column_slice(a);
        let quad = quadratic_term(&self.quadratic, a);
        lin.iter().zip(quad).map(|(l, q)| l + q).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowupSignal {
    pub norm: f64,
}

fn blown_up(a: &[f64]) -> Option<BlowupSignal> {
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if a.iter().any(|x| !x.is_finite()) || !(norm <= BLOWUP_NORM) {
        Some(BlowupSignal { norm })
    } else {
        None
    }
}

/// One application of the map; `xi = None` is the deterministic mode.
pub fn step(model: &SromModel, a: &[f64], xi: Option<&[f64]>) -> std::result::Result<Vec<f64>, BlowupSignal> {
    let drift = model.drift(a);
    let mut next: Vec<f64> = a.iter().zip(&drift).map(|(x, d)| x + d * model.delta).collect();
    if let Some(xi) = xi {
        let scale = model.delta.sqrt();
        for ((n, s), x) in next.iter_mut().zip(&model.closure.sigma).zip(xi) {
            *n += scale * s * x;
        }
    }
    match blown_up(&next) {
        Some(signal) => Err(signal),
        None => Ok(next),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrajectory {
    /// `r × (completed steps + 1)`; shorter than requested on blowup.
    pub values: DMatrix<f64>,
    pub delta: f64,
    /// Index of the step whose output blew up.
    pub blowup_step: Option<usize>,
}

impl SimulatedTrajectory {
    pub fn is_valid(&self) -> bool {
        self.blowup_step.is_none()
    }
}

fn check_initial(model: &SromModel, a0: &[f64]) -> Result<()> {
    if a0.len() != model.r {
        return Err(SromError::DimensionMismatch(format!(
            "initial state has {} entries, model has r = {}",
            a0.len(),
            model.r
        )));
    }
    if a0.iter().any(|x| !x.is_finite()) {
        return Err(SromError::InvalidInput("initial state is not finite".into()));
    }
    Ok(())
}

fn run(model: &SromModel, a0: &[f64], n_steps: usize, mut noise: impl FnMut(&mut [f64]) -> bool) -> SimulatedTrajectory {
    let r = model.r;
    let mut values = DMatrix::zeros(r, n_steps + 1);
    values.column_mut(0).copy_from_slice(a0);
    let mut state = a0.to_vec();
    let mut xi = vec![0.0; r];
    for l in 0..n_steps {
        let stochastic = noise(&mut xi);
        match step(model, &state, stochastic.then_some(xi.as_slice())) {
            Ok(next) => {
                values.column_mut(l + 1).copy_from_slice(&next);
                state = next;
            }
            Err(_) => {
                return SimulatedTrajectory {
                    values: values.columns(0, l + 1).into_owned(),
                    delta: model.delta,
                    blowup_step: Some(l + 1),
                };
            }
        }
    }
    SimulatedTrajectory {
        values,
        delta: model.delta,
        blowup_step: None,
    }
}

pub fn simulate_deterministic(model: &SromModel, a0: &[f64], n_steps: usize) -> Result<SimulatedTrajectory> {
    check_initial(model, a0)?;
    Ok(run(model, a0, n_steps, |_| false))
}

/// One noisy member driven by sub-stream `(seed, index)`.
pub fn simulate_member(model: &SromModel, a0: &[f64], n_steps: usize, seed: u64, index: u64) -> Result<SimulatedTrajectory> {
    check_initial(model, a0)?;
    let mut rng = stream_rng(seed, Stream::EnsembleNoise, index);
    Ok(run(model, a0, n_steps, |xi| {
        for x in xi.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        true
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub members: Vec<SimulatedTrajectory>,
    /// Mean over valid members, `r × (n_steps + 1)`; `None` if every member blew up.
    pub mean: Option<DMatrix<f64>>,
    pub levels: Vec<f64>,
    /// One `r × (n_steps + 1)` matrix per level.
    pub percentiles: Vec<DMatrix<f64>>,
    pub n_invalid: usize,
    pub seed: u64,
}

/// Linear-interpolation percentile of sorted data (`q` in `[0, 100]`).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn simulate_ensemble(
    model: &SromModel,
    a0: &[f64],
    n_steps: usize,
    n_ens: usize,
    seed: u64,
    levels: &[f64],
) -> Result<EnsembleResult> {
    if n_ens == 0 {
        return Err(SromError::InvalidInput("ensemble size must be at least 1".into()));
    }
    if levels.iter().any(|q| !(0.0..=100.0).contains(q)) {
        return Err(SromError::InvalidInput("percentile levels must lie in [0, 100]".into()));
    }
    check_initial(model, a0)?;
    let members: Vec<SimulatedTrajectory> = (0..n_ens as u64)
        .into_par_iter()
        .map(|j| simulate_member(model, a0, n_steps, seed, j))
        .collect::<Result<_>>()?;
    let valid: Vec<&SimulatedTrajectory> = members.iter().filter(|m| m.is_valid()).collect();
    let n_invalid = members.len() - valid.len();
    let (r, n_cols) = (model.r, n_steps + 1);
    let (mean, percentiles) = if valid.is_empty() {
        (None, Vec::new())
    } else {
        let mut mean = DMatrix::zeros(r, n_cols);
        for m in &valid {
            mean += &m.values;
        }
        mean /= valid.len() as f64;
        let mut bands = vec![DMatrix::zeros(r, n_cols); levels.len()];
        let mut buf = Vec::with_capacity(valid.len());
        for l in 0..n_cols {
            for k in 0..r {
                buf.clear();
                buf.extend(valid.iter().map(|m| m.values[(k, l)]));
                buf.sort_by(f64::total_cmp);
                for (band, &q) in bands.iter_mut().zip(levels) {
                    band[(k, l)] = percentile_sorted(&buf, q);
                }
            }
        }
        (Some(mean), bands)
    };
    Ok(EnsembleResult {
        members,
        mean,
        levels: levels.to_vec(),
        percentiles,
        n_invalid,
        seed,
    })
}

/// `û(·, t_l) = Σ_i a_i(t_l) φ_i` with exact zero boundary rows.
pub fn reconstruct_field(values: &DMatrix<f64>, delta: f64, basis: &PodBasis) -> Result<SnapshotMatrix> {
    if values.nrows() != basis.r() {
        return Err(SromError::DimensionMismatch(format!(
            "trajectory has {} modes, basis has {}",
            values.nrows(),
            basis.r()
        )));
    }
    let mut field = &basis.modes * values;
    let n = field.nrows();
    field.row_mut(0).fill(0.0);
    field.row_mut(n - 1).fill(0.0);
    Ok(SnapshotMatrix {
        values: field,
        dt: delta,
        t0: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pod::{project_trajectory, InnerProduct};
    use proptest::prelude::*;

    fn provenance() -> Provenance {
        Provenance {
            nu: 0.0,
            n_trajectories: 1,
            gap: 1,
            seed: 0,
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    fn toy_galerkin() -> GalerkinOperators {
        let mut ops = GalerkinOperators::zeros(2, 0.01);
        ops.a = DMatrix::from_row_slice(2, 2, &[-0.4, 0.1, 0.1, -0.9]);
        ops.b[0] = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
        ops.b[1] = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.0]);
        ops
    }

    fn toy_closure(sigma: f64) -> ClosureParameters {
        let mut c = ClosureParameters::zeros(2);
        c.a_tilde = DMatrix::from_row_slice(2, 2, &[-0.2, 0.05, 0.0, -0.3]);
        c.b_tilde[0] = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -0.1]);
        c.b_tilde[1] = DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.2, 0.05]);
        c.sigma = vec![sigma, 2.0 * sigma];
        c
    }

    fn model(sigma: f64) -> SromModel {
        SromModel::new(0.025, toy_galerkin(), toy_closure(sigma), "x".into(), provenance()).unwrap()
    }

    #[test]
    fn trivial_steps() {
        let zero = SromModel::new(0.1, GalerkinOperators::zeros(3, 0.0), ClosureParameters::zeros(3), String::new(), provenance()).unwrap();
        assert_eq!(step(&zero, &[1.0, -2.0, 3.0], None).unwrap(), vec![1.0, -2.0, 3.0]);

        let mut ops = GalerkinOperators::zeros(1, 0.0);
        ops.a[(0, 0)] = -0.5;
        let mut closure = ClosureParameters::zeros(1);
        closure.a_tilde[(0, 0)] = -0.5;
        let m = SromModel::new(0.025, ops, closure, String::new(), provenance()).unwrap();
        assert!((step(&m, &[1.0], None).unwrap()[0] - 0.975).abs() < 1e-15);
    }

    #[test]
    fn zero_closure_is_explicit_euler_grom() {
        let ops = toy_galerkin();
        let m = SromModel::galerkin_only(0.025, ops.clone(), String::new(), provenance()).unwrap();
        let traj = simulate_deterministic(&m, &[0.8, -0.3], 40).unwrap();
        let mut a = vec![0.8, -0.3];
        for l in 1..=40 {
            let d = ops.drift(&a);
            a = vec![a[0] + 0.025 * d[0], a[1] + 0.025 * d[1]];
            assert_eq!(traj.values.column(l).as_slice(), a.as_slice());
        }
        let zero = simulate_deterministic(&m, &[0.0, 0.0], 10).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blowup_is_reported_with_partial_trajectory() {
        let mut ops = GalerkinOperators::zeros(1, 0.0);
        ops.b[0][(0, 0)] = 1.0;
        let m = SromModel::galerkin_only(0.5, ops, String::new(), provenance()).unwrap();
        let traj = simulate_deterministic(&m, &[2.0], 100).unwrap();
        let at = traj.blowup_step.unwrap();
        assert_eq!(traj.values.ncols(), at);
        assert!(traj.values.iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_NORM));
        assert!(step(&m, &[f64::NAN], None).is_err());
    }

    #[test]
    fn noiseless_ensemble_matches_deterministic() {
        let m = model(0.0);
        let det = simulate_deterministic(&m, &[0.5, 0.2], 30).unwrap();
        let ens = simulate_ensemble(&m, &[0.5, 0.2], 30, 7, 11, &[25.0, 75.0, 95.0]).unwrap();
        assert_eq!(ens.n_invalid, 0);
        for member in &ens.members {
            assert_eq!(member.values, det.values);
        }
        assert!((ens.mean.unwrap() - &det.values).amax() < 1e-15);
    }

    #[test]
    fn ensemble_is_deterministic_and_nested() {
        let m = model(0.3);
        let levels = [25.0, 75.0, 95.0];
        let one = simulate_ensemble(&m, &[0.5, 0.2], 50, 40, 3, &levels).unwrap();
        let two = simulate_ensemble(&m, &[0.5, 0.2], 50, 40, 3, &levels).unwrap();
        assert_eq!(one, two);
        let other = simulate_ensemble(&m, &[0.5, 0.2], 50, 40, 4, &levels).unwrap();
        assert_ne!(one.members[0].values, other.members[0].values);
        for w in one.percentiles.windows(2) {
            assert!(w[0].iter().zip(w[1].iter()).all(|(lo, hi)| lo <= hi));
        }
        // all members share the initial state: zero-width bands at t = 0
        for band in &one.percentiles {
            assert_eq!(band[(0, 0)], 0.5);
        }
        let mut mean = DMatrix::zeros(2, 51);
        for member in &one.members {
            mean += &member.values;
        }
        assert_eq!(mean / 40.0, one.mean.unwrap());
    }

    #[test]
    fn one_step_mean_within_noise_bound() {
        let m = model(0.4);
        let a0 = [0.5, 0.2];
        let n_ens = 4000;
        let ens = simulate_ensemble(&m, &a0, 1, n_ens, 9, &[50.0]).unwrap();
        let det = step(&m, &a0, None).unwrap();
        let mean = ens.mean.unwrap();
        for k in 0..2 {
            let bound = 3.0 * m.closure.sigma[k] * m.delta.sqrt() / (n_ens as f64).sqrt();
            assert!((mean[(k, 1)] - det[k]).abs() <= bound);
        }
    }

    #[test]
    fn percentile_interpolation() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&data, 0.0), 1.0);
        assert_eq!(percentile_sorted(&data, 50.0), 3.0);
        assert_eq!(percentile_sorted(&data, 100.0), 5.0);
        assert!((percentile_sorted(&data, 25.0) - 2.0).abs() < 1e-15);
        assert!((percentile_sorted(&data, 95.0) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn dimension_checks() {
        let m = model(0.1);
        assert!(simulate_deterministic(&m, &[1.0], 3).is_err());
        assert!(simulate_ensemble(&m, &[1.0, 0.0], 3, 0, 1, &[50.0]).is_err());
        let bad = ClosureParameters::zeros(3);
        assert!(SromModel::new(0.1, toy_galerkin(), bad, String::new(), provenance()).is_err());
        assert!(SromModel::new(0.0, toy_galerkin(), toy_closure(0.0), String::new(), provenance()).is_err());
    }

    fn identity_basis(n: usize, r: usize) -> PodBasis {
        let mut modes = DMatrix::zeros(n, r);
        for j in 0..r {
            modes[(j + 1, j)] = 1.0;
        }
        PodBasis {
            modes,
            eigenvalues: vec![0.0; n],
            n_trajectories: 1,
            inner_product: InnerProduct::Euclidean,
        }
    }

    #[test]
    fn reconstruction_roundtrip() {
        let basis = identity_basis(6, 3);
        let e1 = DMatrix::from_fn(3, 4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let field = reconstruct_field(&e1, 0.1, &basis).unwrap();
        for l in 0..4 {
            assert_eq!(field.column(l), basis.mode(0));
        }
        let y = SnapshotMatrix {
            values: DMatrix::from_fn(6, 5, |i, l| if i == 0 || i == 5 || i == 4 { 0.0 } else { (i + l) as f64 }),
            dt: 0.1,
            t0: 0.0,
        };
        let a = project_trajectory(&y, &basis, 1).unwrap();
        let back = reconstruct_field(&a.values, a.delta, &basis).unwrap();
        assert!((back.values - &y.values).amax() < 1e-10);
        assert!(reconstruct_field(&DMatrix::zeros(2, 3), 0.1, &basis).is_err());
    }

    proptest! {
        #[test]
        fn drift_decomposition(a in prop::collection::vec(-2.0f64..2.0, 2)) {
            let full = model(0.0);
            let bare = SromModel::galerkin_only(0.025, toy_galerkin(), String::new(), provenance()).unwrap();
            let closure = crate::closure::closure_term(&full.closure, &a);
            let with = step(&full, &a, None).unwrap();
            let without = step(&bare, &a, None).unwrap();
            for k in 0..2 {
                prop_assert!((with[k] - (without[k] + 0.025 * closure[k])).abs() < 1e-13);
            }
        }

        #[test]
        fn projection_does_not_add_energy(vals in prop::collection::vec(-1.0f64..1.0, 18)) {
            let basis = identity_basis(6, 2);
            let mut m = DMatrix::from_column_slice(6, 3, &vals);
            m.row_mut(0).fill(0.0);
            m.row_mut(5).fill(0.0);
            let y = SnapshotMatrix { values: m, dt: 0.1, t0: 0.0 };
            let a = project_trajectory(&y, &basis, 1).unwrap();
            let back = reconstruct_field(&a.values, 0.1, &basis).unwrap();
            for l in 0..3 {
                prop_assert!(back.values.column(l).norm() <= y.values.column(l).norm() + 1e-14);
            }
        }
    }
}
