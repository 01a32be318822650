//! Galerkin reduced operators for Burgers: `ȧ = A a + aᵀ B a`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SromError};
use crate::fem::FemOperators;
use crate::pod::PodBasis;

/// Linear operator `A` and quadratic tensor `B` of the r-mode G-ROM.
///
/// `b[k]` is the symmetric slice `B[:, :, k]`, so `(aᵀ B a)_k = aᵀ b[k] a`.
#[derive(Debug, Clone, PartialEq)]
pub struct GalerkinOperators {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub r: usize,
    pub nu: f64,
}

/// `(aᵀ B a)_k` for every output slice.
pub fn quadratic_term(slices: &[DMatrix<f64>], a: &[f64]) -> Vec<f64> {
    let r = a.len();
    slices
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            for j in 0..r {
                let mut inner = 0.0;
                for i in 0..r {
                    inner += s[(i, j)] * a[i];
                }
                acc += inner * a[j];
            }
            acc
        })
        .collect()
}

impl GalerkinOperators {
    pub fn zeros(r: usize, nu: f64) -> Self {
        Self {
            a: DMatrix::zeros(r, r),
            b: vec![DMatrix::zeros(r, r); r],
            r,
            nu,
        }
    }

    /// G-ROM drift `A a + aᵀ B a`.
    pub fn drift(&self, a: &[f64]) -> Vec<f64> {
        let lin = &self.a * DVector::from_column_slice(a);
        let quad = quadratic_term(&self.b, a);
        lin.iter().zip(quad).map(|(l, q)| l + q).collect()
    }
}

pub fn grom_drift(ops: &GalerkinOperators, a: &[f64]) -> Vec<f64> {
    ops.drift(a)
}

/// Weak-form projection of `ν u_xx − u u_x` onto the POD modes.
///
/// Modes are piecewise-linear functions through their nodal values; every
/// integral is evaluated exactly element by element. The modes are unit
/// vectors in the Euclidean nodal inner product, whose L² Gram matrix is
/// `h·I` under mass lumping, so the projected operators are divided by `h`
/// to act on the Euclidean coefficients `a = Φᵀ U`.
pub fn assemble_galerkin(basis: &PodBasis, nu: f64, fem: &FemOperators) -> Result<GalerkinOperators> {
    if basis.n_x() != fem.n_nodes() {
        return Err(SromError::DimensionMismatch(format!(
            "basis has {} nodes, mesh has {}",
            basis.n_x(),
            fem.n_nodes()
        )));
    }
    if !(nu >= 0.0) {
        return Err(SromError::InvalidInput("viscosity must be non-negative".into()));
    }
    let r = basis.r();
    let h = fem.h;
    let lumped = 1.0 / h;

    let mut a = DMatrix::zeros(r, r);
    // conv[k][(i, j)] = ∫ φ_i φ_j' φ_k dx
    let mut conv = vec![DMatrix::zeros(r, r); r];
    let mut left = vec![0.0; r];
    let mut right = vec![0.0; r];
    let mut slope = vec![0.0; r];
    for e in 0..fem.n_elements {
        for i in 0..r {
            let m = basis.mode(i);
            left[i] = m[e];
            right[i] = m[e + 1];
            slope[i] = (m[e + 1] - m[e]) / h;
        }
        for i in 0..r {
            for k in 0..r {
                a[(i, k)] += h * slope[i] * slope[k];
            }
        }
        for k in 0..r {
            for i in 0..r {
                // ∫_e φ_i φ_k dx for linears on the element
                let prod = h / 6.0
                    * (2.0 * left[i] * left[k]
                        + left[i] * right[k]
                        + right[i] * left[k]
                        + 2.0 * right[i] * right[k]);
                let slice = &mut conv[k];
                for j in 0..r {
                    slice[(i, j)] += slope[j] * prod;
                }
            }
        }
    }
    a *= -nu * lumped;
    let b = conv
        .iter()
        .map(|c| (c + c.transpose()) * (-0.5 * lumped))
        .collect();
    Ok(GalerkinOperators { a, b, r, nu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_fem_operators;
    use crate::pod::InnerProduct;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine_basis(fem: &FemOperators, freqs: &[usize]) -> PodBasis {
        let n = fem.n_nodes();
        let mut modes = DMatrix::zeros(n, freqs.len());
        for (c, &k) in freqs.iter().enumerate() {
            for j in 0..n {
                let x = j as f64 * fem.h;
                modes[(j, c)] = (2.0 * fem.h).sqrt() * (PI * k as f64 * x).sin();
            }
            modes[(0, c)] = 0.0;
            modes[(n - 1, c)] = 0.0;
        }
        PodBasis {
            modes,
            eigenvalues: vec![0.0; n],
            n_trajectories: 1,
            inner_product: InnerProduct::Euclidean,
        }
    }

    #[test]
    fn zero_viscosity_gives_zero_linear_part() {
        let fem = assemble_fem_operators(64).unwrap();
        let ops = assemble_galerkin(&sine_basis(&fem, &[1, 2]), 0.0, &fem).unwrap();
        assert!(ops.a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sine_mode() {
        let fem = assemble_fem_operators(256).unwrap();
        let nu = 0.002;
        let ops = assemble_galerkin(&sine_basis(&fem, &[1]), nu, &fem).unwrap();
        let expected = -nu * PI * PI;
        // piecewise-linear interpolation error is O(h²)
        assert!((ops.a[(0, 0)] - expected).abs() < 2.0 * fem.h * fem.h * nu * PI.powi(4));
        assert!(ops.b[0][(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn hand_set_drift_matches_double_sum() {
        let mut ops = GalerkinOperators::zeros(2, 0.1);
        ops.a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.25, -2.0]);
        ops.b[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -3.0]);
        ops.b[1] = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 4.0]);
        let a = [0.3, -1.7];
        let mut oracle = [0.0; 2];
        for k in 0..2 {
            for i in 0..2 {
                oracle[k] += ops.a[(k, i)] * a[i];
                for j in 0..2 {
                    oracle[k] += a[i] * ops.b[k][(i, j)] * a[j];
                }
            }
        }
        let got = grom_drift(&ops, &a);
        for k in 0..2 {
            assert!((got[k] - oracle[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn trivial_drifts() {
        let mut ops = GalerkinOperators::zeros(3, 1.0);
        assert_eq!(grom_drift(&ops, &[0.0; 3]), vec![0.0; 3]);
        ops.a = -DMatrix::identity(3, 3);
        assert_eq!(grom_drift(&ops, &[1.0; 3]), vec![-1.0; 3]);
    }

    fn random_basis(n_el: usize, r: usize, seed: u64) -> (FemOperators, PodBasis) {
        use rand::{Rng, SeedableRng};
        let fem = assemble_fem_operators(n_el).unwrap();
        let n = fem.n_nodes();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut raw = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        raw.row_mut(0).fill(0.0);
        raw.row_mut(n - 1).fill(0.0);
        let q = raw.qr().q();
        let basis = PodBasis {
            modes: q.columns(0, r).into_owned(),
            eigenvalues: vec![0.0; n],
            n_trajectories: 1,
            inner_product: InnerProduct::Euclidean,
        };
        (fem, basis)
    }

    #[test]
    fn operator_structure_on_random_basis() {
        let (fem, basis) = random_basis(40, 5, 7);
        let ops = assemble_galerkin(&basis, 0.01, &fem).unwrap();
        assert!((&ops.a - ops.a.transpose()).amax() < 1e-14);
        let eig = ops.a.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l < 0.0));
        for s in &ops.b {
            assert!((s - s.transpose()).amax() == 0.0);
        }
    }

    proptest! {
        #[test]
        fn convection_conserves_energy(a in prop::collection::vec(-3.0f64..3.0, 5)) {
            let (fem, basis) = random_basis(40, 5, 21);
            let ops = assemble_galerkin(&basis, 0.01, &fem).unwrap();
            let quad = quadratic_term(&ops.b, &a);
            let dot: f64 = a.iter().zip(&quad).map(|(x, y)| x * y).sum();
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            // entries of B scale like 1/h, hence the relative bound
            let scale = ops.b.iter().map(|s| s.amax()).fold(0.0, f64::max);
            prop_assert!(dot.abs() <= 1e-12 * scale * norm.powi(3).max(1.0));
            let drift = grom_drift(&ops, &a);
            let energy: f64 = a.iter().zip(&drift).map(|(x, y)| x * y).sum();
            prop_assert!(energy <= 1e-12 * scale * norm.powi(3).max(1.0));
        }

        #[test]
        fn drift_is_exactly_quadratic(a in prop::collection::vec(-2.0f64..2.0, 4), alpha in -3.0f64..3.0) {
            let (fem, basis) = random_basis(30, 4, 2);
            let ops = assemble_galerkin(&basis, 0.02, &fem).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let lhs = grom_drift(&ops, &scaled);
            let lin = &ops.a * DVector::from_column_slice(&a);
            let quad = quadratic_term(&ops.b, &a);
            for k in 0..4 {
                let rhs = alpha * lin[k] + alpha * alpha * quad[k];
                prop_assert!((lhs[k] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }
}
