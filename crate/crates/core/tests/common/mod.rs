//! Independent oracles and instance generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stochastic_contraction::matcore::SymMatrix;
use stochastic_contraction::process::TransitionMatrix;

/// Second-moment operator of a Markov jump linear system acting on stacked
/// `vec(P_j)`: block `(i, j)` is `π_{j,i} (A_jᵀ ⊗ A_jᵀ)`.
pub fn lifted_operator(a: &[DMatrix<f64>], t: &TransitionMatrix) -> DMatrix<f64> {
    let n = a[0].nrows();
    let b = n * n;
    let m = a.len();
    let mut l = DMatrix::zeros(m * b, m * b);
    for i in 0..m {
        for j in 0..m {
            let at = a[j].transpose();
            let blk = at.kronecker(&at) * t.prob(j, i);
            l.view_mut((i * b, j * b), (b, b)).copy_from(&blk);
        }
    }
    l
}

/// Eigenvalue moduli, largest first.
pub fn moduli(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.norm()).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    moduli(m)[0]
}

/// A random two-mode planar Markov jump linear system with a clear spectral gap.
///
/// Returns the mode matrices, the chain and the lifted spectral radius.
pub fn mjls_instance(rng: &mut ChaCha8Rng) -> (Vec<DMatrix<f64>>, TransitionMatrix, f64) {
    loop {
        let base = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.6..0.6));
        let a: Vec<DMatrix<f64>> =
            (0..2).map(|_| &base + DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.15..0.15))).collect();
        let (p0, p1): (f64, f64) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let t = TransitionMatrix::from_row_slice(2, &[p0, 1.0 - p1, 1.0 - p0, p1]).unwrap();
        let mods = moduli(&lifted_operator(&a, &t));
        let rho = mods[0];
        let ratio = mods.iter().skip(1).find(|&&v| (v - rho).abs() > 1e-9).copied().unwrap_or(0.0) / rho;
        if (0.1..=0.85).contains(&rho) && ratio <= 0.75 {
            return (a, t, rho);
        }
    }
}

/// Solves `Aᵀ P A − λ² P = −I` by vectorization.
pub fn lyapunov(a: &DMatrix<f64>, lambda2: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let at = a.transpose();
    let lhs = at.kronecker(&at) - DMatrix::identity(n * n, n * n) * lambda2;
    let rhs = -DVector::from_column_slice(DMatrix::<f64>::identity(n, n).as_slice());
    let v = lhs.lu().solve(&rhs).expect("nonsingular");
    let p = DMatrix::from_column_slice(n, n, v.as_slice());
    (&p + p.transpose()) * 0.5
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_sym(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, scale);
    (&m + m.transpose()) * 0.5
}

/// Random orthogonal matrix from the QR factorization of a Gaussian-like matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    random_matrix(rng, n, n, 1.0).qr().q()
}

/// Smallest eigenvalue from nalgebra's symmetric eigensolver.
pub fn oracle_min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn sym(m: DMatrix<f64>) -> SymMatrix {
    SymMatrix::new(m).unwrap()
}

/// Relative error `|a − b| / max(|b|, floor)` in the max norm.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}
