//! Affinity graphs over context vectors, the symmetric normalized Laplacian,
//! and its Fiedler vector.
//!
//! The Fiedler vector is found with a Lanczos iteration restricted to the
//! orthogonal complement of the Laplacian's known null vector `D^{1/2} 1`.
//! [`eigen_decompose_symmetric`] is an independent cyclic-Jacobi solver used
//! to check it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Minimum separation between the second and third eigenvalues.
pub const EIGENGAP_TOLERANCE: f64 = 1e-12;

/// Largest matrix the Jacobi oracle accepts.
pub const JACOBI_MAX_DIM: usize = 500;

const JACOBI_MAX_SWEEPS: usize = 100;
const LANCZOS_RESIDUAL_TOL: f64 = 1e-13;
const LANCZOS_BREAKDOWN: f64 = 1e-10;
/// Below this size the Krylov space is always built out completely.
const LANCZOS_FULL_BELOW: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all pairwise context distances are zero")]
    DegenerateSigma,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("row {0} of the affinity matrix has zero sum")]
    ZeroDegree(usize),
    #[error("eigengap {0:e} between second and third eigenvalues is below tolerance")]
    DegenerateEigengap(f64),
    #[error("jacobi iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix of order {0} exceeds the oracle limit")]
    TooLarge(usize),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn distance_matrix<P: AsRef<[f64]>>(points: &[P]) -> DMatrix<f64> {
    let m = points.len();
    let mut d = DMatrix::zeros(m, m);
    for j in 0..m {
        for k in (j + 1)..m {
            let v = distance(points[j].as_ref(), points[k].as_ref());
            d[(j, k)] = v;
            d[(k, j)] = v;
        }
    }
    d
}

fn sigma_from_distances(d: &DMatrix<f64>) -> Result<f64> {
    let m = d.nrows();
    if m < 2 {
        return Err(SpectralError::TooFewSamples { needed: 2, got: m });
    }
    let mut sum = 0.0;
    for j in 0..m {
        for k in (j + 1)..m {
            sum += d[(j, k)];
        }
    }
    if sum == 0.0 {
        return Err(SpectralError::DegenerateSigma);
    }
    Ok(sum / (m * (m - 1) / 2) as f64)
}

/// Mean Euclidean distance over all pairs of distinct samples.
pub fn mean_sigma<P: AsRef<[f64]>>(points: &[P]) -> Result<f64> {
    if points.len() < 2 {
        return Err(SpectralError::TooFewSamples {
            needed: 2,
            got: points.len(),
        });
    }
    sigma_from_distances(&distance_matrix(points))
}

/// Symmetric matrix of edge weights `exp(-|z_j - z_k| / sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(DMatrix<f64>);

impl AffinityMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }
}

fn affinity_from_distances(d: &DMatrix<f64>, sigma: f64) -> AffinityMatrix {
    let m = d.nrows();
    let mut a = DMatrix::from_element(m, m, 1.0);
    for j in 0..m {
        for k in (j + 1)..m {
            let v = (-d[(j, k)] / sigma).exp();
            a[(j, k)] = v;
            a[(k, j)] = v;
        }
    }
    AffinityMatrix(a)
}

pub fn pairwise_affinity<P: AsRef<[f64]>>(points: &[P], sigma: f64) -> Result<AffinityMatrix> {
    if !(sigma > 0.0) {
        return Err(SpectralError::NonPositiveSigma(sigma));
    }
    Ok(affinity_from_distances(&distance_matrix(points), sigma))
}

/// Computes `sigma` with [`mean_sigma`] and the affinity in one pass over
/// the pairwise distances.
pub fn affinity_with_mean_sigma<P: AsRef<[f64]>>(points: &[P]) -> Result<(f64, AffinityMatrix)> {
    if points.len() < 2 {
        return Err(SpectralError::TooFewSamples {
            needed: 2,
            got: points.len(),
        });
    }
    let d = distance_matrix(points);
    let sigma = sigma_from_distances(&d)?;
    Ok((sigma, affinity_from_distances(&d, sigma)))
}

/// `L = I - D^{-1/2} A D^{-1/2}` together with `D^{1/2}`, whose normalized
/// form spans the eigenvalue-0 eigenvector.
#[derive(Clone, Debug)]
pub struct NormalizedLaplacian {
    matrix: DMatrix<f64>,
    sqrt_degree: DVector<f64>,
}

impl NormalizedLaplacian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt_degree(&self) -> &DVector<f64> {
        &self.sqrt_degree
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    /// Unit eigenvector of eigenvalue 0.
    pub fn null_vector(&self) -> DVector<f64> {
        self.sqrt_degree.normalize()
    }
}

pub fn normalized_laplacian(a: &AffinityMatrix) -> Result<NormalizedLaplacian> {
    let a = a.matrix();
    let m = a.nrows();
    let mut sqrt_degree = DVector::zeros(m);
    let mut inv_sqrt = vec![0.0; m];
    for i in 0..m {
        let deg: f64 = a.row(i).iter().sum();
        if !(deg > 0.0) {
            return Err(SpectralError::ZeroDegree(i));
        }
        sqrt_degree[i] = deg.sqrt();
        inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let mut l = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let scaled = a[(i, j)] * (inv_sqrt[i] * inv_sqrt[j]);
            l[(i, j)] = if i == j { 1.0 - scaled } else { -scaled };
        }
    }
    Ok(NormalizedLaplacian { matrix: l, sqrt_degree })
}

/// Eigenvector of the second-smallest Laplacian eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct FiedlerEmbedding {
    pub values: Vec<f64>,
    pub eigenvalue: f64,
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Deterministic, non-degenerate start direction.
fn start_vector(m: usize, salt: u64) -> DVector<f64> {
    DVector::from_fn(m, |i, _| {
        let mut z = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

fn orthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    // Two passes keep the basis orthogonal to working precision.
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(w);
            w.axpy(-c, q, 1.0);
        }
    }
}

/// Next Lanczos direction after a breakdown, or `None` once the complement is
/// exhausted.
fn fresh_direction(m: usize, basis: &[DVector<f64>], salt: &mut u64) -> Option<DVector<f64>> {
    for _ in 0..4 {
        *salt += 1;
        let mut v = start_vector(m, *salt);
        orthogonalize(&mut v, basis);
        let n = v.norm();
        if n > 1e-8 {
            return Some(v / n);
        }
    }
    None
}

pub fn fiedler_embedding(l: &NormalizedLaplacian) -> Result<FiedlerEmbedding> {
    let m = l.order();
    if m < 3 {
        return Err(SpectralError::TooFewSamples { needed: 3, got: m });
    }
    let mat = l.matrix();
    let limit = m - 1;

    // basis[0] is the null vector; Lanczos vectors follow.
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(limit + 1);
    basis.push(l.null_vector());
    let mut salt = 0u64;
    let mut q = fresh_direction(m, &basis, &mut salt).expect("complement of a single vector is non-empty");

    let mut alphas: Vec<f64> = Vec::with_capacity(limit);
    let mut betas: Vec<f64> = Vec::with_capacity(limit);
    let mut next_check = if limit <= LANCZOS_FULL_BELOW { limit } else { 16 };
    let ritz: (SymmetricEigen<f64, nalgebra::Dyn>, [usize; 2]);

    loop {
        let mut w = mat * &q;
        let alpha = q.dot(&w);
        alphas.push(alpha);
        basis.push(q);
        orthogonalize(&mut w, &basis);
        let beta = w.norm();
        let k = alphas.len();

        let exhausted = k == limit;
        let mut next_q = None;
        if !exhausted {
            if beta > LANCZOS_BREAKDOWN {
                next_q = Some(w / beta);
            } else {
                next_q = fresh_direction(m, &basis, &mut salt);
            }
        }
        let coupling = if next_q.is_some() && beta > LANCZOS_BREAKDOWN { beta } else { 0.0 };
        let done = next_q.is_none();

        if done || k >= next_check {
            let mut t = DMatrix::zeros(k, k);
            for i in 0..k {
                t[(i, i)] = alphas[i];
                if i + 1 < k {
                    t[(i, i + 1)] = betas[i];
                    t[(i + 1, i)] = betas[i];
                }
            }
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let first = order[0];
            let second = if k > 1 { order[1] } else { order[0] };
            let converged = k > 1
                && [first, second]
                    .iter()
                    .all(|&c| (coupling * eig.eigenvectors[(k - 1, c)]).abs() <= LANCZOS_RESIDUAL_TOL);
            if done || converged {
                ritz = (eig, [first, second]);
                break;
            }
            next_check = (next_check * 3 / 2).min(limit);
        }
        betas.push(coupling);
        q = next_q.unwrap();
    }

    let (eig, [first, second]) = ritz;
    let k = alphas.len();
    let lambda2 = eig.eigenvalues[first];
    if k > 1 {
        let gap = eig.eigenvalues[second] - lambda2;
        if gap < EIGENGAP_TOLERANCE {
            return Err(SpectralError::DegenerateEigengap(gap));
        }
    }
    let mut e = DVector::zeros(m);
    for (i, q) in basis[1..].iter().enumerate() {
        e.axpy(eig.eigenvectors[(i, first)], q, 1.0);
    }
    let e = e.normalize();
    let mut values: Vec<f64> = e.iter().copied().collect();
    fix_sign(&mut values);
    Ok(FiedlerEmbedding {
        values,
        eigenvalue: lambda2,
    })
}

/// Full eigendecomposition, eigenvalues ascending; `vectors` column `i`
/// pairs with `values[i]`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi rotations on a symmetric matrix.
pub fn eigen_decompose_symmetric(m: &DMatrix<f64>) -> Result<Eigen> {
    let n = m.nrows();
    if n > JACOBI_MAX_DIM {
        return Err(SpectralError::TooLarge(n));
    }
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);

    let off_norm = |a: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[(p, q)] * a[(p, q)];
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= 1e-15 * scale;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= 1e-15 * scale;
    }
    if !converged {
        return Err(SpectralError::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(Eigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_sigma_examples() {
        assert_eq!(mean_sigma(&[[0.0], [2.0]]).unwrap(), 2.0);
        assert!((mean_sigma(&[[0.0], [1.0], [2.0]]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            mean_sigma(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]),
            Err(SpectralError::DegenerateSigma)
        );
        assert!(matches!(
            mean_sigma(&[[1.0]]),
            Err(SpectralError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn affinity_examples() {
        let a = pairwise_affinity(&[[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]], 5.0).unwrap();
        let a = a.matrix();
        assert_eq!(a[(0, 2)], 1.0);
        assert!((a[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((a[(0, 1)] - 0.3679).abs() < 1e-4);
        assert_eq!(a[(1, 1)], 1.0);
        assert_eq!(pairwise_affinity(&[[0.0], [1.0]], 0.0), Err(SpectralError::NonPositiveSigma(0.0)));

        let mut prev = 1.0;
        for d in [0.5, 1.0, 4.0, 16.0, 64.0, 1000.0] {
            let a = pairwise_affinity(&[[0.0], [d]], 1.0).unwrap();
            assert!(a.matrix()[(0, 1)] < prev);
            prev = a.matrix()[(0, 1)];
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn laplacian_two_by_two() {
        let a = AffinityMatrix(DMatrix::from_element(2, 2, 1.0));
        let l = normalized_laplacian(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((l.matrix() - expected).norm() < 1e-15);
        let eig = eigen_decompose_symmetric(l.matrix()).unwrap();
        assert!(eig.values[0].abs() < 1e-15);
        assert!((eig.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn laplacian_of_isolated_nodes_is_zero() {
        let a = AffinityMatrix(DMatrix::identity(4, 4));
        let l = normalized_laplacian(&a).unwrap();
        assert_eq!(l.matrix().norm(), 0.0);
    }

    #[test]
    fn jacobi_identity_and_diagonal() {
        let eig = eigen_decompose_symmetric(&DMatrix::identity(5, 5)).unwrap();
        assert!(eig.values.iter().all(|&v| v == 1.0));

        let eig = eigen_decompose_symmetric(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]))).unwrap();
        assert_eq!(eig.values, vec![1.0, 2.0, 3.0]);
        for (col, basis) in [1usize, 2, 0].iter().enumerate() {
            for r in 0..3 {
                let expect = if r == *basis { 1.0 } else { 0.0 };
                assert_eq!(eig.vectors[(r, col)].abs(), expect);
            }
        }
    }

    #[test]
    fn jacobi_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = DMatrix::zeros(10, 10);
        for i in 0..10 {
            for j in i..10 {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let eig = eigen_decompose_symmetric(&m).unwrap();
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(eig.values.clone()));
        let recon = &eig.vectors * lambda * eig.vectors.transpose();
        assert!((recon - &m).norm() < 1e-8);
        for (i, &val) in eig.values.iter().enumerate() {
            let v = eig.vectors.column(i);
            assert!((&m * v - v * val).norm() < 1e-9);
        }
    }

    #[test]
    fn jacobi_rejects_oversized() {
        assert_eq!(
            eigen_decompose_symmetric(&DMatrix::zeros(501, 501)).unwrap_err(),
            SpectralError::TooLarge(501)
        );
    }

    #[test]
    fn fiedler_separates_two_cliques() {
        let eps = 1e-6;
        let mut a = DMatrix::from_element(4, 4, eps);
        for (i, j) in [(0, 1), (2, 3)] {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        // break the exact symmetry between the two cliques
        a[(0, 2)] = 2.0 * eps;
        a[(2, 0)] = 2.0 * eps;
        a.fill_diagonal(1.0);
        let l = normalized_laplacian(&AffinityMatrix(a)).unwrap();
        let e = fiedler_embedding(&l).unwrap();
        assert!(e.values[0] * e.values[1] > 0.0);
        assert!(e.values[2] * e.values[3] > 0.0);
        assert!(e.values[0] * e.values[2] < 0.0);

        let oracle = eigen_decompose_symmetric(l.matrix()).unwrap();
        assert!((oracle.values[1] - e.eigenvalue).abs() < 1e-12);
    }

    #[test]
    fn fiedler_on_weak_link_path() {
        // a - b strongly linked, b - c weakly linked, a - c near zero
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.01, 0.9, 1.0, 0.1, 0.01, 0.1, 1.0]);
        let l = normalized_laplacian(&AffinityMatrix(a)).unwrap();
        let e = fiedler_embedding(&l).unwrap();
        assert!(e.values[0] * e.values[1] > 0.0);
        assert!(e.values[0] * e.values[2] < 0.0);
        let oracle = eigen_decompose_symmetric(l.matrix()).unwrap();
        let mut o: Vec<f64> = oracle.vectors.column(1).iter().copied().collect();
        fix_sign(&mut o);
        for (x, y) in e.values.iter().zip(&o) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fiedler_flags_degenerate_spectrum() {
        let l = normalized_laplacian(&AffinityMatrix(DMatrix::identity(5, 5))).unwrap();
        assert!(matches!(fiedler_embedding(&l), Err(SpectralError::DegenerateEigengap(_))));
    }

    #[test]
    fn fiedler_needs_three_samples() {
        let l = normalized_laplacian(&AffinityMatrix(DMatrix::from_element(2, 2, 0.5))).unwrap();
        assert!(matches!(fiedler_embedding(&l), Err(SpectralError::TooFewSamples { .. })));
    }

    fn random_points(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn fiedler_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 20, 3);
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let embed = |p: &[Vec<f64>]| {
            let (_, a) = affinity_with_mean_sigma(p).unwrap();
            fiedler_embedding(&normalized_laplacian(&a).unwrap()).unwrap()
        };
        let e = embed(&pts);
        let ep = embed(&permuted);
        for (new, &old) in perm.iter().enumerate() {
            assert!((ep.values[new] - e.values[old]).abs() < 1e-8);
        }
    }

    #[test]
    fn large_node_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 200, 4);
        let (_, a) = affinity_with_mean_sigma(&pts).unwrap();
        let l = normalized_laplacian(&a).unwrap();
        let e = fiedler_embedding(&l).unwrap();
        let oracle = eigen_decompose_symmetric(l.matrix()).unwrap();
        let mut o: Vec<f64> = oracle.vectors.column(1).iter().copied().collect();
        fix_sign(&mut o);
        let err = e.values.iter().zip(&o).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max error {err}");
    }
}
