//! Cyclic Jacobi eigensolver for real symmetric matrices and the Laplacian
//! eigenvector embedding built from it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as trivial (one per connected
/// component of the graph).
pub const TRIVIAL_EIGENVALUE: f64 = 1e-8;

const OFF_DIAGONAL_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Spectrum of a symmetric matrix: `delta = U · diag(eigenvalues) · Uᵀ`
/// with eigenvalues ascending and `U` column-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianDecomposition {
    pub delta: Tensor,
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Tensor,
}

impl LaplacianDecomposition {
    pub fn column(&self, i: usize) -> Vec<f64> {
        let n = self.eigenvalues.len();
        (0..n).map(|r| self.eigenvectors.data()[r * n + i]).collect()
    }

    /// `max_i ‖Δu_i − λ_i u_i‖∞`.
    pub fn max_residual(&self) -> f64 {
        let n = self.eigenvalues.len();
        let mut worst: f64 = 0.0;
        for (i, &lambda) in self.eigenvalues.iter().enumerate() {
            let u = self.column(i);
            for r in 0..n {
                let du: f64 = (0..n).map(|c| self.delta.data()[r * n + c] * u[c]).sum();
                worst = worst.max((du - lambda * u[r]).abs());
            }
        }
        worst
    }

    /// Frobenius norm of `UᵀU − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.eigenvalues.len();
        let mut acc = 0.0;
        for i in 0..n {
            let ui = self.column(i);
            for j in 0..n {
                let uj = self.column(j);
                let dot: f64 = ui.iter().zip(&uj).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                acc += (dot - target) * (dot - target);
            }
        }
        acc.sqrt()
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below `1e-10`, then
/// sorts ascending and fixes each eigenvector's sign so that its
/// largest-magnitude component (lowest index on ties) is positive.
pub fn symmetric_eigen(delta: &Tensor) -> Result<LaplacianDecomposition> {
    let (n, m) = delta.dims2("symmetric_eigen")?;
    if n != m {
        return Err(Error::dim(format!("eigen input must be square, got {:?}", delta.shape())));
    }
    let scale = delta.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (delta.get(&[i, j]) - delta.get(&[j, i])).abs() > 1e-12 * scale {
                return Err(Error::Contract(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a = delta.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let mut converged = off_diagonal_norm(&a, n) < OFF_DIAGONAL_TOL;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps (off-diagonal {:.3e})",
                off_diagonal_norm(&a, n)
            )));
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a, n) < OFF_DIAGONAL_TOL;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut u: Vec<f64> = (0..n).map(|r| v[r * n + src]).collect();
        let peak = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lead = u
            .iter()
            .position(|x| x.abs() >= peak - 1e-12)
            .expect("nonempty column");
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            vecs[r * n + col] = u[r];
        }
    }
    Ok(LaplacianDecomposition {
        delta: delta.clone(),
        eigenvalues,
        eigenvectors: Tensor::new(&[n, n], vecs)?,
    })
}

/// Zero `a[p][q]` with one Givens rotation, accumulating it into `v`.
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// `N×k` matrix of the eigenvectors belonging to the `k` smallest eigenvalues
/// above [`TRIVIAL_EIGENVALUE`], in ascending order.
pub fn laplacian_embedding(dec: &LaplacianDecomposition, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Data("Laplacian embedding dimension must be at least 1".into()));
    }
    let n = dec.eigenvalues.len();
    let first = dec
        .eigenvalues
        .iter()
        .position(|&l| l >= TRIVIAL_EIGENVALUE)
        .unwrap_or(n);
    let available = n - first;
    if k > available {
        return Err(Error::Data(format!(
            "requested {k} Laplacian eigenvectors but only {available} nontrivial eigenvalues exist; use k <= {available}"
        )));
    }
    let mut out = Tensor::zeros(&[n, k]);
    for c in 0..k {
        let u = dec.column(first + c);
        for r in 0..n {
            out.set(&[r, c], u[r]);
        }
    }
    Ok(out)
}
