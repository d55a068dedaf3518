//! Symmetric eigendecomposition (cyclic Jacobi) and its reverse-mode rule.
//!
//! All arithmetic is `f64`; callers holding `f32` data convert at the edge.

use crate::error::{Error, Result};

/// Sweeps before the solver gives up.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence: off-diagonal Frobenius norm ≤ `JACOBI_REL_TOL · ‖A‖_F`.
pub const JACOBI_REL_TOL: f64 = 1e-9;
/// Broadening added to eigenvalue gaps in the backward pass.
pub const EIGEN_GAP_BROADENING: f64 = 1e-6;

/// Eigenvalues (descending) and eigenvectors of a symmetric matrix.
///
/// `vectors` is row-major `n × n`; column `j` is the eigenvector paired with
/// `values[j]`. Each column's largest-magnitude entry is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub n: usize,
}

impl EigenDecomposition {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.n + j]).collect()
    }

    /// `E · diag(f(λ)) · Eᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let scaled: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors[i * n + k] * scaled[k] * self.vectors[j * n + k];
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.spectral_map(|l| l)
    }

    /// `‖EᵀE − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n)
                    .map(|i| self.vectors[i * n + a] * self.vectors[i * n + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
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

/// Eigendecomposition of the symmetric part `(A + Aᵀ)/2` of an `n × n` matrix.
pub fn eigh(a: &[f64], n: usize) -> Result<EigenDecomposition> {
    if a.len() != n * n || n == 0 {
        return Err(Error::dim("eigh", format!("expected {n}x{n} matrix, got {} values", a.len())));
    }
    if let Some(bad) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "eigh input has non-finite entry at ({}, {})",
            bad / n,
            bad % n
        )));
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let threshold = JACOBI_REL_TOL * frobenius(&m);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&m, n) <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    m[k * n + p] = new_kp;
                    m[p * n + k] = new_kp;
                    m[k * n + q] = new_kq;
                    m[q * n + k] = new_kq;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let residual = off_diagonal_norm(&m, n);
        if residual > threshold {
            return Err(Error::Solver {
                sweeps: JACOBI_MAX_SWEEPS,
                residual,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their solver order
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]));
    let values: Vec<f64> = order.iter().map(|&k| m[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (j, &k) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 0..n {
            if v[i * n + k].abs() > v[pivot * n + k].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot * n + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[i * n + j] = sign * v[i * n + k];
        }
    }
    Ok(EigenDecomposition { values, vectors, n })
}

/// Gradient w.r.t. the (symmetric) input of [`eigh`], given gradients on the
/// eigenvalues and on the eigenvector matrix.
///
/// `dA = sym(E (F ∘ (EᵀdE) + diag(dλ)) Eᵀ)` with
/// `F_ij = 1 / (λ_j − λ_i + s_ij·ε)`; `s_ij` is the sign of the gap, and for
/// exact ties it follows index order so that `s_ij = −s_ji`.
pub fn eigh_backward(decomp: &EigenDecomposition, grad_values: &[f64], grad_vectors: &[f64]) -> Vec<f64> {
    let n = decomp.n;
    let e = &decomp.vectors;
    let lam = &decomp.values;

    // X = Eᵀ dE
    let mut inner = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += e[k * n + i] * grad_vectors[k * n + j];
            }
            inner[i * n + j] = acc;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                inner[i * n + i] = grad_values[i];
                continue;
            }
            let gap = lam[j] - lam[i];
            // exact ties take opposite signs on the two sides of the diagonal
            let sign = if gap > 0.0 || (gap == 0.0 && i > j) { 1.0 } else { -1.0 };
            inner[i * n + j] /= gap + sign * EIGEN_GAP_BROADENING;
        }
    }
    // E · inner · Eᵀ
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += e[i * n + k] * inner[k * n + j];
            }
            tmp[i * n + j] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += tmp[i * n + k] * e[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}
