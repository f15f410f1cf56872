use super::sparse::{dot, norm, SparseMatrix};
use super::FemError;

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||A x - b|| / ||b||`, recomputed from scratch at exit.
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for SPD systems, started from zero.
pub fn solve_cg(
    a: &SparseMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution, FemError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(FemError::DimensionMismatch {
            expected: rows,
            found: cols,
        });
    }
    if b.len() != rows {
        return Err(FemError::DimensionMismatch {
            expected: rows,
            found: b.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(FemError::InvalidProblem(format!(
            "CG tolerance must be positive, got {tol}"
        )));
    }
    let n = rows;
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(FemError::InvalidProblem(format!(
                    "non-positive diagonal entry {d} in SPD system"
                )))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let true_residual = |x: &[f64]| {
        let ax = a.mul_vec(x).expect("checked shape");
        let res: Vec<f64> = ax.iter().zip(b).map(|(ax, b)| ax - b).collect();
        norm(&res) / b_norm
    };

    while iterations < max_iter {
        let ap = a.mul_vec(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(FemError::InvalidProblem(format!(
                "matrix is not positive definite (p^T A p = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        if norm(&r) / b_norm <= tol {
            // guard against drift of the recursive residual
            let rel = true_residual(&x);
            if rel <= tol {
                return Ok(CgSolution {
                    x,
                    iterations,
                    relative_residual: rel,
                });
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FemError::NotConverged {
        iterations,
        relative_residual: true_residual(&x),
    })
}
