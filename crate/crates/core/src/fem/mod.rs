//! P1 finite-element kernels on tetrahedral meshes.
//!
//! Everything here is linear in the nodal field, so each kernel is stored as
//! a [`SparseMatrix`] and exposes its transpose through [`LinearOperator`].
//! That adjoint pair is what lets the training loop differentiate through
//! the residual without the tape ever seeing the assembly.

mod cg;
mod sparse;

pub use cg::{solve_cg, CgSolution};
pub use sparse::{dot, norm, LinearOperator, SparseMatrix, TripletBuilder};

use thiserror::Error;

use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("CG did not converge in {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged {
        iterations: usize,
        relative_residual: f64,
    },
}

/// Gradients of the four barycentric coordinates and the volume of tet `t`.
fn shape_gradients(mesh: &Mesh, t: usize) -> ([[f64; 3]; 4], f64) {
    let p = mesh.tet_points(t);
    let e = |k: usize| {
        [
            p[k][0] - p[0][0],
            p[k][1] - p[0][1],
            p[k][2] - p[0][2],
        ]
    };
    let (a, b, c) = (e(1), e(2), e(3));
    let cross = |u: [f64; 3], v: [f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let bc = cross(b, c);
    let det = a[0] * bc[0] + a[1] * bc[1] + a[2] * bc[2];
    // rows of the inverse of [a | b | c]
    let g1 = bc.map(|v| v / det);
    let g2 = cross(c, a).map(|v| v / det);
    let g3 = cross(a, b).map(|v| v / det);
    let g0 = [
        -(g1[0] + g2[0] + g3[0]),
        -(g1[1] + g2[1] + g3[1]),
        -(g1[2] + g2[2] + g3[2]),
    ];
    ([g0, g1, g2, g3], det.abs() / 6.0)
}

/// `K_ij = sum_e vol_e grad(l_i) . grad(l_j)`, no boundary conditions applied.
pub fn assemble_stiffness(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.num_nodes();
    let mut b = TripletBuilder::new(n, n);
    for (t, tet) in mesh.tets().iter().enumerate() {
        let (g, vol) = shape_gradients(mesh, t);
        for i in 0..4 {
            for j in 0..4 {
                let k = vol * (g[i][0] * g[j][0] + g[i][1] * g[j][1] + g[i][2] * g[j][2]);
                b.add(tet[i], tet[j], k);
            }
        }
    }
    b.build()
}

/// Row-sum lumped mass: each tet gives a quarter of its volume to each vertex.
pub fn assemble_lumped_mass(mesh: &Mesh) -> Vec<f64> {
    let mut m = vec![0.0; mesh.num_nodes()];
    for (tet, vol) in mesh.tets().iter().zip(mesh.element_volumes()) {
        for &i in tet {
            m[i] += vol / 4.0;
        }
    }
    m
}

/// Volume-weighted averages of the piecewise-constant P1 gradient at nodes,
/// one operator per Cartesian component.
pub fn assemble_gradient_recovery(mesh: &Mesh) -> [SparseMatrix; 3] {
    let n = mesh.num_nodes();
    let mut weight = vec![0.0; n];
    for (tet, vol) in mesh.tets().iter().zip(mesh.element_volumes()) {
        for &i in tet {
            weight[i] += vol;
        }
    }
    let mut builders = [
        TripletBuilder::new(n, n),
        TripletBuilder::new(n, n),
        TripletBuilder::new(n, n),
    ];
    for (t, tet) in mesh.tets().iter().enumerate() {
        let (g, vol) = shape_gradients(mesh, t);
        for &i in tet {
            let w = vol / weight[i];
            for (k, &j) in tet.iter().enumerate() {
                for (c, b) in builders.iter_mut().enumerate() {
                    b.add(i, j, w * g[k][c]);
                }
            }
        }
    }
    builders.map(TripletBuilder::build)
}

/// Gradient recovery on a 1-D chain of P1 elements over strictly increasing
/// sample positions: length-weighted average of adjacent slopes.
pub fn gradient_recovery_1d(x: &[f64]) -> Result<SparseMatrix, FemError> {
    let n = x.len();
    if n < 2 {
        return Err(FemError::InvalidProblem(
            "1-D recovery needs at least two samples".into(),
        ));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FemError::InvalidProblem(
            "1-D samples must be strictly increasing".into(),
        ));
    }
    let mut weight = vec![0.0; n];
    for e in 0..n - 1 {
        let h = x[e + 1] - x[e];
        weight[e] += h;
        weight[e + 1] += h;
    }
    let mut b = TripletBuilder::new(n, n);
    for e in 0..n - 1 {
        // h * (u1 - u0) / h, distributed to both ends
        for i in [e, e + 1] {
            b.add(i, e + 1, 1.0 / weight[i]);
            b.add(i, e, -1.0 / weight[i]);
        }
    }
    Ok(b.build())
}

/// Interior-node residual of the Laplace equation, `R = -M_L^{-1} K` restricted
/// to interior rows; approximates `+Laplacian(u)` as a pointwise density.
#[derive(Debug, Clone)]
pub struct ResidualOperator {
    matrix: SparseMatrix,
    interior: Vec<usize>,
}

impl ResidualOperator {
    pub fn build(
        mesh: &Mesh,
        stiffness: &SparseMatrix,
        lumped_mass: &[f64],
    ) -> Result<Self, FemError> {
        let n = mesh.num_nodes();
        if stiffness.shape() != (n, n) {
            return Err(FemError::DimensionMismatch {
                expected: n,
                found: stiffness.shape().0,
            });
        }
        if lumped_mass.len() != n {
            return Err(FemError::DimensionMismatch {
                expected: n,
                found: lumped_mass.len(),
            });
        }
        let interior = mesh.interior_nodes();
        if interior.is_empty() {
            return Err(FemError::InvalidProblem(
                "mesh has no interior nodes".into(),
            ));
        }
        let all: Vec<usize> = (0..n).collect();
        let scale: Vec<f64> = interior.iter().map(|&i| -1.0 / lumped_mass[i]).collect();
        let matrix = stiffness.submatrix(&interior, &all).scale_rows(&scale);
        Ok(ResidualOperator { matrix, interior })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Node index of each residual row.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>, FemError> {
        self.matrix.mul_vec(u)
    }
}

impl LinearOperator for ResidualOperator {
    fn rows(&self) -> usize {
        self.matrix.shape().0
    }

    fn cols(&self) -> usize {
        self.matrix.shape().1
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.apply(x)
    }

    fn apply_adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.apply_adjoint(x)
    }
}

/// Every assembled kernel for one mesh.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub stiffness: SparseMatrix,
    pub lumped_mass: Vec<f64>,
    pub gradient: [SparseMatrix; 3],
    pub residual: ResidualOperator,
}

impl FemOperators {
    pub fn assemble(mesh: &Mesh) -> Result<Self, FemError> {
        let stiffness = assemble_stiffness(mesh);
        let lumped_mass = assemble_lumped_mass(mesh);
        let gradient = assemble_gradient_recovery(mesh);
        let residual = ResidualOperator::build(mesh, &stiffness, &lumped_mass)?;
        Ok(FemOperators {
            stiffness,
            lumped_mass,
            gradient,
            residual,
        })
    }

    /// `sum_c G_c (G_c u)`: the Laplacian obtained by recovering gradients twice.
    pub fn recovered_laplacian(&self, u: &[f64]) -> Result<Vec<f64>, FemError> {
        let mut out = vec![0.0; u.len()];
        for g in &self.gradient {
            let second = g.mul_vec(&g.mul_vec(u)?)?;
            for (o, s) in out.iter_mut().zip(second) {
                *o += s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves the Laplace problem with the mesh's Dirichlet patches by symmetric
/// elimination of prescribed rows; other boundary nodes get natural
/// (zero-flux) conditions.
pub fn reference_solve(
    mesh: &Mesh,
    stiffness: &SparseMatrix,
    tol: f64,
) -> Result<ReferenceSolution, FemError> {
    let n = mesh.num_nodes();
    let prescribed = mesh.dirichlet_values();
    if prescribed.iter().all(Option::is_none) {
        return Err(FemError::InvalidProblem(
            "no Dirichlet nodes; the Neumann problem is singular".into(),
        ));
    }
    let free: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_none()).collect();
    let fixed: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_some()).collect();
    let mut values: Vec<f64> = prescribed.iter().map(|v| v.unwrap_or(0.0)).collect();
    if free.is_empty() {
        return Ok(ReferenceSolution {
            values,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let k_ff = stiffness.submatrix(&free, &free);
    let k_fd = stiffness.submatrix(&free, &fixed);
    let u_d: Vec<f64> = fixed.iter().map(|&i| values[i]).collect();
    let rhs: Vec<f64> = k_fd.mul_vec(&u_d)?.into_iter().map(|v| -v).collect();
    let sol = solve_cg(&k_ff, &rhs, tol, 10 * free.len() + 100)?;
    for (&i, v) in free.iter().zip(&sol.x) {
        values[i] = *v;
    }
    Ok(ReferenceSolution {
        values,
        iterations: sol.iterations,
        relative_residual: sol.relative_residual,
    })
}
