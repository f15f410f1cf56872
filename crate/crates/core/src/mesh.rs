//! Tetrahedral meshes: generation, deformation, JSON I/O and graph views.
//!
//! A [`Mesh`] is validated once at construction and immutable afterwards.
//! Boundary nodes are derived from the connectivity (a face lies on the
//! boundary iff exactly one tetrahedron owns it), so the on-disk format only
//! carries nodes, tetrahedra and the Dirichlet patches.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate mesh: tet {tet} has signed volume {volume:e}")]
    Degenerate { tet: usize, volume: f64 },
    #[error("degenerate deformation: amplitude {0} outside the admissible range [0, {MAX_AMPLITUDE}]")]
    AmplitudeOutOfRange(f64),
    #[error("tet {tet}: {reason}")]
    InvalidTet { tet: usize, reason: String },
    #[error("non-manifold mesh: face {face:?} is shared by {count} tets")]
    NonManifold { face: [usize; 3], count: usize },
    #[error("dirichlet patch {patch}: {reason}")]
    InvalidPatch { patch: usize, reason: String },
    #[error("mesh graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest deformation amplitude accepted by [`Mesh::deformed`].
pub const MAX_AMPLITUDE: f64 = 0.4;

/// Nodes with a prescribed scalar value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPatch {
    pub nodes: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    boundary: BTreeSet<usize>,
    dirichlet: Vec<DirichletPatch>,
}

/// Directed edge list of the node graph, sorted by `(source, target)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    #[serde(default)]
    dirichlet: Vec<DirichletPatch>,
}

pub(crate) fn signed_volume(p: [[f64; 3]; 4]) -> f64 {
    let a = sub(p[1], p[0]);
    let b = sub(p[2], p[0]);
    let c = sub(p[3], p[0]);
    det3(a, b, c) / 6.0
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// determinant of the matrix with columns a, b, c
fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1])
        + c[0] * (a[1] * b[2] - a[2] * b[1])
}

impl Mesh {
    /// Validates connectivity and patches, then classifies the boundary.
    pub fn new(
        nodes: Vec<[f64; 3]>,
        tets: Vec<[usize; 4]>,
        dirichlet: Vec<DirichletPatch>,
    ) -> Result<Self, MeshError> {
        let n = nodes.len();
        for (t, tet) in tets.iter().enumerate() {
            if let Some(&bad) = tet.iter().find(|&&i| i >= n) {
                return Err(MeshError::InvalidTet {
                    tet: t,
                    reason: format!("node index {bad} out of range (mesh has {n} nodes)"),
                });
            }
            for a in 0..4 {
                for b in a + 1..4 {
                    if tet[a] == tet[b] {
                        return Err(MeshError::InvalidTet {
                            tet: t,
                            reason: format!("repeated node index {}", tet[a]),
                        });
                    }
                }
            }
        }
        let mut mesh = Mesh {
            nodes,
            tets,
            boundary: BTreeSet::new(),
            dirichlet,
        };
        mesh.check_volumes()?;
        mesh.boundary = mesh.classify_boundary()?;
        mesh.check_patches()?;
        mesh.check_connected()?;
        Ok(mesh)
    }

    fn check_volumes(&self) -> Result<(), MeshError> {
        for t in 0..self.tets.len() {
            let v = signed_volume(self.tet_points(t));
            if !(v > 0.0) {
                return Err(MeshError::Degenerate { tet: t, volume: v });
            }
        }
        Ok(())
    }

    fn check_patches(&self) -> Result<(), MeshError> {
        let mut seen = BTreeSet::new();
        for (p, patch) in self.dirichlet.iter().enumerate() {
            if !patch.value.is_finite() {
                return Err(MeshError::InvalidPatch {
                    patch: p,
                    reason: "non-finite value".into(),
                });
            }
            for &i in &patch.nodes {
                if !self.boundary.contains(&i) {
                    return Err(MeshError::InvalidPatch {
                        patch: p,
                        reason: format!("node {i} is not a boundary node"),
                    });
                }
                if !seen.insert(i) {
                    return Err(MeshError::InvalidPatch {
                        patch: p,
                        reason: format!("node {i} appears in more than one patch"),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_connected(&self) -> Result<(), MeshError> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(());
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for tet in &self.tets {
            for k in 1..4 {
                let a = find(&mut parent, tet[0]);
                let b = find(&mut parent, tet[k]);
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let components = (0..n).filter(|&i| find(&mut parent, i) == i).count();
        if components != 1 {
            return Err(MeshError::Disconnected { components });
        }
        Ok(())
    }

    /// Structured Kuhn-split mesh of the unit cube with Dirichlet patches
    /// `x = 0 -> 0.0` and `x = 1 -> 1.0`.
    pub fn generate_box(nx: usize, ny: usize, nz: usize) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(MeshError::InvalidArgument(format!(
                "cell counts must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    nodes.push([
                        i as f64 / nx as f64,
                        j as f64 / ny as f64,
                        k as f64 / nz as f64,
                    ]);
                }
            }
        }
        // one tet per axis permutation; path (0,0,0) -> ... -> (1,1,1)
        const PERMS: [([usize; 3], bool); 6] = [
            ([0, 1, 2], true),
            ([0, 2, 1], false),
            ([1, 0, 2], false),
            ([1, 2, 0], true),
            ([2, 0, 1], true),
            ([2, 1, 0], false),
        ];
        let mut tets = Vec::with_capacity(6 * nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for (perm, even) in PERMS {
                        let mut corner = [0usize; 3];
                        let mut verts = [id(i, j, k); 4];
                        for (step, &axis) in perm.iter().enumerate() {
                            corner[axis] = 1;
                            verts[step + 1] = id(i + corner[0], j + corner[1], k + corner[2]);
                        }
                        if !even {
                            verts.swap(2, 3);
                        }
                        tets.push(verts);
                    }
                }
            }
        }
        let mut zero = Vec::new();
        let mut one = Vec::new();
        for k in 0..=nz {
            for j in 0..=ny {
                zero.push(id(0, j, k));
                one.push(id(nx, j, k));
            }
        }
        zero.sort_unstable();
        one.sort_unstable();
        Mesh::new(
            nodes,
            tets,
            vec![
                DirichletPatch {
                    nodes: zero,
                    value: 0.0,
                },
                DirichletPatch {
                    nodes: one,
                    value: 1.0,
                },
            ],
        )
    }

    /// Maps `(x, y, z) -> (x, y + a sin(2 pi x) z, z (1 + a x))`.
    ///
    /// Connectivity, boundary and patches are carried over unchanged. The
    /// Jacobian determinant of the map is `1 + a x`, so Kuhn tets of the unit
    /// box never invert for `a >= 0`; amplitudes beyond [`MAX_AMPLITUDE`]
    /// shear elements too strongly and are rejected as degenerate.
    pub fn deformed(&self, amplitude: f64) -> Result<Self, MeshError> {
        if !(0.0..=MAX_AMPLITUDE).contains(&amplitude) {
            return Err(MeshError::AmplitudeOutOfRange(amplitude));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|&[x, y, z]| {
                [
                    x,
                    y + amplitude * (2.0 * PI * x).sin() * z,
                    z * (1.0 + amplitude * x),
                ]
            })
            .collect();
        let mesh = Mesh {
            nodes,
            tets: self.tets.clone(),
            boundary: self.boundary.clone(),
            dirichlet: self.dirichlet.clone(),
        };
        mesh.check_volumes()?;
        Ok(mesh)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, MeshError> {
        let file: MeshFile = serde_json::from_str(text).map_err(|e| MeshError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Mesh::new(file.nodes, file.tets, file.dirichlet)
    }

    pub fn to_json(&self) -> String {
        let file = MeshFile {
            nodes: self.nodes.clone(),
            tets: self.tets.clone(),
            dirichlet: self.dirichlet.clone(),
        };
        serde_json::to_string(&file).expect("mesh serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn dirichlet(&self) -> &[DirichletPatch] {
        &self.dirichlet
    }

    pub fn boundary_nodes(&self) -> &BTreeSet<usize> {
        &self.boundary
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary.contains(&node)
    }

    /// Nodes not on the boundary, ascending.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|i| !self.boundary.contains(i))
            .collect()
    }

    /// Per-node prescribed value, `None` off the Dirichlet patches.
    pub fn dirichlet_values(&self) -> Vec<Option<f64>> {
        let mut values = vec![None; self.nodes.len()];
        for patch in &self.dirichlet {
            for &i in &patch.nodes {
                values[i] = Some(patch.value);
            }
        }
        values
    }

    pub(crate) fn tet_points(&self, t: usize) -> [[f64; 3]; 4] {
        self.tets[t].map(|i| self.nodes[i])
    }

    pub fn element_volumes(&self) -> Vec<f64> {
        (0..self.tets.len())
            .map(|t| signed_volume(self.tet_points(t)).abs())
            .collect()
    }

    /// Boundary faces are those owned by exactly one tet.
    pub fn classify_boundary(&self) -> Result<BTreeSet<usize>, MeshError> {
        let mut faces: HashMap<[usize; 3], usize> = HashMap::new();
        for tet in &self.tets {
            for skip in 0..4 {
                let mut face = [0usize; 3];
                let mut m = 0;
                for (k, &v) in tet.iter().enumerate() {
                    if k != skip {
                        face[m] = v;
                        m += 1;
                    }
                }
                face.sort_unstable();
                *faces.entry(face).or_insert(0) += 1;
            }
        }
        let mut boundary = BTreeSet::new();
        for (face, count) in faces {
            match count {
                1 => boundary.extend(face),
                2 => {}
                _ => return Err(MeshError::NonManifold { face, count }),
            }
        }
        Ok(boundary)
    }

    pub fn extract_edges(&self) -> EdgeList {
        let mut pairs = BTreeSet::new();
        for tet in &self.tets {
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        pairs.insert((tet[a], tet[b]));
                    }
                }
            }
        }
        let (sources, targets) = pairs.into_iter().unzip();
        EdgeList { sources, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_tet() -> Mesh {
        Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn unit_box_counts() {
        let m = Mesh::generate_box(1, 1, 1).unwrap();
        assert_eq!(m.num_nodes(), 8);
        assert_eq!(m.num_tets(), 6);
        assert!((m.element_volumes().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(m.boundary_nodes().len(), 8);

        let m = Mesh::generate_box(2, 2, 2).unwrap();
        assert_eq!(m.num_nodes(), 27);
        assert_eq!(m.num_tets(), 48);
        assert_eq!(m.dirichlet()[0].nodes.len(), 9);
        assert_eq!(m.dirichlet()[1].nodes.len(), 9);
        assert_eq!(m.dirichlet()[0].value, 0.0);
        assert_eq!(m.dirichlet()[1].value, 1.0);
        assert_eq!(m.interior_nodes(), vec![13]);
    }

    #[test]
    fn zero_cells_rejected() {
        assert!(matches!(
            Mesh::generate_box(0, 1, 1),
            Err(MeshError::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_volumes_and_closure() {
        for (nx, ny, nz) in [(1, 1, 1), (2, 3, 4), (4, 4, 4), (5, 2, 3)] {
            let m = Mesh::generate_box(nx, ny, nz).unwrap();
            let expected = 1.0 / (6.0 * (nx * ny * nz) as f64);
            for v in m.element_volumes() {
                assert!((v - expected).abs() < 1e-15);
            }
            let total: f64 = m.element_volumes().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_matches_lattice() {
        for (nx, ny, nz) in [(1, 1, 1), (2, 2, 2), (3, 2, 4), (4, 4, 4)] {
            let m = Mesh::generate_box(nx, ny, nz).unwrap();
            for (i, p) in m.nodes().iter().enumerate() {
                let on_face = p.iter().any(|&c| c == 0.0 || c == 1.0);
                assert_eq!(m.is_boundary(i), on_face, "node {i} at {p:?}");
            }
        }
        let m = Mesh::generate_box(4, 4, 4).unwrap();
        assert_eq!(m.interior_nodes().len(), 27);
    }

    #[test]
    fn reference_simplex() {
        let m = reference_tet();
        assert_eq!(m.element_volumes(), vec![1.0 / 6.0]);
        assert_eq!(m.boundary_nodes().len(), 4);
        assert_eq!(m.extract_edges().len(), 12);
    }

    #[test]
    fn edges_symmetric_sorted_no_loops() {
        let m = Mesh::generate_box(3, 2, 2).unwrap().deformed(0.2).unwrap();
        let edges = m.extract_edges();
        let set: BTreeSet<_> = edges.iter().collect();
        assert_eq!(set.len(), edges.len());
        for (s, t) in edges.iter() {
            assert_ne!(s, t);
            assert!(set.contains(&(t, s)));
        }
        let listed: Vec<_> = edges.iter().collect();
        let sorted: Vec<_> = set.into_iter().collect();
        assert_eq!(listed, sorted);
    }

    #[test]
    fn unit_cube_degrees() {
        let m = Mesh::generate_box(1, 1, 1).unwrap();
        let edges = m.extract_edges();
        let mut degree = vec![0; 8];
        for (s, _) in edges.iter() {
            degree[s] += 1;
        }
        assert!(degree.iter().all(|&d| d >= 3), "{degree:?}");
        // 12 cube edges + 6 face diagonals + 1 body diagonal
        assert_eq!(edges.len(), 2 * 19);
    }

    #[test]
    fn deformation_map() {
        let m = Mesh::generate_box(2, 2, 2).unwrap();
        assert_eq!(m.deformed(0.0).unwrap().nodes(), m.nodes());

        let d = m.deformed(0.25).unwrap();
        let i = m.nodes().iter().position(|p| *p == [1.0, 0.0, 1.0]).unwrap();
        let p = d.nodes()[i];
        assert_eq!(p[0], 1.0);
        assert!(p[1].abs() < 1e-15);
        assert_eq!(p[2], 1.25);
        assert_eq!(d.tets(), m.tets());
        assert_eq!(d.boundary_nodes(), m.boundary_nodes());
        assert_eq!(d.dirichlet(), m.dirichlet());
    }

    #[test]
    fn deformed_box_volumes_positive() {
        let d = Mesh::generate_box(4, 4, 4).unwrap().deformed(0.25).unwrap();
        let vols = d.element_volumes();
        assert_eq!(vols.len(), 384);
        assert!(vols.iter().all(|&v| v > 0.0));
        // signed volumes, not just magnitudes
        for t in 0..d.num_tets() {
            assert!(signed_volume(d.tet_points(t)) > 0.0);
        }
        // exact volume of the image: the Jacobian determinant is 1 + a x
        let total: f64 = vols.iter().sum();
        assert!((total - 1.125).abs() < 1e-12, "{total}");
    }

    #[test]
    fn large_amplitude_degenerates() {
        let m = Mesh::generate_box(4, 4, 4).unwrap();
        assert!(matches!(
            m.deformed(0.9),
            Err(MeshError::AmplitudeOutOfRange(_))
        ));
        assert!(matches!(
            m.deformed(-0.1),
            Err(MeshError::AmplitudeOutOfRange(_))
        ));
        assert!(m.deformed(MAX_AMPLITUDE).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let m = Mesh::generate_box(2, 2, 2).unwrap().deformed(0.3).unwrap();
        let back = Mesh::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.nodes().iter().zip(m.nodes()) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }
    }

    #[test]
    fn validation_errors() {
        let bad_index = r#"{"nodes":[[0,0,0],[1,0,0],[0,1,0],[0,0,1]],"tets":[[0,1,2,4]],"dirichlet":[]}"#;
        assert!(matches!(
            Mesh::from_json(bad_index),
            Err(MeshError::InvalidTet { tet: 0, .. })
        ));
        let inverted = r#"{"nodes":[[0,0,0],[1,0,0],[0,1,0],[0,0,1]],"tets":[[0,2,1,3]],"dirichlet":[]}"#;
        let err = Mesh::from_json(inverted).unwrap_err();
        assert!(matches!(err, MeshError::Degenerate { tet: 0, .. }));
        assert!(err.to_string().contains("tet 0"));

        let malformed = "{\"nodes\":[[0,0,0],\n[1,0]]}";
        match Mesh::from_json(malformed) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_manifold_face_detected() {
        let nodes = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.1, 0.1, 2.0],
        ];
        // three tets on face (0,1,2)
        let tets = vec![[0, 1, 2, 3], [0, 2, 1, 4], [0, 1, 2, 5]];
        assert!(matches!(
            Mesh::new(nodes, tets, vec![]),
            Err(MeshError::NonManifold { count: 3, .. })
        ));
    }

    #[test]
    fn patches_must_be_boundary_and_disjoint() {
        let m = Mesh::generate_box(2, 2, 2).unwrap();
        let interior = DirichletPatch {
            nodes: vec![13],
            value: 0.0,
        };
        assert!(matches!(
            Mesh::new(m.nodes().to_vec(), m.tets().to_vec(), vec![interior]),
            Err(MeshError::InvalidPatch { .. })
        ));
        let p = DirichletPatch {
            nodes: vec![0],
            value: 0.0,
        };
        assert!(matches!(
            Mesh::new(m.nodes().to_vec(), m.tets().to_vec(), vec![p.clone(), p]),
            Err(MeshError::InvalidPatch { patch: 1, .. })
        ));
    }

    #[test]
    fn disconnected_rejected() {
        let mut nodes = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        nodes.extend([[5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [5.0, 1.0, 0.0], [5.0, 0.0, 1.0]]);
        assert!(matches!(
            Mesh::new(nodes, vec![[0, 1, 2, 3], [4, 5, 6, 7]], vec![]),
            Err(MeshError::Disconnected { components: 2 })
        ));
    }
}
