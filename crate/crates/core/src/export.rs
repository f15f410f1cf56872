//! Legacy ASCII VTK output of nodal fields.

use std::io::{self, Write};

use thiserror::Error;

use crate::mesh::Mesh;

pub const VTK_HEADER: &str = "# vtk DataFile Version 3.0";
pub const VTK_TETRA: u8 = 10;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("field {name:?} has {found} values, mesh has {expected} nodes")]
    FieldLength {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("field name {0:?} must be a non-empty token without whitespace")]
    FieldName(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes `mesh` as an unstructured grid with one scalar point field per
/// entry of `fields`.
pub fn write_vtk(
    mut out: impl Write,
    mesh: &Mesh,
    fields: &[(&str, &[f64])],
) -> Result<(), ExportError> {
    let n = mesh.num_nodes();
    for (name, values) in fields {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(ExportError::FieldName(name.to_string()));
        }
        if values.len() != n {
            return Err(ExportError::FieldLength {
                name: name.to_string(),
                expected: n,
                found: values.len(),
            });
        }
    }
    writeln!(out, "{VTK_HEADER}")?;
    writeln!(out, "meshpinn")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {n} double")?;
    for [x, y, z] in mesh.nodes() {
        writeln!(out, "{x:e} {y:e} {z:e}")?;
    }
    let tets = mesh.tets();
    writeln!(out, "CELLS {} {}", tets.len(), 5 * tets.len())?;
    for [a, b, c, d] in tets {
        writeln!(out, "4 {a} {b} {c} {d}")?;
    }
    writeln!(out, "CELL_TYPES {}", tets.len())?;
    for _ in tets {
        writeln!(out, "{VTK_TETRA}")?;
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {n}")?;
        for (name, values) in fields {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(out, "{v:e}")?;
            }
        }
    }
    Ok(())
}
