//! Legacy-VTK ASCII export of meshes and nodal/cell fields.

use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use super::Mesh;
use crate::error::Result;

#[derive(Default)]
pub struct VtkFields<'a> {
    pub point_scalars: Vec<(&'a str, &'a [f64])>,
    /// Interleaved xyz vectors, length 3 * n_vertices.
    pub point_vectors: Vec<(&'a str, &'a [f64])>,
    pub cell_scalars: Vec<(&'a str, &'a [f64])>,
}

/// Write a mesh (optionally on moved coordinates) with attached fields.
pub fn write_vtk(
    path: &Path,
    mesh: &Mesh,
    coords: &[Point3<f64>],
    fields: &VtkFields,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "efsi snapshot")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", coords.len())?;
    for p in coords {
        writeln!(w, "{:.9e} {:.9e} {:.9e}", p.x, p.y, p.z)?;
    }
    writeln!(w, "CELLS {} {}", mesh.n_cells(), mesh.n_cells() * 9)?;
    for cell in &mesh.cells {
        write!(w, "8")?;
        for v in cell {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.n_cells())?;
    for _ in 0..mesh.n_cells() {
        writeln!(w, "12")?;
    }
    if !fields.point_scalars.is_empty() || !fields.point_vectors.is_empty() {
        writeln!(w, "POINT_DATA {}", coords.len())?;
        for (name, data) in &fields.point_scalars {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in data.iter() {
                writeln!(w, "{v:.9e}")?;
            }
        }
        for (name, data) in &fields.point_vectors {
            writeln!(w, "VECTORS {name} double")?;
            for i in 0..coords.len() {
                writeln!(
                    w,
                    "{:.9e} {:.9e} {:.9e}",
                    data[3 * i],
                    data[3 * i + 1],
                    data[3 * i + 2]
                )?;
            }
        }
    }
    if !fields.cell_scalars.is_empty() {
        writeln!(w, "CELL_DATA {}", mesh.n_cells())?;
        for (name, data) in &fields.cell_scalars {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in data.iter() {
                writeln!(w, "{v:.9e}")?;
            }
        }
    }
    Ok(())
}
