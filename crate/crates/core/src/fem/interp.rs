//! Transfer of Q1 vertex fields between a mesh and its nested refinement.

use crate::error::{Error, Result};
use crate::mesh::{trilinear_values, Mesh, NestedMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDirection {
    CoarseToFine,
    FineToCoarse,
}

/// Interpolate a (possibly multi-component, interleaved) Q1 vertex field
/// across a [`NestedMap`]. Coarse-to-fine reproduces the coarse FE
/// function exactly; fine-to-coarse restricts pointwise at the coarse
/// vertex locations.
pub fn interpolate_nested(
    map: &NestedMap,
    coarse: &Mesh,
    fine: &Mesh,
    values: &[f64],
    components: usize,
    direction: TransferDirection,
) -> Result<Vec<f64>> {
    match direction {
        TransferDirection::CoarseToFine => {
            if values.len() != coarse.n_vertices() * components {
                return Err(Error::Usage(format!(
                    "coarse field has {} entries, expected {}",
                    values.len(),
                    coarse.n_vertices() * components
                )));
            }
            if map.fine_vertex_parent.len() != fine.n_vertices() {
                return Err(Error::Usage("nested map does not match fine mesh".into()));
            }
            let mut out = vec![0.0; fine.n_vertices() * components];
            for (fv, &(cell, xi)) in map.fine_vertex_parent.iter().enumerate() {
                let shape = trilinear_values(&xi);
                for c in 0..components {
                    let mut s = 0.0;
                    for (k, &cv) in coarse.cells[cell].iter().enumerate() {
                        s += shape[k] * values[cv * components + c];
                    }
                    out[fv * components + c] = s;
                }
            }
            Ok(out)
        }
        TransferDirection::FineToCoarse => {
            if values.len() != fine.n_vertices() * components {
                return Err(Error::Usage(format!(
                    "fine field has {} entries, expected {}",
                    values.len(),
                    fine.n_vertices() * components
                )));
            }
            if map.vertex_embedding.len() != coarse.n_vertices() {
                return Err(Error::Usage("nested map does not match coarse mesh".into()));
            }
            let mut out = vec![0.0; coarse.n_vertices() * components];
            for (cv, &fv) in map.vertex_embedding.iter().enumerate() {
                for c in 0..components {
                    out[cv * components + c] = values[fv * components + c];
                }
            }
            Ok(out)
        }
    }
}
