//! Uniform nested octasection of hexahedral meshes.

use nalgebra::Point3;

use super::{facet_vertices, BoundaryFacet, Mesh, HEX_FACES};
use crate::error::Result;

/// Relation between a coarse mesh and its uniform octasection.
#[derive(Debug, Clone)]
pub struct NestedMap {
    /// Coarse parent of each fine cell.
    pub parent_of_cell: Vec<usize>,
    /// Fine vertex coinciding with each coarse vertex.
    pub vertex_embedding: Vec<usize>,
    /// For each fine vertex: owning coarse cell and reference coordinates
    /// inside it. Used for exact Q1 transfer.
    pub fine_vertex_parent: Vec<(usize, [f64; 3])>,
}

/// Split every cell into 8 children through edge midpoints, face centers
/// and the cell center. Boundary tags are inherited by the child facets.
pub fn refine_nested(mesh: &Mesh) -> Result<(Mesh, NestedMap)> {
    let ents = mesh.entities();
    let nv = mesh.n_vertices();
    let ne = ents.edges.len();
    let nf = ents.faces.len();

    // Fine vertices: coarse vertices, then edge midpoints, face centers,
    // cell centers.
    let mut vertices: Vec<Point3<f64>> = mesh.vertices.clone();
    for e in &ents.edges {
        vertices.push(Point3::from(
            (mesh.vertices[e[0]].coords + mesh.vertices[e[1]].coords) / 2.0,
        ));
    }
    for f in &ents.faces {
        vertices.push(Point3::from(
            f.iter().map(|&v| mesh.vertices[v].coords).sum::<nalgebra::Vector3<f64>>() / 4.0,
        ));
    }
    for cell in &mesh.cells {
        vertices.push(Point3::from(
            cell.iter().map(|&v| mesh.vertices[v].coords).sum::<nalgebra::Vector3<f64>>() / 8.0,
        ));
    }

    let mut fine_vertex_parent = vec![(usize::MAX, [0.0; 3]); vertices.len()];
    let mut cells = Vec::with_capacity(8 * mesh.n_cells());
    let mut parent_of_cell = Vec::with_capacity(8 * mesh.n_cells());

    // Fine vertex id at lattice point (a,b,c) in {0,1,2}^3 of cell `c`.
    let corner_at = |c: usize, a: usize, b: usize, k: usize| -> usize {
        let local = super::HEX_VERTICES
            .iter()
            .position(|v| {
                (v[0] as usize * 2 == a) && (v[1] as usize * 2 == b) && (v[2] as usize * 2 == k)
            })
            .unwrap();
        mesh.cells[c][local]
    };
    let lattice_id = |c: usize, a: usize, b: usize, k: usize| -> usize {
        let odd = [a % 2, b % 2, k % 2];
        match odd.iter().sum::<usize>() {
            0 => corner_at(c, a, b, k),
            1 => {
                // Edge midpoint: endpoints differ in the odd coordinate.
                let (mut lo, mut hi) = ([a, b, k], [a, b, k]);
                for d in 0..3 {
                    if odd[d] == 1 {
                        lo[d] -= 1;
                        hi[d] += 1;
                    }
                }
                let v0 = corner_at(c, lo[0], lo[1], lo[2]);
                let v1 = corner_at(c, hi[0], hi[1], hi[2]);
                let mut key = [v0, v1];
                key.sort_unstable();
                let e = ents.cell_edges[c]
                    .iter()
                    .copied()
                    .find(|&e| ents.edges[e] == key)
                    .unwrap();
                nv + e
            }
            2 => {
                // Face center: the even coordinate selects the face.
                let d = odd.iter().position(|&o| o == 0).unwrap();
                let val = [a, b, k][d];
                let lf = match (d, val) {
                    (2, 0) => 0,
                    (2, 2) => 1,
                    (1, 0) => 2,
                    (0, 2) => 3,
                    (1, 2) => 4,
                    (0, 0) => 5,
                    _ => unreachable!(),
                };
                nv + ne + ents.cell_faces[c][lf]
            }
            _ => nv + ne + nf + c,
        }
    };

    for c in 0..mesh.n_cells() {
        // Record parent reference coordinates for the 27 lattice points.
        for a in 0..3 {
            for b in 0..3 {
                for k in 0..3 {
                    let id = lattice_id(c, a, b, k);
                    if fine_vertex_parent[id].0 == usize::MAX {
                        fine_vertex_parent[id] =
                            (c, [a as f64 / 2.0, b as f64 / 2.0, k as f64 / 2.0]);
                    }
                }
            }
        }
        for dk in 0..2 {
            for db in 0..2 {
                for da in 0..2 {
                    let v = |oa: usize, ob: usize, ok: usize| {
                        lattice_id(c, da + oa, db + ob, dk + ok)
                    };
                    cells.push([
                        v(0, 0, 0),
                        v(1, 0, 0),
                        v(1, 1, 0),
                        v(0, 1, 0),
                        v(0, 0, 1),
                        v(1, 0, 1),
                        v(1, 1, 1),
                        v(0, 1, 1),
                    ]);
                    parent_of_cell.push(c);
                }
            }
        }
    }

    // Child facets: each coarse boundary facet splits into the matching
    // faces of the 4 children adjacent to it.
    let mut facets = Vec::with_capacity(4 * mesh.facets.len());
    for f in &mesh.facets {
        let lf = f.local_face as usize;
        for (da, db, dk) in child_offsets_on_face(lf) {
            let child = f.cell * 8 + dk * 4 + db * 2 + da;
            let cell = &cells[child];
            facets.push(BoundaryFacet {
                cell: child,
                local_face: f.local_face,
                vertices: facet_vertices(cell, f.local_face),
                tag: f.tag,
            });
        }
    }

    let fine = Mesh::new(vertices, cells, facets)?;
    let map = NestedMap {
        parent_of_cell,
        vertex_embedding: (0..nv).collect(),
        fine_vertex_parent,
    };
    Ok((fine, map))
}

/// Child (da, db, dk) offsets adjacent to a local face.
fn child_offsets_on_face(local_face: usize) -> [(usize, usize, usize); 4] {
    let mut out = [(0, 0, 0); 4];
    let mut idx = 0;
    for dk in 0..2 {
        for db in 0..2 {
            for da in 0..2 {
                let on = match local_face {
                    0 => dk == 0,
                    1 => dk == 1,
                    2 => db == 0,
                    3 => da == 1,
                    4 => db == 1,
                    5 => da == 0,
                    _ => unreachable!(),
                };
                if on {
                    out[idx] = (da, db, dk);
                    idx += 1;
                }
            }
        }
    }
    debug_assert_eq!(idx, 4);
    let _ = HEX_FACES; // face numbering documented there
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, build_ellipsoid_ventricle, BoundaryTag, EllipsoidParams};

    #[test]
    fn cube_octasection_counts_and_parents() {
        let coarse = box_mesh([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        let (fine, map) = refine_nested(&coarse).unwrap();
        assert_eq!(fine.n_cells(), 64);
        for parent in 0..8 {
            let children: Vec<usize> = (0..64)
                .filter(|&c| map.parent_of_cell[c] == parent)
                .collect();
            assert_eq!(children.len(), 8);
        }
        // Children tile the parent exactly.
        for parent in 0..coarse.n_cells() {
            let pv = coarse.cell_volume(parent, &coarse.vertices);
            let cv: f64 = (0..fine.n_cells())
                .filter(|&c| map.parent_of_cell[c] == parent)
                .map(|c| fine.cell_volume(c, &fine.vertices))
                .sum();
            assert!((pv - cv).abs() < 1e-14);
        }
    }

    #[test]
    fn tags_inherited_and_h_halved() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let (fine, _) = refine_nested(&solid).unwrap();
        assert_eq!(fine.facets.len(), 4 * solid.facets.len());
        for tag in [
            BoundaryTag::Interface,
            BoundaryTag::Epicardium,
            BoundaryTag::SolidBase,
        ] {
            assert_eq!(
                fine.facets_with(tag).count(),
                4 * solid.facets_with(tag).count()
            );
        }
        assert!((fine.h / solid.h - 0.5).abs() < 0.05 * 0.5);
        // Volume preserved.
        let v0 = solid.total_volume(&solid.vertices);
        let v1 = fine.total_volume(&fine.vertices);
        assert!((v0 - v1).abs() < 1e-10 * v0);
    }

    #[test]
    fn refine_twice_quarters_h() {
        let coarse = box_mesh([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        let (fine, _) = refine_nested(&coarse).unwrap();
        let (finer, _) = refine_nested(&fine).unwrap();
        assert!((finer.h / coarse.h - 0.25).abs() < 0.1 * 0.25);
    }

    #[test]
    fn vertex_embedding_is_coincident() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let (fine, map) = refine_nested(&solid).unwrap();
        for (cv, &fv) in map.vertex_embedding.iter().enumerate() {
            assert_eq!(solid.vertices[cv], fine.vertices[fv]);
        }
    }
}
