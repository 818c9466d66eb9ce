//! Conforming hexahedral meshes for the ventricle and debug geometries.
//!
//! A [`Mesh`] stores vertices, 8-node hexahedral cells and tagged boundary
//! facets. Coordinates are in meters. Cells use the common VTK hexahedron
//! numbering: vertices 0-3 on the bottom face (counter-clockwise seen from
//! below is 0,3,2,1), 4-7 stacked above them.
//!
//! Meshes are immutable after construction and can be shared read-only
//! across threads. Deformed configurations are expressed by passing an
//! alternative coordinate slice to the geometry helpers instead of mutating
//! the mesh.

mod generate;
mod refine;
pub mod vtk;

pub use generate::{box_mesh, box_mesh_tagged, build_ellipsoid_ventricle, EllipsoidParams};
pub use refine::{refine_nested, NestedMap};

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Labels for boundary facets of the fluid and solid meshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    FluidBase,
    SolidBase,
    Epicardium,
    Interface,
    MitralOrifice,
    AorticOrifice,
}

impl BoundaryTag {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryTag::FluidBase => "fluid_base",
            BoundaryTag::SolidBase => "solid_base",
            BoundaryTag::Epicardium => "epicardium",
            BoundaryTag::Interface => "interface",
            BoundaryTag::MitralOrifice => "mitral_orifice",
            BoundaryTag::AorticOrifice => "aortic_orifice",
        }
    }
}

/// A boundary quadrilateral, owned by exactly one cell.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFacet {
    pub cell: usize,
    /// Local face index into [`HEX_FACES`].
    pub local_face: u8,
    /// Global vertex indices, ordered so the bilinear normal points outward.
    pub vertices: [usize; 4],
    pub tag: BoundaryTag,
}

/// Reference coordinates of the 8 hexahedron vertices on the unit cube.
pub const HEX_VERTICES: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// Local vertex indices of the 6 faces, ordered so that the bilinear
/// surface normal points out of the cell. Order: -z, +z, -y, +x, +y, -x.
pub const HEX_FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
];

/// Local vertex pairs of the 12 edges.
pub const HEX_EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub cells: Vec<[usize; 8]>,
    pub facets: Vec<BoundaryFacet>,
    /// Mean cell diameter (m).
    pub h: f64,
    /// Cells adjacent to each vertex, in ascending cell order.
    vertex_cells: Vec<Vec<usize>>,
}

impl Mesh {
    /// Assemble a mesh from raw arrays, computing `h` and validating that
    /// every cell has positive Jacobian determinant at the (3x3x3) Gauss
    /// points.
    pub fn new(
        vertices: Vec<Point3<f64>>,
        cells: Vec<[usize; 8]>,
        facets: Vec<BoundaryFacet>,
    ) -> Result<Self> {
        let mut vertex_cells = vec![Vec::new(); vertices.len()];
        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                vertex_cells[v].push(c);
            }
        }
        let mut mesh = Mesh {
            vertices,
            cells,
            facets,
            h: 0.0,
            vertex_cells,
        };
        mesh.h = mesh.mean_diameter(&mesh.vertices);
        mesh.check_jacobians(&mesh.vertices)?;
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn vertex_cells(&self, v: usize) -> &[usize] {
        &self.vertex_cells[v]
    }

    /// Cell diameter: largest distance between two of its vertices.
    pub fn cell_diameter(&self, cell: usize, coords: &[Point3<f64>]) -> f64 {
        let vs = &self.cells[cell];
        let mut d2: f64 = 0.0;
        for i in 0..8 {
            for j in (i + 1)..8 {
                d2 = d2.max((coords[vs[i]] - coords[vs[j]]).norm_squared());
            }
        }
        d2.sqrt()
    }

    pub fn mean_diameter(&self, coords: &[Point3<f64>]) -> f64 {
        let sum: f64 = (0..self.n_cells())
            .map(|c| self.cell_diameter(c, coords))
            .sum();
        sum / self.n_cells() as f64
    }

    /// Trilinear geometry Jacobian at a reference point.
    pub fn jacobian(&self, cell: usize, xi: &[f64; 3], coords: &[Point3<f64>]) -> nalgebra::Matrix3<f64> {
        let grads = trilinear_ref_gradients(xi);
        let mut j = nalgebra::Matrix3::zeros();
        for (k, &v) in self.cells[cell].iter().enumerate() {
            let x = coords[v].coords;
            for a in 0..3 {
                for b in 0..3 {
                    j[(a, b)] += x[a] * grads[k][b];
                }
            }
        }
        j
    }

    /// Smallest Jacobian determinant over all cells at the 3x3x3 Gauss
    /// points of the given configuration.
    pub fn min_jacobian(&self, coords: &[Point3<f64>]) -> f64 {
        let pts = crate::fem::QuadratureRule::gauss_hex(3).points;
        let mut min = f64::MAX;
        for c in 0..self.n_cells() {
            for p in &pts {
                min = min.min(self.jacobian(c, &[p.x, p.y, p.z], coords).determinant());
            }
        }
        min
    }

    /// Verify positive Jacobian determinant at all 3x3x3 Gauss points.
    pub fn check_jacobians(&self, coords: &[Point3<f64>]) -> Result<()> {
        let pts = crate::fem::QuadratureRule::gauss_hex(3).points;
        for c in 0..self.n_cells() {
            for p in &pts {
                let det = self.jacobian(c, &[p.x, p.y, p.z], coords).determinant();
                if det <= 0.0 {
                    return Err(Error::MeshQuality(format!(
                        "cell {c} has non-positive Jacobian determinant {det:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cell volume by 2x2x2 Gauss quadrature on the trilinear map.
    pub fn cell_volume(&self, cell: usize, coords: &[Point3<f64>]) -> f64 {
        let quad = crate::fem::QuadratureRule::gauss_hex(2);
        quad.points
            .iter()
            .zip(&quad.weights)
            .map(|(p, w)| w * self.jacobian(cell, &[p.x, p.y, p.z], coords).determinant())
            .sum()
    }

    pub fn total_volume(&self, coords: &[Point3<f64>]) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_volume(c, coords)).sum()
    }

    pub fn facets_with(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryFacet> {
        self.facets.iter().filter(move |f| f.tag == tag)
    }

    /// Sorted unique vertex indices appearing on facets with the given tag.
    pub fn vertices_with(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut vs: Vec<usize> = self
            .facets_with(tag)
            .flat_map(|f| f.vertices.iter().copied())
            .collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    }

    /// Unit outward normal of a boundary facet, evaluated at the facet
    /// center. Errors if the (cell, local_face) pair is shared by two cells.
    pub fn facet_normal(&self, cell: usize, local_face: u8) -> Result<Vector3<f64>> {
        let key = self.face_key(cell, local_face);
        let mut owners = 0;
        for c in 0..self.n_cells() {
            for lf in 0..6 {
                if self.face_key(c, lf as u8) == key {
                    owners += 1;
                }
            }
        }
        if owners != 1 {
            return Err(Error::Usage(format!(
                "face {local_face} of cell {cell} is interior (shared by {owners} cells)"
            )));
        }
        Ok(self.facet_normal_unchecked(cell, local_face, &self.vertices))
    }

    pub fn facet_normal_unchecked(
        &self,
        cell: usize,
        local_face: u8,
        coords: &[Point3<f64>],
    ) -> Vector3<f64> {
        let vs = facet_vertices(&self.cells[cell], local_face);
        let p: Vec<Vector3<f64>> = vs.iter().map(|&v| coords[v].coords).collect();
        // Tangents of the bilinear patch at its center.
        let tu = (p[1] + p[2] - p[0] - p[3]) * 0.5;
        let tv = (p[3] + p[2] - p[0] - p[1]) * 0.5;
        tu.cross(&tv).normalize()
    }

    fn face_key(&self, cell: usize, local_face: u8) -> [usize; 4] {
        let mut vs = facet_vertices(&self.cells[cell], local_face);
        vs.sort_unstable();
        vs
    }

    /// Facet area on a given configuration.
    pub fn facet_area(&self, facet: &BoundaryFacet, coords: &[Point3<f64>]) -> f64 {
        facet_quadrature(facet, coords).iter().map(|q| q.weight).sum()
    }

    /// Build global edge and face tables (first-seen deterministic order).
    pub fn entities(&self) -> MeshEntities {
        let mut edge_of = HashMap::new();
        let mut face_of = HashMap::new();
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        let mut cell_edges = Vec::with_capacity(self.n_cells());
        let mut cell_faces = Vec::with_capacity(self.n_cells());
        for cell in &self.cells {
            let mut ce = [0usize; 12];
            for (k, e) in HEX_EDGES.iter().enumerate() {
                let mut key = [cell[e[0]], cell[e[1]]];
                key.sort_unstable();
                let id = *edge_of.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
                ce[k] = id;
            }
            cell_edges.push(ce);
            let mut cf = [0usize; 6];
            for (k, f) in HEX_FACES.iter().enumerate() {
                let mut key = [cell[f[0]], cell[f[1]], cell[f[2]], cell[f[3]]];
                key.sort_unstable();
                let id = *face_of.entry(key).or_insert_with(|| {
                    faces.push(key);
                    faces.len() - 1
                });
                cf[k] = id;
            }
            cell_faces.push(cf);
        }
        MeshEntities {
            edges,
            faces,
            cell_edges,
            cell_faces,
        }
    }

    /// Area-weighted outward unit normals at the vertices of all facets
    /// carrying `tag`, on the given configuration.
    pub fn vertex_normals(&self, tag: BoundaryTag, coords: &[Point3<f64>]) -> HashMap<usize, Vector3<f64>> {
        let mut acc: HashMap<usize, Vector3<f64>> = HashMap::new();
        for f in self.facets_with(tag) {
            let n = self.facet_normal_unchecked(f.cell, f.local_face, coords);
            let area = self.facet_area(f, coords);
            for &v in &f.vertices {
                *acc.entry(v).or_insert_with(Vector3::zeros) += n * (area * 0.25);
            }
        }
        for n in acc.values_mut() {
            *n = n.normalize();
        }
        acc
    }
}

/// Edge/face connectivity shared by Q2 spaces and nested refinement.
pub struct MeshEntities {
    pub edges: Vec<[usize; 2]>,
    pub faces: Vec<[usize; 4]>,
    pub cell_edges: Vec<[usize; 12]>,
    pub cell_faces: Vec<[usize; 6]>,
}

/// Global vertex indices of a local face, in outward orientation.
pub fn facet_vertices(cell: &[usize; 8], local_face: u8) -> [usize; 4] {
    let f = HEX_FACES[local_face as usize];
    [cell[f[0]], cell[f[1]], cell[f[2]], cell[f[3]]]
}

/// Gradients of the 8 trilinear shape functions at a reference point.
pub fn trilinear_ref_gradients(xi: &[f64; 3]) -> [[f64; 3]; 8] {
    let mut g = [[0.0; 3]; 8];
    for (k, v) in HEX_VERTICES.iter().enumerate() {
        let f = |a: usize| if v[a] > 0.5 { xi[a] } else { 1.0 - xi[a] };
        let df = |a: usize| if v[a] > 0.5 { 1.0 } else { -1.0 };
        g[k] = [
            df(0) * f(1) * f(2),
            f(0) * df(1) * f(2),
            f(0) * f(1) * df(2),
        ];
    }
    g
}

/// Values of the 8 trilinear shape functions at a reference point.
pub fn trilinear_values(xi: &[f64; 3]) -> [f64; 8] {
    let mut n = [0.0; 8];
    for (k, v) in HEX_VERTICES.iter().enumerate() {
        let f = |a: usize| if v[a] > 0.5 { xi[a] } else { 1.0 - xi[a] };
        n[k] = f(0) * f(1) * f(2);
    }
    n
}

/// One surface quadrature point on a bilinear boundary facet.
pub struct FacetQp {
    pub point: Point3<f64>,
    /// Shape function values of the 4 facet vertices.
    pub shape: [f64; 4],
    /// Area weight.
    pub weight: f64,
    /// Unit outward normal at this point.
    pub normal: Vector3<f64>,
}

/// 2x2 Gauss quadrature on a bilinear facet in the given configuration.
pub fn facet_quadrature(facet: &BoundaryFacet, coords: &[Point3<f64>]) -> Vec<FacetQp> {
    let p: Vec<Vector3<f64>> = facet.vertices.iter().map(|&v| coords[v].coords).collect();
    let g = 0.5 - 0.5 / 3.0f64.sqrt();
    let nodes = [g, 1.0 - g];
    let mut out = Vec::with_capacity(4);
    for &u in &nodes {
        for &v in &nodes {
            let shape = [
                (1.0 - u) * (1.0 - v),
                u * (1.0 - v),
                u * v,
                (1.0 - u) * v,
            ];
            let x = p[0] * shape[0] + p[1] * shape[1] + p[2] * shape[2] + p[3] * shape[3];
            let tu = (p[1] - p[0]) * (1.0 - v) + (p[2] - p[3]) * v;
            let tv = (p[3] - p[0]) * (1.0 - u) + (p[2] - p[1]) * u;
            let cr = tu.cross(&tv);
            let area = cr.norm();
            out.push(FacetQp {
                point: Point3::from(x),
                shape,
                weight: 0.25 * area,
                normal: cr / area,
            });
        }
    }
    out
}

/// Vertex-for-vertex conformity of two facet sets: every `tag` facet of
/// `a` must match exactly one `tag` facet of `b` with identical coordinates.
pub fn check_conforming(a: &Mesh, b: &Mesh, tag: BoundaryTag) -> Result<()> {
    let key = |m: &Mesh, f: &BoundaryFacet| -> Vec<[u64; 3]> {
        let mut k: Vec<[u64; 3]> = f
            .vertices
            .iter()
            .map(|&v| {
                let p = m.vertices[v];
                [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
            })
            .collect();
        k.sort_unstable();
        k
    };
    let mut b_keys: HashMap<Vec<[u64; 3]>, usize> = HashMap::new();
    for f in b.facets_with(tag) {
        *b_keys.entry(key(b, f)).or_insert(0) += 1;
    }
    let mut n_a = 0;
    for f in a.facets_with(tag) {
        n_a += 1;
        match b_keys.get_mut(&key(a, f)) {
            Some(c) if *c > 0 => *c -= 1,
            _ => {
                return Err(Error::Geometry(format!(
                    "facet of cell {} has no conforming partner",
                    f.cell
                )))
            }
        }
    }
    let n_b: usize = b_keys.values().sum::<usize>() + n_a;
    if n_b != a.facets_with(tag).count() + b.facets_with(tag).count() - n_a {
        return Err(Error::Geometry("interface facet counts differ".into()));
    }
    Ok(())
}
