//! Finite element spaces, assembly and linear solvers shared by all
//! physics modules.
//!
//! Spaces are continuous Lagrange elements on hexahedra: Q1 (nodes at
//! vertices) or Q2 (nodes at vertices, edge midpoints, face centers and
//! cell centers). Geometry is always the trilinear vertex map, so Q2
//! fields are subparametric.

mod assemble;
mod interp;
mod quadrature;
pub mod solvers;
mod sparse;

pub use assemble::{assemble_matrix, assemble_vector, mass_matrix, stiffness_matrix, CellShape, QpCtx};
pub use interp::{interpolate_nested, TransferDirection};
pub use quadrature::QuadratureRule;
pub use solvers::{solve_cg, solve_gmres, Ilu0, Jacobi, Preconditioner, SolveOpts, SolveStats};
pub use sparse::SparseMatrix;

use std::sync::Arc;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::mesh::{Mesh, HEX_EDGES, HEX_FACES, HEX_VERTICES};

/// Scalar or vector Lagrange space of degree 1 or 2.
pub struct FeSpace {
    pub mesh: Arc<Mesh>,
    pub degree: u8,
    pub components: u8,
    /// Scalar node indices per cell (8 for Q1, 27 for Q2).
    cell_nodes: Vec<Vec<usize>>,
    n_nodes: usize,
    node_points: Vec<Point3<f64>>,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, degree: u8, components: u8) -> Self {
        assert!(degree == 1 || degree == 2, "only Q1/Q2 supported");
        assert!(components == 1 || components == 3);
        let (cell_nodes, n_nodes, node_points) = match degree {
            1 => {
                let nodes: Vec<Vec<usize>> = mesh.cells.iter().map(|c| c.to_vec()).collect();
                (nodes, mesh.n_vertices(), mesh.vertices.clone())
            }
            _ => {
                let ents = mesh.entities();
                let nv = mesh.n_vertices();
                let ne = ents.edges.len();
                let nf = ents.faces.len();
                let mut points = mesh.vertices.clone();
                for e in &ents.edges {
                    points.push(Point3::from(
                        (mesh.vertices[e[0]].coords + mesh.vertices[e[1]].coords) / 2.0,
                    ));
                }
                for f in &ents.faces {
                    points.push(Point3::from(
                        f.iter()
                            .map(|&v| mesh.vertices[v].coords)
                            .sum::<Vector3<f64>>()
                            / 4.0,
                    ));
                }
                for c in &mesh.cells {
                    points.push(Point3::from(
                        c.iter()
                            .map(|&v| mesh.vertices[v].coords)
                            .sum::<Vector3<f64>>()
                            / 8.0,
                    ));
                }
                let mut nodes = Vec::with_capacity(mesh.n_cells());
                for (c, cell) in mesh.cells.iter().enumerate() {
                    let mut n: Vec<usize> = cell.to_vec();
                    n.extend(ents.cell_edges[c].iter().map(|&e| nv + e));
                    n.extend(ents.cell_faces[c].iter().map(|&f| nv + ne + f));
                    n.push(nv + ne + nf + c);
                    nodes.push(n);
                }
                (nodes, nv + ne + nf + mesh.n_cells(), points)
            }
        };
        FeSpace {
            mesh,
            degree,
            components,
            cell_nodes,
            n_nodes,
            node_points,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_dofs(&self) -> usize {
        self.n_nodes * self.components as usize
    }

    pub fn nodes_per_cell(&self) -> usize {
        if self.degree == 1 {
            8
        } else {
            27
        }
    }

    pub fn cell_nodes(&self, cell: usize) -> &[usize] {
        &self.cell_nodes[cell]
    }

    /// Physical coordinates of every scalar node.
    pub fn node_points(&self) -> &[Point3<f64>] {
        &self.node_points
    }

    /// Reference basis values and gradients at a reference point.
    pub fn shape(&self, xi: &[f64; 3]) -> (Vec<f64>, Vec<Vector3<f64>>) {
        match self.degree {
            1 => {
                let v = crate::mesh::trilinear_values(xi);
                let g = crate::mesh::trilinear_ref_gradients(xi);
                (
                    v.to_vec(),
                    g.iter().map(|d| Vector3::new(d[0], d[1], d[2])).collect(),
                )
            }
            _ => q2_shape(xi),
        }
    }
}

/// Reference node positions of the Q2 element in local ordering
/// (vertices, edges, faces, center).
fn q2_ref_nodes() -> Vec<[f64; 3]> {
    let mut nodes: Vec<[f64; 3]> = HEX_VERTICES.to_vec();
    for e in HEX_EDGES {
        let a = HEX_VERTICES[e[0]];
        let b = HEX_VERTICES[e[1]];
        nodes.push([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]);
    }
    for f in HEX_FACES {
        let mut c = [0.0; 3];
        for &v in &f {
            for a in 0..3 {
                c[a] += HEX_VERTICES[v][a] / 4.0;
            }
        }
        nodes.push(c);
    }
    nodes.push([0.5, 0.5, 0.5]);
    nodes
}

fn lagrange_3pt(node: f64, t: f64) -> (f64, f64) {
    if node < 0.25 {
        ((2.0 * t - 1.0) * (t - 1.0), 4.0 * t - 3.0)
    } else if node > 0.75 {
        (t * (2.0 * t - 1.0), 4.0 * t - 1.0)
    } else {
        (4.0 * t * (1.0 - t), 4.0 - 8.0 * t)
    }
}

fn q2_shape(xi: &[f64; 3]) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let nodes = q2_ref_nodes();
    let mut values = Vec::with_capacity(27);
    let mut grads = Vec::with_capacity(27);
    for n in nodes {
        let (vx, dx) = lagrange_3pt(n[0], xi[0]);
        let (vy, dy) = lagrange_3pt(n[1], xi[1]);
        let (vz, dz) = lagrange_3pt(n[2], xi[2]);
        values.push(vx * vy * vz);
        grads.push(Vector3::new(dx * vy * vz, vx * dy * vz, vx * vy * dz));
    }
    (values, grads)
}

/// Per-quadrature-point geometry of one cell on a given configuration.
pub struct CellGeometry {
    pub x: Point3<f64>,
    pub jxw: f64,
    pub det_j: f64,
    pub inv_j_t: Matrix3<f64>,
}

/// Evaluate the trilinear geometry map of `cell` at a reference point.
pub fn cell_geometry(
    mesh: &Mesh,
    cell: usize,
    coords: &[Point3<f64>],
    xi: &[f64; 3],
    weight: f64,
) -> CellGeometry {
    let j = mesh.jacobian(cell, xi, coords);
    let det_j = j.determinant();
    let inv_j_t = j.try_inverse().expect("singular geometry Jacobian").transpose();
    let shape = crate::mesh::trilinear_values(xi);
    let mut x = Vector3::zeros();
    for (k, &v) in mesh.cells[cell].iter().enumerate() {
        x += coords[v].coords * shape[k];
    }
    CellGeometry {
        x: Point3::from(x),
        jxw: weight * det_j,
        det_j,
        inv_j_t,
    }
}
