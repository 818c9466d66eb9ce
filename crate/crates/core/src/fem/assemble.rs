//! Cell-loop assembly of sparse operators from per-quadrature-point
//! kernels. Assembly is serial in cell order and therefore deterministic.

use nalgebra::{Matrix3, Point3, Vector3};

use super::{cell_geometry, FeSpace, QuadratureRule, SparseMatrix};
use crate::error::{Error, Result};

/// Data handed to an assembly kernel at one quadrature point.
pub struct QpCtx<'a> {
    pub cell: usize,
    pub x: Point3<f64>,
    pub jxw: f64,
    pub test_values: &'a [f64],
    pub test_grads: &'a [Vector3<f64>],
    pub trial_values: &'a [f64],
    pub trial_grads: &'a [Vector3<f64>],
}

/// Reference shape data of a space evaluated at every point of a rule.
pub struct CellShape {
    pub values: Vec<Vec<f64>>,
    pub ref_grads: Vec<Vec<Vector3<f64>>>,
}

impl CellShape {
    pub fn tabulate(space: &FeSpace, quad: &QuadratureRule) -> CellShape {
        let mut values = Vec::with_capacity(quad.points.len());
        let mut ref_grads = Vec::with_capacity(quad.points.len());
        for p in &quad.points {
            let (v, g) = space.shape(&[p.x, p.y, p.z]);
            values.push(v);
            ref_grads.push(g);
        }
        CellShape { values, ref_grads }
    }
}

/// Assemble a square operator on a scalar space pair sharing one mesh.
///
/// The kernel accumulates into a dense local matrix (test-major). The
/// global matrix is the cell-ordered sum of the scattered local blocks.
pub fn assemble_matrix<F>(
    test: &FeSpace,
    trial: &FeSpace,
    quad: &QuadratureRule,
    mut kernel: F,
) -> Result<SparseMatrix>
where
    F: FnMut(&QpCtx, &mut [f64]),
{
    assert_eq!(test.components, 1, "generic assembly is scalar");
    assert_eq!(trial.components, 1, "generic assembly is scalar");
    assert!(std::sync::Arc::ptr_eq(&test.mesh, &trial.mesh));
    let mesh = &test.mesh;
    let nt = test.nodes_per_cell();
    let nr = trial.nodes_per_cell();

    let mut couplings = Vec::with_capacity(mesh.n_cells() * nt * nr);
    for c in 0..mesh.n_cells() {
        for &i in test.cell_nodes(c) {
            for &j in trial.cell_nodes(c) {
                couplings.push((i, j));
            }
        }
    }
    // Dof counts may differ between test and trial spaces; the matrix is
    // square over the larger index set only when they match.
    assert_eq!(test.n_dofs(), trial.n_dofs(), "square operators only");
    let mut a = SparseMatrix::from_pattern(test.n_dofs(), couplings);

    let ts = CellShape::tabulate(test, quad);
    let rs = CellShape::tabulate(trial, quad);
    let mut local = vec![0.0; nt * nr];
    let mut tg = vec![Vector3::zeros(); nt];
    let mut rg = vec![Vector3::zeros(); nr];

    for c in 0..mesh.n_cells() {
        local.iter_mut().for_each(|v| *v = 0.0);
        for (q, p) in quad.points.iter().enumerate() {
            let geo = cell_geometry(mesh, c, &mesh.vertices, &[p.x, p.y, p.z], quad.weights[q]);
            for k in 0..nt {
                tg[k] = geo.inv_j_t * ts.ref_grads[q][k];
            }
            for k in 0..nr {
                rg[k] = geo.inv_j_t * rs.ref_grads[q][k];
            }
            let ctx = QpCtx {
                cell: c,
                x: geo.x,
                jxw: geo.jxw,
                test_values: &ts.values[q],
                test_grads: &tg,
                trial_values: &rs.values[q],
                trial_grads: &rg,
            };
            kernel(&ctx, &mut local);
        }
        if local.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAssembly { cell: c });
        }
        for (a_i, &i) in test.cell_nodes(c).iter().enumerate() {
            for (a_j, &j) in trial.cell_nodes(c).iter().enumerate() {
                a.add(i, j, local[a_i * nr + a_j]);
            }
        }
    }
    Ok(a)
}

/// Assemble a linear functional on a scalar space.
pub fn assemble_vector<F>(space: &FeSpace, quad: &QuadratureRule, mut kernel: F) -> Result<Vec<f64>>
where
    F: FnMut(&QpCtx, &mut [f64]),
{
    assert_eq!(space.components, 1);
    let mesh = &space.mesh;
    let n = space.nodes_per_cell();
    let shape = CellShape::tabulate(space, quad);
    let mut out = vec![0.0; space.n_dofs()];
    let mut local = vec![0.0; n];
    let mut grads = vec![Vector3::zeros(); n];
    for c in 0..mesh.n_cells() {
        local.iter_mut().for_each(|v| *v = 0.0);
        for (q, p) in quad.points.iter().enumerate() {
            let geo = cell_geometry(mesh, c, &mesh.vertices, &[p.x, p.y, p.z], quad.weights[q]);
            for k in 0..n {
                grads[k] = geo.inv_j_t * shape.ref_grads[q][k];
            }
            let ctx = QpCtx {
                cell: c,
                x: geo.x,
                jxw: geo.jxw,
                test_values: &shape.values[q],
                test_grads: &grads,
                trial_values: &shape.values[q],
                trial_grads: &grads,
            };
            kernel(&ctx, &mut local);
        }
        if local.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAssembly { cell: c });
        }
        for (k, &i) in space.cell_nodes(c).iter().enumerate() {
            out[i] += local[k];
        }
    }
    Ok(out)
}

/// Mass matrix of a scalar space.
pub fn mass_matrix(space: &FeSpace, quad: &QuadratureRule) -> Result<SparseMatrix> {
    let n = space.nodes_per_cell();
    assemble_matrix(space, space, quad, |qp, local| {
        for i in 0..n {
            for j in 0..n {
                local[i * n + j] += qp.test_values[i] * qp.trial_values[j] * qp.jxw;
            }
        }
    })
}

/// Stiffness matrix with a per-point symmetric diffusion tensor.
pub fn stiffness_matrix<K>(space: &FeSpace, quad: &QuadratureRule, coeff: K) -> Result<SparseMatrix>
where
    K: Fn(usize, &Point3<f64>) -> Matrix3<f64>,
{
    let n = space.nodes_per_cell();
    assemble_matrix(space, space, quad, |qp, local| {
        let k = coeff(qp.cell, &qp.x);
        for i in 0..n {
            let kg = k * qp.test_grads[i];
            for j in 0..n {
                local[i * n + j] += kg.dot(&qp.trial_grads[j]) * qp.jxw;
            }
        }
    })
}
