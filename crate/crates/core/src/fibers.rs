//! Rule-based generation of the orthonormal fiber frame {f0, s0, n0} on
//! the myocardium.
//!
//! A transmural coordinate `phi` is computed by solving Laplace's equation
//! with phi = 0 on the endocardium (interface) and phi = 1 on the
//! epicardium. The fiber direction rotates linearly with phi between the
//! endocardial and epicardial helix angles inside the plane tangent to the
//! wall; the sheet direction is transmural.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fem::{solve_cg, stiffness_matrix, FeSpace, Ilu0, QuadratureRule, SolveOpts};
use crate::mesh::{BoundaryTag, Mesh};

/// Per-vertex orthonormal frame: fiber, sheet and sheet-normal directions.
#[derive(Debug, Clone)]
pub struct FiberFrame {
    pub f0: Vec<Vector3<f64>>,
    pub s0: Vec<Vector3<f64>>,
    pub n0: Vec<Vector3<f64>>,
}

impl FiberFrame {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    /// Frame at a vertex as a matrix with columns f0, s0, n0.
    pub fn matrix(&self, v: usize) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.f0[v], self.s0[v], self.n0[v]])
    }

    /// Orthonormalized average frame over a cell's vertices.
    pub fn cell_frame(&self, cell: &[usize; 8]) -> Matrix3<f64> {
        let mut f = Vector3::zeros();
        let mut s = Vector3::zeros();
        for &v in cell {
            f += self.f0[v];
            s += self.s0[v];
        }
        orthonormal_frame(f, s)
    }

    /// Frame aligned with the canonical axes, for single cells and tests.
    pub fn canonical(n_vertices: usize) -> FiberFrame {
        FiberFrame {
            f0: vec![Vector3::new(1.0, 0.0, 0.0); n_vertices],
            s0: vec![Vector3::new(0.0, 1.0, 0.0); n_vertices],
            n0: vec![Vector3::new(0.0, 0.0, 1.0); n_vertices],
        }
    }
}

/// Gram-Schmidt frame from a fiber candidate and a sheet candidate;
/// right-handed by construction.
pub fn orthonormal_frame(f: Vector3<f64>, s: Vector3<f64>) -> Matrix3<f64> {
    let f = f.normalize();
    let s = (s - f * f.dot(&s)).normalize();
    let n = f.cross(&s);
    Matrix3::from_columns(&[f, s, n])
}

/// Solve the transmural Laplace problem on the solid mesh: 0 on the
/// interface, 1 on the epicardium, natural elsewhere.
pub fn transmural_coordinate(mesh: &Arc<Mesh>) -> Result<Vec<f64>> {
    let endo = mesh.vertices_with(BoundaryTag::Interface);
    let epi = mesh.vertices_with(BoundaryTag::Epicardium);
    if endo.is_empty() || epi.is_empty() {
        return Err(Error::Usage(
            "fiber generation needs Interface and Epicardium tags on the solid mesh".into(),
        ));
    }
    let space = FeSpace::new(mesh.clone(), 1, 1);
    let quad = QuadratureRule::gauss_hex(2);
    let mut a = stiffness_matrix(&space, &quad, |_, _| Matrix3::identity())?;
    let mut b = vec![0.0; space.n_dofs()];
    let mut dofs = endo.clone();
    let mut vals = vec![0.0; endo.len()];
    dofs.extend_from_slice(&epi);
    vals.extend(std::iter::repeat(1.0).take(epi.len()));
    a.apply_dirichlet(&mut b, &dofs, &vals);
    let ilu = Ilu0::new(&a);
    let mut phi = vec![0.0; space.n_dofs()];
    solve_cg(&a, &b, &mut phi, &SolveOpts::default(), &ilu)?;
    Ok(phi)
}

/// L2-projected nodal gradient of a Q1 vertex field (lumped weights).
pub fn nodal_gradient(mesh: &Mesh, field: &[f64]) -> Vec<Vector3<f64>> {
    let quad = QuadratureRule::gauss_hex(2);
    let mut grad = vec![Vector3::zeros(); mesh.n_vertices()];
    let mut weight = vec![0.0; mesh.n_vertices()];
    for c in 0..mesh.n_cells() {
        for (q, p) in quad.points.iter().enumerate() {
            let xi = [p.x, p.y, p.z];
            let geo = crate::fem::cell_geometry(mesh, c, &mesh.vertices, &xi, quad.weights[q]);
            let ref_grads = crate::mesh::trilinear_ref_gradients(&xi);
            let shape = crate::mesh::trilinear_values(&xi);
            let mut g = Vector3::zeros();
            for (k, &v) in mesh.cells[c].iter().enumerate() {
                let pg =
                    geo.inv_j_t * Vector3::new(ref_grads[k][0], ref_grads[k][1], ref_grads[k][2]);
                g += pg * field[v];
            }
            for (k, &v) in mesh.cells[c].iter().enumerate() {
                grad[v] += g * (shape[k] * geo.jxw);
                weight[v] += shape[k] * geo.jxw;
            }
        }
    }
    for (g, w) in grad.iter_mut().zip(&weight) {
        if *w > 0.0 {
            *g /= *w;
        }
    }
    grad
}

/// Generate the fiber frame with a linear transmural helix-angle rule.
/// Angles in degrees at the endocardium (phi = 0) and epicardium (phi = 1).
pub fn generate_fibers(
    mesh: &Arc<Mesh>,
    angle_endo_deg: f64,
    angle_epi_deg: f64,
) -> Result<(FiberFrame, Vec<f64>)> {
    let phi = transmural_coordinate(mesh)?;
    let grad_phi = nodal_gradient(mesh, &phi);
    let long_axis = Vector3::new(0.0, 0.0, 1.0);

    let nv = mesh.n_vertices();
    let mut f0 = Vec::with_capacity(nv);
    let mut s0 = Vec::with_capacity(nv);
    let mut n0 = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut et = grad_phi[v];
        if et.norm() < 1e-12 {
            et = Vector3::new(1.0, 0.0, 0.0);
        }
        let et = et.normalize();
        // Circumferential direction; at the apex the long axis aligns with
        // the transmural direction, fall back to any tangent.
        let mut ec = long_axis.cross(&et);
        if ec.norm() < 1e-6 {
            ec = Vector3::new(0.0, 1.0, 0.0).cross(&et);
        }
        let ec = ec.normalize();
        let el = et.cross(&ec);
        let angle = (angle_endo_deg + (angle_epi_deg - angle_endo_deg) * phi[v]).to_radians();
        let fiber = ec * angle.cos() + el * angle.sin();
        let frame = orthonormal_frame(fiber, et);
        f0.push(frame.column(0).into_owned());
        s0.push(frame.column(1).into_owned());
        n0.push(frame.column(2).into_owned());
    }
    Ok((FiberFrame { f0, s0, n0 }, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh_tagged, build_ellipsoid_ventricle, EllipsoidParams};

    fn slab() -> Arc<Mesh> {
        // Wall-like slab: interface at x = 0, epicardium at x = 1.
        Arc::new(
            box_mesh_tagged(
                [0.0; 3],
                [1.0, 1.0, 1.0],
                [4, 3, 3],
                [
                    BoundaryTag::Interface,
                    BoundaryTag::Epicardium,
                    BoundaryTag::SolidBase,
                    BoundaryTag::SolidBase,
                    BoundaryTag::SolidBase,
                    BoundaryTag::SolidBase,
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn slab_transmural_coordinate_is_linear() {
        let mesh = slab();
        let phi = transmural_coordinate(&mesh).unwrap();
        for (v, p) in mesh.vertices.iter().enumerate() {
            assert!((phi[v] - p.x).abs() < 1e-8, "phi at x={} is {}", p.x, phi[v]);
        }
    }

    #[test]
    fn zero_angles_give_circumferential_fibers() {
        let mesh = slab();
        let (frame, _) = generate_fibers(&mesh, 0.0, 0.0).unwrap();
        // Transmural direction is +x, long axis z: circumferential = z x x.
        for f in &frame.f0 {
            assert!(f.x.abs() < 1e-8);
            assert!(f.z.abs() < 1e-8);
            assert!((f.y.abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn midwall_helix_angle_is_zero_for_symmetric_rule() {
        let mesh = slab();
        let (frame, phi) = generate_fibers(&mesh, -60.0, 60.0).unwrap();
        let mut checked = 0;
        for v in 0..mesh.n_vertices() {
            if (phi[v] - 0.5).abs() < 1e-9 {
                let angle = frame.f0[v].z.asin().to_degrees();
                assert!(angle.abs() < 2.0, "midwall angle {angle}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn frames_are_orthonormal_and_right_handed() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let mesh = Arc::new(solid);
        let (frame, _) = generate_fibers(&mesh, -60.0, 60.0).unwrap();
        for v in 0..mesh.n_vertices() {
            let m = frame.matrix(v);
            let gram = m.transpose() * m;
            assert!((gram - Matrix3::identity()).norm() < 1e-10);
            assert!((m.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fibers_tangent_to_wall_away_from_apex() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let mesh = Arc::new(solid);
        let (frame, phi) = generate_fibers(&mesh, -60.0, 60.0).unwrap();
        let grad = nodal_gradient(&mesh, &phi);
        for v in 0..mesh.n_vertices() {
            let p = mesh.vertices[v];
            if p.z > -0.04 {
                let trans = grad[v].normalize();
                assert!(
                    frame.f0[v].dot(&trans).abs() <= 0.05,
                    "fiber not tangent at {p:?}"
                );
            }
        }
    }

    #[test]
    fn missing_tags_is_usage_error() {
        let mesh = Arc::new(crate::mesh::box_mesh([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap());
        assert!(matches!(
            generate_fibers(&mesh, -60.0, 60.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn frame_consistent_under_refinement_at_shared_vertices() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let solid = Arc::new(solid);
        let (fine, map) = crate::mesh::refine_nested(&solid).unwrap();
        let fine = Arc::new(fine);
        let (coarse_frame, _) = generate_fibers(&solid, -60.0, 60.0).unwrap();
        let (fine_frame, _) = generate_fibers(&fine, -60.0, 60.0).unwrap();
        let mut worst: f64 = 0.0;
        for (cv, &fv) in map.vertex_embedding.iter().enumerate() {
            worst = worst.max((coarse_frame.f0[cv] - fine_frame.f0[fv]).norm());
        }
        // Interpolation-level agreement on this coarse shell.
        assert!(worst < 0.25, "worst fiber deviation {worst}");
    }
}
