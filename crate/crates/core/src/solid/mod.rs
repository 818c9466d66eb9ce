//! Hyperelastic active-stress elastodynamics on the reference myocardium.
//!
//! Time stepping uses the three-level finite-difference inertia stencil
//! with a fully implicit stress evaluation; each step is solved by Newton
//! with an analytic consistent tangent and GMRES/ILU(0) inner solves.
//! Boundary conditions: homogeneous Dirichlet on the base, a visco-elastic
//! Robin condition on the epicardium (normal/tangential split on the
//! reference normal), and a Neumann traction on the interface supplied by
//! the fluid (or a uniform preload pressure).

mod materials;

pub use materials::{
    active_stress, active_stress_tangent, GuccioneLaw, MaterialLaw, MaterialTangent, NeoHookeanLaw,
};

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fem::{solve_gmres, CellShape, FeSpace, Ilu0, QuadratureRule, SolveOpts, SparseMatrix};
use crate::fibers::FiberFrame;
use crate::mesh::{facet_quadrature, BoundaryFacet, BoundaryTag, Mesh};

/// Epicardial Robin coefficients: normal/tangential springs (Pa/m) and
/// dashpots (Pa s/m).
#[derive(Debug, Clone)]
pub struct PericardiumParams {
    pub k_perp: f64,
    pub k_par: f64,
    pub c_perp: f64,
    pub c_par: f64,
}

impl Default for PericardiumParams {
    fn default() -> Self {
        // Normal spring from the realistic-ventricle parameter set; the
        // weaker idealized-case value lets the coarse apex over-extend.
        // Dashpots are raised in proportion to the compressed time scale
        // so the diastolic recoil stays quasi-static on the coarse mesh.
        PericardiumParams {
            k_perp: 2.0e5,
            k_par: 2.0e4,
            c_perp: 6.0e5,
            c_par: 6.0e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

pub struct SolidSolver {
    pub mesh: Arc<Mesh>,
    pub space: FeSpace,
    pub law: Box<dyn MaterialLaw>,
    pub frame: FiberFrame,
    cell_frames: Vec<Matrix3<f64>>,
    pub rho: f64,
    pub pericardium: PericardiumParams,
    quad: QuadratureRule,
    shape: CellShape,
    scalar_mass: SparseMatrix,
    pattern: SparseMatrix,
    base_dofs: Vec<usize>,
    epi_facets: Vec<BoundaryFacet>,
    interface_facets: Vec<BoundaryFacet>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub lin_opts: SolveOpts,
}

impl SolidSolver {
    pub fn new(
        mesh: Arc<Mesh>,
        law: Box<dyn MaterialLaw>,
        frame: FiberFrame,
        rho: f64,
        pericardium: PericardiumParams,
    ) -> Result<SolidSolver> {
        let space = FeSpace::new(mesh.clone(), 1, 3);
        let quad = QuadratureRule::gauss_hex(3);
        let shape = CellShape::tabulate(&space, &quad);
        let scalar_space = FeSpace::new(mesh.clone(), 1, 1);
        let scalar_mass = crate::fem::mass_matrix(&scalar_space, &quad)?;
        let cell_frames: Vec<Matrix3<f64>> =
            mesh.cells.iter().map(|c| frame.cell_frame(c)).collect();

        let mut couplings = Vec::new();
        for cell in &mesh.cells {
            for &i in cell {
                for &j in cell {
                    for a in 0..3 {
                        for b in 0..3 {
                            couplings.push((3 * i + a, 3 * j + b));
                        }
                    }
                }
            }
        }
        let pattern = SparseMatrix::from_pattern(space.n_dofs(), couplings);
        let base_dofs: Vec<usize> = mesh
            .vertices_with(BoundaryTag::SolidBase)
            .iter()
            .flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2])
            .collect();
        let epi_facets: Vec<BoundaryFacet> =
            mesh.facets_with(BoundaryTag::Epicardium).copied().collect();
        let interface_facets: Vec<BoundaryFacet> =
            mesh.facets_with(BoundaryTag::Interface).copied().collect();
        Ok(SolidSolver {
            mesh,
            space,
            law,
            frame,
            cell_frames,
            rho,
            pericardium,
            quad,
            shape,
            scalar_mass,
            pattern,
            base_dofs,
            epi_facets,
            interface_facets,
            newton_tol: 1e-8,
            newton_max_iter: 25,
            lin_opts: SolveOpts {
                tol: 1e-10,
                max_iter: 4000,
                restart: 300,
            },
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    pub fn interface_facets(&self) -> &[BoundaryFacet] {
        &self.interface_facets
    }

    /// y += factor * (M x)_a applied per displacement component.
    fn add_mass_term(&self, factor: f64, x: &[f64], y: &mut [f64]) {
        let m = &self.scalar_mass;
        for i in 0..m.n {
            for k in m.row_offsets[i]..m.row_offsets[i + 1] {
                let j = m.col_indices[k];
                let mij = m.values[k];
                for a in 0..3 {
                    y[3 * i + a] += factor * mij * x[3 * j + a];
                }
            }
        }
    }

    /// Assemble the residual and, optionally, the consistent tangent at
    /// iterate `d`. `dynamics = Some((d_n, d_nm1, dt))` enables the
    /// inertia stencil and the epicardial dashpot; `None` is quasi-static.
    fn assemble(
        &self,
        d: &[f64],
        dynamics: Option<(&[f64], &[f64], f64)>,
        t_act: &[f64],
        interface_load: &[f64],
        want_tangent: bool,
    ) -> Result<(Vec<f64>, Option<SparseMatrix>)> {
        let mesh = &self.mesh;
        let n = self.space.n_dofs();
        let mut residual = vec![0.0; n];
        let mut tangent = if want_tangent {
            let mut k = self.pattern.clone();
            k.zero_values();
            Some(k)
        } else {
            None
        };

        let mut phys_grads = [Vector3::zeros(); 8];
        let mut local_k = [0.0f64; 24 * 24];
        for c in 0..mesh.n_cells() {
            let cell = &mesh.cells[c];
            let frame = &self.cell_frames[c];
            let f0 = frame.column(0).into_owned();
            if want_tangent {
                local_k.iter_mut().for_each(|v| *v = 0.0);
            }
            for (q, p) in self.quad.points.iter().enumerate() {
                let xi = [p.x, p.y, p.z];
                let geo =
                    crate::fem::cell_geometry(mesh, c, &mesh.vertices, &xi, self.quad.weights[q]);
                for k in 0..8 {
                    phys_grads[k] = geo.inv_j_t * self.shape.ref_grads[q][k];
                }
                let mut f = Matrix3::identity();
                let mut t_act_qp = 0.0;
                for (k, &v) in cell.iter().enumerate() {
                    let dv = Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]);
                    f += dv * phys_grads[k].transpose();
                    t_act_qp += self.shape.values[q][k] * t_act[v];
                }
                let map_cell = |e: Error| match e {
                    Error::InvertedElement { det, .. } => Error::InvertedElement { cell: c, det },
                    other => other,
                };
                let (p_pas, mat_tan) = self.law.piola_and_tangent(&f, frame).map_err(map_cell)?;
                let p_act = active_stress(&f, &f0, t_act_qp).map_err(map_cell)?;
                let p_total = p_pas + p_act;
                for (i, &vi) in cell.iter().enumerate() {
                    let contrib = p_total * phys_grads[i] * geo.jxw;
                    residual[3 * vi] += contrib.x;
                    residual[3 * vi + 1] += contrib.y;
                    residual[3 * vi + 2] += contrib.z;
                }
                if want_tangent {
                    for (j, gj) in phys_grads.iter().enumerate() {
                        for b in 0..3 {
                            let mut df = Matrix3::zeros();
                            df[(b, 0)] = gj.x;
                            df[(b, 1)] = gj.y;
                            df[(b, 2)] = gj.z;
                            let dp =
                                mat_tan.apply(&df) + active_stress_tangent(&f, &f0, t_act_qp, &df);
                            let col = 3 * j + b;
                            for (i, gi) in phys_grads.iter().enumerate() {
                                let base = 3 * i * 24 + col;
                                local_k[base] +=
                                    (dp[(0, 0)] * gi.x + dp[(0, 1)] * gi.y + dp[(0, 2)] * gi.z)
                                        * geo.jxw;
                                local_k[base + 24] +=
                                    (dp[(1, 0)] * gi.x + dp[(1, 1)] * gi.y + dp[(1, 2)] * gi.z)
                                        * geo.jxw;
                                local_k[base + 48] +=
                                    (dp[(2, 0)] * gi.x + dp[(2, 1)] * gi.y + dp[(2, 2)] * gi.z)
                                        * geo.jxw;
                            }
                        }
                    }
                }
            }
            if let Some(kmat) = tangent.as_mut() {
                for (i, &vi) in cell.iter().enumerate() {
                    for a in 0..3 {
                        let row = (3 * i + a) * 24;
                        for (j, &vj) in cell.iter().enumerate() {
                            for b in 0..3 {
                                kmat.add(3 * vi + a, 3 * vj + b, local_k[row + 3 * j + b]);
                            }
                        }
                    }
                }
            }
        }

        if let Some((d_n, d_nm1, dt)) = dynamics {
            let factor = self.rho / (dt * dt);
            let accel: Vec<f64> = (0..n).map(|i| d[i] - 2.0 * d_n[i] + d_nm1[i]).collect();
            self.add_mass_term(factor, &accel, &mut residual);
            if let Some(kmat) = tangent.as_mut() {
                let m = &self.scalar_mass;
                for i in 0..m.n {
                    for k in m.row_offsets[i]..m.row_offsets[i + 1] {
                        let j = m.col_indices[k];
                        for a in 0..3 {
                            kmat.add(3 * i + a, 3 * j + a, factor * m.values[k]);
                        }
                    }
                }
            }
        }

        // Epicardial Robin condition on the reference boundary.
        let (dt_inv, c_perp, c_par) = match dynamics {
            Some((_, _, dt)) => (1.0 / dt, self.pericardium.c_perp, self.pericardium.c_par),
            None => (0.0, 0.0, 0.0),
        };
        for facet in &self.epi_facets {
            for qp in facet_quadrature(facet, &mesh.vertices) {
                let nn = qp.normal * qp.normal.transpose();
                let tt = Matrix3::identity() - nn;
                let mut d_qp = Vector3::zeros();
                let mut dprev_qp = Vector3::zeros();
                for (k, &v) in facet.vertices.iter().enumerate() {
                    let dv = Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]);
                    d_qp += qp.shape[k] * dv;
                    if let Some((d_n, _, _)) = dynamics {
                        dprev_qp += qp.shape[k]
                            * Vector3::new(d_n[3 * v], d_n[3 * v + 1], d_n[3 * v + 2]);
                    }
                }
                let vel = (d_qp - dprev_qp) * dt_inv;
                let traction = nn * (self.pericardium.k_perp * d_qp + c_perp * vel)
                    + tt * (self.pericardium.k_par * d_qp + c_par * vel);
                for (i, &vi) in facet.vertices.iter().enumerate() {
                    let w = qp.shape[i] * qp.weight;
                    residual[3 * vi] += w * traction.x;
                    residual[3 * vi + 1] += w * traction.y;
                    residual[3 * vi + 2] += w * traction.z;
                }
                if let Some(kmat) = tangent.as_mut() {
                    let op = nn * (self.pericardium.k_perp + c_perp * dt_inv)
                        + tt * (self.pericardium.k_par + c_par * dt_inv);
                    for (i, &vi) in facet.vertices.iter().enumerate() {
                        for (j, &vj) in facet.vertices.iter().enumerate() {
                            let w = qp.shape[i] * qp.shape[j] * qp.weight;
                            for a in 0..3 {
                                for b in 0..3 {
                                    kmat.add(3 * vi + a, 3 * vj + b, w * op[(a, b)]);
                                }
                            }
                        }
                    }
                }
            }
        }

        for i in 0..n {
            residual[i] -= interface_load[i];
        }

        // Base constraint: no displacement.
        for &dof in &self.base_dofs {
            residual[dof] = 0.0;
        }
        if let Some(kmat) = tangent.as_mut() {
            let zeros = vec![0.0; self.base_dofs.len()];
            let mut dummy = vec![0.0; n];
            kmat.apply_dirichlet(&mut dummy, &self.base_dofs, &zeros);
        }
        Ok((residual, tangent))
    }

    /// Residual and tangent of the dynamic problem at iterate `d`, for
    /// embedding into a coupled system. The interface boundary term is
    /// whatever `interface_load` carries (usually zero in that context).
    pub fn assemble_for_coupling(
        &self,
        d: &[f64],
        d_n: &[f64],
        d_nm1: &[f64],
        dt: f64,
        t_act: &[f64],
        interface_load: &[f64],
    ) -> Result<(Vec<f64>, SparseMatrix)> {
        let (r, k) = self.assemble(d, Some((d_n, d_nm1, dt)), t_act, interface_load, true)?;
        Ok((r, k.unwrap()))
    }

    fn newton(
        &self,
        initial: &[f64],
        dynamics: Option<(&[f64], &[f64], f64)>,
        t_act: &[f64],
        interface_load: &[f64],
    ) -> Result<(Vec<f64>, NewtonStats)> {
        let mut d = initial.to_vec();
        // A predictor may already be inverted; fall back to the last
        // known-good level in that case.
        let mut state = self.assemble(&d, dynamics, t_act, interface_load, true);
        if state.is_err() {
            if let Some((d_n, _, _)) = dynamics {
                d = d_n.to_vec();
                state = self.assemble(&d, dynamics, t_act, interface_load, true);
            }
        }
        let (mut r, mut k) = state?;
        let mut residuals = Vec::new();
        let mut r0 = 0.0;
        let floor = 1e-9 * (1.0 + interface_load.iter().map(|x| x.abs()).fold(0.0, f64::max));
        // The factorization of the first tangent is reused as the
        // preconditioner of later iterations.
        let mut ilu: Option<Ilu0> = None;
        for it in 0..=self.newton_max_iter {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            residuals.push(norm);
            if it == 0 {
                r0 = norm;
            }
            if norm <= self.newton_tol * r0.max(1e-30) || norm <= floor {
                return Ok((
                    d,
                    NewtonStats {
                        iterations: it,
                        residuals,
                    },
                ));
            }
            if it == self.newton_max_iter {
                break;
            }
            let kk = k.unwrap();
            if ilu.is_none() || it % 4 == 3 {
                ilu = Some(Ilu0::new(&kk));
            }
            let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
            let mut delta = vec![0.0; d.len()];
            solve_gmres(&kk, &rhs, &mut delta, &self.lin_opts, ilu.as_ref().unwrap())?;
            // Backtrack on element inversion: the update must stay inside
            // the admissible det F > 0 region.
            let mut scale = 1.0;
            loop {
                let trial: Vec<f64> = d
                    .iter()
                    .zip(&delta)
                    .map(|(x, dx)| x + scale * dx)
                    .collect();
                match self.assemble(&trial, dynamics, t_act, interface_load, true) {
                    Ok((r2, k2)) => {
                        d = trial;
                        r = r2;
                        k = k2;
                        break;
                    }
                    Err(Error::InvertedElement { .. }) if scale > 1.0 / 256.0 => {
                        scale *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Err(Error::NewtonDiverged {
            iterations: self.newton_max_iter,
            history: residuals,
        })
    }

    /// One implicit elastodynamics step. Newton starts from the linear
    /// extrapolation of the two known levels.
    pub fn step(
        &self,
        d_n: &[f64],
        d_nm1: &[f64],
        t_act: &[f64],
        interface_load: &[f64],
        dt: f64,
    ) -> Result<(Vec<f64>, NewtonStats)> {
        let predictor: Vec<f64> = d_n
            .iter()
            .zip(d_nm1)
            .map(|(a, b)| 2.0 * a - b)
            .collect();
        self.newton(&predictor, Some((d_n, d_nm1, dt)), t_act, interface_load)
    }

    /// Quasi-static solve (inertia and dashpots dropped).
    pub fn solve_static(
        &self,
        initial: &[f64],
        t_act: &[f64],
        interface_load: &[f64],
    ) -> Result<(Vec<f64>, NewtonStats)> {
        self.newton(initial, None, t_act, interface_load)
    }

    /// Pressure load on the interface in the configuration displaced by
    /// `d` (follower load): traction p * n with n pointing from the cavity
    /// into the wall.
    pub fn pressure_load(&self, p: f64, d: &[f64]) -> Vec<f64> {
        let coords: Vec<nalgebra::Point3<f64>> = self
            .mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(v, pt)| {
                nalgebra::Point3::new(
                    pt.x + d[3 * v],
                    pt.y + d[3 * v + 1],
                    pt.z + d[3 * v + 2],
                )
            })
            .collect();
        let mut load = vec![0.0; self.space.n_dofs()];
        for facet in &self.interface_facets {
            for qp in facet_quadrature(facet, &coords) {
                // Facet normals point out of the solid; the inflating
                // traction acts along the inward (cavity-side) normal.
                let t = -qp.normal * p;
                for (k, &v) in facet.vertices.iter().enumerate() {
                    let w = qp.shape[k] * qp.weight;
                    load[3 * v] += w * t.x;
                    load[3 * v + 1] += w * t.y;
                    load[3 * v + 2] += w * t.z;
                }
            }
        }
        load
    }

    /// Initial displacement from a quasi-static endocardial pressure. The
    /// pressure follows the deforming interface (fixed-point iteration on
    /// the load configuration) so the result is an equilibrium of the
    /// coupled formulation; incremental-load retry on Newton failure.
    pub fn preload_quasi_static(&self, p0: f64, t_act: &[f64]) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.space.n_dofs()];
        if p0 == 0.0 {
            return Ok(zero);
        }
        let mut d = {
            let full = self.pressure_load(p0, &zero);
            match self.solve_static(&zero, t_act, &full) {
                Ok((d, _)) => d,
                Err(_) => {
                    let mut d = zero.clone();
                    for inc in 1..=10 {
                        let load = self.pressure_load(p0 * inc as f64 / 10.0, &d);
                        let (next, _) = self.solve_static(&d, t_act, &load)?;
                        d = next;
                    }
                    d
                }
            }
        };
        // Follower fixed point: update the load configuration until the
        // displacement settles.
        for _ in 0..12 {
            let load = self.pressure_load(p0, &d);
            let (next, _) = self.solve_static(&d, t_act, &load)?;
            let delta = next
                .iter()
                .zip(&d)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            d = next;
            if delta < 1e-12 {
                break;
            }
        }
        Ok(d)
    }

    /// Interface reaction of the quasi-static operator at displacement
    /// `d`: the residual of the stress terms at interface dofs, i.e. the
    /// variationally consistent traction functional of the wall on the
    /// cavity surface.
    pub fn interface_reaction(&self, d: &[f64], t_act: &[f64]) -> Result<Vec<f64>> {
        let zero_load = vec![0.0; self.space.n_dofs()];
        let (r, _) = self.assemble(d, None, t_act, &zero_load, false)?;
        Ok(r)
    }

    /// Elastic strain energy of a displacement field.
    pub fn strain_energy(&self, d: &[f64]) -> Result<f64> {
        let mesh = &self.mesh;
        let mut total = 0.0;
        for c in 0..mesh.n_cells() {
            for (q, p) in self.quad.points.iter().enumerate() {
                let xi = [p.x, p.y, p.z];
                let geo =
                    crate::fem::cell_geometry(mesh, c, &mesh.vertices, &xi, self.quad.weights[q]);
                let mut f = Matrix3::identity();
                for (k, &v) in mesh.cells[c].iter().enumerate() {
                    let g = geo.inv_j_t * self.shape.ref_grads[q][k];
                    f += Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]) * g.transpose();
                }
                total += self.law.energy(&f, &self.cell_frames[c])? * geo.jxw;
            }
        }
        Ok(total)
    }

    /// Discrete mechanical energy: strain + kinetic + epicardial springs.
    pub fn discrete_energy(&self, d: &[f64], d_prev: &[f64], dt: f64) -> Result<f64> {
        let n = self.space.n_dofs();
        let vel: Vec<f64> = (0..n).map(|i| (d[i] - d_prev[i]) / dt).collect();
        let mut mv = vec![0.0; n];
        self.add_mass_term(self.rho, &vel, &mut mv);
        let kinetic = 0.5 * vel.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>();
        let mut spring = 0.0;
        for facet in &self.epi_facets {
            for qp in facet_quadrature(facet, &self.mesh.vertices) {
                let mut d_qp = Vector3::zeros();
                for (k, &v) in facet.vertices.iter().enumerate() {
                    d_qp += qp.shape[k] * Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]);
                }
                let dn = qp.normal.dot(&d_qp);
                let dt_vec = d_qp - qp.normal * dn;
                spring += 0.5
                    * (self.pericardium.k_perp * dn * dn
                        + self.pericardium.k_par * dt_vec.norm_squared())
                    * qp.weight;
            }
        }
        Ok(self.strain_energy(d)? + kinetic + spring)
    }

    /// Cauchy stress at the interface vertices (vertex-averaged F).
    pub fn interface_cauchy(
        &self,
        d: &[f64],
        t_act: &[f64],
    ) -> Result<HashMap<usize, Matrix3<f64>>> {
        let grads = vertex_deformation_gradients(&self.mesh, d);
        let mut out = HashMap::new();
        for facet in &self.interface_facets {
            for &v in &facet.vertices {
                if out.contains_key(&v) {
                    continue;
                }
                let f = grads[v];
                let j = f.determinant();
                if j <= 0.0 {
                    return Err(Error::InvertedElement {
                        cell: facet.cell,
                        det: j,
                    });
                }
                let frame = self.frame.matrix(v);
                let p =
                    self.law.piola(&f, &frame)? + active_stress(&f, &self.frame.f0[v], t_act[v])?;
                out.insert(v, f * p.transpose() / j);
            }
        }
        Ok(out)
    }

    /// Per-cell von Mises stress, for output.
    pub fn von_mises(&self, d: &[f64], t_act: &[f64]) -> Result<Vec<f64>> {
        let mesh = &self.mesh;
        let mut out = Vec::with_capacity(mesh.n_cells());
        let xi = [0.5, 0.5, 0.5];
        let ref_grads = crate::mesh::trilinear_ref_gradients(&xi);
        let shape = crate::mesh::trilinear_values(&xi);
        for c in 0..mesh.n_cells() {
            let geo = crate::fem::cell_geometry(mesh, c, &mesh.vertices, &xi, 1.0);
            let mut f = Matrix3::identity();
            let mut ta = 0.0;
            for (k, &v) in mesh.cells[c].iter().enumerate() {
                let g =
                    geo.inv_j_t * Vector3::new(ref_grads[k][0], ref_grads[k][1], ref_grads[k][2]);
                f += Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]) * g.transpose();
                ta += shape[k] * t_act[v];
            }
            let frame = &self.cell_frames[c];
            let p =
                self.law.piola(&f, frame)? + active_stress(&f, &frame.column(0).into_owned(), ta)?;
            let sigma = f * p.transpose() / f.determinant();
            let dev = sigma - Matrix3::identity() * (sigma.trace() / 3.0);
            out.push((1.5 * dev.dot(&dev)).sqrt());
        }
        Ok(out)
    }
}

/// Deformation gradient at each vertex: cell-center values averaged over
/// the adjacent cells.
pub fn vertex_deformation_gradients(mesh: &Mesh, d: &[f64]) -> Vec<Matrix3<f64>> {
    let mut acc = vec![Matrix3::zeros(); mesh.n_vertices()];
    let mut count = vec![0.0; mesh.n_vertices()];
    let xi = [0.5, 0.5, 0.5];
    let ref_grads = crate::mesh::trilinear_ref_gradients(&xi);
    for c in 0..mesh.n_cells() {
        let geo = crate::fem::cell_geometry(mesh, c, &mesh.vertices, &xi, 1.0);
        let mut f = Matrix3::identity();
        for (k, &v) in mesh.cells[c].iter().enumerate() {
            let g = geo.inv_j_t * Vector3::new(ref_grads[k][0], ref_grads[k][1], ref_grads[k][2]);
            f += Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]) * g.transpose();
        }
        for &v in &mesh.cells[c] {
            acc[v] += f;
            count[v] += 1.0;
        }
    }
    for (f, c) in acc.iter_mut().zip(&count) {
        if *c > 0.0 {
            *f /= *c;
        }
    }
    acc
}

/// Fiber-direction stretch invariant I4f at each vertex.
pub fn fiber_stretch(frame: &FiberFrame, grads: &[Matrix3<f64>]) -> Vec<f64> {
    grads
        .iter()
        .zip(&frame.f0)
        .map(|(f, f0)| {
            let ff0 = f * f0;
            ff0.dot(&ff0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_ellipsoid_ventricle, EllipsoidParams};

    fn ventricle_solver(geom: &EllipsoidParams, law: Box<dyn MaterialLaw>) -> SolidSolver {
        let (_, solid) = build_ellipsoid_ventricle(geom).unwrap();
        let mesh = Arc::new(solid);
        let (frame, _) = crate::fibers::generate_fibers(&mesh, -60.0, 60.0).unwrap();
        SolidSolver::new(mesh, law, frame, 1000.0, PericardiumParams::default()).unwrap()
    }

    fn mean_interface_radial_displacement(solver: &SolidSolver, d: &[f64]) -> f64 {
        let verts = solver.mesh.vertices_with(BoundaryTag::Interface);
        let mut sum = 0.0;
        for &v in &verts {
            let p = solver.mesh.vertices[v].coords;
            let dir = Vector3::new(p.x / 0.02, p.y / 0.02, p.z / 0.06);
            let dir = if dir.norm() > 1e-9 {
                dir.normalize()
            } else {
                Vector3::zeros()
            };
            sum += Vector3::new(d[3 * v], d[3 * v + 1], d[3 * v + 2]).dot(&dir);
        }
        sum / verts.len() as f64
    }

    #[test]
    fn unloaded_rest_state_stays_at_rest() {
        let solver = ventricle_solver(&EllipsoidParams::default(), Box::<GuccioneLaw>::default());
        let n = solver.n_dofs();
        let zero = vec![0.0; n];
        let t_act = vec![0.0; solver.mesh.n_vertices()];
        let (d, stats) = solver
            .step(&zero, &zero, &t_act, &vec![0.0; n], 2e-4)
            .unwrap();
        assert!(d.iter().all(|&x| x.abs() < 1e-12));
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn preload_zero_gives_zero_and_volume_grows_with_pressure() {
        let solver = ventricle_solver(&EllipsoidParams::default(), Box::<GuccioneLaw>::default());
        let t_act = vec![0.0; solver.mesh.n_vertices()];
        let d0 = solver.preload_quasi_static(0.0, &t_act).unwrap();
        assert!(d0.iter().all(|&x| x == 0.0));
        let mut prev = 0.0;
        for p0 in [300.0, 800.0, 1333.0] {
            let d = solver.preload_quasi_static(p0, &t_act).unwrap();
            let radial = mean_interface_radial_displacement(&solver, &d);
            assert!(
                radial > prev,
                "inflation not monotone at p0 = {p0}: {radial} vs {prev}"
            );
            prev = radial;
        }
    }

    #[test]
    fn static_inflation_matches_overkill_resolution_oracle() {
        // Same physical problem on two resolutions inside the asymptotic
        // range; the coarser answer must sit within 5% of the overkill one.
        let coarse_geom = EllipsoidParams {
            n_across: 8,
            n_axial: 6,
            n_layers: 4,
            ..Default::default()
        };
        let coarse = ventricle_solver(&coarse_geom, Box::<NeoHookeanLaw>::default());
        let fine_geom = EllipsoidParams {
            n_across: 12,
            n_axial: 9,
            n_layers: 6,
            ..Default::default()
        };
        let fine = ventricle_solver(&fine_geom, Box::<NeoHookeanLaw>::default());
        let p0 = 2000.0;
        let dc = coarse
            .preload_quasi_static(p0, &vec![0.0; coarse.mesh.n_vertices()])
            .unwrap();
        let df = fine
            .preload_quasi_static(p0, &vec![0.0; fine.mesh.n_vertices()])
            .unwrap();
        let rc = mean_interface_radial_displacement(&coarse, &dc);
        let rf = mean_interface_radial_displacement(&fine, &df);
        assert!(
            (rc - rf).abs() / rf.abs() < 0.05,
            "coarse {rc:.4e} vs fine {rf:.4e}"
        );
    }

    #[test]
    fn guccione_preload_matches_overkill_oracle_at_atrial_pressure() {
        let coarse_geom = EllipsoidParams {
            n_across: 8,
            n_axial: 6,
            n_layers: 4,
            ..Default::default()
        };
        let coarse = ventricle_solver(&coarse_geom, Box::<GuccioneLaw>::default());
        let fine_geom = EllipsoidParams {
            n_across: 12,
            n_axial: 9,
            n_layers: 6,
            ..Default::default()
        };
        let fine = ventricle_solver(&fine_geom, Box::<GuccioneLaw>::default());
        let p0 = 1333.0;
        let dc = coarse
            .preload_quasi_static(p0, &vec![0.0; coarse.mesh.n_vertices()])
            .unwrap();
        let df = fine
            .preload_quasi_static(p0, &vec![0.0; fine.mesh.n_vertices()])
            .unwrap();
        let rc = mean_interface_radial_displacement(&coarse, &dc);
        let rf = mean_interface_radial_displacement(&fine, &df);
        assert!(
            (rc - rf).abs() / rf.abs() < 0.05,
            "coarse {rc:.4e} vs fine {rf:.4e}"
        );
    }

    #[test]
    fn newton_residuals_decrease_superlinearly() {
        let solver = ventricle_solver(&EllipsoidParams::default(), Box::<GuccioneLaw>::default());
        let t_act = vec![0.0; solver.mesh.n_vertices()];
        let load = solver.pressure_load(1000.0, &vec![0.0; solver.n_dofs()]);
        let zero = vec![0.0; solver.n_dofs()];
        let (_, stats) = solver.solve_static(&zero, &t_act, &load).unwrap();
        let r = &stats.residuals;
        assert!(r.len() >= 3, "expected a few Newton iterations, got {r:?}");
        let first = r[1] / r[0];
        let last = r[r.len() - 1] / r[r.len() - 2];
        assert!(last < first, "no acceleration: {r:?}");
        assert!(last < 1e-2, "weak final contraction: {r:?}");
    }

    #[test]
    fn pericardial_damping_dissipates_energy() {
        let solver = ventricle_solver(&EllipsoidParams::default(), Box::<GuccioneLaw>::default());
        let t_act = vec![0.0; solver.mesh.n_vertices()];
        let zero_load = vec![0.0; solver.n_dofs()];
        // Release from an inflated state with zero initial velocity.
        let d0 = solver.preload_quasi_static(800.0, &t_act).unwrap();
        let dt = 1e-3;
        let mut d_nm1 = d0.clone();
        let mut d_n = d0.clone();
        let mut prev_energy = f64::INFINITY;
        for step in 0..8 {
            let (d_next, _) = solver.step(&d_n, &d_nm1, &t_act, &zero_load, dt).unwrap();
            let energy = solver.discrete_energy(&d_next, &d_n, dt).unwrap();
            if step > 0 {
                assert!(
                    energy <= prev_energy * (1.0 + 1e-9),
                    "energy grew: {energy} > {prev_energy}"
                );
            }
            prev_energy = energy;
            d_nm1 = d_n;
            d_n = d_next;
        }
    }

    #[test]
    fn active_tension_contracts_the_cavity() {
        let solver = ventricle_solver(&EllipsoidParams::default(), Box::<GuccioneLaw>::default());
        let nv = solver.mesh.n_vertices();
        let zero_load = vec![0.0; solver.n_dofs()];
        let d0 = vec![0.0; solver.n_dofs()];
        let mut d_n = d0.clone();
        let mut d_nm1 = d0;
        let dt = 5e-4;
        let t_act = vec![5.0e4; nv];
        for _ in 0..10 {
            let (d_next, _) = solver.step(&d_n, &d_nm1, &t_act, &zero_load, dt).unwrap();
            d_nm1 = d_n;
            d_n = d_next;
        }
        let radial = mean_interface_radial_displacement(&solver, &d_n);
        assert!(radial < -1e-5, "no contraction: {radial}");
    }

    #[test]
    fn vertex_gradients_and_fiber_stretch() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let mesh = Arc::new(solid);
        // Uniform stretch field d = 0.1 * x e_x.
        let mut d = vec![0.0; 3 * mesh.n_vertices()];
        for (v, p) in mesh.vertices.iter().enumerate() {
            d[3 * v] = 0.1 * p.x;
        }
        let grads = vertex_deformation_gradients(&mesh, &d);
        for g in &grads {
            assert!((g[(0, 0)] - 1.1).abs() < 1e-9);
            assert!((g[(1, 1)] - 1.0).abs() < 1e-9);
        }
        let frame = FiberFrame::canonical(mesh.n_vertices());
        let i4f = fiber_stretch(&frame, &grads);
        for &v in &i4f {
            assert!((v - 1.21).abs() < 1e-8);
        }
    }
}
