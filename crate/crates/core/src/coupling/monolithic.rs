//! Monolithic implicit fluid-structure step.
//!
//! Unknowns are the fluid nodal (u, p) plus the interior solid
//! displacements. The kinematic interface condition is enforced strongly
//! by dof identification: on the conforming interface the displacement is
//! d = d_n + dt * u, so interface velocities are the shared unknowns. The
//! dynamic condition is enforced weakly by summing the fluid and solid
//! virtual work on interface test functions (both interface boundary
//! integrals cancel). The fluid block is linear (semi-implicit advection,
//! frozen geometry); Newton handles the solid nonlinearity.

use nalgebra::Point3;

use super::{SimState, Simulation};
use crate::error::{Error, Result};
use crate::fem::{solve_gmres, solvers::BlockLowerTriangular, SolveOpts, SparseMatrix};
use crate::fluid::FluxReport;
use crate::instrument::Instrumentation;
use crate::mesh::BoundaryTag;

/// Column mapping of one solid dof into the global unknown vector.
#[derive(Clone, Copy)]
enum SolidDof {
    /// Fixed at zero (base).
    Constrained,
    /// Shared with a fluid velocity dof; the chain factor is dt.
    Interface(usize),
    /// Interior displacement unknown.
    Interior(usize),
}

pub struct MonolithicSystem<'a> {
    sim: &'a Simulation,
    coords: Vec<Point3<f64>>,
    a_f: SparseMatrix,
    b_f: Vec<f64>,
    dt: f64,
    d_n: Vec<f64>,
    d_nm1: Vec<f64>,
    t_act: Vec<f64>,
    zero_load: Vec<f64>,
    map: Vec<SolidDof>,
    n_fluid: usize,
    n_total: usize,
    pattern: SparseMatrix,
    newton_tol: f64,
    max_newton: usize,
}

impl<'a> MonolithicSystem<'a> {
    pub fn build(
        sim: &'a Simulation,
        state: &SimState,
        coords: &[Point3<f64>],
        u_ale: &[f64],
    ) -> Result<MonolithicSystem<'a>> {
        let dt = sim.dt();
        let (mut a_f, mut b_f) =
            sim.fluid
                .assemble_operator(coords, &state.fluid.u, u_ale, dt)?;
        sim.fluid
            .apply_valve_bcs(&mut a_f, &mut b_f, &state.valves, coords);
        let (dofs, vals) = sim.fluid.dirichlet_dofs(&state.valves);
        a_f.apply_dirichlet(&mut b_f, &dofs, &vals);

        // Classify solid dofs.
        let nv_s = sim.solid_mesh.n_vertices();
        let base: std::collections::HashSet<usize> = sim
            .solid_mesh
            .vertices_with(BoundaryTag::SolidBase)
            .into_iter()
            .collect();
        let n_fluid = 4 * sim.fluid_mesh.n_vertices();
        let mut map = vec![SolidDof::Constrained; 3 * nv_s];
        let mut n_interior = 0;
        for sv in 0..nv_s {
            if base.contains(&sv) {
                continue;
            }
            if let Some(&fv) = sim.solid_to_fluid.get(&sv) {
                for a in 0..3 {
                    map[3 * sv + a] = SolidDof::Interface(4 * fv + a);
                }
            } else {
                for a in 0..3 {
                    map[3 * sv + a] = SolidDof::Interior(n_fluid + 3 * n_interior + a);
                }
                n_interior += 1;
            }
        }
        let n_total = n_fluid + 3 * n_interior;

        // Global pattern: fluid entries in place, solid entries mapped.
        let mut couplings = Vec::new();
        for i in 0..a_f.n {
            for k in a_f.row_offsets[i]..a_f.row_offsets[i + 1] {
                couplings.push((i, a_f.col_indices[k]));
            }
        }
        for cell in &sim.solid_mesh.cells {
            for &vi in cell {
                for &vj in cell {
                    for a in 0..3 {
                        for b in 0..3 {
                            let (ri, rj) = (map[3 * vi + a], map[3 * vj + b]);
                            let gi = match ri {
                                SolidDof::Constrained => continue,
                                SolidDof::Interface(g) | SolidDof::Interior(g) => g,
                            };
                            let gj = match rj {
                                SolidDof::Constrained => continue,
                                SolidDof::Interface(g) | SolidDof::Interior(g) => g,
                            };
                            couplings.push((gi, gj));
                        }
                    }
                }
            }
        }
        let pattern = SparseMatrix::from_pattern(n_total, couplings);

        Ok(MonolithicSystem {
            sim,
            coords: coords.to_vec(),
            a_f,
            b_f,
            dt,
            d_n: state.d.clone(),
            d_nm1: state.d_prev.clone(),
            t_act: state.t_act.clone(),
            zero_load: vec![0.0; 3 * nv_s],
            map,
            n_fluid,
            n_total,
            pattern,
            newton_tol: sim.cfg.time.monolithic_tol,
            max_newton: 30,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_total
    }

    /// Initial guess from the previous time level.
    pub fn initial_guess(&self, state: &SimState) -> Vec<f64> {
        let mut x = vec![0.0; self.n_total];
        let nv_f = self.sim.fluid_mesh.n_vertices();
        for v in 0..nv_f {
            x[4 * v] = state.fluid.u[3 * v];
            x[4 * v + 1] = state.fluid.u[3 * v + 1];
            x[4 * v + 2] = state.fluid.u[3 * v + 2];
            x[4 * v + 3] = state.fluid.p[v];
        }
        for (sdof, entry) in self.map.iter().enumerate() {
            if let SolidDof::Interior(g) = entry {
                x[*g] = state.d[sdof];
            }
        }
        x
    }

    /// Reconstruct the full displacement field from the unknown vector.
    pub fn solid_displacement(&self, x: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.map.len()];
        for (sdof, entry) in self.map.iter().enumerate() {
            d[sdof] = match entry {
                SolidDof::Constrained => 0.0,
                SolidDof::Interface(g) => self.d_n[sdof] + self.dt * x[*g],
                SolidDof::Interior(g) => x[*g],
            };
        }
        d
    }

    /// Coupled residual and Jacobian at the given iterate.
    pub fn residual_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let mut r = vec![0.0; self.n_total];
        // Fluid block is linear: r_f = A_f x_f - b_f.
        let mut ax = vec![0.0; self.a_f.n];
        self.a_f.matvec(&x[..self.n_fluid], &mut ax);
        for i in 0..self.n_fluid {
            r[i] = ax[i] - self.b_f[i];
        }
        let d = self.solid_displacement(x);
        let (r_s, k_s) = self.sim.solid.assemble_for_coupling(
            &d,
            &self.d_n,
            &self.d_nm1,
            self.dt,
            &self.t_act,
            &self.zero_load,
        )?;
        for (sdof, entry) in self.map.iter().enumerate() {
            match entry {
                SolidDof::Constrained => {}
                SolidDof::Interface(g) | SolidDof::Interior(g) => r[*g] += r_s[sdof],
            }
        }

        let mut k = self.pattern.clone();
        k.zero_values();
        for i in 0..self.a_f.n {
            for kk in self.a_f.row_offsets[i]..self.a_f.row_offsets[i + 1] {
                k.add(i, self.a_f.col_indices[kk], self.a_f.values[kk]);
            }
        }
        for i in 0..k_s.n {
            let gi = match self.map[i] {
                SolidDof::Constrained => continue,
                SolidDof::Interface(g) | SolidDof::Interior(g) => g,
            };
            for kk in k_s.row_offsets[i]..k_s.row_offsets[i + 1] {
                let j = k_s.col_indices[kk];
                let (gj, factor) = match self.map[j] {
                    SolidDof::Constrained => continue,
                    SolidDof::Interface(g) => (g, self.dt),
                    SolidDof::Interior(g) => (g, 1.0),
                };
                k.add(gi, gj, k_s.values[kk] * factor);
            }
        }
        Ok((r, k))
    }

    /// Newton iteration; on success writes the new fluid and solid states
    /// back and returns the flux report.
    pub fn solve(&self, state: &mut SimState, inst: &mut Instrumentation) -> Result<FluxReport> {
        let mut x = self.initial_guess(state);
        let mut r0 = 0.0;
        let floor = 1e-9 * (1.0 + self.b_f.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let mut history = Vec::new();
        let mut converged = false;
        // The guess ties the interface displacement to the previous
        // velocity; if that extrapolation inverts an element, restart from
        // a quiescent interface.
        let (mut r, mut k) = match self.residual_and_jacobian(&x) {
            Ok(pair) => pair,
            Err(Error::InvertedElement { .. }) => {
                let nv_f = self.sim.fluid_mesh.n_vertices();
                for v in 0..nv_f {
                    x[4 * v] = 0.0;
                    x[4 * v + 1] = 0.0;
                    x[4 * v + 2] = 0.0;
                }
                self.residual_and_jacobian(&x)?
            }
            Err(e) => return Err(e),
        };
        for it in 0..=self.max_newton {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            history.push(norm);
            if it == 0 {
                r0 = norm;
            }
            if norm <= self.newton_tol * r0.max(1e-30) || norm <= floor {
                converged = true;
                inst.coupled_newton_iterations += it;
                break;
            }
            if it == self.max_newton {
                break;
            }
            let pc = BlockLowerTriangular::new(
                &k,
                self.n_fluid..self.n_total,
                0..self.n_fluid,
            );
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let mut delta = vec![0.0; self.n_total];
            solve_gmres(
                &k,
                &rhs,
                &mut delta,
                &SolveOpts {
                    tol: 1e-9,
                    max_iter: 6000,
                    restart: 400,
                },
                &pc,
            )?;
            // Backtrack on element inversion of the solid block.
            let mut scale = 1.0;
            loop {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&delta)
                    .map(|(v, dv)| v + scale * dv)
                    .collect();
                match self.residual_and_jacobian(&trial) {
                    Ok((r2, k2)) => {
                        x = trial;
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
        if !converged {
            return Err(Error::NewtonDiverged {
                iterations: self.max_newton,
                history,
            });
        }
        inst.coupled_solves += 1;

        let nv_f = self.sim.fluid_mesh.n_vertices();
        let mut u = vec![0.0; 3 * nv_f];
        let mut p = vec![0.0; nv_f];
        for v in 0..nv_f {
            u[3 * v] = x[4 * v];
            u[3 * v + 1] = x[4 * v + 1];
            u[3 * v + 2] = x[4 * v + 2];
            p[v] = x[4 * v + 3];
        }
        let d_next = self.solid_displacement(&x);
        state.d_prev = std::mem::replace(&mut state.d, d_next);
        state.fluid = crate::fluid::FluidState { u, p };
        self.sim.fluid.flux_report(&state.fluid, &self.coords)
    }
}
