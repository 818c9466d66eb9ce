//! Inspect fiber directions and wall motion near the apex.

use efsi::coupling::{Simulation, SimulationConfig};
use efsi::instrument::Instrumentation;
use nalgebra::Vector3;

fn main() {
    let cfg = SimulationConfig::default();
    let sim = Simulation::new(cfg).unwrap();
    // Fiber frame near the apex of the solid mesh.
    println!("-- fibers near apex (z < -0.05) --");
    for (v, p) in sim.solid_mesh.vertices.iter().enumerate() {
        if p.z < -0.055 {
            let f = sim.frame.f0[v];
            println!("v{:3} at ({:+.4},{:+.4},{:+.4})  f0=({:+.2},{:+.2},{:+.2})", v, p.x, p.y, p.z, f.x, f.y, f.z);
        }
    }
    let (mut state, _) = sim.initial_state().unwrap();
    let mut inst = Instrumentation::default();
    for _ in 0..80 {
        sim.step(&mut state, &mut inst).unwrap();
    }
    println!("-- interface displacement at z < -0.045 after 80 steps --");
    for v in sim.solid_mesh.vertices_with(efsi::mesh::BoundaryTag::Interface) {
        let p = sim.solid_mesh.vertices[v];
        if p.z < -0.045 {
            let d = Vector3::new(state.d[3*v], state.d[3*v+1], state.d[3*v+2]);
            // azimuthal unit vector
            let r = (p.x*p.x + p.y*p.y).sqrt();
            let tw = if r > 1e-6 { (-p.y*d.x + p.x*d.y)/r } else { 0.0 };
            println!("v{:3} r={:.4} z={:+.4}  |d|={:.2e} twist={:+.2e} dz={:+.2e}", v, r, p.z, d.norm(), tw, d.z);
        }
    }
}
