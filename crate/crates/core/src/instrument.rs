//! Solve/assembly counters and wall-time accounting per subsystem.

use std::time::Instant;

use serde::Serialize;

#[derive(Debug, Clone, Default, Serialize)]
pub struct Instrumentation {
    pub fluid_solves: usize,
    pub solid_solves: usize,
    pub coupled_solves: usize,
    pub lifting_solves: usize,
    pub ep_solves: usize,
    /// Accumulated Newton iterations of the coupled solver.
    pub coupled_newton_iterations: usize,
    pub seconds_ep: f64,
    pub seconds_activation: f64,
    pub seconds_lifting: f64,
    pub seconds_fluid_assembly: f64,
    pub seconds_fluid_solve: f64,
    pub seconds_solid: f64,
    pub seconds_coupled: f64,
    pub seconds_total: f64,
}

impl Instrumentation {
    pub fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *slot += start.elapsed().as_secs_f64();
        out
    }

    /// Sum of the per-subsystem buckets (excluding the total).
    pub fn accounted(&self) -> f64 {
        self.seconds_ep
            + self.seconds_activation
            + self.seconds_lifting
            + self.seconds_fluid_assembly
            + self.seconds_fluid_solve
            + self.seconds_solid
            + self.seconds_coupled
    }
}
