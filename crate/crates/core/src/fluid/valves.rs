//! Four-phase valve state machine.
//!
//! Valves switch instantaneously: closed to open on an adverse pressure
//! jump, open to closed when the flow through them stalls or reverses.
//! The two valves are never open simultaneously; an opening is only
//! considered while the other valve is closed.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    IsovolumicContraction,
    Ejection,
    IsovolumicRelaxation,
    Filling,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::IsovolumicContraction => "isovolumic_contraction",
            Phase::Ejection => "ejection",
            Phase::IsovolumicRelaxation => "isovolumic_relaxation",
            Phase::Filling => "filling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ValveState {
    pub mitral_open: bool,
    pub aortic_open: bool,
    pub phase: Phase,
}

/// Per-step inputs to the valve logic. Fluxes are outward-positive
/// integrals over the orifices; pressures in Pa.
#[derive(Debug, Clone, Copy)]
pub struct ValveSignals {
    pub cavity_pressure: f64,
    pub mitral_flux: f64,
    pub aortic_flux: f64,
    pub atrial_pressure: f64,
    pub aortic_pressure: f64,
}

impl ValveState {
    /// Start of the beat: end-diastole with both valves closed.
    pub fn initial() -> ValveState {
        ValveState {
            mitral_open: false,
            aortic_open: false,
            phase: Phase::IsovolumicContraction,
        }
    }

    /// Apply the transition rules once.
    pub fn update(&self, s: &ValveSignals) -> ValveState {
        let mut mitral = self.mitral_open;
        let mut aortic = self.aortic_open;

        if aortic {
            // Closes when the outflow stalls or reverses.
            if s.aortic_flux <= 0.0 {
                aortic = false;
            }
        } else if !mitral && s.cavity_pressure > s.aortic_pressure {
            aortic = true;
        }

        if mitral {
            // Inflow is -mitral_flux; close when it stalls or reverses.
            if -s.mitral_flux <= 0.0 {
                mitral = false;
            }
        } else if !self.aortic_open && !aortic && s.cavity_pressure < s.atrial_pressure {
            mitral = true;
        }

        debug_assert!(!(mitral && aortic));
        let phase = match (mitral, aortic) {
            (false, true) => Phase::Ejection,
            (true, false) => Phase::Filling,
            (false, false) => match self.phase {
                Phase::Ejection => Phase::IsovolumicRelaxation,
                Phase::Filling => Phase::IsovolumicContraction,
                keep => keep,
            },
            (true, true) => unreachable!("both valves open"),
        };
        ValveState {
            mitral_open: mitral,
            aortic_open: aortic,
            phase,
        }
    }
}
