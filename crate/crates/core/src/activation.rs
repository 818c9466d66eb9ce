//! Force-generation state evolution and active-tension evaluation.
//!
//! The bundled model tracks two states per point: a lag variable driven by
//! a thresholded Hill function of calcium times a fiber-stretch factor,
//! and the tension fraction G relaxing toward it. G is clamped to [0, 1]
//! after every explicit step.

use crate::error::{Error, Result};

/// Point-wise activation kinetics contract.
pub trait ActivationModel: Send + Sync {
    fn n_state(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    /// Right-hand side of ds/dt given calcium (uM) and the fiber stretch
    /// invariant I4f.
    fn rhs(&self, s: &[f64], calcium: f64, i4f: f64, out: &mut [f64]);
    /// Tension fraction in [0, 1].
    fn tension_fraction(&self, s: &[f64]) -> f64;
    /// Projection applied after each explicit step.
    fn clamp(&self, s: &mut [f64]);
    /// Steady-state tension fraction target (used by tests and tuning).
    fn steady_target(&self, calcium: f64, i4f: f64) -> f64;
}

/// Two-state reduced activation model with Frank-Starling-like stretch
/// sensitivity.
#[derive(Debug, Clone)]
pub struct TwoStateActivation {
    /// Lag and relaxation times (s), already compressed.
    pub tau_rise: f64,
    pub tau_fall: f64,
    /// Calcium threshold and half-saturation (uM).
    pub ca_thresh: f64,
    pub ca50: f64,
    pub hill: f64,
    /// Stretch sensitivity of the steady-state target.
    pub gamma: f64,
}

impl TwoStateActivation {
    pub fn new(compression: f64) -> Self {
        TwoStateActivation {
            tau_rise: 0.035 / compression,
            tau_fall: 0.10 / compression,
            ca_thresh: 0.15,
            ca50: 0.45,
            hill: 2.0,
            gamma: 6.0,
        }
    }

    fn hill_drive(&self, calcium: f64) -> f64 {
        let c = (calcium - self.ca_thresh).max(0.0);
        let c50 = self.ca50 - self.ca_thresh;
        c.powf(self.hill) / (c.powf(self.hill) + c50.powf(self.hill))
    }

    fn stretch_factor(&self, i4f: f64) -> f64 {
        // Ascending limb plus extinction under strong shortening, so the
        // contraction finds a finite end-systolic volume.
        (1.0 + self.gamma * (i4f.max(0.0).sqrt() - 1.0)).clamp(0.0, 1.5)
    }
}

impl ActivationModel for TwoStateActivation {
    fn n_state(&self) -> usize {
        2
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn rhs(&self, s: &[f64], calcium: f64, i4f: f64, out: &mut [f64]) {
        let target = self.hill_drive(calcium) * self.stretch_factor(i4f);
        out[0] = (target - s[0]) / self.tau_rise;
        out[1] = (s[0] - s[1]) / self.tau_fall;
    }

    fn tension_fraction(&self, s: &[f64]) -> f64 {
        s[1]
    }

    fn clamp(&self, s: &mut [f64]) {
        s[0] = s[0].clamp(0.0, 1.0);
        s[1] = s[1].clamp(0.0, 1.0);
    }

    fn steady_target(&self, calcium: f64, i4f: f64) -> f64 {
        (self.hill_drive(calcium) * self.stretch_factor(i4f)).min(1.0)
    }
}

/// Forward-Euler update of the activation field: one state vector per
/// point, interleaved. Calcium and stretch are per point.
pub fn activation_step(
    model: &dyn ActivationModel,
    s: &mut [f64],
    calcium: &[f64],
    i4f: &[f64],
    dt: f64,
) -> Result<()> {
    let ns = model.n_state();
    let n = calcium.len();
    debug_assert_eq!(s.len(), n * ns);
    let mut rhs = vec![0.0; ns];
    for p in 0..n {
        let sp = &mut s[p * ns..(p + 1) * ns];
        model.rhs(sp, calcium[p], i4f[p], &mut rhs);
        for i in 0..ns {
            sp[i] += dt * rhs[i];
            if !sp[i].is_finite() {
                return Err(Error::NonFiniteState {
                    context: format!("activation state at point {p}"),
                });
            }
        }
        model.clamp(sp);
    }
    Ok(())
}

/// Active tension (Pa) from the tension fraction field.
pub fn active_tension(model: &dyn ActivationModel, s: &[f64], t_act_max: f64) -> Vec<f64> {
    let ns = model.n_state();
    let n = s.len() / ns;
    (0..n)
        .map(|p| t_act_max * model.tension_fraction(&s[p * ns..(p + 1) * ns]))
        .collect()
}
