//! Scalar indicators and scheme-comparison metrics computed from
//! simulation traces: isovolumetric loss indices, ejection fraction, peak
//! systolic pressure, and field-difference tables across time steps.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluid::Phase;

pub const PA_PER_MMHG: f64 = 133.322;

/// One trace row per time step (including the initial state).
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    /// Cavity volume (m^3).
    pub volume: f64,
    /// Volume-weighted mean cavity pressure (Pa).
    pub pressure: f64,
    pub mitral_open: bool,
    pub aortic_open: bool,
    pub phase: Phase,
    pub mitral_flux: f64,
    pub aortic_flux: f64,
    pub aortic_pressure: f64,
    pub div_ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    /// Step indices at which the phase changes, with the new phase.
    pub fn phase_transitions(&self) -> Vec<(usize, Phase)> {
        let mut out = Vec::new();
        for w in self.rows.windows(2) {
            if w[0].phase != w[1].phase {
                out.push((w[1].step, w[1].phase));
            }
        }
        out
    }

    /// First contiguous span of a phase: (start row index, end row index)
    /// with the start inclusive and the end exclusive (the transition row).
    pub fn phase_span(&self, phase: Phase) -> Option<(usize, usize)> {
        let start = self.rows.iter().position(|r| r.phase == phase)?;
        let end = self.rows[start..]
            .iter()
            .position(|r| r.phase != phase)
            .map(|k| start + k)
            .unwrap_or(self.rows.len() - 1);
        Some((start, end))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "step,t,volume,pressure,mv_state,av_state,phase,mitral_flux,aortic_flux,aortic_pressure,div_ratio"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.12e},{:.12e},{:.12e},{},{},{},{:.12e},{:.12e},{:.12e},{:.6e}",
                r.step,
                r.t,
                r.volume,
                r.pressure,
                if r.mitral_open { "open" } else { "closed" },
                if r.aortic_open { "open" } else { "closed" },
                r.phase.name(),
                r.mitral_flux,
                r.aortic_flux,
                r.aortic_pressure,
                r.div_ratio,
            )?;
        }
        Ok(())
    }
}

/// Indicator bundle of one run.
#[derive(Debug, Clone, Serialize)]
pub struct IndicatorReport {
    /// Isovolumetric loss indices; `None` when the phase is absent.
    pub ili_c: Option<f64>,
    pub ili_r: Option<f64>,
    pub ef: f64,
    pub p_max: f64,
    pub p_max_mmhg: f64,
    pub edv: f64,
    pub esv: f64,
    pub phase_boundaries: Vec<(usize, String)>,
}

/// Relative volume drift over a phase span.
fn ili_over(trace: &Trace, phase: Phase) -> Option<f64> {
    let (start, end) = trace.phase_span(phase)?;
    let vi = trace.rows[start].volume;
    let vf = trace.rows[end].volume;
    Some(((vi - vf) / vi.max(vf)).abs())
}

/// Isovolumetric loss indices from the phase spans. Returns `None` per
/// index when the corresponding phase never occurs.
pub fn compute_ili(trace: &Trace) -> (Option<f64>, Option<f64>) {
    (
        ili_over(trace, Phase::IsovolumicContraction),
        ili_over(trace, Phase::IsovolumicRelaxation),
    )
}

/// Ejection fraction and peak mean pressure over the whole trace.
pub fn compute_ef_pmax(trace: &Trace) -> Result<(f64, f64, f64, f64)> {
    if trace.rows.is_empty() {
        return Err(Error::Usage("empty trace".into()));
    }
    let edv = trace.rows.iter().map(|r| r.volume).fold(f64::MIN, f64::max);
    let esv = trace.rows.iter().map(|r| r.volume).fold(f64::MAX, f64::min);
    let p_max = trace
        .rows
        .iter()
        .map(|r| r.pressure)
        .fold(f64::MIN, f64::max);
    Ok(((edv - esv) / edv, p_max, edv, esv))
}

pub fn build_report(trace: &Trace) -> Result<IndicatorReport> {
    let (ili_c, ili_r) = compute_ili(trace);
    let (ef, p_max, edv, esv) = compute_ef_pmax(trace)?;
    Ok(IndicatorReport {
        ili_c,
        ili_r,
        ef,
        p_max,
        p_max_mmhg: p_max / PA_PER_MMHG,
        edv,
        esv,
        phase_boundaries: trace
            .phase_transitions()
            .into_iter()
            .map(|(s, p)| (s, p.name().to_string()))
            .collect(),
    })
}

/// L2 norms of final-time field differences between paired runs at a
/// ladder of time steps, plus the least-squares observed order.
#[derive(Debug, Clone, Serialize)]
pub struct DifferenceTable {
    pub dts: Vec<f64>,
    /// Per field name, one norm per dt.
    pub norms: Vec<(String, Vec<f64>)>,
    pub observed_orders: Vec<(String, f64)>,
}

/// Discrete L2 difference of two dof vectors weighted by a lumped mass
/// (volume) vector.
pub fn weighted_l2_difference(a: &[f64], b: &[f64], weights: &[f64], components: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != weights.len() * components {
        return Err(Error::Usage(format!(
            "mismatched field sizes: {} vs {} with {} weights x {} components",
            a.len(),
            b.len(),
            weights.len(),
            components
        )));
    }
    let mut sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        for c in 0..components {
            let d = a[i * components + c] - b[i * components + c];
            sum += w * d * d;
        }
    }
    Ok(sum.sqrt())
}

/// Least-squares slope of log(norm) against log(dt).
pub fn observed_order(dts: &[f64], norms: &[f64]) -> f64 {
    let n = dts.len() as f64;
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|e| e.max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

pub fn build_difference_table(
    dts: &[f64],
    fields: Vec<(String, Vec<f64>)>,
) -> DifferenceTable {
    let observed_orders = fields
        .iter()
        .map(|(name, norms)| (name.clone(), observed_order(dts, norms)))
        .collect();
    DifferenceTable {
        dts: dts.to_vec(),
        norms: fields,
        observed_orders,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)
        .map_err(|e| Error::Usage(format!("JSON serialization failed: {e}")))?;
    Ok(())
}
