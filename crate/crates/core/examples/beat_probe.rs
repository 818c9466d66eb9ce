//! Scratch driver: run one heartbeat and print trace/indicator summary.

use efsi::coupling::{SchemeKind, Simulation, SimulationConfig};

fn main() {
    let mut cfg = SimulationConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        cfg.time.scheme = SchemeKind::parse(&args[1]).unwrap();
    }
    if args.len() > 2 {
        cfg.time.dt = args[2].parse().unwrap();
    }
    if args.len() > 3 {
        cfg.time.alpha = args[3].parse().unwrap();
    }
    if args.len() > 4 {
        cfg.valve_bc.p_av0 = args[4].parse().unwrap();
    }
    if args.len() > 5 {
        cfg.t_act_max = args[5].parse().unwrap();
    }
    if args.len() > 6 {
        cfg.valve_bc.r_av = args[6].parse().unwrap();
    }
    if args.len() > 7 {
        cfg.time.t_end = args[7].parse().unwrap();
    }
    let sim = Simulation::new(cfg).unwrap();
    let t0 = std::time::Instant::now();
    let result = sim.run(None).unwrap();
    println!("verdict: {:?}  wall {:.1}s", result.verdict, t0.elapsed().as_secs_f64());
    let rows = &result.trace.rows;
    let window: Option<(usize, usize)> = if args.len() > 8 {
        let lo = args[8].parse().unwrap();
        let hi = args[9].parse().unwrap();
        Some((lo, hi))
    } else {
        None
    };
    let every = (rows.len() / 25).max(1);
    for (k, r) in rows.iter().enumerate() {
        if let Some((lo, hi)) = window {
            if k >= lo && k <= hi {
                println!(
                    "step {:4} t={:.4} V={:.5e} p={:8.1}  {:22} qav={:+.3e}",
                    r.step, r.t, r.volume, r.pressure, r.phase.name(), r.aortic_flux
                );
            }
            continue;
        }
        if k % every == 0 || k + 1 == rows.len() {
            println!(
                "step {:4} t={:.4} V={:.4e} p={:8.1}  {:22} qmv={:+.2e} qav={:+.2e} div={:.3}",
                r.step, r.t, r.volume, r.pressure, r.phase.name(), r.mitral_flux, r.aortic_flux, r.div_ratio
            );
        }
    }
    println!("transitions: {:?}", result.trace.phase_transitions().iter().map(|(s, p)| (*s, p.name())).collect::<Vec<_>>());
    if let Some(rep) = &result.report {
        println!(
            "ili_c={:?} ili_r={:?} ef={:.4} pmax={:.1}mmHg edv={:.4e} esv={:.4e}",
            rep.ili_c, rep.ili_r, rep.ef, rep.p_max_mmhg, rep.edv, rep.esv
        );
    }
    println!("max div ratio {:.3}", result.max_div_ratio);
    let i = &result.instrumentation;
    println!(
        "counters f={} s={} c={} | ep={:.1} act={:.1} lift={:.1} fluid={:.1} solid={:.1} coupled={:.1} total={:.1}",
        i.fluid_solves, i.solid_solves, i.coupled_solves, i.seconds_ep, i.seconds_activation,
        i.seconds_lifting, i.seconds_fluid_solve, i.seconds_solid, i.seconds_coupled, i.seconds_total
    );
}
