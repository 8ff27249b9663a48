#![allow(dead_code)]

use geotdm::sim::{frame_energy, momentum, random_initial_state, simulate_from, InitialState, SimRun, SystemKind, SystemSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PHYSICS_FRAMES: usize = 50;

/// Conservation figures for one seeded run, measured against a run with a
/// ten times smaller step and ten times more substeps.
#[derive(Debug)]
pub struct PhysicsReport {
    pub kind: SystemKind,
    /// Worst per-frame change of total momentum, divided by the momentum scale `Σ m|v|` at frame 0.
    pub momentum: f64,
    /// Worst `|E(t) − E(0)| / |E(0)|` of the coarse run.
    pub drift: f64,
    /// Worst `|E(t) − E_oracle(t)| / |E_oracle(0)|`.
    pub oracle_gap: f64,
}

pub fn finer(spec: &SystemSpec) -> SystemSpec {
    SystemSpec { dt: spec.dt / 10.0, substeps: spec.substeps * 10, ..spec.clone() }
}

fn momentum_scale(run: &SimRun) -> f64 {
    let d = run.velocities.dim;
    run.masses
        .iter()
        .enumerate()
        .map(|(i, m)| m * run.velocities.point(0, i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        .max(1e-12 * d as f64)
}

pub fn physics_report(kind: SystemKind, seed: u64) -> PhysicsReport {
    let spec = SystemSpec::default_for(kind);
    let init = random_initial_state(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let run = simulate_from(&spec, &init, PHYSICS_FRAMES).unwrap();
    let fine_spec = finer(&spec);
    let oracle = simulate_from(&fine_spec, &init, PHYSICS_FRAMES).unwrap();
    let p0 = momentum(&run, 0);
    let scale = momentum_scale(&run);
    let mut worst_p = 0.0f64;
    for t in 0..PHYSICS_FRAMES {
        let p = momentum(&run, t);
        let dev = p.iter().zip(&p0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_p = worst_p.max(dev / scale);
    }
    let e0 = frame_energy(&spec, &run, 0);
    let eo0 = frame_energy(&fine_spec, &oracle, 0);
    let (mut drift, mut gap) = (0.0f64, 0.0f64);
    for t in 0..PHYSICS_FRAMES {
        let e = frame_energy(&spec, &run, t);
        drift = drift.max((e - e0).abs() / e0.abs());
        gap = gap.max((e - frame_energy(&fine_spec, &oracle, t)).abs() / eo0.abs());
    }
    PhysicsReport { kind, momentum: worst_p, drift, oracle_gap: gap }
}

/// A light body circling a heavy one at radius 1; returns the worst relative
/// radius error over one period.
pub fn orbit_radius_error() -> f64 {
    let (big, r) = (1.0, 1.0);
    let spec = SystemSpec {
        n_bodies: 2,
        softening: 0.0,
        dt: 1e-3,
        substeps: 10,
        ..SystemSpec::default_for(SystemKind::Gravity)
    };
    let speed = (spec.coupling * big / r).sqrt();
    let init = InitialState {
        positions: vec![0.0, 0.0, 0.0, r, 0.0, 0.0],
        velocities: vec![0.0, 0.0, 0.0, 0.0, speed, 0.0],
        masses: vec![big, 1e-9],
        charges: vec![0.0; 2],
        springs: Vec::new(),
    };
    let period = 2.0 * std::f64::consts::PI * r / speed;
    let frames = (period / spec.frame_time()).ceil() as usize + 1;
    let run = simulate_from(&spec, &init, frames).unwrap();
    let c = &run.trajectory.coords;
    (0..frames)
        .map(|t| {
            let dist = c.point(t, 1).iter().zip(c.point(t, 0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (dist / r - 1.0).abs()
        })
        .fold(0.0, f64::max)
}
