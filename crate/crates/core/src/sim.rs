//! Charged-particle, spring and gravity N-body systems integrated with
//! kick-drift-kick leapfrog, and the deterministic dataset builder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::egtn::Condition;
use crate::error::{GeoError, Result};
use crate::geom::{Coords, GeoTrajectory};
use crate::gtrj;
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Charged,
    Spring,
    Gravity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n_bodies: usize,
    #[serde(default = "three")]
    pub dim: usize,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps per stored frame.
    #[serde(default = "ten")]
    pub substeps: usize,
    /// Coulomb constant, spring stiffness or gravitational constant.
    pub coupling: f64,
    #[serde(default = "unit")]
    pub rest_length: f64,
    #[serde(default)]
    pub softening: f64,
    #[serde(default = "unit")]
    pub position_scale: f64,
    #[serde(default = "half")]
    pub velocity_scale: f64,
    #[serde(default = "half")]
    pub spring_probability: f64,
}

fn three() -> usize {
    3
}

fn ten() -> usize {
    10
}

fn unit() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl SystemSpec {
    pub fn default_for(kind: SystemKind) -> Self {
        let base = Self {
            kind,
            n_bodies: 5,
            dim: 3,
            dt: 0.01,
            substeps: 10,
            coupling: 1.0,
            rest_length: 1.0,
            softening: 0.1,
            position_scale: 1.0,
            velocity_scale: 0.5,
            spring_probability: 0.5,
        };
        match kind {
            SystemKind::Charged => Self { dt: 0.001, substeps: 100, ..base },
            SystemKind::Spring => Self { softening: 0.0, ..base },
            SystemKind::Gravity => Self { n_bodies: 10, dt: 0.002, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bodies < 2 {
            return Err(GeoError::invalid("n_bodies must be at least 2"));
        }
        if !(self.dim == 2 || self.dim == 3) {
            return Err(GeoError::invalid("dim must be 2 or 3"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.substeps == 0 {
            return Err(GeoError::invalid("dt must be positive and substeps at least 1"));
        }
        if !(self.softening >= 0.0) || !(self.rest_length >= 0.0) {
            return Err(GeoError::invalid("softening and rest length must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.spring_probability) {
            return Err(GeoError::invalid("spring probability must lie in [0, 1]"));
        }
        if !(self.position_scale >= 0.0 && self.velocity_scale >= 0.0 && self.coupling.is_finite()) {
            return Err(GeoError::invalid("scales must be nonnegative and coupling finite"));
        }
        Ok(())
    }

    /// Simulated time between stored frames.
    pub fn frame_time(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// Positions and velocities are `N×D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub masses: Vec<f64>,
    pub charges: Vec<f64>,
    /// Undirected pairs `i < j`; springs for the spring system.
    pub springs: Vec<(usize, usize)>,
}

pub fn random_initial_state<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Result<InitialState> {
    spec.validate()?;
    let (n, d) = (spec.n_bodies, spec.dim);
    let mut normal = |scale: f64, k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect()
    };
    let positions = normal(spec.position_scale, n * d);
    let velocities = normal(spec.velocity_scale, n * d);
    let mass_dist = Uniform::new_inclusive(0.5, 2.0).expect("valid range");
    let (masses, charges) = match spec.kind {
        SystemKind::Charged => {
            let q = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            (vec![1.0; n], q)
        }
        _ => ((0..n).map(|_| mass_dist.sample(rng)).collect(), vec![0.0; n]),
    };
    let mut springs = Vec::new();
    if spec.kind == SystemKind::Spring {
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(spec.spring_probability) {
                    springs.push((i, j));
                }
            }
        }
    }
    Ok(InitialState { positions, velocities, masses, charges, springs })
}

/// Simulated trajectory with the state needed for conservation checks.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub trajectory: GeoTrajectory<f64>,
    pub velocities: Coords<f64>,
    pub masses: Vec<f64>,
    pub charges: Vec<f64>,
    pub springs: Vec<(usize, usize)>,
}

fn accelerations(spec: &SystemSpec, st: &InitialState, x: &[f64], acc: &mut [f64]) -> Result<()> {
    let (n, d) = (spec.n_bodies, spec.dim);
    acc.iter_mut().for_each(|a| *a = 0.0);
    let eps2 = spec.softening * spec.softening;
    let pair = |i: usize, j: usize, acc: &mut [f64]| -> Result<()> {
        let mut diff = [0.0; 3];
        let mut r2 = 0.0;
        for k in 0..d {
            diff[k] = x[i * d + k] - x[j * d + k];
            r2 += diff[k] * diff[k];
        }
        // force on i along (x_i − x_j), scaled
        let s = match spec.kind {
            SystemKind::Charged | SystemKind::Gravity => {
                if eps2 == 0.0 && r2.sqrt() < 1e-9 {
                    return Err(GeoError::Numerical(format!("bodies {i} and {j} overlap")));
                }
                let inv3 = (r2 + eps2).powf(-1.5);
                match spec.kind {
                    SystemKind::Charged => spec.coupling * st.charges[i] * st.charges[j] * inv3,
                    _ => -spec.coupling * st.masses[i] * st.masses[j] * inv3,
                }
            }
            SystemKind::Spring => {
                let r = r2.sqrt();
                if r < 1e-12 {
                    return Ok(());
                }
                -spec.coupling * (r - spec.rest_length) / r
            }
        };
        for k in 0..d {
            acc[i * d + k] += s * diff[k] / st.masses[i];
            acc[j * d + k] -= s * diff[k] / st.masses[j];
        }
        Ok(())
    };
    match spec.kind {
        SystemKind::Spring => {
            for &(i, j) in &st.springs {
                pair(i, j, acc)?;
            }
        }
        _ => {
            for i in 0..n {
                for j in i + 1..n {
                    pair(i, j, acc)?;
                }
            }
        }
    }
    Ok(())
}

/// Kinetic plus potential energy of a state.
pub fn total_energy(spec: &SystemSpec, st: &InitialState, x: &[f64], v: &[f64]) -> f64 {
    let (n, d) = (spec.n_bodies, spec.dim);
    let mut e = 0.0;
    for i in 0..n {
        let v2: f64 = v[i * d..(i + 1) * d].iter().map(|c| c * c).sum();
        e += 0.5 * st.masses[i] * v2;
    }
    let dist2 = |i: usize, j: usize| -> f64 { (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum() };
    let eps2 = spec.softening * spec.softening;
    match spec.kind {
        SystemKind::Spring => {
            for &(i, j) in &st.springs {
                let r = dist2(i, j).sqrt();
                e += 0.5 * spec.coupling * (r - spec.rest_length).powi(2);
            }
        }
        SystemKind::Charged => {
            for i in 0..n {
                for j in i + 1..n {
                    e += spec.coupling * st.charges[i] * st.charges[j] / (dist2(i, j) + eps2).sqrt();
                }
            }
        }
        SystemKind::Gravity => {
            for i in 0..n {
                for j in i + 1..n {
                    e -= spec.coupling * st.masses[i] * st.masses[j] / (dist2(i, j) + eps2).sqrt();
                }
            }
        }
    }
    e
}

/// `Σ m_i v_i` of frame `t`.
pub fn momentum(run: &SimRun, t: usize) -> Vec<f64> {
    let d = run.velocities.dim;
    let mut p = vec![0.0; d];
    for (i, m) in run.masses.iter().enumerate() {
        for (pk, vk) in p.iter_mut().zip(run.velocities.point(t, i)) {
            *pk += m * vk;
        }
    }
    p
}

/// Energy of stored frame `t` of a run.
pub fn frame_energy(spec: &SystemSpec, run: &SimRun, t: usize) -> f64 {
    let st = InitialState {
        positions: Vec::new(),
        velocities: Vec::new(),
        masses: run.masses.clone(),
        charges: run.charges.clone(),
        springs: run.springs.clone(),
    };
    total_energy(spec, &st, run.trajectory.coords.frame(t), run.velocities.frame(t))
}

/// Integrates from `init`, storing `frames` frames (the first is the initial state).
pub fn simulate_from(spec: &SystemSpec, init: &InitialState, frames: usize) -> Result<SimRun> {
    spec.validate()?;
    let (n, d) = (spec.n_bodies, spec.dim);
    if frames == 0 {
        return Err(GeoError::invalid("need at least one frame"));
    }
    if init.positions.len() != n * d
        || init.velocities.len() != n * d
        || init.masses.len() != n
        || init.charges.len() != n
        || init.springs.iter().any(|&(i, j)| i >= n || j >= n || i == j)
        || init.masses.iter().any(|m| !(*m > 0.0))
    {
        return Err(GeoError::dim("initial state does not match the system"));
    }
    let h = spec.dt;
    let mut x = init.positions.clone();
    let mut v = init.velocities.clone();
    let mut a = vec![0.0; n * d];
    accelerations(spec, init, &x, &mut a)?;
    let mut xs = Coords::zeros(frames, n, d);
    let mut vs = Coords::zeros(frames, n, d);
    xs.data[..n * d].copy_from_slice(&x);
    vs.data[..n * d].copy_from_slice(&v);
    for t in 1..frames {
        for _ in 0..spec.substeps {
            for k in 0..n * d {
                v[k] += 0.5 * h * a[k];
                x[k] += h * v[k];
            }
            accelerations(spec, init, &x, &mut a)?;
            for k in 0..n * d {
                v[k] += 0.5 * h * a[k];
            }
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(GeoError::Numerical(format!("simulation diverged at frame {t}")));
        }
        xs.data[t * n * d..(t + 1) * n * d].copy_from_slice(&x);
        vs.data[t * n * d..(t + 1) * n * d].copy_from_slice(&v);
    }
    let features = match spec.kind {
        SystemKind::Charged => init.charges.clone(),
        _ => init.masses.clone(),
    };
    let edges = match spec.kind {
        SystemKind::Spring => init.springs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect(),
        _ => (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect(),
    };
    let mut trajectory = GeoTrajectory::new(xs, Mat::from_vec(n, 1, features), edges)?;
    trajectory.dt = Some(spec.frame_time());
    Ok(SimRun {
        trajectory,
        velocities: vs,
        masses: init.masses.clone(),
        charges: init.charges.clone(),
        springs: init.springs.clone(),
    })
}

pub fn simulate<R: Rng + ?Sized>(spec: &SystemSpec, frames: usize, rng: &mut R) -> Result<SimRun> {
    let init = random_initial_state(spec, rng)?;
    simulate_from(spec, &init, frames)
}

fn simulate_kind<R: Rng + ?Sized>(
    kind: SystemKind,
    spec: &SystemSpec,
    frames: usize,
    rng: &mut R,
) -> Result<GeoTrajectory<f64>> {
    if spec.kind != kind {
        return Err(GeoError::invalid(format!("expected a {kind:?} system, got {:?}", spec.kind)));
    }
    Ok(simulate(spec, frames, rng)?.trajectory)
}

pub fn simulate_charged<R: Rng + ?Sized>(spec: &SystemSpec, frames: usize, rng: &mut R) -> Result<GeoTrajectory<f64>> {
    simulate_kind(SystemKind::Charged, spec, frames, rng)
}

pub fn simulate_spring<R: Rng + ?Sized>(spec: &SystemSpec, frames: usize, rng: &mut R) -> Result<GeoTrajectory<f64>> {
    simulate_kind(SystemKind::Spring, spec, frames, rng)
}

pub fn simulate_gravity<R: Rng + ?Sized>(spec: &SystemSpec, frames: usize, rng: &mut R) -> Result<GeoTrajectory<f64>> {
    simulate_kind(SystemKind::Gravity, spec, frames, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetManifest {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub total_frames: usize,
    pub cond_frames: usize,
    pub target_frames: usize,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { train: 3000, valid: 2000, test: 2000, total_frames: 30, cond_frames: 10, target_frames: 20, seed: 0 }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.valid == 0 || self.test == 0 {
            return Err(GeoError::invalid("every split needs at least one trajectory"));
        }
        if self.target_frames == 0 || self.total_frames < self.cond_frames + self.target_frames {
            return Err(GeoError::invalid("total_frames must cover cond_frames + target_frames"));
        }
        Ok(())
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Split file names plus the manifest written next to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub system: SystemSpec,
    pub manifest: DatasetManifest,
}

/// Simulates one split; trajectory `k` uses its own stream of the seeded generator.
pub fn generate_split(
    spec: &SystemSpec,
    manifest: &DatasetManifest,
    split: usize,
    count: usize,
) -> Result<Vec<GeoTrajectory<f32>>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            rng.set_stream(((split as u64) << 40) | k as u64);
            let run = simulate(spec, manifest.total_frames, &mut rng)?;
            Ok(run.trajectory.cast::<f32>())
        })
        .collect()
}

/// Writes `train.gtrj`, `valid.gtrj`, `test.gtrj` and `manifest.toml` into `dir`.
pub fn build_dataset(spec: &SystemSpec, manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    spec.validate()?;
    manifest.validate()?;
    std::fs::create_dir_all(dir)?;
    let counts = [manifest.train, manifest.valid, manifest.test];
    for (split, name) in SPLITS.iter().enumerate() {
        let trajs = generate_split(spec, manifest, split, counts[split])?;
        gtrj::write_file(&dir.join(format!("{name}.gtrj")), &trajs)?;
    }
    let index = DatasetIndex { system: spec.clone(), manifest: manifest.clone() };
    let text = toml::to_string_pretty(&index).map_err(|e| GeoError::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub train: Vec<GeoTrajectory<f32>>,
    pub valid: Vec<GeoTrajectory<f32>>,
    pub test: Vec<GeoTrajectory<f32>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[GeoTrajectory<f32>]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(GeoError::invalid(format!("unknown split {name}"))),
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let index: DatasetIndex = toml::from_str(&text).map_err(|e| GeoError::Config(e.to_string()))?;
    let dt = index.system.frame_time();
    let load = |name: &str| -> Result<Vec<GeoTrajectory<f32>>> {
        let mut v = gtrj::read_file(&dir.join(format!("{name}.gtrj")))?;
        for t in &mut v {
            t.dt = Some(dt);
        }
        Ok(v)
    };
    Ok(Dataset { train: load("train")?, valid: load("valid")?, test: load("test")?, index })
}

/// Condition window of `cond_frames` frames followed by a target window of `target_frames`.
pub fn split_window<F: crate::real::Real>(
    traj: &GeoTrajectory<F>,
    cond_frames: usize,
    target_frames: usize,
) -> Result<(Condition<F>, Coords<F>)> {
    if traj.frames() < cond_frames + target_frames {
        return Err(GeoError::dim("trajectory shorter than the requested windows"));
    }
    let c = traj.coords.slice_frames(0, cond_frames);
    let t = traj.coords.slice_frames(cond_frames, cond_frames + target_frames);
    Ok((Condition::preceding(c), t))
}
