//! Rigid-motion equivariance checks of a model and its sampling chains.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{sample_cond, sample_uncond, NoiseSchedule, RngNoise, RotatedNoise};
use crate::egtn::{Condition, EgtnModel, NodeGraph};
use crate::error::Result;
use crate::geom::{project_zero_com, relative_deviation, sample_gaussian, Coords, RigidMotion};
use crate::real::Real;
use crate::tape::Mat;

/// Which parts of the suite to run and at what size.
#[derive(Clone, Debug)]
pub struct SymmetrySetup {
    pub nodes: usize,
    pub frames: usize,
    pub cond_frames: usize,
    pub dim: usize,
    /// Random motions for the network checks.
    pub trials: usize,
    /// Random motions for the full sampling chains.
    pub chain_trials: usize,
    pub seed: u64,
}

/// Largest relative deviation `‖f(g·x) − g·f(x)‖∞ / max(1, ‖g·f(x)‖∞)` per check;
/// `None` when the model lacks the part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymmetryReport {
    pub forward: f64,
    pub features: f64,
    pub eps_uncond: f64,
    pub eps_cond: Option<f64>,
    pub prior: Option<f64>,
    pub chain_uncond: Option<f64>,
    pub chain_cond: Option<f64>,
}

impl SymmetryReport {
    pub fn max(&self) -> f64 {
        [Some(self.forward), Some(self.features), Some(self.eps_uncond), self.eps_cond, self.prior, self.chain_uncond, self.chain_cond]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for SymmetryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, k: &str, v: Option<f64>| match v {
            Some(v) => writeln!(f, "{k:<14} {v:.3e}"),
            None => writeln!(f, "{k:<14} skipped"),
        };
        row(f, "forward", Some(self.forward))?;
        row(f, "features", Some(self.features))?;
        row(f, "eps_uncond", Some(self.eps_uncond))?;
        row(f, "eps_cond", self.eps_cond)?;
        row(f, "prior", self.prior)?;
        row(f, "chain_uncond", self.chain_uncond)?;
        row(f, "chain_cond", self.chain_cond)?;
        write!(f, "{:<14} {:.3e}", "max", self.max())
    }
}

fn random_graph<F: Real, R: Rng + ?Sized>(nodes: usize, feature_dim: usize, rng: &mut R) -> NodeGraph<F> {
    let feats = (0..nodes * feature_dim).map(|_| F::lit(rng.sample(StandardNormal))).collect();
    NodeGraph::complete(Mat::from_vec(nodes, feature_dim, feats))
}

fn dev<F: Real>(a: &Coords<F>, b: &Coords<F>) -> f64 {
    relative_deviation(&a.data, &b.data)
}

/// Runs every applicable check over random inputs and motions.
pub fn equivariance_suite<F: Real>(
    model: &EgtnModel<F>,
    schedule: &NoiseSchedule,
    setup: &SymmetrySetup,
) -> Result<SymmetryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let cfg = &model.config;
    let (n, t, d) = (setup.nodes, setup.frames, setup.dim);
    let has_cond = cfg.use_cross_attention && setup.cond_frames > 0;
    let has_prior = has_cond && cfg.prior_frames == Some(t);
    let mut rep = SymmetryReport {
        eps_cond: has_cond.then_some(0.0),
        prior: has_prior.then_some(0.0),
        ..Default::default()
    };
    let steps = schedule.n_steps();
    for _ in 0..setup.trials {
        let g = RigidMotion::random(d, &mut rng)?;
        let graph = random_graph::<F, _>(n, cfg.feature_dim, &mut rng);
        let x: Coords<F> = sample_gaussian(t, n, d, &mut rng);
        let tau = rng.random_range(1..=steps);
        let gx = g.apply_coords(&x)?;
        let (y, h) = model.forward(&x, &graph, Some(tau), None)?;
        let (gy, gh) = model.forward(&gx, &graph, Some(tau), None)?;
        rep.forward = rep.forward.max(dev(&gy, &g.apply_coords(&y)?));
        rep.features = rep.features.max(relative_deviation(&gh.data, &h.data));

        let xs = project_zero_com(&x);
        let e = model.eps_uncond(&xs, &graph, tau)?;
        let ge = model.eps_uncond(&g.rotate_coords(&xs)?, &graph, tau)?;
        rep.eps_uncond = rep.eps_uncond.max(dev(&ge.values, &g.rotate_coords(&e.values)?));

        if has_cond {
            let cond = Condition::preceding(sample_gaussian(setup.cond_frames, n, d, &mut rng));
            let gcond = Condition { coords: g.apply_coords(&cond.coords)?, times: cond.times.clone() };
            let e = model.eps_cond(&x, &cond, &graph, tau)?;
            let ge = model.eps_cond(&gx, &gcond, &graph, tau)?;
            rep.eps_cond = Some(rep.eps_cond.unwrap_or(0.0).max(dev(&ge, &g.rotate_coords(&e)?)));
            if has_prior {
                let p = model.build_equivariant_prior(&cond, &graph)?;
                let gp = model.build_equivariant_prior(&gcond, &graph)?;
                rep.prior = Some(rep.prior.unwrap_or(0.0).max(dev(&gp.anchor, &g.apply_coords(&p.anchor)?)));
            }
        }
    }
    if setup.chain_trials > 0 {
        rep.chain_uncond = Some(0.0);
        rep.chain_cond = has_cond.then_some(0.0);
    }
    for _ in 0..setup.chain_trials {
        let g = RigidMotion::random(d, &mut rng)?;
        let graph = random_graph::<F, _>(n, cfg.feature_dim, &mut rng);
        let seed: u64 = rng.random();
        let base = sample_uncond(model, &graph, t, d, 1, schedule, &mut RngNoise(ChaCha8Rng::seed_from_u64(seed)))?;
        let mut coupled = RotatedNoise { inner: RngNoise(ChaCha8Rng::seed_from_u64(seed)), motion: g.clone() };
        let moved = sample_uncond(model, &graph, t, d, 1, schedule, &mut coupled)?;
        let c = dev(&moved[0], &g.rotate_coords(&base[0])?);
        rep.chain_uncond = Some(rep.chain_uncond.unwrap_or(0.0).max(c));
        if has_cond {
            let cond = Condition::preceding(sample_gaussian(setup.cond_frames, n, d, &mut rng));
            let gcond = Condition { coords: g.apply_coords(&cond.coords)?, times: cond.times.clone() };
            let base = sample_cond(model, &graph, &cond, t, 1, schedule, &mut RngNoise(ChaCha8Rng::seed_from_u64(seed)))?;
            let mut coupled = RotatedNoise { inner: RngNoise(ChaCha8Rng::seed_from_u64(seed)), motion: g.clone() };
            let moved = sample_cond(model, &graph, &gcond, t, 1, schedule, &mut coupled)?;
            let c = dev(&moved[0], &g.apply_coords(&base[0])?);
            rep.chain_cond = Some(rep.chain_cond.unwrap_or(0.0).max(c));
        }
    }
    Ok(rep)
}
