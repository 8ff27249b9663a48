//! Acceptance criteria 1 to 10, one PASS/FAIL line each.
//!
//! `GEOTDM_ACCEPTANCE=7,9` runs a subset. The process exits nonzero when any
//! selected criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use geotdm::checkpoint::{Checkpoint, ModelMeta};
use geotdm::diffusion::{
    kl_term, loss_cond_with, EpsPredictor, loss_uncond_with, posterior, q_sample_cond, refine_trajectory, reverse_mean,
    sample_cond_batch, sample_uncond, sample_uncond_with, weighted_eps_loss, Example, ModelEps, NoiseDraw,
    NoiseSchedule, RngNoise, ScheduleConfig,
};
use geotdm::egtn::{prior_from_parts, Condition, EgtnConfig, EgtnModel, NodeGraph};
use geotdm::eval::{
    ade_fde, classification_score, constant_velocity, gaussian_baseline, marginal_score, straight_line,
    MarginalFeature, SurrogateBudget,
};
use geotdm::geom::{project_zero_com, sample_gaussian, sample_subspace_gaussian, Coords, GeoTrajectory};
use geotdm::gtrj;
use geotdm::sim::{generate_split, DatasetManifest, SystemKind, SystemSpec};
use geotdm::symmetry::{equivariance_suite, SymmetrySetup};
use geotdm::tape::Mat;
use geotdm::train::{train_run, Mode, TrainConfig, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Spring forecasting setup shared by criteria 7 and 9.
const SPRING_COND: usize = 5;
const SPRING_TARGET: usize = 10;
const SPRING_STEPS: u64 = 4_900;
const INTERP_HEAD: usize = 3;
const INTERP_TAIL: usize = 2;
const INTERP_STEPS: u64 = SPRING_STEPS;

#[derive(Default)]
struct Shared {
    spring: Option<SpringRun>,
}

struct SpringRun {
    model: EgtnModel<f32>,
    test: Vec<GeoTrajectory<f32>>,
    train: Vec<GeoTrajectory<f32>>,
    schedule: NoiseSchedule,
    train_secs: f64,
}

fn desk_model(cond: bool) -> EgtnConfig {
    EgtnConfig {
        n_layers: 2,
        hidden_dim: 32,
        time_emb_dim: 16,
        use_cross_attention: cond,
        feature_dim: 1,
        prior_frames: cond.then_some(SPRING_TARGET),
        ..EgtnConfig::default()
    }
}

fn desk_train(mode: Mode, steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 32,
        max_epochs: usize::MAX,
        mode,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

fn meta_for(mode: Mode, cfg: &EgtnConfig, cond_frames: usize, tail: usize) -> ModelMeta {
    ModelMeta {
        mode,
        dim: 3,
        frames: SPRING_TARGET,
        cond_frames,
        tail_frames: tail,
        model: cfg.clone(),
        schedule: ScheduleConfig::short(),
    }
}

fn spring(shared: &mut Shared) -> &SpringRun {
    shared.spring.get_or_insert_with(|| {
        let spec = SystemSpec { n_bodies: 3, ..SystemSpec::default_for(SystemKind::Spring) };
        let man = DatasetManifest {
            train: 200,
            valid: 40,
            test: 40,
            total_frames: SPRING_COND + SPRING_TARGET,
            cond_frames: SPRING_COND,
            target_frames: SPRING_TARGET,
            seed: 1,
        };
        let train = generate_split(&spec, &man, 0, man.train).unwrap();
        let test = generate_split(&spec, &man, 2, man.test).unwrap();
        let cfg = desk_model(true);
        let mut model = EgtnModel::<f32>::new(cfg.clone(), 0).unwrap();
        let schedule = ScheduleConfig::short().build().unwrap();
        let data = TrainData::from_trajectories(&train, Mode::Cond, SPRING_COND, SPRING_TARGET).unwrap();
        let started = Instant::now();
        let meta = meta_for(Mode::Cond, &cfg, SPRING_COND, 0);
        train_run(&desk_train(Mode::Cond, SPRING_STEPS), &meta, &mut model, &schedule, &data, None, None).unwrap();
        SpringRun { model, test, train, schedule, train_secs: started.elapsed().as_secs_f64() }
    })
}

fn graph(t: &GeoTrajectory<f32>) -> NodeGraph<f32> {
    NodeGraph::new(t.node_features.clone(), t.edges.clone()).unwrap()
}

/// Mean over test windows of the mean ADE of `k` samples.
fn mean_of_k_ade(model: &EgtnModel<f32>, data: &TrainData<f32>, k: usize, schedule: &NoiseSchedule, seed: u64) -> f64 {
    let mut graphs = Vec::new();
    let mut conds = Vec::new();
    for i in 0..data.len() {
        for _ in 0..k {
            graphs.push(&data.graphs[i]);
            conds.push(data.conds[i].as_ref().unwrap());
        }
    }
    let frames = data.targets[0].frames;
    let samples = sample_cond_batch(model, &graphs, &conds, frames, schedule, &mut RngNoise(ChaCha8Rng::seed_from_u64(seed))).unwrap();
    let total: f64 = samples.iter().enumerate().map(|(j, s)| ade_fde(s, &data.targets[j / k]).unwrap().0).sum();
    total / samples.len() as f64
}

fn randomized(cfg: EgtnConfig, scale: f64, seed: u64) -> EgtnModel<f32> {
    let mut m = EgtnModel::<f32>::new(cfg, seed).unwrap();
    m.randomize(scale, seed);
    m
}

fn criterion_1(_: &mut Shared) -> Outcome {
    // desk architecture at half width; equivariance does not depend on width
    let cfg = EgtnConfig { hidden_dim: 16, prior_frames: Some(10), ..desk_model(true) };
    let model = randomized(cfg, 0.05, 0);
    let schedule = ScheduleConfig::short().build().unwrap();
    let setup = SymmetrySetup { nodes: 5, frames: 10, cond_frames: 5, dim: 3, trials: 100, chain_trials: 100, seed: 0 };
    let started = Instant::now();
    let r = equivariance_suite(&model, &schedule, &setup).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let parts = [
        ("forward", Some(r.forward.max(r.features))),
        ("eps_uncond", Some(r.eps_uncond)),
        ("eps_cond", r.eps_cond),
        ("prior", r.prior),
        ("chains", r.chain_uncond.zip(r.chain_cond).map(|(a, b)| a.max(b))),
    ];
    let all_present = parts.iter().all(|(_, v)| v.is_some());
    let worst = r.max();
    let list: Vec<String> = parts.iter().map(|(n, v)| format!("{n} {:.1e}", v.unwrap_or(f64::NAN))).collect();
    outcome(
        all_present && worst <= 1e-4 && secs < 120.0,
        format!("f32, 2 layers / hidden 16, 100 motions, {}; max {worst:.2e} (limit 1e-4), {secs:.0} s (limit 120 s)", list.join(", ")),
    )
}

struct ExactGaussianEps<'a>(&'a NoiseSchedule);

impl EpsPredictor<f32> for ExactGaussianEps<'_> {
    fn predict(&mut self, x: &Mat<f32>, tau: usize) -> geotdm::error::Result<Mat<f32>> {
        let k = (1.0 - self.0.alpha_bar(tau)).sqrt() as f32;
        Ok(Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| k * v).collect()))
    }
}

fn criterion_2(_: &mut Shared) -> Outcome {
    let (t, n, d) = (10, 5, 3);
    let model = randomized(EgtnConfig { prior_frames: None, ..desk_model(false) }, 0.05, 2);
    let schedule = ScheduleConfig::short().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graphs: Vec<NodeGraph<f32>> = (0..16)
        .map(|_| NodeGraph::complete(Mat::from_vec(n, 1, sample_gaussian::<f32, _>(1, n, 1, &mut rng).data)))
        .collect();
    let refs: Vec<&NodeGraph<f32>> = graphs.iter().collect();
    let mut pred = ModelEps::uncond(&model, &refs, t).unwrap();
    let com = |x: &Mat<f32>| -> f64 {
        x.data
            .chunks(t * n * d)
            .map(|g| {
                (0..d)
                    .map(|k| (g.iter().skip(k).step_by(d).map(|v| *v as f64).sum::<f64>() / (t * n) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    let mut worst_iter = 0.0f64;
    let mut iterates = 0usize;
    let mut largest = 0f32;
    let out = sample_uncond_with(&mut pred, graphs.len(), t, n, d, &schedule, &mut RngNoise(rng.clone()), &mut |_, x| {
        worst_iter = worst_iter.max(com(x));
        largest = largest.max(x.data.iter().fold(0f32, |m, v| m.max(v.abs())));
        iterates += 1;
    })
    .unwrap();
    let mut worst_sample = com(&out);

    // exact noise prediction for unit Gaussian data keeps the chain at unit scale
    let mut exact = ExactGaussianEps(&schedule);
    let mut unit_largest = 0f32;
    let out = sample_uncond_with(&mut exact, graphs.len(), t, n, d, &schedule, &mut RngNoise(rng.clone()), &mut |_, x| {
        worst_iter = worst_iter.max(com(x));
        unit_largest = unit_largest.max(x.data.iter().fold(0f32, |m, v| m.max(v.abs())));
        iterates += 1;
    })
    .unwrap();
    worst_sample = worst_sample.max(com(&out));

    let draws = 100_000;
    let mut sq = vec![0.0f64; t * n * d];
    for _ in 0..draws {
        let e = sample_subspace_gaussian::<f64, _>(t, n, d, &mut rng);
        for (a, v) in sq.iter_mut().zip(&e.values.data) {
            *a += v * v;
        }
    }
    let want = 1.0 - 1.0 / (t * n) as f64;
    let worst_var = sq.iter().map(|s| (s / draws as f64 / want - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        worst_iter <= 1e-5 && worst_sample <= 1e-5 && worst_var < 0.05,
        format!(
            "f32 chains (untrained model, |x| up to {largest:.0}; exact predictor, |x| up to {unit_largest:.1}): CoM over {iterates} iterates {worst_iter:.1e}, samples {worst_sample:.1e} (limit 1e-5); \
             per-element variance vs {want:.3} off by at most {:.2}% over 1e5 draws (limit 5%)",
            100.0 * worst_var
        ),
    )
}

fn criterion_3(_: &mut Shared) -> Outcome {
    let (t, tc, n, d) = (4, 3, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xc: Coords<f64> = sample_gaussian(tc, n, d, &mut rng);
    let mut worst = 0.0f64;

    // centre-of-mass intermediates with uniform head outputs
    let mut com = Coords::zeros(tc, n, d);
    let mut mean_com = vec![0.0; d];
    for s in 0..tc {
        let c: Vec<f64> = (0..d).map(|k| (0..n).map(|i| xc.point(s, i)[k]).sum::<f64>() / n as f64).collect();
        for i in 0..n {
            com.point_mut(s, i).copy_from_slice(&c);
        }
        mean_com.iter_mut().zip(&c).for_each(|(m, v)| *m += v / tc as f64);
    }
    let p = prior_from_parts(&com, &Mat::from_vec(tc, n, vec![1.0 / tc as f64; tc * n]), &vec![1.0; t]).unwrap();
    for tt in 0..t {
        for i in 0..n {
            for (a, m) in p.anchor.point(tt, i).iter().zip(&mean_com) {
                worst = worst.max((a - m).abs());
            }
        }
    }
    // one-hot head outputs select a single frame point-wise
    for pick in 0..tc {
        let mut head = Mat::from_vec(tc, n, vec![0.0; tc * n]);
        for i in 0..n {
            head.data[pick * n + i] = 1.0;
        }
        let p = prior_from_parts(&xc, &head, &vec![1.0; t]).unwrap();
        for tt in 0..t {
            for (a, b) in p.anchor.frame(tt).iter().zip(xc.frame(pick)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    // random parameters: per-node weights over condition frames sum to one
    let mut sum_err = 0.0f64;
    for seed in 0..20 {
        let cfg = EgtnConfig {
            n_layers: 1,
            hidden_dim: 8,
            time_emb_dim: 4,
            use_cross_attention: true,
            prior_frames: Some(t),
            ..EgtnConfig::default()
        };
        let mut m = EgtnModel::<f64>::new(cfg, seed).unwrap();
        m.randomize(0.5, seed);
        let g = NodeGraph::complete(Mat::from_vec(n, 1, vec![1.0, -1.0, 1.0, 1.0]));
        let cond = Condition::preceding(sample_gaussian(tc, n, d, &mut rng));
        let eq = m.build_equivariant_prior(&cond, &g).unwrap();
        for tt in 0..t {
            for i in 0..n {
                let s: f64 = (0..tc).map(|s| eq.weight(tt, s, i)).sum();
                sum_err = sum_err.max((s - 1.0).abs());
            }
        }
        assert!(eq.weights.iter().any(|w| *w != 0.0 && *w != 1.0), "random parameters give nontrivial weights");
    }
    outcome(
        worst <= 1e-6 && sum_err <= 1e-6,
        format!("CoM and point-wise reductions max error {worst:.1e} (limit 1e-6); weight sums off by {sum_err:.1e} over 20 random models"),
    )
}

/// Loss and per-parameter gradients at the model's current parameters.
type LossFn<'a> = dyn Fn(&EgtnModel<f64>) -> (f64, Vec<Vec<f64>>) + 'a;

/// Worst relative gap between analytic and central-difference gradients, per group.
#[allow(clippy::needless_range_loop)]
fn gradient_gaps(m: &mut EgtnModel<f64>, loss: &LossFn<'_>) -> Vec<(&'static str, f64, usize)> {
    let (_, analytic) = loss(m);
    let mut groups: Vec<(&'static str, f64, usize)> = vec![("theta", 0.0, 0), ("eta", 0.0, 0), ("gamma", 0.0, 0)];
    let h = 1e-6;
    for pi in 0..m.params.params.len() {
        let name = m.params.params[pi].name.clone();
        let g = if name == "prior.gamma" {
            2
        } else if name.starts_with("prior.") {
            1
        } else {
            0
        };
        for k in 0..m.params.params[pi].value.data.len() {
            let orig = m.params.params[pi].value.data[k];
            m.params.params[pi].value.data[k] = orig + h;
            let up = loss(m).0;
            m.params.params[pi].value.data[k] = orig - h;
            let down = loss(m).0;
            m.params.params[pi].value.data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi][k];
            let scale = fd.abs().max(a.abs()).max(1e-6);
            groups[g].1 = groups[g].1.max((a - fd).abs() / scale);
            groups[g].2 += 1;
        }
    }
    groups
}

fn criterion_4(_: &mut Shared) -> Outcome {
    let (t, tc, n) = (3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graph = NodeGraph::complete(Mat::from_vec(n, 1, vec![1.0, -1.0]));
    let schedule = geotdm::diffusion::make_linear_schedule(20, 1e-3, 0.2).unwrap();
    let base = EgtnConfig { n_layers: 1, hidden_dim: 8, time_emb_dim: 4, prior_layers: 1, ..EgtnConfig::default() };

    let mut uncond = EgtnModel::<f64>::new(base.clone(), 6).unwrap();
    uncond.randomize(0.3, 7);
    let target = project_zero_com(&sample_gaussian::<f64, _>(t, n, 3, &mut rng));
    let eps_u = project_zero_com(&sample_gaussian::<f64, _>(t, n, 3, &mut rng));
    let draw_u = NoiseDraw { taus: vec![8], eps: eps_u.to_mat() };
    let ex_u = [Example { graph: &graph, target: &target, cond: None }];
    let gaps_u = gradient_gaps(&mut uncond, &|m| {
        let o = loss_uncond_with(m, &ex_u, &draw_u, &schedule).unwrap();
        (o.loss, o.grads)
    });

    let cfg = EgtnConfig { use_cross_attention: true, prior_frames: Some(t), ..base };
    let mut cond_model = EgtnModel::<f64>::new(cfg, 8).unwrap();
    cond_model.randomize(0.3, 9);
    let target_c: Coords<f64> = sample_gaussian(t, n, 3, &mut rng);
    let cond = Condition::preceding(sample_gaussian(tc, n, 3, &mut rng));
    let draw_c = NoiseDraw { taus: vec![11], eps: sample_gaussian::<f64, _>(t, n, 3, &mut rng).to_mat() };
    let ex_c = [Example { graph: &graph, target: &target_c, cond: Some(&cond) }];
    let gaps_c = gradient_gaps(&mut cond_model, &|m| {
        let o = loss_cond_with(m, &ex_c, &draw_c, &schedule).unwrap();
        (o.loss, o.grads)
    });

    let theta_u = gaps_u[0];
    let pass = theta_u.2 > 0
        && theta_u.1 <= 1e-3
        && gaps_c.iter().all(|g| g.2 > 0 && g.1 <= 1e-3);
    let cond_text: Vec<String> = gaps_c.iter().map(|(g, e, c)| format!("{g} {e:.1e} ({c})")).collect();
    outcome(
        pass,
        format!(
            "f64 central differences, worst relative gap (scalars): uncond theta {:.1e} ({}); cond {} (limit 1e-3)",
            theta_u.1,
            theta_u.2,
            cond_text.join(", ")
        ),
    )
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let s = ScheduleConfig::short().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0: Coords<f64> = sample_gaussian(3, 2, 3, &mut rng);
    let anchor: Coords<f64> = sample_gaussian(3, 2, 3, &mut rng);
    let eps: Coords<f64> = sample_gaussian(3, 2, 3, &mut rng);
    let pred: Coords<f64> = sample_gaussian(3, 2, 3, &mut rng);
    let mut worst = 0.0f64;
    let mut impl_gap = 0.0f64;
    for tau in [2, 5, 10, 20, 35, 50, 65, 80, 90, 100] {
        let xt = q_sample_cond(&x0, &anchor, tau, &eps, &s).unwrap();
        let (mu, var) = posterior(&x0, &xt, Some(&anchor), tau, &s).unwrap();
        let sig2 = s.sigma2(tau);
        // closed-form Gaussian KL, summed over elements
        let kl = |eps_hat: &Coords<f64>| -> f64 {
            let m = reverse_mean(&xt, Some(&anchor), eps_hat, tau, &s).unwrap();
            mu.data
                .iter()
                .zip(&m.data)
                .map(|(a, b)| 0.5 * (sig2 / var).ln() + (var + (a - b).powi(2)) / (2.0 * sig2) - 0.5)
                .sum()
        };
        let lhs = kl(&pred) - kl(&eps);
        let rhs = weighted_eps_loss(&eps, &pred, tau, &s).unwrap();
        worst = worst.max((lhs - rhs).abs());
        impl_gap = impl_gap.max((kl_term(&x0, &xt, Some(&anchor), &pred, tau, &s).unwrap() - kl(&pred)).abs());
    }
    outcome(
        worst <= 1e-4 && impl_gap <= 1e-4,
        format!("10 steps, |KL(pred) - KL(true) - weighted loss| max {worst:.1e}, library KL vs closed form {impl_gap:.1e} (limit 1e-4)"),
    )
}

fn criterion_6(_: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [SystemKind::Charged, SystemKind::Spring, SystemKind::Gravity] {
        let (mut p, mut d, mut g) = (0.0f64, 0.0f64, 0.0f64);
        for seed in 0..10 {
            let r = common::physics_report(kind, seed);
            p = p.max(r.momentum);
            d = d.max(r.drift);
            g = g.max(r.oracle_gap);
        }
        pass &= p <= 1e-5 && d < 0.01 && g < 0.01;
        lines.push(format!("{kind:?} momentum {p:.1e} drift {:.3}% oracle gap {:.3}%", 100.0 * d, 100.0 * g));
    }
    let orbit = common::orbit_radius_error();
    pass &= orbit < 0.01;
    outcome(pass, format!("{}; orbit radius {:.4}% (limits 1e-5, 1%, 1%, 1%)", lines.join("; "), 100.0 * orbit))
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let started = Instant::now();
    let run = spring(shared);
    let data = TrainData::from_trajectories(&run.test, Mode::Cond, SPRING_COND, SPRING_TARGET).unwrap();
    let trained = mean_of_k_ade(&run.model, &data, 5, &run.schedule, 5);
    let fresh = EgtnModel::<f32>::new(run.model.config.clone(), 0).unwrap();
    let untrained = mean_of_k_ade(&fresh, &data, 5, &run.schedule, 5);
    let cv: f64 = (0..data.len())
        .map(|i| {
            let c = &data.conds[i].as_ref().unwrap().coords;
            ade_fde(&constant_velocity(c, SPRING_TARGET).unwrap(), &data.targets[i]).unwrap().0
        })
        .sum::<f64>()
        / data.len() as f64;
    let ratio = untrained / trained;
    let total = started.elapsed().as_secs_f64();
    outcome(
        ratio >= 5.0 && trained < cv && total < 1200.0,
        format!(
            "mean-of-5 ADE trained {trained:.4}, untrained {untrained:.4} ({ratio:.1}x, need 5x), constant velocity {cv:.4}; \
             {SPRING_STEPS} training steps in {:.0} s, whole check {total:.0} s (limit 1200 s)",
            run.train_secs
        ),
    )
}

fn criterion_8(_: &mut Shared) -> Outcome {
    let (burn, t, n) = (5, 10, 3);
    let spec = SystemSpec { n_bodies: n, ..SystemSpec::default_for(SystemKind::Charged) };
    let man = DatasetManifest { train: 200, valid: 500, test: 500, total_frames: burn + t, cond_frames: burn, target_frames: t, seed: 1 };
    let window = |v: Vec<GeoTrajectory<f32>>| -> Vec<GeoTrajectory<f32>> {
        v.iter()
            .map(|g| {
                let c = project_zero_com(&g.coords.slice_frames(burn, burn + t));
                GeoTrajectory::new(c, g.node_features.clone(), g.edges.clone()).unwrap()
            })
            .collect()
    };
    let train = generate_split(&spec, &man, 0, man.train).unwrap();
    let reference = window(generate_split(&spec, &man, 2, man.test).unwrap());
    let held_out = window(generate_split(&spec, &man, 1, man.valid).unwrap());

    let cfg = desk_model(false);
    let mut model = EgtnModel::<f32>::new(cfg.clone(), 0).unwrap();
    let schedule = ScheduleConfig::short().build().unwrap();
    let data = TrainData::from_trajectories(&train, Mode::Uncond, burn, t).unwrap();
    let started = Instant::now();
    let meta = ModelMeta { frames: t, ..meta_for(Mode::Uncond, &cfg, 0, 0) };
    train_run(&desk_train(Mode::Uncond, SPRING_STEPS), &meta, &mut model, &schedule, &data, None, None).unwrap();
    let train_secs = started.elapsed().as_secs_f64();

    let mut noise = RngNoise(ChaCha8Rng::seed_from_u64(5));
    let mut generated = Vec::new();
    for r in &reference {
        let mut s = sample_uncond(&model, &graph(r), t, 3, 1, &schedule, &mut noise).unwrap();
        generated.push(GeoTrajectory::new(s.remove(0), r.node_features.clone(), r.edges.clone()).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gaussian: Vec<GeoTrajectory<f32>> = reference
        .iter()
        .map(|r| GeoTrajectory::new(sample_subspace_gaussian(t, n, 3, &mut rng).values, r.node_features.clone(), r.edges.clone()).unwrap())
        .collect();
    let fitted = gaussian_baseline(&reference, reference.len(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let bins = 50;
    let m_model = marginal_score(&generated, &reference, bins, MarginalFeature::Coords).unwrap();
    let m_gauss = marginal_score(&gaussian, &reference, bins, MarginalFeature::Coords).unwrap();
    let m_fitted = marginal_score(&fitted, &reference, bins, MarginalFeature::Coords).unwrap();
    let m_floor = marginal_score(&held_out, &reference, bins, MarginalFeature::Coords).unwrap();
    let budget = SurrogateBudget::default();
    let c_model = classification_score(&generated, &reference, &budget).unwrap();
    let c_gauss = classification_score(&gaussian, &reference, &budget).unwrap();
    let marginal_ok = m_model < 0.5 * m_gauss;
    let class_ok = c_model > c_gauss;
    outcome(
        marginal_ok && class_ok,
        format!(
            "marginal model {m_model:.4} vs 0.5 x Gaussian {:.4} [{}]; classification model {c_model:.4} vs Gaussian {c_gauss:.4} [{}]; \
             info: fitted Gaussian {m_fitted:.4}, held-out simulator floor {m_floor:.4}; {SPRING_STEPS} steps in {train_secs:.0} s",
            0.5 * m_gauss,
            if marginal_ok { "met" } else { "not met" },
            if class_ok { "met" } else { "not met" },
        ),
    )
}

fn criterion_9(shared: &mut Shared) -> Outcome {
    let run = spring(shared);
    let data = TrainData::from_trajectories(&run.test, Mode::Cond, SPRING_COND, SPRING_TARGET).unwrap();
    let mut identity = true;
    let ks = [0usize, 10, 25, 50];
    let mut dist = [0.0f64; 4];
    for seed in 0..5u64 {
        let mut noise = RngNoise(ChaCha8Rng::seed_from_u64(100 + seed));
        for i in 0..data.len() {
            let cond = data.conds[i].as_ref().unwrap();
            let init = constant_velocity(&cond.coords, SPRING_TARGET).unwrap();
            for (slot, &k) in ks.iter().enumerate() {
                let out = refine_trajectory(&run.model, &data.graphs[i], &init, cond, k, &run.schedule, &mut noise).unwrap();
                if k == 0 {
                    identity &= out == init;
                }
                dist[slot] += ade_fde(&out, &data.targets[i]).unwrap().0 / (5 * data.len()) as f64;
            }
        }
    }
    let monotone = dist.windows(2).all(|w| w[1] <= w[0]);

    let cfg = desk_model(true);
    let mut interp = EgtnModel::<f32>::new(cfg.clone(), 0).unwrap();
    let train = TrainData::bracketing(&run.train, INTERP_HEAD, SPRING_TARGET, INTERP_TAIL).unwrap();
    let meta = meta_for(Mode::Cond, &cfg, INTERP_HEAD + INTERP_TAIL, INTERP_TAIL);
    let started = Instant::now();
    train_run(&desk_train(Mode::Cond, INTERP_STEPS), &meta, &mut interp, &run.schedule, &train, None, None).unwrap();
    let interp_secs = started.elapsed().as_secs_f64();
    let test = TrainData::bracketing(&run.test, INTERP_HEAD, SPRING_TARGET, INTERP_TAIL).unwrap();
    let model_ade = mean_of_k_ade(&interp, &test, 5, &run.schedule, 6);
    let line_ade: f64 = run
        .test
        .iter()
        .map(|tr| {
            let c = &tr.coords;
            let head = c.slice_frames(0, INTERP_HEAD);
            let tail = c.slice_frames(INTERP_HEAD + SPRING_TARGET, INTERP_HEAD + SPRING_TARGET + INTERP_TAIL);
            let line = straight_line(&head, &tail, SPRING_TARGET).unwrap();
            ade_fde(&line, &c.slice_frames(INTERP_HEAD, INTERP_HEAD + SPRING_TARGET)).unwrap().0
        })
        .sum::<f64>()
        / run.test.len() as f64;
    let sweep: Vec<String> = ks.iter().zip(&dist).map(|(k, d)| format!("K={k} {d:.4}")).collect();
    outcome(
        identity && monotone && model_ade < line_ade,
        format!(
            "K=0 identity {}; refine sweep from constant velocity ({}) {}; interpolation mean-of-5 ADE {model_ade:.4} vs straight line {line_ade:.4} ({INTERP_STEPS} steps, {interp_secs:.0} s)",
            if identity { "holds" } else { "broken" },
            sweep.join(", "),
            if monotone { "nonincreasing" } else { "NOT nonincreasing" },
        ),
    )
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_geotdm")).args(args).output().is_ok_and(|o| o.status.success())
}

fn criterion_10(_: &mut Shared) -> Outcome {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let smoke_text = std::fs::read_to_string(&smoke).unwrap();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut failed_cmds = Vec::new();
    for root in &runs {
        let r = root.path();
        let p = |s: &str| r.join(s).to_str().unwrap().to_owned();
        let interp_cfg = r.join("interp.toml");
        std::fs::write(&interp_cfg, format!("{smoke_text}\n[window]\nlayout = \"interpolate\"\ntail_frames = 1\n")).unwrap();
        let s = smoke.to_str().unwrap();
        let ic = interp_cfg.to_str().unwrap();
        let cmds: Vec<Vec<String>> = vec![
            vec!["simulate".into(), "--config".into(), s.into(), "--out".into(), p("data"), "--export".into(), "csv".into()],
            vec!["train".into(), "--config".into(), s.into(), "--data".into(), p("data"), "--mode".into(), "cond".into(), "--out".into(), p("cond")],
            vec!["train".into(), "--config".into(), s.into(), "--data".into(), p("data"), "--mode".into(), "uncond".into(), "--out".into(), p("uncond")],
            vec!["train".into(), "--config".into(), ic.into(), "--data".into(), p("data"), "--mode".into(), "cond".into(), "--out".into(), p("interp")],
            vec!["sample".into(), "--ckpt".into(), p("uncond/model.ckpt"), "--data".into(), p("data"), "--n".into(), "4".into(), "--out".into(), p("sample")],
            vec!["forecast".into(), "--ckpt".into(), p("cond/model.ckpt"), "--data".into(), p("data"), "--k".into(), "2".into(), "--out".into(), p("forecast"), "--export".into(), "csv".into()],
            vec!["interpolate".into(), "--ckpt".into(), p("interp/model.ckpt"), "--data".into(), p("data"), "--out".into(), p("interpolate")],
            vec!["refine".into(), "--ckpt".into(), p("cond/model.ckpt"), "--data".into(), p("data"), "--input".into(), p("forecast/reference.gtrj"), "--k-steps".into(), "4".into(), "--out".into(), p("refine")],
            vec!["compose".into(), "--ckpt".into(), p("cond/model.ckpt"), "--uncond-ckpt".into(), p("uncond/model.ckpt"), "--data".into(), p("data"), "--segments".into(), "2".into(), "--out".into(), p("compose")],
            vec!["evaluate".into(), "--generated".into(), p("sample/samples.gtrj"), "--reference".into(), p("sample/reference.gtrj"), "--task".into(), "generation".into(), "--config".into(), s.into(), "--out".into(), p("eval_gen")],
            vec!["evaluate".into(), "--generated".into(), p("forecast/forecasts.gtrj"), "--reference".into(), p("forecast/reference.gtrj"), "--task".into(), "forecast".into(), "--config".into(), s.into(), "--out".into(), p("eval_fc")],
            vec!["check-equivariance".into(), "--ckpt".into(), p("cond/model.ckpt"), "--trials".into(), "5".into(), "--chain-trials".into(), "1".into(), "--out".into(), p("equiv")],
        ];
        for c in &cmds {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            if !cli(&args) {
                failed_cmds.push(c[0].clone());
            }
        }
    }
    let files = [
        "data/train.gtrj", "data/valid.gtrj", "data/test.gtrj", "data/manifest.toml", "data/train.csv",
        "cond/model.ckpt", "uncond/model.ckpt", "interp/model.ckpt", "cond/config.toml",
        "sample/samples.gtrj", "forecast/forecasts.gtrj", "forecast/forecasts.csv", "interpolate/interpolations.gtrj",
        "refine/refined.gtrj", "compose/composed.gtrj", "eval_gen/metrics.txt", "eval_fc/metrics.txt",
    ];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| std::fs::read(runs[0].path().join(f)).ok() != std::fs::read(runs[1].path().join(f)).ok() || !runs[0].path().join(f).exists())
        .copied()
        .collect();

    // checkpoint and GTRJ round trips through memory and disk
    let dir = runs[0].path();
    let ck_bytes = std::fs::read(dir.join("cond/model.ckpt")).unwrap();
    let ck = Checkpoint::from_bytes(&ck_bytes).unwrap();
    ck.save(&dir.join("again.ckpt")).unwrap();
    let ck_same = ck.to_bytes().unwrap() == ck_bytes && std::fs::read(dir.join("again.ckpt")).unwrap() == ck_bytes;
    let gt_bytes = std::fs::read(dir.join("data/train.gtrj")).unwrap();
    let trajs = gtrj::decode_all(&gt_bytes).unwrap();
    gtrj::write_file(&dir.join("again.gtrj"), &trajs).unwrap();
    let gt_same = gtrj::encode_all(&trajs).unwrap() == gt_bytes && std::fs::read(dir.join("again.gtrj")).unwrap() == gt_bytes;
    outcome(
        failed_cmds.is_empty() && differing.is_empty() && ck_same && gt_same,
        format!(
            "12 subcommand runs twice: failures {:?}, differing outputs {:?} of {}; checkpoint round trip {}, GTRJ round trip {}",
            failed_cmds,
            differing,
            files.len(),
            if ck_same { "bit-identical" } else { "DIFFERS" },
            if gt_same { "bit-identical" } else { "DIFFERS" },
        ),
    )
}

fn main() {
    type Check = fn(&mut Shared) -> Outcome;
    let criteria: [(usize, &str, Check); 10] = [
        (1, "equivariance", criterion_1),
        (2, "zero-CoM subspace", criterion_2),
        (3, "prior reduction", criterion_3),
        (4, "gradients", criterion_4),
        (5, "objective equivalence", criterion_5),
        (6, "physics", criterion_6),
        (7, "conditional spring learning", criterion_7),
        (8, "unconditional charged generation", criterion_8),
        (9, "use cases", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("GEOTDM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)));
        let secs = started.elapsed().as_secs_f64();
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failures += 1;
        }
        println!("{} criterion {id:>2} {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
