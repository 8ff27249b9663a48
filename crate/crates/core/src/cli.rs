//! Command-line front end: run configs, subcommands and artifact files.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelMeta};
use crate::diffusion::{
    compose_long, interpolate, refine_trajectory, sample_cond_batch, sample_uncond, RngNoise, ScheduleConfig,
};
use crate::egtn::{EgtnConfig, EgtnModel, NodeGraph, PriorMode};
use crate::error::{GeoError, Result};
use crate::eval::{
    ade_fde, marginal_score, min_over_k, surrogate_scores, MarginalFeature, MetricReport, Reduce, SurrogateBudget,
};
use crate::geom::{project_zero_com, Coords, GeoTrajectory};
use crate::gtrj;
use crate::sim::{build_dataset, load_dataset, split_window, Dataset, DatasetManifest, SystemSpec};
use crate::symmetry::{equivariance_suite, SymmetrySetup};
use crate::train::{train_run, Mode, RunPaths, TrainConfig, TrainData};

/// How conditional windows are cut from dataset trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Condition frames precede the target window.
    #[default]
    Forecast,
    /// `tail_frames` of the condition follow the target window.
    Interpolate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub layout: Layout,
    pub tail_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub k: usize,
    pub reduce: Reduce,
    pub bins: usize,
    pub feature: MarginalFeature,
    /// Skip the learned surrogate scores.
    pub surrogate: bool,
    pub budget: SurrogateBudget,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k: 5,
            reduce: Reduce::Min,
            bins: 50,
            feature: MarginalFeature::Coords,
            surrogate: true,
            budget: SurrogateBudget::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// One TOML file with a section per component; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub dataset: DatasetManifest,
    #[serde(default)]
    pub model: EgtnConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GeoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GeoError::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Export {
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Best-of-K displacement errors of grouped samples.
    Forecast,
    /// Marginal and surrogate scores of an unconditional sample set.
    Generation,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump written trajectories as plain tables.
    #[arg(long, value_enum)]
    export: Option<Export>,
}

#[derive(Parser, Debug)]
#[command(name = "geotdm", version, about = "Diffusion models for geometric trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset into train/valid/test GTRJ files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Dataset directory; defaults to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw unconditional samples on the graphs of a dataset split.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Forecast the target window of every trajectory of a split.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per trajectory.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Fill the frames between a head and a tail with an interpolation model.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Partially noise and denoise given target windows.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target windows to refine, paired in order with the split's trajectories.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k_steps: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Chain conditional segments into long trajectories.
    Compose {
        /// Conditional model.
        #[arg(long)]
        ckpt: PathBuf,
        /// Unconditional model for the first segment; otherwise the first
        /// segment is the split's target window.
        #[arg(long)]
        uncond_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        segments: usize,
        #[arg(long, default_value_t = 1)]
        limit: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score generated trajectories against reference trajectories.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Metric settings from the `[metric]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the largest deviations from rigid-motion equivariance.
    CheckEquivariance {
        /// Checkpoint to check; a fresh default model otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        nodes: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        chain_trials: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.paths.out.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_trajs(dir: &Path, name: &str, trajs: &[GeoTrajectory<f32>], export: Option<Export>) -> Result<()> {
    gtrj::write_file(&dir.join(format!("{name}.gtrj")), trajs)?;
    if export == Some(Export::Csv) {
        write_csv(&dir.join(format!("{name}.csv")), trajs)?;
    }
    Ok(())
}

/// One row per trajectory, frame and node: `traj,frame,node,x0,...`.
pub fn write_csv(path: &Path, trajs: &[GeoTrajectory<f32>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = trajs.first().map_or(3, GeoTrajectory::dim);
    let cols: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    writeln!(f, "traj,frame,node,{}", cols.join(","))?;
    for (j, t) in trajs.iter().enumerate() {
        for fr in 0..t.frames() {
            for i in 0..t.nodes() {
                let p: Vec<String> = t.coords.point(fr, i).iter().map(|v| v.to_string()).collect();
                writeln!(f, "{j},{fr},{i},{}", p.join(","))?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn with_coords(src: &GeoTrajectory<f32>, coords: Coords<f32>) -> Result<GeoTrajectory<f32>> {
    let mut t = GeoTrajectory::new(coords, src.node_features.clone(), src.edges.clone())?;
    t.dt = src.dt;
    Ok(t)
}

fn graph_of(t: &GeoTrajectory<f32>) -> Result<NodeGraph<f32>> {
    NodeGraph::new(t.node_features.clone(), t.edges.clone())
}

fn load_model(path: &Path) -> Result<(Checkpoint, EgtnModel<f32>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn take<'a>(ds: &'a Dataset, split: &str, limit: Option<usize>) -> Result<&'a [GeoTrajectory<f32>]> {
    let all = ds.split(split)?;
    Ok(&all[..limit.map_or(all.len(), |l| l.min(all.len()))])
}

fn noise(seed: u64) -> RngNoise<ChaCha8Rng> {
    RngNoise(ChaCha8Rng::seed_from_u64(seed))
}

/// Model config completed from the data: feature width, condition use and prior frames.
pub fn model_config_for(cfg: &RunConfig, mode: Mode, feature_dim: usize) -> EgtnConfig {
    let mut m = cfg.model.clone();
    m.feature_dim = feature_dim;
    if mode == Mode::Cond {
        m.use_cross_attention = true;
        if m.prior_mode == PriorMode::Learned && m.prior_frames.is_none() {
            m.prior_frames = Some(cfg.dataset.target_frames);
        }
    }
    m
}

/// Training windows for the configured mode and layout.
pub fn train_windows(cfg: &RunConfig, mode: Mode, trajs: &[GeoTrajectory<f32>]) -> Result<TrainData<f32>> {
    let (tc, t) = (cfg.dataset.cond_frames, cfg.dataset.target_frames);
    match (mode, cfg.window.layout) {
        (Mode::Cond, Layout::Interpolate) => {
            let tail = cfg.window.tail_frames;
            if tail == 0 || tail >= tc {
                return Err(GeoError::Config("interpolation needs 0 < tail_frames < cond_frames".into()));
            }
            TrainData::bracketing(trajs, tc - tail, t, tail)
        }
        _ => TrainData::from_trajectories(trajs, mode, tc, t),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, common } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.dataset.seed = cfg.seed;
            let spec = cfg.system.clone().ok_or_else(|| GeoError::Config("missing [system] section".into()))?;
            let dir = out_dir(&common, Some(&cfg))?;
            build_dataset(&spec, &cfg.dataset, &dir)?;
            if common.export == Some(Export::Csv) {
                let ds = load_dataset(&dir)?;
                for name in crate::sim::SPLITS {
                    write_csv(&dir.join(format!("{name}.csv")), ds.split(name)?)?;
                }
            }
            println!("wrote dataset to {}", dir.display());
            Ok(())
        }
        Command::Train { config, mode, data, common } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let mode = mode.unwrap_or(cfg.train.mode);
            let data_dir = data
                .or_else(|| cfg.paths.data.clone())
                .ok_or_else(|| GeoError::Config("no dataset: pass --data or set paths.data".into()))?;
            let ds = load_dataset(&data_dir)?;
            cfg.dataset = ds.index.manifest.clone();
            let first = ds.train.first().ok_or_else(|| GeoError::invalid("empty training split"))?;
            let model_cfg = model_config_for(&cfg, mode, first.node_features.cols);
            let tail = if mode == Mode::Cond && cfg.window.layout == Layout::Interpolate { cfg.window.tail_frames } else { 0 };
            let meta = ModelMeta {
                mode,
                dim: first.dim(),
                frames: cfg.dataset.target_frames,
                cond_frames: if mode == Mode::Cond { cfg.dataset.cond_frames } else { 0 },
                tail_frames: tail,
                model: model_cfg.clone(),
                schedule: cfg.schedule.clone(),
            };
            let train = train_windows(&cfg, mode, &ds.train)?;
            let valid = train_windows(&cfg, mode, &ds.valid)?;
            let dir = out_dir(&common, Some(&cfg))?;
            let mut tc = cfg.train.clone();
            tc.mode = mode;
            tc.seed = cfg.seed;
            let mut model = EgtnModel::new(model_cfg, cfg.seed)?;
            let schedule = cfg.schedule.build()?;
            let report = train_run(&tc, &meta, &mut model, &schedule, &train, Some(&valid), Some(&RunPaths::in_dir(&dir)))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            println!(
                "trained {} steps over {} epochs; best validation loss {}",
                report.steps,
                report.epochs,
                report.best_valid.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
            Ok(())
        }
        Command::Sample { ckpt, data, n, split, common } => {
            let (ck, model) = load_model(&ckpt)?;
            let ds = load_dataset(&data)?;
            let refs = ds.split(&split)?;
            if refs.is_empty() {
                return Err(GeoError::invalid("empty split"));
            }
            let schedule = ck.meta.schedule.build()?;
            let mut rng = noise(common.seed.unwrap_or(0));
            let (mut out, mut reference) = (Vec::new(), Vec::new());
            for j in 0..n {
                let src = &refs[j % refs.len()];
                let s = sample_uncond(&model, &graph_of(src)?, ck.meta.frames, ck.meta.dim, 1, &schedule, &mut rng)?;
                out.push(with_coords(src, s.into_iter().next().expect("one sample"))?);
                // samples live on the zero-CoM subspace, so the reference does too
                let (_, target) = split_window(src, ds.index.manifest.cond_frames, ck.meta.frames)?;
                reference.push(with_coords(src, project_zero_com(&target))?);
            }
            let dir = out_dir(&common, None)?;
            write_trajs(&dir, "samples", &out, common.export)?;
            write_trajs(&dir, "reference", &reference, common.export)?;
            println!("wrote {} samples to {}", out.len(), dir.display());
            Ok(())
        }
        Command::Forecast { ckpt, data, k, limit, split, common } => {
            let (ck, model) = load_model(&ckpt)?;
            let ds = load_dataset(&data)?;
            let schedule = ck.meta.schedule.build()?;
            let mut rng = noise(common.seed.unwrap_or(0));
            let (mut out, mut reference) = (Vec::new(), Vec::new());
            for src in take(&ds, &split, limit)? {
                let (cond, target) = split_window(src, ck.meta.cond_frames, ck.meta.frames)?;
                let g = graph_of(src)?;
                let samples = sample_cond_batch(&model, &vec![&g; k], &vec![&cond; k], ck.meta.frames, &schedule, &mut rng)?;
                for s in samples {
                    out.push(with_coords(src, s)?);
                }
                reference.push(with_coords(src, target)?);
            }
            let dir = out_dir(&common, None)?;
            write_trajs(&dir, "forecasts", &out, common.export)?;
            write_trajs(&dir, "reference", &reference, common.export)?;
            println!("wrote {} forecasts ({k} per trajectory) to {}", out.len(), dir.display());
            Ok(())
        }
        Command::Interpolate { ckpt, data, k, limit, split, common } => {
            let (ck, model) = load_model(&ckpt)?;
            let tail = ck.meta.tail_frames;
            if tail == 0 || tail >= ck.meta.cond_frames {
                return Err(GeoError::invalid("checkpoint is not an interpolation model"));
            }
            let head = ck.meta.cond_frames - tail;
            let t = ck.meta.frames;
            let ds = load_dataset(&data)?;
            let schedule = ck.meta.schedule.build()?;
            let mut rng = noise(common.seed.unwrap_or(0));
            let (mut out, mut reference) = (Vec::new(), Vec::new());
            for src in take(&ds, &split, limit)? {
                if src.frames() < head + t + tail {
                    return Err(GeoError::dim("trajectories too short for the model's windows"));
                }
                let c = &src.coords;
                let g = graph_of(src)?;
                let samples = interpolate(
                    &model,
                    &g,
                    &c.slice_frames(0, head),
                    &c.slice_frames(head + t, head + t + tail),
                    t,
                    k,
                    &schedule,
                    &mut rng,
                )?;
                for s in samples {
                    out.push(with_coords(src, s)?);
                }
                reference.push(with_coords(src, c.slice_frames(head, head + t))?);
            }
            let dir = out_dir(&common, None)?;
            write_trajs(&dir, "interpolations", &out, common.export)?;
            write_trajs(&dir, "reference", &reference, common.export)?;
            println!("wrote {} interpolations to {}", out.len(), dir.display());
            Ok(())
        }
        Command::Refine { ckpt, data, input, k_steps, split, common } => {
            let (ck, model) = load_model(&ckpt)?;
            let ds = load_dataset(&data)?;
            let inputs = gtrj::read_file(&input)?;
            let srcs = ds.split(&split)?;
            if inputs.len() > srcs.len() {
                return Err(GeoError::invalid("more inputs than trajectories in the split"));
            }
            let schedule = ck.meta.schedule.build()?;
            let mut rng = noise(common.seed.unwrap_or(0));
            let mut out = Vec::new();
            for (x, src) in inputs.iter().zip(srcs) {
                let (cond, _) = split_window(src, ck.meta.cond_frames, ck.meta.frames)?;
                let refined = refine_trajectory(&model, &graph_of(src)?, &x.coords, &cond, k_steps, &schedule, &mut rng)?;
                out.push(with_coords(x, refined)?);
            }
            let dir = out_dir(&common, None)?;
            write_trajs(&dir, "refined", &out, common.export)?;
            println!("refined {} trajectories with K = {k_steps}", out.len());
            Ok(())
        }
        Command::Compose { ckpt, uncond_ckpt, data, segments, limit, split, common } => {
            let (ck, model) = load_model(&ckpt)?;
            let uncond = uncond_ckpt.as_deref().map(load_model).transpose()?;
            let ds = load_dataset(&data)?;
            let schedule = ck.meta.schedule.build()?;
            let mut rng = noise(common.seed.unwrap_or(0));
            let mut out = Vec::new();
            for src in take(&ds, &split, Some(limit))? {
                let first = match uncond {
                    Some(_) => None,
                    None => Some(split_window(src, ck.meta.cond_frames, ck.meta.frames)?.1),
                };
                let long = compose_long(
                    uncond.as_ref().map(|u| &u.1),
                    &model,
                    &graph_of(src)?,
                    first,
                    segments,
                    ck.meta.frames,
                    ck.meta.cond_frames,
                    ck.meta.dim,
                    &schedule,
                    &mut rng,
                )?;
                out.push(with_coords(src, long)?);
            }
            let dir = out_dir(&common, None)?;
            write_trajs(&dir, "composed", &out, common.export)?;
            println!("composed {} trajectories of {segments} segments", out.len());
            Ok(())
        }
        Command::Evaluate { generated, reference, task, config, common } => {
            let metric = match &config {
                Some(p) => RunConfig::load(p)?.metric,
                None => MetricConfig::default(),
            };
            let gen = gtrj::read_file(&generated)?;
            let refs = gtrj::read_file(&reference)?;
            let mut budget = metric.budget.clone();
            if let Some(s) = common.seed {
                budget.seed = s;
            }
            let report = evaluate(task, &gen, &refs, &metric, &budget)?;
            println!("{report}");
            let dir = out_dir(&common, None)?;
            std::fs::write(dir.join("metrics.txt"), report.to_key_values())?;
            Ok(())
        }
        Command::CheckEquivariance { ckpt, nodes, trials, chain_trials, common } => {
            let (model, schedule, frames, cond_frames) = match &ckpt {
                Some(p) => {
                    let (ck, m) = load_model(p)?;
                    let cf = if ck.meta.cond_frames > 0 { ck.meta.cond_frames } else { 3 };
                    (m, ck.meta.schedule.build()?, ck.meta.frames, cf)
                }
                None => {
                    let cfg = EgtnConfig {
                        n_layers: 2,
                        hidden_dim: 32,
                        time_emb_dim: 16,
                        use_cross_attention: true,
                        prior_frames: Some(10),
                        ..EgtnConfig::default()
                    };
                    let seed = common.seed.unwrap_or(0);
                    // fresh coordinate heads are zero, which would make every check trivially exact
                    let mut m = EgtnModel::new(cfg, seed)?;
                    m.randomize(0.05, seed);
                    (m, ScheduleConfig::short().build()?, 10, 5)
                }
            };
            let setup = SymmetrySetup {
                nodes,
                frames,
                cond_frames,
                dim: 3,
                trials,
                chain_trials,
                seed: common.seed.unwrap_or(0),
            };
            let report = equivariance_suite(&model, &schedule, &setup)?;
            println!("{report}");
            if report.max() > 1e-4 {
                return Err(GeoError::Numerical(format!("equivariance deviation {:.3e} exceeds 1e-4", report.max())));
            }
            Ok(())
        }
    }
}

/// Metrics of `generated` against `reference` for a task.
pub fn evaluate(
    task: Task,
    generated: &[GeoTrajectory<f32>],
    reference: &[GeoTrajectory<f32>],
    metric: &MetricConfig,
    budget: &SurrogateBudget,
) -> Result<MetricReport> {
    let mut report = MetricReport { k: metric.k, bins: metric.bins, ..Default::default() };
    match task {
        Task::Forecast => {
            let k = metric.k.max(1);
            if generated.len() != reference.len() * k {
                return Err(GeoError::dim(format!(
                    "{} generated trajectories for {} references at K = {k}",
                    generated.len(),
                    reference.len()
                )));
            }
            let (mut a, mut f, mut ka, mut kf) = (0.0, 0.0, 0.0, 0.0);
            for (j, r) in reference.iter().enumerate() {
                let group: Vec<Coords<f32>> = generated[j * k..(j + 1) * k].iter().map(|g| g.coords.clone()).collect();
                let (sa, sf) = ade_fde(&group[0], &r.coords)?;
                let (ma, mf) = min_over_k(&group, &r.coords, metric.reduce)?;
                a += sa;
                f += sf;
                ka += ma;
                kf += mf;
            }
            let n = reference.len().max(1) as f64;
            report.ade = Some(a / n);
            report.fde = Some(f / n);
            report.min_ade_k = Some(ka / n);
            report.min_fde_k = Some(kf / n);
        }
        Task::Generation => {
            report.marginal_score = Some(marginal_score(generated, reference, metric.bins, metric.feature)?);
            if metric.surrogate {
                let (c, p) = surrogate_scores(generated, reference, budget)?;
                report.classification_score = Some(c);
                report.prediction_score = Some(p);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("seed = 1\n[model]\nhidden_dim = 8\n").is_ok());
        let err = RunConfig::from_toml("seed = 1\n[model]\nhiden_dim = 8\n").unwrap_err();
        assert!(err.to_string().contains("hiden_dim"));
        assert!(RunConfig::from_toml("seed = 1\nextra = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nhidden_dim = 8\n").is_err(), "seed is required");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["geotdm", "frobnicate"]), 1);
        assert_eq!(run_cli(["geotdm", "train", "--bogus"]), 1);
        assert_eq!(run_cli(["geotdm", "train", "--config", "x", "--mode", "sideways"]), 1);
        assert_eq!(run_cli(["geotdm", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(run_cli(["geotdm", "simulate", "--config", "/nonexistent/run.toml"]), 2);
    }
}
