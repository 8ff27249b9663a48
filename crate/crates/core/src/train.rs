//! Minibatch training with Adam, global-norm clipping, periodic validation,
//! early stopping and atomic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelMeta};
use crate::diffusion::{draw_noise, loss_cond_with, loss_uncond_with, Example, LossOutput, NoiseDraw, NoiseSchedule};
use crate::egtn::{Condition, EgtnModel, NodeGraph};
use crate::error::{GeoError, Result};
use crate::geom::{Coords, GeoTrajectory};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::sim::split_window;
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Uncond,
    Cond,
}

impl std::str::FromStr for Mode {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(Mode::Uncond),
            "cond" => Ok(Mode::Cond),
            _ => Err(GeoError::invalid(format!("unknown mode {s}; expected uncond or cond"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Epochs between validations.
    #[serde(default = "default_interval")]
    pub validation_interval: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Global gradient norm bound; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// EMA decay of the parameters; `None` disables it.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_patience() -> usize {
    5
}

fn default_interval() -> usize {
    20
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 500,
            early_stop_patience: default_patience(),
            validation_interval: default_interval(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mode: Mode::Uncond,
            grad_clip: Some(1.0),
            ema_decay: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(GeoError::invalid("learning_rate > 0, batch_size ≥ 1 and patience ≥ 1 required"));
        }
        if self.validation_interval == 0 {
            return Err(GeoError::invalid("validation_interval must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(GeoError::invalid("Adam moments must lie in [0, 1) and eps > 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(GeoError::invalid("grad_clip must be positive and ema_decay in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros(params: &ParamStore<f32>) -> Self {
        let z: Vec<Vec<f32>> = params.params.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
        Self { step: 0, m: z.clone(), v: z }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &ParamStore<f32>) -> Self {
        Self { lr, beta1, beta2, eps, state: AdamState::zeros(params) }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(GeoError::dim("one gradient per parameter tensor expected"));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.state.m[k], &mut self.state.v[k], &grads[k]);
            if g.len() != p.value.data.len() {
                return Err(GeoError::dim(format!("gradient of {} has the wrong size", p.name)));
            }
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.value.data[i] = (p.value.data[i] as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}

/// Windows cut from trajectories: target windows, graphs and, in conditional mode, conditions.
#[derive(Clone, Debug, Default)]
pub struct TrainData<F> {
    pub graphs: Vec<NodeGraph<F>>,
    pub targets: Vec<Coords<F>>,
    pub conds: Vec<Option<Condition<F>>>,
}

impl<F: Real> TrainData<F> {
    /// Target window `[T_c, T_c + T)`; the condition is `[0, T_c)` in conditional mode.
    pub fn from_trajectories(
        trajs: &[GeoTrajectory<F>],
        mode: Mode,
        cond_frames: usize,
        target_frames: usize,
    ) -> Result<Self> {
        let mut data = Self::default();
        for t in trajs {
            let (cond, target) = split_window(t, cond_frames, target_frames)?;
            data.graphs.push(NodeGraph::new(t.node_features.clone(), t.edges.clone())?);
            data.targets.push(target);
            data.conds.push(match mode {
                Mode::Cond => Some(cond),
                Mode::Uncond => None,
            });
        }
        Ok(data)
    }

    /// Conditional windows for interpolation: `head` frames, then `target_frames`
    /// generated frames, then `tail` frames; the condition brackets the target.
    pub fn bracketing(trajs: &[GeoTrajectory<F>], head: usize, target_frames: usize, tail: usize) -> Result<Self> {
        if head == 0 || tail == 0 {
            return Err(GeoError::invalid("interpolation needs head and tail frames"));
        }
        let mut data = Self::default();
        for t in trajs {
            if t.frames() < head + target_frames + tail {
                return Err(GeoError::dim("trajectory shorter than the requested windows"));
            }
            let c = &t.coords;
            let cond = Condition::bracketing(
                &c.slice_frames(0, head),
                &c.slice_frames(head + target_frames, head + target_frames + tail),
                target_frames,
            )?;
            data.graphs.push(NodeGraph::new(t.node_features.clone(), t.edges.clone())?);
            data.targets.push(c.slice_frames(head, head + target_frames));
            data.conds.push(Some(cond));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            graphs: idx.iter().map(|&i| self.graphs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            conds: idx.iter().map(|&i| self.conds[i].clone()).collect(),
        }
    }

    pub fn examples(&self, idx: &[usize]) -> Vec<Example<'_, F>> {
        idx.iter()
            .map(|&i| Example { graph: &self.graphs[i], target: &self.targets[i], cond: self.conds[i].as_ref() })
            .collect()
    }
}

/// Examples per parallel loss evaluation; fixed so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Batch loss and gradients, evaluated in fixed-size chunks and reduced in order.
pub fn batch_loss(
    model: &EgtnModel<f32>,
    mode: Mode,
    examples: &[Example<'_, f32>],
    draw: &NoiseDraw<f32>,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<f32>> {
    let rows_per = draw.eps.rows / examples.len().max(1);
    let chunks: Vec<Result<LossOutput<f32>>> = examples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, ex)| {
            let start = c * CHUNK;
            let sub = NoiseDraw {
                taus: draw.taus[start..start + ex.len()].to_vec(),
                eps: Mat::from_vec(
                    ex.len() * rows_per,
                    draw.eps.cols,
                    draw.eps.data[start * rows_per * draw.eps.cols..(start + ex.len()) * rows_per * draw.eps.cols].to_vec(),
                ),
            };
            match mode {
                Mode::Uncond => loss_uncond_with(model, ex, &sub, schedule),
                Mode::Cond => loss_cond_with(model, ex, &sub, schedule),
            }
        })
        .collect();
    let total = examples.len() as f32;
    let mut loss = 0.0f32;
    let mut grads: Vec<Vec<f32>> = model.params.params.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
    for (c, r) in chunks.into_iter().enumerate() {
        let r = r?;
        let n = (examples.len() - c * CHUNK).min(CHUNK) as f32;
        let w = n / total;
        loss += w * r.loss;
        for (g, rg) in grads.iter_mut().zip(&r.grads) {
            for (a, b) in g.iter_mut().zip(rg) {
                *a += w * b;
            }
        }
    }
    Ok(LossOutput { loss, grads })
}

/// Mean diffusion loss over a dataset with noise from a fixed seed; parameters untouched.
pub fn evaluate_loss(
    model: &EgtnModel<f32>,
    mode: Mode,
    data: &TrainData<f32>,
    schedule: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(GeoError::invalid("empty evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for b in idx.chunks(batch_size.max(1)) {
        let ex = data.examples(b);
        let draw = draw_noise(&ex, schedule, mode == Mode::Uncond, &mut rng)?;
        let out = batch_loss(model, mode, &ex, &draw, schedule)?;
        total += out.loss as f64 * b.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
struct LogLine {
    step: u64,
    epoch: usize,
    train_loss: f64,
    valid_loss: Option<f64>,
    wall_time: f64,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("model.ckpt"), metrics: dir.join("metrics.jsonl") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Training loss of every optimizer step, in order.
    pub train_losses: Vec<f64>,
    /// `(step, loss)` for each validation.
    pub valid_losses: Vec<(u64, f64)>,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
    pub steps: u64,
    pub epochs: usize,
}

/// Early-stopping bookkeeping.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, bad: 0 }
    }

    /// Records a validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad >= self.patience)
        }
    }
}

/// Runs the optimisation loop. The model ends with the best-validation
/// parameters when validation ran, the last parameters otherwise.
pub fn train_run(
    config: &TrainConfig,
    meta: &ModelMeta,
    model: &mut EgtnModel<f32>,
    schedule: &NoiseSchedule,
    train: &TrainData<f32>,
    valid: Option<&TrainData<f32>>,
    paths: Option<&RunPaths>,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(GeoError::invalid("empty training set"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.eps, &model.params);
    let mut ema = config.ema_decay.map(|_| model.params.clone());
    let mut log = match paths {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(&p.metrics)?)),
        None => None,
    };
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best_params: Option<ParamStore<f32>> = None;
    let mut report = TrainReport {
        train_losses: Vec::new(),
        valid_losses: Vec::new(),
        best_valid: None,
        stopped_early: false,
        steps: 0,
        epochs: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let ex = train.examples(batch);
            let draw = draw_noise(&ex, schedule, config.mode == Mode::Uncond, &mut rng)?;
            let mut out = batch_loss(model, config.mode, &ex, &draw, schedule)?;
            if !out.loss.is_finite() {
                return Err(GeoError::Numerical(format!("non-finite training loss at step {}", report.steps + 1)));
            }
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut out.grads, c);
            }
            adam.step(&mut model.params, &out.grads)?;
            if let (Some(e), Some(decay)) = (ema.as_mut(), config.ema_decay) {
                for (pe, p) in e.params.iter_mut().zip(&model.params.params) {
                    for (a, &b) in pe.value.data.iter_mut().zip(&p.value.data) {
                        *a = (decay * *a as f64 + (1.0 - decay) * b as f64) as f32;
                    }
                }
            }
            report.steps += 1;
            report.train_losses.push(out.loss as f64);
            if let Some(l) = log.as_mut() {
                let line = LogLine {
                    step: report.steps,
                    epoch,
                    train_loss: out.loss as f64,
                    valid_loss: None,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                writeln!(l, "{}", serde_json::to_string(&line).expect("serializable"))?;
            }
            if config.max_steps.is_some_and(|m| report.steps >= m) {
                report.epochs = epoch;
                break 'epochs;
            }
        }
        report.epochs = epoch;
        if let Some(v) = valid.filter(|_| epoch % config.validation_interval == 0) {
            let eval_model = match &ema {
                Some(e) => EgtnModel { params: e.clone(), ..model.clone() },
                None => model.clone(),
            };
            let vl = evaluate_loss(&eval_model, config.mode, v, schedule, config.batch_size, config.seed ^ 0x5eed)?;
            report.valid_losses.push((report.steps, vl));
            if let Some(l) = log.as_mut() {
                let line = LogLine {
                    step: report.steps,
                    epoch,
                    train_loss: *report.train_losses.last().unwrap_or(&f64::NAN),
                    valid_loss: Some(vl),
                    wall_time: started.elapsed().as_secs_f64(),
                };
                writeln!(l, "{}", serde_json::to_string(&line).expect("serializable"))?;
            }
            let (improved, stop) = stopper.observe(vl);
            if improved {
                best_params = Some(eval_model.params.clone());
                if let Some(p) = paths {
                    let ck = Checkpoint {
                        meta: meta.clone(),
                        params: eval_model.params.clone(),
                        optimizer: Some(adam.state.clone()),
                    };
                    ck.save(&p.checkpoint)?;
                }
            }
            if stop {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    report.best_valid = stopper.best;
    match best_params {
        Some(b) => model.params = b,
        None => {
            if let Some(e) = ema {
                model.params = e;
            }
            if let Some(p) = paths {
                let ck = Checkpoint { meta: meta.clone(), params: model.params.clone(), optimizer: Some(adam.state.clone()) };
                ck.save(&p.checkpoint)?;
            }
        }
    }
    Ok(report)
}
