//! Trajectory metrics: ADE/FDE, best-of-K, histogram marginal score and
//! learned surrogate scores.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::egtn::{BatchSpec, EgtnConfig, EgtnModel, NodeGraph};
use crate::error::{GeoError, Result};
use crate::geom::{Coords, GeoTrajectory};
use crate::nn::Linear;
use crate::real::Real;
use crate::tape::{Mat, Tape};
use crate::train::{clip_global_norm, Adam};

/// Mean per-point Euclidean error and the mean error on the final frame.
pub fn ade_fde<F: Real>(x: &Coords<F>, y: &Coords<F>) -> Result<(f64, f64)> {
    if !x.same_shape(y) {
        return Err(GeoError::dim(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.frames, x.nodes, x.dim, y.frames, y.nodes, y.dim
        )));
    }
    if x.frames == 0 || x.nodes == 0 {
        return Err(GeoError::invalid("empty trajectories"));
    }
    let dist = |t: usize, i: usize| -> f64 {
        x.point(t, i)
            .iter()
            .zip(y.point(t, i))
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for t in 0..x.frames {
        for i in 0..x.nodes {
            total += dist(t, i);
        }
    }
    let last = x.frames - 1;
    let fde = (0..x.nodes).map(|i| dist(last, i)).sum::<f64>() / x.nodes as f64;
    Ok((total / (x.frames * x.nodes) as f64, fde))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Min,
    Mean,
}

/// ADE and FDE reduced over `K` samples; each reduced independently.
pub fn min_over_k<F: Real>(samples: &[Coords<F>], y: &Coords<F>, reduce: Reduce) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(GeoError::invalid("no samples"));
    }
    let scores = samples.iter().map(|s| ade_fde(s, y)).collect::<Result<Vec<_>>>()?;
    Ok(match reduce {
        Reduce::Min => scores
            .iter()
            .fold((f64::INFINITY, f64::INFINITY), |(a, f), &(sa, sf)| (a.min(sa), f.min(sf))),
        Reduce::Mean => {
            let k = scores.len() as f64;
            let (a, f) = scores.iter().fold((0.0, 0.0), |(a, f), &(sa, sf)| (a + sa, f + sf));
            (a / k, f / k)
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalFeature {
    /// Every coordinate component of every node.
    #[default]
    Coords,
    /// Length of every undirected graph edge.
    EdgeLengths,
}

fn frame_values<F: Real>(traj: &GeoTrajectory<F>, t: usize, feature: MarginalFeature, out: &mut Vec<f64>) {
    match feature {
        MarginalFeature::Coords => out.extend(traj.coords.frame(t).iter().map(|v| v.to_f64_lossy())),
        MarginalFeature::EdgeLengths => {
            for &(i, j) in traj.edges.iter().filter(|(i, j)| i < j) {
                let d: f64 = traj
                    .coords
                    .point(t, i)
                    .iter()
                    .zip(traj.coords.point(t, j))
                    .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
                    .sum();
                out.push(d.sqrt());
            }
        }
    }
}

/// Normalized histogram masses of `values` over `bins` equal bins of `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width) * bins as f64).floor() as isize } else { 0 };
        h[b.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|m| *m /= n);
    h
}

/// Per frame: pooled feature histograms on the reference range plus one
/// overflow bin per side, mean absolute mass difference over all `bins + 2`
/// bins; averaged over frames. Generated mass outside the reference range
/// lands in the overflow bins, so outliers cost mass without widening bins.
pub fn marginal_score<F: Real>(
    generated: &[GeoTrajectory<F>],
    reference: &[GeoTrajectory<F>],
    bins: usize,
    feature: MarginalFeature,
) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(GeoError::invalid("marginal score needs two nonempty sets"));
    }
    if bins < 2 {
        return Err(GeoError::invalid("at least two bins required"));
    }
    let frames = generated[0].frames();
    if generated.iter().chain(reference).any(|t| t.frames() != frames) {
        return Err(GeoError::dim("all trajectories must have the same number of frames"));
    }
    let mut total = 0.0;
    for t in 0..frames {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        generated.iter().for_each(|g| frame_values(g, t, feature, &mut a));
        reference.iter().for_each(|r| frame_values(r, t, feature, &mut b));
        if a.is_empty() || b.is_empty() {
            return Err(GeoError::invalid("no feature values to compare (graph without edges?)"));
        }
        let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (ha, hb) = (overflow_histogram(&a, lo, hi, bins), overflow_histogram(&b, lo, hi, bins));
        total += ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / (bins + 2) as f64;
    }
    Ok(total / frames as f64)
}

fn overflow_histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins + 2];
    let width = hi - lo;
    for &v in values {
        let b = if v < lo || v.is_nan() {
            0
        } else if v > hi {
            bins + 1
        } else if width > 0.0 {
            1 + ((((v - lo) / width) * bins as f64).floor() as usize).min(bins - 1)
        } else {
            1
        };
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|m| *m /= n);
    h
}

/// Size of the surrogate models and their training budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for SurrogateBudget {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, learning_rate: 1e-3, hidden_dim: 16, seed: 0 }
    }
}

fn surrogate_config(feature_dim: usize, hidden: usize, cross: bool) -> EgtnConfig {
    EgtnConfig {
        n_layers: 1,
        hidden_dim: hidden,
        time_emb_dim: 2,
        n_heads: 1,
        use_cross_attention: cross,
        feature_dim,
        mlp_depth: 2,
        prior_layers: 0,
        prior_frames: None,
        prior_mode: crate::egtn::PriorMode::LastFrame,
    }
}

fn check_uniform<F: Real>(trajs: &[&GeoTrajectory<F>]) -> Result<(usize, usize, usize, usize)> {
    let first = trajs.first().ok_or_else(|| GeoError::invalid("empty trajectory set"))?;
    let shape = (first.frames(), first.nodes(), first.dim(), first.node_features.cols);
    if trajs.iter().any(|t| (t.frames(), t.nodes(), t.dim(), t.node_features.cols) != shape) {
        return Err(GeoError::dim("surrogate sets must share trajectory shape"));
    }
    Ok(shape)
}

/// Mean-pooled invariant readout of a 1-layer network, trained as a discriminator.
struct Classifier {
    model: EgtnModel<f32>,
    head: Linear,
}

impl Classifier {
    fn new(feature_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut model = EgtnModel::new(surrogate_config(feature_dim, hidden, false), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a55);
        let head = Linear::new(&mut model.params, "head", hidden, 1, false, &mut rng);
        Ok(Self { model, head })
    }

    /// Mean BCE of the batch; gradients when `grads` is set.
    fn loss(&self, batch: &[(&GeoTrajectory<f32>, f32)], with_grads: bool) -> Result<(f64, Vec<Vec<f32>>)> {
        let (t, n, _, _) = check_uniform(&batch.iter().map(|b| b.0).collect::<Vec<_>>())?;
        let graphs: Vec<NodeGraph<f32>> = batch
            .iter()
            .map(|(g, _)| NodeGraph::new(g.node_features.clone(), g.edges.clone()))
            .collect::<Result<_>>()?;
        let refs: Vec<&NodeGraph<f32>> = graphs.iter().collect();
        let spec = BatchSpec::new(&refs, t, None, &[], None, self.model.config.time_emb_dim)?;
        let coords: Vec<f32> = batch.iter().flat_map(|(g, _)| g.coords.data.iter().copied()).collect();
        let d = batch[0].0.dim();
        let mut tape = Tape::new();
        let pv = self.model.params.bind(&mut tape);
        let x = tape.constant(Mat::from_vec(coords.len() / d, d, coords));
        let out = self.model.trunk_on_tape(&mut tape, &pv, &spec, x, None)?;
        let owner: Arc<[usize]> = (0..batch.len() * t * n).map(|r| r / (t * n)).collect();
        let pooled = tape.scatter(out.h, owner, batch.len());
        let pooled = tape.scale(pooled, 1.0 / (t * n) as f32);
        let logits = self.head.forward(&mut tape, &pv, pooled);
        let labels: Arc<[f32]> = batch.iter().map(|b| b.1).collect();
        let loss = tape.bce_logits(logits, labels);
        let value = tape.value(loss).data[0] as f64;
        if !value.is_finite() {
            return Err(GeoError::Numerical("non-finite surrogate loss".into()));
        }
        let grads = if with_grads {
            let g = tape.backward(loss);
            self.model
                .params
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| g.param(i).map_or_else(|| vec![0.0; p.value.data.len()], <[f32]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    }
}

/// Test cross-entropy of a discriminator trained to tell `generated` (label 0)
/// from `reference` (label 1) on an 80/20 split; `ln 2` means indistinguishable.
pub fn classification_score(
    generated: &[GeoTrajectory<f32>],
    reference: &[GeoTrajectory<f32>],
    budget: &SurrogateBudget,
) -> Result<f64> {
    let all: Vec<&GeoTrajectory<f32>> = generated.iter().chain(reference).collect();
    let (_, _, _, dh) = check_uniform(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut labelled: Vec<(&GeoTrajectory<f32>, f32)> =
        generated.iter().map(|g| (g, 0.0)).chain(reference.iter().map(|r| (r, 1.0))).collect();
    labelled.shuffle(&mut rng);
    let cut = (labelled.len() * 4).div_ceil(5);
    let (train, test) = labelled.split_at(cut);
    let classes = |s: &[(&GeoTrajectory<f32>, f32)]| (s.iter().any(|x| x.1 == 0.0), s.iter().any(|x| x.1 == 1.0));
    if classes(train) != (true, true) || test.is_empty() {
        return Err(GeoError::invalid("degenerate split: both classes needed for training and a nonempty test set"));
    }
    let mut clf = Classifier::new(dh, budget.hidden_dim, budget.seed)?;
    let mut adam = Adam::new(budget.learning_rate, 0.9, 0.999, 1e-8, &clf.model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pos = order.len();
    for _ in 0..budget.steps {
        if pos + budget.batch_size > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + budget.batch_size).min(order.len());
        let batch: Vec<_> = order[pos..end].iter().map(|&i| train[i]).collect();
        pos = end;
        let (_, mut g) = clf.loss(&batch, true)?;
        clip_global_norm(&mut g, 1.0);
        adam.step(&mut clf.model.params, &g)?;
    }
    let mut total = 0.0;
    for chunk in test.chunks(64) {
        total += clf.loss(chunk, false)?.0 * chunk.len() as f64;
    }
    Ok(total / test.len() as f64)
}

/// Test MSE on `reference` of a first-half→second-half predictor trained on `generated`.
pub fn prediction_score(
    generated: &[GeoTrajectory<f32>],
    reference: &[GeoTrajectory<f32>],
    budget: &SurrogateBudget,
) -> Result<f64> {
    let all: Vec<&GeoTrajectory<f32>> = generated.iter().chain(reference).collect();
    let (t, _, _, dh) = check_uniform(&all)?;
    if t < 2 {
        return Err(GeoError::invalid("prediction needs at least two frames"));
    }
    let half = t / 2;
    let model = EgtnModel::<f32>::new(surrogate_config(dh, budget.hidden_dim, true), budget.seed)?;
    let mut model = model;
    let mut adam = Adam::new(budget.learning_rate, 0.9, 0.999, 1e-8, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ 0x9ed);
    let mut order: Vec<usize> = (0..generated.len()).collect();
    let mut pos = order.len();
    for _ in 0..budget.steps {
        if pos + budget.batch_size > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + budget.batch_size).min(order.len());
        let batch: Vec<&GeoTrajectory<f32>> = order[pos..end].iter().map(|&i| &generated[i]).collect();
        pos = end;
        let (_, mut g) = predictor_loss(&model, &batch, half, true)?;
        clip_global_norm(&mut g, 1.0);
        adam.step(&mut model.params, &g)?;
    }
    let refs: Vec<&GeoTrajectory<f32>> = reference.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(64) {
        total += predictor_loss(&model, chunk, half, false)?.0 * chunk.len() as f64;
    }
    Ok(total / reference.len() as f64)
}

/// Frames `[0, half)` condition a prediction of frames `[half, T)`, initialised at frame `half − 1`.
fn predictor_loss(
    model: &EgtnModel<f32>,
    batch: &[&GeoTrajectory<f32>],
    half: usize,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let (t, n, d, _) = check_uniform(batch)?;
    let out_frames = t - half;
    let graphs: Vec<NodeGraph<f32>> = batch
        .iter()
        .map(|g| NodeGraph::new(g.node_features.clone(), g.edges.clone()))
        .collect::<Result<_>>()?;
    let refs: Vec<&NodeGraph<f32>> = graphs.iter().collect();
    let times: Vec<i64> = (0..half as i64).map(|s| s - half as i64).collect();
    let spec = BatchSpec::new(&refs, out_frames, None, &times, None, model.config.time_emb_dim)?;
    let (mut init, mut cond, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for g in batch {
        let c = &g.coords;
        cond.extend_from_slice(&c.data[..half * n * d]);
        target.extend_from_slice(&c.data[half * n * d..]);
        for _ in 0..out_frames {
            init.extend_from_slice(c.frame(half - 1));
        }
    }
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let x = tape.constant(Mat::from_vec(init.len() / d, d, init));
    let xc = tape.constant(Mat::from_vec(cond.len() / d, d, cond));
    let y = tape.constant(Mat::from_vec(target.len() / d, d, target.clone()));
    let out = model.trunk_on_tape(&mut tape, &pv, &spec, x, Some(xc))?;
    let r = tape.sub(out.x, y);
    let sq = tape.mul(r, r);
    let s = tape.sum_all(sq);
    let loss = tape.scale(s, 1.0 / target.len() as f32);
    let value = tape.value(loss).data[0] as f64;
    if !value.is_finite() {
        return Err(GeoError::Numerical("non-finite surrogate loss".into()));
    }
    let grads = if with_grads {
        let g = tape.backward(loss);
        model
            .params
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i).map_or_else(|| vec![0.0; p.value.data.len()], <[f32]>::to_vec))
            .collect()
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

pub fn surrogate_scores(
    generated: &[GeoTrajectory<f32>],
    reference: &[GeoTrajectory<f32>],
    budget: &SurrogateBudget,
) -> Result<(f64, f64)> {
    Ok((
        classification_score(generated, reference, budget)?,
        prediction_score(generated, reference, budget)?,
    ))
}

/// Extrapolates the last observed velocity of `cond` over `frames` future frames.
pub fn constant_velocity<F: Real>(cond: &Coords<F>, frames: usize) -> Result<Coords<F>> {
    if cond.frames == 0 {
        return Err(GeoError::invalid("constant velocity needs an observed frame"));
    }
    let last = cond.frames - 1;
    let prev = last.saturating_sub(1);
    let mut out = Coords::zeros(frames, cond.nodes, cond.dim);
    for t in 0..frames {
        let k = F::lit((t + 1) as f64);
        for i in 0..cond.nodes {
            let (a, b) = (cond.point(last, i), cond.point(prev, i));
            for (o, (&x, &y)) in out.point_mut(t, i).iter_mut().zip(a.iter().zip(b)) {
                *o = x + k * (x - y);
            }
        }
    }
    Ok(out)
}

/// Linear interpolation from the last frame of `head` to the first frame of
/// `tail`, which sit `frames + 1` frame steps apart.
pub fn straight_line<F: Real>(head: &Coords<F>, tail: &Coords<F>, frames: usize) -> Result<Coords<F>> {
    if head.frames == 0 || tail.frames == 0 || head.nodes != tail.nodes || head.dim != tail.dim {
        return Err(GeoError::dim("straight line needs nonempty endpoints of equal shape"));
    }
    let mut out = Coords::zeros(frames, head.nodes, head.dim);
    let span = (frames + 1) as f64;
    for t in 0..frames {
        let w = F::lit((t + 1) as f64 / span);
        for i in 0..head.nodes {
            let (a, b) = (head.point(head.frames - 1, i), tail.point(0, i));
            for (o, (&x, &y)) in out.point_mut(t, i).iter_mut().zip(a.iter().zip(b)) {
                *o = x + w * (y - x);
            }
        }
    }
    Ok(out)
}

/// Isotropic Gaussian fitted to `reference` (per-frame mean position, one
/// pooled standard deviation), sampled on each reference graph in turn.
pub fn gaussian_baseline<F: Real, R: rand::Rng + ?Sized>(
    reference: &[GeoTrajectory<F>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<GeoTrajectory<F>>> {
    let all: Vec<&GeoTrajectory<F>> = reference.iter().collect();
    let (t, n, d, _) = check_uniform(&all)?;
    let mut mean = vec![0.0; t * d];
    let per_frame = (reference.len() * n) as f64;
    for r in reference {
        for f in 0..t {
            for i in 0..n {
                for (k, v) in r.coords.point(f, i).iter().enumerate() {
                    mean[f * d + k] += v.to_f64_lossy() / per_frame;
                }
            }
        }
    }
    let mut var = 0.0;
    for r in reference {
        for f in 0..t {
            for i in 0..n {
                for (k, v) in r.coords.point(f, i).iter().enumerate() {
                    var += (v.to_f64_lossy() - mean[f * d + k]).powi(2);
                }
            }
        }
    }
    let std = (var / (per_frame * (t * d) as f64)).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).map_err(|e| GeoError::Numerical(e.to_string()))?;
    (0..count)
        .map(|c| {
            let src = &reference[c % reference.len()];
            let mut coords = Coords::zeros(t, n, d);
            for f in 0..t {
                for i in 0..n {
                    for (k, o) in coords.point_mut(f, i).iter_mut().enumerate() {
                        *o = F::lit(mean[f * d + k] + rand_distr::Distribution::sample(&normal, rng));
                    }
                }
            }
            GeoTrajectory::new(coords, src.node_features.clone(), src.edges.clone())
        })
        .collect()
}

/// Collected metrics of one evaluation; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub min_ade_k: Option<f64>,
    pub min_fde_k: Option<f64>,
    pub marginal_score: Option<f64>,
    pub classification_score: Option<f64>,
    pub prediction_score: Option<f64>,
    pub k: usize,
    pub bins: usize,
}

impl MetricReport {
    fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("ade", self.ade),
            ("fde", self.fde),
            ("min_ade_k", self.min_ade_k),
            ("min_fde_k", self.min_fde_k),
            ("marginal_score", self.marginal_score),
            ("classification_score", self.classification_score),
            ("prediction_score", self.prediction_score),
        ]
    }

    /// `key = value` lines, one per computed metric.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            if let Some(v) = v {
                s.push_str(&format!("{k} = {v:.9e}\n"));
            }
        }
        s.push_str(&format!("k = {}\nbins = {}\n", self.k, self.bins));
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>14}", "metric", "value")?;
        for (k, v) in self.rows() {
            match v {
                Some(v) => writeln!(f, "{k:<22} {v:>14.6}")?,
                None => writeln!(f, "{k:<22} {:>14}", "-")?,
            }
        }
        writeln!(f, "{:<22} {:>14}", "k", self.k)?;
        write!(f, "{:<22} {:>14}", "bins", self.bins)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(t: usize, vals: Vec<f64>) -> GeoTrajectory<f64> {
        let n = vals.len() / t;
        GeoTrajectory::new(Coords::from_vec(t, n, 1, vals).unwrap(), Mat::zeros(n, 1), vec![]).unwrap()
    }

    #[test]
    fn ade_fde_hand_values() {
        let x = Coords::from_vec(1, 1, 3, vec![3.0, 4.0, 0.0]).unwrap();
        let y = Coords::zeros(1, 1, 3);
        assert_eq!(ade_fde(&x, &y).unwrap(), (5.0, 5.0));
        let x = Coords::from_vec(2, 1, 1, vec![1.0, 3.0]).unwrap();
        let y: Coords<f64> = Coords::zeros(2, 1, 1);
        assert_eq!(ade_fde(&x, &y).unwrap(), (2.0, 3.0));
        assert_eq!(ade_fde(&x, &x).unwrap(), (0.0, 0.0));
        assert!(ade_fde(&x, &Coords::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn best_of_k() {
        let y: Coords<f64> = Coords::zeros(1, 1, 1);
        let s = vec![Coords::from_vec(1, 1, 1, vec![2.0]).unwrap(), Coords::from_vec(1, 1, 1, vec![-1.5]).unwrap()];
        assert_eq!(min_over_k(&s, &y, Reduce::Min).unwrap().0, 1.5);
        assert_eq!(min_over_k(&s, &y, Reduce::Mean).unwrap().0, 1.75);
        assert!(min_over_k(&[], &y, Reduce::Min).is_err());
    }

    #[test]
    fn outliers_fall_in_overflow_bins() {
        let a = [traj(1, vec![0.0])];
        let b = [traj(1, vec![1.0])];
        assert_eq!(marginal_score(&a, &b, 2, MarginalFeature::Coords).unwrap(), 0.5);
        let spread = [traj(1, vec![0.0]), traj(1, vec![1.0])];
        let far = [traj(1, vec![5.0])];
        assert_eq!(marginal_score(&far, &spread, 2, MarginalFeature::Coords).unwrap(), 0.5);
        assert_eq!(marginal_score(&spread, &spread, 2, MarginalFeature::Coords).unwrap(), 0.0);
        assert_eq!(marginal_score(&a, &a, 50, MarginalFeature::Coords).unwrap(), 0.0);
        assert!(marginal_score(&a, &b, 1, MarginalFeature::Coords).is_err());
    }

    #[test]
    fn baselines_hand_values() {
        let cond = Coords::from_vec(2, 1, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(constant_velocity(&cond, 2).unwrap().data, vec![5.0, 7.0]);
        let tail = Coords::from_vec(1, 1, 1, vec![7.0]).unwrap();
        assert_eq!(straight_line(&cond, &tail, 3).unwrap().data, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn report_formats() {
        let r = MetricReport { ade: Some(1.5), k: 5, bins: 50, ..Default::default() };
        assert!(r.to_key_values().starts_with("ade = 1.5"));
        assert!(r.to_string().contains("fde"));
    }
}
