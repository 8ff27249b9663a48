//! Equivariant geometric trajectory network.
//!
//! Each block runs an EGCL message-passing layer on every frame and then a
//! temporal attention layer along every node's time axis. With a condition
//! trajectory the attention softmax runs jointly over the target frames and
//! the condition frames, and condition coordinates enter the coordinate
//! update through `x⁽ᵗ⁾ − x_c⁽ˢ⁾`. All coordinate updates are scalar-gated
//! relative vectors, so the network commutes with rotations and translations.
//!
//! Row layout everywhere: trajectory `b`, frame `t`, node `i` lives at row
//! `(b·T + t)·N + i`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};
use crate::geom::{project_zero_com, Coords, SubspaceNoise};
use crate::nn::{mlp_widths, Linear, Mlp, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Mat, Tape, Var};

/// Interleaved `(sin, cos)` pairs at frequencies `10000^(−2i/dim)`.
pub fn sinusoidal_embedding(k: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(GeoError::invalid(format!("embedding dimension must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out.push((k * freq).sin());
        out.push((k * freq).cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgtnConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub time_emb_dim: usize,
    #[serde(default = "one")]
    pub n_heads: usize,
    #[serde(default)]
    pub use_cross_attention: bool,
    pub feature_dim: usize,
    /// Hidden layers inside every MLP.
    #[serde(default = "two")]
    pub mlp_depth: usize,
    #[serde(default = "two")]
    pub prior_layers: usize,
    /// Target length `T` of the learnable prior; `None` disables the prior subnet.
    #[serde(default)]
    pub prior_frames: Option<usize>,
    /// Anchor used by conditional diffusion.
    #[serde(default)]
    pub prior_mode: PriorMode,
}

/// How the conditional diffusion anchor is derived from the condition frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Learned point-wise mixture of processed condition frames.
    #[default]
    Learned,
    /// Every target frame anchored at the last condition frame.
    LastFrame,
    /// Every point anchored at the mean of all condition points.
    CenterOfMass,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl Default for EgtnConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            hidden_dim: 128,
            time_emb_dim: 32,
            n_heads: 1,
            use_cross_attention: false,
            feature_dim: 1,
            mlp_depth: 2,
            prior_layers: 2,
            prior_frames: None,
            prior_mode: PriorMode::Learned,
        }
    }
}

impl EgtnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) {
            return Err(GeoError::invalid("hidden_dim must be even and positive"));
        }
        if self.time_emb_dim == 0 || !self.time_emb_dim.is_multiple_of(2) {
            return Err(GeoError::invalid("time_emb_dim must be even and positive"));
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(GeoError::invalid("n_heads must divide hidden_dim"));
        }
        if self.feature_dim == 0 || self.mlp_depth == 0 {
            return Err(GeoError::invalid("feature_dim and mlp_depth must be at least 1"));
        }
        if self.prior_mode == PriorMode::Learned && self.use_cross_attention && self.prior_frames.is_none() {
            return Err(GeoError::invalid("a learned prior needs prior_frames"));
        }
        if self.prior_frames == Some(0) {
            return Err(GeoError::invalid("prior_frames must be at least 1"));
        }
        Ok(())
    }
}

/// Invariant node features and connectivity shared by every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGraph<F> {
    /// `N×D_h`.
    pub features: Mat<F>,
    pub edges: Vec<(usize, usize)>,
}

impl<F: Real> NodeGraph<F> {
    pub fn new(features: Mat<F>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = features.rows;
        if edges.iter().any(|&(a, b)| a >= n || b >= n || a == b) {
            return Err(GeoError::invalid("edge list has out-of-range index or self loop"));
        }
        Ok(Self { features, edges })
    }

    pub fn complete(features: Mat<F>) -> Self {
        let n = features.rows;
        let edges = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        Self { features, edges }
    }

    pub fn nodes(&self) -> usize {
        self.features.rows
    }

    pub fn cast<G: Real>(&self) -> NodeGraph<G> {
        NodeGraph {
            features: Mat::from_vec(
                self.features.rows,
                self.features.cols,
                self.features.data.iter().map(|&v| G::lit(v.to_f64_lossy())).collect(),
            ),
            edges: self.edges.clone(),
        }
    }
}

/// Observed frames and their positions on the shared timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<F> {
    pub coords: Coords<F>,
    /// Time index of every condition frame; target frames sit at `0..T`.
    pub times: Vec<i64>,
}

impl<F: Real> Condition<F> {
    /// Frames preceding the target window: frame `s` at time `s − T_c`.
    pub fn preceding(coords: Coords<F>) -> Self {
        let tc = coords.frames as i64;
        let times = (0..tc).map(|s| s - tc).collect();
        Self { coords, times }
    }

    /// `head` right before the window and `tail` right after a window of `target_frames`.
    pub fn bracketing(head: &Coords<F>, tail: &Coords<F>, target_frames: usize) -> Result<Self> {
        let coords = Coords::concat_frames(&[head, tail])?;
        let th = head.frames as i64;
        let mut times: Vec<i64> = (0..th).map(|s| s - th).collect();
        times.extend((0..tail.frames as i64).map(|s| target_frames as i64 + s));
        Ok(Self { coords, times })
    }

    pub fn frames(&self) -> usize {
        self.coords.frames
    }
}

#[derive(Clone, Debug)]
pub struct EgclParams {
    pub phi_m: Mlp,
    pub phi_h: Mlp,
    pub phi_x: Mlp,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub phi_q: Mlp,
    pub phi_k: Mlp,
    pub phi_v: Mlp,
    pub phi_x: Mlp,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub egcl: EgclParams,
    pub attention: AttentionParams,
}

/// Input embedding followed by alternating spatial/temporal blocks.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub uses_step_embedding: bool,
}

#[derive(Clone, Debug)]
pub struct PriorNet {
    pub trunk: Trunk,
    /// Scalar weight per condition node-frame.
    pub head: Linear,
    /// `1×T` mixing scales.
    pub gamma: ParamId,
}

/// Anchor of the conditional prior and the mixing weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EquiPrior<F> {
    pub anchor: Coords<F>,
    /// Indexed `[(t·T_c + s)·N + i]`; sums to one over `s`.
    pub weights: Vec<F>,
    pub target_frames: usize,
    pub cond_frames: usize,
    pub nodes: usize,
}

impl<F: Real> EquiPrior<F> {
    pub fn weight(&self, t: usize, s: usize, i: usize) -> F {
        self.weights[(t * self.cond_frames + s) * self.nodes + i]
    }
}

/// Mixes processed condition frames into the prior anchor.
///
/// `node_weights` (`T_c×N`) are the per-frame head outputs, `gamma` has length `T`.
/// Weights are `γ_t · head` for every frame but the last, which closes the sum to one.
pub fn prior_from_parts<F: Real>(x_hat: &Coords<F>, node_weights: &Mat<F>, gamma: &[F]) -> Result<EquiPrior<F>> {
    let (tc, n, d) = (x_hat.frames, x_hat.nodes, x_hat.dim);
    if tc == 0 {
        return Err(GeoError::invalid("prior needs at least one condition frame"));
    }
    if node_weights.rows != tc || node_weights.cols != n {
        return Err(GeoError::dim("node weights must be T_c x N"));
    }
    let t_len = gamma.len();
    let mut weights = vec![F::zero(); t_len * tc * n];
    for t in 0..t_len {
        for i in 0..n {
            let mut partial = F::zero();
            for s in 0..tc - 1 {
                let w = gamma[t] * node_weights.at(s, i);
                weights[(t * tc + s) * n + i] = w;
                partial += w;
            }
            weights[(t * tc + tc - 1) * n + i] = F::one() - partial;
        }
    }
    let mut anchor = Coords::zeros(t_len, n, d);
    for t in 0..t_len {
        for i in 0..n {
            for s in 0..tc {
                let w = weights[(t * tc + s) * n + i];
                let src = x_hat.point(s, i).to_vec();
                for (a, v) in anchor.point_mut(t, i).iter_mut().zip(src) {
                    *a += w * v;
                }
            }
        }
    }
    Ok(EquiPrior { anchor, weights, target_frames: t_len, cond_frames: tc, nodes: n })
}

/// Message-passing index lists over all frames of a batch.
#[derive(Clone, Debug)]
struct FrameGraph {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

impl FrameGraph {
    fn new<F>(graphs: &[&NodeGraph<F>], frames: usize, n: usize) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (b, g) in graphs.iter().enumerate() {
            for t in 0..frames {
                let base = (b * frames + t) * n;
                for &(i, j) in &g.edges {
                    src.push(base + i);
                    dst.push(base + j);
                }
            }
        }
        Self { src: src.into(), dst: dst.into() }
    }
}

/// Query/key pairing for attention over `T` target frames plus optional condition frames.
#[derive(Clone, Debug)]
struct AttentionLayout {
    keys_per_query: usize,
    target_rows: usize,
    pair_query: Arc<[usize]>,
    pair_key: Arc<[usize]>,
    pair_disp: Arc<[usize]>,
    disp_min: i64,
    disp_count: usize,
}

impl AttentionLayout {
    fn new(batch: usize, n: usize, target_times: &[i64], cond_times: &[i64]) -> Self {
        let t_len = target_times.len();
        let tc = cond_times.len();
        let k = t_len + tc;
        let target_rows = batch * t_len * n;
        let mut disp_min = i64::MAX;
        let mut disp_max = i64::MIN;
        for &t in target_times {
            for &s in target_times.iter().chain(cond_times) {
                disp_min = disp_min.min(t - s);
                disp_max = disp_max.max(t - s);
            }
        }
        let pairs = target_rows * k;
        let mut pair_query = Vec::with_capacity(pairs);
        let mut pair_key = Vec::with_capacity(pairs);
        let mut pair_disp = Vec::with_capacity(pairs);
        for b in 0..batch {
            for (t, &tt) in target_times.iter().enumerate() {
                for i in 0..n {
                    let q = (b * t_len + t) * n + i;
                    for (s, &ts) in target_times.iter().enumerate() {
                        pair_query.push(q);
                        pair_key.push((b * t_len + s) * n + i);
                        pair_disp.push((tt - ts - disp_min) as usize);
                    }
                    for (s, &ts) in cond_times.iter().enumerate() {
                        pair_query.push(q);
                        pair_key.push(target_rows + (b * tc + s) * n + i);
                        pair_disp.push((tt - ts - disp_min) as usize);
                    }
                }
            }
        }
        Self {
            keys_per_query: k,
            target_rows,
            pair_query: pair_query.into(),
            pair_key: pair_key.into(),
            pair_disp: pair_disp.into(),
            disp_min,
            disp_count: (disp_max - disp_min + 1).max(1) as usize,
        }
    }

    fn psi_table<F: Real>(&self, dim: usize) -> Mat<F> {
        let mut m = Mat::zeros(self.disp_count, dim);
        for r in 0..self.disp_count {
            let e = sinusoidal_embedding((self.disp_min + r as i64) as f64, dim).expect("even dim");
            for (o, v) in m.row_mut(r).iter_mut().zip(e) {
                *o = F::lit(v);
            }
        }
        m
    }
}

/// Indices that mix processed condition frames into the anchor on the tape.
#[derive(Clone, Debug)]
struct PriorLayout {
    /// target row -> row of the last condition frame of the same node
    last_for_target: Arc<[usize]>,
    /// condition row -> row of the last condition frame of the same node
    last_for_cond: Arc<[usize]>,
    pair_cond: Arc<[usize]>,
    pair_weight: Arc<[usize]>,
    pair_target: Arc<[usize]>,
}

impl PriorLayout {
    fn new(batch: usize, n: usize, t_len: usize, tc: usize) -> Self {
        let mut last_for_target = Vec::new();
        for b in 0..batch {
            for _t in 0..t_len {
                for i in 0..n {
                    last_for_target.push((b * tc + tc - 1) * n + i);
                }
            }
        }
        let mut last_for_cond = Vec::new();
        for b in 0..batch {
            for _s in 0..tc {
                for i in 0..n {
                    last_for_cond.push((b * tc + tc - 1) * n + i);
                }
            }
        }
        let mut pair_cond = Vec::new();
        let mut pair_weight = Vec::new();
        let mut pair_target = Vec::new();
        for b in 0..batch {
            for t in 0..t_len {
                for s in 0..tc.saturating_sub(1) {
                    for i in 0..n {
                        let rc = (b * tc + s) * n + i;
                        pair_cond.push(rc);
                        pair_weight.push(rc * t_len + t);
                        pair_target.push((b * t_len + t) * n + i);
                    }
                }
            }
        }
        Self {
            last_for_target: last_for_target.into(),
            last_for_cond: last_for_cond.into(),
            pair_cond: pair_cond.into(),
            pair_weight: pair_weight.into(),
            pair_target: pair_target.into(),
        }
    }
}

/// Everything about a batch that does not depend on parameters: sizes,
/// node features, diffusion steps and precomputed index lists.
pub struct BatchSpec<F> {
    pub batch: usize,
    pub nodes: usize,
    pub frames: usize,
    pub cond_frames: usize,
    features: Mat<F>,
    target_node: Arc<[usize]>,
    cond_node: Arc<[usize]>,
    target_batch: Arc<[usize]>,
    cond_batch: Arc<[usize]>,
    step_embedding: Option<Mat<F>>,
    target_graph: FrameGraph,
    cond_graph: FrameGraph,
    attention: AttentionLayout,
    prior_attention: Option<AttentionLayout>,
    prior: Option<PriorLayout>,
}

impl<F: Real> BatchSpec<F> {
    /// `taus` holds one diffusion step per trajectory (or `None` for no step input).
    /// `cond_times` lists the condition frames' timeline positions (empty for none).
    pub fn new(
        graphs: &[&NodeGraph<F>],
        frames: usize,
        target_times: Option<&[i64]>,
        cond_times: &[i64],
        taus: Option<&[usize]>,
        time_emb_dim: usize,
    ) -> Result<Self> {
        let batch = graphs.len();
        if batch == 0 {
            return Err(GeoError::invalid("empty batch"));
        }
        if frames == 0 {
            return Err(GeoError::invalid("trajectories need at least one frame"));
        }
        let n = graphs[0].nodes();
        let dh = graphs[0].features.cols;
        if graphs.iter().any(|g| g.nodes() != n || g.features.cols != dh) {
            return Err(GeoError::dim("all graphs in a batch must share N and D_h"));
        }
        let default_times: Vec<i64> = (0..frames as i64).collect();
        let target_times = target_times.unwrap_or(&default_times);
        if target_times.len() != frames {
            return Err(GeoError::dim("target time list length differs from frame count"));
        }
        let tc = cond_times.len();
        let mut features = Mat::zeros(batch * n, dh);
        for (b, g) in graphs.iter().enumerate() {
            features.data[b * n * dh..(b + 1) * n * dh].copy_from_slice(&g.features.data);
        }
        let node_rows = |fr: usize| -> (Arc<[usize]>, Arc<[usize]>) {
            let mut node = Vec::with_capacity(batch * fr * n);
            let mut bi = Vec::with_capacity(batch * fr * n);
            for b in 0..batch {
                for _ in 0..fr {
                    for i in 0..n {
                        node.push(b * n + i);
                        bi.push(b);
                    }
                }
            }
            (node.into(), bi.into())
        };
        let (target_node, target_batch) = node_rows(frames);
        let (cond_node, cond_batch) = node_rows(tc);
        let step_embedding = match taus {
            Some(ts) => {
                if ts.len() != batch {
                    return Err(GeoError::dim("one diffusion step per trajectory expected"));
                }
                let mut m = Mat::zeros(batch, time_emb_dim);
                for (b, &tau) in ts.iter().enumerate() {
                    let e = sinusoidal_embedding(tau as f64, time_emb_dim)?;
                    for (o, v) in m.row_mut(b).iter_mut().zip(e) {
                        *o = F::lit(v);
                    }
                }
                Some(m)
            }
            None => None,
        };
        let (prior_attention, prior) = if tc > 0 {
            (
                Some(AttentionLayout::new(batch, n, cond_times, &[])),
                Some(PriorLayout::new(batch, n, frames, tc)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            batch,
            nodes: n,
            frames,
            cond_frames: tc,
            features,
            target_node,
            cond_node,
            target_batch,
            cond_batch,
            step_embedding,
            target_graph: FrameGraph::new(graphs, frames, n),
            cond_graph: FrameGraph::new(graphs, tc, n),
            attention: AttentionLayout::new(batch, n, target_times, cond_times),
            prior_attention,
            prior,
        })
    }

    /// Replaces the per-trajectory diffusion steps.
    pub fn set_steps(&mut self, taus: &[usize], time_emb_dim: usize) -> Result<()> {
        if taus.len() != self.batch {
            return Err(GeoError::dim("one diffusion step per trajectory expected"));
        }
        let mut m = Mat::zeros(self.batch, time_emb_dim);
        for (b, &tau) in taus.iter().enumerate() {
            let e = sinusoidal_embedding(tau as f64, time_emb_dim)?;
            for (o, v) in m.row_mut(b).iter_mut().zip(e) {
                *o = F::lit(v);
            }
        }
        self.step_embedding = Some(m);
        Ok(())
    }

    /// Target row of each node's copy of the last condition frame.
    pub fn last_cond_rows(&self) -> Option<Arc<[usize]>> {
        self.prior.as_ref().map(|p| p.last_for_target.clone())
    }

    pub fn target_rows(&self) -> usize {
        self.batch * self.frames * self.nodes
    }

    pub fn cond_rows(&self) -> usize {
        self.batch * self.cond_frames * self.nodes
    }
}

/// Tape handles produced by a trunk pass.
pub struct TrunkOutput {
    pub x: Var,
    pub h: Var,
    /// Attention probabilities of every block, `pairs × heads`.
    pub attention: Vec<Var>,
}

/// Tape handles of the learnable prior.
pub struct PriorOutput {
    pub anchor: Var,
    pub x_hat: Var,
    pub head: Var,
}

#[derive(Clone, Debug)]
pub struct EgtnModel<F> {
    pub config: EgtnConfig,
    pub params: ParamStore<F>,
    pub trunk: Trunk,
    pub prior: Option<PriorNet>,
}

fn build_block<F: Real, R: rand::Rng>(
    store: &mut ParamStore<F>,
    name: &str,
    cfg: &EgtnConfig,
    rng: &mut R,
) -> Block {
    let h = cfg.hidden_dim;
    let d = cfg.mlp_depth;
    Block {
        egcl: EgclParams {
            phi_m: Mlp::new(store, &format!("{name}.egcl.phi_m"), &mlp_widths(2 * h + 1, h, h, d), true, false, rng),
            phi_h: Mlp::new(store, &format!("{name}.egcl.phi_h"), &mlp_widths(2 * h, h, h, d), false, false, rng),
            phi_x: Mlp::new(store, &format!("{name}.egcl.phi_x"), &mlp_widths(h, h, 1, d), false, true, rng),
        },
        attention: AttentionParams {
            phi_q: Mlp::new(store, &format!("{name}.attn.phi_q"), &mlp_widths(h, h, h, d), false, false, rng),
            phi_k: Mlp::new(store, &format!("{name}.attn.phi_k"), &mlp_widths(h, h, h, d), false, false, rng),
            phi_v: Mlp::new(store, &format!("{name}.attn.phi_v"), &mlp_widths(h, h, h, d), false, false, rng),
            phi_x: Mlp::new(store, &format!("{name}.attn.phi_x"), &mlp_widths(h, h, 1, d), false, true, rng),
        },
    }
}

impl<F: Real> EgtnModel<F> {
    /// Fresh model; coordinate gates start at zero and γ starts at zero.
    pub fn new(config: EgtnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let embed = Linear::new(
            &mut params,
            "embed",
            config.feature_dim + config.time_emb_dim,
            h,
            false,
            &mut rng,
        );
        let blocks = (0..config.n_layers)
            .map(|l| build_block(&mut params, &format!("block{l}"), &config, &mut rng))
            .collect();
        let trunk = Trunk { embed, blocks, uses_step_embedding: true };
        let prior = config.prior_frames.map(|t_len| {
            let embed = Linear::new(&mut params, "prior.embed", config.feature_dim, h, false, &mut rng);
            let blocks = (0..config.prior_layers)
                .map(|l| build_block(&mut params, &format!("prior.block{l}"), &config, &mut rng))
                .collect();
            let head = Linear::new(&mut params, "prior.head", h, 1, false, &mut rng);
            let gamma = params.add("prior.gamma", Mat::zeros(1, t_len));
            PriorNet { trunk: Trunk { embed, blocks, uses_step_embedding: false }, head, gamma }
        });
        Ok(Self { config, params, trunk, prior })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> EgtnModel<G> {
        EgtnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            prior: self.prior.clone(),
        }
    }

    /// Overwrites every parameter (including zero-initialised gates) with
    /// uniform values in `±scale`; used to exercise all code paths in checks.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        use rand_distr::{Distribution, Uniform};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-scale, scale).expect("valid scale");
        for p in &mut self.params.params {
            for v in &mut p.value.data {
                *v = F::lit(u.sample(&mut rng));
            }
        }
    }

    fn embed_inputs(&self, tape: &mut Tape<F>, pv: &[Var], trunk: &Trunk, spec: &BatchSpec<F>, cond: bool) -> Var {
        let (nodes, batches) = if cond {
            (spec.cond_node.clone(), spec.cond_batch.clone())
        } else {
            (spec.target_node.clone(), spec.target_batch.clone())
        };
        let feat = tape.constant(spec.features.clone());
        let feat_rows = tape.gather(feat, nodes);
        let input = if trunk.uses_step_embedding {
            let emb = match &spec.step_embedding {
                Some(m) => m.clone(),
                None => Mat::zeros(spec.batch, self.config.time_emb_dim),
            };
            let emb = tape.constant(emb);
            let emb_rows = tape.gather(emb, batches);
            tape.concat(&[feat_rows, emb_rows])
        } else {
            feat_rows
        };
        trunk.embed.forward(tape, pv, input)
    }

    /// Runs the denoising trunk on the tape. `x` holds target coordinates,
    /// `x_cond` the condition coordinates when the batch has any.
    pub fn trunk_on_tape(
        &self,
        tape: &mut Tape<F>,
        pv: &[Var],
        spec: &BatchSpec<F>,
        x: Var,
        x_cond: Option<Var>,
    ) -> Result<TrunkOutput> {
        if tape.shape(x).0 != spec.target_rows() {
            return Err(GeoError::dim("coordinate rows do not match the batch layout"));
        }
        let h = self.embed_inputs(tape, pv, &self.trunk, spec, false);
        let cond = match (x_cond, spec.cond_frames) {
            (Some(xc), tc) if tc > 0 => {
                if tape.shape(xc).0 != spec.cond_rows() {
                    return Err(GeoError::dim("condition rows do not match the batch layout"));
                }
                let hc = self.embed_inputs(tape, pv, &self.trunk, spec, true);
                Some((xc, hc))
            }
            (None, 0) => None,
            _ => return Err(GeoError::invalid("condition coordinates and batch layout disagree")),
        };
        Ok(run_trunk(tape, pv, &self.trunk, self.config.n_heads, spec, x, h, cond, &spec.attention))
    }

    /// Learnable prior on the tape from condition coordinates.
    pub fn prior_on_tape(&self, tape: &mut Tape<F>, pv: &[Var], spec: &BatchSpec<F>, x_cond: Var) -> Result<PriorOutput> {
        let prior = self
            .prior
            .as_ref()
            .ok_or_else(|| GeoError::invalid("model has no prior subnetwork"))?;
        let (Some(layout), Some(attn)) = (&spec.prior, &spec.prior_attention) else {
            return Err(GeoError::invalid("prior needs at least one condition frame"));
        };
        let t_len = self.config.prior_frames.unwrap_or(0);
        if t_len != spec.frames {
            return Err(GeoError::dim(format!(
                "prior built for T = {t_len}, batch has T = {}",
                spec.frames
            )));
        }
        let hc = self.embed_inputs(tape, pv, &prior.trunk, spec, true);
        // The prior trunk treats the condition frames as its own sequence.
        let inner = BatchSpec {
            batch: spec.batch,
            nodes: spec.nodes,
            frames: spec.cond_frames,
            cond_frames: 0,
            features: Mat::zeros(0, 0),
            target_node: spec.cond_node.clone(),
            cond_node: Arc::from(Vec::new()),
            target_batch: spec.cond_batch.clone(),
            cond_batch: Arc::from(Vec::new()),
            step_embedding: None,
            target_graph: spec.cond_graph.clone(),
            cond_graph: FrameGraph { src: Arc::from(Vec::new()), dst: Arc::from(Vec::new()) },
            attention: attn.clone(),
            prior_attention: None,
            prior: None,
        };
        let out = run_trunk(tape, pv, &prior.trunk, self.config.n_heads, &inner, x_cond, hc, None, attn);
        let x_hat = out.x;
        let head = prior.head.forward(tape, pv, out.h);
        let w_full = tape.matmul(head, pv[prior.gamma.0]);
        let last = tape.gather(x_hat, layout.last_for_cond.clone());
        let diff = tape.sub(x_hat, last);
        let base = tape.gather(x_hat, layout.last_for_target.clone());
        let w = tape.gather_elems(w_full, layout.pair_weight.clone());
        let dg = tape.gather(diff, layout.pair_cond.clone());
        let contrib = tape.mul_heads(dg, w);
        let mixed = tape.scatter(contrib, layout.pair_target.clone(), spec.target_rows());
        let anchor = tape.add(base, mixed);
        Ok(PriorOutput { anchor, x_hat, head })
    }

    fn single_spec(
        &self,
        graph: &NodeGraph<F>,
        frames: usize,
        tau: Option<usize>,
        cond: Option<&Condition<F>>,
    ) -> Result<BatchSpec<F>> {
        let taus = tau.map(|t| vec![t]);
        let cond_times = cond.map(|c| c.times.clone()).unwrap_or_default();
        BatchSpec::new(&[graph], frames, None, &cond_times, taus.as_deref(), self.config.time_emb_dim)
    }

    fn check_coords(&self, x: &Coords<F>, graph: &NodeGraph<F>) -> Result<()> {
        if x.nodes != graph.nodes() {
            return Err(GeoError::dim(format!("{} nodes in coordinates, {} in graph", x.nodes, graph.nodes())));
        }
        if graph.features.cols != self.config.feature_dim {
            return Err(GeoError::dim("node feature width differs from model config"));
        }
        Ok(())
    }

    /// Full network pass on one trajectory: returns updated coordinates and
    /// the per-frame invariant features (`T·N × hidden`).
    pub fn forward(
        &self,
        x: &Coords<F>,
        graph: &NodeGraph<F>,
        tau: Option<usize>,
        cond: Option<&Condition<F>>,
    ) -> Result<(Coords<F>, Mat<F>)> {
        self.check_coords(x, graph)?;
        if let Some(c) = cond {
            if c.coords.nodes != x.nodes || c.coords.dim != x.dim {
                return Err(GeoError::dim("condition and target differ in N or D"));
            }
        }
        let spec = self.single_spec(graph, x.frames, tau, cond)?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let xv = tape.constant(x.to_mat());
        let xc = cond.map(|c| tape.constant(c.coords.to_mat()));
        let out = self.trunk_on_tape(&mut tape, &pv, &spec, xv, xc)?;
        let coords = Coords::from_vec(x.frames, x.nodes, x.dim, tape.value(out.x).data.clone())?;
        check_finite(&coords.data)?;
        Ok((coords, tape.value(out.h).clone()))
    }

    /// `P(f(x) − x)`: SO(D)-equivariant, translation-invariant, zero CoM.
    pub fn eps_uncond(&self, x: &Coords<F>, graph: &NodeGraph<F>, tau: usize) -> Result<SubspaceNoise<F>> {
        let (out, _) = self.forward(x, graph, Some(tau), None)?;
        let mut diff = out;
        diff.add_scaled(x, -F::one());
        Ok(SubspaceNoise { values: project_zero_com(&diff) })
    }

    /// `f(x, x_c) − x`: rotation-equivariant, invariant to joint translation.
    pub fn eps_cond(&self, x: &Coords<F>, cond: &Condition<F>, graph: &NodeGraph<F>, tau: usize) -> Result<Coords<F>> {
        let (out, _) = self.forward(x, graph, Some(tau), Some(cond))?;
        let mut diff = out;
        diff.add_scaled(x, -F::one());
        Ok(diff)
    }

    /// Anchor and mixing weights of the learnable prior for one condition.
    pub fn build_equivariant_prior(&self, cond: &Condition<F>, graph: &NodeGraph<F>) -> Result<EquiPrior<F>> {
        self.check_coords(&cond.coords, graph)?;
        let prior = self
            .prior
            .as_ref()
            .ok_or_else(|| GeoError::invalid("model has no prior subnetwork"))?;
        let t_len = self.config.prior_frames.unwrap_or(0);
        let spec = self.single_spec(graph, t_len, None, Some(cond))?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let xc = tape.constant(cond.coords.to_mat());
        let out = self.prior_on_tape(&mut tape, &pv, &spec, xc)?;
        let (tc, n, d) = (cond.coords.frames, cond.coords.nodes, cond.coords.dim);
        let x_hat = Coords::from_vec(tc, n, d, tape.value(out.x_hat).data.clone())?;
        let node_weights = Mat::from_vec(tc, n, tape.value(out.head).data.clone());
        let gamma = self.params.get(prior.gamma).data.clone();
        let mut eq = prior_from_parts(&x_hat, &node_weights, &gamma)?;
        // the anchor reported is the one the diffusion actually uses
        eq.anchor = Coords::from_vec(t_len, n, d, tape.value(out.anchor).data.clone())?;
        Ok(eq)
    }

    /// One EGCL layer of block `layer` applied to every frame of `x`; `h` is `T·N × hidden`.
    pub fn egcl_forward(
        &self,
        layer: usize,
        x: &Coords<F>,
        h: &Mat<F>,
        edges: &[(usize, usize)],
    ) -> Result<(Coords<F>, Mat<F>)> {
        let block = self.block(layer)?;
        self.check_hidden(x, h)?;
        let graph = NodeGraph::<F>::new(Mat::zeros(x.nodes, 0), edges.to_vec())?;
        let fg = FrameGraph::new(&[&graph], x.frames, x.nodes);
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let xv = tape.constant(x.to_mat());
        let hv = tape.constant(h.clone());
        let (xo, ho) = egcl(&mut tape, &pv, &block.egcl, xv, hv, &fg);
        let coords = Coords::from_vec(x.frames, x.nodes, x.dim, tape.value(xo).data.clone())?;
        check_finite(&coords.data)?;
        Ok((coords, tape.value(ho).clone()))
    }

    /// Temporal attention of block `layer` along each node's frames.
    pub fn temporal_attention_forward(&self, layer: usize, x: &Coords<F>, h: &Mat<F>) -> Result<AttentionOutput<F>> {
        self.attention_impl(layer, x, h, None, None)
    }

    /// Temporal attention with condition frames joined into the softmax.
    pub fn cross_attention_extend(
        &self,
        layer: usize,
        x: &Coords<F>,
        h: &Mat<F>,
        cond: &Condition<F>,
        h_cond: &Mat<F>,
    ) -> Result<AttentionOutput<F>> {
        if cond.coords.nodes != x.nodes || cond.coords.dim != x.dim {
            return Err(GeoError::dim("condition and target differ in N or D"));
        }
        self.attention_impl(layer, x, h, Some((cond, h_cond)), None)
    }

    /// Attention with explicit target timeline positions (shift-invariance checks).
    pub fn attention_with_times(
        &self,
        layer: usize,
        x: &Coords<F>,
        h: &Mat<F>,
        target_times: &[i64],
        cond: Option<(&Condition<F>, &Mat<F>)>,
    ) -> Result<AttentionOutput<F>> {
        self.attention_impl(layer, x, h, cond, Some(target_times))
    }

    fn attention_impl(
        &self,
        layer: usize,
        x: &Coords<F>,
        h: &Mat<F>,
        cond: Option<(&Condition<F>, &Mat<F>)>,
        target_times: Option<&[i64]>,
    ) -> Result<AttentionOutput<F>> {
        let block = self.block(layer)?;
        self.check_hidden(x, h)?;
        let default_times: Vec<i64> = (0..x.frames as i64).collect();
        let tt = target_times.unwrap_or(&default_times);
        let ct = cond.map(|(c, _)| c.times.clone()).unwrap_or_default();
        let layout = AttentionLayout::new(1, x.nodes, tt, &ct);
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let xv = tape.constant(x.to_mat());
        let hv = tape.constant(h.clone());
        let cv = match cond {
            Some((c, hc)) => {
                if hc.rows != c.coords.frames * c.coords.nodes || hc.cols != h.cols {
                    return Err(GeoError::dim("condition features must be T_c·N × hidden"));
                }
                Some((tape.constant(c.coords.to_mat()), tape.constant(hc.clone())))
            }
            None => None,
        };
        let psi = tape.constant(layout.psi_table(self.config.hidden_dim));
        let (xo, ho, a) = attention(&mut tape, &pv, &block.attention, self.config.n_heads, xv, hv, cv, &layout, psi);
        let coords = Coords::from_vec(x.frames, x.nodes, x.dim, tape.value(xo).data.clone())?;
        Ok(AttentionOutput {
            coords,
            features: tape.value(ho).clone(),
            weights: tape.value(a).clone(),
            keys_per_query: layout.keys_per_query,
        })
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        self.trunk
            .blocks
            .get(layer)
            .ok_or_else(|| GeoError::invalid(format!("no block {layer} in a {}-layer model", self.trunk.blocks.len())))
    }

    fn check_hidden(&self, x: &Coords<F>, h: &Mat<F>) -> Result<()> {
        if h.rows != x.frames * x.nodes || h.cols != self.config.hidden_dim {
            return Err(GeoError::dim("features must be T·N × hidden_dim"));
        }
        Ok(())
    }
}

/// Result of a standalone attention layer call.
#[derive(Clone, Debug)]
pub struct AttentionOutput<F> {
    pub coords: Coords<F>,
    pub features: Mat<F>,
    /// `(T·N·K) × heads`, grouped by query `(t, i)` with `K = T + T_c` keys each:
    /// the target frames first, then the condition frames.
    pub weights: Mat<F>,
    pub keys_per_query: usize,
}

fn check_finite<F: Real>(v: &[F]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GeoError::Numerical("network produced non-finite coordinates".into()))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_trunk<F: Real>(
    tape: &mut Tape<F>,
    pv: &[Var],
    trunk: &Trunk,
    heads: usize,
    spec: &BatchSpec<F>,
    mut x: Var,
    mut h: Var,
    mut cond: Option<(Var, Var)>,
    layout: &AttentionLayout,
) -> TrunkOutput {
    let mut attn = Vec::with_capacity(trunk.blocks.len());
    if trunk.blocks.is_empty() {
        return TrunkOutput { x, h, attention: attn };
    }
    let hidden = tape.shape(h).1;
    let psi = tape.constant(layout.psi_table(hidden));
    for block in &trunk.blocks {
        let (x1, h1) = egcl(tape, pv, &block.egcl, x, h, &spec.target_graph);
        if let Some((xc, hc)) = cond {
            cond = Some(egcl(tape, pv, &block.egcl, xc, hc, &spec.cond_graph));
        }
        let (x2, h2, a) = attention(tape, pv, &block.attention, heads, x1, h1, cond, layout, psi);
        x = x2;
        h = h2;
        attn.push(a);
    }
    TrunkOutput { x, h, attention: attn }
}

fn egcl<F: Real>(tape: &mut Tape<F>, pv: &[Var], p: &EgclParams, x: Var, h: Var, g: &FrameGraph) -> (Var, Var) {
    let rows = tape.shape(x).0;
    let hi = tape.gather(h, g.src.clone());
    let hj = tape.gather(h, g.dst.clone());
    let xi = tape.gather(x, g.src.clone());
    let xj = tape.gather(x, g.dst.clone());
    let d = tape.sub(xi, xj);
    let d2 = tape.mul(d, d);
    let d2 = tape.sum_heads(d2, 1);
    let dist = tape.sqrt_eps(d2);
    let m_in = tape.concat(&[hi, hj, dist]);
    let m = p.phi_m.forward(tape, pv, m_in);
    let agg = tape.scatter(m, g.src.clone(), rows);
    let h_in = tape.concat(&[h, agg]);
    let h_new = p.phi_h.forward(tape, pv, h_in);
    let gate = p.phi_x.forward(tape, pv, m);
    let shift = tape.mul_heads(d, gate);
    let shift = tape.scatter(shift, g.src.clone(), rows);
    let x_new = tape.add(x, shift);
    (x_new, h_new)
}

#[allow(clippy::too_many_arguments)]
fn attention<F: Real>(
    tape: &mut Tape<F>,
    pv: &[Var],
    p: &AttentionParams,
    heads: usize,
    x: Var,
    h: Var,
    cond: Option<(Var, Var)>,
    layout: &AttentionLayout,
    psi: Var,
) -> (Var, Var, Var) {
    let (xs, hs) = match cond {
        Some((xc, hc)) => (tape.vstack(x, xc), tape.vstack(h, hc)),
        None => (x, h),
    };
    let q = p.phi_q.forward(tape, pv, h);
    let kb = p.phi_k.forward(tape, pv, hs);
    let vb = p.phi_v.forward(tape, pv, hs);
    let psi_p = tape.gather(psi, layout.pair_disp.clone());
    let qp = tape.gather(q, layout.pair_query.clone());
    let kp = tape.gather(kb, layout.pair_key.clone());
    let kp = tape.add(kp, psi_p);
    let vp = tape.gather(vb, layout.pair_key.clone());
    let vp = tape.add(vp, psi_p);
    let qk = tape.mul(qp, kp);
    let score = tape.sum_heads(qk, heads);
    let a = tape.group_softmax(score, layout.keys_per_query);
    let weighted = tape.mul_heads(vp, a);
    let upd = tape.scatter(weighted, layout.pair_query.clone(), layout.target_rows);
    let h_new = tape.add(h, upd);
    let gate = p.phi_x.forward(tape, pv, vp);
    let a_bar = if heads > 1 { tape.mean_cols(a) } else { a };
    let coef = tape.mul(a_bar, gate);
    let xq = tape.gather(xs, layout.pair_query.clone());
    let xk = tape.gather(xs, layout.pair_key.clone());
    let dx = tape.sub(xq, xk);
    let shift = tape.mul_heads(dx, coef);
    let shift = tape.scatter(shift, layout.pair_query.clone(), layout.target_rows);
    let x_new = tape.add(x, shift);
    (x_new, h_new, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{relative_deviation, sample_gaussian, RigidMotion};

    fn tiny(prior: Option<usize>) -> EgtnConfig {
        EgtnConfig {
            n_layers: 2,
            hidden_dim: 8,
            time_emb_dim: 4,
            n_heads: 1,
            use_cross_attention: prior.is_some(),
            feature_dim: 1,
            mlp_depth: 2,
            prior_layers: 2,
            prior_frames: prior,
            prior_mode: PriorMode::Learned,
        }
    }

    fn graph(n: usize) -> NodeGraph<f64> {
        let feats = Mat::from_vec(n, 1, (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        NodeGraph::complete(feats)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sinusoid_closed_form() {
        let e = sinusoidal_embedding(1.0, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = sinusoidal_embedding(0.0, 6).unwrap();
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(sinusoidal_embedding(7.0, 8).unwrap(), sinusoidal_embedding(7.0, 8).unwrap());
        assert!(sinusoidal_embedding(1.0, 3).is_err());
    }

    #[test]
    fn gates_start_at_identity() {
        let m = EgtnModel::<f64>::new(tiny(None), 1).unwrap();
        let x: Coords<f64> = sample_gaussian(3, 4, 3, &mut rng(2));
        let h = Mat::from_vec(12, 8, (0..96).map(|i| (i as f64 * 0.1).sin()).collect());
        let (xe, _) = m.egcl_forward(0, &x, &h, &graph(4).edges).unwrap();
        assert_eq!(xe, x);
        let eps = m.eps_uncond(&x, &graph(4), 5).unwrap();
        assert!(eps.values.max_abs() == 0.0);
    }

    #[test]
    fn isolated_node_keeps_coordinates() {
        let mut m = EgtnModel::<f64>::new(tiny(None), 1).unwrap();
        m.randomize(0.5, 3);
        let x: Coords<f64> = sample_gaussian(1, 3, 3, &mut rng(4));
        let h = Mat::filled(3, 8, 0.2);
        // node 2 has no neighbours
        let (xe, he) = m.egcl_forward(0, &x, &h, &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(xe.point(0, 2), x.point(0, 2));
        assert_ne!(xe.point(0, 0), x.point(0, 0));
        assert!(he.row(2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_frame_attention_leaves_coordinates() {
        let mut m = EgtnModel::<f64>::new(tiny(None), 1).unwrap();
        m.randomize(0.5, 5);
        let x: Coords<f64> = sample_gaussian(1, 3, 3, &mut rng(6));
        let h = Mat::filled(3, 8, 0.3);
        let out = m.temporal_attention_forward(0, &x, &h).unwrap();
        assert_eq!(out.coords, x);
        assert!(out.weights.data.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn empty_condition_reduces_to_self_attention() {
        let mut m = EgtnModel::<f64>::new(tiny(None), 1).unwrap();
        m.randomize(0.5, 7);
        let x: Coords<f64> = sample_gaussian(4, 3, 3, &mut rng(8));
        let h = Mat::from_vec(12, 8, (0..96).map(|i| (i as f64 * 0.37).cos()).collect());
        let plain = m.temporal_attention_forward(0, &x, &h).unwrap();
        let empty = Condition { coords: Coords::zeros(0, 3, 3), times: vec![] };
        let crossed = m.cross_attention_extend(0, &x, &h, &empty, &Mat::zeros(0, 8)).unwrap();
        assert_eq!(plain.coords, crossed.coords);
        assert_eq!(plain.features, crossed.features);
    }

    #[test]
    fn prior_from_parts_reduces_to_last_frame_when_gamma_zero() {
        let xc: Coords<f64> = sample_gaussian(3, 2, 3, &mut rng(9));
        let w = Mat::filled(3, 2, 0.4);
        let p = prior_from_parts(&xc, &w, &[0.0; 5]).unwrap();
        for t in 0..5 {
            assert_eq!(p.anchor.frame(t), xc.frame(2));
        }
    }

    #[test]
    fn forward_is_equivariant_with_condition() {
        let mut m = EgtnModel::<f64>::new(tiny(Some(3)), 11).unwrap();
        m.randomize(0.4, 12);
        let mut r = rng(13);
        let x: Coords<f64> = sample_gaussian(3, 4, 3, &mut r);
        let xc = Condition::preceding(sample_gaussian(2, 4, 3, &mut r));
        let g = RigidMotion::random(3, &mut r).unwrap();
        let (y, h) = m.forward(&x, &graph(4), Some(7), Some(&xc)).unwrap();
        let gx = g.apply_coords(&x).unwrap();
        let gxc = Condition { coords: g.apply_coords(&xc.coords).unwrap(), times: xc.times.clone() };
        let (gy, gh) = m.forward(&gx, &graph(4), Some(7), Some(&gxc)).unwrap();
        let want = g.apply_coords(&y).unwrap();
        assert!(relative_deviation(&gy.data, &want.data) < 1e-8);
        assert!(relative_deviation(&gh.data, &h.data) < 1e-8);
    }
}
