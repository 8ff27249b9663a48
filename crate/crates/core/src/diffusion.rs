//! Unconditional diffusion on the zero-CoM subspace and conditional diffusion
//! about an equivariant anchor: schedules, forward kernels, objectives and
//! ancestral samplers.
//!
//! Batched tensors stack trajectories as rows `(b, t, i)`; a trajectory is a
//! contiguous group of `T·N` rows.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::egtn::{BatchSpec, Condition, EgtnModel, NodeGraph, PriorMode};
use crate::error::{GeoError, Result};
use crate::geom::{Coords, RigidMotion, SubspaceNoise};
use crate::real::Real;
use crate::tape::{center_rows, Mat, Tape, Var};

/// Per-step tables, indexed by `τ ∈ 1..=𝒯`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.n_steps() {
            return Err(GeoError::invalid(format!("step {tau} outside 1..={}", self.n_steps())));
        }
        Ok(())
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    /// `ᾱ_τ`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bar[tau - 1]
        }
    }

    pub fn sigma2(&self, tau: usize) -> f64 {
        self.sigma2[tau - 1]
    }

    pub fn lambda(&self, tau: usize) -> f64 {
        self.lambda[tau - 1]
    }

    /// Variance of the forward posterior `q(x_{τ−1} | x_τ, x_0)`.
    pub fn posterior_variance(&self, tau: usize) -> f64 {
        (1.0 - self.alpha_bar(tau - 1)) / (1.0 - self.alpha_bar(tau)) * self.beta(tau)
    }

    /// Overrides the loss weighting; `weights` has one entry per step.
    pub fn with_lambda(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_steps() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GeoError::invalid("loss weights must be finite, nonnegative, one per step"));
        }
        self.lambda = weights;
        Ok(self)
    }

    /// Overrides the reverse variances.
    pub fn with_sigma2(mut self, sigma2: Vec<f64>) -> Result<Self> {
        if sigma2.len() != self.n_steps() || sigma2.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(GeoError::invalid("reverse variances must be finite, nonnegative, one per step"));
        }
        self.sigma2 = sigma2;
        Ok(self)
    }
}

/// `β` increasing linearly from `beta_start` at `τ = 1` to `beta_end` at `τ = 𝒯`; `σ² = β`.
pub fn make_linear_schedule(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(GeoError::invalid("schedule needs at least one step"));
    }
    let ok = |b: f64| b > 0.0 && b < 1.0;
    if !ok(beta_start) || !ok(beta_end) {
        return Err(GeoError::invalid("beta endpoints must lie in (0, 1)"));
    }
    if beta_start > beta_end {
        return Err(GeoError::invalid(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}; the schedule must increase"
        )));
    }
    let beta: Vec<f64> = if n_steps == 1 {
        vec![beta_start]
    } else {
        (0..n_steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (n_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { sigma2: beta.clone(), lambda: vec![1.0; n_steps], beta, alpha, alpha_bar })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    /// Endpoints used with short 100-step chains so that `ᾱ_𝒯` still reaches the noise regime.
    pub fn short() -> Self {
        Self { n_steps: 100, beta_start: 1e-3, beta_end: 0.2 }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.n_steps, self.beta_start, self.beta_end)
    }
}

fn mix<F: Real>(x0: &Coords<F>, anchor: Option<&Coords<F>>, alpha_bar: f64, eps: &Coords<F>) -> Result<Coords<F>> {
    if !x0.same_shape(eps) || anchor.is_some_and(|a| !a.same_shape(x0)) {
        return Err(GeoError::dim("forward kernel inputs differ in shape"));
    }
    let sa = F::lit(alpha_bar.sqrt());
    let sn = F::lit((1.0 - alpha_bar).sqrt());
    let mut out = x0.clone();
    for (k, o) in out.data.iter_mut().enumerate() {
        let r = anchor.map_or(F::zero(), |a| a.data[k]);
        *o = sa * (x0.data[k] - r) + r + sn * eps.data[k];
    }
    Ok(out)
}

/// `√ᾱ_τ x̃₀ + √(1−ᾱ_τ) ε̃`; stays in the subspace when both inputs do.
pub fn q_sample_uncond<F: Real>(
    x0: &Coords<F>,
    tau: usize,
    eps: &SubspaceNoise<F>,
    schedule: &NoiseSchedule,
) -> Result<Coords<F>> {
    schedule.check_step(tau)?;
    mix(x0, None, schedule.alpha_bar(tau), &eps.values)
}

/// `√ᾱ_τ (x₀ − x_r) + x_r + √(1−ᾱ_τ) ε`.
pub fn q_sample_cond<F: Real>(
    x0: &Coords<F>,
    anchor: &Coords<F>,
    tau: usize,
    eps: &Coords<F>,
    schedule: &NoiseSchedule,
) -> Result<Coords<F>> {
    schedule.check_step(tau)?;
    mix(x0, Some(anchor), schedule.alpha_bar(tau), eps)
}

/// One training example: a target window and, for conditional training, its condition.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a, F> {
    pub graph: &'a NodeGraph<F>,
    pub target: &'a Coords<F>,
    pub cond: Option<&'a Condition<F>>,
}

/// Diffusion steps and noise for one batch, kept separate so a loss can be
/// re-evaluated at perturbed parameters with identical randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<F> {
    pub taus: Vec<usize>,
    /// Stacked `(b, t, i)` rows.
    pub eps: Mat<F>,
}

/// Uniform steps and standard normal noise; `subspace` projects each trajectory's noise.
pub fn draw_noise<F: Real, R: Rng + ?Sized>(
    examples: &[Example<'_, F>],
    schedule: &NoiseSchedule,
    subspace: bool,
    rng: &mut R,
) -> Result<NoiseDraw<F>> {
    let (t, n, d) = batch_shape(examples)?;
    let taus = (0..examples.len()).map(|_| rng.random_range(1..=schedule.n_steps())).collect();
    let mut eps = gaussian_mat(examples.len() * t * n, d, rng);
    if subspace {
        eps = center_rows(&eps, t * n);
    }
    Ok(NoiseDraw { taus, eps })
}

fn gaussian_mat<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<F> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z)
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

fn batch_shape<F: Real>(examples: &[Example<'_, F>]) -> Result<(usize, usize, usize)> {
    let first = examples.first().ok_or_else(|| GeoError::invalid("empty batch"))?;
    let (t, n, d) = (first.target.frames, first.target.nodes, first.target.dim);
    for e in examples {
        if (e.target.frames, e.target.nodes, e.target.dim) != (t, n, d) || e.graph.nodes() != n {
            return Err(GeoError::dim("batch examples differ in T, N or D"));
        }
    }
    Ok((t, n, d))
}

/// Stacks trajectories of equal shape into `(b, t, i)` rows.
pub fn stack_coords<F: Real>(parts: &[&Coords<F>]) -> Mat<F> {
    let d = parts.first().map_or(0, |c| c.dim);
    let data: Vec<F> = parts.iter().flat_map(|c| c.data.iter().copied()).collect();
    Mat::from_vec(data.len() / d.max(1), d, data)
}

/// Inverse of [`stack_coords`].
pub fn split_coords<F: Real>(m: &Mat<F>, frames: usize, nodes: usize) -> Result<Vec<Coords<F>>> {
    let per = frames * nodes * m.cols;
    if per == 0 || !m.data.len().is_multiple_of(per) {
        return Err(GeoError::dim("row count is not a whole number of trajectories"));
    }
    m.data
        .chunks(per)
        .map(|c| Coords::from_vec(frames, nodes, m.cols, c.to_vec()))
        .collect()
}

/// Scalar loss and per-parameter gradients (zeros where a parameter is unused).
#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub loss: F,
    pub grads: Vec<Vec<F>>,
}

fn finish_loss<F: Real>(
    model: &EgtnModel<F>,
    tape: &mut Tape<F>,
    pred: Var,
    eps: &Mat<F>,
    taus: &[usize],
    group: usize,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    let target = tape.constant(eps.clone());
    let r = tape.sub(pred, target);
    let sq = tape.mul(r, r);
    let sq = if taus.iter().any(|&t| schedule.lambda(t) != 1.0) {
        let w: Vec<F> = taus
            .iter()
            .flat_map(|&t| std::iter::repeat_n(F::lit(schedule.lambda(t)), group))
            .collect();
        let w = tape.constant(Mat::from_vec(w.len(), 1, w));
        tape.mul_heads(sq, w)
    } else {
        sq
    };
    let total = tape.sum_all(sq);
    let loss = tape.scale(total, F::one() / F::from_usize(eps.data.len()).unwrap());
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(GeoError::Numerical(format!("non-finite loss {value}")));
    }
    let g = tape.backward(loss);
    let grads = model
        .params
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(i).map_or_else(|| vec![F::zero(); p.value.data.len()], <[F]>::to_vec))
        .collect();
    Ok(LossOutput { loss: value, grads })
}

fn check_draw<F: Real>(draw: &NoiseDraw<F>, examples: &[Example<'_, F>], t: usize, n: usize, d: usize, s: &NoiseSchedule) -> Result<()> {
    if draw.taus.len() != examples.len() || draw.eps.rows != examples.len() * t * n || draw.eps.cols != d {
        return Err(GeoError::dim("noise draw does not match the batch"));
    }
    draw.taus.iter().try_for_each(|&tau| s.check_step(tau))
}

/// Mean of `‖ε̃ − P(f(x̃_τ) − x̃_τ)‖²` over batch and coordinates, with exact gradients.
pub fn loss_uncond_with<F: Real>(
    model: &EgtnModel<F>,
    examples: &[Example<'_, F>],
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    let (t, n, d) = batch_shape(examples)?;
    check_draw(draw, examples, t, n, d, schedule)?;
    let group = t * n;
    let mut xt = Mat::zeros(examples.len() * group, d);
    for (b, e) in examples.iter().enumerate() {
        let x0 = center_rows(&e.target.to_mat(), group);
        let ab = schedule.alpha_bar(draw.taus[b]);
        let (sa, sn) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        let off = b * group * d;
        for k in 0..group * d {
            xt.data[off + k] = sa * x0.data[k] + sn * draw.eps.data[off + k];
        }
    }
    let graphs: Vec<&NodeGraph<F>> = examples.iter().map(|e| e.graph).collect();
    let spec = BatchSpec::new(&graphs, t, None, &[], Some(&draw.taus), model.config.time_emb_dim)?;
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let xv = tape.constant(xt);
    let out = model.trunk_on_tape(&mut tape, &pv, &spec, xv, None)?;
    let diff = tape.sub(out.x, xv);
    let pred = tape.center_groups(diff, group);
    finish_loss(model, &mut tape, pred, &draw.eps, &draw.taus, group, schedule)
}

pub fn loss_uncond<F: Real, R: Rng + ?Sized>(
    model: &EgtnModel<F>,
    examples: &[Example<'_, F>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutput<F>> {
    let draw = draw_noise(examples, schedule, true, rng)?;
    loss_uncond_with(model, examples, &draw, schedule)
}

fn cond_times<F: Real>(conds: &[&Condition<F>], n: usize, d: usize) -> Result<Vec<i64>> {
    let first = conds.first().ok_or_else(|| GeoError::invalid("empty batch"))?;
    if first.frames() == 0 {
        return Err(GeoError::invalid("conditioning needs at least one frame"));
    }
    for c in conds {
        if c.times != first.times || c.coords.nodes != n || c.coords.dim != d {
            return Err(GeoError::dim("conditions in a batch must share times, N and D"));
        }
        if c.times.len() != c.frames() {
            return Err(GeoError::dim("one time index per condition frame expected"));
        }
    }
    Ok(first.times.clone())
}

/// Anchor `x_r` on the tape for the model's prior mode.
fn anchor_on_tape<F: Real>(
    model: &EgtnModel<F>,
    tape: &mut Tape<F>,
    pv: &[Var],
    spec: &BatchSpec<F>,
    xc: Var,
) -> Result<Var> {
    match model.config.prior_mode {
        PriorMode::Learned => Ok(model.prior_on_tape(tape, pv, spec, xc)?.anchor),
        PriorMode::LastFrame => {
            let rows = spec.last_cond_rows().ok_or_else(|| GeoError::invalid("no condition frames"))?;
            Ok(tape.gather(xc, rows))
        }
        PriorMode::CenterOfMass => {
            let xcm = tape.value(xc).clone();
            let d = xcm.cols;
            let per_c = spec.cond_frames * spec.nodes;
            let per_t = spec.frames * spec.nodes;
            let mut out = Mat::zeros(spec.target_rows(), d);
            for b in 0..spec.batch {
                let mut mean = vec![F::zero(); d];
                for r in b * per_c..(b + 1) * per_c {
                    for (m, &v) in mean.iter_mut().zip(xcm.row(r)) {
                        *m += v;
                    }
                }
                let inv = F::one() / F::from_usize(per_c).unwrap();
                for r in b * per_t..(b + 1) * per_t {
                    for (o, m) in out.row_mut(r).iter_mut().zip(&mean) {
                        *o = *m * inv;
                    }
                }
            }
            Ok(tape.constant(out))
        }
    }
}

/// Mean of `‖ε − (f(x_τ, x_c) − x_τ)‖²`, with `x_τ` built from the current
/// prior so gradients reach the denoiser, the prior trunk and `γ`.
pub fn loss_cond_with<F: Real>(
    model: &EgtnModel<F>,
    examples: &[Example<'_, F>],
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    let (t, n, d) = batch_shape(examples)?;
    check_draw(draw, examples, t, n, d, schedule)?;
    let conds: Vec<&Condition<F>> = examples
        .iter()
        .map(|e| e.cond.ok_or_else(|| GeoError::invalid("conditional loss needs conditions")))
        .collect::<Result<_>>()?;
    let times = cond_times(&conds, n, d)?;
    let group = t * n;
    let graphs: Vec<&NodeGraph<F>> = examples.iter().map(|e| e.graph).collect();
    let spec = BatchSpec::new(&graphs, t, None, &times, Some(&draw.taus), model.config.time_emb_dim)?;
    let targets: Vec<&Coords<F>> = examples.iter().map(|e| e.target).collect();
    let cond_coords: Vec<&Coords<F>> = conds.iter().map(|c| &c.coords).collect();

    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let xc = tape.constant(stack_coords(&cond_coords));
    let anchor = anchor_on_tape(model, &mut tape, &pv, &spec, xc)?;
    let x0 = tape.constant(stack_coords(&targets));
    let mut coef = Vec::with_capacity(examples.len() * group);
    let mut noise = draw.eps.clone();
    for (b, &tau) in draw.taus.iter().enumerate() {
        let ab = schedule.alpha_bar(tau);
        coef.extend(std::iter::repeat_n(F::lit(ab.sqrt()), group));
        let sn = F::lit((1.0 - ab).sqrt());
        for v in &mut noise.data[b * group * d..(b + 1) * group * d] {
            *v *= sn;
        }
    }
    let coef = tape.constant(Mat::from_vec(coef.len(), 1, coef));
    let centered = tape.sub(x0, anchor);
    let scaled = tape.mul_heads(centered, coef);
    let noise = tape.constant(noise);
    let xt = tape.add(scaled, anchor);
    let xt = tape.add(xt, noise);
    let out = model.trunk_on_tape(&mut tape, &pv, &spec, xt, Some(xc))?;
    let pred = tape.sub(out.x, xt);
    finish_loss(model, &mut tape, pred, &draw.eps, &draw.taus, group, schedule)
}

pub fn loss_cond<F: Real, R: Rng + ?Sized>(
    model: &EgtnModel<F>,
    examples: &[Example<'_, F>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutput<F>> {
    let draw = draw_noise(examples, schedule, false, rng)?;
    loss_cond_with(model, examples, &draw, schedule)
}

/// Source of standard normal draws for the samplers.
pub trait NoiseSource<F> {
    /// `rows × dim` i.i.d. standard normal values, one point per row.
    fn normal(&mut self, rows: usize, dim: usize) -> Mat<F>;
}

/// Draws from an rng.
pub struct RngNoise<R>(pub R);

impl<F: Real, R: Rng> NoiseSource<F> for RngNoise<R> {
    fn normal(&mut self, rows: usize, dim: usize) -> Mat<F> {
        gaussian_mat(rows, dim, &mut self.0)
    }
}

/// Wraps another source and rotates every drawn point (translation ignored).
pub struct RotatedNoise<S> {
    pub inner: S,
    pub motion: RigidMotion,
}

impl<F: Real, S: NoiseSource<F>> NoiseSource<F> for RotatedNoise<S> {
    fn normal(&mut self, rows: usize, dim: usize) -> Mat<F> {
        let mut m = self.inner.normal(rows, dim);
        for r in 0..rows {
            let p: Vec<f64> = m.row(r).iter().map(|v| v.to_f64_lossy()).collect();
            for (o, v) in m.row_mut(r).iter_mut().zip(self.motion.rotate_point(&p)) {
                *o = F::lit(v);
            }
        }
        m
    }
}

/// Noise prediction for a whole stacked batch at one diffusion step.
pub trait EpsPredictor<F> {
    fn predict(&mut self, x: &Mat<F>, tau: usize) -> Result<Mat<F>>;
}

/// Network-backed predictor for a fixed batch layout.
pub struct ModelEps<'m, F> {
    model: &'m EgtnModel<F>,
    spec: BatchSpec<F>,
    cond: Option<Mat<F>>,
    group: usize,
    pub calls: usize,
}

impl<'m, F: Real> ModelEps<'m, F> {
    pub fn uncond(model: &'m EgtnModel<F>, graphs: &[&NodeGraph<F>], frames: usize) -> Result<Self> {
        let spec = BatchSpec::new(graphs, frames, None, &[], None, model.config.time_emb_dim)?;
        let group = frames * spec.nodes;
        Ok(Self { model, spec, cond: None, group, calls: 0 })
    }

    pub fn cond(
        model: &'m EgtnModel<F>,
        graphs: &[&NodeGraph<F>],
        conds: &[&Condition<F>],
        frames: usize,
    ) -> Result<Self> {
        if graphs.len() != conds.len() {
            return Err(GeoError::dim("one condition per graph expected"));
        }
        let n = graphs.first().map_or(0, |g| g.nodes());
        let d = conds.first().map_or(0, |c| c.coords.dim);
        let times = cond_times(conds, n, d)?;
        let spec = BatchSpec::new(graphs, frames, None, &times, None, model.config.time_emb_dim)?;
        let cc: Vec<&Coords<F>> = conds.iter().map(|c| &c.coords).collect();
        Ok(Self { model, spec, cond: Some(stack_coords(&cc)), group: frames * n, calls: 0 })
    }

    /// Prior anchor rows for a conditional batch.
    pub fn anchor(&self) -> Result<Mat<F>> {
        let cond = self.cond.as_ref().ok_or_else(|| GeoError::invalid("unconditional batch has no anchor"))?;
        let mut tape = Tape::new();
        let pv = self.model.params.bind(&mut tape);
        let xc = tape.constant(cond.clone());
        let a = anchor_on_tape(self.model, &mut tape, &pv, &self.spec, xc)?;
        Ok(tape.value(a).clone())
    }

    pub fn group(&self) -> usize {
        self.group
    }
}

impl<F: Real> EpsPredictor<F> for ModelEps<'_, F> {
    fn predict(&mut self, x: &Mat<F>, tau: usize) -> Result<Mat<F>> {
        self.calls += 1;
        self.spec.set_steps(&vec![tau; self.spec.batch], self.model.config.time_emb_dim)?;
        let mut tape = Tape::new();
        let pv = self.model.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let xc = self.cond.as_ref().map(|c| tape.constant(c.clone()));
        let out = self.model.trunk_on_tape(&mut tape, &pv, &self.spec, xv, xc)?;
        let diff = tape.sub(out.x, xv);
        let eps = if self.cond.is_none() {
            center_rows(tape.value(diff), self.group)
        } else {
            tape.value(diff).clone()
        };
        if eps.data.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Numerical(format!("non-finite noise prediction at step {tau}")));
        }
        Ok(eps)
    }
}

/// Ancestral reverse chain from step `from` down to 0.
///
/// With an anchor the update is taken about it; without one every draw and
/// iterate is projected per `group` rows. `observe` sees every iterate with
/// its step index (`from` for the start, 0 for the result).
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain<F: Real, P: EpsPredictor<F> + ?Sized, S: NoiseSource<F> + ?Sized>(
    pred: &mut P,
    mut x: Mat<F>,
    anchor: Option<&Mat<F>>,
    group: usize,
    from: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
    observe: &mut dyn FnMut(usize, &Mat<F>),
) -> Result<Mat<F>> {
    if from > schedule.n_steps() {
        return Err(GeoError::invalid(format!("chain start {from} beyond {} steps", schedule.n_steps())));
    }
    if anchor.is_some_and(|a| a.rows != x.rows || a.cols != x.cols) {
        return Err(GeoError::dim("anchor shape differs from the chain state"));
    }
    observe(from, &x);
    for tau in (1..=from).rev() {
        let eps = pred.predict(&x, tau)?;
        if eps.rows != x.rows || eps.cols != x.cols {
            return Err(GeoError::dim("noise prediction shape differs from the chain state"));
        }
        let a = schedule.alpha(tau);
        let ab = schedule.alpha_bar(tau);
        let c1 = F::lit(1.0 / a.sqrt());
        let c2 = F::lit((1.0 - a) / (1.0 - ab).sqrt());
        for (k, v) in x.data.iter_mut().enumerate() {
            let base = anchor.map_or(F::zero(), |r| r.data[k]);
            *v = base + c1 * (*v - base - c2 * eps.data[k]);
        }
        if tau > 1 {
            let mut z = noise.normal(x.rows, x.cols);
            if anchor.is_none() {
                z = center_rows(&z, group);
            }
            let sigma = F::lit(schedule.sigma2(tau).sqrt());
            for (v, zv) in x.data.iter_mut().zip(&z.data) {
                *v += sigma * *zv;
            }
        }
        if anchor.is_none() {
            x = center_rows(&x, group);
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Numerical(format!("chain diverged at step {tau}")));
        }
        observe(tau - 1, &x);
    }
    Ok(x)
}

/// Subspace sampler for `batch` trajectories of `frames × nodes × dim`.
#[allow(clippy::too_many_arguments)]
pub fn sample_uncond_with<F: Real, P: EpsPredictor<F> + ?Sized, S: NoiseSource<F> + ?Sized>(
    pred: &mut P,
    batch: usize,
    frames: usize,
    nodes: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
    observe: &mut dyn FnMut(usize, &Mat<F>),
) -> Result<Mat<F>> {
    let group = frames * nodes;
    let x = center_rows(&noise.normal(batch * group, dim), group);
    reverse_chain(pred, x, None, group, schedule.n_steps(), schedule, noise, observe)
}

/// Anchored sampler starting from `x_𝒯 ~ N(x_r, I)`.
pub fn sample_cond_with<F: Real, P: EpsPredictor<F> + ?Sized, S: NoiseSource<F> + ?Sized>(
    pred: &mut P,
    anchor: &Mat<F>,
    schedule: &NoiseSchedule,
    noise: &mut S,
    observe: &mut dyn FnMut(usize, &Mat<F>),
) -> Result<Mat<F>> {
    let mut x = noise.normal(anchor.rows, anchor.cols);
    for (v, a) in x.data.iter_mut().zip(&anchor.data) {
        *v += *a;
    }
    reverse_chain(pred, x, Some(anchor), 1, schedule.n_steps(), schedule, noise, observe)
}

/// `n_samples` unconditional trajectories of `frames` frames on `graph`, `dim`-dimensional.
pub fn sample_uncond<F: Real, S: NoiseSource<F> + ?Sized>(
    model: &EgtnModel<F>,
    graph: &NodeGraph<F>,
    frames: usize,
    dim: usize,
    n_samples: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Vec<Coords<F>>> {
    if n_samples == 0 {
        return Ok(Vec::new());
    }
    let graphs = vec![graph; n_samples];
    let mut pred = ModelEps::uncond(model, &graphs, frames)?;
    let n = graph.nodes();
    let m = sample_uncond_with(&mut pred, n_samples, frames, n, dim, schedule, noise, &mut |_, _| {})?;
    split_coords(&m, frames, n)
}

/// One conditional sample per `(graph, condition)` pair.
pub fn sample_cond_batch<F: Real, S: NoiseSource<F> + ?Sized>(
    model: &EgtnModel<F>,
    graphs: &[&NodeGraph<F>],
    conds: &[&Condition<F>],
    frames: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Vec<Coords<F>>> {
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let mut pred = ModelEps::cond(model, graphs, conds, frames)?;
    let anchor = pred.anchor()?;
    let m = sample_cond_with(&mut pred, &anchor, schedule, noise, &mut |_, _| {})?;
    split_coords(&m, frames, graphs[0].nodes())
}

/// `n_samples` conditional samples for one condition.
pub fn sample_cond<F: Real, S: NoiseSource<F> + ?Sized>(
    model: &EgtnModel<F>,
    graph: &NodeGraph<F>,
    cond: &Condition<F>,
    frames: usize,
    n_samples: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Vec<Coords<F>>> {
    sample_cond_batch(model, &vec![graph; n_samples], &vec![cond; n_samples], frames, schedule, noise)
}

/// Fills `t_mid` frames between `head` and `tail`; only the generated frames are returned.
#[allow(clippy::too_many_arguments)]
pub fn interpolate<F: Real, S: NoiseSource<F> + ?Sized>(
    model: &EgtnModel<F>,
    graph: &NodeGraph<F>,
    head: &Coords<F>,
    tail: &Coords<F>,
    t_mid: usize,
    n_samples: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Vec<Coords<F>>> {
    if head.frames == 0 || tail.frames == 0 {
        return Err(GeoError::invalid("interpolation needs head and tail frames"));
    }
    let cond = Condition::bracketing(head, tail, t_mid)?;
    sample_cond(model, graph, &cond, t_mid, n_samples, schedule, noise)
}

/// Diffuses `x_init` forward to step `k` about the prior anchor and denoises back.
pub fn refine_trajectory<F: Real, S: NoiseSource<F> + ?Sized>(
    model: &EgtnModel<F>,
    graph: &NodeGraph<F>,
    x_init: &Coords<F>,
    cond: &Condition<F>,
    k: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Coords<F>> {
    if k > schedule.n_steps() {
        return Err(GeoError::invalid(format!("K = {k} exceeds {} steps", schedule.n_steps())));
    }
    if k == 0 {
        return Ok(x_init.clone());
    }
    let mut pred = ModelEps::cond(model, &[graph], &[cond], x_init.frames)?;
    let anchor = pred.anchor()?;
    let x0 = x_init.to_mat();
    let eps = noise.normal(x0.rows, x0.cols);
    let ab = schedule.alpha_bar(k);
    let (sa, sn) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    let mut x = x0.clone();
    for (kk, v) in x.data.iter_mut().enumerate() {
        let r = anchor.data[kk];
        *v = sa * (x0.data[kk] - r) + r + sn * eps.data[kk];
    }
    let out = reverse_chain(&mut pred, x, Some(&anchor), 1, k, schedule, noise, &mut |_, _| {})?;
    Coords::from_vec(x_init.frames, x_init.nodes, x_init.dim, out.data)
}

/// Chains segments of `segment_frames`: the first from `first` or the
/// unconditional model, each later one conditioned on the last `T_c` frames
/// of its predecessor.
#[allow(clippy::too_many_arguments)]
pub fn compose_long<F: Real, S: NoiseSource<F> + ?Sized>(
    uncond: Option<&EgtnModel<F>>,
    cond_model: &EgtnModel<F>,
    graph: &NodeGraph<F>,
    first: Option<Coords<F>>,
    n_segments: usize,
    segment_frames: usize,
    cond_frames: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    noise: &mut S,
) -> Result<Coords<F>> {
    if n_segments == 0 || segment_frames == 0 {
        return Err(GeoError::invalid("need at least one nonempty segment"));
    }
    if cond_frames == 0 || cond_frames > segment_frames {
        return Err(GeoError::invalid("condition length must lie in 1..=segment length"));
    }
    let first = match first {
        Some(c) => {
            if c.frames != segment_frames || c.nodes != graph.nodes() || c.dim != dim {
                return Err(GeoError::dim("first segment has the wrong shape"));
            }
            c
        }
        None => {
            let m = uncond.ok_or_else(|| GeoError::invalid("no first segment and no unconditional model"))?;
            sample_uncond(m, graph, segment_frames, dim, 1, schedule, noise)?.remove(0)
        }
    };
    let mut segments = vec![first];
    while segments.len() < n_segments {
        let prev = segments.last().expect("nonempty");
        let cond = Condition::preceding(prev.slice_frames(segment_frames - cond_frames, segment_frames));
        let next = sample_cond(cond_model, graph, &cond, segment_frames, 1, schedule, noise)?.remove(0);
        segments.push(next);
    }
    let refs: Vec<&Coords<F>> = segments.iter().collect();
    Coords::concat_frames(&refs)
}

/// Mean and variance of `q(x_{τ−1} | x_τ, x₀)` about an optional anchor.
pub fn posterior<F: Real>(
    x0: &Coords<F>,
    xt: &Coords<F>,
    anchor: Option<&Coords<F>>,
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<(Coords<f64>, f64)> {
    schedule.check_step(tau)?;
    if !x0.same_shape(xt) || anchor.is_some_and(|a| !a.same_shape(x0)) {
        return Err(GeoError::dim("posterior inputs differ in shape"));
    }
    let ab = schedule.alpha_bar(tau);
    let ab_prev = schedule.alpha_bar(tau - 1);
    let b = schedule.beta(tau);
    let c0 = ab_prev.sqrt() * b / (1.0 - ab);
    let ct = schedule.alpha(tau).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mut mean = Coords::zeros(x0.frames, x0.nodes, x0.dim);
    for (k, m) in mean.data.iter_mut().enumerate() {
        let r = anchor.map_or(0.0, |a| a.data[k].to_f64_lossy());
        *m = r + c0 * (x0.data[k].to_f64_lossy() - r) + ct * (xt.data[k].to_f64_lossy() - r);
    }
    Ok((mean, schedule.posterior_variance(tau)))
}

/// Mean of the learned reverse kernel `p_θ(x_{τ−1} | x_τ)`.
pub fn reverse_mean<F: Real>(
    xt: &Coords<F>,
    anchor: Option<&Coords<F>>,
    eps_pred: &Coords<F>,
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<Coords<f64>> {
    schedule.check_step(tau)?;
    if !xt.same_shape(eps_pred) || anchor.is_some_and(|a| !a.same_shape(xt)) {
        return Err(GeoError::dim("reverse mean inputs differ in shape"));
    }
    let a = schedule.alpha(tau);
    let c2 = (1.0 - a) / (1.0 - schedule.alpha_bar(tau)).sqrt();
    let mut mean = Coords::zeros(xt.frames, xt.nodes, xt.dim);
    for (k, m) in mean.data.iter_mut().enumerate() {
        let r = anchor.map_or(0.0, |v| v.data[k].to_f64_lossy());
        *m = r + (xt.data[k].to_f64_lossy() - r - c2 * eps_pred.data[k].to_f64_lossy()) / a.sqrt();
    }
    Ok(mean)
}

/// `KL(N(μ₁, v₁ I) ‖ N(μ₂, v₂ I))`.
pub fn kl_isotropic(mu1: &[f64], var1: f64, mu2: &[f64], var2: f64) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(GeoError::dim("means differ in length"));
    }
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(GeoError::invalid("variances must be positive"));
    }
    let k = mu1.len() as f64;
    let sq: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (k * (var1 / var2 - 1.0 - (var1 / var2).ln()) + sq / var2))
}

/// `L_{τ−1}`: KL between the forward posterior and the reverse kernel (τ ≥ 2).
pub fn kl_term<F: Real>(
    x0: &Coords<F>,
    xt: &Coords<F>,
    anchor: Option<&Coords<F>>,
    eps_pred: &Coords<F>,
    tau: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if tau < 2 {
        return Err(GeoError::invalid("the KL term needs τ ≥ 2 (posterior variance vanishes at τ = 1)"));
    }
    let (mu, var) = posterior(x0, xt, anchor, tau, schedule)?;
    let mu_theta = reverse_mean(xt, anchor, eps_pred, tau, schedule)?;
    kl_isotropic(&mu.data, var, &mu_theta.data, schedule.sigma2(tau))
}

/// `β_τ² / (2σ_τ² α_τ (1−ᾱ_τ))`.
pub fn kl_weight(tau: usize, schedule: &NoiseSchedule) -> f64 {
    let b = schedule.beta(tau);
    b * b / (2.0 * schedule.sigma2(tau) * schedule.alpha(tau) * (1.0 - schedule.alpha_bar(tau)))
}

/// Weighted noise-prediction error `kl_weight · ‖ε − ε_θ‖²`.
pub fn weighted_eps_loss<F: Real>(eps: &Coords<F>, eps_pred: &Coords<F>, tau: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_step(tau)?;
    if !eps.same_shape(eps_pred) {
        return Err(GeoError::dim("noise tensors differ in shape"));
    }
    let sq: f64 = eps
        .data
        .iter()
        .zip(&eps_pred.data)
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(kl_weight(tau, schedule) * sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_zero_com;

    struct Zero;

    impl<F: Real> EpsPredictor<F> for Zero {
        fn predict(&mut self, x: &Mat<F>, _tau: usize) -> Result<Mat<F>> {
            Ok(Mat::zeros(x.rows, x.cols))
        }
    }

    struct Fixed(Vec<f64>);

    impl NoiseSource<f64> for Fixed {
        fn normal(&mut self, rows: usize, dim: usize) -> Mat<f64> {
            Mat::from_vec(rows, dim, self.0[..rows * dim].to_vec())
        }
    }

    #[test]
    fn default_schedule_tables() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.n_steps(), 1000);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for tau in 2..=1000 {
            assert!(s.alpha_bar(tau) < s.alpha_bar(tau - 1));
            assert!(s.sigma2(tau) > 0.0);
        }
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
    }

    #[test]
    fn short_schedule_reaches_noise() {
        let s = ScheduleConfig::short().build().unwrap();
        assert!(s.alpha_bar(100) < 1e-4);
    }

    #[test]
    fn forward_kernel_hand_values() {
        // β = 0.75 gives ᾱ₁ = 0.25
        let s = make_linear_schedule(1, 0.75, 0.75).unwrap();
        let x0 = Coords::from_vec(1, 2, 1, vec![1.0, -1.0]).unwrap();
        let eps = SubspaceNoise { values: Coords::from_vec(1, 2, 1, vec![0.5, -0.5]).unwrap() };
        let xt = q_sample_uncond(&x0, 1, &eps, &s).unwrap();
        assert!((xt.data[0] - (0.5 + 0.75f64.sqrt() * 0.5)).abs() < 1e-3);
        assert!((xt.data[1] + (0.5 + 0.75f64.sqrt() * 0.5)).abs() < 1e-3);

        let x0: Coords<f64> = Coords::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let xr = Coords::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let zero = Coords::zeros(1, 1, 1);
        assert!((q_sample_cond(&x0, &xr, 1, &zero, &s).unwrap().data[0] - 1.5).abs() < 1e-12);
        assert!(q_sample_cond(&x0, &xr, 2, &zero, &s).is_err());
    }

    #[test]
    fn single_step_uncond_rollout() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        let draw = vec![0.3, -0.2, 0.5, 1.0, 0.0, -0.4];
        let mut noise = Fixed(draw.clone());
        let out = sample_uncond_with(&mut Zero, 1, 1, 2, 3, &s, &mut noise, &mut |_, _| {}).unwrap();
        let x1 = project_zero_com(&Coords::from_vec(1, 2, 3, draw).unwrap());
        for (o, x) in out.data.iter().zip(&x1.data) {
            assert!((o - x / 0.9f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_predictor_without_noise_stays_at_anchor() {
        let s = make_linear_schedule(5, 0.1, 0.3).unwrap().with_sigma2(vec![0.0; 5]).unwrap();
        let anchor = Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let mut noise = Fixed(vec![0.0; 4]);
        let mut seen = Vec::new();
        let out = sample_cond_with(&mut Zero, &anchor, &s, &mut noise, &mut |t, x: &Mat<f64>| {
            seen.push((t, x.clone()));
        })
        .unwrap();
        assert_eq!(out, anchor);
        assert_eq!(seen.len(), 6);
        assert!(seen.iter().all(|(_, x)| *x == anchor));
    }

    #[test]
    fn kl_matches_weighted_loss() {
        let s = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let mk = |seed: f64| Coords::from_vec(2, 2, 3, (0..12).map(|i| ((i as f64 + seed) * 0.77).sin()).collect()).unwrap();
        let (x0, anchor, eps, eps_pred) = (mk(0.0), mk(1.0), mk(2.0), mk(3.0));
        for tau in 2..=20 {
            let xt = q_sample_cond(&x0, &anchor, tau, &eps, &s).unwrap();
            let (mu, var) = posterior(&x0, &xt, Some(&anchor), tau, &s).unwrap();
            let base = kl_isotropic(&mu.data, var, &mu.data, s.sigma2(tau)).unwrap();
            let kl = kl_term(&x0, &xt, Some(&anchor), &eps_pred, tau, &s).unwrap();
            let w = weighted_eps_loss(&eps, &eps_pred, tau, &s).unwrap();
            assert!(((kl - base) - w).abs() < 1e-8 * w.max(1.0), "τ={tau}");
        }
    }
}
