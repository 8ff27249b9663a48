//! Trajectory containers, the zero-CoM projection, rigid motions and
//! numerical verification helpers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{GeoError, Result};
use crate::real::Real;
use crate::tape::Mat;

/// A `T×N×D` coordinate block stored frame-major, then node, then dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Coords<F> {
    pub frames: usize,
    pub nodes: usize,
    pub dim: usize,
    pub data: Vec<F>,
}

impl<F: Real> Coords<F> {
    pub fn zeros(frames: usize, nodes: usize, dim: usize) -> Self {
        Self { frames, nodes, dim, data: vec![F::zero(); frames * nodes * dim] }
    }

    pub fn from_vec(frames: usize, nodes: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != frames * nodes * dim {
            return Err(GeoError::dim(format!(
                "{} values for a {frames}x{nodes}x{dim} block",
                data.len()
            )));
        }
        Ok(Self { frames, nodes, dim, data })
    }

    #[inline]
    pub fn idx(&self, t: usize, i: usize) -> usize {
        (t * self.nodes + i) * self.dim
    }

    #[inline]
    pub fn point(&self, t: usize, i: usize) -> &[F] {
        let o = self.idx(t, i);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn point_mut(&mut self, t: usize, i: usize) -> &mut [F] {
        let o = self.idx(t, i);
        let d = self.dim;
        &mut self.data[o..o + d]
    }

    pub fn frame(&self, t: usize) -> &[F] {
        let s = self.nodes * self.dim;
        &self.data[t * s..(t + 1) * s]
    }

    /// Frames `start..end` as a new block.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.frames);
        let s = self.nodes * self.dim;
        Self {
            frames: end - start,
            nodes: self.nodes,
            dim: self.dim,
            data: self.data[start * s..end * s].to_vec(),
        }
    }

    /// Concatenates blocks along the frame axis.
    pub fn concat_frames(parts: &[&Coords<F>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| GeoError::invalid("no blocks to concatenate"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.nodes != first.nodes || p.dim != first.dim {
                return Err(GeoError::dim("blocks differ in node count or dimension"));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { frames, nodes: first.nodes, dim: first.dim, data })
    }

    /// Flattened as a `(T·N)×D` matrix.
    pub fn to_mat(&self) -> Mat<F> {
        Mat::from_vec(self.frames * self.nodes, self.dim, self.data.clone())
    }

    pub fn cast<G: Real>(&self) -> Coords<G> {
        Coords {
            frames: self.frames,
            nodes: self.nodes,
            dim: self.dim,
            data: self.data.iter().map(|&v| G::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.nodes == other.nodes && self.dim == other.dim
    }

    /// Mean over all `T·N` points.
    pub fn global_mean(&self) -> Vec<F> {
        let mut m = vec![F::zero(); self.dim];
        for p in self.data.chunks_exact(self.dim) {
            for (a, &v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        let inv = F::one() / F::from_usize(self.frames * self.nodes).unwrap();
        m.iter_mut().for_each(|a| *a *= inv);
        m
    }

    /// Per-frame centre of mass (unweighted).
    pub fn frame_com(&self, t: usize) -> Vec<F> {
        let mut m = vec![F::zero(); self.dim];
        for i in 0..self.nodes {
            for (a, &v) in m.iter_mut().zip(self.point(t, i)) {
                *a += v;
            }
        }
        let inv = F::one() / F::from_usize(self.nodes).unwrap();
        m.iter_mut().for_each(|a| *a *= inv);
        m
    }

    pub fn add_scaled(&mut self, other: &Self, s: F) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A geometric trajectory: coordinates over a fixed graph with invariant node features.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoTrajectory<F = f32> {
    pub coords: Coords<F>,
    /// `N×D_h` invariant node features.
    pub node_features: Mat<F>,
    /// Directed node pairs, no self loops.
    pub edges: Vec<(usize, usize)>,
    /// Simulated time between stored frames.
    pub dt: Option<f64>,
}

impl<F: Real> GeoTrajectory<F> {
    pub fn new(coords: Coords<F>, node_features: Mat<F>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let traj = Self { coords, node_features, edges, dt: None };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.coords;
        if c.frames == 0 || c.nodes == 0 {
            return Err(GeoError::invalid("trajectory needs at least one frame and one node"));
        }
        if self.node_features.rows != c.nodes {
            return Err(GeoError::dim(format!(
                "{} feature rows for {} nodes",
                self.node_features.rows, c.nodes
            )));
        }
        for &(a, b) in &self.edges {
            if a >= c.nodes || b >= c.nodes {
                return Err(GeoError::invalid(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(GeoError::invalid(format!("self loop on node {a}")));
            }
        }
        if !c.is_finite() {
            return Err(GeoError::Numerical("non-finite coordinates".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.coords.frames
    }

    pub fn nodes(&self) -> usize {
        self.coords.nodes
    }

    pub fn dim(&self) -> usize {
        self.coords.dim
    }

    pub fn cast<G: Real>(&self) -> GeoTrajectory<G> {
        GeoTrajectory {
            coords: self.coords.cast(),
            node_features: Mat::from_vec(
                self.node_features.rows,
                self.node_features.cols,
                self.node_features.data.iter().map(|&v| G::lit(v.to_f64_lossy())).collect(),
            ),
            edges: self.edges.clone(),
            dt: self.dt,
        }
    }
}

/// Element of the subspace with zero global centre of mass.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceNoise<F> {
    pub values: Coords<F>,
}

/// `P(x) = x − mean over all T·N points`, per dimension.
pub fn project_zero_com<F: Real>(x: &Coords<F>) -> Coords<F> {
    let mut out = x.clone();
    project_in_place(&mut out);
    out
}

pub fn project_in_place<F: Real>(x: &mut Coords<F>) {
    let m = x.global_mean();
    for p in x.data.chunks_exact_mut(x.dim) {
        for (v, &mu) in p.iter_mut().zip(&m) {
            *v -= mu;
        }
    }
}

pub fn sample_gaussian<F: Real, R: Rng + ?Sized>(
    frames: usize,
    nodes: usize,
    dim: usize,
    rng: &mut R,
) -> Coords<F> {
    let data = (0..frames * nodes * dim)
        .map(|_| F::lit(StandardNormal.sample(rng)))
        .collect();
    Coords { frames, nodes, dim, data }
}

/// Restricted Gaussian on the zero-CoM subspace: a projected i.i.d. normal draw.
pub fn sample_subspace_gaussian<F: Real, R: Rng + ?Sized>(
    frames: usize,
    nodes: usize,
    dim: usize,
    rng: &mut R,
) -> SubspaceNoise<F> {
    let mut values = sample_gaussian(frames, nodes, dim, rng);
    project_in_place(&mut values);
    SubspaceNoise { values }
}

/// Rotation plus translation acting pointwise on every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    /// Row-major `D×D`.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl RigidMotion {
    pub fn new(rotation: Vec<f64>, translation: Vec<f64>) -> Result<Self> {
        let d = translation.len();
        if rotation.len() != d * d {
            return Err(GeoError::dim("rotation is not DxD for the translation length"));
        }
        check_rotation(&rotation, d)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        Self { rotation, translation: vec![0.0; dim] }
    }

    pub fn rotation_only(rotation: Vec<f64>) -> Result<Self> {
        let d = (rotation.len() as f64).sqrt() as usize;
        Self::new(rotation, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    /// Haar rotation with translation uniform in `[-5, 5]` per axis.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let rotation = random_rotation(dim, rng)?;
        let u = Uniform::new_inclusive(-5.0, 5.0).expect("valid range");
        let translation = (0..dim).map(|_| u.sample(rng)).collect();
        Ok(Self { rotation, translation })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        let d = self.dim();
        let mut rotation = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                rotation[i * d + j] =
                    (0..d).map(|k| self.rotation[i * d + k] * other.rotation[k * d + j]).sum();
            }
        }
        let mut translation = self.rotate_point(&other.translation);
        for (t, s) in translation.iter_mut().zip(&self.translation) {
            *t += s;
        }
        RigidMotion { rotation, translation }
    }

    pub fn inverse(&self) -> RigidMotion {
        let d = self.dim();
        let mut rotation = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                rotation[i * d + j] = self.rotation[j * d + i];
            }
        }
        let inv = RigidMotion { rotation, translation: vec![0.0; d] };
        let translation = inv.rotate_point(&self.translation).into_iter().map(|v| -v).collect();
        RigidMotion { translation, ..inv }
    }

    pub fn rotate_point(&self, p: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|k| self.rotation[i * d + k] * p[k]).sum()).collect()
    }

    fn map_points<F: Real>(&self, data: &mut [F], translate: bool) {
        let d = self.dim();
        let r: Vec<F> = self.rotation.iter().map(|&v| F::lit(v)).collect();
        let tr: Vec<F> = self.translation.iter().map(|&v| F::lit(v)).collect();
        let mut tmp = vec![F::zero(); d];
        for p in data.chunks_exact_mut(d) {
            for i in 0..d {
                let mut acc = F::zero();
                for k in 0..d {
                    acc += r[i * d + k] * p[k];
                }
                tmp[i] = if translate { acc + tr[i] } else { acc };
            }
            p.copy_from_slice(&tmp);
        }
    }

    /// `R·x + r` on every point of every frame.
    pub fn apply_coords<F: Real>(&self, x: &Coords<F>) -> Result<Coords<F>> {
        if x.dim != self.dim() {
            return Err(GeoError::dim(format!("motion in {}D applied to {}D points", self.dim(), x.dim)));
        }
        let mut out = x.clone();
        self.map_points(&mut out.data, true);
        Ok(out)
    }

    /// `R·x` without the translation (used for noise and displacement fields).
    pub fn rotate_coords<F: Real>(&self, x: &Coords<F>) -> Result<Coords<F>> {
        if x.dim != self.dim() {
            return Err(GeoError::dim(format!("motion in {}D applied to {}D points", self.dim(), x.dim)));
        }
        let mut out = x.clone();
        self.map_points(&mut out.data, false);
        Ok(out)
    }
}

/// `g·x`: coordinates move, features and edges are untouched.
pub fn apply_rigid_motion<F: Real>(g: &RigidMotion, x: &GeoTrajectory<F>) -> Result<GeoTrajectory<F>> {
    Ok(GeoTrajectory { coords: g.apply_coords(&x.coords)?, ..x.clone() })
}

fn check_rotation(r: &[f64], d: usize) -> Result<()> {
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..d).map(|k| r[k * d + i] * r[k * d + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-6 {
                return Err(GeoError::invalid("rotation is not orthonormal"));
            }
        }
    }
    if (determinant(r, d) - 1.0).abs() > 1e-6 {
        return Err(GeoError::invalid("rotation determinant is not +1"));
    }
    Ok(())
}

pub fn determinant(r: &[f64], d: usize) -> f64 {
    match d {
        1 => r[0],
        2 => r[0] * r[3] - r[1] * r[2],
        3 => {
            r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
                + r[2] * (r[3] * r[7] - r[4] * r[6])
        }
        _ => panic!("determinant only implemented up to 3x3"),
    }
}

/// Haar-uniform element of SO(D), D ∈ {2, 3}.
///
/// Gram-Schmidt on a Gaussian matrix with the diagonal-sign correction gives a
/// Haar draw on O(D); flipping one column on det = −1 maps it onto SO(D).
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(2..=3).contains(&dim) {
        return Err(GeoError::invalid(format!("random rotations support D in {{2, 3}}, got {dim}")));
    }
    loop {
        // columns of a Gaussian matrix
        let mut cols: Vec<Vec<f64>> =
            (0..dim).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect();
        let mut degenerate = false;
        for j in 0..dim {
            let (done, rest) = cols.split_at_mut(j);
            for ck in done.iter() {
                let proj: f64 = rest[0].iter().zip(ck).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(ck).for_each(|(a, b)| *a -= proj * b);
            }
            // the R diagonal entry is the norm (positive), so the sign fix is implicit
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                degenerate = true;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if degenerate {
            continue;
        }
        let mut r = vec![0.0; dim * dim];
        for j in 0..dim {
            for i in 0..dim {
                r[i * dim + j] = cols[j][i];
            }
        }
        if determinant(&r, dim) < 0.0 {
            for i in 0..dim {
                r[i * dim] = -r[i * dim];
            }
        }
        return Ok(r);
    }
}

/// Central differences `(f(p + h eᵢ) − f(p − h eᵢ)) / 2h` evaluated in f64.
pub fn finite_diff_gradient<Fun>(mut f: Fun, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    Fun: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(GeoError::invalid("finite-difference step must be positive"));
    }
    let mut q = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let fp = f(&q);
        q[i] = p[i] - h;
        let fm = f(&q);
        q[i] = p[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GeoError::Numerical(format!("objective not finite around coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `max |a − b| / max(1, max |b|)`, the deviation measure used by the symmetry checks.
pub fn relative_deviation<F: Real>(a: &[F], b: &[F]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 1.0f64;
    for (&x, &y) in a.iter().zip(b) {
        num = num.max((x.to_f64_lossy() - y.to_f64_lossy()).abs());
        den = den.max(y.to_f64_lossy().abs());
    }
    num / den
}
