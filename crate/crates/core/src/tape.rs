//! Define-by-run reverse-mode differentiation over small dense matrices.
//!
//! Every value on a [`Tape`] is a row-major matrix. Operations record their
//! parents; [`Tape::backward`] walks the records in reverse and accumulates
//! gradients only along paths that reach a parameter leaf.

use std::sync::Arc;

use crate::real::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    SqrtEps(Var),
    Concat(Vec<Var>),
    VStack(Var, Var),
    Gather(Var, Arc<[usize]>),
    Scatter(Var, Arc<[usize]>),
    GatherElems(Var, Arc<[usize]>),
    MulHeads(Var, Var),
    SumHeads(Var),
    MeanCols(Var),
    GroupSoftmax(Var, usize),
    CenterGroups(Var, usize),
    SumAll(Var),
    BceLogits(Var, Arc<[F]>),
}

struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    by_node: Vec<Option<Vec<F>>>,
    params: Vec<(usize, usize)>,
}

impl<F: Real> Grads<F> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[F]> {
        self.by_node[v.0].as_deref()
    }

    /// Gradient of parameter slot `param` (as registered with [`Tape::param`]).
    pub fn param(&self, param: usize) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == param)
            .and_then(|&(_, node)| self.by_node[node].as_deref())
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, m: Mat<F>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Differentiable leaf identified by `slot`.
    pub fn param(&mut self, slot: usize, m: Mat<F>) -> Var {
        self.push(m, Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(m, n);
        F::gemm(m, k, n, &self.value(a).data, &self.value(b).data, &mut out.data);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "bias shape mismatch");
        let mut out = self.value(a).clone();
        let b = &self.value(bias).data;
        for r in 0..m {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = self.tracked(a) || self.tracked(bias);
        self.push(out, Op::AddBias(a, bias), t)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Mat<F> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(va.rows, va.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|&x| x * s).collect());
        let t = self.tracked(a);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let t = self.tracked(a);
        self.push(out, Op::Silu(a), t)
    }

    /// Elementwise `sqrt(x + 1e-8)`.
    pub fn sqrt_eps(&mut self, a: Var) -> Var {
        let eps = F::lit(1e-8);
        let va = self.value(a);
        let data = va.data.iter().map(|&x| (x + eps).sqrt()).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let t = self.tracked(a);
        self.push(out, Op::SqrtEps(a), t)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Concat(parts.to_vec()), t)
    }

    /// Stacks `b` below `a`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "vstack column mismatch");
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.value(a).data);
        data.extend_from_slice(&self.value(b).data);
        let t = self.tracked(a) || self.tracked(b);
        self.push(Mat::from_vec(ra + rb, ca, data), Op::VStack(a, b), t)
    }

    /// `out[i] = a[idx[i]]` (rows).
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(idx.len(), va.cols);
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(src));
        }
        let t = self.tracked(a);
        self.push(out, Op::Gather(a, idx), t)
    }

    /// `out[idx[i]] += a[i]` (rows) into a matrix with `n_rows` rows.
    pub fn scatter(&mut self, a: Var, idx: Arc<[usize]>, n_rows: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, idx.len(), "scatter index length mismatch");
        let mut out = Mat::zeros(n_rows, va.cols);
        for (i, &dst) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(dst).iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::Scatter(a, idx), t)
    }

    /// Picks scalars out of the flattened matrix into a column.
    pub fn gather_elems(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let va = self.value(a);
        let data = idx.iter().map(|&i| va.data[i]).collect();
        let out = Mat::from_vec(idx.len(), 1, data);
        let t = self.tracked(a);
        self.push(out, Op::GatherElems(a, idx), t)
    }

    /// `out[i, j] = a[i, j] · s[i, j / (n / h)]` for `a: m×n`, `s: m×h`.
    pub fn mul_heads(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.shape(a);
        let (m2, h) = self.shape(s);
        assert_eq!(m, m2, "mul_heads row mismatch");
        assert!(h >= 1 && n % h == 0, "mul_heads head split");
        let w = n / h;
        let va = self.value(a);
        let vs = self.value(s);
        let mut out = Mat::zeros(m, n);
        for r in 0..m {
            for j in 0..n {
                out.data[r * n + j] = va.data[r * n + j] * vs.data[r * h + j / w];
            }
        }
        let t = self.tracked(a) || self.tracked(s);
        self.push(out, Op::MulHeads(a, s), t)
    }

    /// Sums each of `h` contiguous column chunks: `m×n -> m×h`.
    pub fn sum_heads(&mut self, a: Var, h: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(h >= 1 && n % h == 0);
        let w = n / h;
        let va = self.value(a);
        let mut out = Mat::zeros(m, h);
        for r in 0..m {
            for j in 0..n {
                out.data[r * h + j / w] += va.data[r * n + j];
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::SumHeads(a), t)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let inv = F::one() / F::from_usize(n).unwrap();
        let va = self.value(a);
        let data = (0..m).map(|r| va.row(r).iter().copied().sum::<F>() * inv).collect();
        let out = Mat::from_vec(m, 1, data);
        let t = self.tracked(a);
        self.push(out, Op::MeanCols(a), t)
    }

    /// Softmax over consecutive runs of `k` rows, independently per column.
    pub fn group_softmax(&mut self, a: Var, k: usize) -> Var {
        let (m, h) = self.shape(a);
        assert!(k >= 1 && m % k == 0, "group_softmax rows must divide into groups");
        let va = self.value(a);
        let mut out = Mat::zeros(m, h);
        for g in 0..m / k {
            for c in 0..h {
                let mut mx = F::neg_infinity();
                for r in g * k..(g + 1) * k {
                    mx = mx.max(va.data[r * h + c]);
                }
                let mut z = F::zero();
                for r in g * k..(g + 1) * k {
                    let e = (va.data[r * h + c] - mx).exp();
                    out.data[r * h + c] = e;
                    z += e;
                }
                for r in g * k..(g + 1) * k {
                    out.data[r * h + c] /= z;
                }
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::GroupSoftmax(a, k), t)
    }

    /// Subtracts the per-column mean of each consecutive run of `k` rows.
    pub fn center_groups(&mut self, a: Var, k: usize) -> Var {
        let out = center_rows(self.value(a), k);
        let t = self.tracked(a);
        self.push(out, Op::CenterGroups(a, k), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<F>();
        let t = self.tracked(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), t)
    }

    /// Mean binary cross-entropy of logits `a: m×1` against 0/1 targets.
    pub fn bce_logits(&mut self, a: Var, targets: Arc<[F]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.data.len(), targets.len());
        let n = F::from_usize(targets.len()).unwrap();
        let mut s = F::zero();
        for (&z, &y) in va.data.iter().zip(targets.iter()) {
            // log(1 + e^z) - y z, stable for both signs
            s += z.max(F::zero()) - y * z + (F::one() + (-z.abs()).exp()).ln();
        }
        let t = self.tracked(a);
        self.push(Mat::from_vec(1, 1, vec![s / n]), Op::BceLogits(a, targets), t)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut g: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        g[out.0] = Some(vec![F::one()]);
        let mut params = Vec::new();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = g[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => params.push((*slot, i)),
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if self.tracked(*a) {
                        let ga = acc(&mut g, *a, m * k);
                        F::gemm_nt_acc(m, n, k, &dy, &self.value(*b).data, ga);
                    }
                    if self.tracked(*b) {
                        let gb = acc(&mut g, *b, k * n);
                        F::gemm_tn_acc(k, m, n, &self.value(*a).data, &dy, gb);
                    }
                }
                Op::AddBias(a, b) => {
                    let (m, n) = self.shape(*a);
                    if self.tracked(*a) {
                        add_into(acc(&mut g, *a, m * n), &dy);
                    }
                    if self.tracked(*b) {
                        let gb = acc(&mut g, *b, n);
                        for r in 0..m {
                            for (o, &d) in gb.iter_mut().zip(&dy[r * n..(r + 1) * n]) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let len = dy.len();
                    if self.tracked(*a) {
                        add_into(acc(&mut g, *a, len), &dy);
                    }
                    if self.tracked(*b) {
                        add_into(acc(&mut g, *b, len), &dy);
                    }
                }
                Op::Sub(a, b) => {
                    let len = dy.len();
                    if self.tracked(*a) {
                        add_into(acc(&mut g, *a, len), &dy);
                    }
                    if self.tracked(*b) {
                        for (o, &d) in acc(&mut g, *b, len).iter_mut().zip(&dy) {
                            *o -= d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let len = dy.len();
                    if self.tracked(*a) {
                        let vb = &self.value(*b).data;
                        for ((o, &d), &y) in acc(&mut g, *a, len).iter_mut().zip(&dy).zip(vb) {
                            *o += d * y;
                        }
                    }
                    if self.tracked(*b) {
                        let va = &self.value(*a).data;
                        for ((o, &d), &x) in acc(&mut g, *b, len).iter_mut().zip(&dy).zip(va) {
                            *o += d * x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (o, &d) in acc(&mut g, *a, dy.len()).iter_mut().zip(&dy) {
                        *o += d * *s;
                    }
                }
                Op::Silu(a) => {
                    let va = &self.value(*a).data;
                    for ((o, &d), &x) in acc(&mut g, *a, dy.len()).iter_mut().zip(&dy).zip(va) {
                        let s = sigmoid(x);
                        *o += d * s * (F::one() + x * (F::one() - s));
                    }
                }
                Op::SqrtEps(a) => {
                    let y = &node.value.data;
                    let two = F::lit(2.0);
                    for ((o, &d), &yv) in acc(&mut g, *a, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *o += d / (two * yv);
                    }
                }
                Op::Concat(parts) => {
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if self.tracked(p) {
                            let gp = acc(&mut g, p, rows * pc);
                            for r in 0..rows {
                                for c in 0..pc {
                                    gp[r * pc + c] += dy[r * cols + off + c];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::VStack(a, b) => {
                    let la = self.value(*a).data.len();
                    if self.tracked(*a) {
                        add_into(acc(&mut g, *a, la), &dy[..la]);
                    }
                    if self.tracked(*b) {
                        let lb = dy.len() - la;
                        add_into(acc(&mut g, *b, lb), &dy[la..]);
                    }
                }
                Op::Gather(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut g, *a, m * n);
                    for (i, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[src * n + c] += dy[i * n + c];
                        }
                    }
                }
                Op::Scatter(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut g, *a, m * n);
                    for (i, &dst) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[i * n + c] += dy[dst * n + c];
                        }
                    }
                }
                Op::GatherElems(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut g, *a, m * n);
                    for (i, &src) in idx.iter().enumerate() {
                        ga[src] += dy[i];
                    }
                }
                Op::MulHeads(a, s) => {
                    let (m, n) = self.shape(*a);
                    let h = self.shape(*s).1;
                    let w = n / h;
                    if self.tracked(*a) {
                        let vs = &self.value(*s).data;
                        let ga = acc(&mut g, *a, m * n);
                        for r in 0..m {
                            for j in 0..n {
                                ga[r * n + j] += dy[r * n + j] * vs[r * h + j / w];
                            }
                        }
                    }
                    if self.tracked(*s) {
                        let va = &self.value(*a).data;
                        let gs = acc(&mut g, *s, m * h);
                        for r in 0..m {
                            for j in 0..n {
                                gs[r * h + j / w] += dy[r * n + j] * va[r * n + j];
                            }
                        }
                    }
                }
                Op::SumHeads(a) => {
                    let (m, n) = self.shape(*a);
                    let h = node.value.cols;
                    let w = n / h;
                    let ga = acc(&mut g, *a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += dy[r * h + j / w];
                        }
                    }
                }
                Op::MeanCols(a) => {
                    let (m, n) = self.shape(*a);
                    let inv = F::one() / F::from_usize(n).unwrap();
                    let ga = acc(&mut g, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += dy[r] * inv;
                        }
                    }
                }
                Op::GroupSoftmax(a, k) => {
                    let (m, h) = self.shape(*a);
                    let y = &node.value.data;
                    let ga = acc(&mut g, *a, m * h);
                    for grp in 0..m / k {
                        for c in 0..h {
                            let mut dot = F::zero();
                            for r in grp * k..(grp + 1) * k {
                                dot += y[r * h + c] * dy[r * h + c];
                            }
                            for r in grp * k..(grp + 1) * k {
                                ga[r * h + c] += y[r * h + c] * (dy[r * h + c] - dot);
                            }
                        }
                    }
                }
                Op::CenterGroups(a, k) => {
                    let (m, n) = self.shape(*a);
                    let centered = center_rows(&Mat::from_vec(m, n, dy.clone()), *k);
                    add_into(acc(&mut g, *a, m * n), &centered.data);
                }
                Op::SumAll(a) => {
                    let len = self.value(*a).data.len();
                    for o in acc(&mut g, *a, len).iter_mut() {
                        *o += dy[0];
                    }
                }
                Op::BceLogits(a, targets) => {
                    let va = &self.value(*a).data;
                    let n = F::from_usize(targets.len()).unwrap();
                    let ga = acc(&mut g, *a, va.len());
                    for ((o, &z), &y) in ga.iter_mut().zip(va).zip(targets.iter()) {
                        *o += dy[0] * (sigmoid(z) - y) / n;
                    }
                }
            }
            if matches!(node.op, Op::Param(_)) {
                g[i] = Some(dy);
            }
        }
        Grads { by_node: g, params }
    }
}

fn acc<F: Real>(g: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    g[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn center_rows<F: Real>(a: &Mat<F>, k: usize) -> Mat<F> {
    assert!(k >= 1 && a.rows.is_multiple_of(k), "row groups must tile the matrix");
    let mut out = a.clone();
    for grp in 0..a.rows / k {
        for c in 0..a.cols {
            // f64 accumulation keeps f32 residual means near one rounding
            let sum: f64 = (grp * k..(grp + 1) * k).map(|r| a.data[r * a.cols + c].to_f64().unwrap()).sum();
            let mean = F::lit(sum / k as f64);
            for r in grp * k..(grp + 1) * k {
                out.data[r * a.cols + c] -= mean;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::finite_diff_gradient;

    fn arc(v: &[usize]) -> Arc<[usize]> {
        Arc::from(v.to_vec())
    }

    /// Builds a scalar from every op and returns (value, gradient wrt the parameter).
    fn exercise(p: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::<f64>::new();
        let x = t.param(0, Mat::from_vec(4, 3, p.to_vec()));
        let w = t.constant(Mat::from_vec(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]));
        let b = t.constant(Mat::from_vec(1, 2, vec![0.05, -0.1]));
        let y = t.matmul(x, w);
        let y = t.add_bias(y, b);
        let s = t.silu(y);
        let sq = t.mul(s, s);
        let r = t.sqrt_eps(sq);
        let c = t.concat(&[r, y]);
        let c = t.vstack(c, c);
        let c = t.gather(c, arc(&[0, 5, 2, 7]));
        let gth = t.gather(c, arc(&[3, 0, 0, 2, 1, 3]));
        let sm = t.group_softmax(gth, 3);
        let heads = t.sum_heads(sm, 2);
        let mh = t.mul_heads(gth, heads);
        let sc = t.scatter(mh, arc(&[0, 1, 0, 1, 1, 0]), 2);
        let mc = t.mean_cols(sc);
        let ce = t.center_groups(c, 2);
        let ge = t.gather_elems(ce, arc(&[0, 5, 7, 13]));
        let sub = t.sub(ge, ge);
        let ge2 = t.add(ge, sub);
        let ge2 = t.scale(ge2, 0.7);
        let l1 = t.sum_all(mc);
        let l2 = t.bce_logits(ge2, Arc::from(vec![1.0, 0.0, 1.0, 0.0]));
        let l = t.add(l1, l2);
        let grads = t.backward(l);
        (t.value(l).data[0], grads.param(0).unwrap().to_vec())
    }

    #[test]
    fn every_op_backward_matches_finite_differences() {
        let p: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.71).sin()).collect();
        let (_, g) = exercise(&p);
        let fd = finite_diff_gradient(|q| exercise(q).0, &p, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn untracked_branches_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Mat::filled(2, 2, 1.0));
        let p = t.param(7, Mat::filled(2, 2, 2.0));
        let y = t.mul(c, p);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g.of(c).is_none());
        assert_eq!(g.param(7).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn group_softmax_rows_are_probability_vectors() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Mat::from_vec(6, 2, vec![1.0, 50.0, -3.0, 2.0, 0.5, -80.0, 4.0, 1.0, 4.0, 1.0, 4.0, 1.0]));
        let s = t.group_softmax(a, 3);
        let v = t.value(s);
        for g in 0..2 {
            for c in 0..2 {
                let sum: f32 = (0..3).map(|r| v.at(g * 3 + r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!((0..3).all(|r| v.at(g * 3 + r, c) >= 0.0));
            }
        }
    }
}
