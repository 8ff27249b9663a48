//! Named parameter storage and the dense layers the network is built from.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::real::Real;
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Mat<F>,
}

/// Flat, ordered list of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    pub params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<F>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf; slot = parameter index.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.value.clone()))
            .collect()
    }

    /// All scalars concatenated in parameter order.
    pub fn flatten(&self) -> Vec<F> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.data.len();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Mat::from_vec(
                        p.value.rows,
                        p.value.cols,
                        p.value.data.iter().map(|&v| G::lit(v.to_f64_lossy())).collect(),
                    ),
                })
                .collect(),
        }
    }
}

/// `y = x W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/√in` initialisation; `zero` gives an all-zero layer.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut init = |n: usize| -> Vec<F> {
            if zero {
                vec![F::zero(); n]
            } else {
                (0..n).map(|_| F::lit(u.sample(rng))).collect()
            }
        };
        let w = init(input * output);
        let b = init(output);
        Self {
            weight: store.add(format!("{name}.weight"), Mat::from_vec(input, output, w)),
            bias: store.add(format!("{name}.bias"), Mat::from_vec(1, output, b)),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, pv[self.weight.0]);
        tape.add_bias(y, pv[self.bias.0])
    }
}

/// Linear layers joined by SiLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: bool,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`. `zero_last` zero-initialises the output layer.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: &[usize],
        final_activation: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let zero = zero_last && i == n - 1;
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], zero, rng)
            })
            .collect();
        Self { layers, final_activation }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &[Var], mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, pv, x);
            if i + 1 < n || self.final_activation {
                x = tape.silu(x);
            }
        }
        x
    }
}

/// `widths` for an MLP with `depth` hidden layers of size `hidden`.
pub fn mlp_widths(input: usize, hidden: usize, output: usize, depth: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat_n(hidden, depth));
    w.push(output);
    w
}
