use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nncore::{elu_slice, gemm, init_affine, DenseArray, ParamSet, Tape, Var, LAYER_NORM_EPS};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Tanh,
}

/// Fully connected network: affine layers with ELU between them, optional
/// LayerNorm right after the first affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    /// Layer widths including input and output, e.g. `[in, h, h, out]`.
    pub dims: Vec<usize>,
    pub layer_norm: bool,
    pub output: OutputActivation,
}

/// Where parameter leaves come from when an [`Mlp`] is placed on a tape.
#[derive(Clone, Copy, Debug)]
pub enum Bind<'a> {
    /// Parameters receive gradients (bound by name, shared across uses).
    Train(&'a ParamSet),
    /// Parameters enter the tape as constants.
    Frozen(&'a ParamSet),
}

impl<'a> Bind<'a> {
    fn leaf(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        match self {
            Bind::Train(p) => Ok(tape.param(name, p.get(name)?)),
            Bind::Frozen(p) => Ok(tape.constant(p.get(name)?.clone())),
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        match self {
            Bind::Train(p) | Bind::Frozen(p) => p,
        }
    }
}

impl Mlp {
    pub fn new(name: &str, dims: Vec<usize>, layer_norm: bool, output: OutputActivation) -> Self {
        assert!(dims.len() >= 2);
        Mlp { name: name.to_string(), dims, layer_norm, output }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.name)
    }

    pub fn init(&self, rng: &mut Rng, into: &mut ParamSet) {
        for (i, w) in self.dims.windows(2).enumerate() {
            let (wt, b) = init_affine(rng, w[0], w[1]);
            into.insert(self.weight_name(i), wt);
            into.insert(self.bias_name(i), b);
        }
        if self.layer_norm {
            into.insert(format!("{}.ln.g", self.name), DenseArray::full(&[self.dims[1]], 1.0));
            into.insert(format!("{}.ln.b", self.name), DenseArray::zeros(&[self.dims[1]]));
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind<'_>, x: Var) -> Result<Var> {
        let n_layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = bind.leaf(tape, &self.weight_name(i))?;
            let b = bind.leaf(tape, &self.bias_name(i))?;
            h = tape.affine(h, w, b)?;
            if i + 1 < n_layers {
                if i == 0 && self.layer_norm {
                    let g = bind.leaf(tape, &format!("{}.ln.g", self.name))?;
                    let bb = bind.leaf(tape, &format!("{}.ln.b", self.name))?;
                    h = tape.layer_norm(h, g, bb)?;
                }
                h = tape.elu(h);
            }
        }
        if self.output == OutputActivation::Tanh {
            h = tape.tanh(h);
        }
        Ok(h)
    }

    /// Forward pass outside any gradient computation. Same arithmetic as
    /// [`Mlp::forward`] without recording a tape.
    pub fn eval(&self, params: &ParamSet, x: &DenseArray) -> Result<DenseArray> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(shape_err("mlp", format!("{} expects {} inputs, got {:?}", self.name, self.input_dim(), x.shape())));
        }
        let n_layers = self.dims.len() - 1;
        let rows = x.rows();
        let mut h = x.data().to_vec();
        for i in 0..n_layers {
            let (n, m) = (self.dims[i], self.dims[i + 1]);
            let w = params.get(&self.weight_name(i))?;
            let b = params.get(&self.bias_name(i))?;
            if w.shape() != [n, m] || b.len() != m {
                return Err(shape_err("mlp", format!("{} layer {i} has W {:?}", self.name, w.shape())));
            }
            let mut out = Vec::with_capacity(rows * m);
            for _ in 0..rows {
                out.extend_from_slice(b.data());
            }
            gemm(rows, n, m, &h, false, w.data(), false, 1.0, &mut out);
            if i + 1 < n_layers {
                if i == 0 && self.layer_norm {
                    let g = params.get(&format!("{}.ln.g", self.name))?.data();
                    let bb = params.get(&format!("{}.ln.b", self.name))?.data();
                    for r in out.chunks_exact_mut(m) {
                        let mean = r.iter().sum::<f64>() / m as f64;
                        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for (j, v) in r.iter_mut().enumerate() {
                            *v = (*v - mean) * s * g[j] + bb[j];
                        }
                    }
                }
                elu_slice(&mut out);
            }
            h = out;
        }
        if self.output == OutputActivation::Tanh {
            for v in &mut h {
                *v = v.tanh();
            }
        }
        Ok(DenseArray::from_raw(vec![rows, self.output_dim()], h))
    }
}
