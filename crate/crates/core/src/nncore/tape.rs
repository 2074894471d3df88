//! Wengert-list reverse-mode differentiation over [`DenseArray`] values.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and a single reverse sweep over indices is
//! anti-topological. Nodes that do not depend on any gradient-carrying leaf
//! are skipped during the sweep.

use std::collections::{BTreeMap, HashMap};

use super::array::{gemm, DenseArray};
use crate::error::{shape_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Elu { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gain: Var, xhat: Vec<f64>, rstd: Vec<f64>, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ColAffine { x: Var, scale: Vec<f64> },
    Square { a: Var },
    Abs { a: Var },
    Sqrt { a: Var },
    RowSum { a: Var },
    Mean { a: Var },
    Sum { a: Var },
    ConcatCols { a: Var, b: Var },
    GatherRows { a: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, DenseArray>,
    by_leaf: HashMap<usize, DenseArray>,
}

impl Gradients {
    /// Gradient of a named parameter. Parameters that were bound but do not
    /// influence the loss get an all-zero gradient.
    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.by_name.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&DenseArray> {
        self.by_leaf.get(&v.0)
    }

    pub fn named(&self) -> &BTreeMap<String, DenseArray> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, DenseArray> {
        self.by_name
    }
}

fn same_shape(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `1.5 · 2^52`: adding it rounds a double to an integer in its low bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `e^x - 1` for `x <= 0`, within a few ulp of `f64::exp_m1`. Written
/// branch-free with plain arithmetic so slice loops over it vectorize.
#[inline(always)]
fn expm1_nonpos(x: f64) -> f64 {
    let x = x.max(-700.0);
    let t = x * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    // Cody-Waite split of ln 2.
    let r = x - k * 0.693_147_180_559_945_3;
    let r = r - k * 2.319_046_813_846_299_6e-17;
    // Taylor series of e^r - 1 on |r| <= ln2 / 2, degree 13.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
    ] {
        p = p * r + c;
    }
    let em1 = p * r;
    let kb = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let scale = f64::from_bits(kb.wrapping_add(1023) << 52);
    scale * em1 + (scale - 1.0)
}

#[inline(always)]
pub(crate) fn elu(v: f64) -> f64 {
    let e = expm1_nonpos(v.min(0.0));
    // `v != v` keeps NaN flowing through.
    #[allow(clippy::eq_op)]
    if v > 0.0 || v != v {
        v
    } else {
        e
    }
}

fn elu_slice_plain(x: &mut [f64]) {
    for v in x {
        *v = elu(*v);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn elu_slice_avx512(x: &mut [f64]) {
    elu_slice_plain(x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn elu_slice_avx2(x: &mut [f64]) {
    elu_slice_plain(x)
}

/// ELU in place. Wider vector units are picked at run time; there is no
/// FMA contraction, so every path gives the same bits.
pub(crate) fn elu_slice(x: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected on this CPU.
            return unsafe { elu_slice_avx512(x) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { elu_slice_avx2(x) };
        }
    }
    elu_slice_plain(x)
}

fn elu_grad(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        expm1_nonpos(v) + 1.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable named parameter. Binding the same name twice returns the
    /// same node, so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, value: &DenseArray) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `y = x·W + b` for `x: [B×n]`, `W: [n×m]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err("affine", format!("x {:?}, W {:?}", xv.shape(), wv.shape())));
        }
        let (bsz, n, m) = (xv.rows(), wv.rows(), wv.cols());
        if bv.len() != m {
            return Err(shape_err("affine", format!("b {:?} for W {:?}", bv.shape(), wv.shape())));
        }
        let mut out = Vec::with_capacity(bsz * m);
        for _ in 0..bsz {
            out.extend_from_slice(bv.data());
        }
        gemm(bsz, n, m, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(DenseArray::from_raw(vec![bsz, m], out), Op::Affine { x, w, b }, rg))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        elu_slice(out.data_mut());
        let rg = self.rg(&[x]);
        self.push(out, Op::Elu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Per-row standardization (population variance, `LAYER_NORM_EPS` inside
    /// the square root) followed by elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if n == 0 || gv.len() != n || bv.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for (j, v) in r.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            DenseArray::from_raw(shape, out),
            Op::LayerNorm { x, gain, xhat, rstd, bias },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = DenseArray::from_raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise minimum; the gradient goes to `a` on ties.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// `y[i, j] = x[i, j] · scale[j] + shift[j]`.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if scale.len() != c || shift.len() != c {
            return Err(shape_err("col_affine", format!("{} columns vs {}", c, scale.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * scale[k % c] + shift[k % c])
            .collect();
        let out = DenseArray::from_raw(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ColAffine { x, scale: scale.to_vec() }, rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square { a }, rg)
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs { a }, rg)
    }

    /// Elementwise square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0).sqrt());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt { a }, rg)
    }

    /// Sum over columns: `[B×n] -> [B×1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let out = DenseArray::from_raw(vec![av.rows(), 1], data);
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let rg = self.rg(&[a]);
        self.push(DenseArray::from_raw(vec![1, 1], vec![m]), Op::Mean { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(DenseArray::from_raw(vec![1, 1], vec![s]), Op::Sum { a }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = DenseArray::hcat(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols { a, b }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", av.rows())));
        }
        let out = av.select_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to every
    /// gradient-carrying leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (bsz, n, m) = (xv.rows(), wv.rows(), wv.cols());
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; bsz * n];
                        gemm(bsz, m, n, &g, false, wv.data(), true, 0.0, &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![0.0; n * m];
                        gemm(n, bsz, m, xv.data(), true, &g, false, 0.0, &mut dw);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; m];
                        for row in g.chunks_exact(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Elu { x } => {
                    let d = self.value(*x).data().iter().zip(&g).map(|(v, gi)| gi * elu_grad(*v)).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Tanh { x } => {
                    let d = node.value.data().iter().zip(&g).map(|(y, gi)| gi * (1.0 - y * y)).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm { x, gain, xhat, rstd, bias } => {
                    let n = node.value.cols();
                    let gv = self.value(*gain).data();
                    if self.requires_grad(*x) {
                        let mut dx = Vec::with_capacity(g.len());
                        for (r, (grow, hrow)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                            let gh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let m1 = gh.iter().sum::<f64>() / n as f64;
                            let m2 = gh.iter().zip(hrow).map(|(a, h)| a * h).sum::<f64>() / n as f64;
                            for (a, h) in gh.iter().zip(hrow) {
                                dx.push(rstd[r] * (a - m1 - h * m2));
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.requires_grad(*gain) {
                        let mut dg = vec![0.0; n];
                        for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                        self.accumulate(&mut grads, *gain, dg);
                    }
                    if self.requires_grad(*bias) {
                        let mut db = vec![0.0; n];
                        for grow in g.chunks_exact(n) {
                            for j in 0..n {
                                db[j] += grow[j];
                            }
                        }
                        self.accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        self.accumulate(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Minimum { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for k in 0..g.len() {
                        if av[k] <= bv[k] {
                            da[k] = g[k];
                        } else {
                            db[k] = g[k];
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, c } => {
                    self.accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::ColAffine { x, scale } => {
                    let c = scale.len();
                    let d = g.iter().enumerate().map(|(k, v)| v * scale[k % c]).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Square { a } => {
                    let d = self.value(*a).data().iter().zip(&g).map(|(v, gi)| 2.0 * v * gi).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Abs { a } => {
                    let d = self.value(*a).data().iter().zip(&g).map(|(v, gi)| gi * sign(*v)).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sqrt { a } => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| if *y > 0.0 { gi / (2.0 * y) } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::RowSum { a } => {
                    let c = self.value(*a).cols();
                    let d = g.iter().flat_map(|v| std::iter::repeat_n(*v, c)).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Mean { a } => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Sum { a } => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::ConcatCols { a, b } => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let mut da = Vec::with_capacity(g.len() / (ca + cb) * ca);
                    let mut db = Vec::with_capacity(g.len() / (ca + cb) * cb);
                    for row in g.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::GatherRows { a, idx } => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g[r * c + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, d);
                }
            }
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = match grads.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) => DenseArray::from_raw(self.value(*v).shape().to_vec(), g.clone()),
                None => DenseArray::zeros(self.value(*v).shape()),
            };
            out.by_name.insert(name.clone(), g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    out.by_leaf.insert(i, DenseArray::from_raw(self.nodes[i].value.shape().to_vec(), g));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&d) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
