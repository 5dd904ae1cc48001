//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the
//! tape by name through [`Tape::param`]; using the same name twice yields the same
//! leaf, so weight sharing accumulates gradients naturally.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::nn::ParamStore;
use crate::tensor::{gemm_acc, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Gather { table: Var, ids: Vec<u32> },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Matrix,
        count: usize,
    },
    SumAll(Var),
    Dropout { x: Var, keep: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation graph of a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    train: bool,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf for the named parameter; panics if the store lacks it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let m = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(m, Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul(ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), out.cols(), "bias width mismatch");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &xv.row(r)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let orow = out.row_mut(r);
            for (o, &v) in orow[..limit].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow[..limit].iter_mut() {
                *o /= sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).rows_slice(start, len);
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / xv.rows() as f64);
        self.push(out, Op::MeanRows(x))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    /// Returns a `1 x 1` node; zero when the mask selects nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        assert_eq!(targets.len(), rows);
        assert_eq!(mask.len(), rows);
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r] as usize];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(x))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let keep: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::Dropout { x, keep })
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter leaf, keyed by parameter name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()));
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = grad_slot(grads, *a, av);
                match (ta, tb) {
                    (false, false) => gemm_acc(g, false, bv, true, ga),
                    (false, true) => gemm_acc(g, false, bv, false, ga),
                    (true, false) => gemm_acc(bv, false, g, true, ga),
                    (true, true) => gemm_acc(bv, true, g, true, ga),
                }
                let gb = grad_slot(grads, *b, bv);
                match (ta, tb) {
                    (false, false) => gemm_acc(av, true, g, false, gb),
                    (false, true) => gemm_acc(g, true, av, false, gb),
                    (true, false) => gemm_acc(av, false, g, false, gb),
                    (true, true) => gemm_acc(g, true, av, true, gb),
                }
            }
            Op::Add(a, b) => {
                grad_slot(grads, *a, g).add_assign(g);
                grad_slot(grads, *b, g).add_assign(g);
            }
            Op::AddBias { x, bias } => {
                grad_slot(grads, *x, g).add_assign(g);
                let gb = grad_slot(grads, *bias, self.value(*bias));
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = grad_slot(grads, *x, g);
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                {
                    let ga = grad_slot(grads, *a, g);
                    for ((o, gv), bb) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bb;
                    }
                }
                let gb = grad_slot(grads, *b, g);
                for ((o, gv), aa) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * aa;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = grad_slot(grads, *x, g);
                for ((o, gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    *o += gv * d;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gg = grad_slot(grads, *gamma, self.value(*gamma));
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                {
                    let gbeta = grad_slot(grads, *beta, self.value(*beta));
                    for r in 0..rows {
                        for (o, v) in gbeta.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                let gx = grad_slot(grads, *x, g);
                let n = cols as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        let d = g.get(r, c) * gam[c];
                        sum_d += d;
                        sum_dx += d * xhat.get(r, c);
                    }
                    let row = gx.row_mut(r);
                    for c in 0..cols {
                        let d = g.get(r, c) * gam[c];
                        row[c] += rstd[r] / n * (n * d - sum_d - xhat.get(r, c) * sum_dx);
                    }
                }
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let gx = grad_slot(grads, *x, g);
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pv), gv) in gx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o += pv * (gv - dot);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let gp = grad_slot(grads, p, self.value(p));
                    for (o, v) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[offset * g.cols()..(offset + rows) * g.cols()])
                    {
                        *o += v;
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = g.cols();
                let gx = grad_slot(grads, *x, self.value(*x));
                for (o, v) in gx.data_mut()[start * cols..(start + g.rows()) * cols]
                    .iter_mut()
                    .zip(g.data())
                {
                    *o += v;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let gp = grad_slot(grads, p, self.value(p));
                    for r in 0..g.rows() {
                        for (o, v) in gp
                            .row_mut(r)
                            .iter_mut()
                            .zip(&g.row(r)[offset..offset + cols])
                        {
                            *o += v;
                        }
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let gx = grad_slot(grads, *x, self.value(*x));
                for r in 0..g.rows() {
                    for (o, v) in gx.row_mut(r)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let gx = grad_slot(grads, *x, self.value(*x));
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o += v * inv;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let gt = grad_slot(grads, *table, self.value(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let gl = grad_slot(grads, *logits, self.value(*logits));
                if *count == 0 {
                    return;
                }
                let upstream = g.data()[0] / *count as f64;
                for r in 0..probs.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let row = gl.row_mut(r);
                    for (o, p) in row.iter_mut().zip(probs.row(r)) {
                        *o += upstream * p;
                    }
                    row[targets[r] as usize] -= upstream;
                }
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                let gx = grad_slot(grads, *x, self.value(*x));
                gx.data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::Dropout { x, keep } => {
                let gx = grad_slot(grads, *x, g);
                for ((o, gv), k) in gx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                    *o += gv * k;
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for one input.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = {
            let mut t = Tape::new(false);
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            Matrix::uniform(t.value(y).rows(), t.value(y).cols(), 1.0, &mut rng)
        };
        let eval = |x: &Matrix| {
            let mut t = Tape::new(false);
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            let w = t.constant(probe.clone());
            let p = t.mul(y, w);
            let s = t.sum_all(p);
            (t, xv, s)
        };
        let (t, xv, s) = eval(&x);
        let grads = t.backward(s);
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = {
                let (t, _, s) = eval(&xp);
                t.value(s).data()[0]
            };
            let fm = {
                let (t, _, s) = eval(&xm);
                t.value(s).data()[0]
            };
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-6, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gelu_gradient() {
        check_unary(|t, x| t.gelu(x), sample(3, 4, 1));
    }

    #[test]
    fn softmax_gradients() {
        check_unary(|t, x| t.softmax(x, false), sample(3, 5, 2));
        check_unary(|t, x| t.softmax(x, true), sample(4, 4, 3));
    }

    #[test]
    fn layer_norm_gradient() {
        let gamma = sample(1, 5, 4);
        let beta = sample(1, 5, 5);
        check_unary(
            move |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                t.layer_norm(x, g, b)
            },
            sample(3, 5, 6),
        );
    }

    #[test]
    fn matmul_variants_gradients() {
        let other = sample(4, 3, 7);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let o = other.clone();
            let x = match (ta, tb) {
                // x: 2x4 so op(x) is 2x4 or 4x2
                (false, false) => sample(2, 4, 8),
                (false, true) => sample(2, 3, 8),
                (true, false) => sample(4, 2, 8),
                (true, true) => sample(3, 2, 8),
            };
            check_unary(
                move |t, x| {
                    let c = t.constant(o.clone());
                    t.matmul_ex(x, ta, c, tb)
                },
                x.clone(),
            );
            let o2 = other.clone();
            let left = match (ta, tb) {
                (false, false) => sample(2, 4, 9),
                (false, true) => sample(2, 3, 9),
                (true, false) => sample(4, 2, 9),
                (true, true) => sample(3, 2, 9),
            };
            check_unary(
                move |t, y| {
                    let c = t.constant(left.clone());
                    t.matmul_ex(c, ta, y, tb)
                },
                o2,
            );
        }
    }

    #[test]
    fn structural_ops_gradients() {
        check_unary(
            |t, x| {
                let a = t.slice_rows(x, 1, 2);
                let b = t.slice_cols(x, 0, 2);
                let b = t.slice_rows(b, 0, 2);
                let c = t.concat_cols(&[a, b]);
                let m = t.mean_rows(x);
                let tail = t.slice_cols(m, 1, 2);
                let m = t.concat_cols(&[m, tail]);
                let s = t.scale(c, 0.7);
                t.concat_rows(&[s, m])
            },
            sample(3, 3, 10).matmul(false, &sample(3, 4, 11), false),
        );
    }

    #[test]
    fn cross_entropy_gradient_and_masking() {
        let targets = vec![1u32, 0, 3];
        let mask = vec![true, false, true];
        check_unary(
            move |t, x| t.cross_entropy(x, &targets, &mask),
            sample(3, 4, 13),
        );
        let mut t = Tape::new(false);
        let x = t.constant(sample(2, 4, 14));
        let l = t.cross_entropy(x, &[0, 1], &[false, false]);
        assert_eq!(t.value(l).data()[0], 0.0);
        let g = t.backward(l);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut t = Tape::new(false);
        let table = t.constant(sample(5, 3, 15));
        let rows = t.gather(table, &[2, 2, 4]);
        let s = t.sum_all(rows);
        let g = t.backward(s);
        let gt = g.get(table).unwrap();
        assert_eq!(gt.row(2), &[2.0, 2.0, 2.0]);
        assert_eq!(gt.row(4), &[1.0, 1.0, 1.0]);
        assert_eq!(gt.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_param_is_single_leaf() {
        let mut store = ParamStore::default();
        store.insert("w", sample(2, 2, 16));
        let mut t = Tape::new(false);
        let a = t.param(&store, "w");
        let b = t.param(&store, "w");
        assert_eq!(a, b);
        let c = t.add(a, b);
        let s = t.sum_all(c);
        let g = t.backward(s);
        let pg = t.param_grads(&g);
        assert_eq!(pg["w"].data(), &[2.0; 4]);
    }
}
