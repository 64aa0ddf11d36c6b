//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and the
//! information needed to push gradients back to its inputs. Calling
//! [`Tape::backward`] on a `1 x 1` node walks the tape in reverse once.
//!
//! A tape is single-owner and not shared between threads; parallel
//! workers each build their own tape against a shared [`ParameterSet`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::tensor::NORM_FLOOR;
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherMean(Var, Arc<Vec<Vec<usize>>>),
    RepeatRows(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    MaxRows(Var, Vec<usize>),
    Propagate(Var, Arc<Vec<Vec<usize>>>),
    RowCosine(Var, Var),
    MpCosine(Var, Var, Var),
    MpCosineMax(Var, Var, Var, Vec<usize>),
    Mse(Var, Vec<f64>),
    BceLogits(Var, Vec<f64>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let [r, c] = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn shape_err(op: &'static str, parts: &[&Tensor]) -> Error {
    Error::Shape {
        op,
        shapes: parts
            .iter()
            .map(|t| t.shape_str())
            .collect::<Vec<_>>()
            .join(" vs "),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter onto the tape (once per tape).
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", &[x, y]));
        }
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![0.0; n * m];
        let (xd, yd) = (x.data(), y.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = xd[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let yrow = &yd[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(yrow) {
                    *o += a * b;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(n, m, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, &[x, y]));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    fn zip_row(
        &mut self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err(op, &[x, r]));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, r.data()[i % c]))
            .collect();
        Tensor::new(x.rows(), c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// `a + row` with `row` (1 x c) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.zip_row(a, row, "add_row", |p, q| p + q)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |p, q| p * q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.zip_row(a, row, "mul_row", |p, q| p * q)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.rows(), x.cols(), x.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let ng = self.ng(&[a]);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let ng = self.ng(&[a]);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::new(c, r, out).expect("transpose"),
            Op::Transpose(a),
            ng,
        )
    }

    /// Horizontal concatenation `[a; b; ...]` row by row.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err(
                "concat_cols",
                &[self.value(parts[0]), self.value(*bad)],
            ));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(rows, cols, out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Vertical stacking of row blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(shape_err(
                "concat_rows",
                &[self.value(parts[0]), self.value(*bad)],
            ));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                shapes: format!("{}..{} of {}", start, end, x.shape_str()),
            });
        }
        let mut out = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let t = Tensor::new(x.rows(), end - start, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                shapes: format!("{}..{} of {}", start, end, x.shape_str()),
            });
        }
        let c = x.cols();
        let t = Tensor::new(end - start, c, x.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), ng))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, r + 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: format!("row {bad} of {}", x.shape_str()),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * x.cols());
        for &i in &idx {
            out.extend_from_slice(x.row(i));
        }
        let t = Tensor::new(idx.len(), x.cols(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::GatherRows(a, idx), ng))
    }

    /// Row `i` of the output is the mean of `table` rows listed in `lists[i]`
    /// (a zero row for an empty list).
    pub fn gather_mean(&mut self, table: Var, lists: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(table);
        let c = x.cols();
        let mut out = vec![0.0; lists.len() * c];
        for (i, l) in lists.iter().enumerate() {
            if l.is_empty() {
                continue;
            }
            let inv = 1.0 / l.len() as f64;
            let orow = &mut out[i * c..(i + 1) * c];
            for &j in l {
                if j >= x.rows() {
                    return Err(Error::Shape {
                        op: "gather_mean",
                        shapes: format!("row {j} of {}", x.shape_str()),
                    });
                }
                for (o, v) in orow.iter_mut().zip(x.row(j)) {
                    *o += v * inv;
                }
            }
        }
        let t = Tensor::new(lists.len(), c, out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(t, Op::GatherMean(table, lists), ng))
    }

    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let x = self.value(row);
        if x.rows() != 1 {
            return Err(shape_err("repeat_rows", &[x]));
        }
        let data = x.data().repeat(n);
        let t = Tensor::new(n, x.cols(), data)?;
        let ng = self.ng(&[row]);
        Ok(self.push(t, Op::RepeatRows(row), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.rows(), c, out).expect("softmax");
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Scales each row to unit norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > NORM_FLOOR {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = Tensor::new(x.rows(), c, out).expect("normalize");
        let ng = self.ng(&[a]);
        self.push(t, Op::NormalizeRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Column-wise max over rows (`n x c -> 1 x c`); ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(shape_err("max_rows", &[x]));
        }
        let c = x.cols();
        let mut best = x.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for r in 1..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = r;
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::row_vector(best), Op::MaxRows(a, arg), ng))
    }

    /// `out_i = sum_{u in lists[i]} a_u`: neighbourhood sum over rows.
    pub fn propagate(&mut self, a: Var, lists: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(a);
        if lists.len() != x.rows() {
            return Err(Error::Shape {
                op: "propagate",
                shapes: format!("{} neighbour lists vs {}", lists.len(), x.shape_str()),
            });
        }
        let c = x.cols();
        let mut out = vec![0.0; x.len()];
        for (i, l) in lists.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for &u in l {
                for (o, v) in orow.iter_mut().zip(x.row(u)) {
                    *o += v;
                }
            }
        }
        let t = Tensor::new(x.rows(), c, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Propagate(a, lists), ng))
    }

    /// Row-wise cosine similarity (`n x c, n x c -> n x 1`); zero rows give 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("row_cosine", &[x, y]));
        }
        let out = (0..x.rows())
            .map(|r| super::cosine(x.row(r), y.row(r)))
            .collect::<Vec<_>>();
        let t = Tensor::new(x.rows(), 1, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::RowCosine(a, b), ng))
    }

    /// Multi-perspective cosine: `out[i][k] = cos(w_k * x_i, w_k * y_i)` where
    /// `y` has either the same rows as `x` or a single row that is broadcast.
    pub fn mp_cosine(&mut self, x: Var, y: Var, w: Var) -> Result<Var> {
        let (xv, yv, wv) = (self.value(x), self.value(y), self.value(w));
        if xv.cols() != yv.cols()
            || wv.cols() != xv.cols()
            || (yv.rows() != xv.rows() && yv.rows() != 1)
        {
            return Err(shape_err("mp_cosine", &[xv, yv, wv]));
        }
        let (n, l) = (xv.rows(), wv.rows());
        let mut out = Vec::with_capacity(n * l);
        for i in 0..n {
            let yi = if yv.rows() == 1 { 0 } else { i };
            for k in 0..l {
                out.push(weighted_cos(xv.row(i), yv.row(yi), wv.row(k)).0);
            }
        }
        let t = Tensor::new(n, l, out)?;
        let ng = self.ng(&[x, y, w]);
        Ok(self.push(t, Op::MpCosine(x, y, w), ng))
    }

    /// `out[i][k] = max_j cos(w_k * x_i, w_k * y_j)`; ties to the first `j`.
    pub fn mp_cosine_max(&mut self, x: Var, y: Var, w: Var) -> Result<Var> {
        let (xv, yv, wv) = (self.value(x), self.value(y), self.value(w));
        if xv.cols() != yv.cols() || wv.cols() != xv.cols() || yv.rows() == 0 {
            return Err(shape_err("mp_cosine_max", &[xv, yv, wv]));
        }
        let (n, l) = (xv.rows(), wv.rows());
        let mut out = Vec::with_capacity(n * l);
        let mut arg = Vec::with_capacity(n * l);
        for i in 0..n {
            for k in 0..l {
                let mut best = f64::NEG_INFINITY;
                let mut bj = 0;
                for j in 0..yv.rows() {
                    let c = weighted_cos(xv.row(i), yv.row(j), wv.row(k)).0;
                    if c > best {
                        best = c;
                        bj = j;
                    }
                }
                out.push(best);
                arg.push(bj);
            }
        }
        let t = Tensor::new(n, l, out)?;
        let ng = self.ng(&[x, y, w]);
        Ok(self.push(t, Op::MpCosineMax(x, y, w, arg), ng))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, targets: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "mse",
                shapes: format!("{} vs {} targets", p.shape_str(), targets.len()),
            });
        }
        let s = p
            .data()
            .iter()
            .zip(&targets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(&[pred]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, targets), ng))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                shapes: format!("{} vs {} targets", z.shape_str(), targets.len()),
            });
        }
        let s = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(s), Op::BceLogits(logits, targets), ng))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let o = self.value(out);
        if o.len() != 1 {
            return Err(shape_err("backward", &[o]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Parameter gradients keyed by name, zero-filled for bound parameters
    /// that did not reach the output.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(v)))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        // Accumulation target for a parent, or None if it takes no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![0.0; len])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.cols());
                if let Some(ga) = slot!(*a) {
                    for r in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += g[r * m + c] * y.data()[p * m + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for r in 0..n {
                        for p in 0..k {
                            let xv = x.data()[r * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                gb[p * m + c] += xv * g[r * m + c];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, 1.0);
                }
                let c = out.cols();
                if let Some(gr) = slot!(*r) {
                    for (j, v) in g.iter().enumerate() {
                        gr[j % c] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * x[j];
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (x, y) = (val(*a).data(), val(*r).data());
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j % c];
                    }
                }
                if let Some(gr) = slot!(*r) {
                    for j in 0..g.len() {
                        gr[j % c] += g[j] * x[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    axpy(ga, g, *s);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for (j, y) in out.data().iter().enumerate() {
                        ga[j] += g[j] * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for (j, y) in out.data().iter().enumerate() {
                        ga[j] += g[j] * (1.0 - y * y);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(ga) = slot!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if let Some(gp) = slot!(*p) {
                        for r in 0..out.rows() {
                            for j in 0..pc {
                                gp[r * pc + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if let Some(gp) = slot!(*p) {
                        axpy(gp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let src_c = val(*a).cols();
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for r in 0..out.rows() {
                        for j in 0..c {
                            ga[r * src_c + start + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    axpy(&mut ga[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                }
            }
            Op::GatherMean(t, lists) => {
                let c = out.cols();
                if let Some(gt) = slot!(*t) {
                    for (r, l) in lists.iter().enumerate() {
                        if l.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / l.len() as f64;
                        for &src in l {
                            axpy(&mut gt[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], inv);
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for chunk in g.chunks(c.max(1)) {
                        axpy(ga, chunk, 1.0);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for r in 0..out.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n <= NORM_FLOOR {
                            continue;
                        }
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot!(*a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MaxRows(a, arg) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for (j, &r) in arg.iter().enumerate() {
                        ga[r * c + j] += g[j];
                    }
                }
            }
            Op::Propagate(a, lists) => {
                let c = out.cols();
                if let Some(ga) = slot!(*a) {
                    for (i, l) in lists.iter().enumerate() {
                        for &u in l {
                            axpy(&mut ga[u * c..(u + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                        }
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let c = x.cols();
                let ones = vec![1.0; c];
                let mut dx = vec![0.0; x.len()];
                let mut dy = vec![0.0; y.len()];
                for r in 0..x.rows() {
                    weighted_cos_grad(
                        x.row(r),
                        y.row(r),
                        &ones,
                        g[r],
                        &mut dx[r * c..(r + 1) * c],
                        &mut dy[r * c..(r + 1) * c],
                        None,
                    );
                }
                if let Some(ga) = slot!(*a) {
                    axpy(ga, &dx, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    axpy(gb, &dy, 1.0);
                }
            }
            Op::MpCosine(x, y, w) => {
                let (xv, yv, wv) = (val(*x), val(*y), val(*w));
                let (c, l) = (xv.cols(), wv.rows());
                let mut dx = vec![0.0; xv.len()];
                let mut dy = vec![0.0; yv.len()];
                let mut dw = vec![0.0; wv.len()];
                for i in 0..xv.rows() {
                    let yi = if yv.rows() == 1 { 0 } else { i };
                    for k in 0..l {
                        let (dxi, rest) =
                            (&mut dx[i * c..(i + 1) * c], &mut dy[yi * c..(yi + 1) * c]);
                        weighted_cos_grad(
                            xv.row(i),
                            yv.row(yi),
                            wv.row(k),
                            g[i * l + k],
                            dxi,
                            rest,
                            Some(&mut dw[k * c..(k + 1) * c]),
                        );
                    }
                }
                if let Some(gx) = slot!(*x) {
                    axpy(gx, &dx, 1.0);
                }
                if let Some(gy) = slot!(*y) {
                    axpy(gy, &dy, 1.0);
                }
                if let Some(gw) = slot!(*w) {
                    axpy(gw, &dw, 1.0);
                }
            }
            Op::MpCosineMax(x, y, w, arg) => {
                let (xv, yv, wv) = (val(*x), val(*y), val(*w));
                let (c, l) = (xv.cols(), wv.rows());
                let mut dx = vec![0.0; xv.len()];
                let mut dy = vec![0.0; yv.len()];
                let mut dw = vec![0.0; wv.len()];
                for i in 0..xv.rows() {
                    for k in 0..l {
                        let j = arg[i * l + k];
                        weighted_cos_grad(
                            xv.row(i),
                            yv.row(j),
                            wv.row(k),
                            g[i * l + k],
                            &mut dx[i * c..(i + 1) * c],
                            &mut dy[j * c..(j + 1) * c],
                            Some(&mut dw[k * c..(k + 1) * c]),
                        );
                    }
                }
                if let Some(gx) = slot!(*x) {
                    axpy(gx, &dx, 1.0);
                }
                if let Some(gy) = slot!(*y) {
                    axpy(gy, &dy, 1.0);
                }
                if let Some(gw) = slot!(*w) {
                    axpy(gw, &dw, 1.0);
                }
            }
            Op::Mse(p, targets) => {
                let pv = val(*p).data();
                let n = targets.len() as f64;
                if let Some(gp) = slot!(*p) {
                    for j in 0..targets.len() {
                        gp[j] += g[0] * 2.0 * (pv[j] - targets[j]) / n;
                    }
                }
            }
            Op::BceLogits(z, targets) => {
                let zv = val(*z).data();
                if let Some(gz) = slot!(*z) {
                    for j in 0..targets.len() {
                        gz[j] += g[0] * (sigmoid(zv[j]) - targets[j]);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Returns `(cos, |w*x|, |w*y|)` for `cos(w*x, w*y)`.
fn weighted_cos(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for j in 0..x.len() {
        let a = w[j] * x[j];
        let b = w[j] * y[j];
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    let (nx, ny) = (nx.sqrt(), ny.sqrt());
    if nx * ny <= NORM_FLOOR {
        (0.0, nx, ny)
    } else {
        (dot / (nx * ny), nx, ny)
    }
}

/// Accumulates `g * d cos(w*x, w*y)` into `dx`, `dy` and optionally `dw`.
fn weighted_cos_grad(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    g: f64,
    dx: &mut [f64],
    dy: &mut [f64],
    dw: Option<&mut [f64]>,
) {
    let (cos, nx, ny) = weighted_cos(x, y, w);
    if nx * ny <= NORM_FLOOR || g == 0.0 {
        return;
    }
    let inv = 1.0 / (nx * ny);
    let mut dw = dw;
    for j in 0..x.len() {
        let a = w[j] * x[j];
        let b = w[j] * y[j];
        // d/da and d/db of cos(a, b)
        let da = b * inv - cos * a / (nx * nx);
        let db = a * inv - cos * b / (ny * ny);
        dx[j] += g * da * w[j];
        dy[j] += g * db * w[j];
        if let Some(dw) = dw.as_deref_mut() {
            dw[j] += g * (da * x[j] + db * y[j]);
        }
    }
}
