//! A small reverse-mode automatic differentiation engine over dense f64
//! matrices, with named parameter storage and an Adam optimizer.
//!
//! A [`Graph`] records every operation of one forward pass; calling
//! [`Graph::backward`] on a scalar (1x1) node returns the gradients of every
//! node that depends on a parameter.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, rstd: Vec<f64> },
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Vec<usize> },
    ShiftRows { x: usize, offset: isize },
    Sum(usize),
    MeanRows(usize),
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Mat },
    BceWithLogits { logits: usize, targets: Vec<f64> },
    ReverseGrad(usize, f64),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    tracked: bool,
}

/// Tape of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.nrows(), v.ncols())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, value: Mat, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; root.id + 1];
        grads[root.id] = Some(Array2::ones((1, 1)));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.clone();
            let mut acc = |i: usize, d: Mat| {
                if !nodes[i].tracked {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.dot(&*val(*b)));
                    acc(*b, g.t().dot(&*val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * &*val(*b));
                    acc(*b, &g * &*val(*a));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    let y = &node.value;
                    acc(*a, &g / &*bv);
                    acc(*b, -(&g * &**y) / &*bv);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let rv = val(*r);
                    acc(*r, (&g * &*val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * &*rv);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::Relu(a) => {
                    let x = val(*a);
                    acc(*a, Zip::from(&g).and(&*x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, Zip::from(&g).and(&**y).map_collect(|&g, &y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, Zip::from(&g).and(&**y).map_collect(|&g, &y| g * y * (1.0 - y)));
                }
                Op::Abs(a) => {
                    let x = val(*a);
                    acc(*a, Zip::from(&g).and(&*x).map_collect(|&g, &x| g * x.signum() * f64::from(x != 0.0)));
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let take_min = matches!(node.op, Op::Minimum(..));
                    let (av, bv) = (val(*a), val(*b));
                    let pick_a = Zip::from(&*av).and(&*bv).map_collect(|&x, &y| {
                        if take_min { x <= y } else { x >= y }
                    });
                    acc(*a, Zip::from(&g).and(&pick_a).map_collect(|&g, &p| if p { g } else { 0.0 }));
                    acc(*b, Zip::from(&g).and(&pick_a).map_collect(|&g, &p| if p { 0.0 } else { g }));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * &**y;
                    for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &y| *r -= y * s);
                    }
                    acc(*a, d);
                }
                Op::LayerNormRows { x, rstd } => {
                    let y = &node.value;
                    let mut d = Array2::zeros(g.dim());
                    let n = g.ncols() as f64;
                    for (i, (mut drow, (grow, yrow))) in d
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(y.rows()))
                        .enumerate()
                    {
                        let mg = grow.sum() / n;
                        let mgy = grow.dot(&yrow) / n;
                        Zip::from(&mut drow)
                            .and(&grow)
                            .and(&yrow)
                            .for_each(|d, &g, &y| *d = rstd[i] * (g - mg - y * mgy));
                    }
                    acc(*x, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::ConcatCols(ids) => {
                    let mut c = 0;
                    for &i in ids {
                        let w = nodes[i].value.ncols();
                        acc(i, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut r = 0;
                    for &i in ids {
                        let h = nodes[i].value.nrows();
                        acc(i, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut d = Array2::zeros(nodes[*x].value.dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*x, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(nodes[*x].value.dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, d);
                }
                Op::GatherRows { x, index } => {
                    let mut d = Array2::zeros(nodes[*x].value.dim());
                    for (r, &i) in index.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*x, d);
                }
                Op::ShiftRows { x, offset } => {
                    let rows = g.nrows() as isize;
                    let mut d = Array2::zeros(g.dim());
                    for i in 0..rows {
                        let src = i + offset;
                        if (0..rows).contains(&src) {
                            d.row_mut(src as usize).assign(&g.row(i as usize));
                        }
                    }
                    acc(*x, d);
                }
                Op::Sum(a) => {
                    let dim = nodes[*a].value.dim();
                    acc(*a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = nodes[*a].value.dim();
                    let row = &g / r as f64;
                    acc(*a, row.broadcast((r, c)).unwrap().to_owned());
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let count = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
                    let scale = g[[0, 0]] / count;
                    let mut d = Array2::zeros(probs.dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let mut row = d.row_mut(i);
                            row.assign(&probs.row(i));
                            row[*t] -= 1.0;
                            row *= scale;
                        }
                    }
                    acc(*logits, d);
                }
                Op::BceWithLogits { logits, targets } => {
                    let x = val(*logits);
                    let scale = g[[0, 0]] / targets.len().max(1) as f64;
                    let d = Array2::from_shape_fn(x.dim(), |(i, j)| {
                        let k = i * x.ncols() + j;
                        (sigmoid(x[[i, j]]) - targets[k]) * scale
                    });
                    acc(*logits, d);
                }
                Op::ReverseGrad(a, lambda) => acc(*a, g * -*lambda),
            }
        }
        Gradients { grads }
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

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Mat> {
        self.graph.value_of(self.id)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn unary(self, value: Mat, op: Op) -> Var<'g> {
        let tracked = self.graph.tracked(&[self.id]);
        self.graph.push(value, op, tracked)
    }

    fn binary(self, other: Var<'g>, value: Mat, op: Op) -> Var<'g> {
        let tracked = self.graph.tracked(&[self.id, other.id]);
        self.graph.push(value, op, tracked)
    }

    fn same_shape(&self, other: &Var<'g>, what: &str) {
        let (a, b) = (self.dim(), other.dim());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().dot(&*other.value());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().dot(&other.value().t());
        self.binary(other, v, Op::MatMulNt(self.id, other.id))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "add");
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "sub");
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "mul");
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "div");
        let v = &*self.value() / &*other.value();
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    /// Adds a 1 x c row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let r = row.value();
        assert_eq!((1, self.dim().1), r.dim(), "add_row: bad row shape");
        let v = &*self.value() + &*r;
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a 1 x c row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let r = row.value();
        assert_eq!((1, self.dim().1), r.dim(), "mul_row: bad row shape");
        let v = &*self.value() * &*r;
        self.binary(row, v, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = &*self.value() + c;
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().mapv(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        let v = self.value().mapv(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn minimum(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "minimum");
        let v = Zip::from(&*self.value()).and(&*other.value()).map_collect(|&a, &b| a.min(b));
        self.binary(other, v, Op::Minimum(self.id, other.id))
    }

    pub fn maximum(self, other: Var<'g>) -> Var<'g> {
        self.same_shape(&other, "maximum");
        let v = Zip::from(&*self.value()).and(&*other.value()).map_collect(|&a, &b| a.max(b));
        self.binary(other, v, Op::Maximum(self.id, other.id))
    }

    pub fn softmax_rows(self) -> Var<'g> {
        let mut v = (*self.value()).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = x.ncols() as f64;
        let mut v = Array2::zeros(x.dim());
        let mut rstd = Vec::with_capacity(x.nrows());
        for (mut out, row) in v.rows_mut().into_iter().zip(x.rows()) {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |a, &b| a + (b - mean) * (b - mean)) / n;
            let r = 1.0 / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &x| *o = (x - mean) * r);
            rstd.push(r);
        }
        self.unary(v, Op::LayerNormRows { x: self.id, rstd })
    }

    pub fn t(self) -> Var<'g> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value().slice(s![start..start + len, ..]).to_owned();
        self.unary(v, Op::SliceRows { x: self.id, start })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value().slice(s![.., start..start + len]).to_owned();
        self.unary(v, Op::SliceCols { x: self.id, start })
    }

    pub fn gather_rows(self, index: &[usize]) -> Var<'g> {
        let x = self.value();
        let v = x.select(Axis(0), index);
        self.unary(
            v,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
        )
    }

    /// Row `i` of the output is row `i + offset` of the input, or zero when
    /// out of range.
    pub fn shift_rows(self, offset: isize) -> Var<'g> {
        let x = self.value();
        let rows = x.nrows() as isize;
        let mut v = Array2::zeros(x.dim());
        for i in 0..rows {
            let src = i + offset;
            if (0..rows).contains(&src) {
                v.row_mut(i as usize).assign(&x.row(src as usize));
            }
        }
        self.unary(v, Op::ShiftRows { x: self.id, offset })
    }

    pub fn sum(self) -> Var<'g> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column means as a 1 x c row.
    pub fn mean_rows(self) -> Var<'g> {
        let v = self.value().mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.unary(v, Op::MeanRows(self.id))
    }

    /// Mean softmax cross-entropy over rows with a target; rows whose target
    /// is `None` are ignored.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.nrows(), targets.len(), "cross_entropy: one target per row");
        let mut probs = (*x).clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.fold(0.0, |a, &b| a + (b - m).exp()).ln();
            if let Some(t) = targets[i] {
                total += lse - row[t];
                count += 1;
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let v = Array2::from_elem((1, 1), total / count.max(1) as f64);
        self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of sigmoid(self) against `targets`
    /// (row-major, one per element).
    pub fn bce_with_logits(self, targets: &[f64]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.len(), targets.len(), "bce_with_logits: one target per element");
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let v = Array2::from_elem((1, 1), total / targets.len().max(1) as f64);
        self.unary(
            v,
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.to_vec(),
            },
        )
    }

    /// Identity forward; backward multiplies incoming gradients by `-lambda`.
    pub fn reverse_grad(self, lambda: f64) -> Var<'g> {
        let v = (*self.value()).clone();
        self.unary(v, Op::ReverseGrad(self.id, lambda))
    }
}

pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let g = parts[0].graph;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let tracked = g.tracked(&ids);
    g.push(v, Op::ConcatCols(ids), tracked)
}

pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let g = parts[0].graph;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let tracked = g.tracked(&ids);
    g.push(v, Op::ConcatRows(ids), tracked)
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Converter and captioner.
    Model,
    /// View classifier.
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: ParamGroup,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i] = Param { name, value, group };
            return i;
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, group });
        self.params.len() - 1
    }

    /// Xavier-uniform initialized weight.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup, rng: &mut impl Rng) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.insert(name, w, group)
    }

    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, group: ParamGroup, rng: &mut impl Rng) -> usize {
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        self.insert(name, w, group)
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        let kept: Vec<Param> = self.params.drain(..).filter(|p| p.group != group).collect();
        self.params = kept;
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Binds parameters of a store to leaves of a graph on first use.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Binder<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Binder {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Leaf for the named parameter.
    ///
    /// Panics if the name is unknown; parameter names are fixed by model
    /// construction.
    pub fn p(&self, name: &str) -> Var<'g> {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let mut vars = self.vars.borrow_mut();
        *vars[i].get_or_insert_with(|| self.graph.variable(self.store.params[i].value.clone()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index_of(name).is_some()
    }

    /// Gradients per parameter index (None for parameters not used).
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Mat>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Adam with one learning rate per [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr_model: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Adam {
    pub fn new(lr_model: f64, lr_classifier: f64) -> Self {
        Adam {
            lr_model,
            lr_classifier,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Drops optimizer state of parameters no longer in the store.
    pub fn forget_missing(&mut self, store: &ParamStore) {
        self.moments.retain(|name, _| store.index_of(name).is_some());
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, g) in store.params_mut().iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let lr = match p.group {
                ParamGroup::Model => self.lr_model,
                ParamGroup::Classifier => self.lr_classifier,
            };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            if m.dim() != g.dim() {
                *m = Array2::zeros(g.dim());
                *v = Array2::zeros(g.dim());
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
