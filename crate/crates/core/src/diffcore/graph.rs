use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{invalid, shape, Error, Result};
use crate::pointops::Stencil;

use super::params::ParamStore;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    DivScalar { x: Var, s: Var },
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    /// n×1 gate broadcast across the columns of an n×d matrix
    ColBroadcastMul { gate: Var, x: Var },
    GatherRows { x: Var, index: Vec<usize> },
    Stencil { x: Var, stencil: Stencil },
    /// max over consecutive groups of rows; stores the argmax source row per output entry
    SegmentMax { x: Var, argmax: Array2<usize> },
    RowNorm(Var),
    Sum(Var),
    SoftmaxCe { logits: Var, softmax: Array2<f64>, label: usize },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode computation graph, rebuilt for every forward pass.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

fn same_shape(op: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape(format!("{op}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load a named parameter; its gradient is exported by [`Graph::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bindings.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.bindings.push((name.to_string(), v));
        Ok(v)
    }

    /// Load a parameter as a constant, cutting gradient flow (frozen weights).
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Row-wise affine map `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.nrows() || bv.dim() != (1, wv.ncols()) {
            return Err(shape(format!(
                "linear: x {:?}, W {:?}, b {:?}",
                xv.dim(),
                wv.dim(),
                bv.dim()
            )));
        }
        let out = xv.dot(wv) + bv;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Divide every entry of `x` by the 1×1 node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).dim() != (1, 1) {
            return Err(shape(format!("divisor must be 1×1, got {:?}", self.value(s).dim())));
        }
        let out = self.value(x) / self.scalar(s);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::DivScalar { x, s }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return Err(shape(format!("concat_cols: rows {} vs {}", av.nrows(), bv.nrows())));
        }
        let out = concatenate(Axis(1), &[av.view(), bv.view()]).expect("rows checked");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.ncols() {
            return Err(shape(format!("slice_cols {start}..{end} of {} columns", xv.ncols())));
        }
        let out = xv.slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Multiply every column of `x` (n×d) by the per-row gate `gate` (n×1).
    pub fn col_broadcast_mul(&mut self, gate: Var, x: Var) -> Result<Var> {
        let (gv, xv) = (self.value(gate), self.value(x));
        if gv.ncols() != 1 || gv.nrows() != xv.nrows() {
            return Err(shape(format!("gate {:?} against {:?}", gv.dim(), xv.dim())));
        }
        let out = xv * gv;
        let rg = self.rg(gate) || self.rg(x);
        Ok(self.push(out, Op::ColBroadcastMul { gate, x }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.nrows()) {
            return Err(invalid(format!("row index {bad} out of {}", xv.nrows())));
        }
        let out = xv.select(Axis(0), index);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Apply a fixed sparse row-mixing stencil to `x`.
    pub fn stencil(&mut self, x: Var, stencil: &Stencil) -> Result<Var> {
        let xv = self.value(x);
        if stencil.index.iter().any(|&i| i >= xv.nrows()) {
            return Err(invalid("stencil index out of range"));
        }
        let out = stencil.apply(xv.view());
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Stencil {
                x,
                stencil: stencil.clone(),
            },
            rg,
        ))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        if group == 0 || n == 0 || n % group != 0 {
            return Err(shape(format!("segment_max: {n} rows in groups of {group}")));
        }
        let groups = n / group;
        let mut out = Array2::zeros((groups, d));
        let mut argmax = Array2::zeros((groups, d));
        for gi in 0..groups {
            for c in 0..d {
                let base = gi * group;
                let mut best = base;
                for r in base + 1..base + group {
                    // strict: ties stay on the lowest row
                    if xv[[r, c]] > xv[[best, c]] {
                        best = r;
                    }
                }
                out[[gi, c]] = xv[[best, c]];
                argmax[[gi, c]] = best;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Column-wise max over all rows, giving a 1×d node.
    pub fn reduce_max_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).nrows();
        self.segment_max(x, n)
    }

    /// Euclidean norm of each row, as an n×1 node. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(out, Op::RowNorm(x), rg)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `-log softmax(logits)[label]` for a 1×C logit row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != 1 || lv.ncols() < 2 {
            return Err(shape(format!("logits must be 1×C with C ≥ 2, got {:?}", lv.dim())));
        }
        if label >= lv.ncols() {
            return Err(invalid(format!("label {label} out of {} classes", lv.ncols())));
        }
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = lv.mapv(|v| (v - max).exp());
        let z: f64 = exp.sum();
        let softmax = exp / z;
        let loss = -(lv[[0, label]] - max - z.ln());
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCe {
                logits,
                softmax,
                label,
            },
            rg,
        ))
    }

    /// Reset every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagate from a scalar node, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).dim()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut upstream: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = upstream[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at node {id}")));
            }
            self.propagate(id, &g, &mut upstream);
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => *acc += &g,
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Array2<f64>, up: &mut [Option<Array2<f64>>]) {
        let mut send = |v: Var, contrib: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut up[v.0] {
                Some(acc) => *acc += &contrib,
                slot => *slot = Some(contrib),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*w) {
                    send(*w, xv.t().dot(g));
                }
                if self.rg(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    send(*x, g.dot(&wv.t()));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Hadamard(a, b) => {
                send(*a, g * self.value(*b));
                send(*b, g * self.value(*a));
            }
            Op::Scale(x, c) => send(*x, g * *c),
            Op::DivScalar { x, s } => {
                let d = self.scalar(*s);
                if self.rg(*s) {
                    let dot = (g * self.value(*x)).sum();
                    send(*s, Array2::from_elem((1, 1), -dot / (d * d)));
                }
                if self.rg(*x) {
                    send(*x, g / d);
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, Zip::from(g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    Zip::from(g)
                        .and(xv)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
                );
            }
            Op::ConcatCols(a, b) => {
                let d1 = self.value(*a).ncols();
                send(*a, g.slice(s![.., ..d1]).to_owned());
                send(*b, g.slice(s![.., d1..]).to_owned());
            }
            Op::SliceCols { x, start } => {
                let mut full = Array2::zeros(self.value(*x).dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*x, full);
            }
            Op::ColBroadcastMul { gate, x } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                if self.rg(*gate) {
                    send(*gate, (g * xv).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                if self.rg(*x) {
                    send(*x, g * gv);
                }
            }
            Op::GatherRows { x, index } => {
                let mut full = Array2::zeros(self.value(*x).dim());
                for (r, &src) in index.iter().enumerate() {
                    let mut row = full.row_mut(src);
                    row += &g.row(r);
                }
                send(*x, full);
            }
            Op::Stencil { x, stencil } => {
                let mut full = Array2::zeros(self.value(*x).dim());
                let (n, k) = stencil.index.dim();
                for i in 0..n {
                    for j in 0..k {
                        full.row_mut(stencil.index[[i, j]])
                            .scaled_add(stencil.weight[[i, j]], &g.row(i));
                    }
                }
                send(*x, full);
            }
            Op::SegmentMax { x, argmax } => {
                let mut full = Array2::zeros(self.value(*x).dim());
                for ((gi, c), &src) in argmax.indexed_iter() {
                    full[[src, c]] += g[[gi, c]];
                }
                send(*x, full);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let norms = &node.value;
                let mut full = Array2::zeros(xv.dim());
                for (r, mut row) in full.rows_mut().into_iter().enumerate() {
                    let n = norms[[r, 0]];
                    if n > 0.0 {
                        row.scaled_add(g[[r, 0]] / n, &xv.row(r));
                    }
                }
                send(*x, full);
            }
            Op::Sum(x) => send(*x, Array2::from_elem(self.value(*x).dim(), g[[0, 0]])),
            Op::SoftmaxCe {
                logits,
                softmax,
                label,
            } => {
                let mut d = softmax.clone();
                d[[0, *label]] -= 1.0;
                send(*logits, d * g[[0, 0]]);
            }
        }
    }

    /// Add the gradients of every bound parameter into the store.
    pub fn accumulate_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, v) in &self.bindings {
            if let Some(g) = self.grad(*v) {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Names and handles of the parameters loaded into this graph.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
