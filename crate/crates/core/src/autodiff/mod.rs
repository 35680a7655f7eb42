//! A small reverse-mode tape over dense row-major matrices.
//!
//! Rows are points (or pixels), columns are channels. Every operation
//! appends a node holding its output; [`Graph::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because
//! nodes only reference earlier nodes.

mod checkpoint;
mod layers;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use layers::{Linear, Mlp};
pub use optim::{adam_step, step_lr, AdamConfig, NonFinitePolicy, OptimizerKind};
pub use params::{ParamId, Parameter, ParameterStore};

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    ConcatChannels(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanPoolRows(Var),
    BroadcastRows(Var),
    Normalize { x: Var, inv_std: Array1<f64> },
    GatherMean { x: Var, groups: Vec<Vec<usize>> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Tape of recorded operations. Not `Sync`: one graph per thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    param_vars: Vec<(ParamId, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            param_vars: Vec::new(),
        }
    }

    /// A graph that evaluates values without keeping backward information.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let op = if self.record { op } else { Op::Input };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.param_vars.push((id, v));
        v
    }

    /// `x Wᵀ + b` with `x: B×C_in`, `W: C_out×C_in`, `b: 1×C_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.1 != ws.1 {
            return Err(Error::dim("linear", xs, ws));
        }
        let mut y = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != (1, ws.0) {
                return Err(Error::dim("linear bias", bs, (1, ws.0)));
            }
            y += self.value(b);
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_channels", self.shape(parts[0]), self.shape(bad)));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::dim("concat_channels", rows, e.to_string()))?;
        Ok(self.push(y, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(bad)));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim("concat_rows", cols, e.to_string()))?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, `1×C`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n == 0 {
            return Err(Error::dim("mean_pool_rows", (n, c), "at least one row"));
        }
        let y = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .into_shape_with_order((1, c))
            .expect("row vector");
        Ok(self.push(y, Op::MeanPoolRows(x)))
    }

    /// Repeats a `1×C` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::dim("broadcast_rows", (r, c), (1, c)));
        }
        let y = self.value(x).broadcast((n, c)).expect("1×C broadcast").to_owned();
        Ok(self.push(y, Op::BroadcastRows(x)))
    }

    /// Per-channel standardization over rows (mean 0, variance 1).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n == 0 {
            return Err(Error::dim("normalize_rows", (n, c), "at least one row"));
        }
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(0)).expect("non-empty");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let y = centered * &inv_std;
        Ok(self.push(y, Op::Normalize { x, inv_std }))
    }

    /// Output row `j` is the mean of input rows `groups[j]`; empty groups give zeros.
    pub fn gather_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::dim("gather_mean", (n, c), bad));
        }
        let xv = self.value(x);
        let mut y = Array2::zeros((groups.len(), c));
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let mut row = y.row_mut(j);
            for &i in g {
                row += &xv.row(i);
            }
            row /= g.len() as f64;
        }
        Ok(self.push(y, Op::GatherMean { x, groups }))
    }

    /// Mean softmax cross-entropy over rows, `1×1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if labels.len() != n || n == 0 {
            return Err(Error::dim("softmax_cross_entropy", (n, c), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim("softmax_cross_entropy label", c, bad));
        }
        let lv = self.value(logits);
        let mut probs = Array2::zeros((n, c));
        let mut loss = 0.0;
        for (i, row) in lv.outer_iter().enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[[i, j]] = (row[j] - m).exp() / z;
            }
            loss -= row[labels[i]] - m - z.ln();
        }
        let y = Array2::from_elem((1, 1), loss / n as f64);
        Ok(self.push(
            y,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from the given `(output, upstream adjoint)` seeds.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Config("backward on a non-recording graph".into()));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.dim() != self.shape(*v) {
                return Err(Error::dim("backward seed", self.shape(*v), g.dim()));
            }
            accumulate(&mut adj[v.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                accumulate(&mut adj[x.0], g.dot(self.value(*w)));
                accumulate(&mut adj[w.0], g.t().dot(self.value(*x)));
                if let Some(b) = b {
                    let c = g.ncols();
                    let db = g.sum_axis(Axis(0)).into_shape_with_order((1, c)).expect("row");
                    accumulate(&mut adj[b.0], db);
                }
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&node.value).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(&mut adj[x.0], dx);
            }
            Op::Tanh(x) => {
                let dx = g * &node.value.mapv(|y| 1.0 - y * y);
                accumulate(&mut adj[x.0], dx);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.clone());
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    accumulate(&mut adj[p.0], g.slice(s![.., start..start + c]).to_owned());
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.shape(*p).0;
                    accumulate(&mut adj[p.0], g.slice(s![start..start + r, ..]).to_owned());
                    start += r;
                }
            }
            Op::MeanPoolRows(x) => {
                let (n, c) = self.shape(*x);
                let dx = g.broadcast((n, c)).expect("1×C").mapv(|v| v / n as f64);
                accumulate(&mut adj[x.0], dx);
            }
            Op::BroadcastRows(x) => {
                let c = g.ncols();
                let dx = g.sum_axis(Axis(0)).into_shape_with_order((1, c)).expect("row");
                accumulate(&mut adj[x.0], dx);
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let mean_g = g.mean_axis(Axis(0)).expect("non-empty");
                let mean_gy = (g * y).mean_axis(Axis(0)).expect("non-empty");
                let dx = (g - &mean_g - &(y * &mean_gy)) * inv_std;
                accumulate(&mut adj[x.0], dx);
            }
            Op::GatherMean { x, groups } => {
                let mut dx = Array2::zeros(self.shape(*x));
                for (j, grp) in groups.iter().enumerate() {
                    if grp.is_empty() {
                        continue;
                    }
                    let share = g.row(j).mapv(|v| v / grp.len() as f64);
                    for &i in grp {
                        let mut row = dx.row_mut(i);
                        row += &share;
                    }
                }
                accumulate(&mut adj[x.0], dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len() as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[[i, l]] -= 1.0;
                }
                dx.mapv_inplace(|v| v * g[[0, 0]] / n);
                accumulate(&mut adj[logits.0], dx);
            }
        }
    }

    /// Parameter leaves touched by this graph.
    pub fn parameters(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().copied()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Adjoints from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.adj[v.0].as_ref()
    }

    /// Gradients of the graph's parameter leaves, in first-use order.
    pub fn parameter_grads(&self, graph: &Graph) -> Vec<(ParamId, Array2<f64>)> {
        graph
            .parameters()
            .map(|(id, v)| {
                let g = self.adj[v.0].clone().unwrap_or_else(|| Array2::zeros(graph.shape(v)));
                (id, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
