use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    L2Distance(usize, usize),
    RowL2Distance(usize, usize),
    NormalizeRows(usize),
    Pick(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only tape of operations. Parents always precede children, so a
/// single reverse sweep over the node list is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that never receives a gradient (data, frozen weights, detached
    /// features).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MatMul(a.0, b.0), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = matrix_dims("transpose", x)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Transpose(a.0), value, rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Add(a.0, b.0), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Sub(a.0, b.0), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Mul(a.0, b.0), value, rg))
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (_, n) = matrix_dims("add_row", x)?;
        if r.len() != n {
            return Err(shape_err("add_row", x, r));
        }
        let mut value = x.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % n];
        }
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(Op::AddRow(a.0, row.0), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a.0]);
        self.push(Op::Scale(a.0, c), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a.0]);
        self.push(Op::AddScalar(a.0), value, rg)
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a.0]);
        self.push(Op::Relu(a.0), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(Op::Sum(a.0), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a.0]);
        self.push(Op::Mean(a.0), value, rg)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Shape {
                op,
                left: x.shape().to_vec(),
                right: vec![axis],
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = lanes(x.shape(), axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (d[idx(k)] - max).exp();
                    d[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    d[idx(k)] /= total;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Softmax { x: a.0, axis }, out, rg))
    }

    /// `x - max - log(sum(exp(x - max)))` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = lanes(x.shape(), axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|k| (d[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    d[idx(k)] = d[idx(k)] - max - lse;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::LogSoftmax { x: a.0, axis }, out, rg))
    }

    /// Euclidean distance between two same-shape tensors, as a scalar.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same("l2_distance", a, b, |p, q| p - q)?;
        let value = Tensor::scalar(diff.norm());
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::L2Distance(a.0, b.0), value, rg))
    }

    /// Row-wise Euclidean distances between two n×D matrices, giving [n].
    pub fn row_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same("row_l2_distance", a, b, |p, q| p - q)?;
        let (n, _) = matrix_dims("row_l2_distance", &diff)?;
        let out = (0..n).map(|i| super::dot(diff.row(i), diff.row(i)).sqrt()).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::RowL2Distance(a.0, b.0), Tensor::vector(out), rg))
    }

    /// L2-normalizes each row (a vector is a single row). Zero rows stay
    /// zero and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            super::normalize_in_place(value.row_mut(i));
        }
        let rg = self.rg(&[a.0]);
        self.push(Op::NormalizeRows(a.0), value, rg)
    }

    /// Selects `x[i, index[i]]` from each row of an n×K matrix.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, k) = matrix_dims("pick", x)?;
        if index.len() != n || index.iter().any(|&j| j >= k) {
            return Err(Error::InvalidInput(format!(
                "pick: {} indices (max {:?}) for a {n}x{k} matrix",
                index.len(),
                index.iter().max()
            )));
        }
        let out = index.iter().enumerate().map(|(i, &j)| x.data()[i * k + j]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Pick(a.0, index.to_vec()), Tensor::vector(out), rg))
    }

    /// Row lookup into a table (embedding gather).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = matrix_dims("gather_rows", t)?;
        if index.is_empty() || index.iter().any(|&j| j >= v) {
            return Err(Error::InvalidInput(format!(
                "gather_rows: bad indices for a table of {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &j in index {
            out.extend_from_slice(t.row(j));
        }
        let value = Tensor::matrix(index.len(), d, out)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(Op::GatherRows(table.0, index.to_vec()), value, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, d) = matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidInput(format!(
                "slice_rows: rows {start}..{} of {m}",
                start + len
            )));
        }
        let value = Tensor::matrix(len, d, x.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::SliceRows { x: a.0, start }, value, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidInput("concat_rows: no parts".into()));
        };
        let (_, d) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let x = self.value(*p);
            let (m, c) = matrix_dims("concat_rows", x)?;
            if c != d {
                return Err(shape_err("concat_rows", self.value(*first), x));
            }
            rows += m;
            out.extend_from_slice(x.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::ConcatRows(ids), Tensor::matrix(rows, d, out)?, rg))
    }

    /// Reverse sweep from a scalar loss. Every trainable leaf ends up with a
    /// gradient (zeros when the loss does not depend on it); earlier
    /// gradients are discarded, never accumulated into.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, contrib: Vec<f64>| match &mut grads[j] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let yrow = &y.data()[p * n..(p + 1) * n];
                            ga[r * k + p] = super::dot(&g[r * n..(r + 1) * n], yrow);
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let xv = x.data()[r * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] = g[c * m + r];
                    }
                }
                acc(*a, ga);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, g.iter().zip(y).map(|(p, q)| p * q).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(x).map(|(p, q)| p * q).collect());
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for (j, v) in g.iter().enumerate() {
                        gr[j % n] += v;
                    }
                    acc(*row, gr);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + r;
                        let s: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + r;
                        let s: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * s;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::L2Distance(a, b) => {
                let d = node.value.data()[0];
                let (x, y) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = if d > 0.0 {
                    x.iter().zip(y).map(|(p, q)| g[0] * (p - q) / d).collect()
                } else {
                    vec![0.0; x.len()]
                };
                if wants(*b) {
                    acc(*b, ga.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    acc(*a, ga);
                }
            }
            Op::RowL2Distance(a, b) => {
                let dists = node.value.data();
                let (x, y) = (val(*a), val(*b));
                let cols = x.cols();
                let mut ga = vec![0.0; x.len()];
                for (r, &d) in dists.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let k = r * cols + c;
                        ga[k] = g[r] * (x.data()[k] - y.data()[k]) / d;
                    }
                }
                if wants(*b) {
                    acc(*b, ga.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    acc(*a, ga);
                }
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let cols = y.cols();
                let mut gx = vec![0.0; x.len()];
                for r in 0..y.rows() {
                    let norm = super::dot(x.row(r), x.row(r)).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let proj = super::dot(yr, gr);
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * proj) / norm;
                    }
                }
                acc(*a, gx);
            }
            Op::Pick(a, index) => {
                let k = val(*a).shape()[1];
                let mut ga = vec![0.0; val(*a).len()];
                for (r, &j) in index.iter().enumerate() {
                    ga[r * k + j] += g[r];
                }
                acc(*a, ga);
            }
            Op::GatherRows(t, index) => {
                let d = val(*t).shape()[1];
                let mut gt = vec![0.0; val(*t).len()];
                for (r, &j) in index.iter().enumerate() {
                    for c in 0..d {
                        gt[j * d + c] += g[r * d + c];
                    }
                }
                acc(*t, gt);
            }
            Op::SliceRows { x, start } => {
                let d = val(*x).shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::eye(2));
        let ones = g.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let ia = g.matmul(i, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));
        let s = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let a0 = Tensor::normal(&[3, 3], 1.0, &mut r);
        let b0 = Tensor::normal(&[3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let p = g.matmul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut g = Graph::new();
                let a = g.constant(x.clone());
                let b = g.constant(b0.clone());
                let p = g.matmul(a, b).unwrap();
                let l = g.sum(p);
                g.value(l).item()
            },
            &a0,
            1e-5,
        );
        assert!(relative_error(g.grad(a).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.0, 5.0], [0.0, 5.0]]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn log_softmax_uniform_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = g.log_softmax(x, 0).unwrap();
        for v in g.value(l).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        let x = g.constant(Tensor::normal(&[8], 3.0, &mut rng(3)));
        let l = g.log_softmax(x, 0).unwrap();
        let total: f64 = g.value(l).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_gradient() {
        let x0 = Tensor::normal(&[8], 1.0, &mut rng(11));
        let w = Tensor::normal(&[8], 1.0, &mut rng(12));
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let l = g.log_softmax(xv, 0).unwrap();
            let m = g.mul(l, wv).unwrap();
            let s = g.sum(m);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let wv = g.constant(w.clone());
        let l = g.log_softmax(xv, 0).unwrap();
        let m = g.mul(l, wv).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        let fd = finite_diff_grad(f, &x0, 1e-5);
        assert!(relative_error(g.grad(xv).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn l2_distance_values_and_kink() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![3.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 4.0]));
        let d = g.l2_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 5.0);

        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.l2_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);

        let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.l2_distance(a, c).is_err());
    }

    #[test]
    fn elementwise_suite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = g.mean(v);
        assert_eq!(g.value(m).item(), 2.0);
        let s = g.sum(v);
        assert_eq!(g.value(s).item(), 6.0);
        let sc = g.scale(v, 2.0);
        assert_eq!(g.value(sc).data(), &[2.0, 4.0, 6.0]);
        let d = g.sub(sc, v).unwrap();
        assert_eq!(g.value(d), g.value(v));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut r = rng(5);
        let mut g = Graph::new();
        let w = g.param(Tensor::normal(&[4, 3], 1.0, &mut r));
        let x = g.constant(Tensor::normal(&[5, 4], 1.0, &mut r));
        let h = g.matmul(x, w).unwrap();
        let h = g.relu(h);
        let n = g.normalize_rows(h);
        let l = g.log_softmax(n, 1).unwrap();
        let loss = g.mean(l);
        g.backward(loss).unwrap();
        let first = g.grad(w).unwrap().clone();
        g.backward(loss).unwrap();
        assert_eq!(first.data(), g.grad(w).unwrap().data());
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(Tensor::vector(vec![3.0]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn structural_ops_gradients() {
        let mut r = rng(9);
        let t0 = Tensor::normal(&[5, 3], 1.0, &mut r);
        let w = Tensor::normal(&[6, 3], 1.0, &mut r);
        let build = |g: &mut Graph, t: Var| {
            let rows = g.gather_rows(t, &[4, 0, 0, 2]).unwrap();
            let top = g.slice_rows(t, 1, 2).unwrap();
            let cat = g.concat_rows(&[rows, top]).unwrap();
            let tr = g.transpose(cat).unwrap();
            let tt = g.transpose(tr).unwrap();
            let wv = g.constant(w.clone());
            let m = g.mul(tt, wv).unwrap();
            let p = g.pick(m, &[0, 1, 2, 0, 1, 2]).unwrap();
            g.sum(p)
        };
        let mut g = Graph::new();
        let t = g.param(t0.clone());
        let l = build(&mut g, t);
        g.backward(l).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut g = Graph::new();
                let t = g.constant(x.clone());
                let l = build(&mut g, t);
                g.value(l).item()
            },
            &t0,
            1e-5,
        );
        assert!(relative_error(g.grad(t).unwrap(), &fd) < 1e-8);
    }

    #[test]
    fn normalize_and_distance_gradients() {
        let mut r = rng(21);
        let a0 = Tensor::normal(&[4, 5], 1.0, &mut r);
        let b0 = Tensor::normal(&[4, 5], 1.0, &mut r);
        let bias = Tensor::normal(&[5], 1.0, &mut r);
        let build = |g: &mut Graph, a: Var| {
            let b = g.constant(b0.clone());
            let bias = g.constant(bias.clone());
            let n = g.normalize_rows(a);
            let n = g.add_row(n, bias).unwrap();
            let d = g.row_l2_distance(n, b).unwrap();
            let d = g.add_scalar(d, -3.0);
            let sm = g.softmax(d, 0).unwrap();
            let w = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
            let sm = g.mul(sm, w).unwrap();
            let s = g.sum(sm);
            let aa = g.slice_rows(a, 2, 1).unwrap();
            let bb = g.slice_rows(b, 0, 1).unwrap();
            let e = g.l2_distance(aa, bb).unwrap();
            g.add(s, e).unwrap()
        };
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let l = build(&mut g, a);
        g.backward(l).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let mut g = Graph::new();
                let a = g.constant(x.clone());
                let l = build(&mut g, a);
                g.value(l).item()
            },
            &a0,
            1e-5,
        );
        assert!(relative_error(g.grad(a).unwrap(), &fd) < 1e-6);
    }
}
