//! Minimal reverse-mode differentiation over [`Mat`] values.
//!
//! Only the handful of operations the toy denoiser needs are supported.
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list is a valid topological traversal.

use super::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x c` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// Row softmax restricted to the block-diagonal pattern
    /// `row / row_block == col / col_block`; other entries are 0.
    /// Masked entries are exactly zero in the output, so the plain softmax
    /// backward needs no mask.
    BlockSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    /// `mean((a - target)^2)`, a `1 x 1` result.
    MeanSquaredError(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a single row");
        assert_eq!(r.cols, self.value(a).cols, "add_row width");
        let mut v = self.value(a).clone();
        for chunk in v.data.chunks_mut(r.cols) {
            for (x, y) in chunk.iter_mut().zip(&r.data) {
                *x += y;
            }
        }
        let g = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn block_softmax(&mut self, x: Var, row_block: usize, col_block: usize) -> Var {
        let s = self.value(x);
        let mut out = Mat::zeros(s.rows, s.cols);
        for r in 0..s.rows {
            let block = r / row_block;
            let lo = block * col_block;
            let hi = ((block + 1) * col_block).min(s.cols);
            let row = &s.row(r)[lo..hi];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out.data[r * s.cols + lo + j] = e / z;
            }
        }
        let g = self.needs(x);
        self.push(
            out,
            Op::BlockSoftmax(x),
            g,
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * src.cols);
        for &i in &indices {
            data.extend_from_slice(src.row(i));
        }
        let v = Mat::from_vec(indices.len(), src.cols, data);
        let g = self.needs(a);
        self.push(v, Op::GatherRows(a, indices), g)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts), g)
    }

    pub fn mse(&mut self, a: Var, target: Mat) -> Var {
        let x = self.value(a);
        assert_eq!((x.rows, x.cols), (target.rows, target.cols), "mse shape");
        let n = x.len() as f64;
        let loss = x
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let g = self.needs(a);
        self.push(Mat::scalar(loss), Op::MeanSquaredError(a, target), g)
    }

    /// Gradients of the scalar `root` with respect to every node, indexed by
    /// node. Entries are `None` for nodes that do not influence `root` or do
    /// not require gradients.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));

        let acc = |grads: &mut Vec<Option<Mat>>, v: Var, g: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };

        for idx in (0..=root.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(up);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, up.matmul_t(self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&up));
                    }
                }
                Op::MatMulT(a, b) => {
                    // C = A B^T: dA = dC B, dB = dC^T A
                    if self.needs(*a) {
                        acc(&mut grads, *a, up.matmul(self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, up.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, up.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, up.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut g = Mat::zeros(1, up.cols);
                        for chunk in up.data.chunks(up.cols) {
                            for (x, y) in g.data.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                        acc(&mut grads, *row, g);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, up.clone());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, up.scaled(*s)),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = up
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(y.rows, y.cols, data));
                }
                Op::BlockSoftmax(x) => {
                    let y = &node.value;
                    let mut g = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let ur = up.row(r);
                        let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            g.data[r * y.cols + c] = yr[c] * (ur[c] - dot);
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut g = Mat::zeros(src.rows, src.cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..src.cols {
                            g.data[i * src.cols + c] += up.data[k * src.cols + c];
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let m = self.value(*p);
                        if self.needs(*p) {
                            let slice = up.data[offset * m.cols..(offset + m.rows) * m.cols].to_vec();
                            acc(&mut grads, *p, Mat::from_vec(m.rows, m.cols, slice));
                        }
                        offset += m.rows;
                    }
                }
                Op::MeanSquaredError(a, target) => {
                    let x = self.value(*a);
                    let k = 2.0 * up.data[0] / x.len() as f64;
                    let data = x
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(p, t)| k * (p - t))
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(x.rows, x.cols, data));
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(up);
            }
        }
        Grads(grads)
    }
}

pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }
}
