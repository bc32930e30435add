//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node to the tape. [`Graph::backward`] then walks
//! the tape in reverse, accumulating gradients. All tensors are 2-D with the
//! batch along rows.

use ndarray::{s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape bookkeeping for a 2-D convolution over CHW images flattened per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfold one flattened image into a `patch_len × (out_h·out_w)` matrix.
    fn im2col(&self, image: ndarray::ArrayView1<f64>) -> Matrix {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut cols = Matrix::zeros((self.patch_len(), oh * ow));
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            cols[[row, oy * ow + ox]] = image[src];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Fold a column matrix back onto an image, summing overlapping taps.
    fn col2im(&self, cols: &Matrix, mut out: ndarray::ArrayViewMut1<f64>) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let dst = (c * self.height + iy as usize) * self.width + ix as usize;
                            out[dst] += cols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    MatMulConstLeft(Matrix, Var),
    Softmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    /// Scalar node whose local Jacobian was computed alongside its value.
    Scalar { inputs: Vec<Var>, local: Vec<Matrix> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        if id >= self.param_vars.len() {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `constant · b` where the left factor is not differentiated.
    pub fn matmul_const_left(&mut self, constant: Matrix, b: Var) -> Var {
        let value = constant.dot(self.value(b));
        self.push(value, Op::MatMulConstLeft(constant, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, constant: Matrix) -> Var {
        let value = self.value(a) * &constant;
        self.push(value, Op::MulConst(a, constant))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::Slice(a, start, end))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((indices.len(), t.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&t.row(idx));
        }
        self.push(value, Op::Gather(table, indices.to_vec()))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.ncols(), geom.input_len(), "conv2d: input length");
        assert_eq!(w.dim(), (geom.out_channels, geom.patch_len()), "conv2d: weight shape");
        let spatial = geom.out_height() * geom.out_width();
        let mut value = Matrix::zeros((x.nrows(), geom.output_len()));
        for (r, image) in x.rows().into_iter().enumerate() {
            let cols = geom.im2col(image);
            let mut out = w.dot(&cols);
            for (c, mut row) in out.rows_mut().into_iter().enumerate() {
                row += b[[0, c]];
            }
            let flat = out.into_shape_with_order(geom.out_channels * spatial).expect("contiguous");
            value.row_mut(r).assign(&flat);
        }
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Scalar node with a caller-supplied value and local gradients, one per
    /// input and shaped like it.
    pub fn scalar_op(&mut self, value: f64, inputs: Vec<Var>, local: Vec<Matrix>) -> Var {
        debug_assert_eq!(inputs.len(), local.len());
        for (v, g) in inputs.iter().zip(&local) {
            debug_assert_eq!(self.value(*v).dim(), g.dim(), "scalar_op: local gradient shape");
        }
        self.push(Matrix::from_elem((1, 1), value), Op::Scalar { inputs, local })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let (first, _) = terms[0];
        let mut value = Matrix::zeros(self.value(first).raw_dim());
        for (v, w) in terms {
            value.scaled_add(*w, self.value(*v));
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// Backpropagate from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones(self.nodes[root.0].value.raw_dim()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulConstLeft(c, b) => {
                    accumulate(&mut grads, *b, c.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = &g * &y.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let part = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, part);
                        offset += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, indices) => {
                    let mut gt = Matrix::zeros(self.value(*table).raw_dim());
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut row = gt.row_mut(idx);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.raw_dim());
                    for ((gy, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = gy.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gy.iter()).zip(yr.iter()) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let spatial = geom.out_height() * geom.out_width();
                    let mut gx = Matrix::zeros(x.raw_dim());
                    let mut gw = Matrix::zeros(w.raw_dim());
                    let mut gb = Matrix::zeros((1, geom.out_channels));
                    for (r, image) in x.rows().into_iter().enumerate() {
                        let gout = g
                            .row(r)
                            .to_owned()
                            .into_shape_with_order((geom.out_channels, spatial))
                            .expect("contiguous");
                        let cols = geom.im2col(image);
                        gw += &gout.dot(&cols.t());
                        let gsum = gout.sum_axis(Axis(1));
                        for c in 0..geom.out_channels {
                            gb[[0, c]] += gsum[c];
                        }
                        let gcols = w.t().dot(&gout);
                        geom.col2im(&gcols, gx.row_mut(r));
                    }
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Scalar { inputs, local } => {
                    let upstream = g[[0, 0]];
                    for (v, l) in inputs.iter().zip(local) {
                        accumulate(&mut grads, *v, l * upstream);
                    }
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        accumulate(&mut grads, *v, &g * *w);
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    /// Gradient for every parameter id referenced on this tape.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Matrix>> {
        (0..n_params)
            .map(|id| {
                self.param_vars
                    .get(id)
                    .copied()
                    .flatten()
                    .and_then(|v| grads.get(v).cloned())
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
