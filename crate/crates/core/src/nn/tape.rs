//! Matrix-valued reverse-mode differentiation.
//!
//! Every node holds a dense `f64` matrix. Nodes are appended in evaluation
//! order, so a single reverse sweep over the node list visits each node after
//! all of its consumers.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Unfold {
        input: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    MeanRows(Var),
    SoftmaxColumn(Var),
    Transpose(Var),
    Flatten(Var),
    NormalizeRows(Var),
    /// Externally evaluated 1x1 function with its local gradient.
    Custom(Var, Array2<f64>),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Gradients of a scalar root with respect to every node that influences it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not affect the root.
    pub fn take_or_zeros(&mut self, v: Var, like: (usize, usize)) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(like))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1 x C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// im2col for a 1-D convolution over rows (time) with zero padding.
    /// Output row `r` concatenates input rows `r*stride - pad + j`, `j < kernel`.
    pub fn unfold(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let (n, c) = x.dim();
        let out_rows = (n + 2 * pad - kernel) / stride + 1;
        let mut out = Array2::zeros((out_rows, kernel * c));
        for r in 0..out_rows {
            for j in 0..kernel {
                let src = (r * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    out.slice_mut(s![r, j * c..(j + 1) * c]).assign(&x.row(src as usize));
                }
            }
        }
        self.push(out, Op::Unfold { input, kernel, stride, pad })
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let views: Vec<_> = rows.iter().map(|r| self.value(*r).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("rows share a width");
        self.push(v, Op::StackRows(rows.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("equal row counts");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Softmax over the entries of an N x 1 column.
    pub fn softmax_column(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "softmax_column expects a column");
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = x.mapv(|v| (v - max).exp());
        let z = e.sum();
        let v = e / z;
        self.push(v, Op::SoftmaxColumn(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reshape to a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let len = x.len();
        let v = x.as_standard_layout().into_owned().into_shape_with_order((1, len)).expect("contiguous");
        self.push(v, Op::Flatten(a))
    }

    /// Scales every row to unit Euclidean length. Rows must be non-zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Appends a 1x1 node whose value and local gradient were computed outside the tape.
    pub fn custom(&mut self, input: Var, value: f64, local_grad: Array2<f64>) -> Var {
        assert_eq!(local_grad.dim(), self.value(input).dim());
        self.push(Array2::from_elem((1, 1), value), Op::Custom(input, local_grad))
    }

    /// Reverse sweep from a 1x1 `root`, seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "root must be a scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b.0];
                    let gb = &g * &self.values[a.0];
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Affine(a, scale) => accumulate(&mut grads[a.0], g.mapv(|x| x * scale)),
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.values[a.0], |d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.values[i], |d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.values[i], |d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Unfold { input, kernel, stride, pad } => {
                    let (n, c) = self.values[input.0].dim();
                    let mut gx = Array2::zeros((n, c));
                    for r in 0..g.nrows() {
                        for j in 0..*kernel {
                            let src = (r * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < n {
                                let mut dst = gx.row_mut(src as usize);
                                dst += &g.slice(s![r, j * c..(j + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Row(a, r) => {
                    let mut ga = Array2::zeros(self.values[a.0].raw_dim());
                    ga.row_mut(*r).assign(&g.row(0));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::StackRows(rows) => {
                    let mut offset = 0;
                    for r in rows {
                        let h = self.values[r.0].nrows();
                        accumulate(&mut grads[r.0], g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.values[a.0].ncols();
                    accumulate(&mut grads[a.0], g.slice(s![.., ..ca]).to_owned());
                    accumulate(&mut grads[b.0], g.slice(s![.., ca..]).to_owned());
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.values[a.0].raw_dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let n = self.values[a.0].nrows();
                    let row = g.row(0).mapv(|x| x / n as f64);
                    let ga = row.broadcast((n, row.len())).expect("broadcast").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxColumn(a) => {
                    let y = &self.values[i];
                    let inner = (&g * y).sum();
                    let ga = y * &g.mapv(|d| d - inner);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Flatten(a) => {
                    let shape = self.values[a.0].raw_dim();
                    accumulate(&mut grads[a.0], g.clone().into_shape_with_order(shape).expect("same size"));
                }
                Op::NormalizeRows(a) => {
                    let x = &self.values[a.0];
                    let y = &self.values[i];
                    let mut ga = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).dot(&x.row(r)).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = yr.dot(&gr);
                        ga.row_mut(r).assign(&((&gr - &(&yr * proj)) / norm));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Custom(a, local) => {
                    accumulate(&mut grads[a.0], local * g[[0, 0]]);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
