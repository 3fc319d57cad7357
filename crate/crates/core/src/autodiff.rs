//! Minimal reverse-mode differentiation over small dense matrices.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and scatters the gradients of parameter leaves into a
//! flat vector. Values are row-major `f64` matrices.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    fn add_assign(&mut self, o: &Mat) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * b^T`
fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// `a^T * b`
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimensions");
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert!(
        a.same_shape(b),
        "elementwise shape mismatch {}x{} vs {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param {
        offset: usize,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Cos(Var),
    Sin(Var),
    Tan(Var),
    Square(Var),
    Sqrt(Var),
    /// max(x, 0) with zero gradient where floored.
    FloorZero(Var),
    /// Clamp with pass-through gradient inside the bounds, zero when saturated.
    ClampST(Var, f64, f64),
    /// Angle wrap; gradient is the identity.
    Wrap(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    /// A parameter leaf reading `rows * cols` entries of `params` at `offset`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let m = Mat::from_vec(rows, cols, params[offset..offset + rows * cols].to_vec());
        self.push(m, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert!(rm.rows == 1 && rm.cols == am.cols, "add_row shape");
        let mut v = am.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += rm.data[c];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = map(self.value(a), |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn tan(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tan);
        self.push(v, Op::Tan(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn floor_zero(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::FloorZero(a))
    }

    pub fn clamp_st(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(v, Op::ClampST(a, lo, hi))
    }

    pub fn wrap_angle(&mut self, a: Var) -> Var {
        let v = map(self.value(a), crate::scene::wrap_angle);
        self.push(v, Op::Wrap(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let v = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut v = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&m.data[r * m.cols + start..r * m.cols + start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Gradient of the scalar `output` with respect to all parameter leaves,
    /// accumulated into a flat vector of length `n_params`.
    pub fn backward(&self, output: Var, n_params: usize) -> Vec<f64> {
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        let out = self.value(output);
        grads[output.0] = Some(Mat::filled(out.rows, out.cols, 1.0));
        let mut flat = vec![0.0; n_params];
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (f, v) in flat[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *f += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_tn(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, map(&g, |x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = zip_map(&g, bv, |x, y| x / y);
                    let gb = zip_map(&zip_map(&g, &node.value, |x, q| -x * q), bv, |x, y| x / y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, map(&g, |x| x * k)),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, v| -x * v.sin());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, v| x * v.cos());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tan(a) => {
                    let ga = zip_map(&g, &node.value, |x, t| x * (1.0 + t * t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, v| 2.0 * x * v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = zip_map(&g, &node.value, |x, s| x * 0.5 / s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::FloorZero(a) => {
                    let ga = zip_map(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampST(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = zip_map(&g, self.value(*a), |x, v| if v > lo && v < hi { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Wrap(a) => accumulate(&mut grads, *a, g),
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols {
                            ga.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, transpose(&g)),
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    ga.data[start * src.cols..start * src.cols + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * src.cols + start + c] = g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let pm = self.value(p);
                        let n = pm.rows * pm.cols;
                        let start = row * g.cols;
                        accumulate(
                            &mut grads,
                            p,
                            Mat::from_vec(pm.rows, pm.cols, g.data[start..start + n].to_vec()),
                        );
                        row += pm.rows;
                    }
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    accumulate(&mut grads, *a, Mat::filled(src.rows, src.cols, g.data[0]));
                }
            }
        }
        flat
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
