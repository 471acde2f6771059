//! Wengert-list reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every operation appends a node holding its value and the recipe for its
//! vector-Jacobian product. `backward` walks the list once in reverse, so each
//! node is visited exactly once and fan-out gradients accumulate additively.

use std::cmp::Ordering;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks an index map entry that reads an implicit zero (convolution padding).
pub const PAD: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulCol(Var, Var),
    Film { h: Var, gamma: Var, beta: Var },
    Sin(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    SumAll(Var),
    RowSum(Var),
    GroupRows(Var, usize),
    ExclCumsum(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    SumCanonical(Vec<Var>),
    CompColor { sigmas: Vec<Var>, colors: Vec<Var>, trans: Var, eps: f64 },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned vector, zeros when no gradient reached `v`.
    pub fn wrt_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds layouts of `a` (m×k), `b` (k×n) and
    // the contiguous row-major `c` (m×n); all slices outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Order used to make multi-part sums independent of part order.
fn canonical_cmp(a: &(f64, [f64; 3]), b: &(f64, [f64; 3])) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1[0].total_cmp(&b.1[0]))
        .then(a.1[1].total_cmp(&b.1[1]))
        .then(a.1[2].total_cmp(&b.1[2]))
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

    fn push(&mut self, op: &'static str, rows: usize, cols: usize, value: Vec<f64>, kind: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// Leaf holding a constant (never receives a gradient).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push("constant", r, c, t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape("constant", format!("{}x{} vs {} values", rows, cols, data.len())));
        }
        self.push("constant", rows, cols, data, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push("param", r, c, t.data().to_vec(), Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        dgemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", m, n, out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", n, m, out, Op::Transpose(a), rg)
    }

    /// Constant copy of `a`: same value, cut from the gradient path.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).to_vec();
        self.push("detach", m, n, out, Op::Leaf, false)
    }

    /// `y = x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(Error::shape("add_row_bias", format!("[{m},{n}] + {:?}", self.shape(b))));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("add_row_bias", m, n, out, Op::AddRowBias(a, b), rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        let (m, n) = self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(op, m, n, out, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(op, m, n, out, kind, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a[n,m] * b[n,1]`, broadcasting the column over `m`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(b) != (n, 1) {
            return Err(Error::shape("mul_col", format!("[{n},{m}] * {:?}", self.shape(b))));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks_exact(m.max(1))
            .zip(bv)
            .flat_map(|(row, s)| row.iter().map(move |x| x * s))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("mul_col", n, m, out, Op::MulCol(a, b), rg)
    }

    /// Feature-wise modulation `gamma ⊙ h + beta`.
    ///
    /// `gamma` and `beta` are `[g, d]`; the rows of `h` are split into `g`
    /// equal contiguous blocks, block `j` modulated by row `j`.
    pub fn film(&mut self, h: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.shape(h);
        let (g, dg) = self.shape(gamma);
        if self.shape(beta) != (g, dg) || dg != d || g == 0 || n % g != 0 {
            return Err(Error::shape(
                "film",
                format!("h [{n},{d}], gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let block = n / g;
        let (hv, gv, bv) = (self.value(h), self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let j = r / block;
            let grow = &gv[j * d..(j + 1) * d];
            let brow = &bv[j * d..(j + 1) * d];
            out.extend(hv[r * d..(r + 1) * d].iter().zip(grow).zip(brow).map(|((x, s), t)| s * x + t));
        }
        let rg = self.rg(&[h, gamma, beta]);
        self.push("film", n, d, out, Op::Film { h, gamma, beta }, rg)
    }

    /// `sin(omega0 · x)`.
    pub fn sin(&mut self, a: Var, omega0: f64) -> Result<Var> {
        self.map("sin", a, |x| (omega0 * x).sin(), Op::Sin(a, omega0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map("leaky_relu", a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", 1, 1, vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum across columns: `[n,m] -> [n,1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let out = if m == 0 {
            vec![0.0; n]
        } else {
            self.value(a).chunks_exact(m).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(&[a]);
        self.push("row_sum", n, 1, out, Op::RowSum(a), rg)
    }

    /// Sum consecutive blocks of `group` rows: `[n·group, m] -> [n, m]`.
    pub fn group_rows_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, m) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_rows_sum", format!("{rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for r in 0..rows {
            let dst = &mut out[(r / group) * m..(r / group + 1) * m];
            for (d, s) in dst.iter_mut().zip(&av[r * m..(r + 1) * m]) {
                *d += s;
            }
        }
        let rg = self.rg(&[a]);
        self.push("group_rows_sum", n, m, out, Op::GroupRows(a, group), rg)
    }

    /// Exclusive prefix sum along each row: `out[r,k] = Σ_{j<k} a[r,j]`.
    pub fn excl_cumsum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let mut acc = 0.0;
            for k in 0..m {
                out[r * m + k] = acc;
                acc += av[r * m + k];
            }
        }
        let rg = self.rg(&[a]);
        self.push("excl_cumsum", n, m, out, Op::ExclCumsum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if n * m != rows * cols {
            return Err(Error::shape("reshape", format!("[{n},{m}] -> [{rows},{cols}]")));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", rows, cols, out, Op::Reshape(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let n = self.shape(*first).0;
        if parts.iter().any(|p| self.shape(*p).0 != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                let m = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[r * m..(r + 1) * m]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", n, total, out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if start + len > m {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {m} cols", start + len)));
        }
        let av = self.value(a);
        let out = (0..n).flat_map(|r| av[r * m + start..r * m + start + len].iter().copied()).collect();
        let rg = self.rg(&[a]);
        self.push("slice_cols", n, len, out, Op::SliceCols(a, start), rg)
    }

    /// `out[j] = a[index[j]]` over flat storage; [`PAD`] entries read zero.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::shape("gather", format!("{} indices for [{rows},{cols}]", index.len())));
        }
        let av = self.value(a);
        if index.iter().any(|&i| i != PAD && i >= av.len()) {
            return Err(Error::shape("gather", "index out of range"));
        }
        let out = index.iter().map(|&i| if i == PAD { 0.0 } else { av[i] }).collect();
        let rg = self.rg(&[a]);
        self.push("gather", rows, cols, out, Op::Gather(a, index), rg)
    }

    /// Adjoint of [`Tape::gather`]: `out[index[j]] += a[j]`.
    pub fn scatter_add(&mut self, a: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if index.len() != av.len() {
            return Err(Error::shape("scatter_add", format!("{} indices for {} values", index.len(), av.len())));
        }
        let mut out = vec![0.0; rows * cols];
        for (&i, v) in index.iter().zip(av) {
            if i == PAD {
                continue;
            }
            let Some(slot) = out.get_mut(i) else {
                return Err(Error::shape("scatter_add", "index out of range"));
            };
            *slot += v;
        }
        let rg = self.rg(&[a]);
        self.push("scatter_add", rows, cols, out, Op::ScatterAdd(a, index), rg)
    }

    /// Elementwise sum whose result does not depend on input order.
    pub fn sum_canonical(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("sum_canonical", "no inputs"));
        };
        let (n, m) = self.shape(*first);
        for p in parts {
            if self.shape(*p) != (n, m) {
                return Err(Error::shape("sum_canonical", "shapes differ"));
            }
        }
        let mut scratch = Vec::with_capacity(parts.len());
        let out = (0..n * m)
            .map(|e| {
                scratch.clear();
                scratch.extend(parts.iter().map(|p| self.value(*p)[e]));
                scratch.sort_by(f64::total_cmp);
                scratch.iter().sum()
            })
            .collect();
        let rg = self.rg(parts);
        self.push("sum_canonical", n, m, out, Op::SumCanonical(parts.to_vec()), rg)
    }

    /// Composite color of several parts at shared samples.
    ///
    /// `sigmas[i]` is `[M,1]`, `colors[i]` is `[M,3]`, `trans` is `[M,1]`.
    /// Per sample, `coeff_i = sigma_i · T` and the color is
    /// `Σ_i coeff_i c_i / Σ_i coeff_i`, or `fallback` when the total is below
    /// `eps`.
    pub fn comp_color(&mut self, sigmas: &[Var], colors: &[Var], trans: Var, eps: f64, fallback: [f64; 3]) -> Result<Var> {
        if sigmas.is_empty() || sigmas.len() != colors.len() {
            return Err(Error::shape("comp_color", "need one color per density"));
        }
        let m = self.shape(trans).0;
        if self.shape(trans) != (m, 1)
            || sigmas.iter().any(|s| self.shape(*s) != (m, 1))
            || colors.iter().any(|c| self.shape(*c) != (m, 3))
        {
            return Err(Error::shape("comp_color", "expected [M,1] densities/transmittance and [M,3] colors"));
        }
        let tv = self.value(trans);
        let mut out = vec![0.0; m * 3];
        let mut terms: Vec<(f64, [f64; 3])> = Vec::with_capacity(sigmas.len());
        for k in 0..m {
            terms.clear();
            for (s, c) in sigmas.iter().zip(colors) {
                let cv = &self.value(*c)[k * 3..k * 3 + 3];
                terms.push((self.value(*s)[k] * tv[k], [cv[0], cv[1], cv[2]]));
            }
            terms.sort_by(canonical_cmp);
            let total: f64 = terms.iter().map(|t| t.0).sum();
            let px = &mut out[k * 3..k * 3 + 3];
            if total < eps {
                px.copy_from_slice(&fallback);
            } else {
                px.copy_from_slice(&crate::compositor::anchored_mix(&terms, total));
            }
        }
        let mut inputs = sigmas.to_vec();
        inputs.extend_from_slice(colors);
        let rg = self.rg(&inputs);
        let kind = Op::CompColor {
            sigmas: sigmas.to_vec(),
            colors: colors.to_vec(),
            trans,
            eps,
        };
        self.push("comp_color", m, 3, out, kind, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output);
        if out.value.len() != 1 {
            return Err(Error::shape("backward", format!("output has {} elements", out.value.len())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let elementwise = |v: Var, d: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            let x = &self.nodes[v.0].value;
            g.iter().zip(x.iter().zip(&node.value)).map(|(gi, (xi, yi))| gi * d(*xi, *yi)).collect()
        };
        let add_into = |local: Vec<f64>| move |s: &mut [f64]| s.iter_mut().zip(&local).for_each(|(s, l)| *s += l);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G B^T, dB = A^T G
                acc(*a, &|s| dgemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), s, 1.0));
                acc(*b, &|s| dgemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), s, 1.0));
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::AddRowBias(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi));
                let n = node.cols;
                acc(*b, &|s| {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, gi)| *s += gi);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| s.iter_mut().zip(g).zip(bv).for_each(|((s, gi), y)| *s += gi * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(av).for_each(|((s, gi), x)| *s += gi * x));
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += c * gi)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi)),
            Op::MulCol(a, b) => {
                let m = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| {
                    for (r, bi) in bv.iter().enumerate() {
                        for j in 0..m {
                            s[r * m + j] += g[r * m + j] * bi;
                        }
                    }
                });
                acc(*b, &|s| {
                    for (r, sr) in s.iter_mut().enumerate() {
                        *sr += (0..m).map(|j| g[r * m + j] * av[r * m + j]).sum::<f64>();
                    }
                });
            }
            Op::Film { h, gamma, beta } => {
                let (n, d) = (node.rows, node.cols);
                let block = n / self.shape(*gamma).0;
                let (hv, gv) = (self.value(*h), self.value(*gamma));
                acc(*h, &|s| {
                    for r in 0..n {
                        let j = r / block;
                        for c in 0..d {
                            s[r * d + c] += g[r * d + c] * gv[j * d + c];
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for r in 0..n {
                        let j = r / block;
                        for c in 0..d {
                            s[j * d + c] += g[r * d + c] * hv[r * d + c];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..n {
                        let j = r / block;
                        for c in 0..d {
                            s[j * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Sin(a, w) => {
                let w = *w;
                acc(*a, &add_into(elementwise(*a, &move |x, _| w * (w * x).cos())));
            }
            Op::Relu(a) => acc(*a, &add_into(elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }))),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                acc(*a, &add_into(elementwise(*a, &move |x, _| if x > 0.0 { 1.0 } else { slope })));
            }
            Op::Sigmoid(a) => acc(*a, &add_into(elementwise(*a, &|_, y| y * (1.0 - y)))),
            Op::Softplus(a) => acc(*a, &add_into(elementwise(*a, &|x, _| sigmoid(x)))),
            Op::Exp(a) => acc(*a, &add_into(elementwise(*a, &|_, y| y))),
            Op::Square(a) => acc(*a, &add_into(elementwise(*a, &|x, _| 2.0 * x))),
            Op::Abs(a) => acc(*a, &add_into(elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }))),
            Op::SumAll(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::RowSum(a) => {
                let m = self.shape(*a).1;
                acc(*a, &|s| {
                    for (r, gi) in g.iter().enumerate() {
                        s[r * m..(r + 1) * m].iter_mut().for_each(|s| *s += gi);
                    }
                });
            }
            Op::GroupRows(a, group) => {
                let m = node.cols;
                let rows = self.shape(*a).0;
                acc(*a, &|s| {
                    for r in 0..rows {
                        let src = &g[(r / group) * m..(r / group + 1) * m];
                        s[r * m..(r + 1) * m].iter_mut().zip(src).for_each(|(s, gi)| *s += gi);
                    }
                });
            }
            Op::ExclCumsum(a) => {
                let (n, m) = (node.rows, node.cols);
                // d a[j] = Σ_{k>j} g[k]
                acc(*a, &|s| {
                    for r in 0..n {
                        let mut tail = 0.0;
                        for k in (0..m).rev() {
                            s[r * m + k] += tail;
                            tail += g[r * m + k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.rows;
                let total = node.cols;
                let mut offset = 0;
                for p in parts {
                    let m = self.shape(*p).1;
                    let off = offset;
                    acc(*p, &|s| {
                        for r in 0..n {
                            s[r * m..(r + 1) * m]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + m])
                                .for_each(|(s, gi)| *s += gi);
                        }
                    });
                    offset += m;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, len) = (node.rows, node.cols);
                let m = self.shape(*a).1;
                acc(*a, &|s| {
                    for r in 0..n {
                        s[r * m + start..r * m + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(s, gi)| *s += gi);
                    }
                });
            }
            Op::Gather(a, index) => acc(*a, &|s| {
                for (&i, gi) in index.iter().zip(g) {
                    if i != PAD {
                        s[i] += gi;
                    }
                }
            }),
            Op::ScatterAdd(a, index) => acc(*a, &|s| {
                for (sj, &i) in s.iter_mut().zip(index.iter()) {
                    if i != PAD {
                        *sj += g[i];
                    }
                }
            }),
            Op::SumCanonical(parts) => {
                for p in parts {
                    acc(*p, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi));
                }
            }
            Op::CompColor { sigmas, colors, trans, eps } => {
                // The common transmittance factor cancels in the normalized
                // interpolation, so T receives no gradient.
                let tv = self.value(*trans);
                let m = node.rows;
                let totals: Vec<f64> = (0..m)
                    .map(|k| {
                        let mut c: Vec<f64> = sigmas.iter().map(|s| self.value(*s)[k] * tv[k]).collect();
                        c.sort_by(f64::total_cmp);
                        c.iter().sum()
                    })
                    .collect();
                for (s, c) in sigmas.iter().zip(colors) {
                    let cv = self.value(*c);
                    let sv = self.value(*s);
                    acc(*s, &|slot| {
                        for k in 0..m {
                            if totals[k] < *eps {
                                continue;
                            }
                            let dot: f64 = (0..3).map(|ch| g[k * 3 + ch] * (cv[k * 3 + ch] - node.value[k * 3 + ch])).sum();
                            slot[k] += tv[k] * dot / totals[k];
                        }
                    });
                    acc(*c, &|slot| {
                        for k in 0..m {
                            if totals[k] < *eps {
                                continue;
                            }
                            let w = sv[k] * tv[k] / totals[k];
                            for ch in 0..3 {
                                slot[k * 3 + ch] += g[k * 3 + ch] * w;
                            }
                        }
                    });
                }
            }
        }
    }
}
