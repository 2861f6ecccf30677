//! Append-only reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value and the
//! indices of its inputs. Inputs always precede the node that consumes them,
//! so walking the node vector backwards is a reverse topological order and
//! [`Tape::backward`] is a single pass.

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{sigmoid, softplus, ParamId, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate derivative corruption used as a negative control by the
/// self-check command.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// `tanh` back-propagates `1 - y` instead of `1 - y^2`.
    TanhDerivative,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Recip(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Concat(Var, Var),
    SliceCols(Var, usize),
    SumCols(Var),
    SumAll(Var),
    SumSquares(Var),
    Reshape(Var),
    Banked { x: Var, bank: Var, gates: Tensor },
}

struct Node {
    /// `None` for parameters, whose values live in the borrowed set.
    value: Option<Tensor>,
    op: Op,
}

/// A recording of primitive calls.
///
/// Parameters are read from a borrowed [`ParameterSet`], so any number of
/// tapes may evaluate one frozen model concurrently.
pub struct Tape<'p> {
    params: Option<&'p ParameterSet>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only inputs can be differentiated.
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParameterSet) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self
                .params
                .expect("parameter node without parameter set")
                .get(ParamId(*i)),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    /// Records a constant (data) input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Input)
    }

    /// The tape node of a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::Structural("tape has no parameter set".into()))?;
        if id.0 >= params.len() {
            return Err(Error::Structural(format!("unknown parameter {}", id.0)));
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    fn push_raw(&mut self, t: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(t), op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor, op: Op, what: &str) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("non-finite output of {what}")));
        }
        Ok(self.push_raw(t, op))
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn mismatch(&self, what: &str, a: Var, b: Var) -> Error {
        Error::Structural(format!(
            "{what}: shapes {:?} and {:?} are incompatible",
            self.shape(a),
            self.shape(b)
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, k] = self.shape(a);
        let [k2, m] = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = Tensor::zeros(n, m);
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            n,
            k,
            m,
        );
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Elementwise sum. `b` may be a `1 x cols` row, broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        let sb = self.shape(b);
        if sb == [n, m] {
            let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
            self.push(out, Op::Add(a, b), "add")
        } else if sb == [1, m] {
            let mut out = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..n {
                let row = &mut out.data_mut()[r * m..(r + 1) * m];
                for (o, bv) in row.iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
            self.push(out, Op::AddRow(a, b), "add")
        } else {
            Err(self.mismatch("add", a, b))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product. `b` may be a `rows x 1` column scaling each row of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        let sb = self.shape(b);
        if sb == [n, m] {
            let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
            self.push(out, Op::Mul(a, b), "mul")
        } else if sb == [n, 1] {
            let mut out = self.value(a).clone();
            let s = self.value(b).data().to_vec();
            for (r, sv) in s.iter().enumerate() {
                for o in &mut out.data_mut()[r * m..(r + 1) * m] {
                    *o *= sv;
                }
            }
            self.push(out, Op::MulCol(a, b), "mul")
        } else {
            Err(self.mismatch("mul", a, b))
        }
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    /// Natural logarithm; non-positive input is a numeric failure.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), "ln")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(out, Op::Recip(a), "recip")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| k * x);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Joins along the column axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ma] = self.shape(a);
        let [n2, mb] = self.shape(b);
        if n != n2 {
            return Err(self.mismatch("concat", a, b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ma + mb));
        for r in 0..n {
            data.extend_from_slice(&va[r * ma..(r + 1) * ma]);
            data.extend_from_slice(&vb[r * mb..(r + 1) * mb]);
        }
        let out = Tensor::from_vec(n, ma + mb, data)?;
        self.push(out, Op::Concat(a, b), "concat")
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [n, m] = self.shape(a);
        if start > end || end > m {
            return Err(Error::Structural(format!(
                "slice {start}..{end} out of {m} columns"
            )));
        }
        let va = self.value(a).data();
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&va[r * m + start..r * m + end]);
        }
        let out = Tensor::from_vec(n, w, data)?;
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        let va = self.value(a).data();
        let data = (0..n)
            .map(|r| va[r * m..(r + 1) * m].iter().sum())
            .collect();
        let out = Tensor::from_vec(n, 1, data)?;
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    /// Sum of squared entries as a `1 x 1` scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), "sum_squares")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(Error::Structural(format!(
                "cannot reshape {:?} into {rows}x{cols}",
                t.shape()
            )));
        }
        let out = t.clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Gate-weighted mixture of linear maps.
    ///
    /// `bank` stacks `J` blocks of shape `n x m` vertically (`J*n x m`), and
    /// `gates` is a constant `rows x J` matrix. Row `r` of the output is
    /// `sum_j gates[r, j] * x[r] * bank_j`. Zero gates are skipped.
    pub fn banked_matmul(&mut self, x: Var, bank: Var, gates: Tensor) -> Result<Var> {
        let [rows, n] = self.shape(x);
        let [bn, m] = self.shape(bank);
        let j = gates.cols();
        if gates.rows() != rows || j == 0 || bn != j * n {
            return Err(Error::Structural(format!(
                "banked matmul: x {:?}, bank {:?}, gates {:?}",
                [rows, n],
                [bn, m],
                gates.shape()
            )));
        }
        let mut out = Tensor::zeros(rows, m);
        {
            let xv = self.value(x).data();
            let bv = self.value(bank).data();
            let od = out.data_mut();
            for r in 0..rows {
                let xr = &xv[r * n..(r + 1) * n];
                let orow = &mut od[r * m..(r + 1) * m];
                for (k, &g) in gates.row_slice(r).iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let block = &bv[k * n * m..(k + 1) * n * m];
                    for (p, &xp) in xr.iter().enumerate() {
                        axpy(g * xp, &block[p * m..(p + 1) * m], orow);
                    }
                }
            }
        }
        self.push(out, Op::Banked { x, bank, gates }, "banked_matmul")
    }

    /// Back-propagates from a `1 x 1` root and consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.shape(root) != [1, 1] {
            return Err(Error::Structural(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Structural(format!(
                        "node {idx} consumes later node {}",
                        input.0
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            param_vars: self.param_vars,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = || self.nodes[idx].value.as_ref().expect("value");
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [n, k] = va.shape();
                let m = vb.cols();
                let mut ga = Tensor::zeros(n, k);
                matmul_nt_acc(g.data(), vb.data(), ga.data_mut(), n, m, k);
                let mut gb = Tensor::zeros(k, m);
                matmul_tn_acc(va.data(), g.data(), gb.data_mut(), n, k, m);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                let [n, m] = g.shape();
                let mut gb = Tensor::zeros(1, m);
                for r in 0..n {
                    axpy(1.0, g.row_slice(r), gb.data_mut());
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MulCol(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [n, m] = va.shape();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(n, 1);
                for r in 0..n {
                    let s = vb.data()[r];
                    for v in &mut ga.data_mut()[r * m..(r + 1) * m] {
                        *v *= s;
                    }
                    gb.data_mut()[r] = dot(g.row_slice(r), va.row_slice(r));
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Tanh(a) => {
                let ga = match self.fault {
                    Some(Fault::TanhDerivative) => g.zip_map(y(), |gv, t| gv * (1.0 - t)),
                    None => g.zip_map(y(), |gv, t| gv * (1.0 - t * t)),
                };
                accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x));
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(y(), |gv, e| gv * e);
                accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                accumulate(grads, *a, ga);
            }
            Op::Recip(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| -gv / (x * x));
                accumulate(grads, *a, ga);
            }
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(grads, *a, g.map(|x| k * x));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(
                    self.value(*a),
                    |gv, x| {
                        if x > lo && x < hi {
                            gv
                        } else {
                            0.0
                        }
                    },
                );
                accumulate(grads, *a, ga);
            }
            Op::Concat(a, b) => {
                let [n, ma] = self.shape(*a);
                let mb = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(n * ma);
                let mut gb = Vec::with_capacity(n * mb);
                for r in 0..n {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ma]);
                    gb.extend_from_slice(&row[ma..]);
                }
                accumulate(grads, *a, Tensor::from_vec(n, ma, ga)?);
                accumulate(grads, *b, Tensor::from_vec(n, mb, gb)?);
            }
            Op::SliceCols(a, start) => {
                let [n, m] = self.shape(*a);
                let w = g.cols();
                let mut ga = Tensor::zeros(n, m);
                for r in 0..n {
                    ga.data_mut()[r * m + start..r * m + start + w].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let [n, m] = self.shape(*a);
                let mut ga = Tensor::zeros(n, m);
                for r in 0..n {
                    ga.data_mut()[r * m..(r + 1) * m].fill(g.data()[r]);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let [n, m] = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(n, m, g.item()));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                let ga = self.value(*a).map(|x| s * x);
                accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let [n, m] = self.shape(*a);
                accumulate(grads, *a, g.clone().reshaped(n, m));
            }
            Op::Banked { x, bank, gates } => {
                let (vx, vb) = (self.value(*x), self.value(*bank));
                let [rows, n] = vx.shape();
                let m = vb.cols();
                let mut gx = Tensor::zeros(rows, n);
                let mut gbank = Tensor::zeros(vb.rows(), m);
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let xr = vx.row_slice(r);
                    for (k, &gate) in gates.row_slice(r).iter().enumerate() {
                        if gate == 0.0 {
                            continue;
                        }
                        let block = &vb.data()[k * n * m..(k + 1) * n * m];
                        let gxr = &mut gx.data_mut()[r * n..(r + 1) * n];
                        for (p, gxp) in gxr.iter_mut().enumerate() {
                            *gxp += gate * dot(gr, &block[p * m..(p + 1) * m]);
                        }
                        let gblock = &mut gbank.data_mut()[k * n * m..(k + 1) * n * m];
                        for (p, &xp) in xr.iter().enumerate() {
                            axpy(gate * xp, gr, &mut gblock[p * m..(p + 1) * m]);
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *bank, gbank);
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::SliceCols(a, _)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::SumSquares(a)
            | Op::Reshape(a) => vec![*a],
            Op::Banked { x, bank, .. } => vec![*x, *bank],
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter, aligned with the set; unused parameters get zeros.
    pub fn param_grads(mut self, params: &ParameterSet) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                self.param_vars
                    .get(id.index())
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| {
                        let [r, c] = params.get(id).shape();
                        Tensor::zeros(r, c)
                    })
            })
            .collect()
    }
}
