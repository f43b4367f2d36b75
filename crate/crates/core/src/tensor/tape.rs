use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, ln_gamma};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation recorded on a tape node.
///
/// Elementwise binary operations broadcast an operand over any axis where its
/// extent is 1; all other shapes must match exactly.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Named leaf whose value is supplied by the caller (data, noise draws).
    Input,
    /// Named leaf holding a learnable parameter.
    Param,
    /// Unnamed leaf that never receives a binding.
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Log1p,
    Sqrt,
    Square,
    Sigmoid,
    Softplus,
    Gelu,
    Relu,
    LnGamma,
    /// Row-wise standardization without affine parameters.
    LayerNorm(f64),
    ConcatCols,
    SliceCols(usize, usize),
    /// Row sums, `[r, c] -> [r, 1]`.
    SumCols,
    SumAll,
    MeanAll,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Log1p => "log1p",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::LnGamma => "lngamma",
            Op::LayerNorm(_) => "layer_norm",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SumCols => "sum_cols",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param | Op::Constant)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    name: Option<String>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in execution order, so every input id precedes its
/// consumer and the node list is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stale: bool,
    first_non_finite: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the named leaf; zeros are reported as `None` only when the
    /// leaf does not exist.
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&i| self.grads[i].as_ref())
    }

    /// Named leaf gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(n, &i)| self.grads[i].as_ref().map(|g| (n.as_str(), g)))
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node: format!("node {node} ({})", op.name()),
        detail,
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (pick(ar, br), pick(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(
            node,
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )),
    }
}

#[inline]
fn bidx(rows: usize, cols: usize, r: usize, c: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

fn binary(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    let mut out = Vec::with_capacity(r * c);
    if ar == r && ac == c && br == r && bc == c {
        out.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..r {
            for j in 0..c {
                out.push(f(a.data()[bidx(ar, ac, i, j)], b.data()[bidx(br, bc, i, j)]));
            }
        }
    }
    Tensor::matrix(r, c, out).expect("broadcast shape")
}

/// Sums a `[r, c]` gradient down to the (possibly broadcast) shape of `like`.
fn reduce_to(grad: Vec<f64>, r: usize, c: usize, like: &Tensor) -> Tensor {
    let (lr, lc) = dims(like);
    if lr == r && lc == c {
        return Tensor::new(like.shape().to_vec(), grad).expect("same shape");
    }
    let mut out = vec![0.0; lr * lc];
    for i in 0..r {
        for j in 0..c {
            out[bidx(lr, lc, i, j)] += grad[i * c + j];
        }
    }
    Tensor::new(like.shape().to_vec(), out).expect("reduced shape")
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: slice lengths cover every index reachable with the given
    // strides (checked by the callers' shape validation).
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn eval_op(node: usize, op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = |f: &dyn Fn(f64) -> f64| inputs[0].map(f);
    Ok(match op {
        Op::Input | Op::Param | Op::Constant => unreachable!("leaves are never evaluated"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = dims(a);
            let (k2, n) = dims(b);
            if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(shape_err(
                    node,
                    op,
                    format!("inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()),
                ));
            }
            let c = gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1));
            Tensor::matrix(m, n, c)?
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let (r, c) = broadcast_dims(node, op, a, b)?;
            match op {
                Op::Add => binary(a, b, r, c, |x, y| x + y),
                Op::Sub => binary(a, b, r, c, |x, y| x - y),
                Op::Mul => binary(a, b, r, c, |x, y| x * y),
                _ => binary(a, b, r, c, |x, y| x / y),
            }
        }
        Op::Neg => unary(&|x| -x),
        Op::Scale(s) => {
            let s = *s;
            unary(&move |x| x * s)
        }
        Op::AddScalar(s) => {
            let s = *s;
            unary(&move |x| x + s)
        }
        Op::Exp => unary(&f64::exp),
        Op::Log => unary(&f64::ln),
        Op::Log1p => unary(&f64::ln_1p),
        Op::Sqrt => unary(&f64::sqrt),
        Op::Square => unary(&|x| x * x),
        Op::Sigmoid => unary(&sigmoid),
        Op::Softplus => unary(&softplus),
        Op::Gelu => unary(&|x| x * std_normal_cdf(x)),
        Op::Relu => unary(&|x| x.max(0.0)),
        Op::LnGamma => unary(&ln_gamma),
        Op::LayerNorm(eps) => {
            let x = inputs[0];
            let (r, c) = dims(x);
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = x.row_slice(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            Tensor::matrix(r, c, out)?
        }
        Op::ConcatCols => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ar, ac) = dims(a);
            let (br, bc) = dims(b);
            if ar != br {
                return Err(shape_err(
                    node,
                    op,
                    format!("row counts differ: {:?} | {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = Vec::with_capacity(ar * (ac + bc));
            for i in 0..ar {
                out.extend_from_slice(a.row_slice(i));
                out.extend_from_slice(b.row_slice(i));
            }
            Tensor::matrix(ar, ac + bc, out)?
        }
        Op::SliceCols(s, e) => {
            let x = inputs[0];
            let (r, c) = dims(x);
            if s >= e || *e > c {
                return Err(shape_err(
                    node,
                    op,
                    format!("column range {s}..{e} out of bounds for {c} columns"),
                ));
            }
            let mut out = Vec::with_capacity(r * (e - s));
            for i in 0..r {
                out.extend_from_slice(&x.row_slice(i)[*s..*e]);
            }
            Tensor::matrix(r, e - s, out)?
        }
        Op::SumCols => {
            let x = inputs[0];
            let r = x.rows();
            Tensor::matrix(r, 1, (0..r).map(|i| x.row_slice(i).iter().sum()).collect())?
        }
        Op::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::MeanAll => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len().max(1) as f64)
        }
    })
}

/// Gradients of one node with respect to each of its inputs.
fn backward_op(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let gd = g.data();
    let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        let data = x.data().iter().zip(gd).map(|(&xv, &gv)| f(xv, gv)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    match op {
        Op::Input | Op::Param | Op::Constant => vec![],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = dims(a);
            let n = b.cols();
            // dA = G · Bᵀ, dB = Aᵀ · G
            let da = gemm(m, n, k, gd, (n as isize, 1), b.data(), (1, n as isize));
            let db = gemm(k, m, n, a.data(), (1, k as isize), gd, (n as isize, 1));
            vec![
                Tensor::new(a.shape().to_vec(), da).expect("shape"),
                Tensor::new(b.shape().to_vec(), db).expect("shape"),
            ]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let (r, c) = dims(out);
            let (ar, ac) = dims(a);
            let (br, bc) = dims(b);
            let mut ga = vec![0.0; r * c];
            let mut gb = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let t = i * c + j;
                    let x = a.data()[bidx(ar, ac, i, j)];
                    let y = b.data()[bidx(br, bc, i, j)];
                    let (dx, dy) = match op {
                        Op::Add => (1.0, 1.0),
                        Op::Sub => (1.0, -1.0),
                        Op::Mul => (y, x),
                        _ => (1.0 / y, -x / (y * y)),
                    };
                    ga[t] = gd[t] * dx;
                    gb[t] = gd[t] * dy;
                }
            }
            vec![reduce_to(ga, r, c, a), reduce_to(gb, r, c, b)]
        }
        Op::Neg => vec![g.map(|v| -v)],
        Op::Scale(s) => vec![g.map(|v| v * s)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::Exp => {
            let data = out.data().iter().zip(gd).map(|(&y, &gv)| y * gv).collect();
            vec![Tensor::new(out.shape().to_vec(), data).expect("shape")]
        }
        Op::Log => vec![elementwise(inputs[0], &|x, gv| gv / x)],
        Op::Log1p => vec![elementwise(inputs[0], &|x, gv| gv / (1.0 + x))],
        Op::Sqrt => {
            let data = out.data().iter().zip(gd).map(|(&y, &gv)| 0.5 * gv / y).collect();
            vec![Tensor::new(out.shape().to_vec(), data).expect("shape")]
        }
        Op::Square => vec![elementwise(inputs[0], &|x, gv| 2.0 * x * gv)],
        Op::Sigmoid => {
            let data = out.data().iter().zip(gd).map(|(&y, &gv)| y * (1.0 - y) * gv).collect();
            vec![Tensor::new(out.shape().to_vec(), data).expect("shape")]
        }
        Op::Softplus => vec![elementwise(inputs[0], &|x, gv| sigmoid(x) * gv)],
        Op::Gelu => vec![elementwise(inputs[0], &|x, gv| {
            let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
            (std_normal_cdf(x) + x * pdf) * gv
        })],
        Op::Relu => vec![elementwise(inputs[0], &|x, gv| if x > 0.0 { gv } else { 0.0 })],
        Op::LnGamma => vec![elementwise(inputs[0], &|x, gv| digamma_unchecked(x) * gv)],
        Op::LayerNorm(eps) => {
            let x = inputs[0];
            let (r, c) = dims(x);
            let mut gx = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = x.row_slice(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let y = out.row_slice(i);
                let gy = &gd[i * c..(i + 1) * c];
                let mean_g = gy.iter().sum::<f64>() / c as f64;
                let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                gx.extend((0..c).map(|j| inv * (gy[j] - mean_g - y[j] * mean_gy)));
            }
            vec![Tensor::new(x.shape().to_vec(), gx).expect("shape")]
        }
        Op::ConcatCols => {
            let (a, b) = (inputs[0], inputs[1]);
            let (r, ac) = dims(a);
            let bc = b.cols();
            let mut ga = Vec::with_capacity(r * ac);
            let mut gb = Vec::with_capacity(r * bc);
            for i in 0..r {
                let row = &gd[i * (ac + bc)..(i + 1) * (ac + bc)];
                ga.extend_from_slice(&row[..ac]);
                gb.extend_from_slice(&row[ac..]);
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga).expect("shape"),
                Tensor::new(b.shape().to_vec(), gb).expect("shape"),
            ]
        }
        Op::SliceCols(s, e) => {
            let x = inputs[0];
            let (r, c) = dims(x);
            let w = e - s;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + s..i * c + e].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![Tensor::new(x.shape().to_vec(), gx).expect("shape")]
        }
        Op::SumCols => {
            let x = inputs[0];
            let (r, c) = dims(x);
            let gx = (0..r).flat_map(|i| std::iter::repeat_n(gd[i], c)).collect();
            vec![Tensor::new(x.shape().to_vec(), gx).expect("shape")]
        }
        Op::SumAll => vec![Tensor::full(inputs[0].shape().to_vec(), gd[0])],
        Op::MeanAll => {
            let n = inputs[0].len().max(1) as f64;
            vec![Tensor::full(inputs[0].shape().to_vec(), gd[0] / n)]
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    /// Index of the first node whose value contained NaN or ±∞, if any.
    pub fn non_finite_node(&self) -> Option<usize> {
        self.first_non_finite
    }

    fn push_leaf(&mut self, op: Op, name: Option<String>, value: Tensor) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            op,
            inputs: vec![],
            value,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named data leaf; rebinding it via [`Tape::bind`] changes replays.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(Op::Input, Some(name.into()), value)
    }

    /// Named parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(Op::Param, Some(name.into()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Constant, None, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>) -> Result<Var> {
        let id = self.nodes.len();
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            eval_op(id, &op, &vals)?
        };
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            name: None,
        });
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, vec![a.0, b.0])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a.0, b.0])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, vec![a.0, b.0])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a.0, b.0])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div, vec![a.0, b.0])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg, vec![a.0])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(s), vec![a.0])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(s), vec![a.0])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, vec![a.0])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log, vec![a.0])
    }
    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log1p, vec![a.0])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt, vec![a.0])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square, vec![a.0])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid, vec![a.0])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus, vec![a.0])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu, vec![a.0])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, vec![a.0])
    }
    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LnGamma, vec![a.0])
    }
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm(eps), vec![a.0])
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols, vec![a.0, b.0])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(start, end), vec![a.0])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols, vec![a.0])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll, vec![a.0])
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanAll, vec![a.0])
    }

    /// Leaf lookup by name.
    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.op.is_leaf() && n.name.as_deref() == Some(name))
            .map(Var)
    }

    /// Names of parameter leaves in tape order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Param)
            .filter_map(|n| n.name.clone())
            .collect()
    }

    /// Replaces the value of a named leaf. The tape must be replayed before
    /// the next backward pass.
    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .leaf(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?
            .0;
        if self.nodes[id].value.shape() != value.shape() {
            return Err(shape_err(
                id,
                &self.nodes[id].op,
                format!(
                    "binding `{name}` with shape {:?}, recorded {:?}",
                    value.shape(),
                    self.nodes[id].value.shape()
                ),
            ));
        }
        self.nodes[id].value = value;
        self.stale = true;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn replay(&mut self) -> Result<()> {
        self.first_non_finite = None;
        for id in 0..self.nodes.len() {
            if self.nodes[id].op.is_leaf() {
                if self.first_non_finite.is_none() && !self.nodes[id].value.is_finite() {
                    self.first_non_finite = Some(id);
                }
                continue;
            }
            let value = {
                let node = &self.nodes[id];
                let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                eval_op(id, &node.op, &vals)?
            };
            if self.first_non_finite.is_none() && !value.is_finite() {
                self.first_non_finite = Some(id);
            }
            self.nodes[id].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Binds the named inputs, replays and returns the value of `output`.
    pub fn eval(&mut self, output: Var, bindings: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        for (name, value) in bindings {
            self.bind(name, value.clone())?;
        }
        self.replay()?;
        Ok(self.value(output).clone())
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.stale {
            return Err(Error::BackwardBeforeForward);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::Shape {
                node: format!("node {} (backward seed)", output.0),
                detail: format!("seed shape {:?} vs output {:?}", seed.shape(), out_shape),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if node.op.is_leaf() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward_op(&node.op, &vals, &node.value, &g);
            for (&inp, gi) in node.inputs.iter().zip(input_grads) {
                match &mut grads[inp] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        let mut names = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let (true, Some(name)) = (node.op.is_leaf(), &node.name) {
                names.insert(name.clone(), id);
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(Gradients { grads, names })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.nodes[output.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape {
                node: format!("node {}", output.0),
                detail: format!("expected scalar output, got {shape:?}"),
            });
        }
        self.backward(output, &Tensor::full(shape, 1.0))
    }
}

/// Maximum relative discrepancy between the tape's analytic gradients and
/// central finite differences, over every element of the named leaves.
///
/// The relative error is `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check(tape: &mut Tape, output: Var, params: &[&str], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    if tape.value(output).len() != 1 {
        return Err(Error::Shape {
            node: format!("node {}", output.0),
            detail: "grad_check needs a scalar output".into(),
        });
    }
    tape.replay()?;
    let grads = tape.backward_scalar(output)?;
    let mut worst: f64 = 0.0;
    for &name in params {
        let var = tape
            .leaf(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
        let base = tape.value(var).clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            tape.bind(name, plus)?;
            tape.replay()?;
            let fp = tape.value(output).item()?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            tape.bind(name, minus)?;
            tape.replay()?;
            let fm = tape.value(output).item()?;
            let numeric = (fp - fm) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        tape.bind(name, base)?;
    }
    tape.replay()?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_and_derivative() {
        let mut t = Tape::new();
        let x = t.input("x", Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 9.0);
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.input("x", Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        let sp = t.softplus(x).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 0.5);
        assert!((t.value(sp).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let a = t.param("a", rand_tensor(&mut rng, 3, 4));
        let b = t.param("b", rand_tensor(&mut rng, 4, 2));
        let w = t.input("w", rand_tensor(&mut rng, 3, 2));
        let c = t.matmul(a, b).unwrap();
        let cw = t.mul(c, w).unwrap();
        let out = t.sum_all(cw).unwrap();
        let err = grad_check(&mut t, out, &["a", "b"], 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn mlp_with_gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.input("x", rand_tensor(&mut rng, 5, 3));
        let w1 = t.param("w1", rand_tensor(&mut rng, 3, 6));
        let b1 = t.param("b1", rand_tensor(&mut rng, 1, 6));
        let w2 = t.param("w2", rand_tensor(&mut rng, 6, 2));
        let h = t.matmul(x, w1).unwrap();
        let h = t.add(h, b1).unwrap();
        let h = t.gelu(h).unwrap();
        let o = t.matmul(h, w2).unwrap();
        let o = t.square(o).unwrap();
        let out = t.mean_all(o).unwrap();
        let err = grad_check(&mut t, out, &["w1", "b1", "w2", "x"], 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.param("x", rand_tensor(&mut rng, 2, 3));
        let w = t.constant(rand_tensor(&mut rng, 2, 3));
        let p = t.mul(x, w).unwrap();
        let out = t.sum_all(p).unwrap();
        assert!(grad_check(&mut t, out, &["x"], 1e-3).unwrap() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::row(vec![1.0, 2.0]));
        let c = t.scalar(4.0);
        let out = t.add_scalar(c, 1.0).unwrap();
        let g = t.backward_scalar(out).unwrap();
        assert!(g.by_name("x").is_none() || g.by_name("x").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_check(&mut t, out, &["x"], 1e-4).unwrap(), 0.0);
        let _ = x;
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::row(vec![1.0, 2.0]));
        let y = t.square(x).unwrap();
        assert!(grad_check(&mut t, y, &["x"], 1e-4).is_err());
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut t = Tape::new();
        let a = t.input("a", Tensor::zeros(vec![2, 3]));
        let b = t.input("b", Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn backward_after_rebinding_without_replay_fails() {
        let mut t = Tape::new();
        let x = t.input("x", Tensor::scalar(1.0));
        let y = t.square(x).unwrap();
        t.bind("x", Tensor::scalar(2.0)).unwrap();
        assert!(matches!(t.backward_scalar(y), Err(Error::BackwardBeforeForward)));
        t.replay().unwrap();
        assert_eq!(t.backward_scalar(y).unwrap().get(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut t = Tape::new();
        let x = t.input("x", Tensor::scalar(-1.0));
        let y = t.log(x).unwrap();
        assert_eq!(t.non_finite_node(), Some(y.id()));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.input("x", rand_tensor(&mut rng, 4, 4));
        let h = t.layer_norm(x, 1e-5).unwrap();
        let h = t.gelu(h).unwrap();
        let out = t.sum_all(h).unwrap();
        let first = t.value(out).clone();
        let again = t.eval(out, &BTreeMap::new()).unwrap();
        assert_eq!(first.data()[0].to_bits(), again.data()[0].to_bits());
    }

    #[test]
    fn gradient_of_summed_copies_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, 3, 3);
        let build = |t: &mut Tape, copies: usize| {
            let p = t.param("p", w.clone());
            let mut acc: Option<Var> = None;
            for _ in 0..copies {
                let s = t.sigmoid(p).unwrap();
                let s = t.sum_all(s).unwrap();
                acc = Some(match acc {
                    None => s,
                    Some(a) => t.add(a, s).unwrap(),
                });
            }
            acc.unwrap()
        };
        let mut one = Tape::new();
        let o1 = build(&mut one, 1);
        let g1 = one.backward_scalar(o1).unwrap();
        let mut three = Tape::new();
        let o3 = build(&mut three, 3);
        let g3 = three.backward_scalar(o3).unwrap();
        for (a, b) in g1.by_name("p").unwrap().data().iter().zip(g3.by_name("p").unwrap().data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn primitives_match_finite_differences_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        type Build = fn(&mut Tape, Var) -> Var;
        let prims: Vec<(&str, Build, (f64, f64))> = vec![
            ("exp", |t, x| t.exp(x).unwrap(), (-2.0, 2.0)),
            ("log", |t, x| t.log(x).unwrap(), (0.1, 3.0)),
            ("log1p", |t, x| t.log1p(x).unwrap(), (-0.5, 3.0)),
            ("sqrt", |t, x| t.sqrt(x).unwrap(), (0.1, 3.0)),
            ("square", |t, x| t.square(x).unwrap(), (-2.0, 2.0)),
            ("sigmoid", |t, x| t.sigmoid(x).unwrap(), (-5.0, 5.0)),
            ("softplus", |t, x| t.softplus(x).unwrap(), (-5.0, 5.0)),
            ("gelu", |t, x| t.gelu(x).unwrap(), (-3.0, 3.0)),
            ("relu", |t, x| t.relu(x).unwrap(), (0.05, 3.0)),
            ("lngamma", |t, x| t.ln_gamma(x).unwrap(), (0.5, 8.0)),
            ("layer_norm", |t, x| t.layer_norm(x, 1e-5).unwrap(), (-2.0, 2.0)),
            ("sum_cols", |t, x| t.sum_cols(x).unwrap(), (-2.0, 2.0)),
        ];
        for (name, f, (lo, hi)) in prims {
            let data = (0..100 * 4).map(|_| rng.gen_range(lo..hi)).collect();
            let mut t = Tape::new();
            let x = t.param("x", Tensor::matrix(100, 4, data).unwrap());
            let y = f(&mut t, x);
            let w = t.constant(Tensor::new(
                t.value(y).shape().to_vec(),
                (0..t.value(y).len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect(),
            )
            .unwrap());
            let yw = t.mul(y, w).unwrap();
            let out = t.sum_all(yw).unwrap();
            let err = grad_check(&mut t, out, &["x"], 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn broadcast_binary_ops_reduce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let a = t.param("a", rand_tensor(&mut rng, 4, 3));
        let row = t.param("row", rand_tensor(&mut rng, 1, 3).map(|v| v + 2.0));
        let col = t.param("col", rand_tensor(&mut rng, 4, 1).map(|v| v + 2.0));
        let x = t.div(a, row).unwrap();
        let x = t.mul(x, col).unwrap();
        let x = t.sub(x, row).unwrap();
        let c = t.concat_cols(x, a).unwrap();
        let s = t.slice_cols(c, 1, 5).unwrap();
        let s = t.square(s).unwrap();
        let out = t.sum_all(s).unwrap();
        let err = grad_check(&mut t, out, &["a", "row", "col"], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
