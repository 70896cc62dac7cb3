//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes once in reverse order. A node may only read nodes created
//! before it, so insertion order is a topological order.

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("node {node} reads node {input}, which is not older")]
    GraphCycle { node: usize, input: usize },
    #[error("backward seed must be a 1x1 value, got {0}x{1}")]
    NonScalarSeed(usize, usize),
    #[error("linear solve matrix is not positive definite")]
    NotSpd,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate adjoint corruption, used to show the gradient checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    Softplus,
    SolveSpd,
    LayerNorm,
    MatMul,
}

enum Op {
    Leaf,
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Block { src: usize, r0: usize, c0: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Broadcast(usize),
    Diag(usize),
    Softmax { src: usize, scale: f64, mask: Option<Vec<bool>> },
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Recip(usize),
    Pow(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: DMatrix<f64>, sigma: Vec<f64>, eps: f64 },
    SolveSpd { a: usize, b: usize, chol: Cholesky<f64, Dyn> },
    Sum(usize),
    Mean(usize),
    Max { src: usize, at: (usize, usize) },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Detach => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MatMul(a, b) | MatMulNt(a, b) | Pow(a, b) => {
                vec![*a, *b]
            }
            SolveSpd { a, b, .. } => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Transpose(a) | Broadcast(a) | Diag(a) | Relu(a) | Softplus(a) | Exp(a)
            | Ln(a) | Sqrt(a) | Recip(a) | Sum(a) | Mean(a) => vec![*a],
            Block { src, .. } | Softmax { src, .. } | Max { src, .. } => vec![*src],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    op: Op,
    value: DMatrix<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Gradients of a scalar with respect to every node.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> DMatrix<f64> {
        self.wrt(v).cloned().unwrap_or_else(|| DMatrix::zeros(rows, cols))
    }
}

/// `alpha · op(a) · op(b)` with optional transposes, via a strided GEMM.
pub fn gemm(a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool) -> DMatrix<f64> {
    let (m, k) = if ta { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (k2, n) = if tb { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert_eq!(k, k2, "inner dimensions differ");
    let mut c = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (a.nrows() as isize, 1) } else { (1, a.nrows() as isize) };
    let (rsb, csb) = if tb { (b.nrows() as isize, 1) } else { (1, b.nrows() as isize) };
    // SAFETY: strides describe the column-major storage of `a`, `b` and `c`,
    // whose lengths match the dimensions asserted above.
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
            1,
            m as isize,
        );
    }
    c
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
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

pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
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

    /// Corrupt one adjoint rule (test hook for the gradient checker).
    pub fn inject_fault(&mut self, fault: Option<AdjointFault>) {
        self.fault = fault;
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, x))
    }

    /// Copy of `a` through which no gradient flows.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.val(a).clone();
        self.push(Op::Detach, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).component_mul(self.val(b));
        self.push(Op::Mul(a.0, b.0), v)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).component_div(self.val(b));
        self.push(Op::Div(a.0, b.0), v)
    }

    /// Adds the `1×k` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.val(a).clone();
        let row = self.val(b);
        assert_eq!(row.nrows(), 1);
        assert_eq!(row.ncols(), v.ncols());
        for j in 0..v.ncols() {
            let r = row[(0, j)];
            v.column_mut(j).add_scalar_mut(r);
        }
        self.push(Op::AddRow(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).add_scalar(c);
        self.push(Op::AddScalar(a.0), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.val(a), false, self.val(b), false);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.val(a), false, self.val(b), true);
        self.push(Op::MatMulNt(a.0, b.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn block(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let v = self.val(a).view((r0, c0), (rows, cols)).into_owned();
        self.push(Op::Block { src: a.0, r0, c0 }, v)
    }

    pub fn rows(&mut self, a: Var, r0: usize, rows: usize) -> Var {
        let cols = self.val(a).ncols();
        self.block(a, r0, 0, rows, cols)
    }

    pub fn cols(&mut self, a: Var, c0: usize, cols: usize) -> Var {
        let rows = self.val(a).nrows();
        self.block(a, 0, c0, rows, cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.val(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.val(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut c = 0;
        for p in parts {
            let m = self.val(*p);
            assert_eq!(m.nrows(), rows);
            v.view_mut((0, c), (rows, m.ncols())).copy_from(m);
            c += m.ncols();
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.val(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.val(*p).nrows()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            let m = self.val(*p);
            assert_eq!(m.ncols(), cols);
            v.view_mut((r, 0), (m.nrows(), cols)).copy_from(m);
            r += m.nrows();
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Repeats a `1×1` value into a `rows×cols` matrix.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.val(a);
        assert_eq!(x.shape(), (1, 1));
        let v = DMatrix::from_element(rows, cols, x[(0, 0)]);
        self.push(Op::Broadcast(a.0), v)
    }

    /// `n×1` column to `n×n` diagonal matrix.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.val(a);
        assert_eq!(x.ncols(), 1);
        let v = DMatrix::from_diagonal(&x.column(0).into_owned());
        self.push(Op::Diag(a.0), v)
    }

    /// Row-wise softmax of `scale · a`. Columns with `key_mask[j] == false`
    /// get a score of -1e30, hence exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, scale: f64, key_mask: Option<&[bool]>) -> Var {
        let x = self.val(a);
        let (n, m) = x.shape();
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), m);
        }
        let mut v = DMatrix::zeros(n, m);
        for i in 0..n {
            let score = |j: usize| match key_mask {
                Some(mask) if !mask[j] => -1e30,
                _ => scale * x[(i, j)],
            };
            let max = (0..m).map(score).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..m {
                let e = (score(j) - max).exp();
                v[(i, j)] = e;
                total += e;
            }
            for j in 0..m {
                v[(i, j)] /= total;
            }
        }
        let mask = key_mask.map(|m| m.to_vec());
        self.push(Op::Softmax { src: a.0, scale, mask }, v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a).map(softplus);
        self.push(Op::Softplus(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Ln(a.0), v)
    }

    /// Elementwise square root; the adjoint at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::sqrt);
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a.0), v)
    }

    /// Elementwise `base^expo` for `base >= 0`.
    pub fn pow(&mut self, base: Var, expo: Var) -> Var {
        let v = self.val(base).zip_map(self.val(expo), f64::powf);
        self.push(Op::Pow(base.0, expo.0), v)
    }

    /// Row-wise `(x - μ)/(σ + ε) · γ + β` with σ the population standard
    /// deviation over the row; `γ`, `β` are `1×d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.val(x);
        let (n, d) = xv.shape();
        let mut xhat = DMatrix::zeros(n, d);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = var.sqrt();
            for j in 0..d {
                xhat[(i, j)] = (xv[(i, j)] - mu) / (s + eps);
            }
            sigma.push(s);
        }
        let g = self.val(gamma);
        let b = self.val(beta);
        let mut v = xhat.clone();
        for i in 0..n {
            for j in 0..d {
                v[(i, j)] = v[(i, j)] * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                sigma,
                eps,
            },
            v,
        )
    }

    /// `A⁻¹ b` for symmetric positive-definite `A` via Cholesky.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let chol = Cholesky::new(self.val(a).clone()).ok_or(TapeError::NotSpd)?;
        let v = chol.solve(self.val(b));
        Ok(self.push(Op::SolveSpd { a: a.0, b: b.0, chol }, v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.val(a).sum());
        self.push(Op::Sum(a.0), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let v = DMatrix::from_element(1, 1, x.sum() / x.len() as f64);
        self.push(Op::Mean(a.0), v)
    }

    /// Largest element; the adjoint goes to the first maximizing entry.
    pub fn max(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let mut at = (0, 0);
        let mut best = f64::NEG_INFINITY;
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                if x[(i, j)] > best {
                    best = x[(i, j)];
                    at = (i, j);
                }
            }
        }
        let v = DMatrix::from_element(1, 1, best);
        self.push(Op::Max { src: a.0, at }, v)
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, seed: Var) -> Result<Gradients, TapeError> {
        let out = &self.nodes[seed.0].value;
        if out.shape() != (1, 1) {
            return Err(TapeError::NonScalarSeed(out.nrows(), out.ncols()));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(seed.0 + 1);
        grads.resize_with(seed.0 + 1, || None);
        grads[seed.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            for input in node.op.inputs() {
                if input >= id {
                    return Err(TapeError::GraphCycle { node: id, input });
                }
            }
            let y = &node.value;
            let fault = self.fault;
            let acc = |grads: &mut Vec<Option<DMatrix<f64>>>, i: usize, d: DMatrix<f64>| match &mut grads[i] {
                Some(existing) => *existing += d,
                slot => *slot = Some(d),
            };
            use Op::*;
            match &node.op {
                Leaf | Detach => {
                    grads[id] = Some(g);
                    continue;
                }
                Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Mul(a, b) => {
                    let ga = g.component_mul(&self.nodes[*b].value);
                    let gb = g.component_mul(&self.nodes[*a].value);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    let ga = g.component_div(bv);
                    let gb = -ga.component_mul(y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                AddRow(a, b) => {
                    let gb = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Scale(a, c) => acc(&mut grads, *a, g * *c),
                AddScalar(a) => acc(&mut grads, *a, g),
                MatMul(a, b) => {
                    let mut ga = gemm(&g, false, &self.nodes[*b].value, true);
                    if fault == Some(AdjointFault::MatMul) {
                        ga *= 1.01;
                    }
                    let gb = gemm(&self.nodes[*a].value, true, &g, false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                MatMulNt(a, b) => {
                    let ga = gemm(&g, false, &self.nodes[*b].value, false);
                    let gb = gemm(&g, true, &self.nodes[*a].value, false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Block { src, r0, c0 } => {
                    let s = &self.nodes[*src].value;
                    let mut full = DMatrix::zeros(s.nrows(), s.ncols());
                    full.view_mut((*r0, *c0), g.shape()).copy_from(&g);
                    acc(&mut grads, *src, full);
                }
                ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        acc(&mut grads, *p, g.columns(c, w).into_owned());
                        c += w;
                    }
                }
                ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let h = self.nodes[*p].value.nrows();
                        acc(&mut grads, *p, g.rows(r, h).into_owned());
                        r += h;
                    }
                }
                Broadcast(a) => acc(&mut grads, *a, DMatrix::from_element(1, 1, g.sum())),
                Diag(a) => acc(&mut grads, *a, DMatrix::from_column_slice(g.nrows(), 1, g.diagonal().as_slice())),
                Softmax { src, scale, mask } => {
                    let mut ga = DMatrix::zeros(y.nrows(), y.ncols());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            if mask.as_ref().map_or(true, |m| m[j]) {
                                ga[(i, j)] = scale * y[(i, j)] * (g[(i, j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Relu(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    let k = if fault == Some(AdjointFault::Softplus) { 1.01 } else { 1.0 };
                    acc(&mut grads, *a, g.zip_map(x, |g, x| k * g * sigmoid(x)));
                }
                Exp(a) => acc(&mut grads, *a, g.component_mul(y)),
                Ln(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.component_div(x));
                }
                Sqrt(a) => acc(&mut grads, *a, g.zip_map(y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })),
                Recip(a) => acc(&mut grads, *a, g.zip_map(y, |g, y| -g * y * y)),
                Pow(b, e) => {
                    let bv = &self.nodes[*b].value;
                    let ev = &self.nodes[*e].value;
                    let mut gb = DMatrix::zeros(y.nrows(), y.ncols());
                    let mut ge = DMatrix::zeros(y.nrows(), y.ncols());
                    for k in 0..y.len() {
                        let (bk, ek, yk) = (bv[k], ev[k], y[k]);
                        gb[k] = if bk > 0.0 {
                            g[k] * ek * bk.powf(ek - 1.0)
                        } else if ek == 1.0 {
                            g[k]
                        } else {
                            0.0
                        };
                        ge[k] = if yk > 0.0 { g[k] * yk * bk.ln() } else { 0.0 };
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *e, ge);
                }
                LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    sigma,
                    eps,
                } => {
                    let gam = &self.nodes[*gamma].value;
                    let (n, d) = xhat.shape();
                    let mut gg = DMatrix::zeros(1, d);
                    let mut gbeta = DMatrix::zeros(1, d);
                    let mut gx = DMatrix::zeros(n, d);
                    let df = d as f64;
                    for i in 0..n {
                        let den = sigma[i] + eps;
                        let mut gxhat = vec![0.0; d];
                        for j in 0..d {
                            gg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            gbeta[(0, j)] += g[(i, j)];
                            gxhat[j] = g[(i, j)] * gam[(0, j)];
                        }
                        // xhat = c/den with c = x - μ and den = σ(c) + ε
                        let proj: f64 = (0..d).map(|j| gxhat[j] * xhat[(i, j)]).sum();
                        let mut gc = vec![0.0; d];
                        for j in 0..d {
                            let c = xhat[(i, j)] * den;
                            let dsig = if sigma[i] > 0.0 { c / (df * sigma[i]) } else { 0.0 };
                            gc[j] = gxhat[j] / den - proj / den * dsig;
                        }
                        let mean_gc = gc.iter().sum::<f64>() / df;
                        for j in 0..d {
                            gx[(i, j)] = gc[j] - mean_gc;
                        }
                    }
                    if fault == Some(AdjointFault::LayerNorm) {
                        gx *= 1.01;
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                }
                SolveSpd { a, b, chol } => {
                    let mut gb = chol.solve(&g);
                    if fault == Some(AdjointFault::SolveSpd) {
                        gb *= 1.01;
                    }
                    let ga = -gemm(&gb, false, y, true);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Sum(a) => {
                    let s = &self.nodes[*a].value;
                    acc(&mut grads, *a, DMatrix::from_element(s.nrows(), s.ncols(), g[(0, 0)]));
                }
                Mean(a) => {
                    let s = &self.nodes[*a].value;
                    let k = g[(0, 0)] / s.len() as f64;
                    acc(&mut grads, *a, DMatrix::from_element(s.nrows(), s.ncols(), k));
                }
                Max { src, at } => {
                    let s = &self.nodes[*src].value;
                    let mut ga = DMatrix::zeros(s.nrows(), s.ncols());
                    ga[*at] = g[(0, 0)];
                    acc(&mut grads, *src, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
