//! Forward ops on [`Var`] and their local gradient rules.

use std::sync::Arc;

use crate::graph::{accumulate, Graph, Node, Var};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Result, Tensor, TensorError};

/// Lower clamp for probabilities fed to [`Var::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Gelu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
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

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow {
        a: usize,
        bias: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Biaffine {
        a: usize,
        w: usize,
        b: usize,
        dims: [usize; 4],
    },
    Act(usize, Activation),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        gold: Vec<usize>,
        probs: Vec<f64>,
    },
    Nll {
        probs: usize,
        gold: Vec<usize>,
    },
    Bce {
        p: usize,
        gold: Vec<f64>,
    },
    Sum(usize),
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        width: usize,
    },
    Reshape(usize),
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    SegmentMax {
        a: usize,
        argmax: Vec<usize>,
    },
    ScatterAddRows {
        a: usize,
        targets: Vec<usize>,
    },
    SegmentSoftmax {
        a: usize,
        segments: Vec<usize>,
        n: usize,
    },
    MulRows {
        a: usize,
        col: usize,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowOuter {
        a: usize,
        b: usize,
        p: usize,
        q: usize,
    },
    RowMatVec {
        m: usize,
        x: usize,
        p: usize,
        q: usize,
    },
    RowVecMat {
        x: usize,
        m: usize,
        p: usize,
        q: usize,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Act(a, _) | Op::Softmax(a) => vec![*a],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Biaffine { a, w, b, .. } => vec![*a, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Nll { probs, .. } => vec![*probs],
            Op::Bce { p, .. } => vec![*p],
            Op::Sum(a) | Op::Reshape(a) => vec![*a],
            Op::ConcatCols { parts, .. } | Op::ConcatRows(parts) => parts.clone(),
            Op::GatherRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Transpose { a, .. }
            | Op::SegmentMax { a, .. }
            | Op::ScatterAddRows { a, .. }
            | Op::SegmentSoftmax { a, .. } => vec![*a],
            Op::MulRows { a, col } => vec![*a, *col],
            Op::LayerNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
            Op::RowOuter { a, b, .. } => vec![*a, *b],
            Op::RowMatVec { m, x, .. } | Op::RowVecMat { x, m, .. } => vec![*m, *x],
        }
    }

    /// Accumulates the parents' gradients given the output value and its gradient.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        g: &[f64],
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |id: usize| -> &Tensor { &nodes[id].value };
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |s| add_into(s, g));
                accumulate(grads, nodes, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, |s| add_into(s, g));
                accumulate(grads, nodes, *b, |s| {
                    for (x, gv) in s.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |s| {
                    for ((x, gv), y) in s.iter_mut().zip(g).zip(bv.data()) {
                        *x += gv * y;
                    }
                });
                accumulate(grads, nodes, *b, |s| {
                    for ((x, gv), y) in s.iter_mut().zip(g).zip(av.data()) {
                        *x += gv * y;
                    }
                });
            }
            Op::Scale(a, c) => accumulate(grads, nodes, *a, |s| {
                for (x, gv) in s.iter_mut().zip(g) {
                    *x += c * gv;
                }
            }),
            Op::AddRow { a, bias } => {
                accumulate(grads, nodes, *a, |s| add_into(s, g));
                let d = val(*bias).len();
                accumulate(grads, nodes, *bias, |s| {
                    if d > 0 {
                        for row in g.chunks(d) {
                            add_into(s, row);
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |s| matmul_bt_acc(g, bv.data(), s, *m, *n, *k));
                accumulate(grads, nodes, *b, |s| matmul_at_acc(av.data(), g, s, *m, *k, *n));
            }
            Op::Biaffine { a, w, b, dims } => {
                biaffine_backward(g, val(*a), val(*w), val(*b), *dims, grads, nodes, (*a, *w, *b))
            }
            Op::Act(a, act) => {
                let x = val(*a);
                accumulate(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * act.derivative(x.data()[i], out.data()[i]);
                    }
                });
            }
            // masked entries have y = 0 and receive no gradient
            Op::Softmax(a) => {
                let d = out.last_dim();
                accumulate(grads, nodes, *a, |s| {
                    if d == 0 {
                        return;
                    }
                    for ((srow, yrow), grow) in
                        s.chunks_mut(d).zip(out.data().chunks(d)).zip(g.chunks(d))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let c = val(*logits).last_dim();
                accumulate(grads, nodes, *logits, |s| {
                    for (r, &y) in gold.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += g[0] * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Nll { probs, gold } => {
                let p = val(*probs);
                let c = p.last_dim();
                accumulate(grads, nodes, *probs, |s| {
                    for (r, &y) in gold.iter().enumerate() {
                        s[r * c + y] -= g[0] / p.data()[r * c + y];
                    }
                });
            }
            Op::Bce { p, gold } => {
                let pv = val(*p);
                accumulate(grads, nodes, *p, |s| {
                    for (i, (&x, &y)) in pv.data().iter().zip(gold).enumerate() {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&x) {
                            s[i] += g[0] * (-y / x + (1.0 - y) / (1.0 - x));
                        }
                    }
                });
            }
            Op::Sum(a) => accumulate(grads, nodes, *a, |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    accumulate(grads, nodes, p, |s| {
                        for r in 0..rows {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    accumulate(grads, nodes, p, |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let d = row_width(val(*a));
                accumulate(grads, nodes, *a, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { a, start, width } => {
                let d = val(*a).last_dim();
                accumulate(grads, nodes, *a, |s| {
                    if *width == 0 {
                        return;
                    }
                    for (r, grow) in g.chunks(*width).enumerate() {
                        add_into(&mut s[r * d + start..r * d + start + width], grow);
                    }
                });
            }
            Op::Reshape(a) => accumulate(grads, nodes, *a, |s| add_into(s, g)),
            Op::Transpose { a, rows, cols } => accumulate(grads, nodes, *a, |s| {
                for i in 0..*rows {
                    for j in 0..*cols {
                        s[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            Op::SegmentMax { a, argmax } => {
                let d = val(*a).last_dim();
                accumulate(grads, nodes, *a, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            s[src * d + o % d.max(1)] += g[o];
                        }
                    }
                });
            }
            Op::ScatterAddRows { a, targets } => {
                let d = val(*a).last_dim();
                accumulate(grads, nodes, *a, |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        add_into(&mut s[r * d..(r + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                });
            }
            Op::SegmentSoftmax { a, segments, n } => {
                let mut dots = vec![0.0; *n];
                for (i, &sg) in segments.iter().enumerate() {
                    dots[sg] += out.data()[i] * g[i];
                }
                accumulate(grads, nodes, *a, |s| {
                    for (i, &sg) in segments.iter().enumerate() {
                        s[i] += out.data()[i] * (g[i] - dots[sg]);
                    }
                });
            }
            Op::MulRows { a, col } => {
                let (av, cv) = (val(*a), val(*col));
                let d = av.last_dim();
                accumulate(grads, nodes, *a, |s| {
                    for (r, &c) in cv.data().iter().enumerate() {
                        for j in 0..d {
                            s[r * d + j] += g[r * d + j] * c;
                        }
                    }
                });
                accumulate(grads, nodes, *col, |s| {
                    for r in 0..cv.len() {
                        s[r] += (0..d).map(|j| g[r * d + j] * av.data()[r * d + j]).sum::<f64>();
                    }
                });
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                let d = gm.len();
                accumulate(grads, nodes, *a, |s| {
                    if d == 0 {
                        return;
                    }
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let gx: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(gm.data())
                            .map(|(a, b)| a * b)
                            .collect();
                        let mean_g = gx.iter().sum::<f64>() / d as f64;
                        let mean_gx = gx
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            s[r * d + j] += istd * (gx[j] - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                });
                accumulate(grads, nodes, *gamma, |s| {
                    for (i, (gv, xv)) in g.iter().zip(xhat).enumerate() {
                        s[i % d] += gv * xv;
                    }
                });
                accumulate(grads, nodes, *beta, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += gv;
                    }
                });
            }
            Op::RowOuter { a, b, p, q } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (*p, *q);
                let rows = av.len() / p.max(1);
                accumulate(grads, nodes, *a, |s| {
                    for n in 0..rows {
                        for i in 0..p {
                            s[n * p + i] += (0..q)
                                .map(|j| g[n * p * q + i * q + j] * bv.data()[n * q + j])
                                .sum::<f64>();
                        }
                    }
                });
                accumulate(grads, nodes, *b, |s| {
                    for n in 0..rows {
                        for j in 0..q {
                            s[n * q + j] += (0..p)
                                .map(|i| g[n * p * q + i * q + j] * av.data()[n * p + i])
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::RowMatVec { m, x, p, q } => {
                let (mv, xv) = (val(*m), val(*x));
                let (p, q) = (*p, *q);
                let rows = xv.len() / q.max(1);
                accumulate(grads, nodes, *m, |s| {
                    for n in 0..rows {
                        for i in 0..p {
                            for j in 0..q {
                                s[n * p * q + i * q + j] += g[n * p + i] * xv.data()[n * q + j];
                            }
                        }
                    }
                });
                accumulate(grads, nodes, *x, |s| {
                    for n in 0..rows {
                        for j in 0..q {
                            s[n * q + j] += (0..p)
                                .map(|i| g[n * p + i] * mv.data()[n * p * q + i * q + j])
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::RowVecMat { x, m, p, q } => {
                let (mv, xv) = (val(*m), val(*x));
                let (p, q) = (*p, *q);
                let rows = xv.len() / p.max(1);
                accumulate(grads, nodes, *x, |s| {
                    for n in 0..rows {
                        for i in 0..p {
                            s[n * p + i] += (0..q)
                                .map(|j| g[n * q + j] * mv.data()[n * p * q + i * q + j])
                                .sum::<f64>();
                        }
                    }
                });
                accumulate(grads, nodes, *m, |s| {
                    for n in 0..rows {
                        for i in 0..p {
                            for j in 0..q {
                                s[n * p * q + i * q + j] += xv.data()[n * p + i] * g[n * q + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row width used by row-indexed ops: vectors are treated as columns.
fn row_width(t: &Tensor) -> usize {
    if t.rank() <= 1 {
        1
    } else {
        t.last_dim()
    }
}

#[allow(clippy::too_many_arguments)]
fn biaffine_backward(
    g: &[f64],
    a: &Tensor,
    w: &Tensor,
    b: &Tensor,
    [m, p, k, q]: [usize; 4],
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    (ia, iw, ib): (usize, usize, usize),
) {
    let (ad, wd, bd) = (a.data(), w.data(), b.data());
    // t[c, j] = sum_i a[r, i] w[i, c, j]; u[i, c] = sum_j w[i, c, j] b[r, j]
    accumulate(grads, nodes, ia, |s| {
        for r in 0..m {
            let brow = &bd[r * q..(r + 1) * q];
            for i in 0..p {
                let mut acc = 0.0;
                for c in 0..k {
                    let gc = g[r * k + c];
                    if gc == 0.0 {
                        continue;
                    }
                    let wrow = &wd[(i * k + c) * q..(i * k + c + 1) * q];
                    acc += gc * wrow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
                s[r * p + i] += acc;
            }
        }
    });
    accumulate(grads, nodes, iw, |s| {
        for r in 0..m {
            let brow = &bd[r * q..(r + 1) * q];
            for i in 0..p {
                let ai = ad[r * p + i];
                if ai == 0.0 {
                    continue;
                }
                for c in 0..k {
                    let coef = ai * g[r * k + c];
                    let srow = &mut s[(i * k + c) * q..(i * k + c + 1) * q];
                    for (x, y) in srow.iter_mut().zip(brow) {
                        *x += coef * y;
                    }
                }
            }
        }
    });
    accumulate(grads, nodes, ib, |s| {
        let mut t = vec![0.0; k * q];
        for r in 0..m {
            t.iter_mut().for_each(|x| *x = 0.0);
            matmul_acc(&ad[r * p..(r + 1) * p], wd, &mut t, 1, p, k * q);
            for c in 0..k {
                let gc = g[r * k + c];
                for j in 0..q {
                    s[r * q + j] += gc * t[c * q + j];
                }
            }
        }
    });
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn same_graph(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.graph, b.graph),
        "vars from different graphs"
    );
}

impl<'g> Var<'g> {
    fn elementwise(
        &self,
        other: &Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        same_graph(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, op, name)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "hadamard", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::Scale(self.id, c), "scale")
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        same_graph(self, bias);
        let (a, b) = (self.value(), bias.value());
        if b.rank() != 1 || a.last_dim() != b.len() || a.rank() == 0 {
            return Err(mismatch("add_row", &a, &b));
        }
        let d = b.len();
        let mut data = a.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                add_into(row, b.data());
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
            "add_row",
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        same_graph(self, other);
        let (a, b) = (self.value(), other.value());
        expect_rank("matmul", &a, 2)?;
        expect_rank("matmul", &b, 2)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if b.shape()[0] != k {
            return Err(mismatch("matmul", &a, &b));
        }
        let mut c = vec![0.0; m * n];
        matmul_acc(a.data(), b.data(), &mut c, m, k, n);
        self.graph.push(
            Tensor::new(vec![m, n], c)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    /// Row-wise bilinear form: `out[r,c] = sum_ij self[r,i] w[i,c,j] right[r,j]`
    /// for `self: [m,p]`, `w: [p,k,q]`, `right: [m,q]`.
    pub fn biaffine(&self, w: &Var<'g>, right: &Var<'g>) -> Result<Var<'g>> {
        same_graph(self, w);
        same_graph(self, right);
        let (a, wt, b) = (self.value(), w.value(), right.value());
        expect_rank("biaffine", &a, 2)?;
        expect_rank("biaffine", &wt, 3)?;
        expect_rank("biaffine", &b, 2)?;
        let (m, p) = (a.shape()[0], a.shape()[1]);
        let (k, q) = (wt.shape()[1], wt.shape()[2]);
        if wt.shape()[0] != p {
            return Err(mismatch("biaffine", &a, &wt));
        }
        if b.shape() != [m, q] {
            return Err(mismatch("biaffine", &wt, &b));
        }
        let mut out = vec![0.0; m * k];
        let mut t = vec![0.0; k * q];
        for r in 0..m {
            t.iter_mut().for_each(|x| *x = 0.0);
            matmul_acc(&a.data()[r * p..(r + 1) * p], wt.data(), &mut t, 1, p, k * q);
            let brow = &b.data()[r * q..(r + 1) * q];
            for c in 0..k {
                out[r * k + c] = t[c * q..(c + 1) * q]
                    .iter()
                    .zip(brow)
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        self.graph.push(
            Tensor::new(vec![m, k], out)?,
            Op::Biaffine {
                a: self.id,
                w: w.id,
                b: right.id,
                dims: [m, p, k, q],
            },
            "biaffine",
        )
    }

    pub fn activation(&self, act: Activation) -> Result<Var<'g>> {
        if act == Activation::Identity {
            return Ok(*self);
        }
        let a = self.value();
        let data = a.data().iter().map(|&x| act.apply(x)).collect();
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::Act(self.id, act), "activation")
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.activation(Activation::Sigmoid)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let a = self.value();
        let d = a.last_dim();
        if d == 0 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "empty axis".into(),
            });
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::Softmax(self.id), "softmax")
    }

    /// Row softmax of a `[n,m]` matrix where entries with `mask == false` get
    /// probability exactly zero and never take part in the max or the sum.
    pub fn masked_softmax(&self, mask: Arc<Vec<bool>>) -> Result<Var<'g>> {
        let a = self.value();
        expect_rank("masked_softmax", &a, 2)?;
        if mask.len() != a.len() {
            return Err(TensorError::Invalid {
                op: "masked_softmax",
                msg: format!("mask has {} entries for {:?}", mask.len(), a.shape()),
            });
        }
        let d = a.last_dim();
        let mut data = vec![0.0; a.len()];
        for r in 0..a.rows() {
            let x = &a.data()[r * d..(r + 1) * d];
            let mk = &mask[r * d..(r + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for (v, &ok) in x.iter().zip(mk) {
                if ok && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "masked_softmax",
                    msg: format!("row {r} has no visible entry"),
                });
            }
            let out = &mut data[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for j in 0..d {
                if mk[j] {
                    out[j] = (x[j] - max).exp();
                    sum += out[j];
                }
            }
            for j in 0..d {
                if mk[j] {
                    out[j] /= sum;
                }
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Softmax(self.id),
            "masked_softmax",
        )
    }

    /// Summed cross-entropy `-log softmax(row)[gold]` over the rows of
    /// `[n, C]` logits (or a single `[C]` vector).
    pub fn cross_entropy(&self, gold: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.last_dim();
        let rows = if a.rank() <= 1 { 1 } else { a.rows() };
        if a.rank() == 0 || gold.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} gold labels for logits {:?}", gold.len(), a.shape()),
            });
        }
        let mut probs = a.data().to_vec();
        let mut loss = 0.0;
        for (r, &y) in gold.iter().enumerate() {
            if y >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    len: c,
                });
            }
            let row = &a.data()[r * c..(r + 1) * c];
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                gold: gold.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Summed negative log-likelihood `-log p[gold]` over rows of probabilities.
    pub fn nll(&self, gold: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.last_dim();
        let rows = if a.rank() <= 1 { 1 } else { a.rows() };
        if a.rank() == 0 || gold.len() != rows {
            return Err(TensorError::Invalid {
                op: "nll",
                msg: format!("{} gold labels for probabilities {:?}", gold.len(), a.shape()),
            });
        }
        let mut loss = 0.0;
        for (r, &y) in gold.iter().enumerate() {
            if y >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll",
                    index: y,
                    len: c,
                });
            }
            loss -= a.data()[r * c + y].ln();
        }
        self.graph.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs: self.id,
                gold: gold.to_vec(),
            },
            "nll",
        )
    }

    /// Summed binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&self, gold: &[f64]) -> Result<Var<'g>> {
        let a = self.value();
        if gold.len() != a.len() {
            return Err(TensorError::Invalid {
                op: "bce",
                msg: format!("{} targets for {} probabilities", gold.len(), a.len()),
            });
        }
        let loss: f64 = a
            .data()
            .iter()
            .zip(gold)
            .map(|(&p, &y)| bce_value(p, y))
            .sum();
        self.graph.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: self.id,
                gold: gold.to_vec(),
            },
            "bce",
        )
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = (*self.value()).clone();
        let t = a.reshaped(shape.to_vec())?;
        self.graph.push(t, Op::Reshape(self.id), "reshape")
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let a = self.value();
        expect_rank("transpose", &a, 2)?;
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = a.data()[i * cols + j];
            }
        }
        self.graph.push(
            Tensor::new(vec![cols, rows], data)?,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
            "transpose",
        )
    }

    /// Picks rows of a `[n, d]` matrix (or entries of a `[n]` vector).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.rank() == 0 {
            return Err(TensorError::Rank {
                op: "gather_rows",
                expected: 1,
                got: vec![],
            });
        }
        let n = a.shape()[0];
        let d = row_width(&a);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&a.data()[i * d..(i + 1) * d]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        self.graph.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn row(&self, i: usize) -> Result<Var<'g>> {
        let r = self.gather_rows(&[i])?;
        let d = self.value().last_dim();
        r.reshape(&[d])
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'g>> {
        let a = self.value();
        let d = a.last_dim();
        if a.rank() == 0 || start + width > d {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {:?}", start + width, a.shape()),
            });
        }
        let rows = a.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * d + start..r * d + start + width]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        self.graph.push(
            Tensor::new(shape, data)?,
            Op::SliceCols {
                a: self.id,
                start,
                width,
            },
            "slice_cols",
        )
    }

    /// Elementwise maximum over the rows of each segment: `self` is `[I, d]`,
    /// `segments[i] < n`; the result is `[n, d]`. Ties go to the lowest row;
    /// empty segments yield zeros.
    pub fn segment_max(&self, segments: &[usize], n: usize) -> Result<Var<'g>> {
        let a = self.value();
        expect_rank("segment_max", &a, 2)?;
        check_segments("segment_max", &a, segments, n)?;
        let d = a.last_dim();
        let mut out = vec![0.0; n * d];
        let mut argmax = vec![usize::MAX; n * d];
        for (r, &sg) in segments.iter().enumerate() {
            for j in 0..d {
                let o = sg * d + j;
                let v = a.data()[r * d + j];
                if argmax[o] == usize::MAX || v > out[o] {
                    out[o] = v;
                    argmax[o] = r;
                }
            }
        }
        self.graph.push(
            Tensor::new(vec![n, d], out)?,
            Op::SegmentMax { a: self.id, argmax },
            "segment_max",
        )
    }

    /// `out[targets[i]] += self[i]` for `self: [I, d]`, giving `[n, d]`.
    pub fn scatter_add_rows(&self, targets: &[usize], n: usize) -> Result<Var<'g>> {
        let a = self.value();
        expect_rank("scatter_add_rows", &a, 2)?;
        check_segments("scatter_add_rows", &a, targets, n)?;
        let d = a.last_dim();
        let mut out = vec![0.0; n * d];
        for (r, &t) in targets.iter().enumerate() {
            add_into(&mut out[t * d..(t + 1) * d], &a.data()[r * d..(r + 1) * d]);
        }
        self.graph.push(
            Tensor::new(vec![n, d], out)?,
            Op::ScatterAddRows {
                a: self.id,
                targets: targets.to_vec(),
            },
            "scatter_add_rows",
        )
    }

    /// Softmax of a `[I]` vector within each segment.
    pub fn segment_softmax(&self, segments: &[usize], n: usize) -> Result<Var<'g>> {
        let a = self.value();
        expect_rank("segment_softmax", &a, 1)?;
        check_segments("segment_softmax", &a, segments, n)?;
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&v, &sg) in a.data().iter().zip(segments) {
            if v > max[sg] {
                max[sg] = v;
            }
        }
        let mut out: Vec<f64> = a
            .data()
            .iter()
            .zip(segments)
            .map(|(&v, &sg)| (v - max[sg]).exp())
            .collect();
        let mut sums = vec![0.0; n];
        for (&v, &sg) in out.iter().zip(segments) {
            sums[sg] += v;
        }
        for (v, &sg) in out.iter_mut().zip(segments) {
            *v /= sums[sg];
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::SegmentSoftmax {
                a: self.id,
                segments: segments.to_vec(),
                n,
            },
            "segment_softmax",
        )
    }

    /// Scales row `r` of a `[n, d]` matrix by `col[r]`.
    pub fn mul_rows(&self, col: &Var<'g>) -> Result<Var<'g>> {
        same_graph(self, col);
        let (a, c) = (self.value(), col.value());
        expect_rank("mul_rows", &a, 2)?;
        if c.rank() != 1 || c.len() != a.shape()[0] {
            return Err(mismatch("mul_rows", &a, &c));
        }
        let d = a.last_dim();
        let mut data = a.data().to_vec();
        for (r, &s) in c.data().iter().enumerate() {
            for x in &mut data[r * d..(r + 1) * d] {
                *x *= s;
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::MulRows {
                a: self.id,
                col: col.id,
            },
            "mul_rows",
        )
    }

    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        same_graph(self, gamma);
        let (a, gm, bt) = (self.value(), gamma.value(), beta.value());
        let d = a.last_dim();
        if gm.shape() != [d] || bt.shape() != [d] || a.rank() == 0 {
            return Err(mismatch("layer_norm", &a, &gm));
        }
        let rows = a.rows();
        let mut xhat = vec![0.0; a.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let x = &a.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (x[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Row-wise outer product: `[N,p] x [N,q] -> [N, p*q]` (p-major).
    pub fn row_outer(&self, other: &Var<'g>) -> Result<Var<'g>> {
        same_graph(self, other);
        let (a, b) = (self.value(), other.value());
        expect_rank("row_outer", &a, 2)?;
        expect_rank("row_outer", &b, 2)?;
        let (rows, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if b.shape()[0] != rows {
            return Err(mismatch("row_outer", &a, &b));
        }
        let mut out = Vec::with_capacity(rows * p * q);
        for n in 0..rows {
            for i in 0..p {
                let ai = a.data()[n * p + i];
                out.extend(b.data()[n * q..(n + 1) * q].iter().map(|bj| ai * bj));
            }
        }
        self.graph.push(
            Tensor::new(vec![rows, p * q], out)?,
            Op::RowOuter {
                a: self.id,
                b: other.id,
                p,
                q,
            },
            "row_outer",
        )
    }

    /// Treats each row of `self: [N, p*q]` as a `[p, q]` matrix and multiplies
    /// it by the matching row of `x: [N, q]`, giving `[N, p]`.
    pub fn row_matvec(&self, x: &Var<'g>, p: usize) -> Result<Var<'g>> {
        same_graph(self, x);
        let (m, xv) = (self.value(), x.value());
        expect_rank("row_matvec", &m, 2)?;
        expect_rank("row_matvec", &xv, 2)?;
        let (rows, q) = (xv.shape()[0], xv.shape()[1]);
        if m.shape() != [rows, p * q] {
            return Err(mismatch("row_matvec", &m, &xv));
        }
        let mut out = vec![0.0; rows * p];
        for n in 0..rows {
            let xr = &xv.data()[n * q..(n + 1) * q];
            for i in 0..p {
                let mr = &m.data()[n * p * q + i * q..n * p * q + (i + 1) * q];
                out[n * p + i] = mr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        self.graph.push(
            Tensor::new(vec![rows, p], out)?,
            Op::RowMatVec {
                m: self.id,
                x: x.id,
                p,
                q,
            },
            "row_matvec",
        )
    }

    /// Row-vector times per-row matrix: `self: [N, p]`, `m: [N, p*q]` viewed
    /// as `[p, q]`, giving `[N, q]`.
    pub fn row_vecmat(&self, m: &Var<'g>, q: usize) -> Result<Var<'g>> {
        same_graph(self, m);
        let (xv, mv) = (self.value(), m.value());
        expect_rank("row_vecmat", &xv, 2)?;
        expect_rank("row_vecmat", &mv, 2)?;
        let (rows, p) = (xv.shape()[0], xv.shape()[1]);
        if mv.shape() != [rows, p * q] {
            return Err(mismatch("row_vecmat", &xv, &mv));
        }
        let mut out = vec![0.0; rows * q];
        for n in 0..rows {
            for i in 0..p {
                let xi = xv.data()[n * p + i];
                let mr = &mv.data()[n * p * q + i * q..n * p * q + (i + 1) * q];
                for (o, mj) in out[n * q..(n + 1) * q].iter_mut().zip(mr) {
                    *o += xi * mj;
                }
            }
        }
        self.graph.push(
            Tensor::new(vec![rows, q], out)?,
            Op::RowVecMat {
                x: self.id,
                m: m.id,
                p,
                q,
            },
            "row_vecmat",
        )
    }
}

fn check_segments(op: &'static str, a: &Tensor, segments: &[usize], n: usize) -> Result<()> {
    let rows = a.shape()[0];
    if segments.len() != rows {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{} segment ids for {} rows", segments.len(), rows),
        });
    }
    if let Some(&bad) = segments.iter().find(|&&s| s >= n) {
        return Err(TensorError::IndexOutOfRange {
            op,
            index: bad,
            len: n,
        });
    }
    Ok(())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of a plain slice (no tape).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

impl Graph {
    /// Last-axis concatenation. All parts must agree on the leading dims.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no parts".into(),
        })?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for v in &values[1..] {
            if v.rank() != values[0].rank() || &v.shape()[..v.rank().saturating_sub(1)] != lead {
                return Err(mismatch("concat", &values[0], v));
            }
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = values[0].shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = total,
            None => shape.push(total),
        }
        self.push(
            Tensor::new(shape, data)?,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
                widths,
            },
            "concat",
        )
    }

    /// Stacks `[n_i, d]` matrices (or `[d]` vectors) along the first axis.
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = values.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        };
        let d = first.last_dim();
        let mut rows = 0;
        for v in &values {
            if v.last_dim() != d || v.rank() == 0 {
                return Err(mismatch("concat_rows", first, v));
            }
            rows += if v.rank() == 1 { 1 } else { v.rows() };
        }
        let mut data = Vec::with_capacity(rows * d);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            "concat_rows",
        )
    }

    /// Elementwise maximum over a nonempty list of equally shaped vectors.
    pub fn max_over<'g>(&'g self, rows: &[Var<'g>]) -> Result<Var<'g>> {
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "max_over",
                msg: "empty set".into(),
            });
        }
        let d = rows[0].value().len();
        let stacked = self.concat_rows(rows)?;
        stacked.segment_max(&vec![0; rows.len()], 1)?.reshape(&[d])
    }
}
