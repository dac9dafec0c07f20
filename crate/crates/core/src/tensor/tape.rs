use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    MeanRows { x: Var },
    MeanCols { x: Var },
    Sum { x: Var },
    Transpose { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
    KlDiv { q: Var, rows: Vec<usize>, p: Vec<T>, qp: Vec<T> },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Values are immutable once pushed. `backward` replays the record in
/// reverse and is deterministic for a fixed record.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Ops nobody differentiates through don't need their saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let v = self.value(out);
        if v.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", v.shape()),
            ));
        }
        self.backward_with_seed(out, &Tensor::full(v.shape(), T::one()))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(out).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dY·Bᵀ ; dB = Aᵀ·dY
                self.acc(grads, *a, |ga| {
                    T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), ga, true)
                });
                self.acc(grads, *b, |gb| {
                    T::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), gb, true)
                });
            }
            Op::MatMulBt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                // Y = A·Bᵀ: dA = dY·B ; dB = dYᵀ·A
                self.acc(grads, *a, |ga| {
                    T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (k as isize, 1), ga, true)
                });
                self.acc(grads, *b, |gb| {
                    T::gemm(n, m, k, g, (1, n as isize), av.data(), (k as isize, 1), gb, true)
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x = *x - *y;
                    }
                });
            }
            Op::AddRow { a, bias } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let n = out.cols();
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + *gy * *bb;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + *gy * *aa;
                    }
                });
            }
            Op::Scale { a, s } => {
                self.acc(grads, *a, |ga| {
                    for (x, gy) in ga.iter_mut().zip(g) {
                        *x = *x + *gy * *s;
                    }
                });
            }
            Op::Softmax { x } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    for ((gx, gy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: T = gy.iter().zip(y).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            gx[j] = gx[j] + y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                let nf = T::from_usize(n).unwrap();
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let gy = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let d = gy[j] * gv[j];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh[j];
                        }
                        for j in 0..n {
                            let d = gy[j] * gv[j];
                            gx[r * n + j] = gx[r * n + j]
                                + rstd[r] * (d - sum_d / nf - xh[j] * sum_dx / nf);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (gy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gy[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gy in g.chunks(n) {
                        add_into(gb, gy);
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((d, gy), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + *gy * gelu_grad(*xx);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let n = out.cols();
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |gp| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    add_into(&mut gx[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let n = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (r, src) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + w], src);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MeanRows { x } => {
                let xv = self.value(*x);
                let inv = T::one() / T::from_usize(xv.rows()).unwrap();
                self.acc(grads, *x, |gx| {
                    for row in gx.chunks_mut(xv.cols()) {
                        for (d, gy) in row.iter_mut().zip(g) {
                            *d = *d + *gy * inv;
                        }
                    }
                });
            }
            Op::MeanCols { x } => {
                let xv = self.value(*x);
                let inv = T::one() / T::from_usize(xv.cols()).unwrap();
                self.acc(grads, *x, |gx| {
                    for (row, gy) in gx.chunks_mut(xv.cols()).zip(g) {
                        for d in row.iter_mut() {
                            *d = *d + *gy * inv;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.acc(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (out.rows(), out.cols());
                // out is r×c, x is c×r
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = gx[j * r + i] + g[i * c + j];
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            gx[r * n + j] = gx[r * n + j] + (gy[j] - y[j] * dot) / *norm;
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let n = out.cols();
                let half = n / 2;
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        for j in 0..half {
                            let (c, s) = (cos[r * half + j], sin[r * half + j]);
                            let (g1, g2) = (g[r * n + j], g[r * n + j + half]);
                            // transpose of the rotation
                            gx[r * n + j] = gx[r * n + j] + g1 * c + g2 * s;
                            gx[r * n + j + half] = gx[r * n + j + half] - g1 * s + g2 * c;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                self.acc(grads, *logits, |gl| {
                    for (k, &(row, target)) in targets.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let dst = &mut gl[row * v..(row + 1) * v];
                        for j in 0..v {
                            let onehot = if j == target { T::one() } else { T::zero() };
                            dst[j] = dst[j] + scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv { q, rows, p, qp } => {
                let v = self.value(*q).cols();
                let scale = g[0] / T::from_usize(rows.len()).unwrap();
                self.acc(grads, *q, |gq| {
                    for (k, &row) in rows.iter().enumerate() {
                        let dst = &mut gq[row * v..(row + 1) * v];
                        for j in 0..v {
                            dst[j] = dst[j] + scale * (qp[k * v + j] - p[k * v + j]);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
