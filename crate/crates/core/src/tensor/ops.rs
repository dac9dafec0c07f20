//! Forward definitions of every primitive recorded on the tape.

use super::tape::{gelu, Op};
use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Scalar loss plus the per-position values it averages.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: Var,
    /// `(row, value)` for every masked-in row, in row order.
    pub per_position: Vec<(usize, T)>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        // fully blocked row: no mass anywhere
        dst.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (*s - max).exp();
        sum = sum + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

/// Row-wise log-softmax into `dst`.
fn log_softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let (arg, max) = src
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    // ln(1 + rest) keeps precision when one logit dominates
    let rest: T = src
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, s)| (*s - max).exp())
        .sum();
    let log_rest = rest.ln_1p();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (*s - max) - log_rest;
    }
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a).shape(), self.value(b).shape());
        if x != y {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    /// `a·b` for `m×k` and `k×n` matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            out.data_mut(),
            false,
        );
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a·bᵀ` for `m×k` and `n×k` matrices.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul_bt", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (1, k as isize),
            out.data_mut(),
            false,
        );
        Ok(self.push(out, Op::MatMulBt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(shape_err("add_row", av.shape(), bv.shape()));
        }
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x = *x + *b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s }, &[a])
    }

    /// Softmax over the last axis, max-subtracted. `-inf` entries get
    /// probability zero.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for (src, dst) in xv.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            softmax_row(src, dst);
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Tensor::zeros(xv.shape());
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, n) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::VocabRange { id, size: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != n {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != m {
                return Err(shape_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(*p).shape(),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(shape_err("slice_rows", xv.shape(), &[start, len]));
        }
        let n = xv.cols();
        let out = Tensor::new(vec![len, n], xv.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![xv.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects (possibly repeated) rows by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= xv.rows() {
                return Err(shape_err("gather_rows", xv.shape(), &[r]));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over `axis` of a matrix: 0 → `1×n`, 1 → `m×1`.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        match axis {
            0 => {
                if m == 0 {
                    return Err(Error::invalid("mean_pool", "no rows to pool"));
                }
                let mut data = vec![T::zero(); n];
                for row in xv.data().chunks(n) {
                    for (d, v) in data.iter_mut().zip(row) {
                        *d = *d + *v;
                    }
                }
                let inv = T::one() / T::from_usize(m).unwrap();
                data.iter_mut().for_each(|d| *d = *d * inv);
                let out = Tensor::new(vec![1, n], data)?;
                Ok(self.push(out, Op::MeanRows { x }, &[x]))
            }
            1 => {
                if n == 0 {
                    return Err(Error::invalid("mean_pool", "no columns to pool"));
                }
                let inv = T::one() / T::from_usize(n).unwrap();
                let data = xv
                    .data()
                    .chunks(n)
                    .map(|row| row.iter().copied().sum::<T>() * inv)
                    .collect();
                let out = Tensor::new(vec![m, 1], data)?;
                Ok(self.push(out, Op::MeanCols { x }, &[x]))
            }
            _ => Err(Error::invalid("mean_pool", format!("axis {axis} out of range"))),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose { x }, &[x])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::invalid("l2_normalize", "zero-norm row"));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Pairwise cosine similarity between the rows of `a` and `b`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        self.matmul_bt(an, bn)
    }

    /// Rotary position rotation of each row, pairing column `j` with
    /// `j + width/2`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n % 2 != 0 || positions.len() != xv.rows() {
            return Err(shape_err("rope", xv.shape(), &[positions.len()]));
        }
        let half = n / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for j in 0..half {
                let freq = base.powf(-(2.0 * j as f64) / n as f64);
                let angle = p as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            for j in 0..half {
                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                dst[j] = src[j] * c - src[j + half] * s;
                dst[j + half] = src[j] * s + src[j + half] * c;
            }
        }
        Ok(self.push(out, Op::Rope { x, cos, sin }, &[x]))
    }

    /// Mean negative log-likelihood of `targets[r]` under row `r` of
    /// `logits`, over rows where the target is present.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<LossOutput<T>> {
        let lv = self.value(logits);
        let v = lv.cols();
        if targets.len() != lv.rows() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let picked: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| (r, t)))
            .collect();
        if picked.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![T::zero(); picked.len() * v];
        let mut logp = vec![T::zero(); v];
        let mut per_position = Vec::with_capacity(picked.len());
        let mut total = T::zero();
        for (k, &(row, target)) in picked.iter().enumerate() {
            if target >= v {
                return Err(Error::VocabRange { id: target, size: v });
            }
            log_softmax_row(lv.row(row), &mut logp);
            for j in 0..v {
                probs[k * v + j] = logp[j].exp();
            }
            let nll = -logp[target];
            per_position.push((row, nll));
            total = total + nll;
        }
        let mean = total / T::from_usize(picked.len()).unwrap();
        let loss = self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: picked,
                probs,
            },
            &[logits],
        );
        Ok(LossOutput { loss, per_position })
    }

    /// Mean over masked-in rows of KL(softmax(p) ‖ softmax(q)). `p_logits` is
    /// a fixed teacher; no gradient flows into it.
    pub fn kl_div(
        &mut self,
        p_logits: &Tensor<T>,
        q_logits: Var,
        mask: &[bool],
    ) -> Result<LossOutput<T>> {
        let qv = self.value(q_logits);
        if p_logits.shape() != qv.shape() {
            return Err(shape_err("kl_div", p_logits.shape(), qv.shape()));
        }
        if mask.len() != qv.rows() {
            return Err(shape_err("kl_div", qv.shape(), &[mask.len()]));
        }
        let v = qv.cols();
        let rows: Vec<usize> = (0..mask.len()).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut p = vec![T::zero(); rows.len() * v];
        let mut qp = vec![T::zero(); rows.len() * v];
        let mut lp = vec![T::zero(); v];
        let mut lq = vec![T::zero(); v];
        let mut per_position = Vec::with_capacity(rows.len());
        let mut total = T::zero();
        for (k, &row) in rows.iter().enumerate() {
            log_softmax_row(p_logits.row(row), &mut lp);
            log_softmax_row(qv.row(row), &mut lq);
            let mut kl = T::zero();
            for j in 0..v {
                let pj = lp[j].exp();
                p[k * v + j] = pj;
                qp[k * v + j] = lq[j].exp();
                if pj > T::zero() {
                    kl = kl + pj * (lp[j] - lq[j]);
                }
            }
            // rounding can push a true zero slightly negative
            let kl = kl.max(T::zero());
            per_position.push((row, kl));
            total = total + kl;
        }
        let mean = total / T::from_usize(rows.len()).unwrap();
        let loss = self.push(
            Tensor::scalar(mean),
            Op::KlDiv {
                q: q_logits,
                rows,
                p,
                qp,
            },
            &[q_logits],
        );
        Ok(LossOutput { loss, per_position })
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[[0.3, -1.0], [2.0, 5.0]]));
        let y = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(y), t.value(m));

        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.constant(Tensor::from_rows(&[[1.0], [1.0]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let (b2, w2) = (b.clone(), w.clone());
        let r = grad_check(
            move |t, x| {
                let bb = t.constant(b2.clone());
                let ww = t.constant(w2.clone());
                let y = t.matmul(x, bb)?;
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &a,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let a2 = a.clone();
        let r = grad_check(
            move |t, x| {
                let aa = t.constant(a2.clone());
                let ww = t.constant(w.clone());
                let y = t.matmul(aa, x)?;
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &b,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let x = t.constant(Tensor::from_rows(&[[3.7, f64::NEG_INFINITY]]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
        let x = t.constant(Tensor::from_rows(&[[0.2, super::super::MASK_SENTINEL]]));
        let y = t.softmax(x);
        assert!(t.value(y).data()[1] < 1e-30);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 5]);
        // Probe every output component through a random weighting.
        let w = rand_tensor(&mut rng, &[1, 5]);
        let r = grad_check(
            move |t, x| {
                let y = t.softmax(x);
                let ww = t.constant(w.clone());
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let out = t.cross_entropy(l, &[Some(0)]).unwrap();
        assert!((t.value(out.loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let l = t.constant(Tensor::from_rows(&[[10.0, -10.0]]));
        let out = t.cross_entropy(l, &[Some(0)]).unwrap();
        // -ln(1/(1+e^-20)) = ln(1+e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        assert!((t.value(out.loss).item() - expected).abs() < 1e-20);
        assert!((t.value(out.loss).item() - 2.06e-9).abs() < 1e-11);

        let l = t.constant(Tensor::from_rows(&[[0.1, 0.5, -0.3], [1.0, 0.0, 0.0], [0.2, 0.2, 0.9]]));
        let out = t.cross_entropy(l, &[Some(2), None, Some(0)]).unwrap();
        let mean = out.per_position.iter().map(|p| p.1).sum::<f64>() / out.per_position.len() as f64;
        assert!((mean - t.value(out.loss).item()).abs() < 1e-15);
        assert_eq!(out.per_position.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2]);

        assert!(matches!(t.cross_entropy(l, &[None, None, None]), Err(Error::EmptyLoss)));
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::<f64>::new();
        let p = Tensor::from_rows(&[[0.3, -1.2, 2.0]]);
        let q = t.constant(p.clone());
        let out = t.kl_div(&p, q, &[true]).unwrap();
        assert!(t.value(out.loss).item().abs() < 1e-15);

        let p = Tensor::from_rows(&[[20.0, -20.0]]);
        let q = t.constant(Tensor::from_rows(&[[0.0, 0.0]]));
        let out = t.kl_div(&p, q, &[true]).unwrap();
        assert!((t.value(out.loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let q = t.constant(Tensor::zeros(&[1, 3]));
        assert!(t.kl_div(&p, q, &[true]).is_err());
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        for _ in 0..100 {
            let p = rand_tensor(&mut rng, &[1, 6]).map(|x| 4.0 * x);
            let q = t.constant(rand_tensor(&mut rng, &[1, 6]).map(|x| 4.0 * x));
            let out = t.kl_div(&p, q, &[true]).unwrap();
            assert!(t.value(out.loss).item() >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let r = grad_check(
            |t, x| Ok(t.cross_entropy(x, &[Some(1), None, Some(4), Some(0)])?.loss),
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let p = rand_tensor(&mut rng, &[4, 5]);
        let r = grad_check(
            move |t, x| Ok(t.kl_div(&p, x, &[true, true, false, true])?.loss),
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    /// Finite-difference checks for the remaining primitives, each composed
    /// with a random linear read-out so every output element matters.
    #[test]
    fn remaining_primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let g = rand_tensor(&mut rng, &[1, 4]);
        let bvec = rand_tensor(&mut rng, &[1, 4]);
        let other = rand_tensor(&mut rng, &[3, 4]);
        let table_ids = [2usize, 0, 2, 1];

        type Case = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;
        let o1 = other.clone();
        let o2 = other.clone();
        let o3 = other.clone();
        let (g1, b1) = (g.clone(), bvec.clone());
        let b2 = bvec.clone();
        let cases: Vec<(&str, Case)> = vec![
            ("add", Box::new(move |t, x| { let o = t.constant(o1.clone()); t.add(x, o) })),
            ("sub", Box::new(move |t, x| { let o = t.constant(o2.clone()); t.sub(o, x) })),
            ("scale", Box::new(|t, x| Ok(t.scale(x, -1.7)))),
            ("layer_norm", Box::new(move |t, x| {
                let gg = t.constant(g1.clone());
                let bb = t.constant(b1.clone());
                t.layer_norm(x, gg, bb, 1e-5)
            })),
            ("gelu", Box::new(|t, x| Ok(t.gelu(x)))),
            ("embedding", Box::new(move |t, x| t.embedding(x, &table_ids))),
            ("concat_rows", Box::new(|t, x| { let y = t.scale(x, 2.0); t.concat_rows(&[x, y]) })),
            ("concat_cols", Box::new(|t, x| { let y = t.gelu(x); t.concat_cols(&[y, x]) })),
            ("slice_rows", Box::new(|t, x| t.slice_rows(x, 1, 2))),
            ("slice_cols", Box::new(|t, x| t.slice_cols(x, 1, 2))),
            ("gather_rows", Box::new(|t, x| t.gather_rows(x, &[2, 2, 0]))),
            ("mean_pool0", Box::new(|t, x| t.mean_pool(x, 0))),
            ("mean_pool1", Box::new(|t, x| t.mean_pool(x, 1))),
            ("l2_normalize", Box::new(|t, x| t.l2_normalize(x))),
            ("cosine_sim", Box::new(move |t, x| { let o = t.constant(o3.clone()); t.cosine_sim_matrix(x, o) })),
            ("cosine_self", Box::new(|t, x| t.cosine_sim_matrix(x, x))),
            ("matmul_bt", Box::new(|t, x| { let y = t.gelu(x); t.matmul_bt(x, y) })),
            ("transpose", Box::new(|t, x| Ok(t.transpose(x)))),
            ("add_row", Box::new(move |t, x| { let b = t.constant(b2.clone()); t.add_row(x, b) })),
            ("add_row_bias", Box::new(|t, x| { let m = t.constant(Tensor::full(&[2, 4], 0.5)); let b = t.mean_pool(x, 0)?; t.add_row(m, b) })),
            ("rope", Box::new(|t, x| t.rope(x, &[0, 3, 7], 10000.0))),
            ("softmax", Box::new(|t, x| Ok(t.softmax(x)))),
            ("mul_self", Box::new(|t, x| t.mul(x, x))),
        ];
        for (name, f) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let f: std::rc::Rc<Case> = std::rc::Rc::new(f);
            let probe_shape = {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), true);
                let y = f(&mut t, xv).unwrap();
                t.value(y).shape().to_vec()
            };
            let w = rand_tensor(&mut rng, &probe_shape);
            let f2 = f.clone();
            let r = grad_check(
                move |t, x| {
                    let y = f2(t, x)?;
                    let ww = t.constant(w.clone());
                    let y = t.mul(y, ww)?;
                    Ok(t.sum(y))
                },
                &x,
                EPS,
                TOL,
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn layer_norm_gain_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let g = rand_tensor(&mut rng, &[1, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let (x1, w1) = (x.clone(), w.clone());
        let r = grad_check(
            move |t, gg| {
                let xx = t.constant(x1.clone());
                let bb = t.constant(Tensor::zeros(&[1, 4]));
                let y = t.layer_norm(xx, gg, bb, 1e-5)?;
                let ww = t.constant(w1.clone());
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &g,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            move |t, bb| {
                let xx = t.constant(x.clone());
                let gg = t.constant(g.clone());
                let y = t.layer_norm(xx, gg, bb, 1e-5)?;
                let ww = t.constant(w.clone());
                let y = t.mul(y, ww)?;
                Ok(t.sum(y))
            },
            &Tensor::zeros(&[1, 4]),
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let y = t.gelu(v);
            let z = t.matmul_bt(y, v).unwrap();
            let s = t.softmax(z);
            let l = t.sum(s);
            let l2 = t.l2_normalize(v).unwrap();
            let l2 = t.sum(l2);
            let l = t.add(l, l2).unwrap();
            t.backward(l).unwrap().get(v).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::<f64>::new();
            let n = v.len();
            let x = t.constant(Tensor::new(vec![1, n], v).unwrap());
            let y = t.softmax(x);
            let s: f64 = t.value(y).data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            proptest::prop_assert!(t.value(y).data().iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn cross_entropy_per_position_non_negative(v in proptest::collection::vec(-30.0f64..30.0, 6), target in 0usize..3) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![2, 3], v).unwrap());
            let out = t.cross_entropy(x, &[Some(target), Some(2 - target)]).unwrap();
            proptest::prop_assert!(out.per_position.iter().all(|p| p.1 >= 0.0));
        }
    }
}
