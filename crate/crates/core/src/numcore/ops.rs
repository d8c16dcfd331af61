use super::kernels::{self, ConvDims};
use super::tape::{accumulate, Fault, Node};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Recorded operation. Inputs are node indices on the owning tape.
pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ScaleChannels { x: usize, s: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    MatVec { m: usize, v: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    L2Normalize { a: usize, norm: T },
    Dot { a: usize, b: usize },
    Sum { a: usize },
    Stack { parts: Vec<usize> },
    Row { a: usize, index: usize, width: usize },
    Slice { a: usize, start: usize, len: usize },
    Reshape { a: usize },
    MatchingLoss { logits: usize, weights: Vec<T>, probs: Vec<T>, cols: usize },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ScaleChannels { x, s } => vec![*x, *s],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | Dot { a, b } => vec![*a, *b],
            MatVec { m, v, .. } => vec![*m, *v],
            Stack { parts } => parts.clone(),
            MaxPool2 { x, .. } => vec![*x],
            Transpose { a, .. }
            | Scale { a, .. }
            | Relu { a }
            | Tanh { a }
            | Sigmoid { a }
            | Softmax { a }
            | L2Normalize { a, .. }
            | Sum { a }
            | Row { a, .. }
            | Slice { a, .. }
            | Reshape { a } => vec![*a],
            MatchingLoss { logits, .. } => vec![*logits],
        }
    }

    /// Propagates `dy` (gradient w.r.t. node `id`) into the op's inputs.
    pub(crate) fn backward(
        &self,
        id: usize,
        dy: &[T],
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
        fault: Option<Fault>,
    ) {
        let val = |i: usize| nodes[i].value.data();
        let out = nodes[id].value.data();
        let mut acc = |i: usize, g: Vec<T>| accumulate(nodes, grads, i, g);
        match self {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (mut dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), dy, dims);
                if fault == Some(Fault::ConvBackwardSign) {
                    dx.iter_mut().for_each(|v| *v = -*v);
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = nodes[*x].value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                let gam = val(*gamma);
                let n = T::lit((batch * plane) as f64);
                let mut dx = vec![T::zero(); dy.len()];
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for c in 0..channels {
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for b in 0..batch {
                        let off = (b * channels + c) * plane;
                        for i in off..off + plane {
                            sum_dy += dy[i];
                            sum_dy_xhat += dy[i] * xhat[i];
                        }
                    }
                    dgamma[c] = sum_dy_xhat;
                    dbeta[c] = sum_dy;
                    let scale = gam[c] * inv_std[c];
                    for b in 0..batch {
                        let off = (b * channels + c) * plane;
                        for i in off..off + plane {
                            dx[i] = if *batch_stats {
                                scale * (dy[i] - sum_dy / n - xhat[i] * sum_dy_xhat / n)
                            } else {
                                scale * dy[i]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ScaleChannels { x, s } => {
                let shape = nodes[*x].value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                let (xv, sv) = (val(*x), val(*s));
                let mut dx = vec![T::zero(); dy.len()];
                let mut ds = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for i in off..off + plane {
                            dx[i] = dy[i] * sv[c];
                            ds[c] += dy[i] * xv[i];
                        }
                    }
                }
                acc(*x, dx);
                acc(*s, ds);
            }
            Op::MatMul { a, b, m, k, n } => {
                let bt = kernels::transpose(val(*b), *k, *n);
                let at = kernels::transpose(val(*a), *m, *k);
                acc(*a, kernels::matmul(dy, &bt, *m, *n, *k));
                acc(*b, kernels::matmul(&at, dy, *k, *m, *n));
            }
            Op::Transpose { a, rows, cols } => {
                acc(*a, kernels::transpose(dy, *cols, *rows));
            }
            Op::MatVec { m, v, rows, cols } => {
                let (mv, vv) = (val(*m), val(*v));
                let mut dm = vec![T::zero(); rows * cols];
                let mut dv = vec![T::zero(); *cols];
                for r in 0..*rows {
                    let g = dy[r];
                    let row = &mv[r * cols..][..*cols];
                    let drow = &mut dm[r * cols..][..*cols];
                    for c in 0..*cols {
                        drow[c] = g * vv[c];
                        dv[c] += g * row[c];
                    }
                }
                acc(*m, dm);
                acc(*v, dv);
            }
            Op::Add { a, b } => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|&g| -g).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                acc(*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale { a, s } => acc(*a, dy.iter().map(|&g| g * *s).collect()),
            Op::Relu { a } => {
                acc(*a, dy.iter().zip(val(*a)).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())
            }
            Op::Tanh { a } => acc(*a, dy.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect()),
            Op::Sigmoid { a } => acc(*a, dy.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect()),
            Op::Softmax { a } => {
                let inner = kernels::dot(dy, out);
                acc(*a, dy.iter().zip(out).map(|(&g, &y)| y * (g - inner)).collect());
            }
            Op::L2Normalize { a, norm } => {
                let inner = kernels::dot(dy, out);
                acc(*a, dy.iter().zip(out).map(|(&g, &y)| (g - y * inner) / *norm).collect());
            }
            Op::Dot { a, b } => {
                let g = dy[0];
                acc(*a, val(*b).iter().map(|&y| g * y).collect());
                acc(*b, val(*a).iter().map(|&x| g * x).collect());
            }
            Op::Sum { a } => acc(*a, vec![dy[0]; val(*a).len()]),
            Op::Stack { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, dy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Row { a, index, width } => {
                let mut g = vec![T::zero(); val(*a).len()];
                g[index * width..][..*width].copy_from_slice(dy);
                acc(*a, g);
            }
            Op::Slice { a, start, len } => {
                let mut g = vec![T::zero(); val(*a).len()];
                g[*start..start + len].copy_from_slice(dy);
                acc(*a, g);
            }
            Op::Reshape { a } => acc(*a, dy.to_vec()),
            Op::MatchingLoss { logits, weights, probs, cols } => {
                let g = dy[0];
                let mut dl = vec![T::zero(); probs.len()];
                for (j, row) in dl.chunks_mut(*cols).enumerate() {
                    let w = &weights[j * cols..][..*cols];
                    let p = &probs[j * cols..][..*cols];
                    let mass: T = w.iter().copied().sum();
                    for t in 0..*cols {
                        row[t] = g * (mass * p[t] - w[t]);
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, data), op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map("scale", a, |x| x * s, Op::Scale { a: a.id, s })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a: a.id })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, |x| x.tanh(), Op::Tanh { a: a.id })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid { a: a.id })
    }

    /// Softmax of a 1-D vector, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.shape(a).len() != 1 {
            return Err(Error::shape("softmax", format!("expected a vector, got {:?}", self.shape(a))));
        }
        let y = softmax_slice(self.data(a));
        self.push("softmax", Tensor::vector(y), Op::Softmax { a: a.id })
    }

    /// `x / ‖x‖₂`; fails on vectors with norm ≤ 1e-12.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.data(a);
        let norm = kernels::dot(x, x).sqrt();
        if !(norm > T::lit(1e-12)) {
            return Err(Error::degenerate("l2_normalize", format!("norm {norm} is not above 1e-12")));
        }
        let data = x.iter().map(|&v| v / norm).collect();
        let shape = self.shape(a).to_vec();
        self.push("l2_normalize", Tensor::from_parts(shape, data), Op::L2Normalize { a: a.id, norm })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let d = kernels::dot(self.data(a), self.data(b));
        self.push("dot", Tensor::scalar(d), Op::Dot { a: a.id, b: b.id })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.data(a).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.id })
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), Op::MatMul { a: a.id, b: b.id, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::transpose(self.data(a), rows, cols);
        self.push("transpose", Tensor::from_parts(vec![cols, rows], data), Op::Transpose { a: a.id, rows, cols })
    }

    /// `[r, c] · [c] -> [r]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check(m)?;
        self.check(v)?;
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape("matvec", format!("{sm:?} · {sv:?}")));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let data = kernels::matmul(self.data(m), self.data(v), rows, cols, 1);
        self.push("matvec", Tensor::vector(data), Op::MatVec { m: m.id, v: v.id, rows, cols })
    }

    /// Stacks equally-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        for &p in parts {
            self.same_shape("stack", first, p)?;
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(self.shape(first));
        let data = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        self.push("stack", Tensor::from_parts(shape, data), Op::Stack { parts: parts.iter().map(|p| p.id).collect() })
    }

    /// Selects `a[index]` along the leading axis.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() < 2 || index >= s[0] {
            return Err(Error::shape("row", format!("index {index} into {s:?}")));
        }
        let rest = s[1..].to_vec();
        let width: usize = rest.iter().product();
        let data = self.data(a)[index * width..][..width].to_vec();
        self.push("row", Tensor::from_parts(rest, data), Op::Row { a: a.id, index, width })
    }

    /// Contiguous sub-vector of a flat view.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        if len == 0 || start + len > self.value(a).numel() {
            return Err(Error::shape("slice", format!("[{start}, {}) of {}", start + len, self.value(a).numel())));
        }
        let data = self.data(a)[start..start + len].to_vec();
        self.push("slice", Tensor::vector(data), Op::Slice { a: a.id, start, len })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", Tensor::from_parts(t.shape().to_vec(), t.into_data()), Op::Reshape { a: a.id })
    }

    /// Episodic matching loss over a `[queries, support]` logit matrix.
    ///
    /// `weights[j][n]` is the coefficient of the log-softmax term for support
    /// sample `n` in query row `j` (1 for a label match, 0 otherwise, or
    /// `1/k` when averaging). Returns `−Σ_j Σ_n w_jn · log softmax_j(n)`.
    pub fn matching_loss(&mut self, logits: Var, weights: &[T]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || weights.len() != s[0] * s[1] {
            return Err(Error::shape("matching_loss", format!("logits {s:?}, {} weights", weights.len())));
        }
        let cols = s[1];
        let mut probs = Vec::with_capacity(weights.len());
        let mut loss = T::zero();
        for (j, row) in self.data(logits).chunks(cols).enumerate() {
            let lse = log_sum_exp(row);
            for (t, &l) in row.iter().enumerate() {
                probs.push((l - lse).exp());
                let w = weights[j * cols + t];
                if w != T::zero() {
                    loss -= w * (l - lse);
                }
            }
        }
        self.push(
            "matching_loss",
            Tensor::scalar(loss),
            Op::MatchingLoss { logits: logits.id, weights: weights.to_vec(), probs, cols },
        )
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.data(s), &[0.5, 0.5]);
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = tape.softmax(b).unwrap();
        assert_abs_diff_eq!(tape.data(s)[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(tape.data(s)[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]));
        let s = tape.softmax(v).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        for g in tape.grad(v).unwrap() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.l2_normalize(a).unwrap();
        assert_abs_diff_eq!(tape.data(n)[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.data(n)[1], 0.8, epsilon = 1e-15);
        let z = tape.constant(Tensor::vector(vec![0.0, 1e-14]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn matmul_shape_errors_name_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] @ [2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::vector(vec![f32::MAX, 1.0]));
        let b = tape.constant(Tensor::vector(vec![f32::MAX, 1.0]));
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { op: "add" })));
    }
}
