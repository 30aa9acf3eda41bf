use rand::Rng;

use super::{gemm, Real, Tensor};
use crate::error::{Result, TsdError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SumChunks {
        x: Var,
        chunk: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SquaredError {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2(op)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Product with the transposed right operand: `a [m, k] · bᵀ` for `b [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = dims2(self.value(a), op)?;
        let (br, bc) = dims2(self.value(b), op)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TsdError::Dimension {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TsdError::Dimension {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.value(x), "add_row")?;
        if self.value(bias).len() != n {
            return Err(TsdError::Dimension {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax { x }, needs))
    }

    /// Per-row normalisation of `[rows, d]` followed by the affine map `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = dims2(self.value(x), "layer_norm")?;
        if d < 2 {
            return Err(TsdError::config("layer_norm needs at least 2 features"));
        }
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(TsdError::Dimension {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = xhat
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&h, (&gg, &bb))| gg * h + bb)
            })
            .collect();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Same-length 1-D cross-correlation with zero padding.
    ///
    /// `x: [c_in, t]`, `kernel: [c_out, c_in, k]` with odd `k`, `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (c_in, t) = dims2(self.value(x), "conv1d")?;
        let (c_out, kc_in, k) = match self.value(kernel).shape()[..] {
            [o, i, k] => (o, i, k),
            _ => {
                return Err(TsdError::Dimension {
                    op: "conv1d",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(kernel).shape().to_vec(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(TsdError::config(format!(
                "conv1d kernel size must be odd, got {k}"
            )));
        }
        if kc_in != c_in || self.value(bias).len() != c_out {
            return Err(TsdError::Dimension {
                op: "conv1d",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(kernel).shape().to_vec(),
            });
        }
        let cols = im2col(self.value(x).data(), c_in, t, k);
        let mut out = vec![T::zero(); c_out * t];
        gemm(
            c_out,
            c_in * k,
            t,
            T::one(),
            self.value(kernel).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut out,
        );
        for (row, &b) in out.chunks_exact_mut(t).zip(self.value(bias).data()) {
            for v in row {
                *v += b;
            }
        }
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        let value = Tensor::new(vec![c_out, t], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                cols,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TsdError::Dimension {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let out = transpose_buf(self.value(x).data(), r, c);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, needs))
    }

    /// Stacks `[r_i, c]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TsdError::input("concat_rows of nothing"))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(TsdError::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Joins `[r, c_i]` matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TsdError::input("concat_cols of nothing"))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(TsdError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..start + width` of an `[r, c]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(TsdError::Dimension {
                op: "slice_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r, width], data)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Sums each group of `chunk` consecutive rows: `[r, c] -> [r / chunk, c]`.
    pub fn sum_chunks(&mut self, x: Var, chunk: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "sum_chunks")?;
        if chunk == 0 || r % chunk != 0 {
            return Err(TsdError::config(format!(
                "{r} rows cannot be split into chunks of {chunk}"
            )));
        }
        let mut out = vec![T::zero(); (r / chunk) * c];
        for (i, row) in self.value(x).data().chunks_exact(c).enumerate() {
            let dst = &mut out[(i / chunk) * c..(i / chunk + 1) * c];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r / chunk, c], out)?,
            Op::SumChunks { x, chunk },
            needs,
        ))
    }

    /// Inverted dropout. `rng == None` means evaluation mode, where this is
    /// the identity; so is `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TsdError::config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Scalar `Σ (a - b)²`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(total), Op::SquaredError { a, b }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TsdError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = node.value.shape()[1];
                    acc(*a, &mut |ga| {
                        // ga += g [m,n] · op(b)ᵀ [n,k]
                        gemm(m, n, k, T::one(), &g, false, vb.data(), !*trans_b, T::one(), ga)
                    });
                    acc(*b, &mut |gb| {
                        if *trans_b {
                            // gb [n,k] += gᵀ · a
                            gemm(n, m, k, T::one(), &g, true, va.data(), false, T::one(), gb)
                        } else {
                            // gb [k,n] += aᵀ · g
                            gemm(k, m, n, T::one(), va.data(), true, &g, false, T::one(), gb)
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| add_into(gb, &g));
                }
                Op::Sub { a, b } => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| {
                        for (d, &v) in gb.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    });
                }
                Op::AddRow { x, bias } => {
                    acc(*x, &mut |gx| add_into(gx, &g));
                    acc(*bias, &mut |gb| {
                        let n = gb.len();
                        for row in g.chunks_exact(n) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Scale { x, factor } => {
                    acc(*x, &mut |gx| {
                        for (d, &v) in gx.iter_mut().zip(&g) {
                            *d += v * *factor;
                        }
                    });
                }
                Op::Relu { x } => {
                    let out = node.value.data();
                    acc(*x, &mut |gx| {
                        for ((d, &v), &o) in gx.iter_mut().zip(&g).zip(out) {
                            if o > T::zero() {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Softmax { x } => {
                    let n = node.value.shape()[1];
                    let y = node.value.data();
                    acc(*x, &mut |gx| {
                        for ((gr, yr), dr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.shape()[1];
                    let dn = T::from_usize(d).unwrap();
                    let gvals = nodes[gain.0].value.data();
                    acc(*x, &mut |gx| {
                        for (((gr, hr), dr), &inv) in g
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .zip(inv_std)
                        {
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..d {
                                let dh = gr[j] * gvals[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            for j in 0..d {
                                let dh = gr[j] * gvals[j];
                                dr[j] += inv * (dn * dh - sum_dh - hr[j] * sum_dh_h) / dn;
                            }
                        }
                    });
                    acc(*gain, &mut |gg| {
                        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for gr in g.chunks_exact(d) {
                            add_into(gb, gr);
                        }
                    });
                }
                Op::Conv1d {
                    x,
                    kernel,
                    bias,
                    cols,
                } => {
                    let (c_out, t) = (node.value.shape()[0], node.value.shape()[1]);
                    let kshape = nodes[kernel.0].value.shape();
                    let (c_in, k) = (kshape[1], kshape[2]);
                    acc(*bias, &mut |gb| {
                        for (d, row) in gb.iter_mut().zip(g.chunks_exact(t)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                    acc(*kernel, &mut |gk| {
                        gemm(c_out, t, c_in * k, T::one(), &g, false, cols, true, T::one(), gk)
                    });
                    let kvals = nodes[kernel.0].value.data();
                    acc(*x, &mut |gx| {
                        let mut dcols = vec![T::zero(); c_in * k * t];
                        gemm(c_in * k, c_out, t, T::one(), kvals, true, &g, false, T::zero(), &mut dcols);
                        col2im_add(&dcols, c_in, t, k, gx);
                    });
                }
                Op::Reshape { x } => acc(*x, &mut |gx| add_into(gx, &g)),
                Op::Transpose { x } => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    // out is [r, c]; input was [c, r]
                    let back = transpose_buf(&g, r, c);
                    acc(*x, &mut |gx| add_into(gx, &back));
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        acc(p, &mut |gp| {
                            for (dr, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                add_into(dr, &gr[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.shape()[1];
                    let c = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |gx| {
                        for (dr, gr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                            add_into(&mut dr[*start..*start + w], gr);
                        }
                    });
                }
                Op::SumChunks { x, chunk } => {
                    let c = node.value.shape()[1];
                    acc(*x, &mut |gx| {
                        for (i, dr) in gx.chunks_exact_mut(c).enumerate() {
                            add_into(dr, &g[(i / chunk) * c..(i / chunk + 1) * c]);
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &mut |gx| {
                        for ((d, &v), &m) in gx.iter_mut().zip(&g).zip(mask) {
                            *d += v * m;
                        }
                    });
                }
                Op::SquaredError { a, b } => {
                    let two = T::lit(2.0) * g[0];
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    acc(*a, &mut |ga| {
                        for ((d, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                            *d += two * (x - y);
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((d, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                            *d -= two * (x - y);
                        }
                    });
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    acc(*x, &mut |gx| {
                        for d in gx.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a requires-grad leaf. `None` for leaves the loss does
    /// not depend on, for constants, and for intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_buf<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `cols[(i * k + j), τ] = x[i, τ + j - k/2]`, zero outside the signal.
fn im2col<T: Real>(x: &[T], c_in: usize, t: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let mut cols = vec![T::zero(); c_in * k * t];
    for i in 0..c_in {
        let src = &x[i * t..(i + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(i * k + j) * t..(i * k + j + 1) * t];
            // τ + j - pad in [0, t)
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for tau in lo..hi {
                dst[tau] = src[tau + j - pad];
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], c_in: usize, t: usize, k: usize, gx: &mut [T]) {
    let pad = k / 2;
    for i in 0..c_in {
        let dst = &mut gx[i * t..(i + 1) * t];
        for j in 0..k {
            let src = &cols[(i * k + j) * t..(i * k + j + 1) * t];
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for tau in lo..hi {
                dst[tau + j - pad] += src[tau];
            }
        }
    }
}
